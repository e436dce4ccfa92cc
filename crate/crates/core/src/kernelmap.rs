//! RBF-χ² exemplar kernel map: each stripe descriptor becomes its vector of
//! kernel similarities to a fixed set of training stripes.

use std::path::Path;

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensorio::Reader;

pub const EXEMPLAR_MAGIC: &[u8; 8] = b"MIFLEXM1";
const MAX_BANDWIDTH_PAIRS: usize = 100_000;

/// χ² histogram distance `Σ (x−y)²/(x+y)`, with 0/0 terms taken as 0.
pub fn chi2_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!(
            "chi2 over lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    if let Some(v) = x.iter().chain(y).find(|v| !(**v >= 0.0)) {
        return Err(Error::Domain(format!("chi2 needs non-negative entries, got {v}")));
    }
    Ok(chi2_unchecked(x, y))
}

#[inline]
fn chi2_unchecked(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| {
            let s = a + b;
            if s > 0.0 {
                (a - b) * (a - b) / s
            } else {
                0.0
            }
        })
        .sum()
}

/// Mean pairwise χ² distance. Uses every pair when there are at most
/// 10⁵ of them, otherwise 10⁵ uniformly sampled pairs from a fixed seed.
pub fn estimate_bandwidth(exemplars: &[Vec<f64>], seed: u64) -> Result<f64> {
    let n = exemplars.len();
    if n < 2 {
        return Err(Error::Config(format!(
            "bandwidth estimation needs at least 2 exemplars, got {n}"
        )));
    }
    let dim = exemplars[0].len();
    if let Some(e) = exemplars.iter().find(|e| e.len() != dim) {
        return Err(Error::Dimension(format!("exemplar length {} != {dim}", e.len())));
    }
    let total_pairs = n * (n - 1) / 2;
    let mean = if total_pairs <= MAX_BANDWIDTH_PAIRS {
        let mut sum = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                sum += chi2_distance(&exemplars[i], &exemplars[j])?;
            }
        }
        sum / total_pairs as f64
    } else {
        let mut rng = rng::stream(seed, "kernel-bandwidth");
        let mut sum = 0.0;
        for _ in 0..MAX_BANDWIDTH_PAIRS {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            sum += chi2_distance(&exemplars[i], &exemplars[j])?;
        }
        sum / MAX_BANDWIDTH_PAIRS as f64
    };
    if !(mean > 0.0) {
        return Err(Error::DegenerateBandwidth(
            "all sampled exemplar pairs are identical".into(),
        ));
    }
    Ok(mean)
}

/// Anchor stripes and the χ²-scale bandwidth of the kernel
/// `exp(−χ²(x, e)/(2·bandwidth))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarSet {
    dim: usize,
    data: Vec<f64>,
    bandwidth: f64,
}

impl ExemplarSet {
    pub fn new(exemplars: Vec<Vec<f64>>, bandwidth: f64) -> Result<Self> {
        let dim = exemplars
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::Config("exemplar set is empty".into()))?;
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(Error::Config(format!("bandwidth must be positive, got {bandwidth}")));
        }
        let mut data = Vec::with_capacity(dim * exemplars.len());
        for e in exemplars {
            if e.len() != dim {
                return Err(Error::Dimension(format!("exemplar length {} != {dim}", e.len())));
            }
            if let Some(v) = e.iter().find(|v| !(**v >= 0.0)) {
                return Err(Error::Domain(format!("negative exemplar entry {v}")));
            }
            data.extend(e);
        }
        Ok(Self { dim, data, bandwidth })
    }

    /// Build with the mean-pairwise-χ² bandwidth.
    pub fn with_estimated_bandwidth(exemplars: Vec<Vec<f64>>, seed: u64) -> Result<Self> {
        let bw = estimate_bandwidth(&exemplars, seed)?;
        Self::new(exemplars, bw)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn exemplar(&self, j: usize) -> &[f64] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = EXEMPLAR_MAGIC.to_vec();
        out.extend((self.len() as u64).to_le_bytes());
        out.extend((self.dim as u64).to_le_bytes());
        out.extend(self.bandwidth.to_le_bytes());
        for v in &self.data {
            out.extend(v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "exemplar file");
        if r.take(8)? != EXEMPLAR_MAGIC {
            return Err(Error::format("exemplar file", "bad magic"));
        }
        let count = r.u64()? as usize;
        let dim = r.u64()? as usize;
        let bandwidth = r.f64()?;
        if dim == 0 {
            return Err(Error::format("exemplar file", "zero dimension"));
        }
        let n = count
            .checked_mul(dim)
            .ok_or_else(|| Error::format("exemplar file", "size overflow"))?;
        let data = r.f64s(n)?;
        r.finish()?;
        Self::new(data.chunks(dim).map(<[f64]>::to_vec).collect(), bandwidth)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Kernel response of one descriptor: entry `j` is `exp(−χ²(x, e_j)/(2·bandwidth))`.
pub fn kernel_map(x: &[f64], ex: &ExemplarSet) -> Result<DVector<f64>> {
    if x.len() != ex.dim {
        return Err(Error::Dimension(format!(
            "descriptor length {} != exemplar dim {}",
            x.len(),
            ex.dim
        )));
    }
    if let Some(v) = x.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Domain(format!("negative descriptor entry {v}")));
    }
    let scale = -0.5 / ex.bandwidth;
    Ok(DVector::from_iterator(
        ex.len(),
        (0..ex.len()).map(|j| (scale * chi2_unchecked(x, ex.exemplar(j))).exp()),
    ))
}

/// Kernel responses for many descriptors, computed in parallel; output order
/// matches input order.
pub fn kernel_map_batch(xs: &[&[f64]], ex: &ExemplarSet) -> Result<Vec<DVector<f64>>> {
    xs.par_iter().map(|x| kernel_map(x, ex)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn chi2_examples() {
        let x = [0.2, 0.3, 0.5];
        assert_eq!(chi2_distance(&x, &x).unwrap(), 0.0);
        assert_eq!(chi2_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 2.0);
        // (0.5-1)^2/1.5 + (0.5-0)^2/0.5
        assert_relative_eq!(
            chi2_distance(&[0.5, 0.5], &[1.0, 0.0]).unwrap(),
            2.0 / 3.0,
            epsilon = 1e-15
        );
        assert_eq!(chi2_distance(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn chi2_errors() {
        assert!(matches!(chi2_distance(&[1.0], &[1.0, 0.0]), Err(Error::Dimension(_))));
        assert!(matches!(chi2_distance(&[-1.0], &[1.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn bandwidth_two_exemplars() {
        let bw = estimate_bandwidth(&[vec![1.0, 0.0], vec![0.0, 1.0]], 0).unwrap();
        assert_eq!(bw, 2.0);
    }

    #[test]
    fn bandwidth_matches_all_pairs_mean() {
        // 4 identical + 1 distinct: only the 4 pairs touching the odd one are nonzero
        let mut ex = vec![vec![1.0, 0.0]; 4];
        ex.push(vec![0.0, 1.0]);
        let bw = estimate_bandwidth(&ex, 3).unwrap();
        assert_relative_eq!(bw, 4.0 * 2.0 / 10.0, epsilon = 1e-15);
        assert_eq!(bw, estimate_bandwidth(&ex, 99).unwrap());
    }

    #[test]
    fn sampled_bandwidth_is_seed_deterministic() {
        let ex: Vec<Vec<f64>> = (0..500).map(|i| vec![1.0 + (i % 7) as f64, 1.0]).collect();
        let a = estimate_bandwidth(&ex, 11).unwrap();
        assert_eq!(a, estimate_bandwidth(&ex, 11).unwrap());
        assert!(a > 0.0);
    }

    #[test]
    fn bandwidth_errors() {
        assert!(matches!(estimate_bandwidth(&[vec![1.0]], 0), Err(Error::Config(_))));
        assert!(matches!(
            estimate_bandwidth(&[vec![1.0], vec![1.0], vec![1.0]], 0),
            Err(Error::DegenerateBandwidth(_))
        ));
    }

    #[test]
    fn kernel_examples() {
        let ex = ExemplarSet::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 1.0).unwrap();
        let r = kernel_map(&[1.0, 0.0], &ex).unwrap();
        assert_eq!(r[0], 1.0);
        // chi2 = 2 = 2*bandwidth -> e^-1
        assert_relative_eq!(r[1], (-1.0f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(r[1], 0.367879441171, epsilon = 1e-12);

        let wide = ExemplarSet::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], 1e12).unwrap();
        let r = kernel_map(&[0.3, 0.7], &wide).unwrap();
        assert!(r.iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn exemplar_file_round_trip() {
        let ex = ExemplarSet::new(vec![vec![0.5, 0.5, 0.0], vec![0.1, 0.2, 0.7]], 0.75).unwrap();
        let bytes = ex.to_bytes();
        assert_eq!(&bytes[..8], EXEMPLAR_MAGIC);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 3);
        assert_eq!(f64::from_le_bytes(bytes[24..32].try_into().unwrap()), 0.75);
        assert_eq!(bytes.len(), 32 + 6 * 8);
        assert_eq!(ExemplarSet::from_bytes(&bytes).unwrap(), ex);
        assert!(ExemplarSet::from_bytes(&bytes[..40]).is_err());
    }
}
