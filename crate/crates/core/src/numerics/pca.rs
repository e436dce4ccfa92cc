//! Principal component analysis by symmetric eigendecomposition.
//!
//! When samples are fewer than features the n×n Gram matrix is decomposed
//! instead of the D×D covariance; both give the same leading subspace.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensorio::{Tensor, TensorFile};

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: DVector<f64>,
    /// D_in × D_out, orthonormal columns.
    pub basis: DMatrix<f64>,
    /// Component variances, nonincreasing.
    pub eigenvalues: DVector<f64>,
}

/// Fit on the rows of `data` (n × D_in).
pub fn pca_fit(data: &DMatrix<f64>, d_out: usize) -> Result<PcaModel> {
    let (n, d_in) = data.shape();
    if n < 2 {
        return Err(Error::Dimension(format!("PCA needs at least 2 samples, got {n}")));
    }
    if d_out == 0 || d_out > (n - 1).min(d_in) {
        return Err(Error::Dimension(format!(
            "cannot extract {d_out} components from {n} samples of dimension {d_in}"
        )));
    }
    let mean = DVector::from_iterator(d_in, data.column_iter().map(|c| c.mean()));
    let mut centered = data.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let denom = (n - 1) as f64;

    let (mut basis, eigenvalues) = if n < d_in {
        let gram = &centered * centered.transpose() / denom;
        let (vals, vecs) = sorted_eigen(gram);
        let mut basis = DMatrix::zeros(d_in, d_out);
        for k in 0..d_out {
            let v = centered.transpose() * vecs.column(k);
            basis.set_column(k, &v);
        }
        (basis, vals.rows(0, d_out).into_owned())
    } else {
        let cov = centered.transpose() * &centered / denom;
        let (vals, vecs) = sorted_eigen(cov);
        (vecs.columns(0, d_out).into_owned(), vals.rows(0, d_out).into_owned())
    };
    orthonormalize(&mut basis);
    for mut col in basis.column_iter_mut() {
        let imax = col.iamax();
        if col[imax] < 0.0 {
            col.neg_mut();
        }
    }
    Ok(PcaModel {
        mean,
        basis,
        eigenvalues: eigenvalues.map(|v| v.max(0.0)),
    })
}

/// Eigenpairs sorted by descending eigenvalue (ties keep solver order).
fn sorted_eigen(m: DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = DVector::from_iterator(order.len(), order.iter().map(|&i| eig.eigenvalues[i]));
    let vecs = DMatrix::from_columns(&order.iter().map(|&i| eig.eigenvectors.column(i)).collect::<Vec<_>>());
    (vals, vecs)
}

/// Modified Gram–Schmidt; columns that vanish (null directions of a
/// rank-deficient sample) are replaced by the first standard basis vector
/// that completes the orthonormal set.
fn orthonormalize(basis: &mut DMatrix<f64>) {
    let (d_in, k) = basis.shape();
    let scale = basis
        .column_iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let mut spare = 0usize;
    for j in 0..k {
        for pass in 0..2 {
            let mut v = basis.column(j).into_owned();
            for i in 0..j {
                let q = basis.column(i);
                let p = q.dot(&v);
                v.axpy(-p, &q, 1.0);
            }
            let norm = v.norm();
            if pass == 0 && norm <= 1e-10 * scale {
                // null direction: try standard basis vectors until one survives
                loop {
                    let mut e = DVector::zeros(d_in);
                    e[spare % d_in] = 1.0;
                    spare += 1;
                    for i in 0..j {
                        let q = basis.column(i);
                        let p = q.dot(&e);
                        e.axpy(-p, &q, 1.0);
                    }
                    if e.norm() > 0.5 {
                        v = e;
                        break;
                    }
                }
            }
            let norm = v.norm();
            basis.set_column(j, &(v / norm));
        }
    }
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.basis.ncols()
    }

    /// `basisᵀ (x − mean)`.
    pub fn project(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.mean.len() {
            return Err(Error::Dimension(format!(
                "PCA input length {} != {}",
                x.len(),
                self.mean.len()
            )));
        }
        Ok(self.basis.tr_mul(&(x - &self.mean)))
    }

    pub fn reconstruct(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.basis * y + &self.mean
    }

    pub fn to_tensors(&self) -> TensorFile {
        let mut f = TensorFile::new();
        f.push("mean", Tensor::vector(&self.mean))
            .push("basis", Tensor::matrix(&self.basis))
            .push("eigenvalues", Tensor::vector(&self.eigenvalues));
        f
    }

    pub fn from_tensors(f: &TensorFile) -> Result<Self> {
        let m = Self {
            mean: f.get("mean")?.to_vector()?,
            basis: f.get("basis")?.to_matrix()?,
            eigenvalues: f.get("eigenvalues")?.to_vector()?,
        };
        if m.basis.nrows() != m.mean.len() || m.basis.ncols() != m.eigenvalues.len() {
            return Err(Error::format("PCA model", "inconsistent tensor shapes"));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_tensors().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(&TensorFile::load(path)?)
    }
}

/// Convenience: `pca_project` as a free function.
pub fn pca_project(m: &PcaModel, x: &DVector<f64>) -> Result<DVector<f64>> {
    m.project(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0))
    }

    fn assert_orthonormal(b: &DMatrix<f64>) {
        let g = b.tr_mul(b);
        assert!((g - DMatrix::identity(b.ncols(), b.ncols())).amax() <= 1e-8);
    }

    #[test]
    fn points_on_a_line() {
        let dir = DVector::from_vec(vec![1.0, 2.0, -2.0]) / 3.0;
        let offset = DVector::from_vec(vec![0.5, -1.0, 3.0]);
        let data = DMatrix::from_fn(7, 3, |i, j| offset[j] + (i as f64 - 2.5) * dir[j]);
        let m = pca_fit(&data, 1).unwrap();
        assert!((m.basis.column(0).dot(&dir).abs() - 1.0).abs() < 1e-12);
        for row in data.row_iter() {
            let x = row.transpose();
            let back = m.reconstruct(&m.project(&x).unwrap());
            assert!((back - x).amax() <= 1e-10);
        }
    }

    #[test]
    fn full_rank_projection_is_lossless() {
        // 5 samples in 8 dims -> rank 4 after centring (Gram path)
        let data = random_matrix(5, 8, 1);
        let m = pca_fit(&data, 4).unwrap();
        assert_orthonormal(&m.basis);
        for row in data.row_iter() {
            let x = row.transpose();
            assert!((m.reconstruct(&m.project(&x).unwrap()) - x).amax() <= 1e-8);
        }
    }

    #[test]
    fn eigenvalues_match_covariance_eigensolve() {
        let data = random_matrix(20, 8, 2);
        let m = pca_fit(&data, 7).unwrap();
        assert_orthonormal(&m.basis);
        // independent oracle: explicit covariance via per-entry sums, then eigenvalues
        let n = data.nrows() as f64;
        let means: Vec<f64> = (0..8).map(|j| (0..20).map(|i| data[(i, j)]).sum::<f64>() / n).collect();
        let cov = DMatrix::from_fn(8, 8, |a, b| {
            (0..20)
                .map(|i| (data[(i, a)] - means[a]) * (data[(i, b)] - means[b]))
                .sum::<f64>()
                / (n - 1.0)
        });
        let mut oracle: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
        oracle.sort_by(|a, b| b.total_cmp(a));
        for k in 0..7 {
            assert!((m.eigenvalues[k] - oracle[k]).abs() <= 1e-10, "{k}");
        }
        assert!(m.eigenvalues.as_slice().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn gram_and_covariance_paths_agree() {
        let data = random_matrix(6, 9, 3);
        let gram = pca_fit(&data, 3).unwrap();
        let mut cov = data.clone();
        let mean = gram.mean.clone();
        for mut r in cov.row_iter_mut() {
            r -= mean.transpose();
        }
        let c = cov.transpose() * &cov / 5.0;
        let (vals, vecs) = sorted_eigen(c);
        for k in 0..3 {
            assert!((vals[k] - gram.eigenvalues[k]).abs() < 1e-10);
            assert!((vecs.column(k).dot(&gram.basis.column(k)).abs() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn sign_convention_largest_entry_positive() {
        let data = random_matrix(12, 5, 4);
        let m = pca_fit(&data, 4).unwrap();
        for col in m.basis.column_iter() {
            assert!(col[col.iamax()] > 0.0);
        }
    }

    #[test]
    fn projection_examples() {
        let data = random_matrix(10, 4, 5);
        let m = pca_fit(&data, 3).unwrap();
        assert!(m.project(&m.mean).unwrap().amax() == 0.0);
        for k in 0..3 {
            let x = &m.mean + m.basis.column(k);
            let y = m.project(&x).unwrap();
            for j in 0..3 {
                let expect = if j == k { 1.0 } else { 0.0 };
                assert!((y[j] - expect).abs() < 1e-12);
            }
        }
        let x = DVector::from_vec(vec![0.1, -0.2, 0.3, 0.4]);
        let manual: Vec<f64> = (0..3)
            .map(|k| (0..4).map(|d| m.basis[(d, k)] * (x[d] - m.mean[d])).sum())
            .collect();
        let y = m.project(&x).unwrap();
        for k in 0..3 {
            assert!((y[k] - manual[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn too_many_components() {
        let data = random_matrix(4, 10, 6);
        assert!(matches!(pca_fit(&data, 4), Err(Error::Dimension(_))));
        assert!(matches!(pca_fit(&random_matrix(1, 3, 0), 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn rank_deficient_completion_stays_orthonormal() {
        // 6 samples on a 2-d plane in 5-space; ask for 4 components
        let data = DMatrix::from_fn(6, 5, |i, j| if j < 2 { (i * (j + 1)) as f64 % 5.0 } else { 0.0 });
        let m = pca_fit(&data, 4).unwrap();
        assert_orthonormal(&m.basis);
        assert!(m.eigenvalues[2].abs() < 1e-10);
    }

    #[test]
    fn tensor_round_trip() {
        let m = pca_fit(&random_matrix(8, 3, 7), 2).unwrap();
        let back = PcaModel::from_tensors(&TensorFile::from_bytes(&m.to_tensors().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
