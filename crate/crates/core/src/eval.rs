//! Single-shot ranking evaluation.

use std::collections::HashMap;
use std::path::Path;

use log::warn;
use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use crate::data::{Dataset, Record, View};
use crate::error::{Error, Result};
use crate::rng;

/// Ranks reported in summaries.
pub const SUMMARY_RANKS: [usize; 4] = [1, 5, 10, 20];

/// Probe × gallery dissimilarities; lower is a better match.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    scores: DMatrix<f64>,
    probe_ids: Vec<String>,
    gallery_ids: Vec<String>,
}

impl ScoreMatrix {
    pub fn new(scores: DMatrix<f64>, probe_ids: Vec<String>, gallery_ids: Vec<String>) -> Result<Self> {
        if scores.nrows() != probe_ids.len() || scores.ncols() != gallery_ids.len() {
            return Err(Error::Dimension(format!(
                "score matrix {:?} for {} probes and {} gallery entries",
                scores.shape(),
                probe_ids.len(),
                gallery_ids.len()
            )));
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("score matrix has non-finite entries".into()));
        }
        let mut seen = HashMap::new();
        for (j, id) in gallery_ids.iter().enumerate() {
            if let Some(prev) = seen.insert(id.as_str(), j) {
                return Err(Error::Protocol(format!(
                    "gallery identity {id} appears at columns {prev} and {j}"
                )));
            }
        }
        Ok(Self {
            scores,
            probe_ids,
            gallery_ids,
        })
    }

    pub fn scores(&self) -> &DMatrix<f64> {
        &self.scores
    }

    pub fn probe_ids(&self) -> &[String] {
        &self.probe_ids
    }

    pub fn gallery_ids(&self) -> &[String] {
        &self.gallery_ids
    }

    /// CSV with a `probe` column followed by one column per gallery identity.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        let mut header = vec!["probe".to_string()];
        header.extend(self.gallery_ids.iter().cloned());
        w.write_record(&header).map_err(|e| Error::csv(path, e))?;
        for (i, id) in self.probe_ids.iter().enumerate() {
            let mut row = vec![id.clone()];
            row.extend(self.scores.row(i).iter().map(|v| format!("{v:e}")));
            w.write_record(&row).map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let header = r.headers().map_err(|e| Error::csv(path, e))?.clone();
        let gallery_ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut probe_ids = Vec::new();
        let mut values = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| Error::csv(path, e))?;
            probe_ids.push(rec.get(0).unwrap_or_default().to_string());
            for v in rec.iter().skip(1) {
                values.push(
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::format(path.display().to_string(), format!("row {i}: {e}")))?,
                );
            }
        }
        let scores = DMatrix::from_row_slice(probe_ids.len(), gallery_ids.len(), &values);
        Self::new(scores, probe_ids, gallery_ids)
    }
}

/// `rates[r]` is the fraction of probes whose true match ranks within `r + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct CmcCurve {
    pub rates: Vec<f64>,
}

impl CmcCurve {
    /// Rate at a 1-based rank; ranks past the gallery size saturate.
    pub fn at_rank(&self, rank: usize) -> f64 {
        assert!(rank >= 1, "ranks are 1-based");
        self.rates[(rank - 1).min(self.rates.len() - 1)]
    }

    pub fn summary(&self) -> Vec<(usize, f64)> {
        SUMMARY_RANKS.iter().map(|&r| (r, self.at_rank(r))).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        w.write_record(["rank", "rate"]).map_err(|e| Error::csv(path, e))?;
        for (r, v) in self.rates.iter().enumerate() {
            w.write_record([(r + 1).to_string(), v.to_string()])
                .map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// 1-based rank of each probe's true match. Ties go to the lower gallery
/// index.
pub fn match_ranks(s: &ScoreMatrix) -> Result<Vec<usize>> {
    let col: HashMap<&str, usize> = s
        .gallery_ids
        .iter()
        .enumerate()
        .map(|(j, id)| (id.as_str(), j))
        .collect();
    let targets = s
        .probe_ids
        .iter()
        .map(|id| {
            col.get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Protocol(format!("probe identity {id} has no gallery entry")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(targets
        .par_iter()
        .enumerate()
        .map(|(i, &t)| {
            let row = s.scores.row(i);
            let truth = row[t];
            1 + row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v < truth || (v == truth && j < t))
                .count()
        })
        .collect())
}

pub fn cmc(s: &ScoreMatrix) -> Result<CmcCurve> {
    if s.probe_ids.is_empty() {
        return Err(Error::Protocol("no probes to evaluate".into()));
    }
    let ranks = match_ranks(s)?;
    let mut counts = vec![0usize; s.gallery_ids.len()];
    for r in ranks {
        counts[r - 1] += 1;
    }
    let n = s.probe_ids.len() as f64;
    let mut acc = 0;
    let rates = counts
        .into_iter()
        .map(|c| {
            acc += c;
            acc as f64 / n
        })
        .collect();
    Ok(CmcCurve { rates })
}

/// Min-max rescale each probe row of each matrix to [0, 1] and sum.
/// Constant rows rescale to zeros.
pub fn fuse_scores(lists: &[ScoreMatrix]) -> Result<ScoreMatrix> {
    let first = lists.first().ok_or_else(|| Error::Config("nothing to fuse".into()))?;
    if lists
        .iter()
        .any(|s| s.probe_ids != first.probe_ids || s.gallery_ids != first.gallery_ids)
    {
        return Err(Error::Protocol("fused score matrices have different layouts".into()));
    }
    let mut fused = DMatrix::zeros(first.scores.nrows(), first.scores.ncols());
    for s in lists {
        for (i, row) in s.scores.row_iter().enumerate() {
            let (lo, hi) = (row.min(), row.max());
            if hi > lo {
                for (j, v) in row.iter().enumerate() {
                    fused[(i, j)] += (v - lo) / (hi - lo);
                }
            }
        }
    }
    ScoreMatrix::new(fused, first.probe_ids.clone(), first.gallery_ids.clone())
}

/// Pairwise Euclidean distances between raw feature vectors.
pub fn euclidean_baseline(
    probe: &[Vec<f64>],
    probe_ids: Vec<String>,
    gallery: &[Vec<f64>],
    gallery_ids: Vec<String>,
) -> Result<ScoreMatrix> {
    let dim = probe.first().or(gallery.first()).map_or(0, Vec::len);
    if probe.iter().chain(gallery).any(|v| v.len() != dim) {
        return Err(Error::Dimension("baseline features differ in length".into()));
    }
    let rows: Vec<Vec<f64>> = probe
        .par_iter()
        .map(|p| {
            gallery
                .iter()
                .map(|g| p.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .collect()
        })
        .collect();
    let scores = DMatrix::from_fn(probe.len(), gallery.len(), |i, j| rows[i][j]);
    ScoreMatrix::new(scores, probe_ids, gallery_ids)
}

/// One view-A image (probe) and one view-B image (gallery) per identity.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleShot {
    pub identities: Vec<String>,
    pub probe: Vec<Record>,
    pub gallery: Vec<Record>,
    /// Identities dropped for lacking an image in one of the views.
    pub excluded: Vec<String>,
}

pub fn single_shot_split(d: &Dataset, seed: u64) -> Result<SingleShot> {
    let mut rng = rng::stream(seed, "single-shot");
    let mut out = SingleShot {
        identities: Vec::new(),
        probe: Vec::new(),
        gallery: Vec::new(),
        excluded: Vec::new(),
    };
    for id in d.identities() {
        let of_view = |v: View| {
            d.records
                .iter()
                .filter(|r| r.identity == id && r.view == v)
                .collect::<Vec<_>>()
        };
        let (a, b) = (of_view(View::A), of_view(View::B));
        if a.is_empty() || b.is_empty() {
            warn!("identity {id} lacks an image in one view; excluded from single-shot split");
            out.excluded.push(id);
            continue;
        }
        let pa = a[rng.random_range(0..a.len())].clone();
        let pb = b[rng.random_range(0..b.len())].clone();
        out.identities.push(id);
        out.probe.push(pa);
        out.gallery.push(pb);
    }
    if out.identities.is_empty() {
        return Err(Error::Protocol("no identity has images in both views".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Content, Record};
    use crate::features::StripeDescriptor;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("id{i}")).collect()
    }

    fn matrix(rows: &[&[f64]]) -> ScoreMatrix {
        let n = rows.len();
        let m = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        ScoreMatrix::new(DMatrix::from_row_slice(n, m, &flat), ids(n), ids(m)).unwrap()
    }

    #[test]
    fn forced_ranks() {
        // true matches on the diagonal at ranks 1, 2, 1
        let s = matrix(&[&[0.1, 0.5, 0.9], &[0.2, 0.4, 0.9], &[0.8, 0.7, 0.1]]);
        assert_eq!(match_ranks(&s).unwrap(), vec![1, 2, 1]);
        let c = cmc(&s).unwrap();
        assert_relative_eq!(c.rates[0], 2.0 / 3.0);
        assert_eq!(&c.rates[1..], &[1.0, 1.0]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let s = matrix(&[&[1.0, 1.0, 1.0], &[1.0, 1.0, 1.0], &[1.0, 1.0, 1.0]]);
        assert_eq!(match_ranks(&s).unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn missing_probe_identity_is_protocol_error() {
        let s = ScoreMatrix::new(DMatrix::zeros(1, 2), vec!["x".into()], ids(2)).unwrap();
        assert!(matches!(cmc(&s), Err(Error::Protocol(_))));
        let dup = ScoreMatrix::new(DMatrix::zeros(1, 2), vec!["x".into()], vec!["x".into(), "x".into()]);
        assert!(matches!(dup, Err(Error::Protocol(_))));
    }

    #[test]
    fn cmc_is_monotone_and_complete() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let s = ScoreMatrix::new(
            DMatrix::from_fn(12, 12, |_, _| r.random_range(0.0..1.0)),
            ids(12),
            ids(12),
        )
        .unwrap();
        let c = cmc(&s).unwrap();
        assert!(c.rates.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*c.rates.last().unwrap(), 1.0);
        assert_eq!(c.at_rank(20), 1.0);
        assert_eq!(
            c.summary().iter().map(|(r, _)| *r).collect::<Vec<_>>(),
            SUMMARY_RANKS.to_vec()
        );
    }

    #[test]
    fn monotone_row_transform_keeps_cmc() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let base = DMatrix::from_fn(8, 8, |_, _| r.random_range(0.0..1.0));
        let s = ScoreMatrix::new(base.clone(), ids(8), ids(8)).unwrap();
        let t = ScoreMatrix::new(base.map(|v| (3.0 * v).exp() - 7.0), ids(8), ids(8)).unwrap();
        assert_eq!(cmc(&s).unwrap(), cmc(&t).unwrap());
    }

    #[test]
    fn fusion_examples() {
        let one = ScoreMatrix::new(DMatrix::from_row_slice(1, 2, &[2.0, 4.0]), ids(1), ids(2)).unwrap();
        assert_eq!(fuse_scores(&[one]).unwrap().scores().as_slice(), &[0.0, 1.0]);

        // hand-computed: rows rescale to [0, .5, 1], [1, 0, .25] and [1, 0, 0], [0, 0, 0]
        let a = matrix(&[&[1.0, 2.0, 3.0], &[5.0, 1.0, 2.0]]);
        let b = matrix(&[&[9.0, 4.0, 4.0], &[7.0, 7.0, 7.0]]);
        let f = fuse_scores(&[a.clone(), b]).unwrap();
        let expect = DMatrix::from_row_slice(2, 3, &[1.0, 0.5, 1.0, 1.0, 0.0, 0.25]);
        assert!((f.scores() - expect).amax() < 1e-15);

        let twice = fuse_scores(&[a.clone(), a.clone()]).unwrap();
        for i in 0..2 {
            assert_eq!(
                twice.scores().row(i).transpose().argmin().0,
                a.scores().row(i).transpose().argmin().0
            );
        }
        let other = ScoreMatrix::new(DMatrix::zeros(2, 3), ids(2), vec!["q".into(), "r".into(), "s".into()]).unwrap();
        assert!(fuse_scores(&[a, other]).is_err());
    }

    #[test]
    fn baseline_distances() {
        let e = |i: usize| (0..3).map(|d| if d == i { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
        let feats = vec![e(0), e(1), e(2)];
        let s = euclidean_baseline(&feats, ids(3), &feats, ids(3)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 0.0 } else { 2f64.sqrt() };
                assert_relative_eq!(s.scores()[(i, j)], expect, epsilon = 1e-15);
            }
        }
        // scripted: |(1,2)-(4,6)| = 5, |(0,0)-(3,4)| = 5, |(1,2)-(3,4)| = sqrt(8)
        let p = vec![vec![1.0, 2.0], vec![0.0, 0.0]];
        let g = vec![vec![4.0, 6.0], vec![3.0, 4.0]];
        let s = euclidean_baseline(&p, ids(2), &g, ids(2)).unwrap();
        assert_eq!(s.scores()[(0, 0)], 5.0);
        assert_eq!(s.scores()[(1, 1)], 5.0);
        assert_relative_eq!(s.scores()[(0, 1)], 8f64.sqrt());
    }

    #[test]
    fn score_csv_round_trip() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let s = ScoreMatrix::new(DMatrix::from_fn(3, 4, |_, _| r.random_range(-1.0..1.0)), ids(3), ids(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        s.write_csv(&path).unwrap();
        assert_eq!(ScoreMatrix::read_csv(&path).unwrap(), s);
    }

    fn record(id: &str, view: View, k: usize) -> Record {
        let mut v = vec![0.0; crate::features::DESCRIPTOR_DIM];
        for range in crate::features::block_ranges() {
            v[range.start + k % range.len()] = 1.0;
        }
        let s = StripeDescriptor::new(v).unwrap();
        Record {
            identity: id.into(),
            view,
            image_id: format!("{}/{id}_{k}", view.as_str()),
            content: Content::Stripes(vec![s; 6]),
        }
    }

    #[test]
    fn single_shot_excludes_one_view_identities() {
        let d = Dataset::new(vec![
            record("a", View::A, 0),
            record("a", View::B, 0),
            record("b", View::A, 0),
            record("c", View::A, 0),
            record("c", View::A, 1),
            record("c", View::A, 2),
            record("c", View::B, 0),
        ])
        .unwrap();
        let s = single_shot_split(&d, 7).unwrap();
        assert_eq!(s.identities, vec!["a".to_string(), "c".to_string()]);
        assert_eq!(s.excluded, vec!["b".to_string()]);
        assert!(s.probe.iter().all(|r| r.view == View::A));
        assert!(s.gallery.iter().all(|r| r.view == View::B));
        assert_eq!(s, single_shot_split(&d, 7).unwrap());
        let picks: std::collections::BTreeSet<String> = (0..40)
            .map(|seed| single_shot_split(&d, seed).unwrap().probe[1].image_id.clone())
            .collect();
        assert_eq!(picks.len(), 3);
    }
}
