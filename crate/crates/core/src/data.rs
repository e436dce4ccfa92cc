//! Two-view datasets: directory ingestion, descriptor CSV interchange,
//! identity splits and a synthetic generator.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::{
    decode_ppm, image_descriptors, normalize_blocks, ImageRgb, StripeDescriptor, DESCRIPTOR_DIM, STRIPES_PER_IMAGE,
};
use crate::rng;

pub const VIEW_A_DIR: &str = "view_a";
pub const VIEW_B_DIR: &str = "view_b";
pub const INDEX_FILE: &str = "index.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum View {
    A,
    B,
}

impl View {
    pub fn as_str(self) -> &'static str {
        match self {
            View::A => "a",
            View::B => "b",
        }
    }

    pub fn parse(s: &str) -> Option<View> {
        match s {
            "a" | "A" => Some(View::A),
            "b" | "B" => Some(View::B),
            _ => None,
        }
    }

    fn descriptor_file(self) -> &'static str {
        match self {
            View::A => "descriptors_a.csv",
            View::B => "descriptors_b.csv",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Content {
    Image(ImageRgb),
    Stripes(Vec<StripeDescriptor>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub identity: String,
    pub view: View,
    pub image_id: String,
    pub content: Content,
}

impl Record {
    /// Stripe descriptors, computing them from the image when needed.
    pub fn descriptors(&self) -> Result<Vec<StripeDescriptor>> {
        match &self.content {
            Content::Stripes(s) => Ok(s.clone()),
            Content::Image(img) => image_descriptors(img),
        }
    }

    /// The six stripe descriptors joined end to end.
    pub fn concatenated(&self) -> Result<Vec<f64>> {
        Ok(self
            .descriptors()?
            .into_iter()
            .flat_map(StripeDescriptor::into_inner)
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn new(mut records: Vec<Record>) -> Result<Self> {
        for r in &records {
            if r.identity.is_empty() {
                return Err(Error::Config(format!("record {} has an empty identity", r.image_id)));
            }
            if let Content::Stripes(s) = &r.content {
                if s.len() != STRIPES_PER_IMAGE {
                    return Err(Error::Dimension(format!(
                        "record {} has {} stripes, expected {STRIPES_PER_IMAGE}",
                        r.image_id,
                        s.len()
                    )));
                }
            }
        }
        records.sort_by(|a, b| (&a.identity, a.view, &a.image_id).cmp(&(&b.identity, b.view, &b.image_id)));
        Ok(Self { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sorted distinct identities.
    pub fn identities(&self) -> Vec<String> {
        self.records
            .iter()
            .map(|r| r.identity.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn restrict(&self, ids: &BTreeSet<String>) -> Dataset {
        Dataset {
            records: self
                .records
                .iter()
                .filter(|r| ids.contains(&r.identity))
                .cloned()
                .collect(),
        }
    }

    /// Replace every image by its stripe descriptors.
    pub fn with_descriptors(self) -> Result<Dataset> {
        let records = self
            .records
            .into_par_iter()
            .map(|r| {
                let stripes = r.descriptors().map_err(|e| (r.image_id.clone(), e.to_string()))?;
                Ok(Record {
                    content: Content::Stripes(stripes),
                    ..r
                })
            })
            .collect::<Vec<std::result::Result<Record, (String, String)>>>();
        let mut ok = Vec::with_capacity(records.len());
        let mut failed = Vec::new();
        for r in records {
            match r {
                Ok(r) => ok.push(r),
                Err((id, why)) => failed.push((PathBuf::from(id), why)),
            }
        }
        if !failed.is_empty() {
            return Err(Error::Ingestion { files: failed });
        }
        Ok(Dataset { records: ok })
    }
}

/// Split `<id>_<idx>.ppm` into identity and index.
pub fn parse_image_name(name: &str) -> Option<(String, usize)> {
    let stem = name.strip_suffix(".ppm")?;
    let (id, idx) = stem.rsplit_once('_')?;
    if id.is_empty() {
        return None;
    }
    Some((id.to_string(), idx.parse().ok()?))
}

/// Load `root/view_a` and `root/view_b` images, or a descriptor export if
/// `root` contains an index file.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    if root.join(INDEX_FILE).is_file() {
        return load_descriptors(root);
    }
    let mut failed = Vec::new();
    let mut jobs = Vec::new();
    for (view, dir) in [(View::A, VIEW_A_DIR), (View::B, VIEW_B_DIR)] {
        let dir = root.join(dir);
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) => {
                failed.push((dir, format!("missing view directory: {e}")));
                continue;
            }
        };
        for entry in entries {
            let path = match entry {
                Ok(e) => e.path(),
                Err(e) => {
                    failed.push((dir.clone(), e.to_string()));
                    continue;
                }
            };
            let name = path
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default()
                .to_string();
            if name.starts_with('.') || path.is_dir() {
                continue;
            }
            match parse_image_name(&name) {
                Some((id, idx)) => jobs.push((view, id, idx, path)),
                None => failed.push((path, "expected <identity>_<index>.ppm".into())),
            }
        }
    }
    let decoded: Vec<_> = jobs
        .into_par_iter()
        .map(|(view, id, idx, path)| {
            let img = fs::read(&path)
                .map_err(|e| e.to_string())
                .and_then(|b| decode_ppm(&b).map_err(|e| e.to_string()));
            (view, id, idx, path, img)
        })
        .collect();
    let mut records = Vec::with_capacity(decoded.len());
    for (view, identity, idx, path, img) in decoded {
        match img {
            Ok(img) => records.push(Record {
                image_id: format!("{}/{identity}_{idx}", view.as_str()),
                identity,
                view,
                content: Content::Image(img),
            }),
            Err(why) => failed.push((path, why)),
        }
    }
    if !failed.is_empty() {
        failed.sort();
        return Err(Error::Ingestion { files: failed });
    }
    Dataset::new(records)
}

/// Write `descriptors_a.csv`, `descriptors_b.csv` (one row per stripe,
/// columns `d0..d429`) and `index.csv` mapping rows back to images.
/// Returns the number of descriptor rows written.
pub fn write_descriptors(d: &Dataset, dir: &Path) -> Result<usize> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header: Vec<String> = (0..DESCRIPTOR_DIM).map(|i| format!("d{i}")).collect();
    let index_path = dir.join(INDEX_FILE);
    let mut index = csv::Writer::from_path(&index_path).map_err(|e| Error::csv(&index_path, e))?;
    index
        .write_record(["image_id", "identity", "view", "stripe", "row"])
        .map_err(|e| Error::csv(&index_path, e))?;
    let mut total = 0;
    for view in [View::A, View::B] {
        let path = dir.join(view.descriptor_file());
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
        w.write_record(&header).map_err(|e| Error::csv(&path, e))?;
        let mut row = 0usize;
        for r in d.records.iter().filter(|r| r.view == view) {
            for (s, desc) in r.descriptors()?.iter().enumerate() {
                w.write_record(desc.values().iter().map(|v| format!("{v:e}")))
                    .map_err(|e| Error::csv(&path, e))?;
                index
                    .write_record([
                        r.image_id.clone(),
                        r.identity.clone(),
                        view.as_str().to_string(),
                        s.to_string(),
                        row.to_string(),
                    ])
                    .map_err(|e| Error::csv(&index_path, e))?;
                row += 1;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        total += row;
    }
    index.flush().map_err(|e| Error::io(&index_path, e))?;
    Ok(total)
}

fn read_descriptor_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let row = rec
            .iter()
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(path.display().to_string(), format!("row {i}: {e}")))?;
        rows.push(row);
    }
    Ok(rows)
}

/// Read a directory written by [`write_descriptors`].
pub fn load_descriptors(dir: &Path) -> Result<Dataset> {
    let rows_a = read_descriptor_rows(&dir.join(View::A.descriptor_file()))?;
    let rows_b = read_descriptor_rows(&dir.join(View::B.descriptor_file()))?;
    let index_path = dir.join(INDEX_FILE);
    let mut r = csv::Reader::from_path(&index_path).map_err(|e| Error::csv(&index_path, e))?;
    let mut images: BTreeMap<(String, String, View), BTreeMap<usize, usize>> = BTreeMap::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(&index_path, e))?;
        let bad = |m: &str| Error::format(index_path.display().to_string(), format!("row {i}: {m}"));
        if rec.len() != 5 {
            return Err(bad("expected 5 columns"));
        }
        let view = View::parse(&rec[2]).ok_or_else(|| bad("view must be a or b"))?;
        let stripe: usize = rec[3].parse().map_err(|_| bad("bad stripe index"))?;
        let row: usize = rec[4].parse().map_err(|_| bad("bad row index"))?;
        images
            .entry((rec[0].to_string(), rec[1].to_string(), view))
            .or_default()
            .insert(stripe, row);
    }
    let mut records = Vec::with_capacity(images.len());
    for ((image_id, identity, view), stripes) in images {
        let rows = if view == View::A { &rows_a } else { &rows_b };
        if stripes.keys().copied().ne(0..STRIPES_PER_IMAGE) {
            return Err(Error::format(
                index_path.display().to_string(),
                format!("image {image_id} does not list stripes 0..{STRIPES_PER_IMAGE}"),
            ));
        }
        let descs = stripes
            .values()
            .map(|&row| {
                let values = rows.get(row).ok_or_else(|| {
                    Error::format(
                        index_path.display().to_string(),
                        format!("row {row} out of range for view {}", view.as_str()),
                    )
                })?;
                StripeDescriptor::new(values.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        records.push(Record {
            identity,
            view,
            image_id,
            content: Content::Stripes(descs),
        });
    }
    Dataset::new(records)
}

/// Sample `p` identities into the training set; the rest form the test set.
pub fn split_train_test(d: &Dataset, p: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let ids = d.identities();
    if p == 0 || p >= ids.len() {
        return Err(Error::Config(format!(
            "training identity count must be in 1..{}, got {p}",
            ids.len()
        )));
    }
    let mut rng = rng::stream(seed, "split");
    let train: BTreeSet<String> = index::sample(&mut rng, ids.len(), p)
        .into_iter()
        .map(|i| ids[i].clone())
        .collect();
    let test: BTreeSet<String> = ids.into_iter().filter(|i| !train.contains(i)).collect();
    Ok((d.restrict(&train), d.restrict(&test)))
}

/// `identity,partition` rows.
pub fn write_split_manifest(train: &Dataset, test: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["identity", "partition"])
        .map_err(|e| Error::csv(path, e))?;
    for (d, part) in [(train, "train"), (test, "test")] {
        for id in d.identities() {
            w.write_record([id.as_str(), part]).map_err(|e| Error::csv(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a manifest written by [`write_split_manifest`] into (train, test)
/// identity sets.
pub fn read_split_manifest(path: &Path) -> Result<(BTreeSet<String>, BTreeSet<String>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let (mut train, mut test) = (BTreeSet::new(), BTreeSet::new());
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        match rec.get(1) {
            Some("train") => train.insert(rec[0].to_string()),
            Some("test") => test.insert(rec[0].to_string()),
            _ => {
                return Err(Error::format(
                    path.display().to_string(),
                    format!("row {i}: partition must be train or test"),
                ))
            }
        };
    }
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_identities: usize,
    pub latent_dim: usize,
    pub noise_scale: f64,
    /// Size of the per-stripe difference between the two views' generators.
    pub view_shift: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_identities: 64,
            latent_dim: 16,
            noise_scale: 0.05,
            view_shift: 2.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities == 0 || self.latent_dim == 0 {
            return Err(Error::Config(
                "synthetic identity count and latent dim must be positive".into(),
            ));
        }
        if !(self.noise_scale >= 0.0) || !(self.view_shift >= 0.0) {
            return Err(Error::Config("synthetic noise and view shift must be >= 0".into()));
        }
        Ok(())
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Histogram-like two-view data: each identity has a latent `u ~ N(0, I)`
/// and each (view, stripe) a fixed generator `G`; a stripe descriptor is
/// `normalize_blocks(softplus(G·u + ε))`. View B's generators are view A's
/// plus `view_shift` times an independent Gaussian perturbation.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (n, l) = (cfg.n_identities, cfg.latent_dim);
    let scale = 1.0 / (l as f64).sqrt();
    let mut grng = rng::stream(cfg.seed, "synth-generators");
    let mut gaussian = |rows: usize, cols: usize, s: f64| {
        DMatrix::from_fn(rows, cols, |_, _| {
            let z: f64 = StandardNormal.sample(&mut grng);
            z * s
        })
    };
    let gens_a: Vec<DMatrix<f64>> = (0..STRIPES_PER_IMAGE)
        .map(|_| gaussian(DESCRIPTOR_DIM, l, scale))
        .collect();
    let gens_b: Vec<DMatrix<f64>> = gens_a
        .iter()
        .map(|g| g + gaussian(DESCRIPTOR_DIM, l, scale * cfg.view_shift))
        .collect();

    let mut lrng = rng::stream(cfg.seed, "synth-latents");
    let mut nrng = rng::stream(cfg.seed, "synth-noise");
    let width = n.to_string().len().max(4);
    let mut records = Vec::with_capacity(2 * n);
    for i in 0..n {
        let u = DVector::from_fn(l, |_, _| StandardNormal.sample(&mut lrng));
        let identity = format!("{i:0width$}");
        for (view, gens) in [(View::A, &gens_a), (View::B, &gens_b)] {
            let stripes = gens
                .iter()
                .map(|g| {
                    let mut v: Vec<f64> = (g * &u)
                        .iter()
                        .map(|x| {
                            let e: f64 = StandardNormal.sample(&mut nrng);
                            softplus(x + cfg.noise_scale * e)
                        })
                        .collect();
                    normalize_blocks(&mut v);
                    StripeDescriptor::new(v)
                })
                .collect::<Result<Vec<_>>>()?;
            records.push(Record {
                image_id: format!("{}/{identity}_0", view.as_str()),
                identity: identity.clone(),
                view,
                content: Content::Stripes(stripes),
            });
        }
    }
    Dataset::new(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{block_ranges, ImageRgb};

    fn write_image(dir: &Path, name: &str, shade: u8) {
        let img = ImageRgb::from_fn(8, 12, |x, y| [shade, (x * 20) as u8, (y * 10) as u8]).unwrap();
        fs::write(dir.join(name), img.to_ppm()).unwrap();
    }

    fn mock_dir(ids: &[&str]) -> tempfile::TempDir {
        let root = tempfile::tempdir().unwrap();
        for (v, dir) in [(0u8, VIEW_A_DIR), (1, VIEW_B_DIR)] {
            let d = root.path().join(dir);
            fs::create_dir_all(&d).unwrap();
            for (i, id) in ids.iter().enumerate() {
                write_image(&d, &format!("{id}_0.ppm"), (i as u8) * 30 + v);
            }
        }
        root
    }

    #[test]
    fn parses_image_names() {
        assert_eq!(parse_image_name("0001_3.ppm"), Some(("0001".into(), 3)));
        assert_eq!(parse_image_name("a_b_12.ppm"), Some(("a_b".into(), 12)));
        assert_eq!(parse_image_name("abc.ppm"), None);
        assert_eq!(parse_image_name("_1.ppm"), None);
        assert_eq!(parse_image_name("x_1.png"), None);
        assert_eq!(parse_image_name("x_y.ppm"), None);
    }

    #[test]
    fn loads_two_by_two() {
        let root = mock_dir(&["p1", "p0"]);
        let d = load_dataset(root.path()).unwrap();
        assert_eq!(d.len(), 4);
        assert_eq!(d.identities(), vec!["p0".to_string(), "p1".to_string()]);
        assert_eq!(d.records[0].view, View::A);
        assert_eq!(d.records[1].view, View::B);
        assert_eq!(d, load_dataset(root.path()).unwrap());
    }

    #[test]
    fn bad_filename_and_missing_view_are_listed() {
        let root = mock_dir(&["p0"]);
        fs::write(root.path().join(VIEW_A_DIR).join("abc.ppm"), b"P6").unwrap();
        fs::write(root.path().join(VIEW_B_DIR).join("p1_0.ppm"), b"P6\n2 2\n255\nxx").unwrap();
        match load_dataset(root.path()) {
            Err(Error::Ingestion { files }) => {
                assert_eq!(files.len(), 2);
                assert!(files.iter().any(|(p, _)| p.ends_with("abc.ppm")));
                assert!(files.iter().any(|(p, _)| p.ends_with("p1_0.ppm")));
            }
            other => panic!("{other:?}"),
        }
        let empty = tempfile::tempdir().unwrap();
        match load_dataset(empty.path()) {
            Err(Error::Ingestion { files }) => assert_eq!(files.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn descriptor_csv_round_trip() {
        let root = mock_dir(&["p0", "p1"]);
        let d = load_dataset(root.path()).unwrap().with_descriptors().unwrap();
        let out = tempfile::tempdir().unwrap();
        assert_eq!(write_descriptors(&d, out.path()).unwrap(), 24);
        let back = load_dataset(out.path()).unwrap();
        assert_eq!(back.len(), 4);
        for (a, b) in d.records.iter().zip(&back.records) {
            assert_eq!(a.identity, b.identity);
            assert_eq!(a.view, b.view);
            assert_eq!(a.descriptors().unwrap(), b.descriptors().unwrap());
        }
    }

    fn synth(n: usize, noise: f64, shift: f64, seed: u64) -> Dataset {
        synth_generate(&SynthConfig {
            n_identities: n,
            latent_dim: 4,
            noise_scale: noise,
            view_shift: shift,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn split_counts_and_disjointness() {
        let d = synth(20, 0.05, 1.0, 1);
        let (train, test) = split_train_test(&d, 7, 3).unwrap();
        let (a, b) = (train.identities(), test.identities());
        assert_eq!((a.len(), b.len()), (7, 13));
        assert!(a.iter().all(|i| !b.contains(i)));
        assert_eq!(train.len() + test.len(), d.len());
        assert_eq!(split_train_test(&d, 7, 3).unwrap(), (train, test));
        assert!(matches!(split_train_test(&d, 0, 3), Err(Error::Config(_))));
        assert!(matches!(split_train_test(&d, 20, 3), Err(Error::Config(_))));
    }

    #[test]
    fn synthetic_invariants() {
        let d = synth(5, 0.05, 1.0, 2);
        assert_eq!(d.len(), 10);
        for r in &d.records {
            let s = r.descriptors().unwrap();
            assert_eq!(s.len(), STRIPES_PER_IMAGE);
            for desc in s {
                assert_eq!(desc.values().len(), DESCRIPTOR_DIM);
                for range in block_ranges() {
                    let sum: f64 = desc.values()[range].iter().sum();
                    assert!((sum - 1.0).abs() < 1e-12);
                }
            }
        }
        assert_eq!(d, synth(5, 0.05, 1.0, 2));
        assert_ne!(d, synth(5, 0.05, 1.0, 3));
    }

    #[test]
    fn noiseless_shared_generators_match_across_views() {
        let d = synth(3, 0.0, 0.0, 4);
        for pair in d.records.chunks(2) {
            assert_eq!(pair[0].identity, pair[1].identity);
            assert_eq!(pair[0].descriptors().unwrap(), pair[1].descriptors().unwrap());
        }
    }

    #[test]
    fn manifest_lists_every_identity() {
        let d = synth(6, 0.05, 1.0, 5);
        let (train, test) = split_train_test(&d, 2, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.csv");
        write_split_manifest(&train, &test, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "identity,partition");
        assert_eq!(lines.len(), 7);
        assert_eq!(lines.iter().filter(|l| l.ends_with(",train")).count(), 2);
        let (a, b) = read_split_manifest(&path).unwrap();
        assert_eq!(a.into_iter().collect::<Vec<_>>(), train.identities());
        assert_eq!(b.into_iter().collect::<Vec<_>>(), test.identities());
    }
}
