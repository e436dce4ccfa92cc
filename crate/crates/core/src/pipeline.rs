//! End-to-end training and evaluation.
//!
//! Training runs: stripe descriptors → kernel responses against every
//! training stripe → alternating layer-1 training on matched stripe pairs →
//! per-image concatenation of the six latent codes → PCA → metric.

use std::fs;
use std::path::Path;

use log::info;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::data::{Dataset, Record, View};
use crate::error::{Error, Result};
use crate::eval::{cmc, euclidean_baseline, single_shot_split, CmcCurve, ScoreMatrix};
use crate::features::{DESCRIPTOR_DIM, STRIPES_PER_IMAGE};
use crate::kernelmap::{kernel_map_batch, ExemplarSet};
use crate::layer1::{train_alternating, EncoderParams, Layer1Model, PairBatch, TraceEntry};
use crate::metric::{build_pairs, dissimilarity, train_metric_observed, MetricParams};
use crate::numerics::{pca_fit, PcaModel};

pub const EXEMPLAR_FILE: &str = "exemplars.bin";
pub const PROBE_NET_FILE: &str = "layer1_probe.tns";
pub const GALLERY_NET_FILE: &str = "layer1_gallery.tns";
pub const PCA_FILE: &str = "pca.tns";
pub const METRIC_FILE: &str = "metric.tns";
pub const TRAINING_LOG_FILE: &str = "training_log.csv";

/// Sizes of every intermediate representation for a training set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineShape {
    pub training_pairs: usize,
    pub stripe_pairs: usize,
    pub descriptor_dim: usize,
    pub kernel_dim: usize,
    pub hidden_dim: usize,
    pub concat_dim: usize,
    pub metric_dim: usize,
}

pub fn plan(train: &Dataset, cfg: &PipelineConfig) -> Result<PipelineShape> {
    let pairs = single_shot_split(train, cfg.seed)?.identities.len();
    let shape = PipelineShape {
        training_pairs: pairs,
        stripe_pairs: pairs * STRIPES_PER_IMAGE,
        descriptor_dim: DESCRIPTOR_DIM,
        kernel_dim: 2 * pairs * STRIPES_PER_IMAGE,
        hidden_dim: cfg.layer1.hidden_dim,
        concat_dim: STRIPES_PER_IMAGE * cfg.layer1.hidden_dim,
        metric_dim: cfg.metric.dim,
    };
    // PCA over the probe and gallery representations of every training pair
    let max_components = (2 * pairs).saturating_sub(1).min(shape.concat_dim);
    if shape.metric_dim > max_components {
        return Err(Error::Config(format!(
            "metric_dim {} exceeds the {max_components} principal components available from {pairs} training pairs",
            shape.metric_dim
        )));
    }
    Ok(shape)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub exemplars: ExemplarSet,
    pub probe_net: EncoderParams,
    pub gallery_net: EncoderParams,
    pub pca: PcaModel,
    pub metric: MetricParams,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingLog {
    pub layer1: Vec<TraceEntry>,
    pub metric: Vec<f64>,
}

impl TrainingLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        let mut put = |row: [String; 5]| w.write_record(&row).map_err(|e| Error::csv(path, e));
        put(["stage", "block", "network", "step", "objective"].map(String::from))?;
        for t in &self.layer1 {
            put([
                "layer1".into(),
                t.block.to_string(),
                t.side.as_str().into(),
                t.step.to_string(),
                format!("{:e}", t.objective),
            ])?;
        }
        for (i, v) in self.metric.iter().enumerate() {
            put([
                "metric".into(),
                "0".into(),
                "metric".into(),
                i.to_string(),
                format!("{v:e}"),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn stripes_of(records: &[Record]) -> Result<Vec<Vec<f64>>> {
    let per: Vec<Result<Vec<Vec<f64>>>> = records
        .par_iter()
        .map(|r| Ok(r.descriptors()?.into_iter().map(|d| d.into_inner()).collect()))
        .collect();
    Ok(per
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect())
}

fn kernel_columns(stripes: &[Vec<f64>], ex: &ExemplarSet) -> Result<DMatrix<f64>> {
    let refs: Vec<&[f64]> = stripes.iter().map(Vec::as_slice).collect();
    Ok(DMatrix::from_columns(&kernel_map_batch(&refs, ex)?))
}

/// Stack each image's six latent columns into one global vector.
fn concat_latents(z: &DMatrix<f64>) -> Vec<DVector<f64>> {
    let dh = z.nrows();
    (0..z.ncols() / STRIPES_PER_IMAGE)
        .map(|i| {
            let block = z.columns(i * STRIPES_PER_IMAGE, STRIPES_PER_IMAGE);
            DVector::from_iterator(dh * STRIPES_PER_IMAGE, block.iter().copied())
        })
        .collect()
}

impl TrainedModel {
    /// Pre-PCA global representations for a list of images from one view.
    fn latent_concat(&self, records: &[Record], view: View) -> Result<Vec<DVector<f64>>> {
        let net = match view {
            View::A => &self.probe_net,
            View::B => &self.gallery_net,
        };
        let k = kernel_columns(&stripes_of(records)?, &self.exemplars)?;
        Ok(concat_latents(&net.encode_columns(&k)))
    }

    pub fn represent(&self, records: &[Record], view: View) -> Result<Vec<DVector<f64>>> {
        self.latent_concat(records, view)?
            .iter()
            .map(|g| self.pca.project(g))
            .collect()
    }

    /// Dissimilarities between view-A probes and view-B gallery images.
    pub fn score(&self, probe: &[Record], gallery: &[Record]) -> Result<ScoreMatrix> {
        let kp = self.represent(probe, View::A)?;
        let kg = self.represent(gallery, View::B)?;
        let rows: Vec<Vec<f64>> = kp
            .par_iter()
            .map(|k| {
                kg.iter()
                    .map(|g| dissimilarity(&self.metric, k, g))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let scores = DMatrix::from_fn(kp.len(), kg.len(), |i, j| rows[i][j]);
        ScoreMatrix::new(
            scores,
            probe.iter().map(|r| r.identity.clone()).collect(),
            gallery.iter().map(|r| r.identity.clone()).collect(),
        )
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.exemplars.save(&dir.join(EXEMPLAR_FILE))?;
        self.probe_net.save(&dir.join(PROBE_NET_FILE))?;
        self.gallery_net.save(&dir.join(GALLERY_NET_FILE))?;
        self.pca.save(&dir.join(PCA_FILE))?;
        self.metric.save(&dir.join(METRIC_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            exemplars: ExemplarSet::load(&dir.join(EXEMPLAR_FILE))?,
            probe_net: EncoderParams::load(&dir.join(PROBE_NET_FILE))?,
            gallery_net: EncoderParams::load(&dir.join(GALLERY_NET_FILE))?,
            pca: PcaModel::load(&dir.join(PCA_FILE))?,
            metric: MetricParams::load(&dir.join(METRIC_FILE))?,
        })
    }
}

pub fn train(train: &Dataset, cfg: &PipelineConfig) -> Result<(TrainedModel, TrainingLog)> {
    train_observed(train, cfg, |_, _| {})
}

/// [`train`], calling `observe` on every metric iterate.
pub fn train_observed<O>(train: &Dataset, cfg: &PipelineConfig, observe: O) -> Result<(TrainedModel, TrainingLog)>
where
    O: FnMut(usize, &MetricParams),
{
    cfg.validate()?;
    let shape = plan(train, cfg)?;
    let ss = single_shot_split(train, cfg.seed)?;
    info!(
        "training on {} pairs: {} stripe pairs, kernel dim {}, concat dim {} -> {}",
        shape.training_pairs, shape.stripe_pairs, shape.kernel_dim, shape.concat_dim, shape.metric_dim
    );

    let probe_stripes = stripes_of(&ss.probe).map_err(|e| e.in_stage("features"))?;
    let gallery_stripes = stripes_of(&ss.gallery).map_err(|e| e.in_stage("features"))?;
    let all: Vec<Vec<f64>> = probe_stripes.iter().chain(&gallery_stripes).cloned().collect();
    let exemplars = ExemplarSet::with_estimated_bandwidth(all, cfg.seed).map_err(|e| e.in_stage("kernel map"))?;
    let batch = PairBatch::new(
        kernel_columns(&probe_stripes, &exemplars).map_err(|e| e.in_stage("kernel map"))?,
        kernel_columns(&gallery_stripes, &exemplars).map_err(|e| e.in_stage("kernel map"))?,
    )
    .map_err(|e| e.in_stage("kernel map"))?;

    let Layer1Model {
        probe: probe_net,
        gallery: gallery_net,
        trace,
    } = train_alternating(&batch, &cfg.effective_layer1(), cfg.seed).map_err(|e| e.in_stage("layer1"))?;

    let gp = concat_latents(&probe_net.encode_columns(&batch.probe));
    let gg = concat_latents(&gallery_net.encode_columns(&batch.gallery));
    let stacked = DMatrix::from_rows(&gp.iter().chain(&gg).map(|g| g.transpose()).collect::<Vec<_>>());
    let pca = pca_fit(&stacked, cfg.metric.dim).map_err(|e| e.in_stage("pca"))?;
    let kp = gp.iter().map(|g| pca.project(g)).collect::<Result<Vec<_>>>()?;
    let kg = gg.iter().map(|g| pca.project(g)).collect::<Result<Vec<_>>>()?;

    let mcfg = cfg.effective_metric();
    let pairs = build_pairs(&kp, &kg, mcfg.negatives_per_positive, cfg.seed).map_err(|e| e.in_stage("metric"))?;
    let metric = train_metric_observed(&pairs, &mcfg, cfg.seed, observe).map_err(|e| e.in_stage("metric"))?;

    let model = TrainedModel {
        exemplars,
        probe_net,
        gallery_net,
        pca,
        metric: metric.params,
    };
    let log = TrainingLog {
        layer1: trace,
        metric: metric.trace,
    };
    Ok((model, log))
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub learned: ScoreMatrix,
    pub baseline: ScoreMatrix,
    pub learned_cmc: CmcCurve,
    pub baseline_cmc: CmcCurve,
}

/// Single-shot evaluation of a trained model and the raw-descriptor
/// Euclidean baseline on the same split.
pub fn evaluate(model: &TrainedModel, test: &Dataset, seed: u64) -> Result<Evaluation> {
    let ss = single_shot_split(test, seed)?;
    let learned = model.score(&ss.probe, &ss.gallery)?;
    let raw = |rs: &[Record]| rs.iter().map(Record::concatenated).collect::<Result<Vec<_>>>();
    let baseline = euclidean_baseline(
        &raw(&ss.probe)?,
        ss.identities.clone(),
        &raw(&ss.gallery)?,
        ss.identities.clone(),
    )?;
    Ok(Evaluation {
        learned_cmc: cmc(&learned)?,
        baseline_cmc: cmc(&baseline)?,
        learned,
        baseline,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};

    fn tiny_config() -> PipelineConfig {
        let mut c = PipelineConfig::default();
        c.layer1.hidden_dim = 4;
        c.layer1.kappa = 5;
        c.layer1.max_iter = 10;
        c.metric.dim = 6;
        c.metric.max_iter = 10;
        c.metric.negatives_per_positive = 3;
        c
    }

    fn tiny_data() -> Dataset {
        synth_generate(&SynthConfig {
            n_identities: 8,
            latent_dim: 4,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn shape_arithmetic() {
        let s = plan(&tiny_data(), &tiny_config()).unwrap();
        assert_eq!(s.training_pairs, 8);
        assert_eq!(s.stripe_pairs, 48);
        assert_eq!(s.kernel_dim, 96);
        assert_eq!(s.concat_dim, 24);
        let mut big = tiny_config();
        big.metric.dim = 16;
        assert!(matches!(plan(&tiny_data(), &big), Err(Error::Config(_))));
    }

    #[test]
    fn train_save_load_evaluate() {
        let data = tiny_data();
        let cfg = tiny_config();
        let (model, log) = train(&data, &cfg).unwrap();
        assert_eq!(model.exemplars.len(), 96);
        assert_eq!(model.pca.output_dim(), 6);
        assert!(!log.layer1.is_empty() && !log.metric.is_empty());
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let back = TrainedModel::load(dir.path()).unwrap();
        assert_eq!(back, model);
        let ev = evaluate(&back, &data, 1).unwrap();
        assert_eq!(ev.learned.scores().shape(), (8, 8));
        assert_eq!(*ev.learned_cmc.rates.last().unwrap(), 1.0);
        let (again, _) = train(&data, &cfg).unwrap();
        assert_eq!(again, model);
    }
}
