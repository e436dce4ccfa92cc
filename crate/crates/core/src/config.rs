//! Flat `key = value` pipeline configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::layer1::Layer1Config;
use crate::metric::MetricConfig;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    /// Identities used for training; `None` takes half.
    pub train_identities: Option<usize>,
    pub layer1: Layer1Config,
    pub metric: MetricConfig,
    pub synth: SynthConfig,
    pub no_marg: bool,
    pub no_inv: bool,
}

fn parse<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: invalid value {value:?} for {key}")))
}

fn parse_optional(key: &str, value: &str, line: usize) -> Result<Option<usize>> {
    match value {
        "" | "auto" | "full" => Ok(None),
        v => parse(key, v, line).map(Some),
    }
}

fn opt(v: Option<usize>, none: &str) -> String {
    v.map_or_else(|| none.to_string(), |v| v.to_string())
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected key = value")))?;
            let (key, value) = (key.trim(), value.trim());
            c.set(key, value, line)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value, line)?,
            "dataset" => self.dataset = (!value.is_empty()).then(|| PathBuf::from(value)),
            "train_identities" => self.train_identities = parse_optional(key, value, line)?,
            "hidden_dim" => self.layer1.hidden_dim = parse(key, value, line)?,
            "lambda" => self.layer1.lambda = parse(key, value, line)?,
            "sigma_d" => self.layer1.sigma = parse(key, value, line)?,
            "kappa" => self.layer1.kappa = parse(key, value, line)?,
            "max_iter" => self.layer1.max_iter = parse(key, value, line)?,
            "lbfgs_memory" => {
                let m = parse(key, value, line)?;
                self.layer1.lbfgs_memory = m;
                self.metric.lbfgs_memory = m;
            }
            "metric_dim" => self.metric.dim = parse(key, value, line)?,
            "sigma_k" => self.metric.sigma_k = parse(key, value, line)?,
            "lambda_a" => self.metric.lambda_a = parse(key, value, line)?,
            "lambda_b" => self.metric.lambda_b = parse(key, value, line)?,
            "rank_a" => self.metric.rank_a = parse_optional(key, value, line)?,
            "rank_b" => self.metric.rank_b = parse_optional(key, value, line)?,
            "negatives_per_positive" => self.metric.negatives_per_positive = parse(key, value, line)?,
            "metric_max_iter" => self.metric.max_iter = parse(key, value, line)?,
            "corrupt_gallery" => self.metric.corrupt_gallery = parse(key, value, line)?,
            "no_marg" => self.no_marg = parse(key, value, line)?,
            "no_inv" => self.no_inv = parse(key, value, line)?,
            "synth_identities" => self.synth.n_identities = parse(key, value, line)?,
            "synth_latent_dim" => self.synth.latent_dim = parse(key, value, line)?,
            "synth_noise" => self.synth.noise_scale = parse(key, value, line)?,
            "synth_view_shift" => self.synth.view_shift = parse(key, value, line)?,
            other => return Err(Error::Config(format!("line {line}: unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.layer1.validate()?;
        self.metric.validate()?;
        self.synth.validate()
    }

    /// Layer-1 settings with the ablation flags applied.
    pub fn effective_layer1(&self) -> Layer1Config {
        Layer1Config {
            enable_invariance: self.layer1.enable_invariance && !self.no_inv,
            enable_marginalization: self.layer1.enable_marginalization && !self.no_marg,
            ..self.layer1.clone()
        }
    }

    pub fn effective_metric(&self) -> MetricConfig {
        MetricConfig {
            enable_marginalization: self.metric.enable_marginalization && !self.no_marg,
            ..self.metric.clone()
        }
    }

    /// Serialise in the same format [`parse`](Self::parse) accepts.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv(
            "dataset",
            self.dataset
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        kv("train_identities", opt(self.train_identities, "auto"));
        kv("hidden_dim", self.layer1.hidden_dim.to_string());
        kv("lambda", format!("{:e}", self.layer1.lambda));
        kv("sigma_d", self.layer1.sigma.to_string());
        kv("kappa", self.layer1.kappa.to_string());
        kv("max_iter", self.layer1.max_iter.to_string());
        kv("lbfgs_memory", self.layer1.lbfgs_memory.to_string());
        kv("metric_dim", self.metric.dim.to_string());
        kv("sigma_k", self.metric.sigma_k.to_string());
        kv("lambda_a", format!("{:e}", self.metric.lambda_a));
        kv("lambda_b", format!("{:e}", self.metric.lambda_b));
        kv("rank_a", opt(self.metric.rank_a, "full"));
        kv("rank_b", opt(self.metric.rank_b, "full"));
        kv("negatives_per_positive", self.metric.negatives_per_positive.to_string());
        kv("metric_max_iter", self.metric.max_iter.to_string());
        kv("corrupt_gallery", self.metric.corrupt_gallery.to_string());
        kv("no_marg", self.no_marg.to_string());
        kv("no_inv", self.no_inv.to_string());
        kv("synth_identities", self.synth.n_identities.to_string());
        kv("synth_latent_dim", self.synth.latent_dim.to_string());
        kv("synth_noise", self.synth.noise_scale.to_string());
        kv("synth_view_shift", self.synth.view_shift.to_string());
        s
    }
}
