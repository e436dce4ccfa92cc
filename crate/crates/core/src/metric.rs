//! Marginalized second-order metric.
//!
//! The decision function over a (probe, gallery) representation pair is
//!
//! ```text
//! f(k, k') = ½ kᵀA k + ½ k'ᵀA k' + kᵀB k' + cᵀ(k + k') + b,   A = MMᵀ,  B = −NNᵀ
//! ```
//!
//! so A stays PSD and B NSD for any factors. Smaller `f` means more similar.
//! Pairs are scored with the logistic loss `log(1 + exp(y·f))` (y = +1 for
//! a match, −1 otherwise) and Gaussian corruption of `k` is marginalized via
//! the exact diagonal of the loss Hessian with respect to `k`.

use std::path::Path;

use log::info;
use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{lbfgs_minimize_observed, LbfgsConfig};
use crate::rng;
use crate::tensorio::{Tensor, TensorFile};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricParams {
    /// D × r_A
    pub m: DMatrix<f64>,
    /// D × r_B
    pub n: DMatrix<f64>,
    pub bias: f64,
    /// Linear term; zero unless set explicitly, never trained.
    pub c: DVector<f64>,
}

impl MetricParams {
    pub fn zeros(dim: usize, rank_a: usize, rank_b: usize) -> Self {
        Self {
            m: DMatrix::zeros(dim, rank_a),
            n: DMatrix::zeros(dim, rank_b),
            bias: 0.0,
            c: DVector::zeros(dim),
        }
    }

    /// Factors i.i.d. N(0, 1/D), zero bias.
    pub fn random(dim: usize, rank_a: usize, rank_b: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, "metric-init");
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid std");
        let mut p = Self::zeros(dim, rank_a, rank_b);
        p.m.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        p.n.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        p
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn a(&self) -> DMatrix<f64> {
        &self.m * self.m.transpose()
    }

    pub fn b(&self) -> DMatrix<f64> {
        -(&self.n * self.n.transpose())
    }

    fn validate(&self) -> Result<()> {
        let d = self.m.nrows();
        if self.n.nrows() != d || self.c.len() != d {
            return Err(Error::Dimension(format!(
                "metric factors disagree on dimension: M {:?}, N {:?}, c {}",
                self.m.shape(),
                self.n.shape(),
                self.c.len()
            )));
        }
        Ok(())
    }

    fn check_inputs(&self, k: &DVector<f64>, k2: &DVector<f64>) -> Result<()> {
        self.validate()?;
        if k.len() != self.dim() || k2.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "metric of dimension {} applied to vectors of lengths {} and {}",
                self.dim(),
                k.len(),
                k2.len()
            )));
        }
        Ok(())
    }

    /// Trainable parameters: M (column-major), N (column-major), bias.
    pub fn flatten(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.m.len() + self.n.len() + 1);
        v.extend_from_slice(self.m.as_slice());
        v.extend_from_slice(self.n.as_slice());
        v.push(self.bias);
        DVector::from_vec(v)
    }

    /// Rebuild from [`flatten`](Self::flatten) output, keeping `c` from `self`.
    pub fn with_flat(&self, v: &DVector<f64>) -> Self {
        let (d, ra, rb) = (self.dim(), self.m.ncols(), self.n.ncols());
        let s = v.as_slice();
        Self {
            m: DMatrix::from_column_slice(d, ra, &s[..d * ra]),
            n: DMatrix::from_column_slice(d, rb, &s[d * ra..d * (ra + rb)]),
            bias: s[d * (ra + rb)],
            c: self.c.clone(),
        }
    }

    pub fn to_tensors(&self) -> TensorFile {
        let mut f = TensorFile::new();
        f.push("m", Tensor::matrix(&self.m))
            .push("n", Tensor::matrix(&self.n))
            .push("bias", Tensor::scalar(self.bias))
            .push("c", Tensor::vector(&self.c));
        f
    }

    pub fn from_tensors(f: &TensorFile) -> Result<Self> {
        let p = Self {
            m: f.get("m")?.to_matrix()?,
            n: f.get("n")?.to_matrix()?,
            bias: f.get("bias")?.to_scalar()?,
            c: f.get("c")?.to_vector()?,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_tensors().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(&TensorFile::load(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Same,
    Different,
}

impl Label {
    pub fn sign(self) -> f64 {
        match self {
            Label::Same => 1.0,
            Label::Different => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricConfig {
    pub dim: usize,
    pub sigma_k: f64,
    pub lambda_a: f64,
    pub lambda_b: f64,
    /// `None` means full rank (= `dim`).
    pub rank_a: Option<usize>,
    pub rank_b: Option<usize>,
    pub negatives_per_positive: usize,
    pub enable_marginalization: bool,
    /// Also marginalize corruption of the gallery representation.
    pub corrupt_gallery: bool,
    pub max_iter: usize,
    pub lbfgs_memory: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            dim: 400,
            sigma_k: 0.01,
            lambda_a: 1e-8,
            lambda_b: 1e-7,
            rank_a: None,
            rank_b: None,
            negatives_per_positive: 10,
            enable_marginalization: true,
            corrupt_gallery: false,
            max_iter: 300,
            lbfgs_memory: 10,
        }
    }
}

impl MetricConfig {
    pub fn ranks(&self) -> (usize, usize) {
        (self.rank_a.unwrap_or(self.dim), self.rank_b.unwrap_or(self.dim))
    }

    pub fn validate(&self) -> Result<()> {
        let (ra, rb) = self.ranks();
        if self.dim == 0 || ra == 0 || rb == 0 || self.negatives_per_positive == 0 || self.lbfgs_memory == 0 {
            return Err(Error::Config(
                "metric dim, ranks, negative ratio and memory must be positive".into(),
            ));
        }
        if !(self.sigma_k >= 0.0) || !(self.lambda_a >= 0.0) || !(self.lambda_b >= 0.0) {
            return Err(Error::Config("metric sigma and lambdas must be >= 0".into()));
        }
        Ok(())
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn decision_f(p: &MetricParams, k: &DVector<f64>, k2: &DVector<f64>) -> Result<f64> {
    p.check_inputs(k, k2)?;
    let mk = p.m.tr_mul(k);
    let mk2 = p.m.tr_mul(k2);
    let nk = p.n.tr_mul(k);
    let nk2 = p.n.tr_mul(k2);
    Ok(0.5 * mk.norm_squared() + 0.5 * mk2.norm_squared() - nk.dot(&nk2) + p.c.dot(&(k + k2)) + p.bias)
}

/// Ranking score; lower means a closer match.
pub fn dissimilarity(p: &MetricParams, k: &DVector<f64>, k2: &DVector<f64>) -> Result<f64> {
    decision_f(p, k, k2)
}

/// `log(1 + exp(y·f))`, evaluated stably.
pub fn pair_loss(p: &MetricParams, k: &DVector<f64>, k2: &DVector<f64>, y: Label) -> Result<f64> {
    Ok(softplus(y.sign() * decision_f(p, k, k2)?))
}

/// `∂²loss/∂k_d²` for every coordinate of `k`, from explicit A and B.
pub fn loss_hessian_diag(p: &MetricParams, k: &DVector<f64>, k2: &DVector<f64>, y: Label) -> Result<DVector<f64>> {
    let f = decision_f(p, k, k2)?;
    let a = p.a();
    let grad_f = &a * k + p.b() * k2 + &p.c;
    let t = y.sign() * f;
    let g1 = sigmoid(t);
    let g2 = g1 * (1.0 - g1);
    Ok(DVector::from_fn(k.len(), |d, _| {
        g2 * grad_f[d] * grad_f[d] + y.sign() * g1 * a[(d, d)]
    }))
}

/// `½ σ² Σ_d ∂²loss/∂k_d²`.
pub fn marginal_penalty_metric(
    p: &MetricParams,
    k: &DVector<f64>,
    k2: &DVector<f64>,
    y: Label,
    sigma_k: f64,
) -> Result<f64> {
    if sigma_k == 0.0 {
        p.check_inputs(k, k2)?;
        return Ok(0.0);
    }
    Ok(0.5 * sigma_k * sigma_k * loss_hessian_diag(p, k, k2, y)?.sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPair {
    pub probe: DVector<f64>,
    pub gallery: DVector<f64>,
    pub label: Label,
}

/// Pairs packed column-wise for batched evaluation.
#[derive(Debug, Clone)]
pub struct PairSet {
    probe: DMatrix<f64>,
    gallery: DMatrix<f64>,
    signs: DVector<f64>,
}

impl PairSet {
    pub fn new(pairs: &[LabeledPair]) -> Result<Self> {
        let first = pairs.first().ok_or_else(|| Error::Config("empty pair set".into()))?;
        let d = first.probe.len();
        if pairs.iter().any(|p| p.probe.len() != d || p.gallery.len() != d) {
            return Err(Error::Dimension("pair representations differ in length".into()));
        }
        Ok(Self {
            probe: DMatrix::from_columns(&pairs.iter().map(|p| p.probe.clone()).collect::<Vec<_>>()),
            gallery: DMatrix::from_columns(&pairs.iter().map(|p| p.gallery.clone()).collect::<Vec<_>>()),
            signs: DVector::from_iterator(pairs.len(), pairs.iter().map(|p| p.label.sign())),
        })
    }

    pub fn len(&self) -> usize {
        self.signs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.probe.nrows()
    }

    pub fn positives(&self) -> usize {
        self.signs.iter().filter(|s| **s > 0.0).count()
    }
}

/// Gradient of the metric objective with respect to the trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricGrad {
    pub m: DMatrix<f64>,
    pub n: DMatrix<f64>,
    pub bias: f64,
}

impl MetricGrad {
    pub fn flatten(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.m.len() + self.n.len() + 1);
        v.extend_from_slice(self.m.as_slice());
        v.extend_from_slice(self.n.as_slice());
        v.push(self.bias);
        DVector::from_vec(v)
    }
}

fn scale_columns(m: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (mut col, s) in out.column_iter_mut().zip(w.iter()) {
        col *= *s;
    }
    out
}

/// Mean over pairs of (logistic loss + marginalization penalty) plus
/// `λ_A‖A‖²_F + λ_B‖B‖²_F`, with its gradient over (M, N, bias).
pub fn metric_objective(p: &MetricParams, pairs: &PairSet, cfg: &MetricConfig) -> Result<(f64, MetricGrad)> {
    p.validate()?;
    if pairs.is_empty() {
        return Err(Error::Config("empty pair set".into()));
    }
    if pairs.dim() != p.dim() {
        return Err(Error::Dimension(format!(
            "pairs of dimension {} for metric of dimension {}",
            pairs.dim(),
            p.dim()
        )));
    }
    let np = pairs.len() as f64;
    let (kp, kg) = (&pairs.probe, &pairs.gallery);
    let mk = p.m.tr_mul(kp);
    let mk2 = p.m.tr_mul(kg);
    let nk = p.n.tr_mul(kp);
    let nk2 = p.n.tr_mul(kg);
    let ck = p.c.tr_mul(&(kp + kg));

    let f = DVector::from_fn(pairs.len(), |i, _| {
        0.5 * mk.column(i).norm_squared() + 0.5 * mk2.column(i).norm_squared() - nk.column(i).dot(&nk2.column(i))
            + ck[i]
            + p.bias
    });
    let y = &pairs.signs;
    let t = f.component_mul(y);
    let g1 = t.map(sigmoid);
    let g2 = g1.map(|s| s * (1.0 - s));
    let g3 = g1.zip_map(&g2, |s, h| h * (1.0 - 2.0 * s));

    let mut value = t.map(softplus).sum() / np;
    // coefficient of ∂f/∂θ per pair
    let mut coef_f = y.component_mul(&g1) / np;
    let mut grad_m = DMatrix::zeros(p.m.nrows(), p.m.ncols());
    let mut grad_n = DMatrix::zeros(p.n.nrows(), p.n.ncols());

    if cfg.enable_marginalization && cfg.sigma_k > 0.0 {
        let half_var = 0.5 * cfg.sigma_k * cfg.sigma_k;
        let tr_a = p.m.norm_squared();
        let mut sides = vec![(kp, &mk, kg, &nk2)];
        if cfg.corrupt_gallery {
            sides.push((kg, &mk2, kp, &nk));
        }
        for (kc, mkc, _ko, nko) in sides {
            // u = ∂f/∂k_corrupted = M Mᵀk_c − N Nᵀk_o + c
            let mut u = &p.m * mkc - &p.n * nko;
            for mut col in u.column_iter_mut() {
                col += &p.c;
            }
            let uu = DVector::from_iterator(u.ncols(), u.column_iter().map(|c| c.norm_squared()));
            value += half_var * (g2.dot(&uu) + y.component_mul(&g1).sum() * tr_a) / np;
            coef_f += (y.component_mul(&g3).component_mul(&uu) + &g2 * tr_a) * (half_var / np);

            let beta = &g2 * (half_var / np);
            let ub = scale_columns(&u, &beta);
            let mtu = p.m.tr_mul(&u);
            let ntu = p.n.tr_mul(&u);
            grad_m += (&ub * mkc.transpose() + scale_columns(kc, &beta) * mtu.transpose()) * 2.0;
            grad_n -= (&ub * nko.transpose() + scale_columns(_ko, &beta) * ntu.transpose()) * 2.0;
            grad_m += &p.m * (2.0 * half_var * y.component_mul(&g1).sum() / np);
        }
    }

    // ∂f/∂M = k kᵀM + k'k'ᵀM ; ∂f/∂N = −(k (Nᵀk')ᵀ + k' (Nᵀk)ᵀ)
    grad_m += scale_columns(kp, &coef_f) * mk.transpose() + scale_columns(kg, &coef_f) * mk2.transpose();
    grad_n -= scale_columns(kp, &coef_f) * nk2.transpose() + scale_columns(kg, &coef_f) * nk.transpose();
    let grad_b = coef_f.sum();

    if cfg.lambda_a > 0.0 {
        let gram = p.m.tr_mul(&p.m);
        value += cfg.lambda_a * gram.norm_squared();
        grad_m += &p.m * &gram * (4.0 * cfg.lambda_a);
    }
    if cfg.lambda_b > 0.0 {
        let gram = p.n.tr_mul(&p.n);
        value += cfg.lambda_b * gram.norm_squared();
        grad_n += &p.n * &gram * (4.0 * cfg.lambda_b);
    }

    let grad = MetricGrad {
        m: grad_m,
        n: grad_n,
        bias: grad_b,
    };
    if !value.is_finite() {
        return Err(Error::Diverged {
            iteration: 0,
            term: "metric objective".into(),
        });
    }
    if !grad.bias.is_finite() || grad.m.iter().chain(grad.n.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Diverged {
            iteration: 0,
            term: "metric gradient".into(),
        });
    }
    Ok((value, grad))
}

/// Positive pairs `(probe[i], gallery[i])` plus, for each, up to `ratio`
/// distinct negatives `(probe[i], gallery[j])`, `j ≠ i`, drawn without
/// replacement from a seeded stream.
pub fn build_pairs(
    probe: &[DVector<f64>],
    gallery: &[DVector<f64>],
    ratio: usize,
    seed: u64,
) -> Result<Vec<LabeledPair>> {
    if probe.len() != gallery.len() {
        return Err(Error::Dimension(format!(
            "{} probe vs {} gallery representations",
            probe.len(),
            gallery.len()
        )));
    }
    let n = probe.len();
    if n < 2 {
        return Err(Error::Config("metric training needs at least two identities".into()));
    }
    let mut rng = rng::stream(seed, "metric-negatives");
    let per = ratio.min(n - 1);
    let mut out = Vec::with_capacity(n * (per + 1));
    for i in 0..n {
        out.push(LabeledPair {
            probe: probe[i].clone(),
            gallery: gallery[i].clone(),
            label: Label::Same,
        });
        for j in index::sample(&mut rng, n - 1, per).into_iter() {
            let j = if j >= i { j + 1 } else { j };
            out.push(LabeledPair {
                probe: probe[i].clone(),
                gallery: gallery[j].clone(),
                label: Label::Different,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct MetricModel {
    pub params: MetricParams,
    pub trace: Vec<f64>,
}

pub fn train_metric(pairs: &[LabeledPair], cfg: &MetricConfig, seed: u64) -> Result<MetricModel> {
    train_metric_observed(pairs, cfg, seed, |_, _| {})
}

/// Train from a seeded initialisation, calling `observe(iteration, params)`
/// at the start point and after each accepted step.
pub fn train_metric_observed<O>(
    pairs: &[LabeledPair],
    cfg: &MetricConfig,
    seed: u64,
    mut observe: O,
) -> Result<MetricModel>
where
    O: FnMut(usize, &MetricParams),
{
    cfg.validate()?;
    let set = PairSet::new(pairs)?;
    if set.positives() == 0 || set.positives() == set.len() {
        return Err(Error::Config(
            "metric training needs at least one positive and one negative pair".into(),
        ));
    }
    if set.dim() != cfg.dim {
        return Err(Error::Config(format!(
            "metric dim {} but representations have length {}",
            cfg.dim,
            set.dim()
        )));
    }
    let (ra, rb) = cfg.ranks();
    let init = MetricParams::random(cfg.dim, ra, rb, seed);
    let lbfgs = LbfgsConfig {
        memory: cfg.lbfgs_memory,
        ..LbfgsConfig::with_max_iter(cfg.max_iter)
    };
    let report = lbfgs_minimize_observed(
        |theta| {
            let (v, g) = metric_objective(&init.with_flat(theta), &set, cfg)?;
            Ok((v, g.flatten()))
        },
        init.flatten(),
        &lbfgs,
        |it, theta, _| observe(it, &init.with_flat(theta)),
    )?;
    info!(
        "metric training: objective {:.6e} -> {:.6e} in {} iterations ({:?})",
        report.trace[0], report.f, report.iterations, report.termination
    );
    Ok(MetricModel {
        params: init.with_flat(&report.x),
        trace: report.trace,
    })
}
