//! Marginalized invariant feature layer.
//!
//! Two linear autoencoders, one per camera view, map kernel responses to a
//! shared latent space. Each is trained on its own reconstruction error plus
//! the squared distance between the latent codes of matched stripes, with
//! additive Gaussian input corruption marginalized out analytically: for a
//! linear encoder the expected loss gains the closed-form weight penalty
//!
//! ```text
//! Σ_d σ_d² Σ_h w_enc[h,d]²                        (invariance term)
//! Σ_d σ_d² Σ_h (Σ_d' w_dec[d',h]²) · w_enc[h,d]²   (reconstruction term)
//! ```
//!
//! The two networks are optimised alternately with L-BFGS, each for `kappa`
//! iterations while the other is frozen.

use std::cell::Cell;
use std::path::Path;

use log::{debug, info};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{lbfgs_minimize_observed, LbfgsConfig, Termination};
use crate::rng::{self, StreamRng};
use crate::tensorio::{Tensor, TensorFile};

/// Encode/decode weights of one view's network.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// D_h × D
    pub w_enc: DMatrix<f64>,
    pub b_enc: DVector<f64>,
    /// D × D_h
    pub w_dec: DMatrix<f64>,
    pub b_dec: DVector<f64>,
}

impl EncoderParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            w_enc: DMatrix::zeros(hidden_dim, input_dim),
            b_enc: DVector::zeros(hidden_dim),
            w_dec: DMatrix::zeros(input_dim, hidden_dim),
            b_dec: DVector::zeros(input_dim),
        }
    }

    /// Weights i.i.d. uniform in ±√(6/(D+D_h)), zero biases.
    pub fn random(input_dim: usize, hidden_dim: usize, rng: &mut StreamRng) -> Self {
        let a = (6.0 / (input_dim + hidden_dim) as f64).sqrt();
        let mut p = Self::zeros(input_dim, hidden_dim);
        p.w_enc.iter_mut().for_each(|v| *v = rng.random_range(-a..a));
        p.w_dec.iter_mut().for_each(|v| *v = rng.random_range(-a..a));
        p
    }

    pub fn input_dim(&self) -> usize {
        self.w_enc.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_enc.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (dh, d) = self.w_enc.shape();
        if self.b_enc.len() != dh || self.w_dec.shape() != (d, dh) || self.b_dec.len() != d {
            return Err(Error::Dimension(format!(
                "inconsistent encoder shapes: w_enc {:?}, b_enc {}, w_dec {:?}, b_dec {}",
                self.w_enc.shape(),
                self.b_enc.len(),
                self.w_dec.shape(),
                self.b_dec.len()
            )));
        }
        if self.flatten().iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite encoder parameter".into()));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        2 * self.w_enc.len() + self.b_enc.len() + self.b_dec.len()
    }

    /// `W_enc·x + b_enc`
    pub fn encode(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "encoder expects {} inputs, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        Ok(&self.w_enc * x + &self.b_enc)
    }

    /// `W_dec·z + b_dec`
    pub fn decode(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        if z.len() != self.hidden_dim() {
            return Err(Error::Dimension(format!(
                "decoder expects {} latents, got {}",
                self.hidden_dim(),
                z.len()
            )));
        }
        Ok(&self.w_dec * z + &self.b_dec)
    }

    /// Encode every column of `x` (D × n).
    pub fn encode_columns(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = &self.w_enc * x;
        for mut col in z.column_iter_mut() {
            col += &self.b_enc;
        }
        z
    }

    /// Parameters in the order w_enc, b_enc, w_dec, b_dec (matrices column-major).
    pub fn flatten(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend_from_slice(self.w_enc.as_slice());
        v.extend_from_slice(self.b_enc.as_slice());
        v.extend_from_slice(self.w_dec.as_slice());
        v.extend_from_slice(self.b_dec.as_slice());
        DVector::from_vec(v)
    }

    pub fn unflatten(input_dim: usize, hidden_dim: usize, v: &DVector<f64>) -> Self {
        let (d, dh) = (input_dim, hidden_dim);
        let s = v.as_slice();
        let (we, rest) = s.split_at(d * dh);
        let (be, rest) = rest.split_at(dh);
        let (wd, bd) = rest.split_at(d * dh);
        Self {
            w_enc: DMatrix::from_column_slice(dh, d, we),
            b_enc: DVector::from_column_slice(be),
            w_dec: DMatrix::from_column_slice(d, dh, wd),
            b_dec: DVector::from_column_slice(bd),
        }
    }

    pub fn to_tensors(&self) -> TensorFile {
        let mut f = TensorFile::new();
        f.push("w_enc", Tensor::matrix(&self.w_enc))
            .push("b_enc", Tensor::vector(&self.b_enc))
            .push("w_dec", Tensor::matrix(&self.w_dec))
            .push("b_dec", Tensor::vector(&self.b_dec));
        f
    }

    pub fn from_tensors(f: &TensorFile) -> Result<Self> {
        let p = Self {
            w_enc: f.get("w_enc")?.to_matrix()?,
            b_enc: f.get("b_enc")?.to_vector()?,
            w_dec: f.get("w_dec")?.to_matrix()?,
            b_dec: f.get("b_dec")?.to_vector()?,
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

/// Per-dimension standard deviations of additive Gaussian input corruption.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionSpec {
    sigma: DVector<f64>,
}

impl CorruptionSpec {
    pub fn new(sigma: DVector<f64>) -> Result<Self> {
        if sigma.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::Config("corruption sigma must be finite and non-negative".into()));
        }
        Ok(Self { sigma })
    }

    pub fn uniform(dim: usize, sigma: f64) -> Result<Self> {
        Self::new(DVector::from_element(dim, sigma))
    }

    pub fn sigma(&self) -> &DVector<f64> {
        &self.sigma
    }

    pub fn variances(&self) -> DVector<f64> {
        self.sigma.map(|s| s * s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer1Config {
    pub hidden_dim: usize,
    pub lambda: f64,
    pub sigma: f64,
    pub kappa: usize,
    /// L-BFGS iteration budget per network.
    pub max_iter: usize,
    pub enable_invariance: bool,
    pub enable_marginalization: bool,
    pub lbfgs_memory: usize,
}

impl Default for Layer1Config {
    fn default() -> Self {
        Self {
            hidden_dim: 800,
            lambda: 1e-7,
            sigma: 0.1,
            kappa: 50,
            max_iter: 300,
            enable_invariance: true,
            enable_marginalization: true,
            lbfgs_memory: 10,
        }
    }
}

impl Layer1Config {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::Config("layer1 hidden_dim must be > 0".into()));
        }
        if !(self.lambda >= 0.0) || !(self.sigma >= 0.0) {
            return Err(Error::Config("layer1 lambda and sigma must be >= 0".into()));
        }
        if self.kappa == 0 || self.kappa > self.max_iter.max(1) {
            return Err(Error::Config(format!(
                "layer1 kappa must satisfy 0 < kappa <= max_iter, got kappa={} max_iter={}",
                self.kappa, self.max_iter
            )));
        }
        if self.lbfgs_memory == 0 {
            return Err(Error::Config("layer1 lbfgs_memory must be >= 1".into()));
        }
        Ok(())
    }
}

/// Matched stripe pairs: column `i` of `probe` and of `gallery` are the
/// kernel responses of corresponding stripes of the same identity.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub probe: DMatrix<f64>,
    pub gallery: DMatrix<f64>,
}

impl PairBatch {
    pub fn new(probe: DMatrix<f64>, gallery: DMatrix<f64>) -> Result<Self> {
        if probe.shape() != gallery.shape() {
            return Err(Error::Dimension(format!(
                "probe batch {:?} vs gallery batch {:?}",
                probe.shape(),
                gallery.shape()
            )));
        }
        if probe.ncols() == 0 {
            return Err(Error::Config("empty pair batch".into()));
        }
        Ok(Self { probe, gallery })
    }

    pub fn from_pairs(pairs: &[(DVector<f64>, DVector<f64>)]) -> Result<Self> {
        let first = pairs.first().ok_or_else(|| Error::Config("empty pair batch".into()))?;
        let d = first.0.len();
        if let Some((a, b)) = pairs.iter().find(|(a, b)| a.len() != d || b.len() != d) {
            return Err(Error::Dimension(format!(
                "pair of lengths {} and {} in batch of dim {d}",
                a.len(),
                b.len()
            )));
        }
        let probe = DMatrix::from_columns(&pairs.iter().map(|(a, _)| a.clone()).collect::<Vec<_>>());
        let gallery = DMatrix::from_columns(&pairs.iter().map(|(_, b)| b.clone()).collect::<Vec<_>>());
        Self::new(probe, gallery)
    }

    pub fn len(&self) -> usize {
        self.probe.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.probe.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Probe,
    Gallery,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Probe => "probe",
            Side::Gallery => "gallery",
        }
    }
}

fn check_pair(pp: &EncoderParams, pg: &EncoderParams, phi: &DVector<f64>, psi: &DVector<f64>) -> Result<()> {
    pp.validate()?;
    pg.validate()?;
    if pp.hidden_dim() != pg.hidden_dim() {
        return Err(Error::Dimension(format!(
            "probe latent dim {} != gallery latent dim {}",
            pp.hidden_dim(),
            pg.hidden_dim()
        )));
    }
    if phi.len() != pp.input_dim() || psi.len() != pg.input_dim() {
        return Err(Error::Dimension("pair input length does not match encoders".into()));
    }
    Ok(())
}

/// Loss of one matched pair: both reconstruction errors plus, when enabled,
/// the squared latent distance.
pub fn pair_loss(
    pp: &EncoderParams,
    pg: &EncoderParams,
    phi: &DVector<f64>,
    psi: &DVector<f64>,
    enable_invariance: bool,
) -> Result<f64> {
    check_pair(pp, pg, phi, psi)?;
    let zp = pp.encode(phi)?;
    let zg = pg.encode(psi)?;
    let mut loss = (phi - pp.decode(&zp)?).norm_squared() + (psi - pg.decode(&zg)?).norm_squared();
    if enable_invariance {
        loss += (zp - zg).norm_squared();
    }
    Ok(loss)
}

/// Squared latent distance of a matched pair.
pub fn invariance_loss(pp: &EncoderParams, pg: &EncoderParams, phi: &DVector<f64>, psi: &DVector<f64>) -> Result<f64> {
    check_pair(pp, pg, phi, psi)?;
    Ok((pp.encode(phi)? - pg.encode(psi)?).norm_squared())
}

/// Per-latent sums `q_h = Σ_d σ_d² w_enc[h,d]²` and `c_h = Σ_d' w_dec[d',h]²`.
fn penalty_factors(p: &EncoderParams, var: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let dh = p.hidden_dim();
    let q = DVector::from_iterator(
        dh,
        (0..dh).map(|h| p.w_enc.row(h).iter().zip(var.iter()).map(|(w, s)| s * w * w).sum()),
    );
    let c = DVector::from_iterator(dh, p.w_dec.column_iter().map(|col| col.norm_squared()));
    (q, c)
}

/// Marginalization penalty split into (invariance part, reconstruction part).
pub fn marginal_penalty_terms(p: &EncoderParams, sigma: &CorruptionSpec) -> Result<(f64, f64)> {
    p.validate()?;
    if sigma.sigma.len() != p.input_dim() {
        return Err(Error::Dimension(format!(
            "corruption spec of length {} for input dim {}",
            sigma.sigma.len(),
            p.input_dim()
        )));
    }
    let (q, c) = penalty_factors(p, &sigma.variances());
    Ok((q.sum(), q.dot(&c)))
}

/// Full marginalization penalty of the probe network (invariance + reconstruction).
pub fn marginal_penalty_probe(pp: &EncoderParams, sigma: &CorruptionSpec) -> Result<f64> {
    marginal_penalty_terms(pp, sigma).map(|(a, b)| a + b)
}

/// Gallery counterpart of [`marginal_penalty_probe`]; the formula is identical
/// with the gallery network's weights.
pub fn marginal_penalty_gallery(pg: &EncoderParams, sigma: &CorruptionSpec) -> Result<f64> {
    marginal_penalty_terms(pg, sigma).map(|(a, b)| a + b)
}

/// Objective value broken down by term.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectiveTerms {
    pub reconstruction: f64,
    pub invariance: f64,
    pub marginal: f64,
    pub regularization: f64,
}

impl ObjectiveTerms {
    pub fn total(&self) -> f64 {
        self.reconstruction + self.invariance + self.marginal + self.regularization
    }

    fn check_finite(&self, iteration: usize) -> Result<()> {
        for (name, v) in [
            ("reconstruction loss", self.reconstruction),
            ("invariance loss", self.invariance),
            ("marginalization penalty", self.marginal),
            ("weight decay", self.regularization),
        ] {
            if !v.is_finite() {
                return Err(Error::Diverged {
                    iteration,
                    term: name.into(),
                });
            }
        }
        Ok(())
    }
}

/// One side's objective given the frozen counterpart's latent codes
/// (`other_z`, D_h × n). Returns the term breakdown and the gradient with
/// respect to `own`.
fn side_objective(
    own: &EncoderParams,
    x: &DMatrix<f64>,
    other_z: &DMatrix<f64>,
    var: &DVector<f64>,
    cfg: &Layer1Config,
    iteration: usize,
) -> Result<(ObjectiveTerms, EncoderParams)> {
    let n = x.ncols() as f64;
    let z = own.encode_columns(x);
    let mut recon = x - &own.w_dec * &z;
    for mut col in recon.column_iter_mut() {
        col -= &own.b_dec;
    }
    let mut terms = ObjectiveTerms {
        reconstruction: recon.norm_squared() / n,
        ..Default::default()
    };

    // d/dZ of the data terms
    let g_recon = recon * (-2.0 / n);
    let mut g_z = own.w_dec.tr_mul(&g_recon);
    let inv = if cfg.enable_invariance { 1.0 } else { 0.0 };
    if cfg.enable_invariance {
        let e = &z - other_z;
        terms.invariance = e.norm_squared() / n;
        g_z += e * (2.0 / n);
    }

    let mut grad = EncoderParams {
        w_enc: &g_z * x.transpose(),
        b_enc: g_z.column_sum(),
        w_dec: &g_recon * z.transpose(),
        b_dec: g_recon.column_sum(),
    };

    if cfg.enable_marginalization {
        let (q, c) = penalty_factors(own, var);
        terms.marginal = inv * q.sum() + q.dot(&c);
        for h in 0..own.hidden_dim() {
            let coef = 2.0 * (inv + c[h]);
            for d in 0..own.input_dim() {
                grad.w_enc[(h, d)] += coef * var[d] * own.w_enc[(h, d)];
            }
        }
        for h in 0..own.hidden_dim() {
            let coef = 2.0 * q[h];
            let mut col = grad.w_dec.column_mut(h);
            col.axpy(coef, &own.w_dec.column(h), 1.0);
        }
    }

    if cfg.lambda > 0.0 {
        terms.regularization = cfg.lambda * (own.w_enc.norm_squared() + own.w_dec.norm_squared());
        grad.w_enc += &own.w_enc * (2.0 * cfg.lambda);
        grad.w_dec += &own.w_dec * (2.0 * cfg.lambda);
    }

    terms.check_finite(iteration)?;
    if grad.flatten().iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged {
            iteration,
            term: "gradient".into(),
        });
    }
    Ok((terms, grad))
}

fn check_objective_inputs(
    own: &EncoderParams,
    other: &EncoderParams,
    batch: &PairBatch,
    cfg: &Layer1Config,
) -> Result<()> {
    own.validate()?;
    other.validate()?;
    if batch.is_empty() {
        return Err(Error::Config("empty pair batch".into()));
    }
    if own.input_dim() != batch.input_dim() || other.input_dim() != batch.input_dim() {
        return Err(Error::Dimension(format!(
            "encoders expect {} inputs, batch has {}",
            own.input_dim(),
            batch.input_dim()
        )));
    }
    if own.hidden_dim() != other.hidden_dim() {
        return Err(Error::Dimension("probe and gallery latent dims differ".into()));
    }
    if !(cfg.lambda >= 0.0) || !(cfg.sigma >= 0.0) {
        return Err(Error::Config("lambda and sigma must be >= 0".into()));
    }
    Ok(())
}

/// Probe objective with the gallery network frozen: mean reconstruction and
/// invariance loss over the batch, plus the marginalization penalty and
/// weight decay. Returns the value, its breakdown and the gradient over `pp`.
pub fn objective_probe(
    pp: &EncoderParams,
    pg: &EncoderParams,
    batch: &PairBatch,
    cfg: &Layer1Config,
) -> Result<(f64, ObjectiveTerms, EncoderParams)> {
    check_objective_inputs(pp, pg, batch, cfg)?;
    let var = DVector::from_element(batch.input_dim(), cfg.sigma * cfg.sigma);
    let other_z = pg.encode_columns(&batch.gallery);
    let (terms, grad) = side_objective(pp, &batch.probe, &other_z, &var, cfg, 0)?;
    Ok((terms.total(), terms, grad))
}

/// Gallery objective with the probe network frozen; mirror of [`objective_probe`].
pub fn objective_gallery(
    pg: &EncoderParams,
    pp: &EncoderParams,
    batch: &PairBatch,
    cfg: &Layer1Config,
) -> Result<(f64, ObjectiveTerms, EncoderParams)> {
    check_objective_inputs(pg, pp, batch, cfg)?;
    let var = DVector::from_element(batch.input_dim(), cfg.sigma * cfg.sigma);
    let other_z = pp.encode_columns(&batch.probe);
    let (terms, grad) = side_objective(pg, &batch.gallery, &other_z, &var, cfg, 0)?;
    Ok((terms.total(), terms, grad))
}

/// One accepted optimiser step during layer-1 training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub block: usize,
    pub side: Side,
    /// Step index inside the block; 0 is the block's start point.
    pub step: usize,
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct Layer1Model {
    pub probe: EncoderParams,
    pub gallery: EncoderParams,
    pub trace: Vec<TraceEntry>,
}

/// Block schedule: each network receives `max_iter` iterations in blocks of
/// at most `kappa`, alternating probe then gallery.
pub fn alternation_schedule(kappa: usize, max_iter: usize) -> Vec<(Side, usize)> {
    let mut out = Vec::new();
    let mut left = max_iter;
    while left > 0 {
        let n = kappa.min(left);
        out.push((Side::Probe, n));
        out.push((Side::Gallery, n));
        left -= n;
    }
    out
}

/// Alternating L-BFGS training from a seeded random initialisation.
pub fn train_alternating(batch: &PairBatch, cfg: &Layer1Config, seed: u64) -> Result<Layer1Model> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Config("empty pair batch".into()));
    }
    let d = batch.input_dim();
    let mut init_rng = rng::stream(seed, "layer1-init");
    let probe = EncoderParams::random(d, cfg.hidden_dim, &mut init_rng);
    let gallery = EncoderParams::random(d, cfg.hidden_dim, &mut init_rng);
    train_from(batch, cfg, probe, gallery)
}

/// Alternating training from given initial parameters.
pub fn train_from(
    batch: &PairBatch,
    cfg: &Layer1Config,
    mut probe: EncoderParams,
    mut gallery: EncoderParams,
) -> Result<Layer1Model> {
    cfg.validate()?;
    check_objective_inputs(&probe, &gallery, batch, cfg)?;
    let (d, dh) = (batch.input_dim(), cfg.hidden_dim);
    if probe.hidden_dim() != dh {
        return Err(Error::Dimension(format!(
            "initial params have {} latents, config says {dh}",
            probe.hidden_dim()
        )));
    }
    let var = DVector::from_element(d, cfg.sigma * cfg.sigma);
    let mut trace = Vec::new();
    let consumed = Cell::new(0usize);

    for (block, (side, iters)) in alternation_schedule(cfg.kappa, cfg.max_iter).into_iter().enumerate() {
        let (own, x, other_z) = match side {
            Side::Probe => (&mut probe, &batch.probe, gallery.encode_columns(&batch.gallery)),
            Side::Gallery => (&mut gallery, &batch.gallery, probe.encode_columns(&batch.probe)),
        };
        let lbfgs = LbfgsConfig {
            memory: cfg.lbfgs_memory,
            ..LbfgsConfig::with_max_iter(iters)
        };
        let base = consumed.get();
        let objective = |theta: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
            let params = EncoderParams::unflatten(d, dh, theta);
            let (terms, grad) = side_objective(&params, x, &other_z, &var, cfg, consumed.get())?;
            Ok((terms.total(), grad.flatten()))
        };
        let report = lbfgs_minimize_observed(objective, own.flatten(), &lbfgs, |step, _, f| {
            consumed.set(base + step);
            trace.push(TraceEntry {
                block,
                side,
                step,
                objective: f,
            });
        })
        .map_err(|e| match e {
            Error::Diverged { term, .. } => Error::Diverged {
                iteration: consumed.get(),
                term: format!("{term} ({} network, block {block})", side.as_str()),
            },
            other => other,
        })?;
        if report.termination != Termination::MaxIterations {
            debug!(
                "layer1 block {block} ({}) stopped after {} of {iters} iterations: {:?}",
                side.as_str(),
                report.iterations,
                report.termination
            );
        }
        info!(
            "layer1 block {block} ({}): objective {:.6e} -> {:.6e}",
            side.as_str(),
            report.trace[0],
            report.f
        );
        *own = EncoderParams::unflatten(d, dh, &report.x);
        consumed.set(base + iters);
    }
    Ok(Layer1Model { probe, gallery, trace })
}
