//! Numerical self-checks of the analytic objectives, penalties and
//! evaluation code against independent oracles.

use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::eval::{cmc, ScoreMatrix};
use crate::layer1::{
    invariance_loss, marginal_penalty_terms, objective_gallery, objective_probe, CorruptionSpec, EncoderParams,
    Layer1Config, PairBatch,
};
use crate::metric::{
    build_pairs, loss_hessian_diag, metric_objective, pair_loss, train_metric_observed, Label, LabeledPair,
    MetricConfig, MetricParams, PairSet,
};
use crate::numerics::{finite_diff_grad, finite_diff_hess_diag, max_rel_error, rel_error, GRAD_STEP, HESS_STEP};
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    /// Worst observed error (relative, or standard errors for Monte-Carlo).
    pub error: f64,
    pub tolerance: f64,
    pub instances: usize,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.error <= self.tolerance
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<5} {:<40} max_error={:.3e} tolerance={:.1e} instances={}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.error,
            self.tolerance,
            self.instances
        )
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VerifyOptions {
    /// Perturb one analytic gradient entry; used to confirm the gradient
    /// checks can fail.
    pub inject_gradient_fault: bool,
    /// Monte-Carlo sample count for the expectation check.
    pub monte_carlo_draws: usize,
}

impl VerifyOptions {
    pub fn standard() -> Self {
        Self {
            inject_gradient_fault: false,
            monte_carlo_draws: 1_000_000,
        }
    }
}

fn uniform_matrix(r: &mut StreamRng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| r.random_range(-scale..scale))
}

fn uniform_vector(r: &mut StreamRng, n: usize, lo: f64, hi: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| r.random_range(lo..hi))
}

fn random_encoder(r: &mut StreamRng, d: usize, dh: usize) -> EncoderParams {
    EncoderParams {
        w_enc: uniform_matrix(r, dh, d, 0.8),
        b_enc: uniform_vector(r, dh, -0.3, 0.3),
        w_dec: uniform_matrix(r, d, dh, 0.8),
        b_dec: uniform_vector(r, d, -0.3, 0.3),
    }
}

fn random_batch(r: &mut StreamRng, d: usize, n: usize) -> PairBatch {
    PairBatch::new(
        DMatrix::from_fn(d, n, |_, _| r.random_range(0.0..1.0)),
        DMatrix::from_fn(d, n, |_, _| r.random_range(0.0..1.0)),
    )
    .expect("same shapes")
}

fn random_metric(r: &mut StreamRng, d: usize, ra: usize, rb: usize) -> MetricParams {
    let mut p = MetricParams::zeros(d, ra, rb);
    p.m = uniform_matrix(r, d, ra, 0.6);
    p.n = uniform_matrix(r, d, rb, 0.6);
    p.bias = r.random_range(-1.0..1.0);
    p
}

fn random_pairs(r: &mut StreamRng, d: usize, n: usize) -> Vec<LabeledPair> {
    (0..n)
        .map(|i| LabeledPair {
            probe: uniform_vector(r, d, -1.0, 1.0),
            gallery: uniform_vector(r, d, -1.0, 1.0),
            label: if i % 3 == 0 { Label::Same } else { Label::Different },
        })
        .collect()
}

/// Marginalized objectives at σ = 0 against the same objectives with
/// marginalization switched off.
pub fn sigma_zero_collapse(seed: u64, instances: usize) -> Result<Check> {
    let mut r = rng::stream(seed, "verify-collapse");
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (d, dh, n) = (r.random_range(2..8), r.random_range(1..6), r.random_range(1..6));
        let pp = random_encoder(&mut r, d, dh);
        let pg = random_encoder(&mut r, d, dh);
        let batch = random_batch(&mut r, d, n);
        let marg = Layer1Config {
            hidden_dim: dh,
            sigma: 0.0,
            lambda: r.random_range(0.0..0.1),
            ..Layer1Config::default()
        };
        let plain = Layer1Config {
            enable_marginalization: false,
            sigma: 0.3,
            ..marg.clone()
        };
        worst = worst.max(rel_error(
            objective_probe(&pp, &pg, &batch, &marg)?.0,
            objective_probe(&pp, &pg, &batch, &plain)?.0,
        ));
        worst = worst.max(rel_error(
            objective_gallery(&pg, &pp, &batch, &marg)?.0,
            objective_gallery(&pg, &pp, &batch, &plain)?.0,
        ));

        let p = random_metric(&mut r, d, dh, dh);
        let set = PairSet::new(&random_pairs(&mut r, d, n + 1))?;
        let mcfg = MetricConfig {
            dim: d,
            sigma_k: 0.0,
            ..MetricConfig::default()
        };
        let mplain = MetricConfig {
            enable_marginalization: false,
            sigma_k: 0.3,
            ..mcfg.clone()
        };
        worst = worst.max(rel_error(
            metric_objective(&p, &set, &mcfg)?.0,
            metric_objective(&p, &set, &mplain)?.0,
        ));
    }
    Ok(Check {
        name: "sigma=0 collapse (layer1 + metric)".into(),
        error: worst,
        tolerance: 1e-12,
        instances,
    })
}

/// Monte-Carlo mean of the invariance loss under Gaussian input corruption
/// against the loss plus the implemented invariance penalty. The error is in
/// standard errors of the Monte-Carlo mean.
pub fn invariance_expectation(seed: u64, draws: usize) -> Result<Check> {
    let (d, dh, sigma) = (8, 5, 0.1);
    let mut r = rng::stream(seed, "verify-monte-carlo");
    let pp = random_encoder(&mut r, d, dh);
    let pg = random_encoder(&mut r, d, dh);
    let phi = uniform_vector(&mut r, d, 0.0, 1.0);
    let psi = uniform_vector(&mut r, d, 0.0, 1.0);
    let clean = invariance_loss(&pp, &pg, &phi, &psi)?;
    let (penalty, _) = marginal_penalty_terms(&pp, &CorruptionSpec::uniform(d, sigma)?)?;
    let expected = clean + penalty;

    let target = pg.encode(&psi)?;
    let offset = &pp.b_enc - &target;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    let mut noisy = phi.clone();
    for _ in 0..draws {
        for (x, base) in noisy.iter_mut().zip(phi.iter()) {
            let e: f64 = StandardNormal.sample(&mut r);
            *x = base + sigma * e;
        }
        let l = (&pp.w_enc * &noisy + &offset).norm_squared();
        sum += l;
        sum_sq += l * l;
    }
    let n = draws as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean) * n / (n - 1.0);
    let se = (var / n).sqrt();
    Ok(Check {
        name: "invariance expectation (Monte-Carlo)".into(),
        error: (mean - expected).abs() / se,
        tolerance: 3.0,
        instances: draws,
    })
}

fn fault(mut g: DVector<f64>, opts: &VerifyOptions) -> DVector<f64> {
    if opts.inject_gradient_fault && !g.is_empty() {
        g[0] = g[0] * 1.01 + 1e-3;
    }
    g
}

/// Analytic gradients of both layer-1 objectives and the metric objective
/// against central differences.
pub fn gradient_checks(seed: u64, instances: usize, opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut r = rng::stream(seed, "verify-gradients");
    let (mut probe, mut gallery, mut metric) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..instances {
        let (d, dh, n) = (6, 4, 5);
        let cfg = Layer1Config {
            hidden_dim: dh,
            sigma: r.random_range(0.05..0.5),
            lambda: r.random_range(0.0..0.05),
            enable_invariance: i % 4 != 3,
            enable_marginalization: i % 5 != 4,
            ..Layer1Config::default()
        };
        let pp = random_encoder(&mut r, d, dh);
        let pg = random_encoder(&mut r, d, dh);
        let batch = random_batch(&mut r, d, n);

        let g = fault(objective_probe(&pp, &pg, &batch, &cfg)?.2.flatten(), opts);
        let fd = finite_diff_grad(
            |t| objective_probe(&EncoderParams::unflatten(d, dh, t), &pg, &batch, &cfg).map_or(f64::NAN, |o| o.0),
            &pp.flatten(),
            GRAD_STEP,
        )?;
        probe = probe.max(max_rel_error(&g, &fd));

        let g = fault(objective_gallery(&pg, &pp, &batch, &cfg)?.2.flatten(), opts);
        let fd = finite_diff_grad(
            |t| objective_gallery(&EncoderParams::unflatten(d, dh, t), &pp, &batch, &cfg).map_or(f64::NAN, |o| o.0),
            &pg.flatten(),
            GRAD_STEP,
        )?;
        gallery = gallery.max(max_rel_error(&g, &fd));

        let p = random_metric(&mut r, 5, 2, 2);
        let set = PairSet::new(&random_pairs(&mut r, 5, 8))?;
        let mcfg = MetricConfig {
            dim: 5,
            sigma_k: r.random_range(0.01..0.5),
            lambda_a: r.random_range(0.0..0.05),
            lambda_b: r.random_range(0.0..0.05),
            corrupt_gallery: i % 2 == 1,
            ..MetricConfig::default()
        };
        let g = fault(metric_objective(&p, &set, &mcfg)?.1.flatten(), opts);
        let fd = finite_diff_grad(
            |t| metric_objective(&p.with_flat(t), &set, &mcfg).map_or(f64::NAN, |o| o.0),
            &p.flatten(),
            GRAD_STEP,
        )?;
        metric = metric.max(max_rel_error(&g, &fd));
    }
    Ok([
        ("gradient objective_probe", probe),
        ("gradient objective_gallery", gallery),
        ("gradient metric_objective", metric),
    ]
    .into_iter()
    .map(|(name, error)| Check {
        name: name.into(),
        error,
        tolerance: 1e-5,
        instances,
    })
    .collect())
}

/// Second-derivative checks of the corruption penalties.
pub fn hessian_checks(seed: u64, instances: usize) -> Result<Vec<Check>> {
    let mut r = rng::stream(seed, "verify-hessians");
    let (mut inv_probe, mut inv_gallery, mut ae, mut metric) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..instances {
        let (d, dh) = (r.random_range(2..8), r.random_range(1..6));
        let sigma = uniform_vector(&mut r, d, 0.01, 0.4);
        let spec = CorruptionSpec::new(sigma.clone())?;
        let var = spec.variances();
        let pp = random_encoder(&mut r, d, dh);
        let pg = random_encoder(&mut r, d, dh);
        let phi = uniform_vector(&mut r, d, 0.0, 1.0);
        let psi = uniform_vector(&mut r, d, 0.0, 1.0);

        // invariance penalty = ½ Σ_d σ_d² ∂²l_inv/∂x_d², differentiated through each side's input
        let curv = finite_diff_hess_diag(
            |x| invariance_loss(&pp, &pg, x, &psi).unwrap_or(f64::NAN),
            &phi,
            HESS_STEP,
        )?;
        inv_probe = inv_probe.max(rel_error(marginal_penalty_terms(&pp, &spec)?.0, 0.5 * var.dot(&curv)));
        let curv = finite_diff_hess_diag(
            |x| invariance_loss(&pp, &pg, &phi, x).unwrap_or(f64::NAN),
            &psi,
            HESS_STEP,
        )?;
        inv_gallery = inv_gallery.max(rel_error(marginal_penalty_terms(&pg, &spec)?.0, 0.5 * var.dot(&curv)));

        // reconstruction penalty = ½ Σ_d σ_d² Σ_h ∂²l/∂z_h² (∂z_h/∂x_d)², both factors by differences
        let z = pp.encode(&phi)?;
        let recon = |zz: &DVector<f64>| (&phi - pp.decode(zz).expect("latent length")).norm_squared();
        // the loss is quadratic in z so a wide step is exact and keeps roundoff small
        let d2 = finite_diff_hess_diag(recon, &z, 1e-2)?;
        let mut oracle = 0.0;
        for h in 0..dh {
            let dz = finite_diff_grad(|x| pp.encode(x).map_or(f64::NAN, |z| z[h]), &phi, GRAD_STEP)?;
            oracle += 0.5 * d2[h] * dz.component_mul(&dz).dot(&var);
        }
        ae = ae.max(rel_error(marginal_penalty_terms(&pp, &spec)?.1, oracle));

        let (ra, rb) = (r.random_range(1..5), r.random_range(1..5));
        let mut p = random_metric(&mut r, 4, ra, rb);
        p.c = uniform_vector(&mut r, 4, -0.3, 0.3);
        let k = uniform_vector(&mut r, 4, -1.0, 1.0);
        let k2 = uniform_vector(&mut r, 4, -1.0, 1.0);
        for y in [Label::Same, Label::Different] {
            let exact = loss_hessian_diag(&p, &k, &k2, y)?;
            let fd = finite_diff_hess_diag(|x| pair_loss(&p, x, &k2, y).unwrap_or(f64::NAN), &k, HESS_STEP)?;
            metric = metric.max(max_rel_error(&exact, &fd));
        }
    }
    Ok(vec![
        Check {
            name: "hessian invariance penalty (probe)".into(),
            error: inv_probe,
            tolerance: 1e-4,
            instances,
        },
        Check {
            name: "hessian invariance penalty (gallery)".into(),
            error: inv_gallery,
            tolerance: 1e-4,
            instances,
        },
        Check {
            name: "reconstruction penalty vs latent oracle".into(),
            error: ae,
            tolerance: 1e-6,
            instances,
        },
        Check {
            name: "hessian metric pair loss".into(),
            error: metric,
            tolerance: 1e-4,
            instances,
        },
    ])
}

/// Train small metrics and track the extreme eigenvalues of A = MMᵀ and
/// B = −NNᵀ at every iterate. The error is the worst sign violation.
pub fn psd_nsd_during_training(seed: u64, runs: usize) -> Result<Check> {
    let mut r = rng::stream(seed, "verify-psd");
    let mut worst = 0.0f64;
    let mut iterates = 0;
    for run in 0..runs {
        let d = 6;
        let probe: Vec<DVector<f64>> = (0..10).map(|_| uniform_vector(&mut r, d, -1.0, 1.0)).collect();
        let gallery: Vec<DVector<f64>> = probe.iter().map(|k| k + uniform_vector(&mut r, d, -0.2, 0.2)).collect();
        let pairs = build_pairs(&probe, &gallery, 4, seed + run as u64)?;
        let cfg = MetricConfig {
            dim: d,
            rank_a: Some(4),
            max_iter: 40,
            sigma_k: 0.1,
            ..MetricConfig::default()
        };
        train_metric_observed(&pairs, &cfg, seed + run as u64, |_, p| {
            iterates += 1;
            let a_min = SymmetricEigen::new(p.a()).eigenvalues.min();
            let b_max = SymmetricEigen::new(p.b()).eigenvalues.max();
            worst = worst.max(-a_min).max(b_max);
        })?;
    }
    Ok(Check {
        name: "A psd / B nsd at every iterate".into(),
        error: worst.max(0.0),
        tolerance: 1e-10,
        instances: iterates,
    })
}

/// Reference CMC by sorting each row (score, then index) and locating the
/// true match.
pub fn brute_force_cmc(s: &DMatrix<f64>) -> Vec<f64> {
    let (n, m) = s.shape();
    let mut hits = vec![0usize; m];
    for i in 0..n {
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| s[(i, a)].total_cmp(&s[(i, b)]).then(a.cmp(&b)));
        let pos = order.iter().position(|&j| j == i).expect("diagonal match");
        for h in hits.iter_mut().skip(pos) {
            *h += 1;
        }
    }
    hits.into_iter().map(|h| h as f64 / n as f64).collect()
}

/// CMC on random square score matrices, half of them with heavy ties,
/// against [`brute_force_cmc`]. The error counts mismatching matrices.
pub fn cmc_oracle(seed: u64, matrices: usize) -> Result<Check> {
    let mut r = rng::stream(seed, "verify-cmc");
    let ids: Vec<String> = (0..10).map(|i| i.to_string()).collect();
    let mut mismatches = 0;
    for t in 0..matrices {
        let s = if t % 2 == 0 {
            DMatrix::from_fn(10, 10, |_, _| r.random_range(0..4) as f64)
        } else {
            DMatrix::from_fn(10, 10, |_, _| r.random_range(0.0..1.0))
        };
        let curve = cmc(&ScoreMatrix::new(s.clone(), ids.clone(), ids.clone())?)?;
        if curve.rates != brute_force_cmc(&s) {
            mismatches += 1;
        }
    }
    Ok(Check {
        name: "cmc vs brute-force ranking".into(),
        error: mismatches as f64,
        tolerance: 0.0,
        instances: matrices,
    })
}

/// Every check with its standard instance count.
pub fn run_all(seed: u64, opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut checks = vec![sigma_zero_collapse(seed, 50)?];
    checks.push(invariance_expectation(seed, opts.monte_carlo_draws)?);
    checks.extend(gradient_checks(seed, 20, opts)?);
    checks.extend(hessian_checks(seed, 20)?);
    checks.push(psd_nsd_during_training(seed, 3)?);
    checks.push(cmc_oracle(seed, 100)?);
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes() {
        let opts = VerifyOptions {
            monte_carlo_draws: 20_000,
            ..VerifyOptions::standard()
        };
        for c in run_all(1, &opts).unwrap() {
            assert!(c.passed(), "{c}");
        }
    }

    #[test]
    fn injected_fault_is_caught() {
        let opts = VerifyOptions {
            inject_gradient_fault: true,
            ..VerifyOptions::standard()
        };
        let checks = gradient_checks(0, 2, &opts).unwrap();
        assert!(checks.iter().all(|c| !c.passed()));
    }

    #[test]
    fn brute_force_reference() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        // probe 0 wins its tie, probe 1 is beaten
        assert_eq!(brute_force_cmc(&s), vec![0.5, 1.0]);
    }
}
