//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! The line search follows the bracket/zoom scheme of Nocedal & Wright
//! (Alg. 3.5/3.6) with safeguarded cubic interpolation.

use std::collections::VecDeque;

use log::debug;
use nalgebra::DVector;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iter: 300,
            grad_tol: 1e-8,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 25,
        }
    }
}

impl LbfgsConfig {
    pub fn with_max_iter(max_iter: usize) -> Self {
        Self {
            max_iter,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.memory == 0 {
            return Err(Error::Config("L-BFGS memory must be >= 1".into()));
        }
        if !(self.grad_tol > 0.0) || !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(Error::Config(format!(
                "invalid L-BFGS tolerances: grad_tol={}, c1={}, c2={}",
                self.grad_tol, self.c1, self.c2
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    MaxIterations,
    GradientTolerance,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct LbfgsReport {
    pub x: DVector<f64>,
    pub f: f64,
    /// Objective at the start point followed by one entry per accepted step.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
}

pub fn lbfgs_minimize<F>(f: F, x0: DVector<f64>, cfg: &LbfgsConfig) -> Result<LbfgsReport>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    lbfgs_minimize_observed(f, x0, cfg, |_, _, _| {})
}

/// Like [`lbfgs_minimize`], calling `observe(iteration, x, f)` on the start
/// point (iteration 0) and after every accepted step.
pub fn lbfgs_minimize_observed<F, O>(
    mut f: F,
    x0: DVector<f64>,
    cfg: &LbfgsConfig,
    mut observe: O,
) -> Result<LbfgsReport>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
    O: FnMut(usize, &DVector<f64>, f64),
{
    cfg.validate()?;
    let mut x = x0;
    let (mut fx, mut g) = f(&x)?;
    let mut evaluations = 1;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged {
            iteration: 0,
            term: "objective at start point".into(),
        });
    }
    let mut trace = vec![fx];
    observe(0, &x, fx);

    let mut history: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::with_capacity(cfg.memory);
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;

    loop {
        if g.amax() <= cfg.grad_tol {
            termination = Termination::GradientTolerance;
            break;
        }
        if iterations >= cfg.max_iter {
            break;
        }

        let mut d = two_loop(&g, &history);
        let mut gtd = g.dot(&d);
        if !(gtd < 0.0) {
            history.clear();
            d = -&g;
            gtd = g.dot(&d);
        }
        let t0 = if history.is_empty() {
            (1.0 / g.lp_norm(1)).min(1.0)
        } else {
            1.0
        };

        let ls = strong_wolfe(&mut f, &x, &d, fx, &g, gtd, t0, cfg)?;
        evaluations += ls.evaluations;
        if !(ls.f <= fx) || ls.t == 0.0 {
            debug!("line search failed at iteration {iterations}: f={fx}, trial={}", ls.f);
            termination = Termination::LineSearchFailed;
            break;
        }

        let s = &d * ls.t;
        let y = &ls.g - &g;
        let sy = s.dot(&y);
        if sy > 1e-10 * y.dot(&y).max(f64::MIN_POSITIVE) {
            if history.len() == cfg.memory {
                history.pop_front();
            }
            history.push_back((s.clone(), y, 1.0 / sy));
        }
        x += s;
        fx = ls.f;
        g = ls.g;
        iterations += 1;
        trace.push(fx);
        observe(iterations, &x, fx);
    }

    Ok(LbfgsReport {
        x,
        f: fx,
        trace,
        iterations,
        evaluations,
        termination,
    })
}

/// Two-loop recursion: returns `−H·g` for the implicit inverse Hessian.
fn two_loop(g: &DVector<f64>, history: &VecDeque<(DVector<f64>, DVector<f64>, f64)>) -> DVector<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * s.dot(&q);
        q.axpy(-a, y, 1.0);
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        q *= s.dot(y) / y.dot(y);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
        let b = rho * y.dot(&q);
        q.axpy(a - b, s, 1.0);
    }
    -q
}

struct LineSearchResult {
    t: f64,
    f: f64,
    g: DVector<f64>,
    evaluations: usize,
}

#[derive(Clone)]
struct Probe {
    t: f64,
    f: f64,
    g: DVector<f64>,
    gtd: f64,
}

/// Minimiser of the cubic through two points with known slopes, clamped to
/// `[lo, hi]`; bisection when the cubic has no real minimiser.
fn cubic_interpolate(a: &Probe, b: &Probe, lo: f64, hi: f64) -> f64 {
    let d1 = a.gtd + b.gtd - 3.0 * (a.f - b.f) / (a.t - b.t);
    let d2_sq = d1 * d1 - a.gtd * b.gtd;
    if d2_sq >= 0.0 {
        let d2 = d2_sq.sqrt();
        let t = if a.t <= b.t {
            b.t - (b.t - a.t) * ((b.gtd + d2 - d1) / (b.gtd - a.gtd + 2.0 * d2))
        } else {
            a.t - (a.t - b.t) * ((a.gtd + d2 - d1) / (a.gtd - b.gtd + 2.0 * d2))
        };
        if t.is_finite() {
            return t.clamp(lo, hi);
        }
    }
    0.5 * (lo + hi)
}

#[allow(clippy::too_many_arguments)]
fn strong_wolfe<F>(
    f: &mut F,
    x: &DVector<f64>,
    d: &DVector<f64>,
    f0: f64,
    g0: &DVector<f64>,
    gtd0: f64,
    t_init: f64,
    cfg: &LbfgsConfig,
) -> Result<LineSearchResult>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    let mut evaluations = 0;
    let mut eval = |t: f64| -> Result<Probe> {
        let (fv, gv) = f(&(x + d * t))?;
        evaluations += 1;
        let finite = fv.is_finite() && gv.iter().all(|v| v.is_finite());
        let gtd = if finite { gv.dot(d) } else { f64::NAN };
        Ok(Probe {
            t,
            f: if finite { fv } else { f64::INFINITY },
            g: gv,
            gtd,
        })
    };
    let armijo = |p: &Probe| p.f <= f0 + cfg.c1 * p.t * gtd0;
    let curvature = |p: &Probe| p.gtd.abs() <= -cfg.c2 * gtd0;

    let start = Probe {
        t: 0.0,
        f: f0,
        g: g0.clone(),
        gtd: gtd0,
    };
    let mut prev = start.clone();
    let mut cur = eval(t_init)?;
    let mut iter = 0;

    // bracketing phase
    let (mut lo, mut hi) = loop {
        if !cur.f.is_finite() {
            // overshoot into a non-finite region: shrink toward the last good point
            if iter >= cfg.max_line_search {
                return Ok(best_of(start, prev, evaluations));
            }
            iter += 1;
            let t = prev.t + 0.5 * (cur.t - prev.t);
            cur = eval(t)?;
            continue;
        }
        if !armijo(&cur) || (iter > 0 && cur.f >= prev.f) {
            break (prev, cur);
        }
        if curvature(&cur) {
            return Ok(LineSearchResult {
                t: cur.t,
                f: cur.f,
                g: cur.g,
                evaluations,
            });
        }
        if cur.gtd >= 0.0 {
            break (cur, prev);
        }
        if iter >= cfg.max_line_search {
            return Ok(best_of(start, cur, evaluations));
        }
        iter += 1;
        let t = cubic_interpolate(&prev, &cur, cur.t + 0.01 * (cur.t - prev.t), cur.t * 10.0);
        prev = cur;
        cur = eval(t)?;
    };

    // zoom phase: `lo` satisfies Armijo with the lowest value seen so far
    let mut insufficient_progress = false;
    while iter < cfg.max_line_search {
        iter += 1;
        let (a, b) = (lo.t.min(hi.t), lo.t.max(hi.t));
        if (b - a) * d.amax() < 1e-14 {
            break;
        }
        let mut t = if hi.f.is_finite() {
            cubic_interpolate(&lo, &hi, a, b)
        } else {
            0.5 * (a + b)
        };
        let eps = 0.1 * (b - a);
        if (b - t).min(t - a) < eps {
            if insufficient_progress || t >= b || t <= a {
                t = if (t - b).abs() < (t - a).abs() {
                    b - eps
                } else {
                    a + eps
                };
                insufficient_progress = false;
            } else {
                insufficient_progress = true;
            }
        } else {
            insufficient_progress = false;
        }
        let p = eval(t)?;
        if !p.f.is_finite() || !armijo(&p) || p.f >= lo.f {
            hi = p;
        } else {
            if curvature(&p) {
                return Ok(LineSearchResult {
                    t: p.t,
                    f: p.f,
                    g: p.g,
                    evaluations,
                });
            }
            if p.gtd * (hi.t - lo.t) >= 0.0 {
                hi = lo;
            }
            lo = p;
        }
    }
    Ok(best_of(start, lo, evaluations))
}

fn best_of(start: Probe, candidate: Probe, evaluations: usize) -> LineSearchResult {
    let p = if candidate.f.is_finite() && candidate.f < start.f {
        candidate
    } else {
        start
    };
    LineSearchResult {
        t: p.t,
        f: p.f,
        g: p.g,
        evaluations,
    }
}
