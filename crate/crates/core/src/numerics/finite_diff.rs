//! Central-difference oracles used to check analytic derivatives.

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Relative step for gradients: `h_d = 1e-5·(1+|x_d|)`.
pub const GRAD_STEP: f64 = 1e-5;
/// Relative step for second derivatives, larger to keep roundoff below 1e-6.
pub const HESS_STEP: f64 = 1e-4;

fn step(scale: f64, xd: f64) -> f64 {
    scale * (1.0 + xd.abs())
}

fn checked(v: f64, d: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Domain(format!(
            "non-finite function value while differencing coordinate {d}"
        )))
    }
}

/// `(f(x+h e_d) − f(x−h e_d)) / 2h` per coordinate, `h = scale·(1+|x_d|)`.
pub fn finite_diff_grad<F>(mut f: F, x: &DVector<f64>, scale: f64) -> Result<DVector<f64>>
where
    F: FnMut(&DVector<f64>) -> f64,
{
    let mut probe = x.clone();
    let mut out = DVector::zeros(x.len());
    for d in 0..x.len() {
        let h = step(scale, x[d]);
        probe[d] = x[d] + h;
        let plus = checked(f(&probe), d)?;
        probe[d] = x[d] - h;
        let minus = checked(f(&probe), d)?;
        probe[d] = x[d];
        // use the representable step actually taken
        out[d] = (plus - minus) / ((x[d] + h) - (x[d] - h));
    }
    Ok(out)
}

/// `(f(x+h e_d) − 2f(x) + f(x−h e_d)) / h²` per coordinate.
pub fn finite_diff_hess_diag<F>(mut f: F, x: &DVector<f64>, scale: f64) -> Result<DVector<f64>>
where
    F: FnMut(&DVector<f64>) -> f64,
{
    let f0 = checked(f(x), usize::MAX)?;
    let mut probe = x.clone();
    let mut out = DVector::zeros(x.len());
    for d in 0..x.len() {
        let h = step(scale, x[d]);
        probe[d] = x[d] + h;
        let plus = checked(f(&probe), d)?;
        probe[d] = x[d] - h;
        let minus = checked(f(&probe), d)?;
        probe[d] = x[d];
        out[d] = (plus - 2.0 * f0 + minus) / (h * h);
    }
    Ok(out)
}

/// Normwise relative error `max_d |a_d − b_d| / max(‖a‖∞, ‖b‖∞)`; 0 when
/// both vectors vanish.
pub fn max_rel_error(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let scale = a.amax().max(b.amax());
    if scale == 0.0 {
        return 0.0;
    }
    (a - b).amax() / scale
}

/// Scalar relative error `|a − b| / max(|a|, |b|)`; 0 when both vanish.
pub fn rel_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_gradient_is_exact() {
        let c = DVector::from_vec(vec![1.5, -2.0, 0.25]);
        let x = DVector::from_vec(vec![0.3, 7.0, -1.0]);
        let g = finite_diff_grad(|v| c.dot(v), &x, GRAD_STEP).unwrap();
        assert!((g - &c).amax() <= 1e-10);
    }

    #[test]
    fn half_square_norm_gradient() {
        let x = DVector::from_vec(vec![0.3, -2.0, 4.0, 0.0]);
        let g = finite_diff_grad(|v| 0.5 * v.norm_squared(), &x, GRAD_STEP).unwrap();
        assert!((g - &x).amax() <= 1e-8);
    }

    #[test]
    fn hessian_diag_quadratic_and_linear() {
        let x = DVector::from_vec(vec![0.3, -2.0, 4.0]);
        let h = finite_diff_hess_diag(|v| 0.5 * v.norm_squared(), &x, HESS_STEP).unwrap();
        assert!(h.iter().all(|v| (v - 1.0).abs() <= 1e-6), "{h:?}");
        let c = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let h = finite_diff_hess_diag(|v| c.dot(v), &x, HESS_STEP).unwrap();
        assert!(h.amax() <= 1e-6, "{h:?}");
    }

    #[test]
    fn non_finite_is_error() {
        let x = DVector::from_vec(vec![0.0]);
        assert!(finite_diff_grad(|v| 1.0 / v[0].abs().min(1e-300) * f64::INFINITY, &x, GRAD_STEP).is_err());
    }
}
