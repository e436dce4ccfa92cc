//! Shared numerical machinery: L-BFGS, finite-difference oracles and PCA.

pub mod finite_diff;
pub mod lbfgs;
pub mod pca;

pub use finite_diff::{finite_diff_grad, finite_diff_hess_diag, max_rel_error, rel_error, GRAD_STEP, HESS_STEP};
pub use lbfgs::{lbfgs_minimize, lbfgs_minimize_observed, LbfgsConfig, LbfgsReport, Termination};
pub use pca::{pca_fit, pca_project, PcaModel};
