//! Reachability value functions: the grid oracle and fitted approximators.

pub mod dataset;
pub mod fit;
pub mod grid;
pub mod reduced;
pub mod validate;

pub use dataset::{Provenance, Transition, TransitionDataset};
pub use fit::{fit_value_functions, FitConfig, FitDomain, FitReport, ValueApproximator};
pub use grid::{solve_grid, Backup, GridAxis, GridSpec, SolveOptions, ValueGrid};
pub use validate::{sign_agreement, AgreementReport};
pub use reduced::{Reduced, ReducedAction, ReducedDynamics};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReachError {
    #[error("value iteration did not converge after {sweeps} sweeps (residual {residual:.3e})")]
    NotConverged { sweeps: usize, residual: f64, history: Vec<f64> },
    #[error("fitting diverged: {0}")]
    Diverged(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Discounted reachability backup `(1 - γ) h + γ max(h, V')`.
#[inline]
pub fn bellman_backup(h_x: f64, v_next: f64, gamma: f64) -> f64 {
    (1.0 - gamma) * h_x + gamma * h_x.max(v_next)
}

/// Asymmetric squared loss on `eps = Q - V`. Negative residuals (Q below V)
/// carry weight `1 - tau`, so a small `tau` drives V toward the minimum of Q.
#[inline]
pub fn expectile_loss(eps: f64, tau: f64) -> f64 {
    expectile_weight(eps, tau) * eps * eps
}

#[inline]
pub fn expectile_weight(eps: f64, tau: f64) -> f64 {
    (tau - if eps < 0.0 { 1.0 } else { 0.0 }).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn backup_examples() {
        assert_relative_eq!(bellman_backup(-2.0, -5.0, 0.9), -2.0, epsilon = 1e-12);
        assert_relative_eq!(bellman_backup(1.0, 0.3, 0.99), 1.0, epsilon = 1e-12);
        assert_eq!(bellman_backup(-2.0, -5.0, 1.0), -2.0);
        assert_relative_eq!(bellman_backup(-2.0, 0.5, 0.9), -0.2 + 0.45, epsilon = 1e-12);
    }

    #[test]
    fn expectile_examples() {
        assert_eq!(expectile_loss(0.0, 0.3), 0.0);
        assert_eq!(expectile_loss(2.0, 0.5), 2.0);
        assert_relative_eq!(expectile_loss(-1.0, 0.1), 0.9, epsilon = 1e-15);
        assert_relative_eq!(expectile_loss(1.0, 0.1), 0.1, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn backup_dominates_h(h in -10.0..2.0f64, v in -10.0..2.0f64, g in 0.9..1.0f64) {
            prop_assert!(bellman_backup(h, v, g) >= h - 1e-12);
        }

        #[test]
        fn backup_is_gamma_lipschitz_in_v(h in -5.0..1.0f64, v1 in -5.0..1.0f64, v2 in -5.0..1.0f64, g in 0.9..1.0f64) {
            let d = (bellman_backup(h, v1, g) - bellman_backup(h, v2, g)).abs();
            prop_assert!(d <= g * (v1 - v2).abs() + 1e-12);
        }
    }
}
