//! Gaussian-mixture Q-functions trained by Riemannian steepest descent inside
//! policy iteration, plus the control benchmarks and a tabular reference solver.
//!
//! Module map:
//! - [`manifold`]: SPD geometry (metrics, Lyapunov solver, exponential maps) and the
//!   product metric/retraction over model parameters.
//! - [`gmmqf`]: the model, the empirical Bellman-residual loss, analytic gradients.
//! - [`optimizer`]: steepest descent with Armijo backtracking.
//! - [`envs`]: pendulum, mountain car and acrobot simulators.
//! - [`policy_iter`]: data collection, evaluation, greedy improvement, trial logs.
//! - [`oracle`]: finite-MDP Bellman operators and grid discretization.
//! - [`gradcheck`]: finite-difference validation of the analytic gradients.
//! - [`model_io`]: JSON model files.
//! - [`suites`]: validation routines shared by the CLI and the acceptance tests.
//!
//! Per-sample loops run on rayon when the `parallel` feature is on (the default); the
//! reductions are chunked identically either way so results do not depend on the feature.

#[cfg(test)]
macro_rules! assert_close {
    ($a:expr, $b:expr, $tol:expr) => {{
        let (a, b): (f64, f64) = ($a, $b);
        assert!((a - b).abs() <= $tol, "{} vs {} (tol {})", a, b, $tol);
    }};
}

pub mod envs;
pub mod exec;
pub mod gmmqf;
pub mod gradcheck;
pub mod manifold;
pub mod model_io;
pub mod optimizer;
pub mod oracle;
pub mod policy_iter;
pub mod suites;

pub use exec::Execution;
pub use gmmqf::{GmmQf, ModelError, TransitionBatch, WeightLayout};
pub use manifold::{MetricKind, ProductTangent, SpdMatrix, SymTangent};
