//! Riemannian steepest descent with Armijo backtracking.
//!
//! Each iteration takes `Υ = -∇L(Ω)` and accepts the step `ᾱβ^M` for the smallest
//! `M ≥ 1` satisfying `L(Ω) - L(R_Ω(ᾱβ^M Υ)) ≥ σ ᾱβ^M ‖∇L(Ω)‖²_Ω`. The full step `ᾱ` is
//! never tried. The optimizer is generic over [`Objective`]; [`BrObjective`] plugs in the
//! Bellman-residual loss of a [`GmmQf`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::gmmqf::{self, GmmQf, ModelError, TransitionBatch};
use crate::manifold::{self, MetricKind, ProductTangent};

/// A smooth loss on a manifold with a metric and a retraction.
pub trait Objective {
    type Point: Clone;
    type Tangent;

    fn loss(&self, point: &Self::Point) -> f64;

    /// Loss and Riemannian gradient at `point`.
    fn loss_and_gradient(&self, point: &Self::Point) -> (f64, Self::Tangent);

    /// `‖t‖²` in the metric at `point`.
    fn norm_sq(&self, point: &Self::Point, t: &Self::Tangent) -> f64;

    /// `R_point(-step · gradient)`, with the number of repaired blocks (0 when none).
    fn retract_descent(
        &self,
        point: &Self::Point,
        gradient: &Self::Tangent,
        step: f64,
    ) -> (Self::Point, usize);
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{field} = {value} violates {constraint}")]
    OutOfRange {
        field: &'static str,
        value: f64,
        constraint: &'static str,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArmijoConfig {
    /// Initial step `ᾱ`.
    pub alpha_bar: f64,
    /// Backtracking factor `β`.
    pub beta: f64,
    /// Sufficient-decrease constant `σ_A`.
    pub sigma: f64,
    pub max_backtracks: u32,
    /// Iteration budget `J`.
    pub j_steps: usize,
    pub grad_tol: f64,
}

impl Default for ArmijoConfig {
    fn default() -> Self {
        Self {
            alpha_bar: 1.0,
            beta: 0.5,
            sigma: 1e-4,
            max_backtracks: 40,
            j_steps: 50,
            grad_tol: 1e-10,
        }
    }
}

impl ArmijoConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let check = |ok: bool, field, value, constraint| {
            if ok {
                Ok(())
            } else {
                Err(ConfigError::OutOfRange {
                    field,
                    value,
                    constraint,
                })
            }
        };
        check(
            self.alpha_bar > 0.0 && self.alpha_bar.is_finite(),
            "alpha_bar",
            self.alpha_bar,
            "alpha_bar > 0",
        )?;
        check(
            self.beta > 0.0 && self.beta < 1.0,
            "beta",
            self.beta,
            "0 < beta < 1",
        )?;
        check(
            self.sigma > 0.0 && self.sigma < 1.0,
            "sigma",
            self.sigma,
            "0 < sigma < 1",
        )?;
        check(
            self.max_backtracks >= 1,
            "max_backtracks",
            f64::from(self.max_backtracks),
            "max_backtracks >= 1",
        )?;
        check(
            self.grad_tol >= 0.0,
            "grad_tol",
            self.grad_tol,
            "grad_tol >= 0",
        )
    }

    /// Step tried at backtrack count `m` (`m ≥ 1`).
    pub fn step_at(&self, m: u32) -> f64 {
        self.alpha_bar * self.beta.powi(m as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmijoStep<P> {
    /// Accepted step `ᾱβ^M` (0 when the gradient was below tolerance).
    pub step: f64,
    pub point: P,
    pub loss: f64,
    /// `M`; 0 only for the zero-gradient short circuit.
    pub backtracks: u32,
    pub repaired_blocks: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("no step satisfied the Armijo condition within {tried} backtracks (loss {loss}, gradient norm {grad_norm})")]
pub struct ArmijoFailure {
    pub tried: u32,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Backtracking search along `-grad` from `point`, whose loss is `loss`.
pub fn armijo_search<O: Objective>(
    obj: &O,
    point: &O::Point,
    loss: f64,
    grad: &O::Tangent,
    cfg: &ArmijoConfig,
) -> Result<ArmijoStep<O::Point>, ArmijoFailure> {
    let norm_sq = obj.norm_sq(point, grad);
    if norm_sq.sqrt() < cfg.grad_tol {
        return Ok(ArmijoStep {
            step: 0.0,
            point: point.clone(),
            loss,
            backtracks: 0,
            repaired_blocks: 0,
        });
    }
    for m in 1..=cfg.max_backtracks {
        let step = cfg.step_at(m);
        let (candidate, repaired_blocks) = obj.retract_descent(point, grad, step);
        let new_loss = obj.loss(&candidate);
        if loss - new_loss >= cfg.sigma * step * norm_sq {
            return Ok(ArmijoStep {
                step,
                point: candidate,
                loss: new_loss,
                backtracks: m,
                repaired_blocks,
            });
        }
    }
    Err(ArmijoFailure {
        tried: cfg.max_backtracks,
        loss,
        grad_norm: norm_sq.sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    BudgetExhausted,
    GradientBelowTol,
    BacktrackFailed,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::BudgetExhausted => "budget_exhausted",
            Termination::GradientBelowTol => "gradient_below_tol",
            Termination::BacktrackFailed => "backtrack_failed",
        }
    }
}

/// One accepted descent step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub loss_before: f64,
    pub loss_after: f64,
    /// `‖∇L‖` in the product metric at the start of the iteration.
    pub grad_norm: f64,
    pub step: f64,
    pub backtracks: u32,
    pub repaired_blocks: usize,
}

impl IterationRecord {
    /// Re-evaluates the sufficient-decrease inequality for this step.
    pub fn satisfies_armijo(&self, sigma: f64) -> bool {
        self.loss_before - self.loss_after >= sigma * self.step * self.grad_norm * self.grad_norm
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentTrace {
    pub initial_loss: f64,
    pub iterations: Vec<IterationRecord>,
    pub final_loss: f64,
    pub final_grad_norm: f64,
    pub termination: Termination,
}

impl DescentTrace {
    pub fn losses(&self) -> Vec<f64> {
        std::iter::once(self.initial_loss)
            .chain(self.iterations.iter().map(|r| r.loss_after))
            .collect()
    }

    pub fn is_monotone(&self) -> bool {
        self.losses().windows(2).all(|w| w[1] <= w[0])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Descent<P> {
    pub point: P,
    pub trace: DescentTrace,
}

/// Runs up to `cfg.j_steps` Armijo steps from `initial`.
///
/// Stops early when the gradient norm drops below `cfg.grad_tol` or backtracking fails;
/// in the latter case the last accepted iterate (also the lowest-loss one) is returned.
pub fn descend<O: Objective>(obj: &O, initial: &O::Point, cfg: &ArmijoConfig) -> Descent<O::Point> {
    let mut point = initial.clone();
    let (mut loss, mut grad) = obj.loss_and_gradient(&point);
    let initial_loss = loss;
    let mut iterations = Vec::with_capacity(cfg.j_steps);
    let mut termination = Termination::BudgetExhausted;
    for _ in 0..cfg.j_steps {
        let grad_norm = obj.norm_sq(&point, &grad).sqrt();
        if grad_norm < cfg.grad_tol {
            termination = Termination::GradientBelowTol;
            break;
        }
        match armijo_search(obj, &point, loss, &grad, cfg) {
            Ok(accepted) => {
                iterations.push(IterationRecord {
                    loss_before: loss,
                    loss_after: accepted.loss,
                    grad_norm,
                    step: accepted.step,
                    backtracks: accepted.backtracks,
                    repaired_blocks: accepted.repaired_blocks,
                });
                point = accepted.point;
                (loss, grad) = obj.loss_and_gradient(&point);
            }
            Err(_) => {
                termination = Termination::BacktrackFailed;
                break;
            }
        }
    }
    let final_grad_norm = obj.norm_sq(&point, &grad).sqrt();
    Descent {
        point,
        trace: DescentTrace {
            initial_loss,
            iterations,
            final_loss: loss,
            final_grad_norm,
            termination,
        },
    }
}

/// Which parameter blocks the descent may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockMask {
    pub weights: bool,
    pub means: bool,
    pub covs: bool,
}

impl BlockMask {
    pub const ALL: BlockMask = BlockMask {
        weights: true,
        means: true,
        covs: true,
    };
    pub const WEIGHTS_ONLY: BlockMask = BlockMask {
        weights: true,
        means: false,
        covs: false,
    };
}

/// The empirical Bellman-residual loss of a [`GmmQf`] over a fixed batch.
#[derive(Debug, Clone)]
pub struct BrObjective<'a> {
    batch: &'a TransitionBatch,
    discount: f64,
    metric: MetricKind,
    mask: BlockMask,
    exec: Execution,
}

impl<'a> BrObjective<'a> {
    /// Validates the batch and discount against `model`'s shape once up front.
    pub fn new(
        model: &GmmQf,
        batch: &'a TransitionBatch,
        discount: f64,
        metric: MetricKind,
    ) -> Result<Self, ModelError> {
        gmmqf::br_loss(model, batch, discount)?;
        Ok(Self {
            batch,
            discount,
            metric,
            mask: BlockMask::ALL,
            exec: Execution::default(),
        })
    }

    pub fn with_mask(mut self, mask: BlockMask) -> Self {
        self.mask = mask;
        self
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn metric(&self) -> MetricKind {
        self.metric
    }
}

impl Objective for BrObjective<'_> {
    type Point = GmmQf;
    type Tangent = ProductTangent;

    fn loss(&self, point: &GmmQf) -> f64 {
        gmmqf::loss_unchecked(point, self.batch, self.discount, self.exec)
    }

    fn loss_and_gradient(&self, point: &GmmQf) -> (f64, ProductTangent) {
        let ws = gmmqf::workspace_unchecked(point, self.batch, self.discount, self.exec);
        let mut grad = gmmqf::gradient_from_workspace(&ws, point, self.metric);
        if !self.mask.weights {
            grad.weights.iter_mut().for_each(|w| *w = 0.0);
        }
        if !self.mask.means {
            grad.means.iter_mut().for_each(|m| m.fill(0.0));
        }
        if !self.mask.covs {
            let d = point.dim();
            grad.covs = vec![manifold::SymTangent::zeros(d); point.k()];
        }
        (ws.loss(), grad)
    }

    fn norm_sq(&self, point: &GmmQf, t: &ProductTangent) -> f64 {
        manifold::product_inner(point, t, t, self.metric).expect("gradient matches model shape")
    }

    fn retract_descent(
        &self,
        point: &GmmQf,
        gradient: &ProductTangent,
        step: f64,
    ) -> (GmmQf, usize) {
        match manifold::retract(point, &gradient.scaled(-1.0), step, self.metric) {
            Ok(r) => (r.point, r.repaired_blocks),
            // Overflow in the exponential map. Staying put fails the sufficient-decrease
            // test for any positive step, so the search simply backtracks further.
            Err(manifold::ManifoldError::NotFinite) => (point.clone(), 0),
            Err(e) => panic!("retraction failed: {e}"),
        }
    }
}
