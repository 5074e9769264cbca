//! Finite-difference validation of the analytic Bellman-residual gradients.
//!
//! Weights and means are compared coordinate by coordinate against central differences
//! (norm-wise relative error). Covariances are compared through directional derivatives
//! along the exponential map: `d/dt L(Exp_C(tΓ))|₀ = ⟨grad, Γ⟩_C` under the active metric.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::gmmqf::{br_loss, full_gradient, GmmQf, TransitionBatch, WeightLayout};
use crate::manifold::{product_inner, retract, MetricKind, ProductTangent, SpdMatrix, SymTangent};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const PASS_THRESHOLD: f64 = 1e-6;
const DENOM_FLOOR: f64 = 1e-8;
/// Random covariance directions tried per instance.
const COV_DIRECTIONS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Weights,
    Means,
    Covs,
}

impl Block {
    pub const ALL: [Block; 3] = [Block::Weights, Block::Means, Block::Covs];

    pub fn as_str(self) -> &'static str {
        match self {
            Block::Weights => "weights",
            Block::Means => "means",
            Block::Covs => "covs",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutChoice {
    Shared,
    PerAction,
}

impl LayoutChoice {
    pub const ALL: [LayoutChoice; 2] = [LayoutChoice::Shared, LayoutChoice::PerAction];

    pub fn as_str(self) -> &'static str {
        match self {
            LayoutChoice::Shared => "shared",
            LayoutChoice::PerAction => "per_action",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Random instances per (metric, layout) pair.
    pub trials: usize,
    pub eps: f64,
    /// Negates the analytic mean gradient; the suite must then fail.
    pub corrupt_sign: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 50,
            eps: DEFAULT_EPS,
            corrupt_sign: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CellReport {
    pub metric: MetricKind,
    pub layout: LayoutChoice,
    pub block: Block,
    pub instances: usize,
    pub max_rel_err: f64,
}

impl CellReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < PASS_THRESHOLD
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub cells: Vec<CellReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        !self.cells.is_empty() && self.cells.iter().all(CellReport::passed)
    }

    pub fn worst(&self) -> f64 {
        self.cells.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<6} {:<11} {:<8} {:>9} {:>12}  result",
            "metric", "layout", "block", "instances", "max_rel_err"
        )?;
        for c in &self.cells {
            writeln!(
                f,
                "{:<6} {:<11} {:<8} {:>9} {:>12.3e}  {}",
                c.metric.as_str(),
                c.layout.as_str(),
                c.block.as_str(),
                c.instances,
                c.max_rel_err,
                if c.passed() { "PASS" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// `AAᵀ + 0.3·I` with `A` uniform in `[-0.8, 0.8]`.
pub fn random_spd<R: Rng + ?Sized>(rng: &mut R, d: usize) -> SpdMatrix {
    let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-0.8..0.8));
    let m = &a * a.transpose() + DMatrix::identity(d, d) * 0.3;
    SpdMatrix::new((&m + m.transpose()) * 0.5).expect("shifted Gram matrix is SPD")
}

pub fn random_sym<R: Rng + ?Sized>(rng: &mut R, d: usize) -> SymTangent {
    let a = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
    SymTangent::new(a).expect("square")
}

/// A random model and batch: `K ∈ 1..=4`, input dimension `1..=3`, 2 or 3 actions,
/// `T ∈ 5..=20`, inputs in a box comparable to the kernel widths so every term matters.
pub fn random_instance<R: Rng + ?Sized>(
    rng: &mut R,
    layout: LayoutChoice,
) -> (GmmQf, TransitionBatch, f64) {
    let k = rng.gen_range(1..=4);
    let d = rng.gen_range(1..=3);
    let n_actions = rng.gen_range(2..=3);
    let layout = match layout {
        LayoutChoice::Shared => WeightLayout::Shared,
        LayoutChoice::PerAction => WeightLayout::PerAction { n_actions },
    };
    let weights = (0..layout.weight_rows() * k)
        .map(|_| rng.gen_range(-1.5..1.5))
        .collect();
    let means = (0..k)
        .map(|_| DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0)))
        .collect();
    let covs = (0..k).map(|_| random_spd(rng, d)).collect();
    let model = GmmQf::new(layout, weights, means, covs).expect("valid random model");

    let rows = rng.gen_range(5..=20);
    let mut batch = TransitionBatch::with_capacity(d, rows);
    for _ in 0..rows {
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let xn: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let g = if rng.gen_bool(0.5) {
            1.0
        } else {
            rng.gen_range(0.0..1.0)
        };
        batch
            .push(
                &x,
                rng.gen_range(0..n_actions),
                g,
                &xn,
                rng.gen_range(0..n_actions),
            )
            .expect("finite row");
    }
    (model, batch, rng.gen_range(0.0..0.95))
}

fn rel_err(fd: &[f64], an: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = fd.iter().zip(an).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(fd).max(norm(an)).max(DENOM_FLOOR)
}

fn loss_of(
    model: &GmmQf,
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    batch: &TransitionBatch,
    discount: f64,
) -> f64 {
    let m = GmmQf::new(model.layout(), weights, means, model.covs().to_vec())
        .expect("perturbed model stays valid");
    br_loss(&m, batch, discount).expect("shapes unchanged")
}

/// Central differences of the loss in every weight coordinate.
pub fn fd_weights(model: &GmmQf, batch: &TransitionBatch, discount: f64, eps: f64) -> Vec<f64> {
    (0..model.weights().len())
        .map(|i| {
            let mut plus = model.weights().to_vec();
            let mut minus = plus.clone();
            plus[i] += eps;
            minus[i] -= eps;
            let lp = loss_of(model, plus, model.means().to_vec(), batch, discount);
            let lm = loss_of(model, minus, model.means().to_vec(), batch, discount);
            (lp - lm) / (2.0 * eps)
        })
        .collect()
}

/// Central differences of the loss in every mean coordinate, flattened component-major.
pub fn fd_means(model: &GmmQf, batch: &TransitionBatch, discount: f64, eps: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(model.k() * model.dim());
    for k in 0..model.k() {
        for j in 0..model.dim() {
            let mut plus = model.means().to_vec();
            let mut minus = plus.clone();
            plus[k][j] += eps;
            minus[k][j] -= eps;
            let lp = loss_of(model, model.weights().to_vec(), plus, batch, discount);
            let lm = loss_of(model, model.weights().to_vec(), minus, batch, discount);
            out.push((lp - lm) / (2.0 * eps));
        }
    }
    out
}

/// Central difference of `t ↦ L(Exp(tΓ))` at zero, with `Γ` acting on the covariances only.
pub fn fd_cov_direction(
    model: &GmmQf,
    batch: &TransitionBatch,
    discount: f64,
    direction: &ProductTangent,
    metric: MetricKind,
    eps: f64,
) -> f64 {
    let at = |t: &ProductTangent| {
        let p = retract(model, t, eps, metric)
            .expect("small step stays on the manifold")
            .point;
        br_loss(&p, batch, discount).expect("shapes unchanged")
    };
    (at(direction) - at(&direction.scaled(-1.0))) / (2.0 * eps)
}

/// Per-block relative errors for one instance.
pub fn check_instance<R: Rng + ?Sized>(
    model: &GmmQf,
    batch: &TransitionBatch,
    discount: f64,
    metric: MetricKind,
    eps: f64,
    corrupt_sign: bool,
    rng: &mut R,
) -> [f64; 3] {
    let mut grad = full_gradient(model, batch, discount, metric).expect("consistent instance");
    if corrupt_sign {
        grad.means.iter_mut().for_each(|m| *m *= -1.0);
    }
    let e_w = rel_err(&fd_weights(model, batch, discount, eps), &grad.weights);
    let an_means: Vec<f64> = grad.means.iter().flat_map(|m| m.iter().copied()).collect();
    let e_m = rel_err(&fd_means(model, batch, discount, eps), &an_means);

    let mut e_c: f64 = 0.0;
    for _ in 0..COV_DIRECTIONS {
        let mut dir = ProductTangent::zeros_like(model);
        dir.covs = (0..model.k())
            .map(|_| random_sym(rng, model.dim()))
            .collect();
        let fd = fd_cov_direction(model, batch, discount, &dir, metric, eps);
        let an = product_inner(model, &grad, &dir, metric).expect("matching shapes");
        e_c = e_c.max((fd - an).abs() / fd.abs().max(an.abs()).max(DENOM_FLOOR));
    }
    [e_w, e_m, e_c]
}

/// Runs the 2 metrics × 2 layouts × 3 blocks grid. Instances depend only on `seed` and the layout.
pub fn run(cfg: &GradcheckConfig) -> GradcheckReport {
    let mut cells = Vec::new();
    for metric in MetricKind::ALL {
        for (li, layout) in LayoutChoice::ALL.into_iter().enumerate() {
            let mut rng =
                ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(4).wrapping_add(li as u64));
            let mut worst = [0.0f64; 3];
            for _ in 0..cfg.trials {
                let (model, batch, discount) = random_instance(&mut rng, layout);
                let errs = check_instance(
                    &model,
                    &batch,
                    discount,
                    metric,
                    cfg.eps,
                    cfg.corrupt_sign,
                    &mut rng,
                );
                for (w, e) in worst.iter_mut().zip(errs) {
                    *w = w.max(if e.is_nan() { f64::INFINITY } else { e });
                }
            }
            for (block, max_rel_err) in Block::ALL.into_iter().zip(worst) {
                cells.push(CellReport {
                    metric,
                    layout,
                    block,
                    instances: cfg.trials,
                    max_rel_err,
                });
            }
        }
    }
    GradcheckReport { cells }
}
