//! Validation routines shared by the `oracle` CLI command and the acceptance tests.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::envs::EnvSpec;
use crate::gmmqf::{build_workspace, GmmQf, TransitionBatch, WeightLayout};
use crate::gradcheck::{random_instance, random_spd, random_sym, LayoutChoice};
use crate::manifold::{
    lyapunov_solve, retract, spd_exp, ManifoldError, MetricKind, ProductTangent, SpdMatrix,
};
use crate::optimizer::{descend, ArmijoConfig, BlockMask, BrObjective, DescentTrace};
use crate::oracle::{
    bellman_apply, compare_policies, contraction_check, discretize, empirical_br_loss,
    ensemble_br_loss, fixed_point, model_on_grid, picard_iterates, three_state_fixture,
    BellmanMode, FiniteMdp, OracleError, PolicyComparison, TabularQ,
};
use crate::policy_iter::{moving_average, TrialLog};

#[derive(Debug, Clone, Serialize)]
pub struct ContractionReport {
    pub draws: usize,
    /// Largest `ratio − α` seen per mode; contraction holds when ≤ 1e-12.
    pub worst_excess_policy: f64,
    pub worst_excess_optimal: f64,
}

impl ContractionReport {
    pub fn passed(&self) -> bool {
        self.worst_excess_policy <= 1e-12 && self.worst_excess_optimal <= 1e-12
    }
}

fn random_mdp<R: Rng + ?Sized>(rng: &mut R) -> FiniteMdp {
    let s = rng.gen_range(2..=8);
    let a = rng.gen_range(1..=4);
    let discount = rng.gen_range(0.0..0.99);
    if rng.gen_bool(0.5) {
        FiniteMdp::random(rng, s, a, discount)
    } else {
        FiniteMdp::random_deterministic(rng, s, a, discount)
    }
    .expect("generated MDPs are valid")
}

/// Sup-norm contraction ratio against `α` on `draws` random MDP/Q-pair draws per mode.
pub fn contraction_suite(seed: u64, draws: usize) -> Result<ContractionReport, OracleError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [f64::NEG_INFINITY; 2];
    for _ in 0..draws {
        for (slot, optimal) in [(0, false), (1, true)] {
            let mdp = random_mdp(&mut rng);
            let (s, a) = (mdp.n_states(), mdp.n_actions());
            let scale = rng.gen_range(0.1..20.0);
            let q1 = TabularQ::random(&mut rng, s, a, scale);
            let q2 = TabularQ::random(&mut rng, s, a, scale);
            let mode = if optimal {
                BellmanMode::Optimal
            } else {
                BellmanMode::Policy((0..s).map(|_| rng.gen_range(0..a)).collect())
            };
            let ratio = contraction_check(&mdp, &q1, &q2, &mode)?;
            worst[slot] = worst[slot].max(ratio - mdp.discount());
        }
    }
    Ok(ContractionReport {
        draws,
        worst_excess_policy: worst[0],
        worst_excess_optimal: worst[1],
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PicardReport {
    pub draws: usize,
    pub checkpoints: Vec<usize>,
    /// Largest `‖Qᵢ − Q*‖ − αⁱ‖Q₀ − Q*‖` over draws and checkpoints.
    pub worst_excess: f64,
}

impl PicardReport {
    pub fn passed(&self) -> bool {
        self.worst_excess <= 1e-9
    }
}

/// Geometric decay `‖Qᵢ − Q*‖_∞ ≤ αⁱ‖Q₀ − Q*‖_∞` at `i ∈ {5, 10, 20}`, both modes.
pub fn picard_suite(seed: u64, draws: usize) -> Result<PicardReport, OracleError> {
    let checkpoints = vec![5, 10, 20];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    for d in 0..draws {
        let mdp = random_mdp(&mut rng);
        let (s, a) = (mdp.n_states(), mdp.n_actions());
        let mode = if d % 2 == 0 {
            BellmanMode::Optimal
        } else {
            BellmanMode::Policy((0..s).map(|_| rng.gen_range(0..a)).collect())
        };
        let qstar = fixed_point(&mdp, &mode)?.q;
        let q0 = TabularQ::random(&mut rng, s, a, 10.0);
        let iterates = picard_iterates(&mdp, &q0, &mode, 20)?;
        let e0 = q0.sup_distance(&qstar);
        for &i in &checkpoints {
            let excess = iterates[i].sup_distance(&qstar) - mdp.discount().powi(i as i32) * e0;
            worst = worst.max(excess);
        }
    }
    Ok(PicardReport {
        draws,
        checkpoints,
        worst_excess: worst,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SllnReport {
    pub exact: f64,
    pub sample_sizes: Vec<usize>,
    /// Root-mean-square error of the empirical loss over the replications.
    pub rms_errors: Vec<f64>,
}

impl SllnReport {
    pub fn monotone(&self) -> bool {
        self.rms_errors.windows(2).all(|w| w[1] < w[0])
    }
}

/// Empirical vs ensemble Bellman-residual loss on the fixed 3-state MDP.
pub fn slln_suite(
    seed: u64,
    sample_sizes: &[usize],
    replications: usize,
) -> Result<SllnReport, OracleError> {
    let f = three_state_fixture();
    let exact = ensemble_br_loss(&f.mdp, &f.q, &f.policy, &f.weights)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rms_errors = Vec::with_capacity(sample_sizes.len());
    for &n in sample_sizes {
        let mut sq = 0.0;
        for _ in 0..replications {
            let est = empirical_br_loss(&f.mdp, &f.q, &f.policy, &f.weights, n, &mut rng)?;
            sq += (est - exact).powi(2);
        }
        rms_errors.push((sq / replications as f64).sqrt());
    }
    Ok(SllnReport {
        exact,
        sample_sizes: sample_sizes.to_vec(),
        rms_errors,
    })
}

/// Checks `𝒯Q* = Q*` for the optimal fixed point of a random MDP; returns the residual.
pub fn fixed_point_residual(seed: u64) -> Result<f64, OracleError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mdp = FiniteMdp::random(&mut rng, 6, 3, 0.9)?;
    let q = fixed_point(&mdp, &BellmanMode::Optimal)?.q;
    Ok(bellman_apply(&mdp, &q, &BellmanMode::Optimal)?.sup_distance(&q))
}

#[derive(Debug, Clone, Serialize)]
pub struct ManifoldReport {
    /// Exponential-map outputs that were not SPD, over all draws and metrics.
    pub exp_failures: usize,
    pub exp_draws: usize,
    pub max_lyapunov_residual: f64,
    /// Smallest and largest per-decade log10 decay of the retraction's first-order defect.
    pub defect_slopes: [f64; 2],
    pub descents: usize,
    pub accepted_steps: usize,
    pub armijo_violations: usize,
    pub non_monotone_traces: usize,
}

impl ManifoldReport {
    pub fn passed(&self) -> bool {
        self.exp_failures == 0
            && self.max_lyapunov_residual < 1e-10
            && self.defect_slopes[0] >= 1.8
            && self.defect_slopes[1] <= 2.2
            && self.armijo_violations == 0
            && self.non_monotone_traces == 0
    }
}

/// SPD closure of both exponential maps, Lyapunov residuals, second-order retraction defect
/// and Armijo re-verification on `descents` seeded descents.
pub fn manifold_suite(
    seed: u64,
    exp_draws: usize,
    descents: usize,
) -> Result<ManifoldReport, ManifoldError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut exp_failures = 0;
    let mut max_res: f64 = 0.0;
    for metric in MetricKind::ALL {
        for _ in 0..exp_draws {
            let d = rng.gen_range(1..=4);
            let c = random_spd(&mut rng, d);
            let g = random_sym(&mut rng, d).scaled(rng.gen_range(0.01..5.0));
            let out = spd_exp(&c, &g, metric)?;
            if SpdMatrix::new(out.point.as_matrix().clone()).is_err() {
                exp_failures += 1;
            }
            let l = lyapunov_solve(&c, &g)?;
            let (cm, lm) = (c.as_matrix(), l.as_matrix());
            max_res = max_res.max((cm * lm + lm * cm - g.as_matrix()).norm());
        }
    }

    let mut slopes = [f64::INFINITY, f64::NEG_INFINITY];
    for metric in MetricKind::ALL {
        for _ in 0..10 {
            let (model, _, _) = random_instance(&mut rng, LayoutChoice::Shared);
            let mut t = ProductTangent::zeros_like(&model);
            t.weights
                .iter_mut()
                .for_each(|w| *w = rng.gen_range(-1.0..1.0));
            t.covs = (0..model.k())
                .map(|_| random_sym(&mut rng, model.dim()))
                .collect();
            let defect = |step: f64| -> Result<f64, ManifoldError> {
                let p = retract(&model, &t, step, metric)?.point;
                let mut acc = 0.0;
                for (k, c) in p.covs().iter().enumerate() {
                    let linear = model.covs()[k].as_matrix() + t.covs[k].as_matrix() * step;
                    acc += (c.as_matrix() - linear).norm_squared();
                }
                Ok(acc.sqrt())
            };
            let d = [defect(1e-1)?, defect(1e-2)?, defect(1e-3)?];
            for w in d.windows(2) {
                let slope = (w[0] / w[1]).log10();
                slopes[0] = slopes[0].min(slope);
                slopes[1] = slopes[1].max(slope);
            }
        }
    }

    let cfg = ArmijoConfig::default();
    let (mut accepted, mut violations, mut non_monotone) = (0, 0, 0);
    for i in 0..descents {
        let layout = LayoutChoice::ALL[i % 2];
        let metric = MetricKind::ALL[(i / 2) % 2];
        let (model, batch, discount) = random_instance(&mut rng, layout);
        let obj = BrObjective::new(&model, &batch, discount, metric).expect("consistent instance");
        let trace = descend(&obj, &model, &cfg).trace;
        accepted += trace.iterations.len();
        violations += trace
            .iterations
            .iter()
            .filter(|r| !r.satisfies_armijo(cfg.sigma))
            .count();
        non_monotone += usize::from(!trace.is_monotone());
    }
    Ok(ManifoldReport {
        exp_failures,
        exp_draws: exp_draws * MetricKind::ALL.len(),
        max_lyapunov_residual: max_res,
        defect_slopes: slopes,
        descents,
        accepted_steps: accepted,
        armijo_violations: violations,
        non_monotone_traces: non_monotone,
    })
}

#[derive(Debug, Clone)]
pub struct XiOnlyReport {
    pub iterations: usize,
    /// `‖ξ − ξ*‖₂` at the end of the descent.
    pub distance: f64,
    pub trace: DescentTrace,
}

/// A well-conditioned weights-only problem: three narrow, well-separated Gaussians on the
/// line and 60 transitions starting next to a centre and ending between centres, so `ΔᵀΔ`
/// is close to a well-scaled diagonal and plain gradient steps contract quickly.
/// Returns the model, batch and discount.
pub fn xi_only_instance(seed: u64) -> (GmmQf, TransitionBatch, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres = [-2.0, 0.0, 2.0].map(|m: f64| m + rng.gen_range(-0.2..0.2));
    let model = GmmQf::new(
        WeightLayout::Shared,
        vec![0.0; 3],
        centres
            .iter()
            .map(|&m| DVector::from_element(1, m))
            .collect(),
        vec![SpdMatrix::scaled_identity(1, 0.25).expect("positive"); 3],
    )
    .expect("valid model");
    let mut batch = TransitionBatch::with_capacity(1, 60);
    for t in 0..60 {
        let x = centres[t % 3] + rng.gen_range(-0.15..0.15);
        let xn = x + 1.0 + rng.gen_range(-0.1..0.1);
        batch
            .push(&[x], 0, rng.gen_range(0.0..1.0), &[xn], 0)
            .expect("finite row");
    }
    (model, batch, 0.5)
}

/// Normal-equations solution `ξ* = −(ΔᵀΔ)⁻¹Δᵀg` of `min (1/T)‖g + Δξ‖²`.
pub fn xi_least_squares(model: &GmmQf, batch: &TransitionBatch, discount: f64) -> DVector<f64> {
    let ws = build_workspace(model, batch, discount).expect("consistent instance");
    let delta: DMatrix<f64> = ws.delta_matrix();
    let g = DVector::from_column_slice(batch.losses());
    let normal = delta.transpose() * &delta;
    let rhs = -(delta.transpose() * g);
    normal.cholesky().expect("full column rank").solve(&rhs)
}

/// Weights-only descent from ξ = 0 toward the least-squares solution.
pub fn xi_only_run(seed: u64, j_steps: usize) -> XiOnlyReport {
    let (model, batch, discount) = xi_only_instance(seed);
    let target = xi_least_squares(&model, &batch, discount);
    let obj = BrObjective::new(&model, &batch, discount, MetricKind::AffineInvariant)
        .expect("consistent instance")
        .with_mask(BlockMask::WEIGHTS_ONLY);
    let cfg = ArmijoConfig {
        j_steps,
        grad_tol: 0.0,
        ..ArmijoConfig::default()
    };
    let out = descend(&obj, &model, &cfg);
    let xi = DVector::from_column_slice(out.point.weights());
    XiOnlyReport {
        iterations: out.trace.iterations.len(),
        distance: (xi - target).norm(),
        trace: out.trace,
    }
}

/// Grid of 15×15 points on `[-1, 1]²` with target `sin(1.5·z₁ + z₂)`.
pub fn approximation_batch() -> TransitionBatch {
    let n = 15;
    let mut batch = TransitionBatch::with_capacity(2, n * n);
    for i in 0..n {
        for j in 0..n {
            let z = [
                -1.0 + 2.0 * i as f64 / (n - 1) as f64,
                -1.0 + 2.0 * j as f64 / (n - 1) as f64,
            ];
            let y = (1.5 * z[0] + z[1]).sin();
            // with discount 0 the residual is y − Q(z): plain least squares
            batch.push(&z, 0, y, &z, 0).expect("finite row");
        }
    }
    batch
}

/// Final training MSE of the regression fit for each `K`, sharing one seeded pool of
/// centers (the first `K` are used) and the same optimizer settings.
pub fn approximation_trend(
    seed: u64,
    ks: &[usize],
    j_steps: usize,
    metric: MetricKind,
) -> Vec<f64> {
    let batch = approximation_batch();
    let kmax = ks.iter().copied().max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<DVector<f64>> = (0..kmax)
        .map(|_| DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0)))
        .collect();
    let cfg = ArmijoConfig {
        j_steps,
        ..ArmijoConfig::default()
    };
    ks.iter()
        .map(|&k| {
            let model = GmmQf::new(
                WeightLayout::Shared,
                vec![0.0; k],
                pool[..k].to_vec(),
                vec![SpdMatrix::scaled_identity(2, 0.5).expect("positive"); k],
            )
            .expect("valid model");
            let obj = BrObjective::new(&model, &batch, 0.0, metric).expect("consistent instance");
            descend(&obj, &model, &cfg).trace.final_loss
        })
        .collect()
}

/// Window of the trailing moving average used to score learning curves.
pub const SMOOTHING_WINDOW: usize = 10;
/// Number of final trials the learning-curve score looks at.
pub const TAIL_TRIALS: usize = 20;

/// Median of the window-10 smoothed steps-to-goal over the last 20 trials.
pub fn tail_score(logs: &[TrialLog]) -> f64 {
    let steps: Vec<f64> = logs.iter().map(|l| l.steps_to_goal).collect();
    let smoothed = moving_average(&steps, SMOOTHING_WINDOW);
    let mut tail = smoothed[smoothed.len().saturating_sub(TAIL_TRIALS)..].to_vec();
    if tail.is_empty() {
        return f64::NAN;
    }
    tail.sort_by(f64::total_cmp);
    let n = tail.len();
    if n % 2 == 1 {
        tail[n / 2]
    } else {
        0.5 * (tail[n / 2 - 1] + tail[n / 2])
    }
}

/// Grid agreement of a model's greedy actions with the tabular optimum of the discretized
/// environment.
pub fn grid_agreement(
    env: &EnvSpec,
    model: &GmmQf,
    discount: f64,
    resolution: usize,
    mc_samples: usize,
    seed: u64,
) -> Result<PolicyComparison, OracleError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let disc = discretize(env, resolution, mc_samples, discount, true, &mut rng)?;
    let qstar = fixed_point(&disc.mdp, &BellmanMode::Optimal)?.q;
    let (actions, values) = model_on_grid(&disc.grid, env, model);
    compare_policies(&qstar, &actions, Some(&values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        assert!(contraction_suite(1, 10).unwrap().passed());
        assert!(picard_suite(1, 4).unwrap().passed());
        assert!(fixed_point_residual(0).unwrap() < 1e-11);
        let m = manifold_suite(0, 50, 4).unwrap();
        assert!(m.passed(), "{m:?}");
        assert!(m.accepted_steps > 0);
    }

    #[test]
    fn tail_score_is_the_median_of_the_smoothed_tail() {
        let log = |steps: f64| TrialLog {
            trial: 0,
            steps_to_goal: steps,
            final_loss: 0.0,
            grad_norm: 0.0,
            descent_iterations: 0,
            termination: crate::optimizer::Termination::BudgetExhausted,
            wall_time_ms: 0.0,
            seed: 0,
        };
        let flat: Vec<TrialLog> = (0..30).map(|_| log(70.0)).collect();
        assert_eq!(tail_score(&flat), 70.0);
        // 30 trials at 1000 then 20 at 100: the smoothed tail runs 910, 820, ..., 100, 100, ...
        let drop: Vec<TrialLog> = (0..50)
            .map(|i| log(if i < 30 { 1000.0 } else { 100.0 }))
            .collect();
        assert_close!(tail_score(&drop), 100.0, 1e-12);
        assert!(tail_score(&[]).is_nan());
    }

    #[test]
    fn xi_least_squares_zeroes_the_gradient() {
        let (model, batch, discount) = xi_only_instance(0);
        let xi = xi_least_squares(&model, &batch, discount);
        let fitted = GmmQf::new(
            model.layout(),
            xi.as_slice().to_vec(),
            model.means().to_vec(),
            model.covs().to_vec(),
        )
        .unwrap();
        let ws = build_workspace(&fitted, &batch, discount).unwrap();
        let g = crate::gmmqf::grad_weights(&ws, &fitted);
        assert!(g.iter().all(|x| x.abs() < 1e-10), "{g:?}");
    }
}
