//! Policy iteration: collect an on-policy batch, fit the Q-function to it by Riemannian
//! descent on the Bellman residual (warm-started from the previous model), act greedily
//! on the new Q-function, repeat. No replay buffer: every trial sees only its own batch.

use std::time::Instant;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{EnvError, EnvName, EnvSpec, EnvState, StartMode};
use crate::gmmqf::{GmmQf, Kernels, ModelError, TransitionBatch, WeightLayout};
use crate::manifold::{MetricKind, SpdMatrix};
use crate::optimizer::{self, ArmijoConfig, BrObjective, DescentTrace, Termination};

#[derive(Debug, Error)]
pub enum PiError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutKind {
    Shared,
    PerAction,
}

impl LayoutKind {
    pub fn resolve(self, env: &EnvSpec) -> WeightLayout {
        match self {
            LayoutKind::Shared => WeightLayout::Shared,
            LayoutKind::PerAction => WeightLayout::PerAction {
                n_actions: env.n_actions(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutConfig {
    pub episodes: usize,
    pub steps_per_episode: usize,
}

impl RolloutConfig {
    pub fn rows(&self) -> usize {
        self.episodes * self.steps_per_episode
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub step_cap: usize,
    pub eval_episodes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            step_cap: 1000,
            eval_episodes: 1,
        }
    }
}

/// Initial covariance shape: `c·I` with `c` the squared median pairwise distance of a
/// sample of inputs, or the per-coordinate analogue on the diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Isotropic,
    Diagonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub bandwidth: Bandwidth,
    /// Multiplier on the median heuristic.
    pub bandwidth_scale: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            bandwidth: Bandwidth::Isotropic,
            bandwidth_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiConfig {
    pub env: EnvSpec,
    pub k: usize,
    pub layout: LayoutKind,
    pub metric: MetricKind,
    pub discount: f64,
    pub rollout: RolloutConfig,
    pub exploration_eps: f64,
    pub armijo: ArmijoConfig,
    pub trials: usize,
    pub eval: EvalConfig,
    pub init: InitConfig,
    pub seed: u64,
}

impl PiConfig {
    /// Defaults per environment: 20×70 rollouts for pendulum and acrobot, 20×50 for
    /// mountain car, per-action weights for the acrobot.
    pub fn defaults_for(name: EnvName) -> Self {
        let (k, layout, rollout) = match name {
            EnvName::Pendulum => (5, LayoutKind::Shared, (20, 70)),
            EnvName::MountainCar => (200, LayoutKind::Shared, (20, 50)),
            EnvName::Acrobot => (50, LayoutKind::PerAction, (20, 70)),
        };
        Self {
            env: EnvSpec::preset(name),
            k,
            layout,
            metric: MetricKind::AffineInvariant,
            discount: 0.9,
            rollout: RolloutConfig {
                episodes: rollout.0,
                steps_per_episode: rollout.1,
            },
            exploration_eps: 0.1,
            armijo: ArmijoConfig::default(),
            trials: 150,
            eval: EvalConfig::default(),
            init: InitConfig::default(),
            seed: 0,
        }
    }

    pub fn weight_layout(&self) -> WeightLayout {
        self.layout.resolve(&self.env)
    }

    pub fn input_dim(&self) -> usize {
        self.env.input_dim(self.weight_layout())
    }

    pub fn validate(&self) -> Result<(), PiError> {
        self.env.validate()?;
        let bad = |m: String| Err(PiError::Config(m));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.discount) {
            return bad(format!(
                "discount must lie in [0, 1), got {}",
                self.discount
            ));
        }
        if !(0.0..=1.0).contains(&self.exploration_eps) {
            return bad(format!(
                "exploration_eps must lie in [0, 1], got {}",
                self.exploration_eps
            ));
        }
        if self.rollout.rows() == 0 {
            return bad("rollout must produce at least one row".into());
        }
        if self.rollout.rows() < self.k {
            return bad(format!(
                "rollout of {} rows cannot seed {} distinct centers",
                self.rollout.rows(),
                self.k
            ));
        }
        if self.eval.step_cap == 0 || self.eval.eval_episodes == 0 {
            return bad("eval.step_cap and eval.eval_episodes must be at least 1".into());
        }
        if !(self.init.bandwidth_scale > 0.0 && self.init.bandwidth_scale.is_finite()) {
            return bad(format!(
                "init.bandwidth_scale must be positive, got {}",
                self.init.bandwidth_scale
            ));
        }
        self.armijo
            .validate()
            .map_err(|e| PiError::Config(format!("armijo: {e}")))
    }
}

/// `K + K·D + K·D(D+1)/2` for shared weights, `|A|·K + K·D + K·D(D+1)/2` per action.
pub fn param_count(cfg: &PiConfig) -> usize {
    let d = cfg.input_dim();
    cfg.weight_layout().weight_rows() * cfg.k + cfg.k * d + cfg.k * d * (d + 1) / 2
}

/// Q-value of `(s, a)`, embedding the pair as the model's layout requires.
pub fn q_eval(model: &GmmQf, env: &EnvSpec, s: &EnvState, a: usize) -> Result<f64, ModelError> {
    if a >= env.n_actions() {
        return Err(ModelError::InvalidAction {
            action: a,
            n_actions: env.n_actions(),
        });
    }
    model.q_value(&env.model_input(model.layout(), s, a), a)
}

/// Acts by `argmin_a Q(s, a)`, lowest index on ties.
pub struct GreedyPolicy<'a> {
    model: &'a GmmQf,
    env: &'a EnvSpec,
    kernels: Kernels,
}

impl<'a> GreedyPolicy<'a> {
    pub fn new(model: &'a GmmQf, env: &'a EnvSpec) -> Self {
        Self {
            model,
            env,
            kernels: Kernels::new(model),
        }
    }

    pub fn model(&self) -> &GmmQf {
        self.model
    }

    pub fn q_values(&self, s: &EnvState) -> Vec<f64> {
        let mut diff = vec![0.0; self.model.dim()];
        match self.model.layout() {
            WeightLayout::Shared => (0..self.env.n_actions())
                .map(|a| {
                    let z = self.env.zeta(s, a);
                    self.model.q_value_with(&self.kernels, &z, a, &mut diff)
                })
                .collect(),
            WeightLayout::PerAction { n_actions } => {
                let g: Vec<f64> = (0..self.model.k())
                    .map(|k| self.kernels.eval(k, s.coords(), &mut diff))
                    .collect();
                (0..n_actions)
                    .map(|a| {
                        (0..self.model.k())
                            .map(|k| self.model.weight(a, k) * g[k])
                            .sum()
                    })
                    .collect()
            }
        }
    }

    pub fn greedy_action(&self, s: &EnvState) -> usize {
        argmin(&self.q_values(s))
    }
}

/// Index of the smallest value, lowest index on ties; NaN never wins.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] || values[best].is_nan() {
            best = i;
        }
    }
    best
}

pub fn greedy_action(policy: &GreedyPolicy<'_>, s: &EnvState) -> usize {
    policy.greedy_action(s)
}

/// Rolls out ε-greedy episodes from training starts until exactly `rollout.rows()` rows exist.
///
/// The bootstrap action `a'_t` is always greedy. An episode ends after its step budget or
/// right after a row whose state lies in the goal set.
pub fn collect_dataset<R: Rng + ?Sized>(
    env: &EnvSpec,
    policy: &GreedyPolicy<'_>,
    rollout: &RolloutConfig,
    eps: f64,
    rng: &mut R,
) -> TransitionBatch {
    let layout = policy.model().layout();
    let target = rollout.rows();
    let mut batch = TransitionBatch::with_capacity(env.input_dim(layout), target);
    while batch.len() < target {
        let mut s = env.sample_initial_state(rng, StartMode::Train);
        for _ in 0..rollout.steps_per_episode {
            if batch.len() == target {
                break;
            }
            let explore = rng.gen::<f64>() < eps;
            let a = if explore {
                rng.gen_range(0..env.n_actions())
            } else {
                policy.greedy_action(&s)
            };
            let next = env.step(&s, a);
            let next_a = policy.greedy_action(&next);
            batch
                .push(
                    &env.model_input(layout, &s, a),
                    a,
                    env.one_step_loss(&s, a),
                    &env.model_input(layout, &next, next_a),
                    next_a,
                )
                .expect("simulator states are finite and shaped by the spec");
            if env.is_goal(&s) {
                break;
            }
            s = next;
        }
    }
    batch
}

/// Fits the model to `batch` starting from `warm_start`.
pub fn policy_evaluate(
    batch: &TransitionBatch,
    warm_start: &GmmQf,
    cfg: &PiConfig,
) -> Result<(GmmQf, DescentTrace), PiError> {
    let objective = BrObjective::new(warm_start, batch, cfg.discount, cfg.metric)?;
    let out = optimizer::descend(&objective, warm_start, &cfg.armijo);
    Ok((out.point, out.trace))
}

/// Greedy steps from `start` until the goal set is entered, capped at `step_cap`.
pub fn steps_to_goal(
    policy: &GreedyPolicy<'_>,
    env: &EnvSpec,
    start: EnvState,
    step_cap: usize,
) -> usize {
    let mut s = start;
    for n in 1..=step_cap {
        s = env.step(&s, policy.greedy_action(&s));
        if env.is_goal(&s) {
            return n;
        }
    }
    step_cap
}

/// Capped steps-to-goal from resting starts, one entry per evaluation episode.
pub fn evaluate_policy<R: Rng + ?Sized>(
    env: &EnvSpec,
    model: &GmmQf,
    eval: &EvalConfig,
    rng: &mut R,
) -> Vec<usize> {
    let policy = GreedyPolicy::new(model, env);
    (0..eval.eval_episodes)
        .map(|_| {
            let start = env.sample_initial_state(rng, StartMode::Eval);
            steps_to_goal(&policy, env, start, eval.step_cap)
        })
        .collect()
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Rows used for the bandwidth median.
const BANDWIDTH_SAMPLE: usize = 200;

/// `Ω₀`: zero weights, `K` distinct inputs from a uniformly random rollout as means, and
/// median-heuristic covariances.
pub fn initialize_model<R: Rng + ?Sized>(cfg: &PiConfig, rng: &mut R) -> Result<GmmQf, PiError> {
    let layout = cfg.weight_layout();
    let d = cfg.input_dim();
    let placeholder = GmmQf::new(
        layout,
        vec![0.0; layout.weight_rows()],
        vec![DVector::zeros(d)],
        vec![SpdMatrix::identity(d)],
    )?;
    let probe = collect_dataset(
        &cfg.env,
        &GreedyPolicy::new(&placeholder, &cfg.env),
        &cfg.rollout,
        1.0,
        rng,
    );
    let mut order: Vec<usize> = (0..probe.len()).collect();
    order.shuffle(rng);

    let mut means: Vec<DVector<f64>> = Vec::with_capacity(cfg.k);
    for &t in &order {
        let x = DVector::from_column_slice(probe.input(t));
        if !means.contains(&x) {
            means.push(x);
            if means.len() == cfg.k {
                break;
            }
        }
    }
    if means.len() < cfg.k {
        return Err(PiError::Config(format!(
            "random rollout produced only {} distinct inputs for k = {}",
            means.len(),
            cfg.k
        )));
    }

    let sample: Vec<&[f64]> = order
        .iter()
        .take(BANDWIDTH_SAMPLE)
        .map(|&t| probe.input(t))
        .collect();
    let diag: Vec<f64> = match cfg.init.bandwidth {
        Bandwidth::Isotropic => {
            let mut dist = Vec::new();
            for i in 0..sample.len() {
                for j in i + 1..sample.len() {
                    dist.push(
                        sample[i]
                            .iter()
                            .zip(sample[j])
                            .map(|(a, b)| (a - b).powi(2))
                            .sum::<f64>()
                            .sqrt(),
                    );
                }
            }
            vec![median(dist).powi(2); d]
        }
        Bandwidth::Diagonal => (0..d)
            .map(|c| {
                let mut dist = Vec::new();
                for i in 0..sample.len() {
                    for j in i + 1..sample.len() {
                        dist.push((sample[i][c] - sample[j][c]).abs());
                    }
                }
                median(dist).powi(2)
            })
            .collect(),
    };
    let diag: Vec<f64> = diag
        .into_iter()
        .map(|c| {
            if c > 0.0 {
                c * cfg.init.bandwidth_scale
            } else {
                cfg.init.bandwidth_scale
            }
        })
        .collect();
    let cov = SpdMatrix::from_diagonal(&diag).map_err(ModelError::from)?;
    Ok(GmmQf::new(
        layout,
        vec![0.0; layout.weight_rows() * cfg.k],
        means,
        vec![cov; cfg.k],
    )?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialLog {
    /// 1-based policy-iteration index.
    pub trial: usize,
    /// Mean capped steps-to-goal over the evaluation episodes.
    pub steps_to_goal: f64,
    pub final_loss: f64,
    pub grad_norm: f64,
    pub descent_iterations: usize,
    pub termination: Termination,
    pub wall_time_ms: f64,
    pub seed: u64,
}

/// What the observer of [`run_with`] sees after each trial.
pub struct TrialEvent<'a> {
    pub log: &'a TrialLog,
    pub batch: &'a TransitionBatch,
    /// Model the descent started from (the previous trial's output).
    pub warm_start: &'a GmmQf,
    pub model: &'a GmmQf,
    pub trace: &'a DescentTrace,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub logs: Vec<TrialLog>,
    pub model: GmmQf,
}

pub fn run(cfg: &PiConfig) -> Result<Vec<TrialLog>, PiError> {
    Ok(run_with(cfg, |_| {})?.logs)
}

/// Full policy iteration; fully determined by `cfg` (including its seed) apart from timings.
pub fn run_with(
    cfg: &PiConfig,
    mut observer: impl FnMut(&TrialEvent<'_>),
) -> Result<RunOutput, PiError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = initialize_model(cfg, &mut rng)?;
    let mut logs = Vec::with_capacity(cfg.trials);
    for n in 1..=cfg.trials {
        let started = Instant::now();
        let mut batch = collect_dataset(
            &cfg.env,
            &GreedyPolicy::new(&model, &cfg.env),
            &cfg.rollout,
            cfg.exploration_eps,
            &mut rng,
        );
        batch.set_tag(n as u64);
        let (next, trace) = policy_evaluate(&batch, &model, cfg)?;
        let steps = evaluate_policy(&cfg.env, &next, &cfg.eval, &mut rng);
        let log = TrialLog {
            trial: n,
            steps_to_goal: steps.iter().sum::<usize>() as f64 / steps.len() as f64,
            final_loss: trace.final_loss,
            grad_norm: trace.final_grad_norm,
            descent_iterations: trace.iterations.len(),
            termination: trace.termination,
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
            seed: cfg.seed,
        };
        observer(&TrialEvent {
            log: &log,
            batch: &batch,
            warm_start: &model,
            model: &next,
            trace: &trace,
        });
        logs.push(log);
        model = next;
    }
    Ok(RunOutput { logs, model })
}

/// Trailing mean over `window` points; the first `window - 1` entries average the prefix.
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(series.len());
    let mut sum = 0.0;
    for i in 0..series.len() {
        sum += series[i];
        if i >= window {
            sum -= series[i - window];
        }
        let n = (i + 1).min(window);
        // recompute exactly for short windows so constant series stay exact
        let mean = if n <= 32 {
            series[i + 1 - n..=i].iter().sum::<f64>() / n as f64
        } else {
            sum / n as f64
        };
        out.push(mean);
    }
    out
}
