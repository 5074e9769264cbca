//! Tabular reference: finite MDPs, exact Bellman operators and their fixed points, a grid
//! discretization of the simulators, and comparison of a trained model against `Q*`.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use thiserror::Error;

use crate::envs::{EnvSpec, EnvState};
use crate::gmmqf::GmmQf;
use crate::policy_iter::{argmin, GreedyPolicy};

/// Sup-norm change at which Picard iteration stops.
pub const FIXED_POINT_TOL: f64 = 1e-12;

/// Actions within this of the row minimum count as greedy.
pub const ARGMIN_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("invalid MDP: {0}")]
    Invalid(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("no fixed point within {0} iterations")]
    NoConvergence(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    n_states: usize,
    n_actions: usize,
    /// `P[(s·A + a)·S + s']`.
    transitions: Vec<f64>,
    /// `g[s·A + a]`.
    losses: Vec<f64>,
    discount: f64,
}

impl FiniteMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transitions: Vec<f64>,
        losses: Vec<f64>,
        discount: f64,
    ) -> Result<Self, OracleError> {
        if n_states == 0 || n_actions == 0 {
            return Err(OracleError::Invalid(
                "need at least one state and one action".into(),
            ));
        }
        if transitions.len() != n_states * n_actions * n_states
            || losses.len() != n_states * n_actions
        {
            return Err(OracleError::Invalid(
                "table sizes do not match the state/action counts".into(),
            ));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(OracleError::Invalid(format!(
                "discount {discount} outside [0, 1)"
            )));
        }
        if losses.iter().any(|g| !g.is_finite()) {
            return Err(OracleError::Invalid("non-finite loss".into()));
        }
        for (row, p) in transitions.chunks(n_states).enumerate() {
            let sum: f64 = p.iter().sum();
            if p.iter().any(|&x| x.is_nan() || x < 0.0) || (sum - 1.0).abs() > 1e-12 {
                return Err(OracleError::Invalid(format!(
                    "row (s={}, a={}) is not a probability vector (sum {sum})",
                    row / n_actions,
                    row % n_actions
                )));
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            transitions,
            losses,
            discount,
        })
    }

    /// Dense random rows and losses in `[0, 1)`.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        n_states: usize,
        n_actions: usize,
        discount: f64,
    ) -> Result<Self, OracleError> {
        let mut transitions = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            let row: Vec<f64> = (0..n_states).map(|_| rng.gen::<f64>() + 1e-3).collect();
            let sum: f64 = row.iter().sum();
            transitions.extend(row.iter().map(|x| x / sum));
        }
        let losses = (0..n_states * n_actions).map(|_| rng.gen()).collect();
        Self::new(n_states, n_actions, transitions, losses, discount)
    }

    /// One-hot rows to uniformly drawn successors.
    pub fn random_deterministic<R: Rng + ?Sized>(
        rng: &mut R,
        n_states: usize,
        n_actions: usize,
        discount: f64,
    ) -> Result<Self, OracleError> {
        let mut transitions = vec![0.0; n_states * n_actions * n_states];
        for row in 0..n_states * n_actions {
            transitions[row * n_states + rng.gen_range(0..n_states)] = 1.0;
        }
        let losses = (0..n_states * n_actions).map(|_| rng.gen()).collect();
        Self::new(n_states, n_actions, transitions, losses, discount)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn loss(&self, s: usize, a: usize) -> f64 {
        self.losses[s * self.n_actions + a]
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let row = s * self.n_actions + a;
        &self.transitions[row * self.n_states..(row + 1) * self.n_states]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularQ {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
}

impl TabularQ {
    pub fn new(n_states: usize, n_actions: usize, values: Vec<f64>) -> Result<Self, OracleError> {
        if values.len() != n_states * n_actions {
            return Err(OracleError::Shape(format!(
                "{} values for {n_states}×{n_actions}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(OracleError::Invalid("non-finite Q entry".into()));
        }
        Ok(Self {
            n_states,
            n_actions,
            values,
        })
    }

    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            values: vec![0.0; n_states * n_actions],
        }
    }

    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        n_states: usize,
        n_actions: usize,
        scale: f64,
    ) -> Self {
        Self {
            n_states,
            n_actions,
            values: (0..n_states * n_actions)
                .map(|_| scale * (2.0 * rng.gen::<f64>() - 1.0))
                .collect(),
        }
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// Lowest-index minimizer of row `s`.
    pub fn greedy(&self, s: usize) -> usize {
        argmin(self.row(s))
    }

    /// Whether `a` attains the row minimum up to [`ARGMIN_TOL`].
    pub fn is_greedy(&self, s: usize, a: usize) -> bool {
        let row = self.row(s);
        let min = row.iter().copied().fold(f64::INFINITY, f64::min);
        row[a] <= min + ARGMIN_TOL
    }

    pub fn sup_distance(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BellmanMode {
    /// Evaluate a fixed deterministic policy, one action per state.
    Policy(Vec<usize>),
    Optimal,
}

fn check_compat(mdp: &FiniteMdp, q: &TabularQ, mode: &BellmanMode) -> Result<(), OracleError> {
    if q.n_states != mdp.n_states || q.n_actions != mdp.n_actions {
        return Err(OracleError::Shape(format!(
            "Q is {}×{}, MDP is {}×{}",
            q.n_states, q.n_actions, mdp.n_states, mdp.n_actions
        )));
    }
    if let BellmanMode::Policy(mu) = mode {
        if mu.len() != mdp.n_states || mu.iter().any(|&a| a >= mdp.n_actions) {
            return Err(OracleError::Shape(
                "policy must give a valid action for every state".into(),
            ));
        }
    }
    Ok(())
}

/// `(𝒯Q)(s, a) = g(s, a) + α Σ_{s'} P(s'|s, a) V(s')` with `V(s') = Q(s', μ(s'))` or `min_{a'} Q(s', a')`.
pub fn bellman_apply(
    mdp: &FiniteMdp,
    q: &TabularQ,
    mode: &BellmanMode,
) -> Result<TabularQ, OracleError> {
    check_compat(mdp, q, mode)?;
    let next_value: Vec<f64> = (0..mdp.n_states)
        .map(|s| match mode {
            BellmanMode::Policy(mu) => q.get(s, mu[s]),
            BellmanMode::Optimal => q.row(s).iter().copied().fold(f64::INFINITY, f64::min),
        })
        .collect();
    let mut values = Vec::with_capacity(q.values.len());
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let ev: f64 = mdp
                .transition_row(s, a)
                .iter()
                .zip(&next_value)
                .map(|(p, v)| p * v)
                .sum();
            values.push(mdp.loss(s, a) + mdp.discount * ev);
        }
    }
    Ok(TabularQ {
        n_states: q.n_states,
        n_actions: q.n_actions,
        values,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPoint {
    pub q: TabularQ,
    pub iterations: usize,
}

/// Picard iteration from zero until the sup-norm change drops below [`FIXED_POINT_TOL`].
pub fn fixed_point(mdp: &FiniteMdp, mode: &BellmanMode) -> Result<FixedPoint, OracleError> {
    const MAX_ITERATIONS: usize = 1_000_000;
    let mut q = TabularQ::zeros(mdp.n_states, mdp.n_actions);
    for i in 1..=MAX_ITERATIONS {
        let next = bellman_apply(mdp, &q, mode)?;
        let change = next.sup_distance(&q);
        q = next;
        if change < FIXED_POINT_TOL {
            return Ok(FixedPoint { q, iterations: i });
        }
    }
    Err(OracleError::NoConvergence(MAX_ITERATIONS))
}

/// `Q₀, 𝒯Q₀, …, 𝒯ⁿQ₀`.
pub fn picard_iterates(
    mdp: &FiniteMdp,
    q0: &TabularQ,
    mode: &BellmanMode,
    n: usize,
) -> Result<Vec<TabularQ>, OracleError> {
    let mut out = vec![q0.clone()];
    for _ in 0..n {
        let next = bellman_apply(mdp, out.last().expect("non-empty"), mode)?;
        out.push(next);
    }
    Ok(out)
}

/// `‖𝒯q₁ − 𝒯q₂‖_∞ / ‖q₁ − q₂‖_∞`, or 0 when `q₁ = q₂`.
pub fn contraction_check(
    mdp: &FiniteMdp,
    q1: &TabularQ,
    q2: &TabularQ,
    mode: &BellmanMode,
) -> Result<f64, OracleError> {
    check_compat(mdp, q2, mode)?;
    let den = q1.sup_distance(q2);
    let t1 = bellman_apply(mdp, q1, mode)?;
    let t2 = bellman_apply(mdp, q2, mode)?;
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok(t1.sup_distance(&t2) / den)
}

/// Regular grid over an environment's state box.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub bounds: Vec<[f64; 2]>,
    pub resolution: usize,
}

impl Grid {
    pub fn n_cells(&self) -> usize {
        self.resolution.pow(self.bounds.len() as u32)
    }

    fn width(&self, d: usize) -> f64 {
        (self.bounds[d][1] - self.bounds[d][0]) / self.resolution as f64
    }

    /// Cell containing `x` (coordinates outside the box are clamped to the edge cells).
    pub fn cell_of(&self, x: &[f64]) -> usize {
        let mut idx = 0;
        for (d, &xd) in x.iter().enumerate() {
            let i = ((xd - self.bounds[d][0]) / self.width(d)).floor();
            let i = if i.is_nan() {
                0
            } else {
                (i.max(0.0) as usize).min(self.resolution - 1)
            };
            idx = idx * self.resolution + i;
        }
        idx
    }

    fn cell_indices(&self, mut cell: usize) -> Vec<usize> {
        let mut ix = vec![0; self.bounds.len()];
        for d in (0..self.bounds.len()).rev() {
            ix[d] = cell % self.resolution;
            cell /= self.resolution;
        }
        ix
    }

    pub fn center(&self, cell: usize) -> Vec<f64> {
        self.cell_indices(cell)
            .iter()
            .enumerate()
            .map(|(d, &i)| self.bounds[d][0] + (i as f64 + 0.5) * self.width(d))
            .collect()
    }

    fn sample_in<R: Rng + ?Sized>(&self, cell: usize, rng: &mut R) -> Vec<f64> {
        self.cell_indices(cell)
            .iter()
            .enumerate()
            .map(|(d, &i)| self.bounds[d][0] + (i as f64 + rng.gen::<f64>()) * self.width(d))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discretization {
    pub mdp: FiniteMdp,
    pub grid: Grid,
}

/// Builds a finite MDP over `resolution^D` cells of the environment's state box.
///
/// With `mc_samples <= 1` each row is the one-hot cell reached by stepping from the cell
/// center. Larger values average the successor cells of that many uniform draws inside the
/// cell, which keeps slow dynamics from collapsing onto self-loops. Losses are always
/// taken at the center. `absorbing_goal` turns goal-center cells into zero-loss self-loops.
pub fn discretize<R: Rng + ?Sized>(
    env: &EnvSpec,
    resolution: usize,
    mc_samples: usize,
    discount: f64,
    absorbing_goal: bool,
    rng: &mut R,
) -> Result<Discretization, OracleError> {
    if resolution == 0 {
        return Err(OracleError::Invalid(
            "grid resolution must be at least 1".into(),
        ));
    }
    let grid = Grid {
        bounds: env.state_bounds.clone(),
        resolution,
    };
    let n = grid.n_cells();
    let na = env.n_actions();
    let mut transitions = vec![0.0; n * na * n];
    let mut losses = vec![0.0; n * na];
    for cell in 0..n {
        let center = EnvState::new(grid.center(cell));
        let absorbing = absorbing_goal && env.is_goal(&center);
        for a in 0..na {
            let row = &mut transitions[(cell * na + a) * n..(cell * na + a + 1) * n];
            if absorbing {
                row[cell] = 1.0;
                continue;
            }
            losses[cell * na + a] = env.one_step_loss(&center, a);
            if mc_samples <= 1 {
                row[grid.cell_of(env.step(&center, a).coords())] = 1.0;
            } else {
                let w = 1.0 / mc_samples as f64;
                for _ in 0..mc_samples {
                    let s = EnvState::new(grid.sample_in(cell, rng));
                    row[grid.cell_of(env.step(&s, a).coords())] += w;
                }
                // exact unit sum regardless of rounding
                let sum: f64 = row.iter().sum();
                row.iter_mut().for_each(|p| *p /= sum);
            }
        }
    }
    Ok(Discretization {
        mdp: FiniteMdp::new(n, na, transitions, losses, discount)?,
        grid,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyComparison {
    /// Fraction of states where the compared action is greedy under `Q*`.
    pub agreement: f64,
    /// `max |Q − Q*|` over the table, when model values were supplied.
    pub value_gap: Option<f64>,
}

pub fn compare_policies(
    qstar: &TabularQ,
    actions: &[usize],
    values: Option<&TabularQ>,
) -> Result<PolicyComparison, OracleError> {
    if actions.len() != qstar.n_states || actions.iter().any(|&a| a >= qstar.n_actions) {
        return Err(OracleError::Shape(
            "one valid action per state required".into(),
        ));
    }
    if let Some(v) = values {
        if v.n_states != qstar.n_states || v.n_actions != qstar.n_actions {
            return Err(OracleError::Shape(
                "value table shape differs from Q*".into(),
            ));
        }
    }
    let agree = actions
        .iter()
        .enumerate()
        .filter(|&(s, &a)| qstar.is_greedy(s, a))
        .count();
    Ok(PolicyComparison {
        agreement: agree as f64 / actions.len() as f64,
        value_gap: values.map(|v| v.sup_distance(qstar)),
    })
}

/// Greedy actions and Q-values of `model` at every cell center.
pub fn model_on_grid(grid: &Grid, env: &EnvSpec, model: &GmmQf) -> (Vec<usize>, TabularQ) {
    let policy = GreedyPolicy::new(model, env);
    let mut actions = Vec::with_capacity(grid.n_cells());
    let mut values = Vec::with_capacity(grid.n_cells() * env.n_actions());
    for cell in 0..grid.n_cells() {
        let q = policy.q_values(&EnvState::new(grid.center(cell)));
        actions.push(argmin(&q));
        values.extend(q);
    }
    let table = TabularQ {
        n_states: grid.n_cells(),
        n_actions: env.n_actions(),
        values,
    };
    (actions, table)
}

/// Exact `E[(g(z) + αQ(z') − Q(z))²]` for `(s, a) ~ weights` and `s' ~ P(·|s, a)`, `z' = (s', μ(s'))`.
pub fn ensemble_br_loss(
    mdp: &FiniteMdp,
    q: &TabularQ,
    policy: &[usize],
    weights: &[f64],
) -> Result<f64, OracleError> {
    check_compat(mdp, q, &BellmanMode::Policy(policy.to_vec()))?;
    check_weights(mdp, weights)?;
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let w = weights[s * mdp.n_actions + a] / total;
            if w == 0.0 {
                continue;
            }
            let inner: f64 = mdp
                .transition_row(s, a)
                .iter()
                .enumerate()
                .map(|(s2, p)| {
                    p * (mdp.loss(s, a) + mdp.discount * q.get(s2, policy[s2]) - q.get(s, a))
                        .powi(2)
                })
                .sum();
            acc += w * inner;
        }
    }
    Ok(acc)
}

/// Monte-Carlo counterpart of [`ensemble_br_loss`] over `samples` IID transitions.
pub fn empirical_br_loss<R: Rng + ?Sized>(
    mdp: &FiniteMdp,
    q: &TabularQ,
    policy: &[usize],
    weights: &[f64],
    samples: usize,
    rng: &mut R,
) -> Result<f64, OracleError> {
    check_compat(mdp, q, &BellmanMode::Policy(policy.to_vec()))?;
    check_weights(mdp, weights)?;
    if samples == 0 {
        return Err(OracleError::Invalid("need at least one sample".into()));
    }
    let pairs = WeightedIndex::new(weights).map_err(|e| OracleError::Invalid(e.to_string()))?;
    let rows: Vec<WeightedIndex<f64>> = (0..mdp.n_states * mdp.n_actions)
        .map(|r| {
            WeightedIndex::new(mdp.transition_row(r / mdp.n_actions, r % mdp.n_actions))
                .expect("validated rows")
        })
        .collect();
    let mut acc = 0.0;
    for _ in 0..samples {
        let r = pairs.sample(rng);
        let (s, a) = (r / mdp.n_actions, r % mdp.n_actions);
        let s2 = rows[r].sample(rng);
        acc += (mdp.loss(s, a) + mdp.discount * q.get(s2, policy[s2]) - q.get(s, a)).powi(2);
    }
    Ok(acc / samples as f64)
}

fn check_weights(mdp: &FiniteMdp, weights: &[f64]) -> Result<(), OracleError> {
    if weights.len() != mdp.n_states * mdp.n_actions
        || weights.iter().any(|w| !w.is_finite() || *w < 0.0)
        || weights.iter().sum::<f64>() <= 0.0
    {
        return Err(OracleError::Invalid(
            "sampling weights must be non-negative with a positive sum".into(),
        ));
    }
    Ok(())
}

/// Fixed stochastic 3-state, 2-action MDP with a policy, a Q-table and a sampling
/// distribution, used for the law-of-large-numbers check on the Bellman-residual loss.
pub struct ThreeStateFixture {
    pub mdp: FiniteMdp,
    pub q: TabularQ,
    pub policy: Vec<usize>,
    pub weights: Vec<f64>,
}

pub fn three_state_fixture() -> ThreeStateFixture {
    #[rustfmt::skip]
    let transitions = vec![
        0.7, 0.2, 0.1,   0.1, 0.6, 0.3,
        0.3, 0.4, 0.3,   0.0, 0.5, 0.5,
        0.25, 0.25, 0.5, 0.9, 0.0, 0.1,
    ];
    let mdp = FiniteMdp::new(3, 2, transitions, vec![1.0, 0.0, 0.5, 1.0, 0.0, 2.0], 0.9)
        .expect("valid fixture");
    let q = TabularQ::new(3, 2, vec![2.0, -1.0, 0.5, 3.0, 1.5, 0.0]).expect("valid fixture");
    ThreeStateFixture {
        mdp,
        q,
        policy: vec![1, 0, 1],
        weights: vec![0.2, 0.1, 0.25, 0.15, 0.1, 0.2],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// State 0 moves to absorbing state 1 under either action; state 1 loops.
    fn chain(discount: f64) -> FiniteMdp {
        #[rustfmt::skip]
        let p = vec![
            0.0, 1.0,  0.0, 1.0,
            0.0, 1.0,  0.0, 1.0,
        ];
        FiniteMdp::new(2, 2, p, vec![1.0, 2.0, 1.0, 3.0], discount).unwrap()
    }

    #[test]
    fn validation() {
        assert!(FiniteMdp::new(1, 1, vec![0.5], vec![0.0], 0.5).is_err());
        assert!(FiniteMdp::new(1, 1, vec![1.0], vec![0.0], 1.0).is_err());
        assert!(FiniteMdp::new(2, 1, vec![1.2, -0.2, 0.0, 1.0], vec![0.0, 0.0], 0.5).is_err());
        assert!(FiniteMdp::new(1, 1, vec![1.0], vec![0.0], 0.0).is_ok());
    }

    #[test]
    fn zero_discount_returns_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mdp = FiniteMdp::random(&mut rng, 4, 3, 0.0).unwrap();
        let q = TabularQ::random(&mut rng, 4, 3, 5.0);
        let out = bellman_apply(&mdp, &q, &BellmanMode::Optimal).unwrap();
        assert_eq!(out.values(), &mdp.losses[..]);
        let fp = fixed_point(&mdp, &BellmanMode::Optimal).unwrap();
        assert_eq!(fp.q.values(), &mdp.losses[..]);
    }

    #[test]
    fn chain_one_application_by_hand() {
        let mdp = chain(0.5);
        let q = TabularQ::new(2, 2, vec![0.0, 0.0, 4.0, 2.0]).unwrap();
        // optimal: V(1) = min(4, 2) = 2, so every entry adds 0.5·2
        let opt = bellman_apply(&mdp, &q, &BellmanMode::Optimal).unwrap();
        assert_eq!(opt.values(), &[2.0, 3.0, 2.0, 4.0]);
        // policy picking action 0 in state 1: V(1) = 4
        let pol = bellman_apply(&mdp, &q, &BellmanMode::Policy(vec![1, 0])).unwrap();
        assert_eq!(pol.values(), &[3.0, 4.0, 3.0, 5.0]);
    }

    #[test]
    fn chain_fixed_point_is_geometric_series() {
        let a: f64 = 0.9;
        let mdp = chain(a);
        let fp = fixed_point(&mdp, &BellmanMode::Optimal).unwrap();
        // absorbing state: Q(1, a) = g(1, a) + α·1/(1−α)
        let v1 = 1.0 / (1.0 - a);
        assert_close!(fp.q.get(1, 0), v1, 1e-10);
        assert_close!(fp.q.get(1, 1), 3.0 + a * v1, 1e-10);
        assert_close!(fp.q.get(0, 1), 2.0 + a * v1, 1e-10);
        let bound = (FIXED_POINT_TOL.ln() / a.ln()).ceil() as usize + 50;
        assert!(fp.iterations <= bound, "{} > {}", fp.iterations, bound);
        let again = bellman_apply(&mdp, &fp.q, &BellmanMode::Optimal).unwrap();
        assert!(again.sup_distance(&fp.q) < 1e-11);
    }

    #[test]
    fn contraction_zero_and_equality_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mdp = FiniteMdp::random_deterministic(&mut rng, 5, 2, 0.8).unwrap();
        let q = TabularQ::random(&mut rng, 5, 2, 1.0);
        assert_eq!(
            contraction_check(&mdp, &q, &q, &BellmanMode::Optimal).unwrap(),
            0.0
        );
        let shifted = TabularQ::new(5, 2, q.values().iter().map(|v| v + 0.7).collect()).unwrap();
        for mode in [
            BellmanMode::Optimal,
            BellmanMode::Policy(vec![0, 1, 1, 0, 1]),
        ] {
            let r = contraction_check(&mdp, &q, &shifted, &mode).unwrap();
            assert_close!(r, 0.8, 1e-12);
        }
    }

    #[test]
    fn grid_indexing() {
        let g = Grid {
            bounds: vec![[0.0, 1.0], [-2.0, 2.0]],
            resolution: 4,
        };
        assert_eq!(g.n_cells(), 16);
        assert_eq!(g.center(0), vec![0.125, -1.5]);
        assert_eq!(g.center(5), vec![0.375, -0.5]);
        for c in 0..16 {
            assert_eq!(g.cell_of(&g.center(c)), c);
        }
        assert_eq!(g.cell_of(&[5.0, -9.0]), 12);
    }

    #[test]
    fn deterministic_discretization_is_one_hot() {
        let env = EnvSpec::pendulum();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = discretize(&env, 11, 1, 0.9, true, &mut rng).unwrap();
        assert_eq!(d.mdp.n_states(), 121);
        for s in 0..121 {
            for a in 0..5 {
                let row = d.mdp.transition_row(s, a);
                assert_eq!(row.iter().filter(|&&p| p == 1.0).count(), 1);
                assert_eq!(row.iter().filter(|&&p| p == 0.0).count(), 120);
            }
        }
        // the centre cell is the goal and absorbs
        let goal = d.grid.cell_of(&[0.0, 0.0]);
        assert_eq!(d.mdp.transition_row(goal, 2)[goal], 1.0);
        assert_eq!(d.mdp.loss(goal, 4), 0.0);
    }

    #[test]
    fn greedy_table_agrees_with_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mdp = FiniteMdp::random(&mut rng, 6, 3, 0.9).unwrap();
        let q = fixed_point(&mdp, &BellmanMode::Optimal).unwrap().q;
        let actions: Vec<usize> = (0..6).map(|s| q.greedy(s)).collect();
        let cmp = compare_policies(&q, &actions, Some(&q)).unwrap();
        assert_eq!(cmp.agreement, 1.0);
        assert_eq!(cmp.value_gap, Some(0.0));
    }

    #[test]
    fn random_policy_agrees_about_one_third() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mdp = FiniteMdp::random(&mut rng, 3000, 3, 0.5).unwrap_or_else(|_| unreachable!());
        let q = bellman_apply(&mdp, &TabularQ::zeros(3000, 3), &BellmanMode::Optimal).unwrap();
        let actions: Vec<usize> = (0..3000).map(|_| rng.gen_range(0..3)).collect();
        let cmp = compare_policies(&q, &actions, None).unwrap();
        assert!(
            (cmp.agreement - 1.0 / 3.0).abs() < 0.03,
            "{}",
            cmp.agreement
        );
    }

    #[test]
    fn ensemble_loss_matches_variance_decomposition() {
        // E[(g + αQ' − Q)²] = α²E[Var(Q'|z)] + E[(Q − 𝒯_μQ)²]
        let f = three_state_fixture();
        let (mdp, q) = (&f.mdp, &f.q);
        let tq = bellman_apply(mdp, q, &BellmanMode::Policy(f.policy.clone())).unwrap();
        let total: f64 = f.weights.iter().sum();
        let mut expect = 0.0;
        for s in 0..3 {
            for a in 0..2 {
                let w = f.weights[s * 2 + a] / total;
                let p = mdp.transition_row(s, a);
                let v: Vec<f64> = (0..3).map(|s2| q.get(s2, f.policy[s2])).collect();
                let mean: f64 = p.iter().zip(&v).map(|(p, v)| p * v).sum();
                let var: f64 = p.iter().zip(&v).map(|(p, v)| p * (v - mean).powi(2)).sum();
                expect += w * (0.81 * var + (q.get(s, a) - tq.get(s, a)).powi(2));
            }
        }
        let got = ensemble_br_loss(mdp, q, &f.policy, &f.weights).unwrap();
        assert_close!(got, expect, 1e-12);
    }

    #[test]
    fn empirical_loss_is_close_for_many_samples() {
        let f = three_state_fixture();
        let exact = ensemble_br_loss(&f.mdp, &f.q, &f.policy, &f.weights).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let est =
            empirical_br_loss(&f.mdp, &f.q, &f.policy, &f.weights, 200_000, &mut rng).unwrap();
        assert!((est - exact).abs() < 0.05 * exact, "{est} vs {exact}");
    }
}
