//! Deterministic simulators for the inverted pendulum, mountain car and acrobot.
//!
//! Pendulum and acrobot integrate with semi-implicit Euler (velocity first, then angle)
//! at the configured `dt`; mountain car uses its own discrete update. After each step,
//! velocities are clamped to the state box and angles wrapped to `[-π, π]`.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gmmqf::WeightLayout;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid environment spec: {0}")]
    Invalid(String),
    #[error("unknown environment {0:?} (expected pendulum, mountain_car or acrobot)")]
    UnknownName(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvName {
    Pendulum,
    MountainCar,
    Acrobot,
}

impl EnvName {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvName::Pendulum => "pendulum",
            EnvName::MountainCar => "mountain_car",
            EnvName::Acrobot => "acrobot",
        }
    }
}

impl std::fmt::Display for EnvName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EnvName {
    type Err = EnvError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pendulum" => Ok(EnvName::Pendulum),
            "mountain_car" => Ok(EnvName::MountainCar),
            "acrobot" => Ok(EnvName::Acrobot),
            other => Err(EnvError::UnknownName(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PendulumParams {
    pub mass: f64,
    pub length: f64,
    pub gravity: f64,
    pub friction: f64,
    /// Goal when `|θ| ≤ goal_angle_tol` and `|θ̇| ≤ goal_velocity_tol`.
    pub goal_angle_tol: f64,
    pub goal_velocity_tol: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MountainCarParams {
    pub force: f64,
    pub gravity: f64,
    pub goal_position: f64,
    pub goal_velocity: f64,
    /// Evaluation episodes start uniformly in this position range with zero velocity.
    pub eval_start: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcrobotModel {
    /// `θ̈₂ = a + d₂φ₂/d₁ - φ₂`, gravity term `(m₁l_c1 + m₂l_c1)`.
    Caption,
    /// The usual Spong/Sutton form with the inertia denominator and `(m₁l_c1 + m₂l₁)`.
    Standard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcrobotParams {
    pub m1: f64,
    pub m2: f64,
    pub l1: f64,
    pub l2: f64,
    pub lc1: f64,
    pub lc2: f64,
    pub i1: f64,
    pub i2: f64,
    pub gravity: f64,
    pub model: AcrobotModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Physics {
    Pendulum(PendulumParams),
    MountainCar(MountainCarParams),
    Acrobot(AcrobotParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub physics: Physics,
    /// Sorted, non-empty list of scalar action values.
    pub actions: Vec<f64>,
    pub dt: f64,
    /// Per-coordinate `[lo, hi]`.
    pub state_bounds: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState(Vec<f64>);

impl EnvState {
    pub fn new(coords: Vec<f64>) -> Self {
        Self(coords)
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.0
    }
}

/// Where episodes start.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartMode {
    /// Uniform over the state box (zero velocities for the pendulum and acrobot).
    Train,
    /// The resting position.
    Eval,
}

/// Wraps an angle into `[-π, π]`, leaving values already inside untouched.
pub fn wrap_angle(x: f64) -> f64 {
    if (-PI..=PI).contains(&x) {
        x
    } else {
        (x + PI).rem_euclid(2.0 * PI) - PI
    }
}

impl EnvSpec {
    pub fn pendulum() -> Self {
        Self {
            physics: Physics::Pendulum(PendulumParams {
                mass: 1.0,
                length: 1.0,
                gravity: 9.8,
                friction: 0.01,
                goal_angle_tol: 0.1,
                goal_velocity_tol: 0.5,
            }),
            actions: vec![-5.0, -3.0, 0.0, 3.0, 5.0],
            dt: 0.05,
            state_bounds: vec![[-PI, PI], [-4.0, 4.0]],
        }
    }

    pub fn mountain_car() -> Self {
        Self {
            physics: Physics::MountainCar(MountainCarParams {
                force: 0.005,
                gravity: 0.0025,
                goal_position: 0.5,
                goal_velocity: 0.0,
                eval_start: [-0.6, -0.4],
            }),
            actions: vec![-1.0, 0.0, 1.0],
            dt: 1.0,
            state_bounds: vec![[-1.2, 0.6], [-0.07, 0.07]],
        }
    }

    pub fn acrobot() -> Self {
        Self {
            physics: Physics::Acrobot(AcrobotParams {
                m1: 1.0,
                m2: 1.0,
                l1: 1.0,
                l2: 1.0,
                lc1: 0.5,
                lc2: 0.5,
                i1: 1.0,
                i2: 1.0,
                gravity: 9.8,
                model: AcrobotModel::Caption,
            }),
            actions: vec![-1.0, 0.0, 1.0],
            dt: 0.2,
            state_bounds: vec![
                [-PI, PI],
                [-PI, PI],
                [-4.0 * PI, 4.0 * PI],
                [-9.0 * PI, 9.0 * PI],
            ],
        }
    }

    pub fn preset(name: EnvName) -> Self {
        match name {
            EnvName::Pendulum => Self::pendulum(),
            EnvName::MountainCar => Self::mountain_car(),
            EnvName::Acrobot => Self::acrobot(),
        }
    }

    pub fn name(&self) -> EnvName {
        match self.physics {
            Physics::Pendulum(_) => EnvName::Pendulum,
            Physics::MountainCar(_) => EnvName::MountainCar,
            Physics::Acrobot(_) => EnvName::Acrobot,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self.physics {
            Physics::Pendulum(_) | Physics::MountainCar(_) => 2,
            Physics::Acrobot(_) => 4,
        }
    }

    pub fn n_actions(&self) -> usize {
        self.actions.len()
    }

    /// Indices of angle coordinates (wrapped rather than clamped).
    fn angle_coords(&self) -> &'static [usize] {
        match self.physics {
            Physics::Pendulum(_) => &[0],
            Physics::MountainCar(_) => &[],
            Physics::Acrobot(_) => &[0, 1],
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |msg: String| Err(EnvError::Invalid(msg));
        if self.actions.is_empty() {
            return bad("action set is empty".into());
        }
        if self.actions.iter().any(|a| !a.is_finite())
            || self.actions.windows(2).any(|w| w[0] >= w[1])
        {
            return bad("actions must be finite and strictly increasing".into());
        }
        if self.actions.iter().all(|a| *a == 0.0) {
            return bad("at least one action must be non-zero".into());
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if self.state_bounds.len() != self.state_dim() {
            return bad(format!(
                "{} state bounds given, {} expected",
                self.state_bounds.len(),
                self.state_dim()
            ));
        }
        if self
            .state_bounds
            .iter()
            .any(|[lo, hi]| !(lo.is_finite() && hi.is_finite() && lo < hi))
        {
            return bad("state bounds must be finite with lo < hi".into());
        }
        Ok(())
    }

    fn max_abs_action(&self) -> f64 {
        self.actions.iter().fold(0.0, |m, a| m.max(a.abs()))
    }

    /// `ζ(s, a) = (s, a / max|a|)`.
    pub fn zeta(&self, s: &EnvState, a: usize) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.state_dim() + 1);
        z.extend_from_slice(s.coords());
        z.push(self.actions[a] / self.max_abs_action());
        z
    }

    /// What the Gaussians consume: `ζ(s, a)` for shared weights, `s` for per-action weights.
    pub fn model_input(&self, layout: WeightLayout, s: &EnvState, a: usize) -> Vec<f64> {
        match layout {
            WeightLayout::Shared => self.zeta(s, a),
            WeightLayout::PerAction { .. } => s.coords().to_vec(),
        }
    }

    /// Dimension of [`model_input`](Self::model_input) under `layout`.
    pub fn input_dim(&self, layout: WeightLayout) -> usize {
        match layout {
            WeightLayout::Shared => self.state_dim() + 1,
            WeightLayout::PerAction { .. } => self.state_dim(),
        }
    }

    pub fn is_goal(&self, s: &EnvState) -> bool {
        let x = s.coords();
        match &self.physics {
            Physics::Pendulum(p) => {
                x[0].abs() <= p.goal_angle_tol && x[1].abs() <= p.goal_velocity_tol
            }
            Physics::MountainCar(p) => x[0] >= p.goal_position && x[1] >= p.goal_velocity,
            Physics::Acrobot(_) => -x[0].cos() - (x[0] + x[1]).cos() > 1.0,
        }
    }

    /// 0 in the goal set, 1 elsewhere (independent of the action).
    pub fn one_step_loss(&self, s: &EnvState, _a: usize) -> f64 {
        if self.is_goal(s) {
            0.0
        } else {
            1.0
        }
    }

    fn clamp(&self, i: usize, v: f64) -> f64 {
        let [lo, hi] = self.state_bounds[i];
        v.clamp(lo, hi)
    }

    /// One transition under action index `a`.
    pub fn step(&self, s: &EnvState, a: usize) -> EnvState {
        let u = self.actions[a];
        let x = s.coords();
        let next = match &self.physics {
            Physics::Pendulum(p) => {
                let (theta, omega) = (x[0], x[1]);
                let inertia = p.mass * p.length * p.length;
                let acc = (-p.friction * omega + p.mass * p.gravity * p.length * theta.sin() + u)
                    / inertia;
                let omega = self.clamp(1, omega + self.dt * acc);
                vec![wrap_angle(theta + self.dt * omega), omega]
            }
            Physics::MountainCar(p) => {
                let (pos, vel) = (x[0], x[1]);
                let vel = self.clamp(1, vel + u * p.force - p.gravity * (3.0 * pos).cos());
                let mut pos = pos + vel;
                let mut vel = vel;
                let [lo, hi] = self.state_bounds[0];
                if pos <= lo {
                    // inelastic left wall
                    pos = lo;
                    vel = 0.0;
                } else if pos > hi {
                    pos = hi;
                }
                vec![pos, vel]
            }
            Physics::Acrobot(p) => {
                let (dd1, dd2) = acrobot_accel(p, x, u);
                let w1 = self.clamp(2, x[2] + self.dt * dd1);
                let w2 = self.clamp(3, x[3] + self.dt * dd2);
                vec![
                    wrap_angle(x[0] + self.dt * w1),
                    wrap_angle(x[1] + self.dt * w2),
                    w1,
                    w2,
                ]
            }
        };
        EnvState(next)
    }

    pub fn sample_initial_state<R: Rng + ?Sized>(&self, rng: &mut R, mode: StartMode) -> EnvState {
        let coords = match (&self.physics, mode) {
            (Physics::Pendulum(_), StartMode::Eval) => vec![PI, 0.0],
            (Physics::Acrobot(_), StartMode::Eval) => vec![0.0; 4],
            (Physics::MountainCar(p), StartMode::Eval) => {
                vec![rng.gen_range(p.eval_start[0]..=p.eval_start[1]), 0.0]
            }
            (Physics::MountainCar(_), StartMode::Train) => self
                .state_bounds
                .iter()
                .map(|&[lo, hi]| rng.gen_range(lo..=hi))
                .collect(),
            (_, StartMode::Train) => {
                let angles = self.angle_coords();
                self.state_bounds
                    .iter()
                    .enumerate()
                    .map(|(i, &[lo, hi])| {
                        if angles.contains(&i) {
                            rng.gen_range(lo..=hi)
                        } else {
                            0.0
                        }
                    })
                    .collect()
            }
        };
        EnvState(coords)
    }
}

/// `(θ̈₁, θ̈₂)` for state `[θ₁, θ₂, θ̇₁, θ̇₂]` and torque `u`.
fn acrobot_accel(p: &AcrobotParams, x: &[f64], u: f64) -> (f64, f64) {
    let (t1, t2, w1, w2) = (x[0], x[1], x[2], x[3]);
    let g = p.gravity;
    let d1 = p.m1 * p.lc1 * p.lc1
        + p.m2 * (p.l1 * p.l1 + p.lc2 * p.lc2 + 2.0 * p.l1 * p.lc2 * t2.cos())
        + p.i1
        + p.i2;
    let d2 = p.m2 * (p.lc2 * p.lc2 + p.l1 * p.lc2 * t2.cos()) + p.i2;
    let phi2 = p.m2 * p.lc2 * g * (t1 + t2 - PI / 2.0).cos();
    let arm = match p.model {
        AcrobotModel::Caption => p.m1 * p.lc1 + p.m2 * p.lc1,
        AcrobotModel::Standard => p.m1 * p.lc1 + p.m2 * p.l1,
    };
    let phi1 = -p.m2 * p.l1 * p.lc2 * w2 * w2 * t2.sin()
        - 2.0 * p.m2 * p.l1 * p.lc2 * w1 * w2 * t2.sin()
        + arm * g * (t1 - PI / 2.0).cos()
        + phi2;
    let dd2 = match p.model {
        AcrobotModel::Caption => u + d2 * phi2 / d1 - phi2,
        AcrobotModel::Standard => {
            (u + d2 / d1 * phi1 - p.m2 * p.l1 * p.lc2 * w1 * w1 * t2.sin() - phi2)
                / (p.m2 * p.lc2 * p.lc2 + p.i2 - d2 * d2 / d1)
        }
    };
    let dd1 = -(d2 * dd2 + phi1) / d1;
    (dd1, dd2)
}
