//! Gaussian-mixture Q-functions, the empirical Bellman-residual loss and its gradients.
//!
//! A model is `Q(x, a) = Σ_k w_k(a) · exp(-(x - m_k)ᵀ C_k⁻¹ (x - m_k))`, where the kernel is
//! unnormalized (no ½, no density constant). With [`WeightLayout::Shared`] the input `x` is
//! the state-action embedding and `w_k(a) = ξ_k`; with [`WeightLayout::PerAction`] the input
//! is the bare state and every action owns a weight row.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{map_chunks, Execution};
use crate::manifold::{ManifoldError, MetricKind, ProductTangent, SpdMatrix, SymTangent};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error("action index {action} out of range for {n_actions} actions")]
    InvalidAction { action: usize, n_actions: usize },
    #[error("input has dimension {found}, model expects {expected}")]
    InputDimension { expected: usize, found: usize },
    #[error("transition batch is empty")]
    EmptyBatch,
    #[error("discount must lie in [0, 1), got {0}")]
    InvalidDiscount(f64),
    #[error("model shape is inconsistent: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// How the mixture weights are indexed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightLayout {
    /// One weight per Gaussian; the input already embeds the action.
    Shared,
    /// One weight row per action; the Gaussians see only the state.
    PerAction { n_actions: usize },
}

impl WeightLayout {
    pub fn weight_rows(self) -> usize {
        match self {
            WeightLayout::Shared => 1,
            WeightLayout::PerAction { n_actions } => n_actions,
        }
    }

    fn row_of(self, action: usize) -> usize {
        match self {
            WeightLayout::Shared => 0,
            WeightLayout::PerAction { .. } => action,
        }
    }
}

/// Unnormalized Gaussian kernel `exp(-(z - m)ᵀ c⁻¹ (z - m))`.
pub fn gauss_eval(z: &DVector<f64>, m: &DVector<f64>, c: &SpdMatrix) -> Result<f64, ModelError> {
    if z.len() != c.dim() || m.len() != c.dim() {
        return Err(ModelError::InputDimension {
            expected: c.dim(),
            found: if z.len() != c.dim() { z.len() } else { m.len() },
        });
    }
    let diff = z - m;
    let q = (c.inverse() * &diff).dot(&diff);
    Ok((-q).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmQf {
    layout: WeightLayout,
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covs: Vec<SpdMatrix>,
}

impl GmmQf {
    /// `weights` is row-major `weight_rows × K` (`K` entries for the shared layout).
    pub fn new(
        layout: WeightLayout,
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covs: Vec<SpdMatrix>,
    ) -> Result<Self, ModelError> {
        let k = means.len();
        if k == 0 {
            return Err(ModelError::Shape(
                "at least one Gaussian is required".into(),
            ));
        }
        if covs.len() != k {
            return Err(ModelError::Shape(format!(
                "{} means but {} covariances",
                k,
                covs.len()
            )));
        }
        if let WeightLayout::PerAction { n_actions: 0 } = layout {
            return Err(ModelError::Shape(
                "per-action layout needs at least one action".into(),
            ));
        }
        if weights.len() != layout.weight_rows() * k {
            return Err(ModelError::Shape(format!(
                "expected {} weights, got {}",
                layout.weight_rows() * k,
                weights.len()
            )));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) || covs.iter().any(|c| c.dim() != dim) {
            return Err(ModelError::Shape(
                "means and covariances must share one dimension".into(),
            ));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(ModelError::NonFinite("weights"));
        }
        if means.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(ModelError::NonFinite("means"));
        }
        Ok(Self {
            layout,
            weights,
            means,
            covs,
        })
    }

    pub(crate) fn with_parameters(
        &self,
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covs: Vec<SpdMatrix>,
    ) -> Self {
        Self {
            layout: self.layout,
            weights,
            means,
            covs,
        }
    }

    pub fn layout(&self) -> WeightLayout {
        self.layout
    }

    pub fn k(&self) -> usize {
        self.means.len()
    }

    /// Dimension of the Gaussian input.
    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covs(&self) -> &[SpdMatrix] {
        &self.covs
    }

    /// Weight of Gaussian `k` for `action` (the action is ignored by the shared layout).
    pub fn weight(&self, action: usize, k: usize) -> f64 {
        self.weights[self.layout.row_of(action) * self.k() + k]
    }

    /// Number of free scalars: weights, means, and the upper triangles of the covariances.
    pub fn param_count(&self) -> usize {
        let d = self.dim();
        self.weights.len() + self.k() * d + self.k() * d * (d + 1) / 2
    }

    pub fn check_action(&self, action: usize) -> Result<(), ModelError> {
        if let WeightLayout::PerAction { n_actions } = self.layout {
            if action >= n_actions {
                return Err(ModelError::InvalidAction { action, n_actions });
            }
        }
        Ok(())
    }

    fn check_input(&self, input: &[f64]) -> Result<(), ModelError> {
        if input.len() != self.dim() {
            return Err(ModelError::InputDimension {
                expected: self.dim(),
                found: input.len(),
            });
        }
        Ok(())
    }

    /// Q-value at a model input (`ζ(s, a)` for the shared layout, `s` per action).
    pub fn q_value(&self, input: &[f64], action: usize) -> Result<f64, ModelError> {
        self.check_input(input)?;
        self.check_action(action)?;
        let kern = Kernels::new(self);
        let mut diff = vec![0.0; self.dim()];
        Ok((0..self.k())
            .map(|k| self.weight(action, k) * kern.eval(k, input, &mut diff))
            .sum())
    }

    /// Unchecked evaluation with precomputed kernels; `diff` is scratch of length `dim`.
    pub(crate) fn q_value_with(
        &self,
        kern: &Kernels,
        input: &[f64],
        action: usize,
        diff: &mut [f64],
    ) -> f64 {
        (0..self.k())
            .map(|k| self.weight(action, k) * kern.eval(k, input, diff))
            .sum()
    }

    /// Q-values of every action at one state (per-action layout only needs the kernels once).
    pub fn q_values_per_action(&self, state: &[f64]) -> Result<Vec<f64>, ModelError> {
        let WeightLayout::PerAction { n_actions } = self.layout else {
            return Err(ModelError::Shape(
                "q_values_per_action needs the per-action layout".into(),
            ));
        };
        self.check_input(state)?;
        let kern = Kernels::new(self);
        let mut diff = vec![0.0; self.dim()];
        let g: Vec<f64> = (0..self.k())
            .map(|k| kern.eval(k, state, &mut diff))
            .collect();
        Ok((0..n_actions)
            .map(|a| (0..self.k()).map(|k| self.weight(a, k) * g[k]).sum())
            .collect())
    }
}

/// Precomputed inverse covariances, row-major, for the per-sample loops.
pub(crate) struct Kernels {
    dim: usize,
    inv: Vec<f64>,
    means: Vec<f64>,
}

impl Kernels {
    pub(crate) fn new(model: &GmmQf) -> Self {
        let d = model.dim();
        let mut inv = Vec::with_capacity(model.k() * d * d);
        let mut means = Vec::with_capacity(model.k() * d);
        for (m, c) in model.means().iter().zip(model.covs()) {
            let ci = c.inverse();
            for i in 0..d {
                for j in 0..d {
                    inv.push(ci[(i, j)]);
                }
            }
            means.extend(m.iter());
        }
        Self { dim: d, inv, means }
    }

    /// Kernel value of component `k` at `x`; leaves `x - m_k` in `diff`.
    #[inline]
    pub(crate) fn eval(&self, k: usize, x: &[f64], diff: &mut [f64]) -> f64 {
        let d = self.dim;
        let m = &self.means[k * d..(k + 1) * d];
        for i in 0..d {
            diff[i] = x[i] - m[i];
        }
        let inv = &self.inv[k * d * d..(k + 1) * d * d];
        let mut q = 0.0;
        for i in 0..d {
            let row = &inv[i * d..(i + 1) * d];
            let mut acc = 0.0;
            for j in 0..d {
                acc += row[j] * diff[j];
            }
            q += diff[i] * acc;
        }
        (-q).exp()
    }
}

/// The on-policy dataset `{(x_t, a_t, g_t, x'_t, a'_t)}`.
///
/// `x_t` is whatever the model consumes: `ζ(s_t, a_t)` for the shared layout or `s_t` for the
/// per-action layout (the action indices are then what selects the weight row).
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionBatch {
    dim: usize,
    inputs: Vec<f64>,
    actions: Vec<usize>,
    losses: Vec<f64>,
    next_inputs: Vec<f64>,
    next_actions: Vec<usize>,
    tag: u64,
}

impl TransitionBatch {
    pub fn new(dim: usize) -> Self {
        Self::with_capacity(dim, 0)
    }

    pub fn with_capacity(dim: usize, rows: usize) -> Self {
        Self {
            dim,
            inputs: Vec::with_capacity(rows * dim),
            actions: Vec::with_capacity(rows),
            losses: Vec::with_capacity(rows),
            next_inputs: Vec::with_capacity(rows * dim),
            next_actions: Vec::with_capacity(rows),
            tag: 0,
        }
    }

    pub fn push(
        &mut self,
        input: &[f64],
        action: usize,
        loss: f64,
        next_input: &[f64],
        next_action: usize,
    ) -> Result<(), ModelError> {
        for x in [input, next_input] {
            if x.len() != self.dim {
                return Err(ModelError::InputDimension {
                    expected: self.dim,
                    found: x.len(),
                });
            }
        }
        if !loss.is_finite() || input.iter().chain(next_input).any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("transition"));
        }
        self.inputs.extend_from_slice(input);
        self.actions.push(action);
        self.losses.push(loss);
        self.next_inputs.extend_from_slice(next_input);
        self.next_actions.push(next_action);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn input(&self, t: usize) -> &[f64] {
        &self.inputs[t * self.dim..(t + 1) * self.dim]
    }

    pub fn next_input(&self, t: usize) -> &[f64] {
        &self.next_inputs[t * self.dim..(t + 1) * self.dim]
    }

    pub fn action(&self, t: usize) -> usize {
        self.actions[t]
    }

    pub fn next_action(&self, t: usize) -> usize {
        self.next_actions[t]
    }

    pub fn loss(&self, t: usize) -> f64 {
        self.losses[t]
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    /// Provenance tag (the policy-iteration trial that produced this batch).
    pub fn tag(&self) -> u64 {
        self.tag
    }

    pub fn set_tag(&mut self, tag: u64) {
        self.tag = tag;
    }

    /// Errors unless the batch is non-empty and matches the model's input size and actions.
    pub fn check_against(&self, model: &GmmQf) -> Result<(), ModelError> {
        if self.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        if self.dim != model.dim() {
            return Err(ModelError::InputDimension {
                expected: model.dim(),
                found: self.dim,
            });
        }
        for &a in self.actions.iter().chain(&self.next_actions) {
            model.check_action(a)?;
        }
        Ok(())
    }
}

fn check_discount(discount: f64) -> Result<(), ModelError> {
    if !(0.0..1.0).contains(&discount) {
        return Err(ModelError::InvalidDiscount(discount));
    }
    Ok(())
}

/// `(1/T) Σ_t [g_t + α Q(x'_t, a'_t) - Q(x_t, a_t)]²`.
pub fn br_loss(model: &GmmQf, batch: &TransitionBatch, discount: f64) -> Result<f64, ModelError> {
    br_loss_with(model, batch, discount, Execution::default())
}

pub fn br_loss_with(
    model: &GmmQf,
    batch: &TransitionBatch,
    discount: f64,
    exec: Execution,
) -> Result<f64, ModelError> {
    batch.check_against(model)?;
    check_discount(discount)?;
    Ok(loss_unchecked(model, batch, discount, exec))
}

pub(crate) fn loss_unchecked(
    model: &GmmQf,
    batch: &TransitionBatch,
    discount: f64,
    exec: Execution,
) -> f64 {
    let kern = Kernels::new(model);
    let partials = map_chunks(exec, batch.len(), |rows| {
        let mut diff = vec![0.0; model.dim()];
        rows.map(|t| {
            let d = residual(model, &kern, batch, discount, t, &mut diff);
            d * d
        })
        .sum::<f64>()
    });
    partials.iter().sum::<f64>() / batch.len() as f64
}

fn residual(
    model: &GmmQf,
    kern: &Kernels,
    batch: &TransitionBatch,
    discount: f64,
    t: usize,
    diff: &mut [f64],
) -> f64 {
    let (a, ap) = (batch.action(t), batch.next_action(t));
    let (x, xp) = (batch.input(t), batch.next_input(t));
    let mut q = 0.0;
    let mut qp = 0.0;
    for k in 0..model.k() {
        qp += model.weight(ap, k) * kern.eval(k, xp, diff);
        q += model.weight(a, k) * kern.eval(k, x, diff);
    }
    batch.loss(t) + discount * qp - q
}

/// The same loss written as `(1/T)‖g + Δξ‖²` with `Δ_tk = α G_k(x'_t) - G_k(x_t)`.
/// Shared layout only.
pub fn br_loss_matrix_form(
    model: &GmmQf,
    batch: &TransitionBatch,
    discount: f64,
) -> Result<f64, ModelError> {
    batch.check_against(model)?;
    check_discount(discount)?;
    if model.layout() != WeightLayout::Shared {
        return Err(ModelError::Shape(
            "matrix form needs the shared layout".into(),
        ));
    }
    let delta = delta_matrix(model, batch, discount)?;
    let g = DVector::from_column_slice(batch.losses());
    let xi = DVector::from_column_slice(model.weights());
    Ok((g + delta * xi).norm_squared() / batch.len() as f64)
}

fn delta_matrix(
    model: &GmmQf,
    batch: &TransitionBatch,
    discount: f64,
) -> Result<DMatrix<f64>, ModelError> {
    let mut delta = DMatrix::zeros(batch.len(), model.k());
    for t in 0..batch.len() {
        let x = DVector::from_column_slice(batch.input(t));
        let xp = DVector::from_column_slice(batch.next_input(t));
        for k in 0..model.k() {
            let (m, c) = (&model.means()[k], &model.covs()[k]);
            delta[(t, k)] = discount * gauss_eval(&xp, m, c)? - gauss_eval(&x, m, c)?;
        }
    }
    Ok(delta)
}

/// Per-sample quantities and their averages behind the analytic gradients.
///
/// With the shared layout `mean_aggregate(k)` is `d̄_k = (1/T) Σ_t δ_t d_tk` and
/// `cov_aggregate(k)` is `B̄_k`, exactly as written in the gradient formulas; the weight
/// `ξ_k` is applied afterwards. With the per-action layout the weight of the action taken
/// in each term is folded into `d_tk` and `B_tk`, and no outer factor is applied.
#[derive(Debug, Clone)]
pub struct GradWorkspace {
    t_len: usize,
    k: usize,
    dim: usize,
    discount: f64,
    layout: WeightLayout,
    losses: Vec<f64>,
    actions: Vec<usize>,
    next_actions: Vec<usize>,
    kernels: Vec<f64>,
    next_kernels: Vec<f64>,
    residuals: Vec<f64>,
    mean_agg: Vec<DVector<f64>>,
    cov_agg: Vec<SymTangent>,
    inv_covs: Vec<DMatrix<f64>>,
    loss: f64,
}

struct ChunkOut {
    kernels: Vec<f64>,
    next_kernels: Vec<f64>,
    residuals: Vec<f64>,
    mean_part: Vec<f64>,
    cov_part: Vec<f64>,
    sq_sum: f64,
}

fn process_rows(
    model: &GmmQf,
    kern: &Kernels,
    batch: &TransitionBatch,
    discount: f64,
    rows: Range<usize>,
) -> ChunkOut {
    let (k_n, d) = (model.k(), model.dim());
    let absorbed = model.layout() != WeightLayout::Shared;
    let n = rows.len();
    let mut out = ChunkOut {
        kernels: Vec::with_capacity(n * k_n),
        next_kernels: Vec::with_capacity(n * k_n),
        residuals: Vec::with_capacity(n),
        mean_part: vec![0.0; k_n * d],
        cov_part: vec![0.0; k_n * d * d],
        sq_sum: 0.0,
    };
    let mut diffs = vec![0.0; k_n * d];
    let mut next_diffs = vec![0.0; k_n * d];
    for t in rows {
        let (a, ap) = (batch.action(t), batch.next_action(t));
        let (x, xp) = (batch.input(t), batch.next_input(t));
        let base = out.kernels.len();
        let mut q = 0.0;
        let mut qp = 0.0;
        for k in 0..k_n {
            let gp = kern.eval(k, xp, &mut next_diffs[k * d..(k + 1) * d]);
            let g = kern.eval(k, x, &mut diffs[k * d..(k + 1) * d]);
            qp += model.weight(ap, k) * gp;
            q += model.weight(a, k) * g;
            out.next_kernels.push(gp);
            out.kernels.push(g);
        }
        let delta = batch.loss(t) + discount * qp - q;
        out.residuals.push(delta);
        out.sq_sum += delta * delta;
        for k in 0..k_n {
            let (w, wp) = if absorbed {
                (model.weight(a, k), model.weight(ap, k))
            } else {
                (1.0, 1.0)
            };
            let cp = delta * discount * wp * out.next_kernels[base + k];
            let c = delta * w * out.kernels[base + k];
            let dp = &next_diffs[k * d..(k + 1) * d];
            let dx = &diffs[k * d..(k + 1) * d];
            let mean = &mut out.mean_part[k * d..(k + 1) * d];
            for i in 0..d {
                mean[i] += cp * dp[i] - c * dx[i];
            }
            let cov = &mut out.cov_part[k * d * d..(k + 1) * d * d];
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += cp * dp[i] * dp[j] - c * dx[i] * dx[j];
                }
            }
        }
    }
    out
}

pub fn build_workspace(
    model: &GmmQf,
    batch: &TransitionBatch,
    discount: f64,
) -> Result<GradWorkspace, ModelError> {
    build_workspace_with(model, batch, discount, Execution::default())
}

pub fn build_workspace_with(
    model: &GmmQf,
    batch: &TransitionBatch,
    discount: f64,
    exec: Execution,
) -> Result<GradWorkspace, ModelError> {
    batch.check_against(model)?;
    check_discount(discount)?;
    Ok(workspace_unchecked(model, batch, discount, exec))
}

pub(crate) fn workspace_unchecked(
    model: &GmmQf,
    batch: &TransitionBatch,
    discount: f64,
    exec: Execution,
) -> GradWorkspace {
    let (t_len, k_n, d) = (batch.len(), model.k(), model.dim());
    let kern = Kernels::new(model);
    let chunks = map_chunks(exec, t_len, |rows| {
        process_rows(model, &kern, batch, discount, rows)
    });

    let mut kernels = Vec::with_capacity(t_len * k_n);
    let mut next_kernels = Vec::with_capacity(t_len * k_n);
    let mut residuals = Vec::with_capacity(t_len);
    let mut mean_sum = vec![0.0; k_n * d];
    let mut cov_sum = vec![0.0; k_n * d * d];
    let mut sq_sum = 0.0;
    for c in chunks {
        kernels.extend(c.kernels);
        next_kernels.extend(c.next_kernels);
        residuals.extend(c.residuals);
        mean_sum
            .iter_mut()
            .zip(&c.mean_part)
            .for_each(|(a, b)| *a += b);
        cov_sum
            .iter_mut()
            .zip(&c.cov_part)
            .for_each(|(a, b)| *a += b);
        sq_sum += c.sq_sum;
    }
    let inv_t = 1.0 / t_len as f64;
    let mean_agg = (0..k_n)
        .map(|k| DVector::from_column_slice(&mean_sum[k * d..(k + 1) * d]) * inv_t)
        .collect();
    let cov_agg = (0..k_n)
        .map(|k| {
            let m = DMatrix::from_row_slice(d, d, &cov_sum[k * d * d..(k + 1) * d * d]) * inv_t;
            SymTangent::from_symmetric((&m + m.transpose()) * 0.5)
        })
        .collect();
    GradWorkspace {
        t_len,
        k: k_n,
        dim: d,
        discount,
        layout: model.layout(),
        losses: batch.losses().to_vec(),
        actions: batch.actions.clone(),
        next_actions: batch.next_actions.clone(),
        kernels,
        next_kernels,
        residuals,
        mean_agg,
        cov_agg,
        inv_covs: model.covs().iter().map(SpdMatrix::inverse).collect(),
        // same rounding as loss_unchecked, so traces compare bitwise
        loss: sq_sum / t_len as f64,
    }
}

impl GradWorkspace {
    pub fn len(&self) -> usize {
        self.t_len
    }

    pub fn is_empty(&self) -> bool {
        self.t_len == 0
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Loss at the point the workspace was built for.
    pub fn loss(&self) -> f64 {
        self.loss
    }

    /// `δ_t = g_t + α Q(x'_t) - Q(x_t)`.
    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    /// `G_k(x_t)`.
    pub fn kernel(&self, t: usize, k: usize) -> f64 {
        self.kernels[t * self.k + k]
    }

    /// `G_k(x'_t)`.
    pub fn next_kernel(&self, t: usize, k: usize) -> f64 {
        self.next_kernels[t * self.k + k]
    }

    pub fn mean_aggregate(&self, k: usize) -> &DVector<f64> {
        &self.mean_agg[k]
    }

    pub fn cov_aggregate(&self, k: usize) -> &SymTangent {
        &self.cov_agg[k]
    }

    /// The `T × K` matrix with entries `α G_k(x'_t) - G_k(x_t)`.
    pub fn delta_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.t_len, self.k, |t, k| {
            self.discount * self.next_kernel(t, k) - self.kernel(t, k)
        })
    }

    /// Recomputes `d_tk` for one row, following the same weighting convention as the aggregate.
    pub fn d_tk(&self, model: &GmmQf, batch: &TransitionBatch, t: usize, k: usize) -> DVector<f64> {
        let (w, wp) = self.term_weights(model, t, k);
        let m = &model.means()[k];
        let dp = DVector::from_column_slice(batch.next_input(t)) - m;
        let dx = DVector::from_column_slice(batch.input(t)) - m;
        dp * (self.discount * wp * self.next_kernel(t, k)) - dx * (w * self.kernel(t, k))
    }

    /// Recomputes `B_tk` for one row.
    pub fn b_tk(&self, model: &GmmQf, batch: &TransitionBatch, t: usize, k: usize) -> DMatrix<f64> {
        let (w, wp) = self.term_weights(model, t, k);
        let m = &model.means()[k];
        let dp = DVector::from_column_slice(batch.next_input(t)) - m;
        let dx = DVector::from_column_slice(batch.input(t)) - m;
        &dp * dp.transpose() * (self.discount * wp * self.next_kernel(t, k))
            - &dx * dx.transpose() * (w * self.kernel(t, k))
    }

    fn term_weights(&self, model: &GmmQf, t: usize, k: usize) -> (f64, f64) {
        match self.layout {
            WeightLayout::Shared => (1.0, 1.0),
            WeightLayout::PerAction { .. } => (
                model.weight(self.actions[t], k),
                model.weight(self.next_actions[t], k),
            ),
        }
    }

    fn outer_factor(&self, model: &GmmQf, k: usize) -> f64 {
        match self.layout {
            WeightLayout::Shared => model.weights()[k],
            WeightLayout::PerAction { .. } => 1.0,
        }
    }
}

/// Euclidean gradient of the loss with respect to the weights, in the model's layout.
pub fn grad_weights(ws: &GradWorkspace, model: &GmmQf) -> Vec<f64> {
    let scale = 2.0 / ws.t_len as f64;
    match ws.layout {
        WeightLayout::Shared => {
            // 2/T Δᵀ (g + Δξ)
            let delta = ws.delta_matrix();
            let xi = DVector::from_column_slice(model.weights());
            let r = DVector::from_column_slice(&ws.losses) + &delta * xi;
            (delta.transpose() * r * scale).iter().copied().collect()
        }
        WeightLayout::PerAction { n_actions } => {
            let mut grad = vec![0.0; n_actions * ws.k];
            for t in 0..ws.t_len {
                let delta = ws.residuals[t];
                let (a, ap) = (ws.actions[t], ws.next_actions[t]);
                for k in 0..ws.k {
                    grad[ap * ws.k + k] += delta * ws.discount * ws.next_kernel(t, k);
                    grad[a * ws.k + k] -= delta * ws.kernel(t, k);
                }
            }
            grad.iter_mut().for_each(|g| *g *= scale);
            grad
        }
    }
}

/// Euclidean gradient with respect to each mean: `4 ξ_k C_k⁻¹ d̄_k`.
pub fn grad_means(ws: &GradWorkspace, model: &GmmQf) -> Vec<DVector<f64>> {
    (0..ws.k)
        .map(|k| &ws.inv_covs[k] * &ws.mean_agg[k] * (4.0 * ws.outer_factor(model, k)))
        .collect()
}

/// Riemannian gradient with respect to each covariance under `metric`:
/// `2 ξ_k B̄_k` (affine-invariant) or `4 ξ_k (C_k⁻¹ B̄_k + B̄_k C_k⁻¹)` (Bures-Wasserstein).
pub fn grad_covs(ws: &GradWorkspace, model: &GmmQf, metric: MetricKind) -> Vec<SymTangent> {
    (0..ws.k)
        .map(|k| {
            let f = ws.outer_factor(model, k);
            let b = ws.cov_agg[k].as_matrix();
            let m = match metric {
                MetricKind::AffineInvariant => b * (2.0 * f),
                MetricKind::BuresWasserstein => {
                    let inv = &ws.inv_covs[k];
                    (inv * b + b * inv) * (4.0 * f)
                }
            };
            SymTangent::from_symmetric((&m + m.transpose()) * 0.5)
        })
        .collect()
}

/// The full Riemannian gradient on the product manifold.
pub fn full_gradient(
    model: &GmmQf,
    batch: &TransitionBatch,
    discount: f64,
    metric: MetricKind,
) -> Result<ProductTangent, ModelError> {
    let ws = build_workspace(model, batch, discount)?;
    Ok(gradient_from_workspace(&ws, model, metric))
}

pub fn gradient_from_workspace(
    ws: &GradWorkspace,
    model: &GmmQf,
    metric: MetricKind,
) -> ProductTangent {
    ProductTangent {
        weights: grad_weights(ws, model),
        means: grad_means(ws, model),
        covs: grad_covs(ws, model, metric),
    }
}
