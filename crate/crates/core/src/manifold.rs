//! Geometry of the parameter space.
//!
//! Points of the SPD manifold, their symmetric tangents, the affine-invariant and
//! Bures-Wasserstein metrics, the Lyapunov solver behind the latter, and the product
//! metric/retraction over `(weights, means, covariances)` used by the optimizer.
//!
//! All matrix functions (inverse, square root, exponential) go through the symmetric
//! eigendecomposition. Dimensions are tiny (at most 5 in the shipped environments), so
//! robustness matters more than speed here.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gmmqf::GmmQf;

/// Relative eigenvalue floor accepted by [`SpdMatrix::new`].
pub const SPD_RELATIVE_TOL: f64 = 1e-12;

/// Absolute eigenvalue floor enforced after every exponential map.
pub const EXP_EIGEN_FLOOR: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ManifoldError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix has non-finite entries")]
    NotFinite,
    #[error("matrix is not positive definite (eigenvalues in [{min}, {max}])")]
    NotPositiveDefinite { min: f64, max: f64 },
    #[error("tangent does not match the model: {0}")]
    ShapeMismatch(String),
    #[error("retraction step must be non-negative, got {0}")]
    NegativeStep(f64),
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn check_square(m: &DMatrix<f64>) -> Result<(), ManifoldError> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(ManifoldError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(ManifoldError::NotFinite);
    }
    Ok(())
}

/// `U f(Λ) Uᵀ` for a symmetric eigendecomposition.
fn spectral_map(eig: &SymmetricEigen<f64, nalgebra::Dyn>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let u = &eig.eigenvectors;
    let mapped =
        DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|&l| f(l)));
    let scaled = u * DMatrix::from_diagonal(&mapped);
    symmetrize(&(scaled * u.transpose()))
}

/// A symmetric positive-definite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    mat: DMatrix<f64>,
}

impl SpdMatrix {
    /// Symmetrizes `m` and rejects it unless its smallest eigenvalue exceeds
    /// `SPD_RELATIVE_TOL` times the largest.
    pub fn new(m: DMatrix<f64>) -> Result<Self, ManifoldError> {
        check_square(&m)?;
        let mat = symmetrize(&m);
        let eig = SymmetricEigen::new(mat.clone());
        let min = eig.eigenvalues.min();
        let max = eig.eigenvalues.max();
        if !(min > 0.0 && min > SPD_RELATIVE_TOL * max) {
            return Err(ManifoldError::NotPositiveDefinite { min, max });
        }
        Ok(Self { mat })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mat: DMatrix::identity(dim, dim),
        }
    }

    pub fn scaled_identity(dim: usize, scale: f64) -> Result<Self, ManifoldError> {
        Self::new(DMatrix::identity(dim, dim) * scale)
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self, ManifoldError> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    /// Symmetrizes and floors the spectrum at `max(EXP_EIGEN_FLOOR, 2·SPD_RELATIVE_TOL·λ_max)`.
    /// Returns the repaired matrix and whether any eigenvalue had to be raised.
    pub fn repaired(m: &DMatrix<f64>) -> Result<(Self, bool), ManifoldError> {
        check_square(m)?;
        let mat = symmetrize(m);
        let eig = SymmetricEigen::new(mat.clone());
        let max = eig.eigenvalues.max();
        let floor = EXP_EIGEN_FLOOR.max(2.0 * SPD_RELATIVE_TOL * max);
        if eig.eigenvalues.min() >= floor {
            return Ok((Self { mat }, false));
        }
        let fixed = spectral_map(&eig, |l| l.max(floor));
        Ok((Self { mat: fixed }, true))
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.mat
    }

    pub fn eigen(&self) -> SymmetricEigen<f64, nalgebra::Dyn> {
        SymmetricEigen::new(self.mat.clone())
    }

    pub fn eigenvalues(&self) -> DVector<f64> {
        self.eigen().eigenvalues
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        spectral_map(&self.eigen(), |l| 1.0 / l)
    }

    /// `(C^{1/2}, C^{-1/2})`.
    pub fn sqrt_pair(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let eig = self.eigen();
        (
            spectral_map(&eig, f64::sqrt),
            spectral_map(&eig, |l| 1.0 / l.sqrt()),
        )
    }
}

/// A symmetric matrix, i.e. an element of the tangent space of the SPD manifold.
#[derive(Debug, Clone, PartialEq)]
pub struct SymTangent {
    mat: DMatrix<f64>,
}

impl SymTangent {
    pub fn new(m: DMatrix<f64>) -> Result<Self, ManifoldError> {
        check_square(&m)?;
        Ok(Self {
            mat: symmetrize(&m),
        })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            mat: DMatrix::zeros(dim, dim),
        }
    }

    pub(crate) fn from_symmetric(mat: DMatrix<f64>) -> Self {
        debug_assert_eq!(mat.nrows(), mat.ncols());
        Self { mat }
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { mat: &self.mat * s }
    }

    pub fn is_zero(&self) -> bool {
        self.mat.iter().all(|&v| v == 0.0)
    }

    /// Frobenius inner product `tr(self · other)`.
    pub fn frobenius_dot(&self, other: &Self) -> f64 {
        self.mat.dot(&other.mat)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.mat.norm()
    }
}

/// Riemannian metric on the SPD factor of the parameter manifold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MetricKind {
    #[serde(rename = "affi")]
    AffineInvariant,
    #[serde(rename = "bw")]
    BuresWasserstein,
}

impl MetricKind {
    pub const ALL: [MetricKind; 2] = [MetricKind::AffineInvariant, MetricKind::BuresWasserstein];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::AffineInvariant => "affi",
            MetricKind::BuresWasserstein => "bw",
        }
    }
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for MetricKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "affi" => Ok(MetricKind::AffineInvariant),
            "bw" => Ok(MetricKind::BuresWasserstein),
            other => Err(format!(
                "unknown metric {other:?} (expected \"affi\" or \"bw\")"
            )),
        }
    }
}

fn check_dims(c: &SpdMatrix, g: &SymTangent) -> Result<(), ManifoldError> {
    if c.dim() != g.dim() {
        return Err(ManifoldError::DimensionMismatch {
            expected: c.dim(),
            found: g.dim(),
        });
    }
    Ok(())
}

/// Solves `c·L + L·c = g` for the symmetric `L`.
pub fn lyapunov_solve(c: &SpdMatrix, g: &SymTangent) -> Result<SymTangent, ManifoldError> {
    check_dims(c, g)?;
    Ok(lyapunov_with(&c.eigen(), g.as_matrix()))
}

fn lyapunov_with(eig: &SymmetricEigen<f64, nalgebra::Dyn>, g: &DMatrix<f64>) -> SymTangent {
    let u = &eig.eigenvectors;
    let lam = &eig.eigenvalues;
    let mut rotated = u.transpose() * g * u;
    let n = lam.len();
    for i in 0..n {
        for j in 0..n {
            rotated[(i, j)] /= lam[i] + lam[j];
        }
    }
    SymTangent::from_symmetric(symmetrize(&(u * rotated * u.transpose())))
}

/// Inner product of two tangents at `c` under `metric`.
pub fn spd_inner(
    c: &SpdMatrix,
    g1: &SymTangent,
    g2: &SymTangent,
    metric: MetricKind,
) -> Result<f64, ManifoldError> {
    check_dims(c, g1)?;
    check_dims(c, g2)?;
    Ok(match metric {
        MetricKind::AffineInvariant => {
            let inv = c.inverse();
            let a = &inv * g1.as_matrix();
            let b = &inv * g2.as_matrix();
            (a * b).trace()
        }
        MetricKind::BuresWasserstein => {
            let l = lyapunov_with(&c.eigen(), g1.as_matrix());
            0.5 * l.frobenius_dot(g2)
        }
    })
}

/// Result of an exponential map on the SPD manifold.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdExp {
    pub point: SpdMatrix,
    /// Some eigenvalue fell below the floor and was raised.
    pub repaired: bool,
}

/// Exponential map at `c` applied to `g`.
pub fn spd_exp(c: &SpdMatrix, g: &SymTangent, metric: MetricKind) -> Result<SpdExp, ManifoldError> {
    check_dims(c, g)?;
    if g.is_zero() {
        return Ok(SpdExp {
            point: c.clone(),
            repaired: false,
        });
    }
    let raw = match metric {
        MetricKind::AffineInvariant => {
            let (sqrt, inv_sqrt) = c.sqrt_pair();
            let inner = symmetrize(&(&inv_sqrt * g.as_matrix() * &inv_sqrt));
            let expd = spectral_map(&SymmetricEigen::new(inner), f64::exp);
            &sqrt * expd * &sqrt
        }
        MetricKind::BuresWasserstein => {
            let l = lyapunov_with(&c.eigen(), g.as_matrix());
            let shifted = l.mat + DMatrix::identity(c.dim(), c.dim());
            &shifted * c.as_matrix() * &shifted
        }
    };
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(ManifoldError::NotFinite);
    }
    let (point, repaired) = SpdMatrix::repaired(&raw)?;
    Ok(SpdExp { point, repaired })
}

/// A tangent vector of the full parameter manifold, laid out like [`GmmQf`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProductTangent {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<SymTangent>,
}

impl ProductTangent {
    pub fn zeros_like(model: &GmmQf) -> Self {
        Self {
            weights: vec![0.0; model.weights().len()],
            means: vec![DVector::zeros(model.dim()); model.k()],
            covs: vec![SymTangent::zeros(model.dim()); model.k()],
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            weights: self.weights.iter().map(|w| w * s).collect(),
            means: self.means.iter().map(|m| m * s).collect(),
            covs: self.covs.iter().map(|c| c.scaled(s)).collect(),
        }
    }

    pub fn check_shape(&self, model: &GmmQf) -> Result<(), ManifoldError> {
        let bad = |what: String| Err(ManifoldError::ShapeMismatch(what));
        if self.weights.len() != model.weights().len() {
            return bad(format!(
                "{} weight entries, model has {}",
                self.weights.len(),
                model.weights().len()
            ));
        }
        if self.means.len() != model.k() || self.covs.len() != model.k() {
            return bad(format!(
                "{} components, model has {}",
                self.means.len(),
                model.k()
            ));
        }
        if self.means.iter().any(|m| m.len() != model.dim())
            || self.covs.iter().any(|c| c.dim() != model.dim())
        {
            return bad(format!("component dimension differs from {}", model.dim()));
        }
        Ok(())
    }

    /// Concatenation of every entry (covariances row-major), for Euclidean comparisons.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.weights.clone();
        for m in &self.means {
            out.extend(m.iter());
        }
        for c in &self.covs {
            let m = c.as_matrix();
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    out.push(m[(i, j)]);
                }
            }
        }
        out
    }
}

/// Product metric: Euclidean on weights and means, `metric` on each covariance.
pub fn product_inner(
    model: &GmmQf,
    t1: &ProductTangent,
    t2: &ProductTangent,
    metric: MetricKind,
) -> Result<f64, ManifoldError> {
    t1.check_shape(model)?;
    t2.check_shape(model)?;
    let mut acc: f64 = t1.weights.iter().zip(&t2.weights).map(|(a, b)| a * b).sum();
    for (a, b) in t1.means.iter().zip(&t2.means) {
        acc += a.dot(b);
    }
    for ((c, a), b) in model.covs().iter().zip(&t1.covs).zip(&t2.covs) {
        acc += spd_inner(c, a, b, metric)?;
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retraction {
    pub point: GmmQf,
    /// Number of covariance blocks whose exponential map needed an eigenvalue repair.
    pub repaired_blocks: usize,
}

/// Moves `model` by `step · t`: additive on weights and means, exponential map on covariances.
pub fn retract(
    model: &GmmQf,
    t: &ProductTangent,
    step: f64,
    metric: MetricKind,
) -> Result<Retraction, ManifoldError> {
    if step.is_nan() || step < 0.0 {
        return Err(ManifoldError::NegativeStep(step));
    }
    t.check_shape(model)?;
    if step == 0.0 {
        return Ok(Retraction {
            point: model.clone(),
            repaired_blocks: 0,
        });
    }
    let weights = model
        .weights()
        .iter()
        .zip(&t.weights)
        .map(|(w, d)| w + step * d)
        .collect();
    let means = model
        .means()
        .iter()
        .zip(&t.means)
        .map(|(m, d)| m + d * step)
        .collect();
    let mut repaired_blocks = 0;
    let mut covs = Vec::with_capacity(model.k());
    for (c, g) in model.covs().iter().zip(&t.covs) {
        let e = spd_exp(c, &g.scaled(step), metric)?;
        repaired_blocks += usize::from(e.repaired);
        covs.push(e.point);
    }
    Ok(Retraction {
        point: model.with_parameters(weights, means, covs),
        repaired_blocks,
    })
}
