//! JSON model files. Floats go through serde_json's shortest round-trip formatting, so a
//! saved model reloads bit for bit.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gmmqf::{GmmQf, ModelError, WeightLayout};
use crate::manifold::SpdMatrix;

pub const FORMAT: &str = "gmmq-model/1";

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported model format {0:?}")]
    Format(String),
    #[error("malformed model file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format: String,
    pub k: usize,
    pub dim: usize,
    pub layout: WeightLayout,
    /// Row-major `(weight rows) × K`.
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Each covariance flattened row-major.
    pub covs: Vec<Vec<f64>>,
}

impl ModelFile {
    pub fn from_model(model: &GmmQf) -> Self {
        Self {
            format: FORMAT.to_string(),
            k: model.k(),
            dim: model.dim(),
            layout: model.layout(),
            weights: model.weights().to_vec(),
            means: model
                .means()
                .iter()
                .map(|m| m.as_slice().to_vec())
                .collect(),
            covs: model
                .covs()
                .iter()
                .map(|c| c.as_matrix().transpose().as_slice().to_vec())
                .collect(),
        }
    }

    pub fn into_model(self) -> Result<GmmQf, ModelIoError> {
        if self.format != FORMAT {
            return Err(ModelIoError::Format(self.format));
        }
        let d = self.dim;
        if self.means.len() != self.k || self.covs.len() != self.k {
            return Err(ModelIoError::Malformed(format!(
                "expected {} means and covariances, found {} and {}",
                self.k,
                self.means.len(),
                self.covs.len()
            )));
        }
        if let Some(m) = self.means.iter().find(|m| m.len() != d) {
            return Err(ModelIoError::Malformed(format!(
                "mean of length {} in dimension {d}",
                m.len()
            )));
        }
        if let Some(c) = self.covs.iter().find(|c| c.len() != d * d) {
            return Err(ModelIoError::Malformed(format!(
                "covariance with {} entries in dimension {d}",
                c.len()
            )));
        }
        let means = self
            .means
            .iter()
            .map(|m| DVector::from_column_slice(m))
            .collect();
        let covs = self
            .covs
            .iter()
            .map(|c| SpdMatrix::new(DMatrix::from_row_slice(d, d, c)).map_err(ModelError::from))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(GmmQf::new(self.layout, self.weights, means, covs)?)
    }
}

pub fn to_json(model: &GmmQf) -> String {
    serde_json::to_string_pretty(&ModelFile::from_model(model)).expect("model file serializes")
}

pub fn from_json(text: &str) -> Result<GmmQf, ModelIoError> {
    serde_json::from_str::<ModelFile>(text)?.into_model()
}

pub fn save(model: &GmmQf, path: &Path) -> Result<(), ModelIoError> {
    fs::write(path, to_json(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<GmmQf, ModelIoError> {
    from_json(&fs::read_to_string(path)?)
}
