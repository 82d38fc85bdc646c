//! Supervised feature dictionaries: one vector per (attribute, value) plus a bias.
//!
//! An activation with attribute values `v_1..v_k` is reconstructed as
//! `bias + u_{1,v_1} + ... + u_{k,v_k}`; every feature enters with coefficient 1.

pub mod coupled;
mod lstsq;

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{ActivationDataset, AttributeSchema, StoreError};

pub use coupled::{
    coupled_dataset, coupled_from_independent, edit_coupled, CoupledEdit, IoiLabels,
    COUPLED_IO, COUPLED_S,
};
pub use lstsq::solve_psd;

pub const DICT_MAGIC: &[u8; 8] = b"FEATDIC1";

#[derive(Debug, Error)]
pub enum DictError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("value index {index} out of range for attribute {attribute:?}")]
    InvalidValue { attribute: String, index: usize },
    #[error("expected {expected} attribute values, got {found}")]
    Arity { expected: usize, found: usize },
    #[error("old and new value are identical ({0})")]
    NoOpEdit(usize),
    #[error("dimension mismatch: expected {expected}, got {found}")]
    Dim { expected: usize, found: usize },
    #[error("dataset has zero variance")]
    ZeroVariance,
    #[error("need at least {0} rows")]
    TooFewRows(usize),
    #[error("least-squares solve failed: {0}")]
    Solver(String),
    #[error("edit request inconsistent with labels: {0}")]
    Inconsistent(String),
    #[error("malformed dictionary file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, DictError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DictKind {
    Mean,
    Mse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDictionary {
    pub schema: AttributeSchema,
    pub kind: DictKind,
    /// Global mean activation.
    pub bias: Array1<f64>,
    /// One row per (attribute, value), attributes in schema order.
    pub features: Array2<f64>,
    /// Non-fatal fitting diagnostics (e.g. values that never occur).
    pub warnings: Vec<String>,
}

impl FeatureDictionary {
    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    /// Row of `features` holding `u_{attr=value}`.
    pub fn feature_index(&self, attr: usize, value: usize) -> Result<usize> {
        let a = self
            .schema
            .attributes
            .get(attr)
            .ok_or_else(|| DictError::InvalidValue {
                attribute: format!("#{attr}"),
                index: value,
            })?;
        if value >= a.values.len() {
            return Err(DictError::InvalidValue {
                attribute: a.name.clone(),
                index: value,
            });
        }
        Ok(self.schema.value_offsets()[attr] + value)
    }

    pub fn feature(&self, attr: usize, value: usize) -> Result<ArrayView1<'_, f64>> {
        Ok(self.features.row(self.feature_index(attr, value)?))
    }

    /// `bias + sum_i u_{i, values[i]}`.
    pub fn reconstruct(&self, values: &[usize]) -> Result<Array1<f64>> {
        if values.len() != self.schema.len() {
            return Err(DictError::Arity {
                expected: self.schema.len(),
                found: values.len(),
            });
        }
        let mut out = self.bias.clone();
        for (attr, &v) in values.iter().enumerate() {
            out += &self.feature(attr, v)?;
        }
        Ok(out)
    }

    /// `a - u_{attr=old} + u_{attr=new}`.
    pub fn edit_attribute(
        &self,
        activation: ArrayView1<f64>,
        attribute: &str,
        old_value: usize,
        new_value: usize,
    ) -> Result<Array1<f64>> {
        if old_value == new_value {
            return Err(DictError::NoOpEdit(old_value));
        }
        if activation.len() != self.dim() {
            return Err(DictError::Dim {
                expected: self.dim(),
                found: activation.len(),
            });
        }
        let attr = self.schema.index_of(attribute)?;
        let delta = &self.feature(attr, new_value)? - &self.feature(attr, old_value)?;
        Ok(&activation + &delta)
    }

    /// Reconstructions of every row of `dataset`, matching attributes by name.
    pub fn reconstruct_dataset(&self, dataset: &ActivationDataset) -> Result<Array2<f64>> {
        let map = self.attribute_map(&dataset.schema)?;
        let mut out = Array2::zeros((dataset.len(), self.dim()));
        let mut values = vec![0usize; map.len()];
        for i in 0..dataset.len() {
            for (k, &src) in map.iter().enumerate() {
                values[k] = dataset.label(i, src);
            }
            out.row_mut(i).assign(&self.reconstruct(&values)?);
        }
        Ok(out)
    }

    /// For each dictionary attribute, the index of the same-named dataset attribute.
    fn attribute_map(&self, schema: &AttributeSchema) -> Result<Vec<usize>> {
        self.schema
            .attributes
            .iter()
            .map(|a| {
                let idx = schema.index_of(&a.name)?;
                if schema.attributes[idx].values.len() != a.values.len() {
                    return Err(DictError::Format(format!(
                        "attribute {:?} has {} values in the dataset but {} in the dictionary",
                        a.name,
                        schema.attributes[idx].values.len(),
                        a.values.len()
                    )));
                }
                Ok(idx)
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = DictHeader {
            version: 1,
            kind: self.kind,
            dim: self.dim(),
            schema: self.schema.clone(),
            warnings: self.warnings.clone(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| DictError::Format(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(DICT_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for x in self.features.iter().chain(self.bias.iter()) {
            out.extend_from_slice(&(*x as f32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != DICT_MAGIC {
            return Err(DictError::Format("bad magic".into()));
        }
        let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header: DictHeader = serde_json::from_slice(
            bytes
                .get(12..12 + h)
                .ok_or_else(|| DictError::Format("truncated header".into()))?,
        )
        .map_err(|e| DictError::Format(e.to_string()))?;
        header.schema.validate()?;
        let s = header.schema.total_values();
        let need = (s + 1) * header.dim * 4;
        let payload = &bytes[12 + h..];
        if payload.len() < need {
            return Err(DictError::Format("truncated float block".into()));
        }
        let floats: Vec<f64> = payload[..need]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let features = Array2::from_shape_vec((s, header.dim), floats[..s * header.dim].to_vec())
            .map_err(|e| DictError::Format(e.to_string()))?;
        let bias = Array1::from(floats[s * header.dim..].to_vec());
        Ok(Self {
            schema: header.schema,
            kind: header.kind,
            bias,
            features,
            warnings: header.warnings,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct DictHeader {
    version: u32,
    kind: DictKind,
    dim: usize,
    schema: AttributeSchema,
    #[serde(default)]
    warnings: Vec<String>,
}

fn global_mean(dataset: &ActivationDataset) -> Array1<f64> {
    let mut mean = Array1::<f64>::zeros(dataset.dim);
    for i in 0..dataset.len() {
        for (m, &x) in mean.iter_mut().zip(dataset.row(i)) {
            *m += x as f64;
        }
    }
    mean / dataset.len() as f64
}

/// Feature for `a_i = v` is the conditional mean of rows with `a_i = v`, minus the global mean.
pub fn fit_mean_dictionary(dataset: &ActivationDataset) -> FeatureDictionary {
    let d = dataset.dim;
    let bias = global_mean(dataset);
    let schema = dataset.schema.clone();
    let offsets = schema.value_offsets();
    let s = schema.total_values();
    let mut sums = Array2::<f64>::zeros((s, d));
    let mut counts = vec![0usize; s];
    for i in 0..dataset.len() {
        let row = dataset.row(i);
        for (attr, &off) in offsets.iter().enumerate() {
            let idx = off + dataset.label(i, attr);
            counts[idx] += 1;
            for (acc, &x) in sums.row_mut(idx).iter_mut().zip(row) {
                *acc += x as f64;
            }
        }
    }
    let mut warnings = Vec::new();
    for (attr, a) in schema.attributes.iter().enumerate() {
        for (v, name) in a.values.iter().enumerate() {
            let idx = offsets[attr] + v;
            let mut row = sums.row_mut(idx);
            if counts[idx] == 0 {
                let msg = format!("value {name:?} of attribute {:?} never occurs", a.name);
                log::warn!("{msg}; feature set to zero");
                warnings.push(msg);
                row.fill(0.0);
            } else {
                row /= counts[idx] as f64;
                row -= &bias;
            }
        }
    }
    FeatureDictionary {
        schema,
        kind: DictKind::Mean,
        bias,
        features: sums,
        warnings,
    }
}

/// `C^T C` and `C^T (A - mean)` for the concatenated one-hot design `C`.
pub(crate) fn indicator_normal_equations(
    dataset: &ActivationDataset,
    bias: &Array1<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let offsets = dataset.schema.value_offsets();
    let s = dataset.schema.total_values();
    let d = dataset.dim;
    let mut gram = DMatrix::<f64>::zeros(s, s);
    let mut rhs = DMatrix::<f64>::zeros(s, d);
    let mut cols = vec![0usize; offsets.len()];
    for i in 0..dataset.len() {
        for (attr, &off) in offsets.iter().enumerate() {
            cols[attr] = off + dataset.label(i, attr);
        }
        for &p in &cols {
            for &q in &cols {
                gram[(p, q)] += 1.0;
            }
            for (j, &x) in dataset.row(i).iter().enumerate() {
                rhs[(p, j)] += x as f64 - bias[j];
            }
        }
    }
    (gram, rhs)
}

/// Heuristic ridge `1e-8 * trace(C^T C) / S`, for callers that want conditioning.
pub fn suggested_ridge(dataset: &ActivationDataset) -> f64 {
    let s = dataset.schema.total_values().max(1);
    1e-8 * (dataset.len() * dataset.schema.len()) as f64 / s as f64
}

/// Least-squares dictionary `U = (C^T C + ridge I)^+ C^T (A - mean)`.
///
/// With `ridge = 0` this is the minimum-norm least-squares solution; the design is
/// rank-deficient whenever there are two or more attributes.
pub fn fit_mse_dictionary(dataset: &ActivationDataset, ridge: f64) -> Result<FeatureDictionary> {
    if !(ridge >= 0.0) {
        return Err(DictError::Solver(format!("ridge must be >= 0, got {ridge}")));
    }
    let bias = global_mean(dataset);
    let (gram, rhs) = indicator_normal_equations(dataset, &bias);
    let (u, rank) = solve_psd(&gram, &rhs, ridge);
    if u.iter().any(|x| !x.is_finite()) {
        return Err(DictError::Solver("non-finite solution".into()));
    }
    let mut warnings = Vec::new();
    if rank < gram.nrows() && ridge == 0.0 {
        log::debug!(
            "indicator design has rank {rank} < {}; returning minimum-norm solution",
            gram.nrows()
        );
    }
    let offsets = dataset.schema.value_offsets();
    for (attr, a) in dataset.schema.attributes.iter().enumerate() {
        for v in 0..a.values.len() {
            if gram[(offsets[attr] + v, offsets[attr] + v)] == 0.0 {
                warnings.push(format!(
                    "value {:?} of attribute {:?} never occurs",
                    a.values[v], a.name
                ));
            }
        }
    }
    let features = Array2::from_shape_fn((u.nrows(), u.ncols()), |(i, j)| u[(i, j)]);
    Ok(FeatureDictionary {
        schema: dataset.schema.clone(),
        kind: DictKind::Mse,
        bias,
        features,
        warnings,
    })
}

/// `||C^T ((A - mean) - C U)||_F / ||C^T (A - mean)||_F` for a fitted dictionary.
pub fn normal_equation_residual(dict: &FeatureDictionary, dataset: &ActivationDataset) -> f64 {
    let (gram, rhs) = indicator_normal_equations(dataset, &dict.bias);
    let u = DMatrix::from_fn(dict.features.nrows(), dict.features.ncols(), |i, j| {
        dict.features[(i, j)]
    });
    let resid = &rhs - gram * u;
    let denom = rhs.norm();
    if denom == 0.0 {
        resid.norm()
    } else {
        resid.norm() / denom
    }
}

/// `(1/N) ||(A - mean) - C U||_F^2`.
pub fn mse_objective(dict: &FeatureDictionary, dataset: &ActivationDataset) -> Result<f64> {
    let recon = dict.reconstruct_dataset(dataset)?;
    let a = dataset.to_array();
    Ok((&a - &recon).mapv(|x| x * x).sum() / dataset.len() as f64)
}

/// `1 - ||A - Â||_F^2 / ||A - mean(A)||_F^2`.
pub fn variance_explained(dict: &FeatureDictionary, dataset: &ActivationDataset) -> Result<f64> {
    if dataset.len() < 2 {
        return Err(DictError::TooFewRows(2));
    }
    let a = dataset.to_array();
    let recon = dict.reconstruct_dataset(dataset)?;
    Ok(fraction_variance_explained(&a, &recon)?)
}

pub(crate) fn fraction_variance_explained(a: &Array2<f64>, recon: &Array2<f64>) -> Result<f64> {
    let mean = a.mean_axis(ndarray::Axis(0)).unwrap();
    let total: f64 = (a - &mean).mapv(|x| x * x).sum();
    if total == 0.0 {
        return Err(DictError::ZeroVariance);
    }
    let resid: f64 = (a - recon).mapv(|x| x * x).sum();
    Ok(1.0 - resid / total)
}
