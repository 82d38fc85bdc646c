//! Bridge-v1: patch requests as a JSON manifest plus one ActStore file per location,
//! responses as CSV `(prompt_id, condition, logit_diff, predicted_token_id)`.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::{EvalError, Result};
use crate::store::{read_store, write_store, ActivationDataset, AttributeSchema, LocationId};

pub const BRIDGE_VERSION: u32 = 1;
const MANIFEST: &str = "request.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CrossSectionName {
    #[serde(rename = "NM_out")]
    NmOut,
    #[serde(rename = "BNM_out")]
    BnmOut,
    #[serde(rename = "NM_qk")]
    NmQk,
    #[serde(rename = "SI_out")]
    SiOut,
    #[serde(rename = "SI_v")]
    SiV,
    #[serde(rename = "IndDT_out")]
    IndDtOut,
}

/// Locations patched together in one forward pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossSection {
    pub name: CrossSectionName,
    pub locations: Vec<LocationId>,
}

impl CrossSection {
    pub fn new(name: CrossSectionName, locations: Vec<LocationId>) -> Result<Self> {
        let cs = Self { name, locations };
        cs.validate()?;
        Ok(cs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.locations.is_empty() {
            return Err(EvalError::CrossSection("no locations".into()));
        }
        let mut seen = HashSet::new();
        for loc in &self.locations {
            if !seen.insert(*loc) {
                return Err(EvalError::CrossSection(format!("duplicate location {loc}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Clean,
    Reconstruction,
    ResidualPlusMean,
    MeanAblation,
    Edited,
    GroundTruthPatch,
}

impl Condition {
    /// Conditions the patching side computes without replacement vectors.
    pub fn needs_replacements(self) -> bool {
        !matches!(self, Condition::Clean | Condition::MeanAblation)
    }

    fn as_str(self) -> &'static str {
        match self {
            Condition::Clean => "clean",
            Condition::Reconstruction => "reconstruction",
            Condition::ResidualPlusMean => "residual_plus_mean",
            Condition::MeanAblation => "mean_ablation",
            Condition::Edited => "edited",
            Condition::GroundTruthPatch => "ground_truth_patch",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| EvalError::Response(format!("unknown condition {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestEntry {
    pub location: LocationId,
    /// ActStore file name relative to the manifest.
    pub file: String,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestManifest {
    pub version: u32,
    pub condition: Condition,
    pub cross_section: CrossSection,
    pub prompt_ids: Vec<u32>,
    pub entries: Vec<RequestEntry>,
}

/// Replacement activations for every (prompt, location) of a cross-section.
#[derive(Debug, Clone, PartialEq)]
pub struct InterventionRequest {
    pub condition: Condition,
    pub cross_section: CrossSection,
    pub prompt_ids: Vec<u32>,
    /// One `prompts x dim` matrix per location, in cross-section order. Empty for
    /// conditions that carry no vectors.
    pub replacements: Vec<Array2<f64>>,
}

impl InterventionRequest {
    /// Builds a request whose prompts and dimensions come from the per-location stores.
    pub fn from_stores(
        cross_section: CrossSection,
        condition: Condition,
        stores: &[&ActivationDataset],
        replacements: Vec<Array2<f64>>,
    ) -> Result<Self> {
        cross_section.validate()?;
        if stores.len() != cross_section.locations.len() {
            return Err(EvalError::Length(stores.len(), cross_section.locations.len()));
        }
        let prompt_ids = stores[0].prompt_ids.clone();
        if prompt_ids.is_empty() {
            return Err(EvalError::Empty);
        }
        for (store, loc) in stores.iter().zip(&cross_section.locations) {
            if store.location != *loc {
                return Err(EvalError::CrossSection(format!(
                    "store for {} supplied where {loc} expected",
                    store.location
                )));
            }
            if store.prompt_ids != prompt_ids {
                return Err(EvalError::Response(format!("prompt ids of {loc} differ from the first location")));
            }
        }
        if condition.needs_replacements() || !replacements.is_empty() {
            if replacements.len() != stores.len() {
                return Err(EvalError::Length(replacements.len(), stores.len()));
            }
            for (r, store) in replacements.iter().zip(stores) {
                if r.ncols() != store.dim || r.nrows() != prompt_ids.len() {
                    return Err(EvalError::Dim {
                        location: store.location.to_string(),
                        expected: store.dim,
                        found: r.ncols(),
                    });
                }
            }
        }
        Ok(Self {
            condition,
            cross_section,
            prompt_ids,
            replacements,
        })
    }

    /// Writes `request.json` and one store per location into `dir`; returns the manifest path.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (i, (loc, rows)) in self.cross_section.locations.iter().zip(&self.replacements).enumerate() {
            let file = format!("loc{i}_L{}H{}_{:?}_{:?}.actstore", loc.layer, loc.head, loc.site, loc.token_role);
            let ds = ActivationDataset::new(
                *loc,
                AttributeSchema::default(),
                rows.ncols(),
                rows.iter().map(|&x| x as f32).collect(),
                Vec::new(),
                self.prompt_ids.clone(),
            )?;
            write_store(&ds, dir.join(&file))?;
            entries.push(RequestEntry {
                location: *loc,
                file,
                dim: rows.ncols(),
            });
        }
        let manifest = RequestManifest {
            version: BRIDGE_VERSION,
            condition: self.condition,
            cross_section: self.cross_section.clone(),
            prompt_ids: self.prompt_ids.clone(),
            entries,
        };
        let path = dir.join(MANIFEST);
        std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
        Ok(path)
    }

    /// Reads a request from its directory or manifest path.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest_path = if path.is_dir() { path.join(MANIFEST) } else { path.to_path_buf() };
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let manifest: RequestManifest = serde_json::from_slice(&std::fs::read(&manifest_path)?)?;
        if manifest.version != BRIDGE_VERSION {
            return Err(EvalError::Response(format!("unsupported request version {}", manifest.version)));
        }
        manifest.cross_section.validate()?;
        let mut replacements = Vec::new();
        for entry in &manifest.entries {
            let ds = read_store(dir.join(&entry.file))?;
            if ds.prompt_ids != manifest.prompt_ids {
                return Err(EvalError::Response(format!("{} is not keyed by the manifest prompt ids", entry.file)));
            }
            if ds.dim != entry.dim {
                return Err(EvalError::Dim {
                    location: entry.location.to_string(),
                    expected: entry.dim,
                    found: ds.dim,
                });
            }
            replacements.push(ds.to_array());
        }
        Ok(Self {
            condition: manifest.condition,
            cross_section: manifest.cross_section,
            prompt_ids: manifest.prompt_ids,
            replacements,
        })
    }
}

/// Dictionary or SAE reconstructions, one row per store row.
pub fn reconstruction_replacements(
    store: &ActivationDataset,
    reconstruct: impl Fn(&ActivationDataset) -> Result<Array2<f64>>,
) -> Result<Array2<f64>> {
    let out = reconstruct(store)?;
    if out.dim() != (store.len(), store.dim) {
        return Err(EvalError::Dim {
            location: store.location.to_string(),
            expected: store.dim,
            found: out.ncols(),
        });
    }
    Ok(out)
}

/// `E[a] + (a - â)`: the reconstruction replaced by the mean, error term kept.
pub fn necessity_replacements(store: &ActivationDataset, reconstructions: &Array2<f64>) -> Result<Array2<f64>> {
    let a = store.to_array();
    if reconstructions.dim() != a.dim() {
        return Err(EvalError::Dim {
            location: store.location.to_string(),
            expected: a.ncols(),
            found: reconstructions.ncols(),
        });
    }
    let mean = a.mean_axis(Axis(0)).ok_or(EvalError::Empty)?;
    Ok(&a - reconstructions + &mean)
}

/// Per-prompt outcome of one patched condition.
#[derive(Debug, Clone, PartialEq)]
pub struct InterventionResult {
    pub condition: Condition,
    pub prompt_ids: Vec<u32>,
    pub logit_diff: Vec<f64>,
    pub predicted: Vec<u32>,
}

impl InterventionResult {
    pub fn mean_logit_diff(&self) -> f64 {
        self.logit_diff.iter().sum::<f64>() / self.logit_diff.len().max(1) as f64
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ResponseRow {
    prompt_id: u32,
    condition: Condition,
    logit_diff: f64,
    predicted_token_id: u32,
}

pub fn write_response(path: impl AsRef<Path>, result: &InterventionResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for i in 0..result.prompt_ids.len() {
        w.serialize(ResponseRow {
            prompt_id: result.prompt_ids[i],
            condition: result.condition,
            logit_diff: result.logit_diff[i],
            predicted_token_id: result.predicted[i],
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a response CSV. All rows must share one condition.
pub fn read_response(path: impl AsRef<Path>) -> Result<InterventionResult> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut condition = None;
    let (mut ids, mut lds, mut preds) = (Vec::new(), Vec::new(), Vec::new());
    for row in reader.deserialize::<ResponseRow>() {
        let row = row?;
        match condition {
            None => condition = Some(row.condition),
            Some(c) if c != row.condition => {
                return Err(EvalError::Response(format!("mixed conditions {c} and {}", row.condition)));
            }
            _ => {}
        }
        ids.push(row.prompt_id);
        lds.push(row.logit_diff);
        preds.push(row.predicted_token_id);
    }
    Ok(InterventionResult {
        condition: condition.ok_or(EvalError::Empty)?,
        prompt_ids: ids,
        logit_diff: lds,
        predicted: preds,
    })
}

/// Checks that every request prompt appears exactly once and returns the result
/// reordered to request order.
pub fn validate_response(request: &InterventionRequest, result: &InterventionResult) -> Result<InterventionResult> {
    if result.condition != request.condition {
        return Err(EvalError::Response(format!(
            "condition {} does not match request {}",
            result.condition, request.condition
        )));
    }
    let mut position = HashMap::new();
    for (i, &id) in result.prompt_ids.iter().enumerate() {
        if position.insert(id, i).is_some() {
            return Err(EvalError::Response(format!("prompt {id} appears more than once")));
        }
    }
    if position.len() != request.prompt_ids.len() {
        return Err(EvalError::Response(format!(
            "{} prompts answered, {} requested",
            position.len(),
            request.prompt_ids.len()
        )));
    }
    let mut out = InterventionResult {
        condition: result.condition,
        prompt_ids: Vec::with_capacity(position.len()),
        logit_diff: Vec::with_capacity(position.len()),
        predicted: Vec::with_capacity(position.len()),
    };
    for id in &request.prompt_ids {
        let &i = position
            .get(id)
            .ok_or_else(|| EvalError::Response(format!("prompt {id} missing from response")))?;
        out.prompt_ids.push(*id);
        out.logit_diff.push(result.logit_diff[i]);
        out.predicted.push(result.predicted[i]);
    }
    Ok(out)
}
