//! Bridge-free stand-in for the model: a fixed linear readout over one location.

use ndarray::{Array1, Array2, ArrayView1, Axis};

use super::{EvalError, Result};
use crate::store::{ActivationDataset, AttributeSchema};

/// Maps an activation (plus its prompt labels) to a logit difference and a prediction.
pub trait Readout {
    fn logit_diff(&self, a: ArrayView1<f64>, schema: &AttributeSchema, labels: &[u16]) -> f64;
    fn predict(&self, a: ArrayView1<f64>) -> u32;
}

/// `logits = W a + b`, one class per value of a target attribute.
///
/// Built as a nearest-centroid classifier, so the predicted class of a clean
/// activation is the value whose conditional mean is closest.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSurrogate {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub classes: Vec<String>,
    pub target: String,
    /// Attribute naming the competing class (e.g. `S` against `IO`); when absent the
    /// strongest other class competes.
    pub foil: Option<String>,
}

impl LinearSurrogate {
    pub fn fit_centroids(dataset: &ActivationDataset, target: &str, foil: Option<&str>) -> Result<Self> {
        let attr = dataset.schema.index_of(target)?;
        if let Some(f) = foil {
            dataset.schema.index_of(f)?;
        }
        let classes = dataset.schema.attributes[attr].values.clone();
        let a = dataset.to_array();
        let mut sums = Array2::<f64>::zeros((classes.len(), dataset.dim));
        let mut counts = vec![0usize; classes.len()];
        for (i, row) in a.axis_iter(Axis(0)).enumerate() {
            let c = dataset.label(i, attr);
            sums.row_mut(c).scaled_add(1.0, &row);
            counts[c] += 1;
        }
        let global = a.mean_axis(Axis(0)).ok_or(EvalError::Empty)?;
        for (c, mut row) in sums.axis_iter_mut(Axis(0)).enumerate() {
            if counts[c] == 0 {
                row.assign(&global);
            } else {
                row /= counts[c] as f64;
            }
        }
        let bias = sums.rows().into_iter().map(|c| -0.5 * c.dot(&c)).collect();
        Ok(Self {
            weights: sums,
            bias,
            classes,
            target: target.to_string(),
            foil: foil.map(str::to_string),
        })
    }

    pub fn logits(&self, a: ArrayView1<f64>) -> Array1<f64> {
        self.weights.dot(&a) + &self.bias
    }

    fn class_of(&self, schema: &AttributeSchema, labels: &[u16], attr: &str) -> Option<usize> {
        let i = schema.index_of(attr).ok()?;
        let name = &schema.attributes[i].values[labels[i] as usize];
        self.classes.iter().position(|c| c == name)
    }

    /// Squared distance from `a` to the activation of the counterfactual prompt.
    pub fn distance_to_counterfactual(a: ArrayView1<f64>, counterfactual: ArrayView1<f64>) -> f64 {
        (&a - &counterfactual).mapv(|x| x * x).sum()
    }
}

fn argmax(xs: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl Readout for LinearSurrogate {
    fn logit_diff(&self, a: ArrayView1<f64>, schema: &AttributeSchema, labels: &[u16]) -> f64 {
        let logits = self.logits(a);
        let Some(target) = self.class_of(schema, labels, &self.target) else {
            return 0.0;
        };
        let foil = match &self.foil {
            Some(f) => self.class_of(schema, labels, f),
            None => (0..logits.len())
                .filter(|&c| c != target)
                .max_by(|&x, &y| logits[x].total_cmp(&logits[y])),
        };
        match foil {
            Some(f) => logits[target] - logits[f],
            None => 0.0,
        }
    }

    fn predict(&self, a: ArrayView1<f64>) -> u32 {
        argmax(&self.logits(a)) as u32
    }
}
