//! Causal role of interpretable features: ablate features by their best F1 and score
//! the result with the sufficiency and necessity formulas.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::scores::{necessity_score, sufficiency_score};
use super::surrogate::Readout;
use super::{EvalError, Result};
use crate::interp::Explanation;
use crate::sae::SaeParams;
use crate::store::ActivationDataset;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuitePoint {
    pub threshold: f64,
    /// Reconstruction with every feature of best F1 `< threshold` subtracted.
    pub sufficiency: f64,
    /// Activation with every feature of best F1 `>= threshold` subtracted.
    pub necessity: f64,
    pub n_interpretable: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub clean_logit_diff: f64,
    pub mean_ablation_logit_diff: f64,
    pub reconstruction_sufficiency: f64,
    /// Necessity of the reconstruction, i.e. patching `mean + (a - â)`.
    pub reconstruction_necessity: f64,
    pub points: Vec<SuitePoint>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Runs the threshold sweep on one location under `readout`.
///
/// `input_scale` is the factor the SAE was trained with; ablations happen in raw
/// activation space.
pub fn interp_causal_suite(
    readout: &impl Readout,
    dataset: &ActivationDataset,
    params: &SaeParams,
    input_scale: f64,
    explanations: &[Explanation],
    thresholds: &[f64],
) -> Result<SuiteReport> {
    if dataset.dim != params.n() {
        return Err(EvalError::Dim {
            location: dataset.location.to_string(),
            expected: params.n(),
            found: dataset.dim,
        });
    }
    let m = params.m();
    let mut best_f1 = vec![0.0; m];
    for e in explanations {
        if e.feature < m {
            best_f1[e.feature] = e.f1;
        }
    }
    let a = dataset.to_array();
    let codes = params.encode((&a * input_scale).view());
    // Raw-space contribution of each feature: f_j u_j / scale.
    let contributions = |mask: &dyn Fn(usize) -> bool| -> Array2<f64> {
        let mut masked = codes.clone();
        for (j, mut col) in masked.axis_iter_mut(Axis(1)).enumerate() {
            if !mask(j) {
                col.fill(0.0);
            }
        }
        masked.dot(&params.w_dec.t()) / input_scale
    };
    let recon = contributions(&|_| true) + &(&params.b_dec / input_scale);
    let mean_a: Array1<f64> = a.mean_axis(Axis(0)).ok_or(EvalError::Empty)?;

    let lds = |rows: &Array2<f64>| -> Vec<f64> {
        (0..dataset.len())
            .map(|i| readout.logit_diff(rows.row(i), &dataset.schema, dataset.row_labels(i)))
            .collect()
    };
    let clean = lds(&a);
    let mean_rows = Array2::from_shape_fn(a.dim(), |(_, j)| mean_a[j]);
    let ablated = lds(&mean_rows);
    let (clean_mean, ablated_mean) = (mean(&clean), mean(&ablated));
    let recon_ld = lds(&recon);
    let resid_plus_mean = &a - &recon + &mean_a;

    let mut points = Vec::with_capacity(thresholds.len());
    for &t in thresholds {
        let low = contributions(&|j| best_f1[j] < t);
        let high = contributions(&|j| best_f1[j] >= t);
        let suff = lds(&(&recon - &low));
        let nec = lds(&(&a - &high));
        points.push(SuitePoint {
            threshold: t,
            sufficiency: sufficiency_score(&suff, &clean)?,
            necessity: necessity_score(clean_mean, ablated_mean, mean(&nec))?,
            n_interpretable: best_f1.iter().filter(|&&f| f >= t).count(),
        });
    }
    Ok(SuiteReport {
        clean_logit_diff: clean_mean,
        mean_ablation_logit_diff: ablated_mean,
        reconstruction_sufficiency: sufficiency_score(&recon_ld, &clean)?,
        reconstruction_necessity: necessity_score(clean_mean, ablated_mean, mean(&lds(&resid_plus_mean)))?,
        points,
    })
}
