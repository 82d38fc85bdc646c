use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EvalError, Result};

/// Lower clip for normalized edit magnitudes.
pub const EDIT_MAGNITUDE_CLIP: f64 = -5.0;

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `mean(ld_intervention) / mean(ld_clean)` over the same prompts.
pub fn sufficiency_score(ld_intervention: &[f64], ld_clean: &[f64]) -> Result<f64> {
    if ld_intervention.len() != ld_clean.len() {
        return Err(EvalError::Length(ld_intervention.len(), ld_clean.len()));
    }
    if ld_clean.is_empty() {
        return Err(EvalError::Empty);
    }
    let clean = mean(ld_clean);
    if clean == 0.0 {
        return Err(EvalError::Degenerate("mean clean logit difference is zero"));
    }
    Ok(mean(ld_intervention) / clean)
}

/// `1 - |ld_mean - ld_intervention| / |ld_mean - ld_clean|`.
pub fn necessity_score(ld_clean: f64, ld_mean: f64, ld_intervention: f64) -> Result<f64> {
    let denom = (ld_mean - ld_clean).abs();
    if denom == 0.0 {
        return Err(EvalError::Degenerate("mean-ablated and clean logit differences coincide"));
    }
    Ok(1.0 - (ld_mean - ld_intervention).abs() / denom)
}

/// Fraction of prompts where the edited prediction equals the ground-truth one.
pub fn edit_agreement(pred_edited: &[u32], pred_ground_truth: &[u32]) -> Result<f64> {
    if pred_edited.len() != pred_ground_truth.len() {
        return Err(EvalError::Length(pred_edited.len(), pred_ground_truth.len()));
    }
    if pred_edited.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = pred_edited.iter().zip(pred_ground_truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred_edited.len() as f64)
}

/// `(removed - supervised) / (1 - supervised)`, clipped below at -5.
pub fn normalize_edit_magnitude(removed_weight: f64, supervised_removed_weight: f64) -> Result<f64> {
    let denom = 1.0 - supervised_removed_weight;
    if denom <= 0.0 {
        return Err(EvalError::Degenerate("supervised removed weight must be below 1"));
    }
    Ok(((removed_weight - supervised_removed_weight) / denom).max(EDIT_MAGNITUDE_CLIP))
}

/// Agreement rescaled so no intervention maps to 0 and supervised edits to 1. Unclipped.
pub fn normalize_agreement(agreement: f64, no_intervention: f64, supervised: f64) -> Result<f64> {
    let denom = supervised - no_intervention;
    if denom == 0.0 {
        return Err(EvalError::Degenerate("supervised and no-intervention agreement coincide"));
    }
    Ok((agreement - no_intervention) / denom)
}

/// Percentile bootstrap interval for the fraction of `true` entries.
pub fn bootstrap_ci(hits: &[bool], resamples: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if hits.is_empty() || resamples == 0 {
        return Err(EvalError::Empty);
    }
    let n = hits.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| (0..n).filter(|_| hits[rng.random_range(0..n)]).count() as f64 / n as f64)
        .collect();
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let at = |q: f64| stats[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    Ok((at(tail), at(1.0 - tail)))
}
