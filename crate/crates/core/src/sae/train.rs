use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::{grad_with_codes, renormalize_decoder, resample_dead, Result, SaeError, SaeParams};
use crate::store::ActivationDataset;

/// ℓ₁ coefficients swept for task SAEs.
pub const TASK_LAMBDA_GRID: [f64; 4] = [0.01, 0.05, 0.1, 0.3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// ℓ₁ coefficient, applied after input normalization.
    pub lambda: f64,
    pub lr: f64,
    /// After the ℓ₁ warm-up the learning rate decays linearly to `lr * lr_end_factor`
    /// at the last step.
    pub lr_end_factor: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Resample never-active features every this many epochs; 0 disables.
    pub resample_period: usize,
    /// Ramp the ℓ₁ coefficient linearly over this many epochs, starting from
    /// `lambda_warmup_start * lambda`; 0 disables.
    pub lambda_warmup_epochs: usize,
    pub lambda_warmup_start: f64,
    pub freeze_decoder: bool,
    /// Keep the decoder bias at its initial value. With `init_decoder_bias_to_mean`
    /// off it stays at zero.
    pub freeze_decoder_bias: bool,
    pub init_decoder_bias_to_mean: bool,
    pub seed: u64,
    /// Rescale inputs so their mean ℓ₂ norm equals this; `None` trains on raw inputs.
    pub input_norm_target: Option<f64>,
    /// Hidden size; defaults to `expansion * n`.
    pub hidden_size: Option<usize>,
    pub expansion: usize,
    pub adam: AdamConfig,
    /// Features active on a smaller fraction of examples count as dead in metrics.
    /// Zero means "never active".
    pub dead_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            lr: 1e-3,
            lr_end_factor: 1.0,
            batch_size: 1024,
            epochs: 1000,
            resample_period: 500,
            lambda_warmup_epochs: 0,
            lambda_warmup_start: 0.0,
            freeze_decoder: false,
            freeze_decoder_bias: false,
            init_decoder_bias_to_mean: true,
            seed: 0,
            input_norm_target: Some(1.0),
            hidden_size: None,
            expansion: 16,
            adam: AdamConfig::default(),
            dead_threshold: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(SaeError::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.lr > 0.0) {
            return Err(SaeError::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.lr_end_factor > 0.0 && self.lr_end_factor <= 1.0) {
            return Err(SaeError::Config(format!("lr_end_factor must be in (0, 1], got {}", self.lr_end_factor)));
        }
        if !(0.0..=1.0).contains(&self.lambda_warmup_start) {
            return Err(SaeError::Config("lambda_warmup_start must be in [0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(SaeError::Config("batch_size must be >= 1".into()));
        }
        if let Some(t) = self.input_norm_target {
            if !(t > 0.0) {
                return Err(SaeError::Config("input_norm_target must be > 0".into()));
            }
        }
        if self.hidden_size == Some(0) || (self.hidden_size.is_none() && self.expansion == 0) {
            return Err(SaeError::Config("hidden size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn hidden_for(&self, n: usize) -> usize {
        self.hidden_size.unwrap_or(self.expansion * n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SaeMetrics {
    /// Mean number of active features per example.
    pub l0: f64,
    /// Mean `||a - â||²` per example.
    pub mse: f64,
    /// Mean `||f||₁` per example.
    pub l1: f64,
    pub frac_variance_explained: f64,
    pub dead_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: SaeParams,
    pub history: Vec<SaeMetrics>,
    /// Multiplier applied to raw inputs before they reach the SAE.
    pub input_scale: f64,
    pub resampled: usize,
}

impl TrainOutput {
    pub fn scale_inputs(&self, data: ArrayView2<f64>) -> Array2<f64> {
        &data * self.input_scale
    }
}

fn total_variance(data: ArrayView2<f64>) -> f64 {
    let mean = data.mean_axis(Axis(0)).unwrap();
    (&data - &mean).mapv(|x| x * x).sum()
}

pub fn train_sae(dataset: &ActivationDataset, config: &TrainConfig) -> Result<TrainOutput> {
    train_sae_on(dataset.to_array().view(), config)
}

/// Minibatch Adam on the mean per-example loss, decoder renormalized after every step.
pub fn train_sae_on(data: ArrayView2<f64>, config: &TrainConfig) -> Result<TrainOutput> {
    config.validate()?;
    let (rows, n) = data.dim();
    if rows == 0 {
        return Err(SaeError::EmptyBatch);
    }
    let input_scale = match config.input_norm_target {
        Some(target) => {
            let mean_norm = data
                .rows()
                .into_iter()
                .map(|r| r.dot(&r).sqrt())
                .sum::<f64>()
                / rows as f64;
            if mean_norm > 0.0 {
                target / mean_norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    let x = &data * input_scale;
    let m = config.hidden_for(n);
    let mut params = SaeParams::init(n, m, config.seed);
    if config.init_decoder_bias_to_mean {
        params.b_dec = x.mean_axis(Axis(0)).unwrap();
    }

    let mut opt = Adam::new(
        config.lr,
        config.adam,
        &[&[m, n], &[m], &[n, m], &[n]],
    );
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..rows).collect();
    let variance = total_variance(x.view());
    let mut since_resample = vec![0u64; m];
    let mut history = Vec::with_capacity(config.epochs);
    let mut resampled = 0;
    let mut last_good = params.clone();

    for epoch in 0..config.epochs {
        order.shuffle(&mut order_rng);
        let mut counts = vec![0u64; m];
        let (mut sq_err, mut l1, mut active) = (0.0, 0.0, 0u64);
        let n_batches = rows.div_ceil(config.batch_size);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let lambda = match config.lambda_warmup_epochs {
                0 => config.lambda,
                w => {
                    let ramp = ((epoch as f64 + b as f64 / n_batches as f64) / w as f64).min(1.0);
                    config.lambda * (config.lambda_warmup_start + (1.0 - config.lambda_warmup_start) * ramp)
                }
            };
            let t = epoch as f64 + b as f64 / n_batches as f64;
            let w = config.lambda_warmup_epochs.min(config.epochs) as f64;
            let progress = if config.epochs as f64 > w { ((t - w) / (config.epochs as f64 - w)).max(0.0) } else { 0.0 };
            opt.lr = config.lr * (1.0 + (config.lr_end_factor - 1.0) * progress);
            let batch = x.select(Axis(0), chunk);
            let (mut grads, codes, err) = grad_with_codes(&params, batch.view(), lambda, config.freeze_decoder)?;
            sq_err += err;
            l1 += codes.sum();
            for row in codes.rows() {
                for (j, &f) in row.iter().enumerate() {
                    if f > 0.0 {
                        counts[j] += 1;
                        active += 1;
                    }
                }
            }
            grads.scale(1.0 / chunk.len() as f64);
            opt.tick();
            opt.step(0, params.w_enc.view_mut().into_dyn(), grads.w_enc.view().into_dyn());
            opt.step(1, params.b_enc.view_mut().into_dyn(), grads.b_enc.view().into_dyn());
            if !config.freeze_decoder {
                opt.step(2, params.w_dec.view_mut().into_dyn(), grads.w_dec.view().into_dyn());
            }
            if !config.freeze_decoder_bias {
                opt.step(3, params.b_dec.view_mut().into_dyn(), grads.b_dec.view().into_dyn());
            }
            if !params.is_finite() {
                return Err(SaeError::Diverged {
                    epoch,
                    checkpoint: Box::new(last_good),
                });
            }
            renormalize_decoder(&mut params)?;
        }
        let nf = rows as f64;
        let metrics = SaeMetrics {
            l0: active as f64 / nf,
            mse: sq_err / nf,
            l1: l1 / nf,
            frac_variance_explained: if variance > 0.0 { 1.0 - sq_err / variance } else { 1.0 },
            dead_fraction: dead_count(&counts, rows, config.dead_threshold) as f64 / m as f64,
        };
        if !(metrics.mse + config.lambda * metrics.l1).is_finite() {
            return Err(SaeError::Diverged {
                epoch,
                checkpoint: Box::new(last_good),
            });
        }
        history.push(metrics);
        last_good.clone_from(&params);

        for (acc, c) in since_resample.iter_mut().zip(&counts) {
            *acc += c;
        }
        let boundary = config.resample_period > 0
            && (epoch + 1) % config.resample_period == 0
            && epoch + 1 < config.epochs;
        if boundary {
            let dead: Vec<usize> = (0..m).filter(|&j| since_resample[j] == 0).collect();
            if !dead.is_empty() {
                log::debug!("epoch {}: resampling {} dead features", epoch + 1, dead.len());
                params = resample_dead(&params, &dead, config.seed ^ ((epoch as u64 + 1) << 20))?;
                opt.reset(0, dead.iter().flat_map(|&j| (j * n)..(j * n + n)));
                opt.reset(1, dead.iter().copied());
                opt.reset(2, dead.iter().flat_map(|&j| (0..n).map(move |i| i * m + j)));
                resampled += dead.len();
            }
            since_resample.iter_mut().for_each(|c| *c = 0);
        }
    }

    Ok(TrainOutput {
        params,
        history,
        input_scale,
        resampled,
    })
}

fn dead_count(counts: &[u64], rows: usize, threshold: f64) -> usize {
    counts
        .iter()
        .filter(|&&c| c == 0 || (c as f64 / rows as f64) < threshold)
        .count()
}

/// Quality metrics of `params` on `data` (already in the SAE's input scale).
pub fn sae_metrics(params: &SaeParams, data: ArrayView2<f64>, dead_threshold: f64) -> Result<SaeMetrics> {
    let rows = data.nrows();
    if rows == 0 {
        return Err(SaeError::EmptyBatch);
    }
    params.check_input(data.ncols())?;
    let codes = params.encode(data);
    let recon = params.decode(codes.view());
    let sq_err = (&recon - &data).mapv(|x| x * x).sum();
    let variance = total_variance(data);
    let counts: Vec<u64> = codes
        .columns()
        .into_iter()
        .map(|c| c.iter().filter(|&&f| f > 0.0).count() as u64)
        .collect();
    let nf = rows as f64;
    Ok(SaeMetrics {
        l0: counts.iter().sum::<u64>() as f64 / nf,
        mse: sq_err / nf,
        l1: codes.sum() / nf,
        frac_variance_explained: if variance > 0.0 { 1.0 - sq_err / variance } else { 1.0 },
        dead_fraction: dead_count(&counts, rows, dead_threshold) as f64 / params.m() as f64,
    })
}
