//! Sparse autoencoder: `f = ReLU(W_enc (a - b_dec) + b_enc)`, `â = W_dec f + b_dec`,
//! trained on `sum ||a - â||² + λ sum ||f||₁` with unit-norm decoder columns.

mod adam;
mod checkpoint;
mod train;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use train::{
    sae_metrics, train_sae, train_sae_on, SaeMetrics, TrainConfig, TrainOutput, TASK_LAMBDA_GRID,
};

#[derive(Debug, Error)]
pub enum SaeError {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    Dim { expected: usize, found: usize },
    #[error("decoder column {0} has zero norm")]
    ZeroColumn(usize),
    #[error("feature index {index} out of range (m = {m})")]
    IndexOutOfRange { index: usize, m: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}; last finite parameters retained")]
    Diverged {
        epoch: usize,
        checkpoint: Box<SaeParams>,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, SaeError>;

#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams {
    /// `m x n`
    pub w_enc: Array2<f64>,
    /// `m`
    pub b_enc: Array1<f64>,
    /// `n x m`; columns are dictionary features.
    pub w_dec: Array2<f64>,
    /// `n`
    pub b_dec: Array1<f64>,
}

impl SaeParams {
    /// Encoder rows uniform in `±1/√n`, decoder = normalized encoder transpose, zero biases.
    pub fn init(n: usize, m: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self {
            w_enc: Array2::zeros((m, n)),
            b_enc: Array1::zeros(m),
            w_dec: Array2::zeros((n, m)),
            b_dec: Array1::zeros(n),
        };
        for j in 0..m {
            params.init_feature(j, &mut rng);
        }
        params
    }

    fn init_feature(&mut self, j: usize, rng: &mut impl Rng) {
        let n = self.n();
        let bound = 1.0 / (n as f64).sqrt();
        loop {
            let row: Array1<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                self.w_enc.row_mut(j).assign(&row);
                self.w_dec.column_mut(j).assign(&(&row / norm));
                self.b_enc[j] = 0.0;
                return;
            }
        }
    }

    /// Input dimension.
    pub fn n(&self) -> usize {
        self.w_enc.ncols()
    }

    /// Hidden size.
    pub fn m(&self) -> usize {
        self.w_enc.nrows()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let (m, n) = self.w_enc.dim();
        if self.w_dec.dim() != (n, m) {
            return Err(SaeError::Dim {
                expected: n * m,
                found: self.w_dec.len(),
            });
        }
        if self.b_enc.len() != m {
            return Err(SaeError::Dim {
                expected: m,
                found: self.b_enc.len(),
            });
        }
        if self.b_dec.len() != n {
            return Err(SaeError::Dim {
                expected: n,
                found: self.b_dec.len(),
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.w_enc.iter().all(|x| x.is_finite())
            && self.b_enc.iter().all(|x| x.is_finite())
            && self.w_dec.iter().all(|x| x.is_finite())
            && self.b_dec.iter().all(|x| x.is_finite())
    }

    /// Hidden activations for a `B x n` batch.
    pub fn encode(&self, batch: ArrayView2<f64>) -> Array2<f64> {
        let centered = &batch - &self.b_dec;
        let mut pre = centered.dot(&self.w_enc.t());
        pre += &self.b_enc;
        pre.mapv_inplace(|x| if x > 0.0 { x } else { 0.0 });
        pre
    }

    /// Reconstructions for a `B x m` code matrix.
    pub fn decode(&self, codes: ArrayView2<f64>) -> Array2<f64> {
        let mut out = codes.dot(&self.w_dec.t());
        out += &self.b_dec;
        out
    }

    /// Dictionary features as rows (`m x n`).
    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.w_dec.t()
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        self.check_shapes()?;
        if cols != self.n() {
            return Err(SaeError::Dim {
                expected: self.n(),
                found: cols,
            });
        }
        Ok(())
    }
}

/// Hidden code and reconstruction of a single activation.
pub fn sae_forward(params: &SaeParams, a: ArrayView1<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
    params.check_input(a.len())?;
    let batch = a.insert_axis(Axis(0));
    let f = params.encode(batch);
    let a_hat = params.decode(f.view());
    Ok((f.row(0).to_owned(), a_hat.row(0).to_owned()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    /// `sum ||a - â||²` over the batch.
    pub mse_sum: f64,
    /// `sum ||f||₁` over the batch.
    pub l1_sum: f64,
    pub total: f64,
}

pub fn sae_loss(params: &SaeParams, batch: ArrayView2<f64>, lambda: f64) -> Result<LossParts> {
    if batch.nrows() == 0 {
        return Err(SaeError::EmptyBatch);
    }
    params.check_input(batch.ncols())?;
    let f = params.encode(batch);
    let a_hat = params.decode(f.view());
    let mse_sum = (&a_hat - &batch).mapv(|x| x * x).sum();
    let l1_sum = f.sum();
    Ok(LossParts {
        mse_sum,
        l1_sum,
        total: mse_sum + lambda * l1_sum,
    })
}

/// Gradients with the same shapes as [`SaeParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct SaeGrads {
    pub w_enc: Array2<f64>,
    pub b_enc: Array1<f64>,
    pub w_dec: Array2<f64>,
    pub b_dec: Array1<f64>,
}

impl SaeGrads {
    pub fn scale(&mut self, s: f64) {
        self.w_enc *= s;
        self.b_enc *= s;
        self.w_dec *= s;
        self.b_dec *= s;
    }
}

/// Analytic gradient of `sae_loss(..).total`. The ReLU subgradient at 0 is 0.
pub fn sae_grad(
    params: &SaeParams,
    batch: ArrayView2<f64>,
    lambda: f64,
    freeze_decoder: bool,
) -> Result<SaeGrads> {
    Ok(grad_with_codes(params, batch, lambda, freeze_decoder)?.0)
}

/// Gradient plus the forward-pass codes and squared reconstruction error per row.
pub(crate) fn grad_with_codes(
    params: &SaeParams,
    batch: ArrayView2<f64>,
    lambda: f64,
    freeze_decoder: bool,
) -> Result<(SaeGrads, Array2<f64>, f64)> {
    if batch.nrows() == 0 {
        return Err(SaeError::EmptyBatch);
    }
    params.check_input(batch.ncols())?;
    let centered = &batch - &params.b_dec;
    let mut pre = centered.dot(&params.w_enc.t());
    pre += &params.b_enc;
    let f = pre.mapv(|x| if x > 0.0 { x } else { 0.0 });
    let mut resid = f.dot(&params.w_dec.t());
    resid += &params.b_dec;
    resid -= &batch;
    let sq_err = resid.iter().map(|x| x * x).sum();

    // d total / d â = 2 (â - a)
    let d_out = resid * 2.0;
    let w_dec = if freeze_decoder {
        Array2::zeros(params.w_dec.raw_dim())
    } else {
        d_out.t().dot(&f)
    };
    let mut d_pre = d_out.dot(&params.w_dec);
    Zip::from(&mut d_pre).and(&pre).for_each(|g, &p| {
        *g = if p > 0.0 { *g + lambda } else { 0.0 };
    });
    let w_enc = d_pre.t().dot(&centered);
    let b_enc = d_pre.sum_axis(Axis(0));
    let b_dec = d_out.sum_axis(Axis(0)) - b_enc.dot(&params.w_enc);
    Ok((
        SaeGrads {
            w_enc,
            b_enc,
            w_dec,
            b_dec,
        },
        f,
        sq_err,
    ))
}

/// Rescales every decoder column to unit norm. The encoder is untouched.
pub fn renormalize_decoder(params: &mut SaeParams) -> Result<()> {
    for (j, col) in params.w_dec.columns().into_iter().enumerate() {
        if col.dot(&col) == 0.0 {
            return Err(SaeError::ZeroColumn(j));
        }
    }
    for mut col in params.w_dec.columns_mut() {
        let norm = col.dot(&col).sqrt();
        col /= norm;
    }
    Ok(())
}

/// Re-draws encoder row, encoder bias and decoder column of each listed feature
/// from the initialization distribution. Everything else is left bit-identical.
pub fn resample_dead(params: &SaeParams, dead: &[usize], seed: u64) -> Result<SaeParams> {
    let m = params.m();
    if let Some(&index) = dead.iter().find(|&&j| j >= m) {
        return Err(SaeError::IndexOutOfRange { index, m });
    }
    let mut out = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &j in dead {
        out.init_feature(j, &mut rng);
    }
    Ok(out)
}
