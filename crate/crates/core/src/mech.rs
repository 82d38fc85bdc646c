//! Feature-level decomposition of attention scores and of direct effects of upstream
//! head outputs on a downstream query, with LayerNorm linearized at a fixed scale.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::TokenRole;

pub const BUNDLE_MAGIC: &[u8; 8] = b"WBUNDLE1";

#[derive(Debug, Error)]
pub enum MechError {
    #[error("dimension mismatch in {what}: expected {expected}, got {found}")]
    Dim {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("LayerNorm scale must be positive, got {0}")]
    Scale(f64),
    #[error("no weights for {0}")]
    Missing(String),
    #[error("malformed weight bundle: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MechError>;

fn dim(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(MechError::Dim { what, expected, found });
    }
    Ok(())
}

/// Entry `(i, j)` is `q_iᵀ k_j / √d_head`; rows of `q_terms` and `k_terms` are the terms.
pub fn attention_score_decomposition(
    q_terms: ArrayView2<f64>,
    k_terms: ArrayView2<f64>,
    d_head: usize,
) -> Result<Array2<f64>> {
    dim("query terms", d_head, q_terms.ncols())?;
    dim("key terms", d_head, k_terms.ncols())?;
    Ok(q_terms.dot(&k_terms.t()) / (d_head as f64).sqrt())
}

/// Parameters and dataset statistics of one pre-attention LayerNorm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LnStats {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    /// Dataset-average standard deviation of the residual stream.
    pub sigma_hat: f64,
    pub eps: f64,
    /// Subtract the per-example coordinate mean (standard LayerNorm).
    pub center: bool,
}

impl LnStats {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_hat > 0.0) {
            return Err(MechError::Scale(self.sigma_hat));
        }
        dim("LayerNorm beta", self.gamma.len(), self.beta.len())
    }

    /// Divisor `√(σ² + ε)` for the chosen scale.
    pub fn divisor(&self, mode: ScaleMode) -> Result<f64> {
        let sigma = match mode {
            ScaleMode::DatasetMean => self.sigma_hat,
            ScaleMode::Exact(s) => s,
        };
        if !(sigma > 0.0) {
            return Err(MechError::Scale(sigma));
        }
        Ok((sigma * sigma + self.eps).sqrt())
    }

    /// `γ ⊙ centered(x) / divisor`, without `β`.
    fn linear(&self, x: ArrayView1<f64>, divisor: f64) -> Array1<f64> {
        let mut out = x.to_owned();
        if self.center {
            let mu = out.mean().unwrap_or(0.0);
            out -= mu;
        }
        out * &self.gamma / divisor
    }

    /// Exact LayerNorm of `r` with its own statistics.
    pub fn apply(&self, r: ArrayView1<f64>) -> Array1<f64> {
        let mu = if self.center { r.mean().unwrap_or(0.0) } else { 0.0 };
        let var = r.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / r.len() as f64;
        (&r - mu) / (var + self.eps).sqrt() * &self.gamma + &self.beta
    }
}

/// Per-example standard deviation of a residual vector, as LayerNorm computes it.
pub fn residual_sigma(r: ArrayView1<f64>, center: bool) -> f64 {
    let mu = if center { r.mean().unwrap_or(0.0) } else { 0.0 };
    (r.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / r.len() as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Linearize with the dataset-average scale `σ̂`.
    DatasetMean,
    /// Use this example's own residual standard deviation.
    Exact(f64),
}

/// `W_Q (γ ⊙ centered(W_O z) / √(σ² + ε))`.
///
/// `w_o` is `d_model x d_head`, `w_q` is `d_head x d_model`.
pub fn direct_effect(
    z: ArrayView1<f64>,
    w_o: ArrayView2<f64>,
    w_q: ArrayView2<f64>,
    ln: &LnStats,
    mode: ScaleMode,
) -> Result<Array1<f64>> {
    ln.validate()?;
    dim("head output", w_o.ncols(), z.len())?;
    dim("W_Q input", w_o.nrows(), w_q.ncols())?;
    dim("LayerNorm gamma", w_q.ncols(), ln.gamma.len())?;
    let div = ln.divisor(mode)?;
    Ok(w_q.dot(&ln.linear(w_o.dot(&z).view(), div)))
}

/// Term for everything not attributed to an upstream head: the rest of the residual
/// stream, the LayerNorm shift and the query bias.
pub fn residual_term(
    residual_rest: ArrayView1<f64>,
    w_q: ArrayView2<f64>,
    b_q: Option<ArrayView1<f64>>,
    ln: &LnStats,
    mode: ScaleMode,
) -> Result<Array1<f64>> {
    ln.validate()?;
    dim("residual", w_q.ncols(), residual_rest.len())?;
    dim("LayerNorm gamma", w_q.ncols(), ln.gamma.len())?;
    let div = ln.divisor(mode)?;
    let mut out = w_q.dot(&(ln.linear(residual_rest, div) + &ln.beta));
    if let Some(b) = b_q {
        dim("query bias", out.len(), b.len())?;
        out += &b;
    }
    Ok(out)
}

/// An upstream head's output `z` and its output projection.
#[derive(Debug, Clone, Copy)]
pub struct Upstream<'a> {
    pub z: ArrayView1<'a, f64>,
    pub w_o: ArrayView2<'a, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryDecomposition {
    pub mode: ScaleMode,
    /// One direct-effect vector per upstream head.
    pub contributions: Vec<Array1<f64>>,
    pub residual: Array1<f64>,
}

impl QueryDecomposition {
    /// Sum of all terms; equals the query under the chosen linearization.
    pub fn total(&self) -> Array1<f64> {
        self.contributions.iter().fold(self.residual.clone(), |acc, c| acc + c)
    }
}

pub fn decompose_query(
    upstream: &[Upstream<'_>],
    residual_rest: ArrayView1<f64>,
    w_q: ArrayView2<f64>,
    b_q: Option<ArrayView1<f64>>,
    ln: &LnStats,
    mode: ScaleMode,
) -> Result<QueryDecomposition> {
    let contributions = upstream
        .iter()
        .map(|u| direct_effect(u.z, u.w_o, w_q, ln, mode))
        .collect::<Result<Vec<_>>>()?;
    Ok(QueryDecomposition {
        mode,
        contributions,
        residual: residual_term(residual_rest, w_q, b_q, ln, mode)?,
    })
}

/// Direct effect of each row of `z_terms` (e.g. dictionary features scaled by their
/// coefficients); by linearity the rows sum to the effect of their sum.
pub fn direct_effect_terms(
    z_terms: ArrayView2<f64>,
    w_o: ArrayView2<f64>,
    w_q: ArrayView2<f64>,
    ln: &LnStats,
    mode: ScaleMode,
) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((z_terms.nrows(), w_q.nrows()));
    for (i, z) in z_terms.rows().into_iter().enumerate() {
        out.row_mut(i).assign(&direct_effect(z, w_o, w_q, ln, mode)?);
    }
    Ok(out)
}

/// Projection weights of one head. `q = W_Q x + b_Q` with `W_Q` stored `d_head x d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    /// `d_model x d_head`.
    pub w_o: Array2<f64>,
    pub b_q: Array1<f64>,
    pub b_k: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BundleHead {
    layer: u32,
    head: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BundleLayer {
    layer: u32,
    eps: f64,
    sigma_hat: BTreeMap<TokenRole, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BundleHeader {
    version: u32,
    d_model: usize,
    d_head: usize,
    heads: Vec<BundleHead>,
    layers: Vec<BundleLayer>,
}

/// Pre-attention LayerNorm of one layer with dataset-mean scales per token role.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormWeights {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub eps: f64,
    pub sigma_hat: BTreeMap<TokenRole, f64>,
}

impl LayerNormWeights {
    pub fn stats(&self, role: TokenRole) -> Result<LnStats> {
        let sigma_hat = *self
            .sigma_hat
            .get(&role)
            .ok_or_else(|| MechError::Missing(format!("sigma_hat at {role:?}")))?;
        Ok(LnStats {
            gamma: self.gamma.clone(),
            beta: self.beta.clone(),
            sigma_hat,
            eps: self.eps,
            center: true,
        })
    }
}

/// Weights exported by the patching side.
///
/// File layout: magic `WBUNDLE1`, u32 LE header length, JSON header
/// `{version, d_model, d_head, heads:[{layer, head}], layers:[{layer, eps, sigma_hat:{role: σ̂}}]}`,
/// then f32 LE blocks: for each head in order `W_Q, W_K` (`d_head x d_model`), `W_O`
/// (`d_model x d_head`), `b_Q, b_K`; then for each layer `γ, β`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightBundle {
    pub d_model: usize,
    pub d_head: usize,
    pub heads: BTreeMap<(u32, u32), HeadWeights>,
    pub layers: BTreeMap<u32, LayerNormWeights>,
}

fn push(buf: &mut Vec<u8>, xs: impl IntoIterator<Item = f64>) {
    for x in xs {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

impl WeightBundle {
    pub fn head(&self, layer: u32, head: u32) -> Result<&HeadWeights> {
        self.heads
            .get(&(layer, head))
            .ok_or_else(|| MechError::Missing(format!("L{layer}H{head}")))
    }

    pub fn layer(&self, layer: u32) -> Result<&LayerNormWeights> {
        self.layers
            .get(&layer)
            .ok_or_else(|| MechError::Missing(format!("layer {layer}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (dm, dh) = (self.d_model, self.d_head);
        let header = BundleHeader {
            version: 1,
            d_model: dm,
            d_head: dh,
            heads: self.heads.keys().map(|&(layer, head)| BundleHead { layer, head }).collect(),
            layers: self
                .layers
                .iter()
                .map(|(&layer, l)| BundleLayer {
                    layer,
                    eps: l.eps,
                    sigma_hat: l.sigma_hat.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| MechError::Format(e.to_string()))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(BUNDLE_MAGIC);
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        for h in self.heads.values() {
            dim("W_Q", dh * dm, h.w_q.len())?;
            dim("W_K", dh * dm, h.w_k.len())?;
            dim("W_O", dm * dh, h.w_o.len())?;
            dim("b_Q", dh, h.b_q.len())?;
            dim("b_K", dh, h.b_k.len())?;
            push(&mut buf, h.w_q.iter().copied());
            push(&mut buf, h.w_k.iter().copied());
            push(&mut buf, h.w_o.iter().copied());
            push(&mut buf, h.b_q.iter().copied());
            push(&mut buf, h.b_k.iter().copied());
        }
        for l in self.layers.values() {
            dim("gamma", dm, l.gamma.len())?;
            dim("beta", dm, l.beta.len())?;
            push(&mut buf, l.gamma.iter().copied());
            push(&mut buf, l.beta.iter().copied());
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != BUNDLE_MAGIC {
            return Err(MechError::Format("bad magic".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header: BundleHeader = serde_json::from_slice(
            bytes
                .get(12..12 + hlen)
                .ok_or_else(|| MechError::Format("truncated header".into()))?,
        )
        .map_err(|e| MechError::Format(e.to_string()))?;
        if header.version != 1 {
            return Err(MechError::Format(format!("unsupported version {}", header.version)));
        }
        let (dm, dh) = (header.d_model, header.d_head);
        let per_head = 3 * dm * dh + 2 * dh;
        let need = header.heads.len() * per_head + header.layers.len() * 2 * dm;
        let payload = &bytes[12 + hlen..];
        if payload.len() != 4 * need {
            return Err(MechError::Format(format!("payload has {} bytes, expected {}", payload.len(), 4 * need)));
        }
        let mut it = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
        let mut take = |k: usize| -> Vec<f64> { it.by_ref().take(k).collect() };
        let mut bundle = WeightBundle {
            d_model: dm,
            d_head: dh,
            ..Default::default()
        };
        for h in &header.heads {
            let w = HeadWeights {
                w_q: Array2::from_shape_vec((dh, dm), take(dh * dm)).unwrap(),
                w_k: Array2::from_shape_vec((dh, dm), take(dh * dm)).unwrap(),
                w_o: Array2::from_shape_vec((dm, dh), take(dm * dh)).unwrap(),
                b_q: Array1::from(take(dh)),
                b_k: Array1::from(take(dh)),
            };
            if bundle.heads.insert((h.layer, h.head), w).is_some() {
                return Err(MechError::Format(format!("head L{}H{} listed twice", h.layer, h.head)));
            }
        }
        for l in header.layers {
            let ln = LayerNormWeights {
                gamma: Array1::from(take(dm)),
                beta: Array1::from(take(dm)),
                eps: l.eps,
                sigma_hat: l.sigma_hat,
            };
            bundle.layers.insert(l.layer, ln);
        }
        Ok(bundle)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
