//! Occlusion: activations `a = u_i + v_j` sum one vector from a high-norm family and
//! one from a low-norm family. SAEs tend to find the high-norm features first.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{par_map, Result, ToyError};
use crate::dictionary::{fit_mean_dictionary, FeatureDictionary};
use crate::interp::{score_dictionary, PredicateTable, SiteKind};
use crate::sae::{sae_metrics, train_sae_on, TrainConfig};
use crate::store::{split, ActivationDataset, Attribute, AttributeSchema, LocationId};

pub const HI: &str = "hi";
pub const LO: &str = "lo";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OcclusionConfig {
    /// Values per family.
    pub n_names: usize,
    pub d: usize,
    /// Target mean ℓ₂ norms of the two families.
    pub norm_hi: f64,
    pub norm_lo: f64,
    pub n_samples: usize,
    /// Share of samples held out for scoring features.
    pub test_fraction: f64,
    pub dict_sizes: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub lrs: Vec<f64>,
    pub epochs: usize,
    pub f1_threshold: f64,
    pub seeds: Vec<u64>,
    /// Remaining SAE settings; the grid fields above override their counterparts.
    pub train: TrainConfig,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl OcclusionConfig {
    pub fn full() -> Self {
        Self {
            n_names: 216,
            d: 64,
            norm_hi: 1.25,
            norm_lo: 1.0,
            n_samples: 20_000,
            test_fraction: 0.2,
            dict_sizes: vec![512, 1024, 2048],
            lambdas: vec![0.0125, 0.025, 0.4, 0.5, 1.0, 2.0],
            batch_sizes: vec![256, 1024],
            lrs: vec![0.001, 0.003, 0.0003],
            epochs: 1000,
            f1_threshold: 0.9,
            seeds: vec![0, 1, 2],
            train: TrainConfig::default(),
        }
    }

    /// Desk-scale grid. Twice as many values as dimensions keeps the families in
    /// superposition, which occlusion needs; with `2 * n_names <= d` both families are
    /// recovered in full.
    pub fn reduced() -> Self {
        Self {
            n_names: 48,
            d: 32,
            n_samples: 8_000,
            dict_sizes: vec![128, 256],
            lambdas: vec![0.2, 0.4, 0.8],
            batch_sizes: vec![256],
            lrs: vec![0.003],
            epochs: 200,
            ..Self::full()
        }
    }

    pub fn with_equal_norms(&self) -> Self {
        Self {
            norm_lo: self.norm_hi,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(ToyError::Config(msg.into()));
        if !(self.norm_hi > 0.0 && self.norm_lo > 0.0) {
            return bad("norms must be > 0");
        }
        if self.n_names == 0 || self.d == 0 || self.n_samples < 2 {
            return bad("n_names, d must be > 0 and n_samples >= 2");
        }
        if self.n_names > u16::MAX as usize {
            return bad("n_names does not fit the label type");
        }
        if self.dict_sizes.is_empty()
            || self.lambdas.is_empty()
            || self.batch_sizes.is_empty()
            || self.lrs.is_empty()
            || self.seeds.is_empty()
        {
            return bad("grid must be non-empty");
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction must be in (0, 1)");
        }
        Ok(())
    }

    fn schema(&self) -> AttributeSchema {
        let values = |p: &str| (0..self.n_names).map(|i| format!("{p}{i}")).collect();
        AttributeSchema::new(vec![Attribute::new(HI, values("h")), Attribute::new(LO, values("l"))])
            .expect("distinct attribute names")
    }
}

/// Ground-truth vectors of one synthetic occlusion task.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionTruth {
    /// `n_names x d`, one row per high-norm value.
    pub hi: Array2<f64>,
    pub lo: Array2<f64>,
}

fn family(n: usize, d: usize, target: f64, rng: &mut impl Rng) -> Array2<f64> {
    let mut u = Array2::from_shape_simple_fn((n, d), || rng.sample::<f64, _>(StandardNormal));
    let mean_norm = u.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>() / n as f64;
    u *= target / mean_norm;
    u
}

/// Draws both families and `n_samples` random pairs `(i, j)` with `a = u_i + v_j`.
/// Labels are the two-attribute schema (`hi`, `lo`).
pub fn gen_occlusion_data(config: &OcclusionConfig, seed: u64) -> Result<(ActivationDataset, OcclusionTruth)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (config.n_names, config.d);
    let truth = OcclusionTruth {
        hi: family(n, d, config.norm_hi, &mut rng),
        lo: family(n, d, config.norm_lo, &mut rng),
    };
    let mut rows = Array2::zeros((config.n_samples, d));
    let mut labels = Vec::with_capacity(2 * config.n_samples);
    for mut row in rows.rows_mut() {
        let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
        row.assign(&(&truth.hi.row(i) + &truth.lo.row(j)));
        labels.extend([i as u16, j as u16]);
    }
    let ds = ActivationDataset::from_rows(LocationId::default(), config.schema(), &rows, labels)?;
    Ok((ds, truth))
}

/// Number of distinct values of each family matched by some feature at `threshold`,
/// using single-value predicates only.
pub fn family_counts(codes: ndarray::ArrayView2<f64>, dataset: &ActivationDataset, threshold: f64) -> Result<(usize, usize)> {
    let table = PredicateTable::build(dataset, SiteKind::Generic, None)?;
    let score = score_dictionary(codes, &table, 1, threshold)?;
    let (hi, lo) = (dataset.schema.index_of(HI)?, dataset.schema.index_of(LO)?);
    let mut found = [BTreeSet::new(), BTreeSet::new()];
    for e in &score.explanations {
        if e.f1 < threshold {
            continue;
        }
        if let Some(p) = &e.predicate {
            let slot = match p.attr {
                Some(a) if a == hi => 0,
                Some(a) if a == lo => 1,
                _ => continue,
            };
            found[slot].insert(p.params[0]);
        }
    }
    Ok((found[0].len(), found[1].len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcclusionCell {
    pub dict_size: usize,
    pub lambda: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub hi_count: usize,
    pub lo_count: usize,
    /// Held-out metrics in the SAE's input scale.
    pub l0: f64,
    pub frac_variance_explained: f64,
}

/// Trains one SAE on `train` and counts family features on `test`.
#[allow(clippy::too_many_arguments)]
fn run_cell(
    config: &OcclusionConfig,
    train: &ActivationDataset,
    test: &ActivationDataset,
    dict_size: usize,
    lambda: f64,
    batch_size: usize,
    lr: f64,
    seed: u64,
    threshold: f64,
) -> Result<OcclusionCell> {
    let tc = TrainConfig {
        lambda,
        lr,
        batch_size,
        epochs: config.epochs,
        hidden_size: Some(dict_size),
        seed,
        ..config.train.clone()
    };
    let out = train_sae_on(train.to_array().view(), &tc)?;
    let x = out.scale_inputs(test.to_array().view());
    let codes = out.params.encode(x.view());
    let (hi_count, lo_count) = family_counts(codes.view(), test, threshold)?;
    let m = sae_metrics(&out.params, x.view(), 0.0)?;
    Ok(OcclusionCell {
        dict_size,
        lambda,
        batch_size,
        lr,
        seed,
        hi_count,
        lo_count,
        l0: m.l0,
        frac_variance_explained: m.frac_variance_explained,
    })
}

/// Every (dict size, λ, batch, lr, seed) cell. Each seed draws its own task; the SAE
/// seed is derived from the data seed and the cell position, so results do not
/// depend on scheduling.
pub fn run_occlusion_sweep(config: &OcclusionConfig) -> Result<Vec<OcclusionCell>> {
    config.validate()?;
    let mut cells = Vec::new();
    for &seed in &config.seeds {
        let (ds, _) = gen_occlusion_data(config, seed)?;
        let (train, test) = split(&ds, config.test_fraction, seed)?;
        let mut jobs = Vec::new();
        for &m in &config.dict_sizes {
            for &lambda in &config.lambdas {
                for &b in &config.batch_sizes {
                    for &lr in &config.lrs {
                        jobs.push((m, lambda, b, lr, seed.wrapping_mul(1_000_003).wrapping_add(jobs.len() as u64)));
                    }
                }
            }
        }
        let results = par_map(&jobs, |&(m, lambda, b, lr, s)| {
            run_cell(config, &train, &test, m, lambda, b, lr, s, config.f1_threshold).map(|c| OcclusionCell { seed, ..c })
        });
        for r in results {
            cells.push(r?);
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcclusionSummary {
    pub cells: usize,
    /// Fraction of cells with `hi_count >= lo_count`.
    pub hi_at_least_lo: f64,
    pub mean_hi: f64,
    pub mean_lo: f64,
    /// `|mean_hi - mean_lo| / max(mean_hi, mean_lo)`, zero when both are zero.
    pub relative_gap: f64,
}

pub fn summarize_occlusion(cells: &[OcclusionCell]) -> OcclusionSummary {
    let n = cells.len().max(1) as f64;
    let mean_hi = cells.iter().map(|c| c.hi_count as f64).sum::<f64>() / n;
    let mean_lo = cells.iter().map(|c| c.lo_count as f64).sum::<f64>() / n;
    let top = mean_hi.max(mean_lo);
    OcclusionSummary {
        cells: cells.len(),
        hi_at_least_lo: cells.iter().filter(|c| c.hi_count >= c.lo_count).count() as f64 / n,
        mean_hi,
        mean_lo,
        relative_gap: if top > 0.0 { (mean_hi - mean_lo).abs() / top } else { 0.0 },
    }
}

/// `a(p) − α·u_{attr = value(p)}` for every row, with `u` taken from `dict`.
pub fn reduce_feature_magnitude(
    dataset: &ActivationDataset,
    dict: &FeatureDictionary,
    attribute: &str,
    alpha: f64,
) -> Result<ActivationDataset> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ToyError::Config(format!("alpha must be in [0, 1], got {alpha}")));
    }
    let attr = dataset.schema.index_of(attribute)?;
    if dict.dim() != dataset.dim {
        return Err(ToyError::Config(format!(
            "dictionary dim {} does not match dataset dim {}",
            dict.dim(),
            dataset.dim
        )));
    }
    let mut rows = dataset.to_array();
    for (i, mut row) in rows.rows_mut().into_iter().enumerate() {
        let u = dict.feature(attr, dataset.label(i, attr))?;
        row.scaled_add(-alpha, &u);
    }
    Ok(dataset.with_rows(&rows)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReductionPoint {
    pub alpha: f64,
    pub hi_count: usize,
    pub lo_count: usize,
}

/// Shrinks the high-norm family by each `α` (via its mean-dictionary features),
/// retrains one SAE per `α` and counts family features at `threshold`.
pub fn surgical_reduction(
    config: &OcclusionConfig,
    dict_size: usize,
    lambda: f64,
    threshold: f64,
    alphas: &[f64],
    seed: u64,
) -> Result<Vec<ReductionPoint>> {
    config.validate()?;
    let (ds, _) = gen_occlusion_data(config, seed)?;
    let (train, test) = split(&ds, config.test_fraction, seed)?;
    let dict = fit_mean_dictionary(&train);
    let (batch, lr) = (config.batch_sizes[0], config.lrs[0]);
    let results = par_map(alphas, |&alpha| -> Result<ReductionPoint> {
        let tr = reduce_feature_magnitude(&train, &dict, HI, alpha)?;
        let te = reduce_feature_magnitude(&test, &dict, HI, alpha)?;
        let cell = run_cell(config, &tr, &te, dict_size, lambda, batch, lr, seed, threshold)?;
        Ok(ReductionPoint {
            alpha,
            hi_count: cell.hi_count,
            lo_count: cell.lo_count,
        })
    });
    results.into_iter().collect()
}

/// Mean ℓ₂ norm of the rows of `m`.
pub fn mean_row_norm(m: &Array2<f64>) -> f64 {
    m.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>() / m.nrows().max(1) as f64
}

/// Ground-truth reconstruction of `dataset` rows from their labels.
pub fn truth_rows(truth: &OcclusionTruth, dataset: &ActivationDataset) -> Array2<f64> {
    let mut out = Array2::zeros((dataset.len(), truth.hi.ncols()));
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let v: Array1<f64> = &truth.hi.row(dataset.label(i, 0)) + &truth.lo.row(dataset.label(i, 1));
        row.assign(&v);
    }
    out
}
