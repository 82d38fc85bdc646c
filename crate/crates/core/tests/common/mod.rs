//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use dictbench::store::{ActivationDataset, Attribute, AttributeSchema, LocationId};
use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn schema(cards: &[usize]) -> AttributeSchema {
    AttributeSchema::new(
        cards
            .iter()
            .enumerate()
            .map(|(i, &c)| Attribute::new(format!("a{i}"), (0..c).map(|v| format!("v{v}")).collect()))
            .collect(),
    )
    .unwrap()
}

/// Gaussian activations with uniformly random labels.
pub fn random_dataset(n: usize, d: usize, cards: &[usize], seed: u64) -> ActivationDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = Array2::from_shape_simple_fn((n, d), || rng.sample::<f64, _>(StandardNormal));
    let labels = (0..n)
        .flat_map(|_| cards.iter().map(|&c| rng.random_range(0..c) as u16).collect::<Vec<_>>())
        .collect();
    ActivationDataset::from_rows(LocationId::default(), schema(cards), &rows, labels).unwrap()
}

/// Concatenated one-hot design, `N x S`.
pub fn design(ds: &ActivationDataset) -> DMatrix<f64> {
    let offsets = ds.schema.value_offsets();
    let mut c = DMatrix::zeros(ds.len(), ds.schema.total_values());
    for i in 0..ds.len() {
        for (attr, &off) in offsets.iter().enumerate() {
            c[(i, off + ds.label(i, attr))] = 1.0;
        }
    }
    c
}

pub fn activations(ds: &ActivationDataset) -> DMatrix<f64> {
    DMatrix::from_fn(ds.len(), ds.dim, |i, j| ds.row(i)[j] as f64)
}

/// Minimum-norm least squares `(CᵀC)⁺ Cᵀ (A - mean)`. The pseudoinverse comes from a
/// full SVD of `CᵀC + I`: same singular vectors, singular values shifted by one, so
/// none sits at zero. The factorization is checked before use.
pub fn svd_mse_features(ds: &ActivationDataset) -> DMatrix<f64> {
    let a = activations(ds);
    let mean = a.row_mean();
    let centered = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] - mean[j]);
    let c = design(ds);
    let gram = c.transpose() * &c;
    let shifted = &gram + DMatrix::identity(gram.nrows(), gram.ncols());
    let svd = shifted.clone().svd(true, true);
    let (u, v_t) = (svd.u.as_ref().unwrap(), svd.v_t.as_ref().unwrap());
    let rebuilt = u * DMatrix::from_diagonal(&svd.singular_values) * v_t;
    assert!((rebuilt - &shifted).norm() <= 1e-10 * shifted.norm(), "SVD did not reconstruct the Gram matrix");
    let tol = 1e-10 * svd.singular_values.max();
    let inv = svd.singular_values.map(|s| if s - 1.0 > tol { 1.0 / (s - 1.0) } else { 0.0 });
    let pinv = v_t.transpose() * DMatrix::from_diagonal(&inv) * u.transpose();
    pinv * c.transpose() * centered
}

/// Conditional mean of each value minus the global mean, by direct averaging.
pub fn direct_mean_features(ds: &ActivationDataset, attr: usize) -> Vec<Array1<f64>> {
    let card = ds.schema.attributes[attr].values.len();
    let a = ds.to_array();
    let global = a.mean_axis(ndarray::Axis(0)).unwrap();
    (0..card)
        .map(|v| {
            let rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.label(i, attr) == v).collect();
            let mut m = Array1::zeros(ds.dim);
            for &i in &rows {
                m += &a.row(i);
            }
            m / rows.len() as f64 - &global
        })
        .collect()
}

pub fn max_pairwise_distance(rows: &[Array1<f64>]) -> f64 {
    let mut best: f64 = 0.0;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            best = best.max((&rows[i] - &rows[j]).mapv(|x| x * x).sum().sqrt());
        }
    }
    best
}

/// Random edit instance: `m x d` features, sparse positive codes for source and target,
/// activations equal to their reconstructions plus a little noise.
pub struct EditInstance {
    pub u: Array2<f64>,
    pub a_s: Array1<f64>,
    pub active_s: Vec<(usize, f64)>,
    pub a_t: Array1<f64>,
    pub active_t: Vec<(usize, f64)>,
}

pub fn edit_instance(seed: u64, max_active: usize) -> EditInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, d) = (16, 8);
    let u = Array2::from_shape_simple_fn((m, d), || rng.sample::<f64, _>(StandardNormal));
    let draw = |rng: &mut ChaCha8Rng| {
        let k = rng.random_range(1..=max_active);
        let idx = rand::seq::index::sample(rng, m, k).into_vec();
        let active: Vec<(usize, f64)> = idx.into_iter().map(|i| (i, rng.random_range(0.1..2.0))).collect();
        let mut a = Array1::from_shape_fn(d, |_| 0.05 * rng.sample::<f64, _>(StandardNormal));
        for &(i, f) in &active {
            a.scaled_add(f, &u.row(i));
        }
        (a, active)
    };
    let (a_s, active_s) = draw(&mut rng);
    let (a_t, active_t) = draw(&mut rng);
    EditInstance { u, a_s, active_s, a_t, active_t }
}
