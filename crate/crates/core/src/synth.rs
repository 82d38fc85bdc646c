//! Additive factorial generator: `a(p) = base + sum_i x_{i, a_i(p)}`.
//!
//! Used as a ground-truth task where supervised dictionaries are exact.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::store::{ActivationDataset, Attribute, AttributeSchema, LocationId};

#[derive(Debug, Clone)]
pub struct FactorialTask {
    pub schema: AttributeSchema,
    pub base: Array1<f64>,
    /// `components[attr][value]` is the ground-truth vector for that value.
    pub components: Vec<Vec<Array1<f64>>>,
}

impl FactorialTask {
    /// Attributes named `a0, a1, ...` with the given cardinalities.
    pub fn new(cardinalities: &[usize], dim: usize, seed: u64) -> Self {
        let attributes = cardinalities
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                Attribute::new(format!("a{i}"), (0..c).map(|v| format!("v{v}")).collect())
            })
            .collect();
        Self::with_schema(AttributeSchema::new(attributes).unwrap(), dim, seed)
    }

    /// IOI-shaped schema: `IO` and `S` over `n_names` names and binary `Pos`.
    pub fn ioi(n_names: usize, dim: usize, seed: u64) -> Self {
        let names: Vec<String> = (0..n_names).map(|i| format!("name{i}")).collect();
        let schema = AttributeSchema::new(vec![
            Attribute::new("IO", names.clone()),
            Attribute::new("S", names),
            Attribute::new("Pos", vec!["ABB".into(), "BAB".into()]),
        ])
        .unwrap();
        Self::with_schema(schema, dim, seed)
    }

    pub fn with_schema(schema: AttributeSchema, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = || -> Array1<f64> {
            Array1::from_shape_fn(dim, |_| StandardNormal.sample(&mut rng))
        };
        let base = normal();
        let components = schema
            .attributes
            .iter()
            .map(|a| a.values.iter().map(|_| normal()).collect())
            .collect();
        Self {
            schema,
            base,
            components,
        }
    }

    pub fn dim(&self) -> usize {
        self.base.len()
    }

    pub fn activation(&self, values: &[usize]) -> Array1<f64> {
        let mut out = self.base.clone();
        for (attr, &v) in values.iter().enumerate() {
            out += &self.components[attr][v];
        }
        out
    }

    /// Components minus their per-attribute average; what a mean dictionary recovers
    /// on a balanced design.
    pub fn centered_components(&self) -> Vec<Vec<Array1<f64>>> {
        self.components
            .iter()
            .map(|comps| {
                let mut mean = Array1::zeros(self.dim());
                for c in comps {
                    mean += c;
                }
                mean /= comps.len() as f64;
                comps.iter().map(|c| c - &mean).collect()
            })
            .collect()
    }

    /// Every combination of values, `reps` times each, in lexicographic order.
    pub fn full_factorial(&self, reps: usize) -> ActivationDataset {
        let cards: Vec<usize> = self.schema.attributes.iter().map(|a| a.values.len()).collect();
        let cells: usize = cards.iter().product();
        let mut combos = Vec::with_capacity(cells * reps);
        for cell in 0..cells {
            let mut rem = cell;
            let mut values = vec![0usize; cards.len()];
            for k in (0..cards.len()).rev() {
                values[k] = rem % cards[k];
                rem /= cards[k];
            }
            for _ in 0..reps {
                combos.push(values.clone());
            }
        }
        self.dataset_for(&combos)
    }

    pub fn dataset_for(&self, combos: &[Vec<usize>]) -> ActivationDataset {
        let mut rows = Array2::zeros((combos.len(), self.dim()));
        let mut labels = Vec::with_capacity(combos.len() * self.schema.len());
        for (i, values) in combos.iter().enumerate() {
            rows.row_mut(i).assign(&self.activation(values));
            labels.extend(values.iter().map(|&v| v as u16));
        }
        ActivationDataset::from_rows(LocationId::default(), self.schema.clone(), &rows, labels)
            .expect("generator produces a valid dataset")
    }
}
