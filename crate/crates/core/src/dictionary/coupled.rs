//! Coupled parametrization: attributes `(IO,Pos)` and `(S,Pos)` in place of
//! independent `IO`, `S` and `Pos`.
//!
//! Coupled value index for name `n` and position `p` is `n * n_pos + p`.

use ndarray::{Array1, ArrayView1};

use super::{DictError, FeatureDictionary, Result};
use crate::store::{ActivationDataset, Attribute, AttributeSchema};

pub const COUPLED_IO: &str = "(IO,Pos)";
pub const COUPLED_S: &str = "(S,Pos)";

/// Independent IOI labels of one prompt: value indices into IO, S and Pos.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IoiLabels {
    pub io: usize,
    pub s: usize,
    pub pos: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoupledEdit {
    Io,
    S,
    Pos,
}

fn coupled_schema(names: &[String], positions: &[String]) -> AttributeSchema {
    let values: Vec<String> = names
        .iter()
        .flat_map(|n| positions.iter().map(move |p| format!("{n}|{p}")))
        .collect();
    AttributeSchema::new(vec![
        Attribute::new(COUPLED_IO, values.clone()),
        Attribute::new(COUPLED_S, values),
    ])
    .expect("coupled schema is valid when inputs are")
}

/// Relabels an IOI dataset onto the coupled schema. `IO` and `S` must share names.
pub fn coupled_dataset(
    dataset: &ActivationDataset,
    io: &str,
    s: &str,
    pos: &str,
) -> Result<ActivationDataset> {
    let io_i = dataset.schema.index_of(io)?;
    let s_i = dataset.schema.index_of(s)?;
    let pos_i = dataset.schema.index_of(pos)?;
    let names = &dataset.schema.attributes[io_i].values;
    if names != &dataset.schema.attributes[s_i].values {
        return Err(DictError::Inconsistent(
            "IO and S attributes must have identical value lists".into(),
        ));
    }
    let positions = &dataset.schema.attributes[pos_i].values;
    let n_pos = positions.len();
    let schema = coupled_schema(names, positions);
    let mut labels = Vec::with_capacity(dataset.len() * 2);
    for i in 0..dataset.len() {
        let p = dataset.label(i, pos_i);
        labels.push((dataset.label(i, io_i) * n_pos + p) as u16);
        labels.push((dataset.label(i, s_i) * n_pos + p) as u16);
    }
    Ok(ActivationDataset::new(
        dataset.location,
        schema,
        dataset.dim,
        dataset.data.clone(),
        labels,
        dataset.prompt_ids.clone(),
    )?)
}

/// Coupled features `io_{a,p} = io_a + pos_p / 2` and `s_{a,p} = s_a + pos_p / 2`,
/// which reproduce the independent reconstruction exactly.
pub fn coupled_from_independent(
    dict: &FeatureDictionary,
    io: &str,
    s: &str,
    pos: &str,
) -> Result<FeatureDictionary> {
    let io_i = dict.schema.index_of(io)?;
    let s_i = dict.schema.index_of(s)?;
    let pos_i = dict.schema.index_of(pos)?;
    if dict.schema.len() != 3 {
        return Err(DictError::Inconsistent(
            "independent dictionary must have exactly IO, S and Pos".into(),
        ));
    }
    let names = &dict.schema.attributes[io_i].values;
    let positions = &dict.schema.attributes[pos_i].values;
    let schema = coupled_schema(names, positions);
    let n_pos = positions.len();
    let n = names.len();
    let mut features = ndarray::Array2::zeros((2 * n * n_pos, dict.dim()));
    for (block, attr) in [io_i, s_i].into_iter().enumerate() {
        for name in 0..n {
            for p in 0..n_pos {
                let row = block * n * n_pos + name * n_pos + p;
                let v = &dict.feature(attr, name)? + &(&dict.feature(pos_i, p)? * 0.5);
                features.row_mut(row).assign(&v);
            }
        }
    }
    Ok(FeatureDictionary {
        schema,
        kind: dict.kind,
        bias: dict.bias.clone(),
        features,
        warnings: Vec::new(),
    })
}

fn n_pos(dict: &FeatureDictionary) -> Result<usize> {
    let io = dict.schema.attribute(COUPLED_IO)?;
    let first = io.values[0].split('|').next().unwrap_or_default().to_string();
    Ok(io
        .values
        .iter()
        .take_while(|v| v.split('|').next() == Some(first.as_str()))
        .count())
}

/// Closed-form edit in the coupled parametrization.
///
/// An IO or S edit swaps one feature; a Pos edit swaps both coupled features.
pub fn edit_coupled(
    dict: &FeatureDictionary,
    activation: ArrayView1<f64>,
    request: CoupledEdit,
    old: IoiLabels,
    new: IoiLabels,
) -> Result<Array1<f64>> {
    let io_attr = dict.schema.index_of(COUPLED_IO)?;
    let s_attr = dict.schema.index_of(COUPLED_S)?;
    let np = n_pos(dict)?;
    let idx = |name: usize, pos: usize| name * np + pos;
    let consistent = match request {
        CoupledEdit::Io => old.s == new.s && old.pos == new.pos,
        CoupledEdit::S => old.io == new.io && old.pos == new.pos,
        CoupledEdit::Pos => old.io == new.io && old.s == new.s,
    };
    if !consistent {
        return Err(DictError::Inconsistent(format!(
            "{request:?} edit may only change its own attribute ({old:?} -> {new:?})"
        )));
    }
    let mut out = activation.to_owned();
    let mut swap = |attr: usize, from: usize, to: usize| -> Result<()> {
        out -= &dict.feature(attr, from)?;
        out += &dict.feature(attr, to)?;
        Ok(())
    };
    match request {
        CoupledEdit::Io => swap(io_attr, idx(old.io, old.pos), idx(new.io, old.pos))?,
        CoupledEdit::S => swap(s_attr, idx(old.s, old.pos), idx(new.s, old.pos))?,
        CoupledEdit::Pos => {
            swap(io_attr, idx(old.io, old.pos), idx(old.io, new.pos))?;
            swap(s_attr, idx(old.s, old.pos), idx(old.s, new.pos))?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::{fit_mean_dictionary, fit_mse_dictionary};
    use crate::synth::FactorialTask;

    fn setup() -> (FactorialTask, FeatureDictionary, FeatureDictionary) {
        let task = FactorialTask::ioi(4, 6, 5);
        let ds = task.full_factorial(1);
        let indep = fit_mean_dictionary(&ds);
        let coupled = coupled_from_independent(&indep, "IO", "S", "Pos").unwrap();
        (task, indep, coupled)
    }

    #[test]
    fn coupled_construction_reproduces_independent_reconstruction() {
        let (_, indep, coupled) = setup();
        for io in 0..4 {
            for s in 0..4 {
                for p in 0..2 {
                    let a = indep.reconstruct(&[io, s, p]).unwrap();
                    let b = coupled.reconstruct(&[io * 2 + p, s * 2 + p]).unwrap();
                    assert!((&a - &b).iter().all(|x| x.abs() < 1e-12));
                }
            }
        }
    }

    #[test]
    fn pos_edit_swaps_both_coupled_features() {
        let (_, _, coupled) = setup();
        // ABB prompt with IO = a (1), S = b (2).
        let old = IoiLabels { io: 1, s: 2, pos: 0 };
        let new = IoiLabels { pos: 1, ..old };
        let a = Array1::zeros(6);
        let e = edit_coupled(&coupled, a.view(), CoupledEdit::Pos, old, new).unwrap();
        let expected = -&coupled.feature(0, 2).unwrap() - &coupled.feature(1, 4).unwrap()
            + coupled.feature(0, 3).unwrap()
            + coupled.feature(1, 5).unwrap();
        assert!((&e - &expected).iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn io_self_edit_is_identity_and_inconsistent_requests_fail() {
        let (_, _, coupled) = setup();
        let old = IoiLabels { io: 0, s: 3, pos: 1 };
        let a = Array1::from_elem(6, 0.25);
        let e = edit_coupled(&coupled, a.view(), CoupledEdit::Io, old, old).unwrap();
        assert_eq!(e, a);
        let bad = IoiLabels { s: 1, ..old };
        assert!(matches!(
            edit_coupled(&coupled, a.view(), CoupledEdit::Io, old, bad),
            Err(DictError::Inconsistent(_))
        ));
    }

    #[test]
    fn coupled_dataset_fit_matches_ground_truth_edit() {
        let (task, _, _) = setup();
        let ds = task.full_factorial(1);
        let cds = coupled_dataset(&ds, "IO", "S", "Pos").unwrap();
        // Mean features double-count Pos in the coupled schema; least squares does not.
        let dict = fit_mse_dictionary(&cds, 0.0).unwrap();
        let old = IoiLabels { io: 2, s: 0, pos: 0 };
        let new = IoiLabels { pos: 1, ..old };
        let a = task.activation(&[2, 0, 0]);
        let e = edit_coupled(&dict, a.view(), CoupledEdit::Pos, old, new).unwrap();
        let truth = task.activation(&[2, 0, 1]);
        assert!((&e - &truth).iter().all(|x| x.abs() < 1e-5));
    }
}
