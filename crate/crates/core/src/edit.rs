//! Sparse activation edits over a fixed feature set.
//!
//! Features are passed as the rows of an `m x d` matrix. Active sets are
//! `(feature index, coefficient)` pairs, e.g. the positive entries of an SAE code.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::LocationId;

/// Largest number of candidate subsets [`brute_force_edit`] will enumerate.
pub const BRUTE_FORCE_LIMIT: u128 = 1_000_000;

#[derive(Debug, Error)]
pub enum EditError {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    Dim { expected: usize, found: usize },
    #[error("feature index {index} out of range (m = {m})")]
    IndexOutOfRange { index: usize, m: usize },
    #[error("instance too large for exhaustive search: {0} subsets")]
    TooLarge(u128),
    #[error("reconstruction equals the decoder bias; weights undefined")]
    Degenerate,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EditError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditPlan {
    pub removed: Vec<(usize, f64)>,
    pub added: Vec<(usize, f64)>,
    /// `||apply_edit(a_s) - a_t||₂`.
    pub residual_distance: f64,
    /// Total weight of the removed features in the source reconstruction.
    pub removed_weight: f64,
}

impl EditPlan {
    pub fn len(&self) -> usize {
        self.removed.len() + self.added.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Positive entries of a code vector.
pub fn active_set(code: ArrayView1<f64>) -> Vec<(usize, f64)> {
    code.iter()
        .enumerate()
        .filter(|(_, &f)| f > 0.0)
        .map(|(i, &f)| (i, f))
        .collect()
}

fn check(u: ArrayView2<f64>, vectors: &[ArrayView1<f64>], sets: &[&[(usize, f64)]]) -> Result<()> {
    let (m, d) = u.dim();
    for v in vectors {
        if v.len() != d {
            return Err(EditError::Dim {
                expected: d,
                found: v.len(),
            });
        }
    }
    for set in sets {
        if let Some(&(index, _)) = set.iter().find(|(i, _)| *i >= m) {
            return Err(EditError::IndexOutOfRange { index, m });
        }
    }
    Ok(())
}

/// `a_s - sum_removed α u + sum_added β u`.
pub fn apply_edit(a_s: ArrayView1<f64>, plan: &EditPlan, u: ArrayView2<f64>) -> Result<Array1<f64>> {
    check(u, &[a_s], &[&plan.removed, &plan.added])?;
    let mut out = a_s.to_owned();
    for &(i, alpha) in &plan.removed {
        out.scaled_add(-alpha, &u.row(i));
    }
    for &(i, beta) in &plan.added {
        out.scaled_add(beta, &u.row(i));
    }
    Ok(out)
}

/// `weight(i) = (f_i u_i)ᵀ(â - b_dec) / ||â - b_dec||²` for every active feature, in input order.
pub fn feature_weights(active: &[(usize, f64)], u: ArrayView2<f64>) -> Result<Vec<f64>> {
    check(u, &[], &[active])?;
    let mut centered = Array1::zeros(u.ncols());
    for &(i, f) in active {
        centered.scaled_add(f, &u.row(i));
    }
    let norm2 = centered.dot(&centered);
    if norm2 == 0.0 {
        return Err(EditError::Degenerate);
    }
    Ok(active
        .iter()
        .map(|&(i, f)| f * u.row(i).dot(&centered) / norm2)
        .collect())
}

fn removed_weight(active_s: &[(usize, f64)], removed: &[(usize, f64)], u: ArrayView2<f64>) -> f64 {
    if removed.is_empty() {
        return 0.0;
    }
    match feature_weights(active_s, u) {
        Ok(w) => active_s
            .iter()
            .zip(w)
            .filter(|((i, _), _)| removed.iter().any(|(j, _)| j == i))
            .map(|(_, w)| w)
            .sum(),
        Err(_) => 0.0,
    }
}

fn finish(
    a_s: ArrayView1<f64>,
    a_t: ArrayView1<f64>,
    active_s: &[(usize, f64)],
    u: ArrayView2<f64>,
    mut removed: Vec<(usize, f64)>,
    mut added: Vec<(usize, f64)>,
) -> Result<EditPlan> {
    removed.sort_by_key(|p| p.0);
    added.sort_by_key(|p| p.0);
    let mut plan = EditPlan {
        removed_weight: removed_weight(active_s, &removed, u),
        removed,
        added,
        residual_distance: 0.0,
    };
    let edited = apply_edit(a_s, &plan, u)?;
    plan.residual_distance = (&edited - &a_t).mapv(|x| x * x).sum().sqrt();
    Ok(plan)
}

/// A signed candidate move: remove `(i, α)` from S or add `(i, β)` from T.
#[derive(Clone, Copy)]
struct Move {
    feature: usize,
    coef: f64,
    remove: bool,
}

fn candidates(active_s: &[(usize, f64)], active_t: &[(usize, f64)]) -> Vec<Move> {
    let mut moves: Vec<Move> = active_s
        .iter()
        .map(|&(feature, coef)| Move {
            feature,
            coef,
            remove: true,
        })
        .chain(active_t.iter().map(|&(feature, coef)| Move {
            feature,
            coef,
            remove: false,
        }))
        .collect();
    // Lowest feature index first; a removal precedes an addition of the same index.
    moves.sort_by_key(|mv| (mv.feature, !mv.remove));
    moves
}

fn split_moves(moves: impl IntoIterator<Item = Move>) -> (Vec<(usize, f64)>, Vec<(usize, f64)>) {
    let (mut removed, mut added) = (Vec::new(), Vec::new());
    for mv in moves {
        if mv.remove {
            removed.push((mv.feature, mv.coef));
        } else {
            added.push((mv.feature, mv.coef));
        }
    }
    (removed, added)
}

/// Up to `k` greedy steps, each taking the single remaining removal or addition that
/// most reduces `||a_s - Σ_R α u + Σ_A β u - a_t||₂`. Stops when no step strictly improves.
pub fn greedy_edit(
    u: ArrayView2<f64>,
    a_s: ArrayView1<f64>,
    active_s: &[(usize, f64)],
    a_t: ArrayView1<f64>,
    active_t: &[(usize, f64)],
    k: usize,
) -> Result<EditPlan> {
    check(u, &[a_s, a_t], &[active_s, active_t])?;
    let moves = candidates(active_s, active_t);
    let deltas: Vec<Array1<f64>> = moves
        .iter()
        .map(|mv| &u.row(mv.feature) * if mv.remove { -mv.coef } else { mv.coef })
        .collect();
    let mut residual = &a_s - &a_t;
    let mut current = residual.dot(&residual);
    let mut used = vec![false; moves.len()];
    for _ in 0..k {
        let mut best: Option<(usize, f64)> = None;
        for (c, delta) in deltas.iter().enumerate() {
            if used[c] {
                continue;
            }
            let value = current + 2.0 * residual.dot(delta) + delta.dot(delta);
            if best.is_none_or(|(_, b)| value < b) {
                best = Some((c, value));
            }
        }
        match best {
            Some((c, value)) if value < current => {
                used[c] = true;
                residual += &deltas[c];
                current = residual.dot(&residual);
            }
            _ => break,
        }
    }
    let (removed, added) = split_moves(moves.iter().zip(&used).filter(|(_, &u)| u).map(|(m, _)| *m));
    finish(a_s, a_t, active_s, u, removed, added)
}

fn binomial(n: u128, k: u128) -> u128 {
    (0..k).fold(1u128, |acc, i| acc * (n - i) / (i + 1))
}

/// Exact optimum of the greedy objective over all change sets of size at most `k`.
/// Ties keep the first set in (size, lexicographic) order.
pub fn brute_force_edit(
    u: ArrayView2<f64>,
    a_s: ArrayView1<f64>,
    active_s: &[(usize, f64)],
    a_t: ArrayView1<f64>,
    active_t: &[(usize, f64)],
    k: usize,
) -> Result<EditPlan> {
    check(u, &[a_s, a_t], &[active_s, active_t])?;
    let moves = candidates(active_s, active_t);
    let n = moves.len();
    let k = k.min(n);
    let count: u128 = (0..=k as u128).map(|j| binomial(n as u128, j)).sum();
    if count > BRUTE_FORCE_LIMIT {
        return Err(EditError::TooLarge(count));
    }
    let deltas: Vec<Array1<f64>> = moves
        .iter()
        .map(|mv| &u.row(mv.feature) * if mv.remove { -mv.coef } else { mv.coef })
        .collect();
    let base = &a_s - &a_t;
    let mut best = (base.dot(&base), Vec::new());
    for size in 1..=k {
        let mut idx: Vec<usize> = (0..size).collect();
        loop {
            let mut r = base.clone();
            for &c in &idx {
                r += &deltas[c];
            }
            let value = r.dot(&r);
            if value < best.0 {
                best = (value, idx.clone());
            }
            // next combination in lexicographic order
            let mut pos = size;
            while pos > 0 && idx[pos - 1] == n - size + pos - 1 {
                pos -= 1;
            }
            if pos == 0 {
                break;
            }
            idx[pos - 1] += 1;
            for j in pos..size {
                idx[j] = idx[j - 1] + 1;
            }
        }
    }
    let (removed, added) = split_moves(best.1.iter().map(|&c| moves[c]));
    finish(a_s, a_t, active_s, u, removed, added)
}

/// Removes the first `k` features of `ranking_old` active in S and adds the first `k`
/// of `ranking_new` active in T.
#[allow(clippy::too_many_arguments)]
pub fn interp_guided_edit(
    u: ArrayView2<f64>,
    a_s: ArrayView1<f64>,
    active_s: &[(usize, f64)],
    a_t: ArrayView1<f64>,
    active_t: &[(usize, f64)],
    ranking_old: &[usize],
    ranking_new: &[usize],
    k: usize,
) -> Result<EditPlan> {
    check(u, &[a_s, a_t], &[active_s, active_t])?;
    let prefix = |ranking: &[usize], active: &[(usize, f64)]| -> Vec<(usize, f64)> {
        ranking
            .iter()
            .filter_map(|i| active.iter().find(|(j, _)| j == i).copied())
            .take(k)
            .collect()
    };
    let removed = prefix(ranking_old, active_s);
    let added = prefix(ranking_new, active_t);
    finish(a_s, a_t, active_s, u, removed, added)
}

/// `a - Σ_{j ∈ set} f_j u_j`, with `f` a dense code vector.
pub fn ablate_features(
    a: ArrayView1<f64>,
    f: ArrayView1<f64>,
    u: ArrayView2<f64>,
    set: &[usize],
) -> Result<Array1<f64>> {
    let (m, d) = u.dim();
    if a.len() != d {
        return Err(EditError::Dim {
            expected: d,
            found: a.len(),
        });
    }
    if f.len() != m {
        return Err(EditError::Dim {
            expected: m,
            found: f.len(),
        });
    }
    let mut out = a.to_owned();
    for &j in set {
        if j >= m {
            return Err(EditError::IndexOutOfRange { index: j, m });
        }
        out.scaled_add(-f[j], &u.row(j));
    }
    Ok(out)
}

/// One line of the edit log handed to the patching side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub prompt_id: u32,
    pub location: LocationId,
    pub removed: Vec<(usize, f64)>,
    pub added: Vec<(usize, f64)>,
    pub residual: f64,
    pub removed_weight: f64,
}

impl EditRecord {
    pub fn new(prompt_id: u32, location: LocationId, plan: &EditPlan) -> Self {
        Self {
            prompt_id,
            location,
            removed: plan.removed.clone(),
            added: plan.added.clone(),
            residual: plan.residual_distance,
            removed_weight: plan.removed_weight,
        }
    }
}

pub fn write_edit_records(path: impl AsRef<Path>, records: &[EditRecord]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_edit_records(path: impl AsRef<Path>) -> Result<Vec<EditRecord>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_instance(seed: u64) -> (Array2<f64>, Array1<f64>, Vec<(usize, f64)>, Array1<f64>, Vec<(usize, f64)>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = || -> f64 { StandardNormal.sample(&mut rng) };
        let u = Array2::from_shape_simple_fn((12, 6), &mut g);
        let s: Vec<(usize, f64)> = (0..5).map(|i| (i, g().abs() + 0.1)).collect();
        let t: Vec<(usize, f64)> = (5..10).map(|i| (i, g().abs() + 0.1)).collect();
        let a_s = Array1::from_shape_simple_fn(6, &mut g);
        let a_t = Array1::from_shape_simple_fn(6, &mut g);
        (u, a_s, s, a_t, t)
    }

    #[test]
    fn identical_endpoints_give_empty_plan() {
        let (u, a, s, _, t) = random_instance(0);
        let plan = greedy_edit(u.view(), a.view(), &s, a.view(), &t, 3).unwrap();
        assert!(plan.is_empty());
        assert_eq!(plan.residual_distance, 0.0);
    }

    #[test]
    fn zero_budget_is_identity() {
        let (u, a_s, s, a_t, t) = random_instance(1);
        let plan = greedy_edit(u.view(), a_s.view(), &s, a_t.view(), &t, 0).unwrap();
        assert!(plan.is_empty());
        let d = (&a_s - &a_t).mapv(|x| x * x).sum().sqrt();
        assert!((plan.residual_distance - d).abs() < 1e-12);
        let bf = brute_force_edit(u.view(), a_s.view(), &s, a_t.view(), &t, 0).unwrap();
        assert!(bf.is_empty());
    }

    #[test]
    fn single_step_is_exhaustive() {
        for seed in 0..20 {
            let (u, a_s, s, a_t, t) = random_instance(seed);
            let g = greedy_edit(u.view(), a_s.view(), &s, a_t.view(), &t, 1).unwrap();
            let b = brute_force_edit(u.view(), a_s.view(), &s, a_t.view(), &t, 1).unwrap();
            assert_eq!(g.removed, b.removed);
            assert_eq!(g.added, b.added);
        }
    }

    #[test]
    fn greedy_objective_is_monotone_in_budget() {
        let (u, a_s, s, a_t, t) = random_instance(3);
        let mut last = f64::INFINITY;
        for k in 0..=10 {
            let plan = greedy_edit(u.view(), a_s.view(), &s, a_t.view(), &t, k).unwrap();
            assert!(plan.residual_distance <= last + 1e-12);
            assert!(plan.len() <= k);
            last = plan.residual_distance;
        }
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let u = array![[1.0, 0.0], [1.0, 0.0]];
        let a_s = array![0.0, 0.0];
        let a_t = array![1.0, 0.0];
        let plan = greedy_edit(u.view(), a_s.view(), &[], a_t.view(), &[(1, 1.0), (0, 1.0)], 1).unwrap();
        assert_eq!(plan.added, vec![(0, 1.0)]);
    }

    #[test]
    fn brute_force_guard() {
        let u = Array2::<f64>::zeros((60, 2));
        let s: Vec<(usize, f64)> = (0..30).map(|i| (i, 1.0)).collect();
        let t: Vec<(usize, f64)> = (30..60).map(|i| (i, 1.0)).collect();
        let a = array![0.0, 1.0];
        assert!(matches!(
            brute_force_edit(u.view(), a.view(), &s, a.view(), &t, 5),
            Err(EditError::TooLarge(_))
        ));
    }

    #[test]
    fn apply_edit_cases() {
        let (u, a_s, _, _, _) = random_instance(4);
        let empty = EditPlan {
            removed: vec![],
            added: vec![],
            residual_distance: 0.0,
            removed_weight: 0.0,
        };
        assert_eq!(apply_edit(a_s.view(), &empty, u.view()).unwrap(), a_s);
        let same = EditPlan {
            removed: vec![(2, 0.7)],
            added: vec![(2, 0.7)],
            ..empty
        };
        let out = apply_edit(a_s.view(), &same, u.view()).unwrap();
        assert!((&out - &a_s).iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn weight_cases() {
        let u = array![[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]];
        assert_eq!(feature_weights(&[(2, 0.3)], u.view()).unwrap(), vec![1.0]);
        let w = feature_weights(&[(0, 1.5), (1, 1.5)], u.view()).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-12 && (w[1] - 0.5).abs() < 1e-12);
        assert!(matches!(feature_weights(&[], u.view()), Err(EditError::Degenerate)));
    }

    #[test]
    fn interp_guided_prefix_semantics() {
        let (u, a_s, s, a_t, t) = random_instance(5);
        let plan = interp_guided_edit(u.view(), a_s.view(), &s, a_t.view(), &t, &[11, 10], &[11], 3).unwrap();
        assert!(plan.is_empty());
        let plan = interp_guided_edit(u.view(), a_s.view(), &s, a_t.view(), &t, &[4, 11, 0], &[9, 5], 10).unwrap();
        assert_eq!(plan.removed.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 4]);
        assert_eq!(plan.added.iter().map(|p| p.0).collect::<Vec<_>>(), vec![5, 9]);
        let plan = interp_guided_edit(u.view(), a_s.view(), &s, a_t.view(), &t, &[4, 11, 0], &[9, 5], 1).unwrap();
        assert_eq!(plan.removed, vec![s[4]]);
        assert_eq!(plan.added, vec![t[4]]);
    }

    #[test]
    fn ablation_cases() {
        let (u, a, _, _, _) = random_instance(6);
        let f = Array1::from_shape_fn(12, |i| if i % 3 == 0 { 0.5 + i as f64 } else { 0.0 });
        assert_eq!(ablate_features(a.view(), f.view(), u.view(), &[]).unwrap(), a);
        let set = [0, 3, 9];
        let out = ablate_features(a.view(), f.view(), u.view(), &set).unwrap();
        for c in 0..6 {
            let mut expect = a[c];
            for &j in &set {
                expect -= f[j] * u[(j, c)];
            }
            assert!((out[c] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn records_round_trip() {
        let plan = EditPlan {
            removed: vec![(1, 0.5)],
            added: vec![(4, 2.0)],
            residual_distance: 0.25,
            removed_weight: 0.4,
        };
        let rec = vec![EditRecord::new(7, LocationId::default(), &plan)];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("edits.jsonl");
        write_edit_records(&path, &rec).unwrap();
        assert_eq!(read_edit_records(&path).unwrap(), rec);
    }
}
