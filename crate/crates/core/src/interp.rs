//! F1 scoring of feature active sets against binary predicates over prompts.
//!
//! A feature is active on a row when its coefficient is strictly positive.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use fixedbitset::FixedBitSet;
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{ActivationDataset, AttributeSchema, StoreError, TokenRole};

pub const DEFAULT_MAX_UNION: usize = 10;
pub const FULL_DISTRIBUTION_MAX_UNION: usize = 30;
pub const DEFAULT_F1_THRESHOLD: f64 = 0.8;

#[derive(Debug, Error)]
pub enum InterpError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("schema lacks attribute {0:?}")]
    MissingAttribute(String),
    #[error("attribute Pos must have values ABB and BAB")]
    BadPos,
    #[error("name-mover key/value sites need token role IO or S1, got {0:?}")]
    BadRole(TokenRole),
    #[error("gender predicates requested but no gender labels supplied")]
    NoGenders,
    #[error("activation matrix has {found} rows, dataset has {expected}")]
    Rows { expected: usize, found: usize },
    #[error("threshold must be in [0, 1], got {0}")]
    Threshold(f64),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, InterpError>;

/// `(precision, recall, f1)` of active rows `f` against property rows `a`.
pub fn precision_recall_f1(f: &FixedBitSet, a: &FixedBitSet) -> (f64, f64, f64) {
    prf_from_counts(f.intersection_count(a), f.count_ones(..), a.count_ones(..))
}

pub fn prf_from_counts(both: usize, active: usize, property: usize) -> (f64, f64, f64) {
    if both == 0 || active == 0 || property == 0 {
        return (0.0, 0.0, 0.0);
    }
    let p = both as f64 / active as f64;
    let r = both as f64 / property as f64;
    (p, r, f1(p, r))
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Row set of a single feature: rows where `codes[row, feature] > 0`.
pub fn active_rows(codes: ArrayView2<f64>, feature: usize) -> FixedBitSet {
    let mut set = FixedBitSet::with_capacity(codes.nrows());
    for (row, &x) in codes.column(feature).iter().enumerate() {
        if x > 0.0 {
            set.insert(row);
        }
    }
    set
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

/// Name to gender labels, read from a two-column CSV `name,gender`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenderMap(pub HashMap<String, Gender>);

impl GenderMap {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)?;
        let mut map = HashMap::new();
        for rec in reader.records() {
            let rec = rec?;
            let (Some(name), Some(g)) = (rec.get(0), rec.get(1)) else {
                continue;
            };
            let gender = match g.to_ascii_lowercase().as_str() {
                "male" | "m" => Gender::Male,
                "female" | "f" => Gender::Female,
                _ => continue,
            };
            map.insert(name.to_string(), gender);
        }
        Ok(Self(map))
    }

    pub fn get(&self, name: &str) -> Option<Gender> {
        self.0.get(name).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    /// S2 and END token activations.
    EndOrS2,
    /// Name-mover keys/values gathered at the IO or S1 token.
    NameMoverKv,
    /// One predicate per (attribute, value); no IOI structure assumed.
    Generic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredicateKind {
    IoFirst,
    IoSecond,
    SIs,
    SIsFirst,
    SIsSecond,
    IoIs,
    IoIsFirst,
    IoIsSecond,
    SMale,
    SFemale,
    NameInSentence,
    NameFirst,
    NameSecond,
    TokenIs,
    TokenIsFirst,
    TokenIsSecond,
    TokenFirst,
    TokenSecond,
    TokenFemale,
    AttrValue,
}

impl PredicateKind {
    /// Whether predicates of this kind take a name (or value) parameter and so admit unions.
    pub fn parametric(self) -> bool {
        use PredicateKind::*;
        matches!(
            self,
            SIs | SIsFirst
                | SIsSecond
                | IoIs
                | IoIsFirst
                | IoIsSecond
                | NameInSentence
                | NameFirst
                | NameSecond
                | TokenIs
                | TokenIsFirst
                | TokenIsSecond
                | AttrValue
        )
    }

    pub fn label(self) -> &'static str {
        use PredicateKind::*;
        match self {
            IoFirst => "IO is 1st name",
            IoSecond => "IO is 2nd name",
            SIs => "S is <name>",
            SIsFirst => "S is <name> and at 1st position",
            SIsSecond => "S is <name> and at 2nd position",
            IoIs => "IO is <name>",
            IoIsFirst => "IO is <name> and at 1st position",
            IoIsSecond => "IO is <name> and at 2nd position",
            SMale => "S is male",
            SFemale => "S is female",
            NameInSentence => "<name> is in sentence",
            NameFirst => "<name> is at 1st position",
            NameSecond => "<name> is at 2nd position",
            TokenIs => "current token is <name>",
            TokenIsFirst => "token is <name> and at 1st position",
            TokenIsSecond => "token is <name> and at 2nd position",
            TokenFirst => "current token is at 1st position",
            TokenSecond => "current token is at 2nd position",
            TokenFemale => "current token is female",
            AttrValue => "<attribute> is <value>",
        }
    }
}

/// A predicate, or a union of same-kind predicates when `params` has several entries.
///
/// For IOI kinds `params` are indices into the name list of the [`PredicateTable`];
/// for `AttrValue` they are value indices of attribute `attr`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Predicate {
    pub kind: PredicateKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attr: Option<usize>,
    #[serde(default)]
    pub params: Vec<usize>,
}

impl Predicate {
    fn fixed(kind: PredicateKind) -> Self {
        Self {
            kind,
            attr: None,
            params: Vec::new(),
        }
    }

    fn named(kind: PredicateKind, name: usize) -> Self {
        Self {
            kind,
            attr: None,
            params: vec![name],
        }
    }

    pub fn union_size(&self) -> usize {
        self.params.len().max(1)
    }
}

/// Base predicates with their row sets over one dataset.
#[derive(Debug, Clone)]
pub struct PredicateTable {
    pub site: SiteKind,
    /// Names referenced by IOI predicate parameters.
    pub names: Vec<String>,
    schema: AttributeSchema,
    pub predicates: Vec<Predicate>,
    pub rows: Vec<FixedBitSet>,
}

struct IoiColumns {
    io: usize,
    s: usize,
    pos: usize,
    abb: u16,
    bab: u16,
    /// IO name index per IO value, S name index per S value.
    io_names: Vec<usize>,
    s_names: Vec<usize>,
    names: Vec<String>,
}

fn ioi_columns(schema: &AttributeSchema) -> Result<IoiColumns> {
    let find = |name: &str| {
        schema
            .attributes
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| InterpError::MissingAttribute(name.to_string()))
    };
    let (io, s, pos) = (find("IO")?, find("S")?, find("Pos")?);
    let pv = &schema.attributes[pos].values;
    let abb = pv.iter().position(|v| v == "ABB").ok_or(InterpError::BadPos)? as u16;
    let bab = pv.iter().position(|v| v == "BAB").ok_or(InterpError::BadPos)? as u16;
    let mut names: Vec<String> = Vec::new();
    let mut index = HashMap::new();
    let mut intern = |n: &String| -> usize {
        *index.entry(n.clone()).or_insert_with(|| {
            names.push(n.clone());
            names.len() - 1
        })
    };
    let io_names = schema.attributes[io].values.iter().map(&mut intern).collect();
    let s_names = schema.attributes[s].values.iter().map(&mut intern).collect();
    Ok(IoiColumns {
        io,
        s,
        pos,
        abb,
        bab,
        io_names,
        s_names,
        names,
    })
}

/// Base predicates for a site, in the fixed enumeration order used for tie-breaking.
pub fn enumerate_predicates(
    schema: &AttributeSchema,
    site: SiteKind,
    genders: Option<&GenderMap>,
) -> Result<Vec<Predicate>> {
    use PredicateKind::*;
    let mut out = Vec::new();
    match site {
        SiteKind::Generic => {
            for (a, attr) in schema.attributes.iter().enumerate() {
                for v in 0..attr.values.len() {
                    out.push(Predicate {
                        kind: AttrValue,
                        attr: Some(a),
                        params: vec![v],
                    });
                }
            }
        }
        SiteKind::EndOrS2 => {
            let n = ioi_columns(schema)?.names.len();
            out.push(Predicate::fixed(IoSecond));
            out.push(Predicate::fixed(IoFirst));
            for kind in [SIs, SIsFirst, SIsSecond, IoIs, IoIsFirst, IoIsSecond] {
                out.extend((0..n).map(|i| Predicate::named(kind, i)));
            }
            if genders.is_some() {
                out.push(Predicate::fixed(SMale));
                out.push(Predicate::fixed(SFemale));
            }
            for kind in [NameInSentence, NameFirst, NameSecond] {
                out.extend((0..n).map(|i| Predicate::named(kind, i)));
            }
        }
        SiteKind::NameMoverKv => {
            let n = ioi_columns(schema)?.names.len();
            for kind in [TokenIs, TokenIsFirst, TokenIsSecond] {
                out.extend((0..n).map(|i| Predicate::named(kind, i)));
            }
            out.push(Predicate::fixed(TokenFirst));
            out.push(Predicate::fixed(TokenSecond));
            if genders.is_some() {
                out.push(Predicate::fixed(TokenFemale));
            }
        }
    }
    Ok(out)
}

impl PredicateTable {
    pub fn build(dataset: &ActivationDataset, site: SiteKind, genders: Option<&GenderMap>) -> Result<Self> {
        let predicates = enumerate_predicates(&dataset.schema, site, genders)?;
        let n_rows = dataset.len();
        let mut rows = vec![FixedBitSet::with_capacity(n_rows); predicates.len()];
        let mut names = Vec::new();
        match site {
            SiteKind::Generic => {
                for (p, pred) in predicates.iter().enumerate() {
                    let (a, v) = (pred.attr.unwrap(), pred.params[0] as u16);
                    for r in 0..n_rows {
                        if dataset.labels[r * dataset.schema.len() + a] == v {
                            rows[p].insert(r);
                        }
                    }
                }
            }
            SiteKind::EndOrS2 | SiteKind::NameMoverKv => {
                let cols = ioi_columns(&dataset.schema)?;
                let k = dataset.schema.len();
                let token_is_io = match (site, dataset.location.token_role) {
                    (SiteKind::NameMoverKv, TokenRole::Io) => true,
                    (SiteKind::NameMoverKv, TokenRole::S1) => false,
                    (SiteKind::NameMoverKv, role) => return Err(InterpError::BadRole(role)),
                    _ => false,
                };
                let gender_of = |name: usize| genders.and_then(|g| g.get(&cols.names[name]));
                let index: HashMap<(PredicateKind, Option<usize>), usize> = predicates
                    .iter()
                    .enumerate()
                    .map(|(i, p)| ((p.kind, p.params.first().copied()), i))
                    .collect();
                let mut mark = |kind: PredicateKind, name: Option<usize>, r: usize| {
                    if let Some(&p) = index.get(&(kind, name)) {
                        rows[p].insert(r);
                    }
                };
                use PredicateKind::*;
                for r in 0..n_rows {
                    let l = &dataset.labels[r * k..(r + 1) * k];
                    let io = cols.io_names[l[cols.io] as usize];
                    let s = cols.s_names[l[cols.s] as usize];
                    let abb = l[cols.pos] == cols.abb;
                    let bab = l[cols.pos] == cols.bab;
                    // ABB: IO comes first; BAB: S comes first.
                    let (first, second) = if abb { (io, s) } else { (s, io) };
                    if site == SiteKind::EndOrS2 {
                        if bab {
                            mark(IoSecond, None, r);
                        }
                        if abb {
                            mark(IoFirst, None, r);
                        }
                        mark(SIs, Some(s), r);
                        mark(if bab { SIsFirst } else { SIsSecond }, Some(s), r);
                        mark(IoIs, Some(io), r);
                        mark(if abb { IoIsFirst } else { IoIsSecond }, Some(io), r);
                        match gender_of(s) {
                            Some(Gender::Male) => mark(SMale, None, r),
                            Some(Gender::Female) => mark(SFemale, None, r),
                            None => {}
                        }
                        mark(NameInSentence, Some(io), r);
                        mark(NameInSentence, Some(s), r);
                        mark(NameFirst, Some(first), r);
                        mark(NameSecond, Some(second), r);
                    } else {
                        let token = if token_is_io { io } else { s };
                        let token_first = if token_is_io { abb } else { bab };
                        mark(TokenIs, Some(token), r);
                        if token_first {
                            mark(TokenIsFirst, Some(token), r);
                            mark(TokenFirst, None, r);
                        } else {
                            mark(TokenIsSecond, Some(token), r);
                            mark(TokenSecond, None, r);
                        }
                        if gender_of(token) == Some(Gender::Female) {
                            mark(TokenFemale, None, r);
                        }
                    }
                }
                names = cols.names;
            }
        }
        Ok(Self {
            site,
            names,
            schema: dataset.schema.clone(),
            predicates,
            rows,
        })
    }

    pub fn len(&self) -> usize {
        self.predicates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicates.is_empty()
    }

    pub fn n_rows(&self) -> usize {
        self.rows.first().map_or(0, |r| r.len())
    }

    /// Human-readable form, e.g. `IO is {Mary, John}`.
    pub fn describe(&self, pred: &Predicate) -> String {
        let param = |i: usize| -> String {
            match pred.attr {
                Some(a) => self.schema.attributes[a].values[i].clone(),
                None => self.names[i].clone(),
            }
        };
        let joined = if pred.params.len() == 1 {
            param(pred.params[0])
        } else {
            format!("{{{}}}", pred.params.iter().map(|&i| param(i)).collect::<Vec<_>>().join(", "))
        };
        match pred.kind {
            PredicateKind::AttrValue => {
                format!("{} is {}", self.schema.attributes[pred.attr.unwrap()].name, joined)
            }
            kind if kind.parametric() => kind.label().replace("<name>", &joined),
            kind => kind.label().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub feature: usize,
    /// `None` when no predicate overlaps the feature's active set (e.g. a dead feature).
    pub predicate: Option<Predicate>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Explanation {
    fn none(feature: usize) -> Self {
        Self {
            feature,
            predicate: None,
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
        }
    }

    pub fn union_size(&self) -> usize {
        self.predicate.as_ref().map_or(0, Predicate::union_size)
    }
}

impl fmt::Display for Explanation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "feature {} f1={:.3} p={:.3} r={:.3}", self.feature, self.f1, self.precision, self.recall)
    }
}

/// Best explanation of `active` among `family` and its F1-ordered prefix unions.
///
/// `family` indexes into `table`; unions are formed only for parametric kinds and
/// only within one kind. Every prefix size `1..=max_union` is scored.
pub fn best_union_explanation(
    feature: usize,
    active: &FixedBitSet,
    table: &PredicateTable,
    family: &[usize],
    max_union: usize,
) -> Explanation {
    let n_active = active.count_ones(..);
    let mut best = Explanation::none(feature);
    if n_active == 0 {
        return best;
    }
    let consider = |pred: &Predicate, rows: &FixedBitSet, best: &mut Explanation| {
        let (p, r, f) = prf_from_counts(active.intersection_count(rows), n_active, rows.count_ones(..));
        if f > best.f1 {
            *best = Explanation {
                feature,
                predicate: Some(pred.clone()),
                precision: p,
                recall: r,
                f1: f,
            };
        }
    };
    let mut scored: BTreeMap<(PredicateKind, Option<usize>), Vec<(usize, f64)>> = BTreeMap::new();
    for &i in family {
        let pred = &table.predicates[i];
        let rows = &table.rows[i];
        let (p, r, f) = prf_from_counts(active.intersection_count(rows), n_active, rows.count_ones(..));
        if f > best.f1 {
            best = Explanation {
                feature,
                predicate: Some(pred.clone()),
                precision: p,
                recall: r,
                f1: f,
            };
        }
        if pred.kind.parametric() {
            scored.entry((pred.kind, pred.attr)).or_default().push((i, f));
        }
    }
    if max_union < 2 {
        return best;
    }
    let order: Vec<(PredicateKind, Option<usize>)> = {
        let mut seen = Vec::new();
        for &i in family {
            let key = (table.predicates[i].kind, table.predicates[i].attr);
            if key.0.parametric() && !seen.contains(&key) {
                seen.push(key);
            }
        }
        seen
    };
    for key in order {
        let mut members = scored.remove(&key).unwrap_or_default();
        members.retain(|&(_, f)| f > 0.0);
        // Stable sort keeps enumeration order among equal F1.
        members.sort_by(|a, b| b.1.total_cmp(&a.1));
        let mut rows = FixedBitSet::with_capacity(active.len());
        let mut params = Vec::new();
        for (k, &(i, _)) in members.iter().take(max_union).enumerate() {
            rows.union_with(&table.rows[i]);
            params.extend(table.predicates[i].params.iter().copied());
            if k == 0 {
                continue;
            }
            let union = Predicate {
                kind: key.0,
                attr: key.1,
                params: params.clone(),
            };
            consider(&union, &rows, &mut best);
        }
    }
    best
}

/// Per-feature explanations plus a histogram of explained features by predicate kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DictionaryScore {
    pub threshold: f64,
    pub explanations: Vec<Explanation>,
    /// Explained-feature counts keyed by predicate kind label.
    pub histogram: BTreeMap<String, usize>,
    pub n_explained: usize,
    pub n_dead: usize,
}

/// Scores every column of `codes` (rows aligned with the table's dataset).
pub fn score_dictionary(
    codes: ArrayView2<f64>,
    table: &PredicateTable,
    max_union: usize,
    f1_threshold: f64,
) -> Result<DictionaryScore> {
    if codes.nrows() != table.n_rows() && !table.is_empty() {
        return Err(InterpError::Rows {
            expected: table.n_rows(),
            found: codes.nrows(),
        });
    }
    if !(0.0..=1.0).contains(&f1_threshold) {
        return Err(InterpError::Threshold(f1_threshold));
    }
    let family: Vec<usize> = (0..table.len()).collect();
    let mut explanations = Vec::with_capacity(codes.ncols());
    let mut histogram = BTreeMap::new();
    let (mut n_explained, mut n_dead) = (0, 0);
    for j in 0..codes.ncols() {
        let active = active_rows(codes, j);
        if active.count_ones(..) == 0 {
            n_dead += 1;
        }
        let e = best_union_explanation(j, &active, table, &family, max_union);
        if e.f1 >= f1_threshold && e.predicate.is_some() {
            n_explained += 1;
            let kind = e.predicate.as_ref().unwrap().kind.label().to_string();
            *histogram.entry(kind).or_insert(0) += 1;
        }
        explanations.push(e);
    }
    Ok(DictionaryScore {
        threshold: f1_threshold,
        explanations,
        histogram,
        n_explained,
        n_dead,
    })
}

/// Splits features into `(f1 >= t, f1 < t)`.
pub fn threshold_partition(explanations: &[Explanation], t: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(InterpError::Threshold(t));
    }
    Ok(explanations
        .iter()
        .map(|e| e.feature)
        .zip(explanations.iter().map(|e| e.f1 >= t))
        .fold((Vec::new(), Vec::new()), |(mut yes, mut no), (j, ok)| {
            if ok {
                yes.push(j)
            } else {
                no.push(j)
            }
            (yes, no)
        }))
}

/// F1 of every feature against every value of one attribute: `result[value][feature]`.
pub fn value_f1_matrix(codes: ArrayView2<f64>, dataset: &ActivationDataset, attr: usize) -> Vec<Vec<f64>> {
    let k = dataset.schema.len();
    let n_values = dataset.schema.attributes[attr].values.len();
    let mut value_rows = vec![FixedBitSet::with_capacity(dataset.len()); n_values];
    for r in 0..dataset.len() {
        value_rows[dataset.labels[r * k + attr] as usize].insert(r);
    }
    let actives: Vec<FixedBitSet> = (0..codes.ncols()).map(|j| active_rows(codes, j)).collect();
    value_rows
        .iter()
        .map(|vr| actives.iter().map(|a| precision_recall_f1(a, vr).2).collect())
        .collect()
}

/// Features with positive F1 for each value of `attr`, F1-descending (ties by index).
pub fn value_rankings(codes: ArrayView2<f64>, dataset: &ActivationDataset, attr: usize) -> Vec<Vec<usize>> {
    value_f1_matrix(codes, dataset, attr)
        .into_iter()
        .map(|scores| {
            let mut idx: Vec<usize> = (0..scores.len()).filter(|&j| scores[j] > 0.0).collect();
            idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
            idx
        })
        .collect()
}

/// Writes explanations as JSON lines.
pub fn write_explanations_jsonl(path: impl AsRef<Path>, explanations: &[Explanation]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for e in explanations {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_explanations_jsonl(path: impl AsRef<Path>) -> Result<Vec<Explanation>> {
    let mut out = Vec::new();
    for line in BufReader::new(std::fs::File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Aggregate CSV with columns `feature, kind, f1, p, r, union_size`.
pub fn write_explanations_csv(path: impl AsRef<Path>, explanations: &[Explanation]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["feature", "kind", "f1", "p", "r", "union_size"])?;
    for e in explanations {
        let kind = e
            .predicate
            .as_ref()
            .map_or("none".to_string(), |p| format!("{:?}", p.kind));
        w.write_record([
            e.feature.to_string(),
            kind,
            e.f1.to_string(),
            e.precision.to_string(),
            e.recall.to_string(),
            e.union_size().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{Attribute, LocationId, Site};
    use ndarray::Array2;

    fn set(n: usize, rows: &[usize]) -> FixedBitSet {
        let mut s = FixedBitSet::with_capacity(n);
        for &r in rows {
            s.insert(r);
        }
        s
    }

    #[test]
    fn f1_fixed_points() {
        let a = set(10, &[1, 2, 3]);
        assert_eq!(precision_recall_f1(&a, &a), (1.0, 1.0, 1.0));
        assert_eq!(precision_recall_f1(&set(10, &[5, 6]), &a), (0.0, 0.0, 0.0));
        assert_eq!(precision_recall_f1(&set(10, &[]), &a), (0.0, 0.0, 0.0));
        assert!((f1(0.5, 0.02) - 0.0385).abs() < 5e-4);
    }

    fn ioi_dataset(names: &[&str], rows: &[[u16; 3]], role: TokenRole) -> ActivationDataset {
        let names: Vec<String> = names.iter().map(|s| s.to_string()).collect();
        let schema = AttributeSchema::new(vec![
            Attribute::new("IO", names.clone()),
            Attribute::new("S", names),
            Attribute::new("Pos", vec!["ABB".into(), "BAB".into()]),
        ])
        .unwrap();
        let loc = LocationId {
            layer: 9,
            head: 9,
            site: Site::Key,
            token_role: role,
        };
        let data = Array2::zeros((rows.len(), 2));
        let labels = rows.iter().flatten().copied().collect();
        ActivationDataset::from_rows(loc, schema, &data, labels).unwrap()
    }

    #[test]
    fn two_name_end_enumeration() {
        let ds = ioi_dataset(&["Ann", "Bob"], &[[0, 1, 0], [1, 0, 1], [0, 1, 1]], TokenRole::End);
        let genders = GenderMap(HashMap::from([
            ("Ann".to_string(), Gender::Female),
            ("Bob".to_string(), Gender::Male),
        ]));
        let table = PredicateTable::build(&ds, SiteKind::EndOrS2, Some(&genders)).unwrap();
        assert_eq!(table.len(), 2 + 6 * 2 + 2 + 3 * 2);
        let rows_of = |desc: &str| {
            let i = table.predicates.iter().position(|p| table.describe(p) == desc).unwrap();
            table.rows[i].ones().collect::<Vec<_>>()
        };
        assert_eq!(rows_of("IO is 1st name"), vec![0]);
        assert_eq!(rows_of("IO is 2nd name"), vec![1, 2]);
        assert_eq!(rows_of("S is Bob"), vec![0, 2]);
        assert_eq!(rows_of("S is Bob and at 1st position"), vec![2]);
        assert_eq!(rows_of("S is Bob and at 2nd position"), vec![0]);
        assert_eq!(rows_of("IO is Ann and at 1st position"), vec![0]);
        assert_eq!(rows_of("IO is Ann and at 2nd position"), vec![2]);
        assert_eq!(rows_of("S is male"), vec![0, 2]);
        assert_eq!(rows_of("S is female"), vec![1]);
        assert_eq!(rows_of("Ann is in sentence"), vec![0, 1, 2]);
        // row 0 ABB: Ann first; row 1 BAB: S=Ann first; row 2 BAB: S=Bob first
        assert_eq!(rows_of("Ann is at 1st position"), vec![0, 1]);
        assert_eq!(rows_of("Bob is at 1st position"), vec![2]);
        assert_eq!(rows_of("Ann is at 2nd position"), vec![2]);
    }

    #[test]
    fn name_mover_enumeration_uses_current_token() {
        let rows = [[0, 1, 0], [1, 0, 1], [0, 1, 1]];
        let ds = ioi_dataset(&["Ann", "Bob"], &rows, TokenRole::S1);
        let table = PredicateTable::build(&ds, SiteKind::NameMoverKv, None).unwrap();
        assert_eq!(table.len(), 3 * 2 + 2);
        assert!(table.predicates.iter().all(|p| matches!(
            p.kind,
            PredicateKind::TokenIs
                | PredicateKind::TokenIsFirst
                | PredicateKind::TokenIsSecond
                | PredicateKind::TokenFirst
                | PredicateKind::TokenSecond
        )));
        let rows_of = |desc: &str| {
            let i = table.predicates.iter().position(|p| table.describe(p) == desc).unwrap();
            table.rows[i].ones().collect::<Vec<_>>()
        };
        assert_eq!(rows_of("current token is Bob"), vec![0, 2]);
        assert_eq!(rows_of("current token is at 1st position"), vec![1, 2]);
        let end = ioi_dataset(&["Ann", "Bob"], &rows, TokenRole::End);
        assert!(matches!(
            PredicateTable::build(&end, SiteKind::NameMoverKv, None),
            Err(InterpError::BadRole(TokenRole::End))
        ));
    }

    #[test]
    fn missing_attribute_is_an_error() {
        let schema = AttributeSchema::new(vec![Attribute::new("IO", vec!["a".into()])]).unwrap();
        assert!(matches!(
            enumerate_predicates(&schema, SiteKind::EndOrS2, None),
            Err(InterpError::MissingAttribute(_))
        ));
    }

    fn generic_table(values: usize, n: usize) -> (ActivationDataset, PredicateTable) {
        let schema = AttributeSchema::new(vec![Attribute::new(
            "c",
            (0..values).map(|v| format!("v{v}")).collect(),
        )])
        .unwrap();
        let labels: Vec<u16> = (0..n).map(|r| (r % values) as u16).collect();
        let ds = ActivationDataset::from_rows(LocationId::default(), schema, &Array2::zeros((n, 1)), labels).unwrap();
        let table = PredicateTable::build(&ds, SiteKind::Generic, None).unwrap();
        (ds, table)
    }

    #[test]
    fn single_predicate_and_union_recovery() {
        let (_, table) = generic_table(8, 80);
        let family: Vec<usize> = (0..table.len()).collect();
        let e = best_union_explanation(0, &table.rows[3], &table, &family, 10);
        assert_eq!(e.f1, 1.0);
        assert_eq!(e.predicate.unwrap().params, vec![3]);

        let mut active = table.rows[1].clone();
        active.union_with(&table.rows[4]);
        active.union_with(&table.rows[6]);
        let e = best_union_explanation(0, &active, &table, &family, 10);
        assert_eq!(e.f1, 1.0);
        let mut params = e.predicate.clone().unwrap().params;
        params.sort();
        assert_eq!(params, vec![1, 4, 6]);
        assert_eq!(e.union_size(), 3);

        let e = best_union_explanation(0, &active, &table, &family, 1);
        assert!(e.f1 < 1.0 && e.union_size() == 1);
    }

    #[test]
    fn dead_feature_is_unexplained() {
        let (_, table) = generic_table(3, 30);
        let codes = Array2::<f64>::zeros((30, 2));
        let score = score_dictionary(codes.view(), &table, 10, 0.8).unwrap();
        assert_eq!(score.n_dead, 2);
        assert_eq!(score.n_explained, 0);
        assert!(score.explanations.iter().all(|e| e.predicate.is_none() && e.f1 == 0.0));
    }

    #[test]
    fn partition_is_monotone() {
        let ex: Vec<Explanation> = [0.0, 0.3, 0.6, 0.9, 1.0]
            .iter()
            .enumerate()
            .map(|(j, &f)| Explanation {
                f1: f,
                ..Explanation::none(j)
            })
            .collect();
        assert_eq!(threshold_partition(&ex, 0.0).unwrap().0.len(), 5);
        assert_eq!(threshold_partition(&ex, 1.0).unwrap().0, vec![4]);
        let mut last = 6;
        for t in [0.0, 0.2, 0.5, 0.7, 0.95, 1.0] {
            let n = threshold_partition(&ex, t).unwrap().0.len();
            assert!(n <= last);
            last = n;
        }
        assert!(threshold_partition(&ex, 1.5).is_err());
    }

    #[test]
    fn rankings_order_by_f1() {
        let (ds, _) = generic_table(2, 8);
        // feature 0 = exactly v0; feature 1 = v0 plus one v1 row; feature 2 never on v0
        let codes = Array2::from_shape_fn((8, 3), |(r, j)| match j {
            0 => (r % 2 == 0) as u8 as f64,
            1 => (r % 2 == 0 || r == 1) as u8 as f64,
            _ => (r == 3) as u8 as f64,
        });
        let ranks = value_rankings(codes.view(), &ds, 0);
        assert_eq!(ranks[0], vec![0, 1]);
        assert_eq!(ranks[1], vec![2, 1]);
    }

    #[test]
    fn gender_file_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.csv");
        std::fs::write(&path, "Mary, female\nJohn,M\nAlex,unknown\n").unwrap();
        let g = GenderMap::load(&path).unwrap();
        assert_eq!(g.get("Mary"), Some(Gender::Female));
        assert_eq!(g.get("John"), Some(Gender::Male));
        assert_eq!(g.get("Alex"), None);
    }
}
