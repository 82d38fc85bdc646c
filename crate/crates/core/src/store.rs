//! Labeled activation datasets and the `ACTSTOR1` container format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! bytes 0..8        magic "ACTSTOR1"
//! bytes 8..12       u32 header length H
//! bytes 12..12+H    UTF-8 JSON header
//!                   {version, dim, count, location, schema, dtype: "f32le"}
//! count*dim f32     activations, row-major
//! count*A u16       labels, row-major (A = number of attributes)
//! count u32         prompt ids
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const STORE_MAGIC: &[u8; 8] = b"ACTSTOR1";
pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected ACTSTOR1")]
    BadMagic,
    #[error("unsupported store version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated payload: expected {expected} bytes after header, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("label out of range at row {row}, attribute {attribute:?}: index {index} >= {len}")]
    LabelOutOfRange {
        row: usize,
        attribute: String,
        index: usize,
        len: usize,
    },
    #[error("non-finite activation in row {row}")]
    NonFinite { row: usize },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("unknown attribute {0:?}")]
    UnknownAttribute(String),
    #[error("test fraction must lie in (0, 1), got {0}")]
    BadFraction(f64),
}

pub type Result<T> = std::result::Result<T, StoreError>;

/// One categorical attribute and its ordered value names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub values: Vec<String>,
}

impl Attribute {
    pub fn new<S: Into<String>>(name: S, values: Vec<String>) -> Self {
        Self {
            name: name.into(),
            values,
        }
    }

    pub fn value_index(&self, value: &str) -> Option<usize> {
        self.values.iter().position(|v| v == value)
    }
}

/// Ordered list of attributes describing each prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct AttributeSchema {
    pub attributes: Vec<Attribute>,
}

impl AttributeSchema {
    pub fn new(attributes: Vec<Attribute>) -> Result<Self> {
        let schema = Self { attributes };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for attr in &self.attributes {
            if !names.insert(attr.name.as_str()) {
                return Err(StoreError::Schema(format!(
                    "duplicate attribute name {:?}",
                    attr.name
                )));
            }
            if attr.values.is_empty() {
                return Err(StoreError::Schema(format!(
                    "attribute {:?} has no values",
                    attr.name
                )));
            }
            if attr.values.len() > u16::MAX as usize + 1 {
                return Err(StoreError::Schema(format!(
                    "attribute {:?} has more values than fit in u16 labels",
                    attr.name
                )));
            }
            let mut seen = HashSet::new();
            for v in &attr.values {
                if !seen.insert(v.as_str()) {
                    return Err(StoreError::Schema(format!(
                        "attribute {:?} repeats value {v:?}",
                        attr.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.attributes
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| StoreError::UnknownAttribute(name.to_string()))
    }

    pub fn attribute(&self, name: &str) -> Result<&Attribute> {
        Ok(&self.attributes[self.index_of(name)?])
    }

    /// Total number of (attribute, value) pairs.
    pub fn total_values(&self) -> usize {
        self.attributes.iter().map(|a| a.values.len()).sum()
    }

    /// Offset of each attribute's first value in the flattened value list.
    pub fn value_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.attributes.len());
        let mut acc = 0;
        for a in &self.attributes {
            offsets.push(acc);
            acc += a.values.len();
        }
        offsets
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Query,
    Key,
    Value,
    AttnOutput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TokenRole {
    #[serde(rename = "IO")]
    Io,
    S1,
    S1plus1,
    S2,
    #[serde(rename = "END")]
    End,
}

/// Identity of a circuit node: a head's query/key/value/output at one token role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LocationId {
    pub layer: u32,
    pub head: u32,
    pub site: Site,
    pub token_role: TokenRole,
}

impl LocationId {
    pub fn new(layer: u32, head: u32, site: Site, token_role: TokenRole) -> Self {
        Self {
            layer,
            head,
            site,
            token_role,
        }
    }
}

impl std::fmt::Display for LocationId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let site = match self.site {
            Site::Query => "q",
            Site::Key => "k",
            Site::Value => "v",
            Site::AttnOutput => "z",
        };
        let role = match self.token_role {
            TokenRole::Io => "IO",
            TokenRole::S1 => "S1",
            TokenRole::S1plus1 => "S1+1",
            TokenRole::S2 => "S2",
            TokenRole::End => "END",
        };
        write!(f, "L{}H{}.{}@{}", self.layer, self.head, site, role)
    }
}

impl Default for LocationId {
    fn default() -> Self {
        Self::new(0, 0, Site::Query, TokenRole::End)
    }
}

/// N labeled activation vectors taken at a single model location.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDataset {
    pub location: LocationId,
    pub schema: AttributeSchema,
    pub dim: usize,
    /// Row-major `count x dim`.
    pub data: Vec<f32>,
    /// Row-major `count x schema.len()`.
    pub labels: Vec<u16>,
    pub prompt_ids: Vec<u32>,
}

impl ActivationDataset {
    pub fn new(
        location: LocationId,
        schema: AttributeSchema,
        dim: usize,
        data: Vec<f32>,
        labels: Vec<u16>,
        prompt_ids: Vec<u32>,
    ) -> Result<Self> {
        let ds = Self {
            location,
            schema,
            dim,
            data,
            labels,
            prompt_ids,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Builds a dataset from an `N x d` matrix; prompt ids default to row numbers.
    pub fn from_rows(
        location: LocationId,
        schema: AttributeSchema,
        rows: &Array2<f64>,
        labels: Vec<u16>,
    ) -> Result<Self> {
        let (n, dim) = rows.dim();
        let data = rows.iter().map(|&x| x as f32).collect();
        Self::new(location, schema, dim, data, labels, (0..n as u32).collect())
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        if self.dim == 0 {
            return Err(StoreError::Invalid("dimension must be positive".into()));
        }
        let n = self.prompt_ids.len();
        if n == 0 {
            return Err(StoreError::Invalid("dataset has no rows".into()));
        }
        if self.data.len() != n * self.dim {
            return Err(StoreError::Invalid(format!(
                "data has {} floats, expected {} x {}",
                self.data.len(),
                n,
                self.dim
            )));
        }
        let a = self.schema.len();
        if self.labels.len() != n * a {
            return Err(StoreError::Invalid(format!(
                "labels has {} entries, expected {} x {}",
                self.labels.len(),
                n,
                a
            )));
        }
        for (row, chunk) in self.data.chunks_exact(self.dim).enumerate() {
            if chunk.iter().any(|x| !x.is_finite()) {
                return Err(StoreError::NonFinite { row });
            }
        }
        self.check_labels()
    }

    fn check_labels(&self) -> Result<()> {
        let a = self.schema.len();
        if a == 0 {
            return Ok(());
        }
        for (row, chunk) in self.labels.chunks_exact(a).enumerate() {
            for (attr, &idx) in self.schema.attributes.iter().zip(chunk) {
                if idx as usize >= attr.values.len() {
                    return Err(StoreError::LabelOutOfRange {
                        row,
                        attribute: attr.name.clone(),
                        index: idx as usize,
                        len: attr.values.len(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.prompt_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompt_ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&x| x as f64).collect()
    }

    /// Value index of attribute `attr` (by position) for row `i`.
    pub fn label(&self, i: usize, attr: usize) -> usize {
        self.labels[i * self.schema.len() + attr] as usize
    }

    pub fn row_labels(&self, i: usize) -> &[u16] {
        let a = self.schema.len();
        &self.labels[i * a..(i + 1) * a]
    }

    /// Activations as an `N x d` matrix in 64-bit.
    pub fn to_array(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.len(), self.dim), |(i, j)| {
            self.data[i * self.dim + j] as f64
        })
    }

    /// New dataset made of the given rows, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Self {
        let a = self.schema.len();
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        let mut labels = Vec::with_capacity(rows.len() * a);
        let mut prompt_ids = Vec::with_capacity(rows.len());
        for &r in rows {
            data.extend_from_slice(self.row(r));
            labels.extend_from_slice(self.row_labels(r));
            prompt_ids.push(self.prompt_ids[r]);
        }
        Self {
            location: self.location,
            schema: self.schema.clone(),
            dim: self.dim,
            data,
            labels,
            prompt_ids,
        }
    }

    /// Same rows and labels with replaced activations.
    pub fn with_rows(&self, rows: &Array2<f64>) -> Result<Self> {
        if rows.nrows() != self.len() {
            return Err(StoreError::Invalid(format!(
                "replacement has {} rows, dataset has {}",
                rows.nrows(),
                self.len()
            )));
        }
        Self::new(
            self.location,
            self.schema.clone(),
            rows.ncols(),
            rows.iter().map(|&x| x as f32).collect(),
            self.labels.clone(),
            self.prompt_ids.clone(),
        )
    }

    /// Serializes to the `ACTSTOR1` byte layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        for (row, chunk) in self.data.chunks_exact(self.dim.max(1)).enumerate() {
            if chunk.iter().any(|x| !x.is_finite()) {
                return Err(StoreError::NonFinite { row });
            }
        }
        self.validate()?;
        let header = StoreHeader {
            version: STORE_VERSION,
            dim: self.dim,
            count: self.len(),
            location: self.location,
            schema: self.schema.clone(),
            dtype: "f32le".to_string(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| StoreError::Header(e.to_string()))?;
        let mut out = Vec::with_capacity(
            12 + header.len() + self.data.len() * 4 + self.labels.len() * 2 + self.len() * 4,
        );
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        for p in &self.prompt_ids {
            out.extend_from_slice(&p.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != STORE_MAGIC {
            return Err(StoreError::BadMagic);
        }
        let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() < 12 + h {
            return Err(StoreError::TruncatedPayload {
                expected: h,
                found: bytes.len() - 12,
            });
        }
        let header: StoreHeader = serde_json::from_slice(&bytes[12..12 + h])
            .map_err(|e| StoreError::Header(e.to_string()))?;
        if header.version != STORE_VERSION {
            return Err(StoreError::VersionMismatch {
                found: header.version,
                expected: STORE_VERSION,
            });
        }
        if header.dtype != "f32le" {
            return Err(StoreError::Header(format!(
                "unsupported dtype {:?}",
                header.dtype
            )));
        }
        header.schema.validate()?;
        let n = header.count;
        let a = header.schema.len();
        let payload = &bytes[12 + h..];
        let expected = n * header.dim * 4 + n * a * 2 + n * 4;
        if payload.len() < expected {
            return Err(StoreError::TruncatedPayload {
                expected,
                found: payload.len(),
            });
        }
        let (floats, rest) = payload.split_at(n * header.dim * 4);
        let (labels, ids) = rest.split_at(n * a * 2);
        let data = floats
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let labels = labels
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let prompt_ids = ids[..n * 4]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let ds = Self {
            location: header.location,
            schema: header.schema,
            dim: header.dim,
            data,
            labels,
            prompt_ids,
        };
        ds.check_labels()?;
        ds.validate()?;
        Ok(ds)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreHeader {
    version: u32,
    dim: usize,
    count: usize,
    location: LocationId,
    schema: AttributeSchema,
    dtype: String,
}

pub fn write_store(dataset: &ActivationDataset, path: impl AsRef<Path>) -> Result<()> {
    let bytes = dataset.to_bytes()?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    file.sync_all()?;
    Ok(())
}

pub fn read_store(path: impl AsRef<Path>) -> Result<ActivationDataset> {
    let bytes = fs::read(path)?;
    ActivationDataset::from_bytes(&bytes)
}

/// Seeded random train/test partition. `round(N * test_fraction)` rows (clamped to
/// `1..N-1`) go to the test side; both sides keep the original row order.
pub fn split(
    dataset: &ActivationDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(ActivationDataset, ActivationDataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(StoreError::BadFraction(test_fraction));
    }
    let n = dataset.len();
    if n < 2 {
        return Err(StoreError::Invalid("split needs at least 2 rows".into()));
    }
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test: Vec<usize> = order[..n_test].to_vec();
    let mut train: Vec<usize> = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

/// Row indices grouped by the value of `attribute`. Only values that occur appear.
pub fn partition_by(
    dataset: &ActivationDataset,
    attribute: &str,
) -> Result<BTreeMap<usize, Vec<usize>>> {
    let attr = dataset.schema.index_of(attribute)?;
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..dataset.len() {
        groups.entry(dataset.label(i, attr)).or_default().push(i);
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema2() -> AttributeSchema {
        AttributeSchema::new(vec![Attribute::new(
            "Pos",
            vec!["ABB".into(), "BAB".into()],
        )])
        .unwrap()
    }

    fn tiny(n: usize) -> ActivationDataset {
        let data = (0..n * 2).map(|x| x as f32 * 0.5).collect();
        let labels = (0..n).map(|i| (i % 2) as u16).collect();
        ActivationDataset::new(
            LocationId::default(),
            schema2(),
            2,
            data,
            labels,
            (0..n as u32).collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_row_round_trip() {
        let ds = tiny(1);
        let back = ActivationDataset::from_bytes(&ds.to_bytes().unwrap()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn nan_row_is_named() {
        let mut ds = tiny(5);
        ds.data[3 * 2 + 1] = f32::NAN;
        match ds.to_bytes() {
            Err(StoreError::NonFinite { row }) => assert_eq!(row, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn label_out_of_range_is_detected_on_read() {
        let ds = tiny(3);
        let mut bytes = ds.to_bytes().unwrap();
        let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let label_start = 12 + h + 3 * 2 * 4;
        bytes[label_start..label_start + 2].copy_from_slice(&2u16.to_le_bytes());
        assert!(matches!(
            ActivationDataset::from_bytes(&bytes),
            Err(StoreError::LabelOutOfRange { row: 0, index: 2, .. })
        ));
    }

    #[test]
    fn truncated_and_bad_magic() {
        let bytes = tiny(4).to_bytes().unwrap();
        assert!(matches!(
            ActivationDataset::from_bytes(&bytes[..bytes.len() - 5]),
            Err(StoreError::TruncatedPayload { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            ActivationDataset::from_bytes(&bad),
            Err(StoreError::BadMagic)
        ));
    }

    #[test]
    fn version_mismatch() {
        let ds = tiny(2);
        let bytes = ds.to_bytes().unwrap();
        let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[12..12 + h])
            .unwrap()
            .replace("\"version\":1", "\"version\":7");
        let mut out = Vec::new();
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&bytes[12 + h..]);
        assert!(matches!(
            ActivationDataset::from_bytes(&out),
            Err(StoreError::VersionMismatch { found: 7, .. })
        ));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = tiny(10);
        let (train, test) = split(&ds, 0.5, 0).unwrap();
        assert_eq!((train.len(), test.len()), (5, 5));
        let mut all: Vec<u32> = train.prompt_ids.iter().chain(&test.prompt_ids).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let (train2, test2) = split(&ds, 0.5, 0).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);
        assert!(matches!(split(&ds, 1.0, 0), Err(StoreError::BadFraction(_))));
        assert!(matches!(split(&ds, 0.0, 0), Err(StoreError::BadFraction(_))));
    }

    #[test]
    fn split_of_25000_rows_is_20000_and_5000() {
        let ds = tiny(25_000);
        let (train, test) = split(&ds, 0.2, 3).unwrap();
        assert_eq!((train.len(), test.len()), (20_000, 5_000));
    }

    #[test]
    fn partition_groups() {
        let ds = tiny(100);
        let groups = partition_by(&ds, "Pos").unwrap();
        assert_eq!(groups.len(), 2);
        assert!(groups.values().all(|g| g.len() == 50));
        assert!(matches!(
            partition_by(&ds, "IO"),
            Err(StoreError::UnknownAttribute(_))
        ));

        let mut same = tiny(7);
        same.labels.iter_mut().for_each(|l| *l = 1);
        let groups = partition_by(&same, "Pos").unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[&1].len(), 7);
    }

    #[test]
    fn schema_rejects_duplicates() {
        assert!(AttributeSchema::new(vec![
            Attribute::new("a", vec!["x".into()]),
            Attribute::new("a", vec!["y".into()]),
        ])
        .is_err());
        assert!(AttributeSchema::new(vec![Attribute::new("a", vec!["x".into(), "x".into()])]).is_err());
        assert!(AttributeSchema::new(vec![Attribute::new("a", vec![])]).is_err());
    }

    #[test]
    fn location_serializes_with_fixed_roles() {
        let loc = LocationId::new(10, 0, Site::AttnOutput, TokenRole::S1plus1);
        let json = serde_json::to_string(&loc).unwrap();
        assert_eq!(
            json,
            r#"{"layer":10,"head":0,"site":"attn_output","token_role":"S1plus1"}"#
        );
        let end: TokenRole = serde_json::from_str("\"END\"").unwrap();
        assert_eq!(end, TokenRole::End);
    }
}
