use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{Result, SaeError, SaeParams, TrainConfig};

const MAGIC: &[u8; 8] = b"SAECKPT1";

/// Parameters plus the settings they were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: SaeParams,
    pub config: TrainConfig,
    pub epoch: usize,
    pub input_scale: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    n: usize,
    m: usize,
    epoch: usize,
    input_scale: f64,
    config: TrainConfig,
}

fn put(buf: &mut Vec<u8>, xs: impl IntoIterator<Item = f64>) {
    for x in xs {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.params.check_shapes()?;
        let header = Header {
            version: 1,
            n: self.params.n(),
            m: self.params.m(),
            epoch: self.epoch,
            input_scale: self.input_scale,
            config: self.config.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| SaeError::Format(e.to_string()))?;
        let mut buf = Vec::with_capacity(16 + json.len() + 4 * (2 * header.n * header.m + header.n + header.m));
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        let p = &self.params;
        put(&mut buf, p.w_enc.iter().copied());
        put(&mut buf, p.b_enc.iter().copied());
        put(&mut buf, p.w_dec.iter().copied());
        put(&mut buf, p.b_dec.iter().copied());
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(SaeError::Format("bad magic".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes
            .get(12..12 + hlen)
            .ok_or_else(|| SaeError::Format("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| SaeError::Format(e.to_string()))?;
        if header.version != 1 {
            return Err(SaeError::Format(format!("unsupported version {}", header.version)));
        }
        let (n, m) = (header.n, header.m);
        let floats = 2 * n * m + n + m;
        let payload = &bytes[12 + hlen..];
        if payload.len() != 4 * floats {
            return Err(SaeError::Format(format!(
                "payload has {} bytes, expected {}",
                payload.len(),
                4 * floats
            )));
        }
        let mut values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
        let mut take = |k: usize| -> Vec<f64> { values.by_ref().take(k).collect() };
        let w_enc = Array2::from_shape_vec((m, n), take(m * n)).unwrap();
        let b_enc = Array1::from(take(m));
        let w_dec = Array2::from_shape_vec((n, m), take(n * m)).unwrap();
        let b_dec = Array1::from(take(n));
        Ok(Self {
            params: SaeParams {
                w_enc,
                b_enc,
                w_dec,
                b_dec,
            },
            config: header.config,
            epoch: header.epoch,
            input_scale: header.input_scale,
        })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    let bytes = checkpoint.to_bytes()?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Checkpoint::from_bytes(&bytes)
}
