//! Binary checkpoints: model parameters, optimizer state and training
//! position.
//!
//! Layout: `TNETCKPT`, a little-endian `u32` version, a `u32` header length,
//! a JSON header, then every parameter and every momentum buffer as
//! little-endian `f32` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::convnet::{Model, ModelSpec};
use crate::error::{Error, Result};
use crate::optim::SgdState;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"TNETCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    /// Epochs fully completed.
    epoch: usize,
    /// Optimizer updates applied.
    step: u64,
    best_val_error: Option<f64>,
    params: Vec<Vec<usize>>,
    velocity: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: SgdState,
    pub epoch: usize,
    pub best_val_error: Option<f64>,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = Header {
            spec: self.model.spec().clone(),
            epoch: self.epoch,
            step: self.optimizer.steps,
            best_val_error: self.best_val_error,
            params: self.model.params().iter().map(|p| p.shape().to_vec()).collect(),
            velocity: self.optimizer.velocity.iter().map(|p| p.shape().to_vec()).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((json.len() as u32).to_le_bytes());
        out.extend(json);
        for t in self.model.params().iter().chain(&self.optimizer.velocity) {
            for v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |offset: usize, detail: String| Error::Malformed {
            format: "checkpoint",
            offset: offset as u64,
            detail,
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad(0, "missing TNETCKPT magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(8, format!("unsupported version {version}")));
        }
        let len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let json = bytes
            .get(16..16 + len)
            .ok_or_else(|| bad(12, format!("header length {len} exceeds file")))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| bad(16, e.to_string()))?;
        let mut pos = 16 + len;
        let mut read_tensor = |shape: &Vec<usize>| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let raw = bytes
                .get(pos..pos + 4 * n)
                .ok_or_else(|| bad(pos, format!("truncated tensor of {n} values")))?;
            pos += 4 * n;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::new(shape.clone(), data)
        };
        let params = header.params.iter().map(&mut read_tensor).collect::<Result<Vec<_>>>()?;
        let velocity = header.velocity.iter().map(&mut read_tensor).collect::<Result<Vec<_>>>()?;
        if pos != bytes.len() {
            return Err(bad(pos, format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Self {
            model: Model::from_params(header.spec, params)?,
            optimizer: SgdState {
                velocity,
                steps: header.step,
            },
            epoch: header.epoch,
            best_val_error: header.best_val_error,
        })
    }

    /// Writes via a temporary file and rename, so a crash never leaves a
    /// half-written checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.encode()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
