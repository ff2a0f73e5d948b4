//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    b"MGVT"
//! version  u32 (= 1)
//! meta_len u32, followed by meta_len bytes of UTF-8 JSON:
//!          {"model": ModelConfig, "inference_head": usize}
//! count    u32
//! count × { name_len u32, name bytes, rows u32, cols u32, rows*cols f64 }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{MgVit, ModelConfig, ModelError, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Mat;

const MAGIC: &[u8; 4] = b"MGVT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("I/O failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed metadata: {0}")]
    Metadata(#[from] serde_json::Error),
    #[error("malformed tensor table: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    inference_head: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: MgVit<T>,
    /// Classifier head used at inference time.
    pub inference_head: usize,
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, w: &mut impl Write) -> Result<(), CheckpointError> {
    let meta = serde_json::to_vec(&Meta { model: ckpt.model.config().clone(), inference_head: ckpt.inference_head })?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(&meta)?;
    let params = ckpt.model.params();
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rows() as u32).to_le_bytes())?;
        w.write_all(&(t.cols() as u32).to_le_bytes())?;
        for v in t.data() {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<T: Scalar>(r: &mut impl Read) -> Result<Checkpoint<T>, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let meta_len = read_u32(r)? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)?;
    let meta: Meta = serde_json::from_slice(&meta)?;
    let count = read_u32(r)? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
        let rows = read_u32(r)? as usize;
        let cols = read_u32(r)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut b = [0u8; 8];
        for _ in 0..rows * cols {
            r.read_exact(&mut b)?;
            data.push(T::of(f64::from_le_bytes(b)));
        }
        params.push(name, Mat::from_vec(rows, cols, data));
    }
    if meta.inference_head >= meta.model.num_heads_classifier {
        return Err(CheckpointError::Malformed(format!("inference head {} out of range", meta.inference_head)));
    }
    let model = MgVit::from_params(meta.model, params)?;
    Ok(Checkpoint { model, inference_head: meta.inference_head })
}

pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    write_checkpoint(ckpt, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>, CheckpointError> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(&mut bytes.as_slice())
}
