//! Self-describing checkpoint container, all integers little-endian:
//!
//! ```text
//! b"TEMTCKPT" | u32 version | u32 header_len | header JSON {config, trained_steps}
//! u32 tensor_count, then per tensor:
//!   u32 name_len | name (UTF-8) | u32 rank | u64 extents[rank] | f64 data[prod(extents)]
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TEMTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    trained_steps: u64,
}

pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        trained_steps: model.trained_steps,
    })?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for e in t.shape() {
            buf.extend_from_slice(&(*e as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    if bytes.len() - *pos < n {
        return Err(Error::Truncated(format!("checkpoint needs {n} bytes at offset {pos}")));
    }
    let s = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

fn u32_at(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, pos, 4)?.try_into().unwrap()))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut pos = 0;
    if take(bytes, &mut pos, 8).map_err(|_| Error::BadMagic)? != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic);
    }
    let version = u32_at(bytes, &mut pos)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let hlen = u32_at(bytes, &mut pos)? as usize;
    let header: Header = serde_json::from_slice(take(bytes, &mut pos, hlen)?)?;
    header.config.validate()?;
    let count = u32_at(bytes, &mut pos)? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let nlen = u32_at(bytes, &mut pos)? as usize;
        let name = std::str::from_utf8(take(bytes, &mut pos, nlen)?)
            .map_err(|_| Error::Corrupt("parameter name is not UTF-8".into()))?
            .to_owned();
        let rank = u32_at(bytes, &mut pos)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(bytes, &mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let data = take(bytes, &mut pos, n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    if pos != bytes.len() {
        return Err(Error::Corrupt("trailing bytes after the last tensor".into()));
    }
    if !params.is_finite() {
        return Err(Error::Corrupt("checkpoint holds non-finite parameters".into()));
    }
    // Shapes must match what this configuration expects.
    let reference = Model::init(header.config.clone(), &mut rand::rngs::mock::StepRng::new(0, 1))?;
    if reference.params.len() != params.len()
        || reference
            .params
            .iter()
            .any(|(n, t)| params.get(n).map(Tensor::shape) != Some(t.shape()))
    {
        return Err(Error::Corrupt("parameter set does not match the stored configuration".into()));
    }
    Ok(Model {
        config: header.config,
        params,
        trained_steps: header.trained_steps,
    })
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    decode_checkpoint(&fs::read(path)?)
}
