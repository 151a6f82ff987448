//! Checkpoint files: the full hyperparameter block plus every named
//! parameter tensor, stored as 32-bit floats.
//!
//! Layout: magic `CAAEDCKPT`; u32 length + UTF-8 key=value config block;
//! u32 tensor count; per tensor a u32 length + UTF-8 name, u32 rank,
//! rank u32 extents, and the row-major f32 values. All integers are
//! little-endian. Loading validates the tensor set — names and shapes —
//! against the registry implied by the config, so a checkpoint can only ever
//! deserialize into exactly the model that wrote it.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::params::{validate_against_registry, Params};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 9] = b"CAAEDCKPT";
/// Sanity caps so corrupt headers cannot demand huge allocations.
const MAX_CONFIG_BYTES: u32 = 1 << 16;
const MAX_NAME_BYTES: u32 = 1 << 10;
const MAX_TENSORS: u32 = 1 << 16;
const MAX_RANK: u32 = 8;
const MAX_ELEMS: u64 = 1 << 26;

pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Params,
}

pub fn write_checkpoint(path: &Path, config: &ModelConfig, params: &Params) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    let kv = config.to_kv();
    w.write_all(&u32::try_from(kv.len()).map_err(|_| too_big("config block"))?.to_le_bytes())?;
    w.write_all(kv.as_bytes())?;
    let count = params.iter().count();
    w.write_all(&u32::try_from(count).map_err(|_| too_big("tensor count"))?.to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&u32::try_from(name.len()).map_err(|_| too_big("name"))?.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let shape = t.shape();
        w.write_all(&u32::try_from(shape.len()).map_err(|_| too_big("rank"))?.to_le_bytes())?;
        for &d in shape {
            w.write_all(&u32::try_from(d).map_err(|_| too_big("extent"))?.to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn too_big(what: &str) -> Error {
    Error::Data(format!("{what} too large for the checkpoint format"))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    parse_checkpoint(BufReader::new(std::fs::File::open(path)?))
}

/// Parse a checkpoint from any byte stream. Never panics or over-allocates
/// on malformed input; every defect is a data error.
pub fn parse_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 9];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Data("not a checkpoint file (bad magic)".into()));
    }
    let kv_len = read_u32(&mut r)?;
    if kv_len > MAX_CONFIG_BYTES {
        return Err(Error::Data(format!("config block of {kv_len} bytes exceeds the cap")));
    }
    let mut kv = vec![0u8; kv_len as usize];
    r.read_exact(&mut kv).map_err(truncated)?;
    let kv = String::from_utf8(kv)
        .map_err(|_| Error::Data("config block is not valid UTF-8".into()))?;
    let config = ModelConfig::from_kv(&kv)?;

    let count = read_u32(&mut r)?;
    if count > MAX_TENSORS {
        return Err(Error::Data(format!("{count} tensors exceeds the cap")));
    }
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)?;
        if name_len > MAX_NAME_BYTES {
            return Err(Error::Data(format!("tensor name of {name_len} bytes exceeds the cap")));
        }
        let mut name = vec![0u8; name_len as usize];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Data("tensor name is not valid UTF-8".into()))?;
        let rank = read_u32(&mut r)?;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Data(format!("tensor rank {rank} is out of range")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = read_u32(&mut r)?;
            numel = numel.saturating_mul(d as u64);
            shape.push(d as usize);
        }
        if numel == 0 || numel > MAX_ELEMS {
            return Err(Error::Data(format!("tensor of {numel} elements is out of range")));
        }
        let mut data = Vec::with_capacity(numel as usize);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut buf).map_err(truncated)?;
            let v = f32::from_le_bytes(buf);
            if !v.is_finite() {
                return Err(Error::Data("tensor value is not finite".into()));
            }
            data.push(v as f64);
        }
        if tensors.insert(name.clone(), Tensor::from_vec(shape, data)?).is_some() {
            return Err(Error::Data(format!("tensor {name} appears twice")));
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(Error::Io)? != 0 {
        return Err(Error::Data("trailing bytes after the last tensor".into()));
    }
    validate_against_registry(&config, &tensors)?;
    Ok(Checkpoint { config, params: Params::from_map(tensors) })
}

fn truncated(_: std::io::Error) -> Error {
    Error::Data("checkpoint file is truncated".into())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(u32::from_le_bytes(buf))
}
