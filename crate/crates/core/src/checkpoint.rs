//! Checkpoint persistence: a flat, versioned binary record of all parameter
//! tensors plus the model/train configuration, vocabulary, and the manifest
//! hash of the corpus the model was trained on. Round-trips are bit-exact.

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Params};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"EVGC";

/// Everything stored alongside the raw tensors.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab: Vec<String>,
    pub manifest_hash: String,
}

pub fn save_checkpoint(path: &Path, meta: &CheckpointMeta, params: &Params) -> Result<()> {
    let mut out = Vec::new();
    write_checkpoint(&mut out, meta, params)?;
    fs::write(path, out)?;
    Ok(())
}

pub fn write_checkpoint<W: Write>(out: &mut W, meta: &CheckpointMeta, params: &Params) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let meta_json = serde_json::to_vec(meta)?;
    out.write_all(&(meta_json.len() as u64).to_le_bytes())?;
    out.write_all(&meta_json)?;

    let mut count: u32 = 0;
    params.for_each(|_, _, _| count += 1);
    out.write_all(&count.to_le_bytes())?;
    let mut failure = None;
    params.for_each(|name, shape, data| {
        if failure.is_some() {
            return;
        }
        let mut write = || -> Result<()> {
            out.write_all(&(name.len() as u16).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&(shape[0] as u64).to_le_bytes())?;
            out.write_all(&(shape[1] as u64).to_le_bytes())?;
            for v in data {
                out.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        };
        if let Err(e) = write() {
            failure = Some(e);
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, Params)> {
    let bytes = fs::read(path)?;
    read_checkpoint(&mut &bytes[..])
}

pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<(CheckpointMeta, Params)> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(|_| Error::Format("truncated checkpoint".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("bad checkpoint magic, expected EVGC".into()));
    }
    let mut u32buf = [0u8; 4];
    input.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version.to_string(),
            supported: CHECKPOINT_VERSION.to_string(),
        });
    }
    let mut u64buf = [0u8; 8];
    input.read_exact(&mut u64buf)?;
    let meta_len = u64::from_le_bytes(u64buf) as usize;
    let mut meta_json = vec![0u8; meta_len];
    input.read_exact(&mut meta_json).map_err(|_| Error::Format("truncated checkpoint metadata".into()))?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_json)?;
    meta.model.validate()?;

    input.read_exact(&mut u32buf)?;
    let count = u32::from_le_bytes(u32buf) as usize;

    let mut tensors: Vec<(String, [usize; 2], Vec<f64>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut u16buf = [0u8; 2];
        input.read_exact(&mut u16buf).map_err(|_| Error::Format("truncated tensor header".into()))?;
        let name_len = u16::from_le_bytes(u16buf) as usize;
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name)?;
        input.read_exact(&mut u64buf)?;
        let rows = u64::from_le_bytes(u64buf) as usize;
        input.read_exact(&mut u64buf)?;
        let cols = u64::from_le_bytes(u64buf) as usize;
        let mut data = vec![0.0f64; rows * cols];
        let mut f64buf = [0u8; 8];
        for v in data.iter_mut() {
            input
                .read_exact(&mut f64buf)
                .map_err(|_| Error::Format("truncated tensor data".into()))?;
            *v = f64::from_le_bytes(f64buf);
        }
        let name = String::from_utf8(name).map_err(|_| Error::Format("bad tensor name".into()))?;
        tensors.push((name, [rows, cols], data));
    }

    // rebuild the parameter layout from the stored config, then fill by name
    let mut params = Params::zeros(&meta.model);
    let mut cursor = 0usize;
    let mut mismatch: Option<String> = None;
    params.for_each_mut(|name, data| {
        if mismatch.is_some() {
            return;
        }
        match tensors.get(cursor) {
            Some((stored_name, _, stored)) if stored_name == name && stored.len() == data.len() => {
                data.copy_from_slice(stored);
            }
            Some((stored_name, _, _)) => {
                mismatch = Some(format!("expected tensor '{name}', found '{stored_name}'"));
            }
            None => mismatch = Some(format!("missing tensor '{name}'")),
        }
        cursor += 1;
    });
    if let Some(msg) = mismatch {
        return Err(Error::Format(msg));
    }
    if cursor != tensors.len() {
        return Err(Error::Format("checkpoint carries extra tensors".into()));
    }
    Ok((meta, params))
}
