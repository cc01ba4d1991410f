//! Binary checkpoint: magic, version, JSON header, then little-endian `f32` tensors.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelBundle, ModelConfig, ModelError, Vocab};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CRCG";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vec<String>,
    tensors: Vec<TensorEntry>,
}

pub(crate) fn to_bytes(model: &ModelBundle) -> Vec<u8> {
    let mut offset = 0;
    let tensors = model
        .params()
        .iter()
        .map(|(_, name, m)| {
            let entry = TensorEntry { name: name.to_string(), shape: [m.nrows(), m.ncols()], offset };
            offset += m.len() * 4;
            entry
        })
        .collect();
    let header = Header { config: model.config().clone(), vocab: model.vocab().tokens().to_vec(), tensors };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + offset);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, _, m) in model.params().iter() {
        for &v in m.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub(crate) fn from_bytes(bytes: &[u8]) -> Result<ModelBundle, ModelError> {
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(ModelError::Format("missing CRCG magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| ModelError::Format("header length exceeds file size".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..data_start]).map_err(|e| ModelError::Format(format!("header: {e}")))?;
    let vocab = Vocab::from_tokens(header.vocab)?;
    let mut model = ModelBundle::zeroed(header.config, vocab)?;
    let expected: Vec<(String, (usize, usize))> =
        model.params().iter().map(|(_, name, m)| (name.to_string(), m.dim())).collect();
    if header.tensors.len() != expected.len() {
        return Err(ModelError::Format(format!(
            "manifest lists {} tensors, config implies {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    let data = &bytes[data_start..];
    let mut offset = 0;
    for (entry, (name, shape)) in header.tensors.iter().zip(&expected) {
        if &entry.name != name {
            return Err(ModelError::Format(format!("expected tensor `{name}`, found `{}`", entry.name)));
        }
        let found = (entry.shape[0], entry.shape[1]);
        if found != *shape {
            return Err(ModelError::ShapeMismatch { name: name.clone(), expected: *shape, found });
        }
        if entry.offset != offset {
            return Err(ModelError::Format(format!("tensor `{name}` at offset {}, expected {offset}", entry.offset)));
        }
        offset += shape.0 * shape.1 * 4;
    }
    if data.len() != offset {
        if data.len() > offset {
            return Err(ModelError::Format(format!("{} trailing bytes after tensor data", data.len() - offset)));
        }
        return Err(ModelError::Truncated { expected: offset, found: data.len() });
    }
    let ids: Vec<_> = model.params().ids().collect();
    let mut chunks = data.chunks_exact(4);
    for id in ids {
        for v in model.params_mut().get_mut(id).iter_mut() {
            let raw = chunks.next().expect("length checked");
            *v = f32::from_le_bytes(raw.try_into().expect("4 bytes")) as f64;
        }
    }
    Ok(model)
}

pub fn save_checkpoint(model: &ModelBundle, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&to_bytes(model))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelBundle, ModelError> {
    from_bytes(&fs::read(path)?)
}
