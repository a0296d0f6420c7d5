use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{init_params, ModelError, ModelParams, ModelSpec};
use crate::numerics::Matrix;

pub const CHECKPOINT_BIN: &str = "model.bin";
pub const CHECKPOINT_JSON: &str = "model.json";
const MAGIC: &[u8; 4] = b"PARC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub spec: ModelSpec,
    pub seed: u64,
    pub epoch: usize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Writes `model.bin` (named little-endian `f64` tensors) and `model.json`.
pub fn save_checkpoint(
    dir: &Path,
    params: &ModelParams,
    manifest: &CheckpointManifest,
) -> Result<(), ModelError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let bin = dir.join(CHECKPOINT_BIN);
    let mut w = BufWriter::new(fs::File::create(&bin).map_err(io_err(&bin))?);
    let named = params.named();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, m) in named {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for v in m.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io_err(&bin))?;
        buf.clear();
    }
    w.flush().map_err(io_err(&bin))?;
    let json = dir.join(CHECKPOINT_JSON);
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    fs::write(&json, text).map_err(io_err(&json))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ModelError::Checkpoint("truncated tensor file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelParams, CheckpointManifest), ModelError> {
    let json = dir.join(CHECKPOINT_JSON);
    let manifest: CheckpointManifest =
        serde_json::from_str(&fs::read_to_string(&json).map_err(io_err(&json))?)
            .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", json.display())))?;
    let bin = dir.join(CHECKPOINT_BIN);
    let mut bytes = Vec::new();
    fs::File::open(&bin)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(&bin))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if cur.take(4)? != MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut params = init_params(&manifest.spec, 0)?;
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let count = cur.u32()? as usize;
    if count != names.len() {
        return Err(ModelError::Checkpoint(format!(
            "expected {} tensors, found {count}",
            names.len()
        )));
    }
    for (expected, slot) in names.iter().zip(params.leaves_mut()) {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| ModelError::Checkpoint("tensor name is not utf-8".into()))?;
        if name != expected {
            return Err(ModelError::Checkpoint(format!(
                "expected tensor `{expected}`, found `{name}`"
            )));
        }
        let (rows, cols) = (cur.u64()? as usize, cur.u64()? as usize);
        if (rows, cols) != slot.shape() {
            return Err(ModelError::Checkpoint(format!(
                "tensor `{name}` has shape {rows}x{cols}, expected {:?}",
                slot.shape()
            )));
        }
        let raw = cur.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        *slot = Matrix::from_vec(rows, cols, data)?;
    }
    if cur.pos != bytes.len() {
        return Err(ModelError::Checkpoint("trailing bytes after tensors".into()));
    }
    Ok((params, manifest))
}
