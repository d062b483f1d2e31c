//! Binary checkpoint format.
//!
//! ```text
//! "MCTG1"
//! u64 LE   length of config JSON
//! bytes    config JSON (UTF-8)
//! u64 LE   number of blocks
//! per block, in ModelParams visitation order:
//!   u64 LE name length, name bytes, u64 LE rows, u64 LE cols,
//!   rows*cols f64 LE, row-major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{BaseModel, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8] = b"MCTG1";

pub(crate) fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| Error::Format("truncated integer".into()))?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    write_u64(w, s.len() as u64)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub(crate) fn read_str(r: &mut impl Read, limit: usize) -> Result<String> {
    let n = read_u64(r)? as usize;
    if n > limit {
        return Err(Error::Format(format!("string of {n} bytes exceeds {limit}")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(|_| Error::Format("truncated string".into()))?;
    String::from_utf8(b).map_err(|_| Error::Format("string is not UTF-8".into()))
}

pub(crate) fn write_block(w: &mut impl Write, name: &str, t: &Tensor) -> Result<()> {
    write_str(w, name)?;
    write_u64(w, t.rows() as u64)?;
    write_u64(w, t.cols() as u64)?;
    let mut buf = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads one block of any name and shape.
pub(crate) fn read_block_any(r: &mut impl Read) -> Result<(String, Tensor)> {
    let name = read_str(r, 4096)?;
    let rows = read_u64(r)? as usize;
    let cols = read_u64(r)? as usize;
    if rows.checked_mul(cols).map_or(true, |n| n > 1 << 24) {
        return Err(Error::Format(format!("block `{name}` is {rows}x{cols}")));
    }
    let t = read_data(r, &name, rows, cols)?;
    Ok((name, t))
}

/// Reads one block and checks it against the expected name and shape.
pub(crate) fn read_block(r: &mut impl Read, name: &str, shape: (usize, usize)) -> Result<Tensor> {
    let found = read_str(r, 4096)?;
    if found != name {
        return Err(Error::Format(format!("expected block `{name}`, found `{found}`")));
    }
    let rows = read_u64(r)? as usize;
    let cols = read_u64(r)? as usize;
    if (rows, cols) != shape {
        return Err(Error::Format(format!("block `{name}` is {rows}x{cols}, expected {}x{}", shape.0, shape.1)));
    }
    read_data(r, name, rows, cols)
}

fn read_data(r: &mut impl Read, name: &str, rows: usize, cols: usize) -> Result<Tensor> {
    let mut buf = vec![0u8; rows * cols * 8];
    r.read_exact(&mut buf).map_err(|_| Error::Format(format!("block `{name}` truncated")))?;
    let data = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    Tensor::new(rows, cols, data)
}

pub fn write_checkpoint(w: &mut impl Write, model: &BaseModel) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    write_str(w, &serde_json::to_string(&model.config)?)?;
    let layout = model.params.layout();
    write_u64(w, layout.len() as u64)?;
    let mut result = Ok(());
    model.params.visit(&mut |name, t| {
        if result.is_ok() {
            result = write_block(w, name, t);
        }
    });
    result
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<BaseModel> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(|_| Error::Format("file too short".into()))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let config: ModelConfig = serde_json::from_str(&read_str(r, 1 << 20)?)?;
    config.validate()?;
    let template = ModelParams::init(&config, &mut Rng::new(0));
    let count = read_u64(r)? as usize;
    if count != template.layout().len() {
        return Err(Error::Format(format!("{count} blocks, expected {}", template.layout().len())));
    }
    let params = template.try_map(&mut |name, t| read_block(r, name, t.shape()))?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after last block".into()));
    }
    BaseModel::from_parts(config, params, true)
}

pub fn save_checkpoint(path: &Path, model: &BaseModel) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, model)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<BaseModel> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    read_checkpoint(&mut bytes.as_slice())
}
