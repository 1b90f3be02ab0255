//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! magic "TSFMCKPT" | version u32 | config length u64 | config JSON
//! tensor count u32 | per tensor: name length u32, name, rows u64, cols u64, f64 values
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{EncoderClassifier, ModelConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TSFMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn wrap(e: std::io::Error) -> Error {
    Error::Checkpoint(e.to_string())
}

pub fn write_checkpoint<T: Scalar, W: Write>(
    model: &EncoderClassifier<T>,
    mut out: W,
) -> Result<()> {
    let config = serde_json::to_vec(model.config())
        .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    out.write_all(CHECKPOINT_MAGIC).map_err(wrap)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())
        .map_err(wrap)?;
    out.write_all(&(config.len() as u64).to_le_bytes())
        .map_err(wrap)?;
    out.write_all(&config).map_err(wrap)?;
    out.write_all(&(model.params().len() as u32).to_le_bytes())
        .map_err(wrap)?;
    for t in model.params().iter() {
        out.write_all(&(t.name.len() as u32).to_le_bytes())
            .map_err(wrap)?;
        out.write_all(t.name.as_bytes()).map_err(wrap)?;
        out.write_all(&(t.value.rows() as u64).to_le_bytes())
            .map_err(wrap)?;
        out.write_all(&(t.value.cols() as u64).to_le_bytes())
            .map_err(wrap)?;
        let mut buf = Vec::with_capacity(8 * t.value.len());
        for v in t.value.as_slice() {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        out.write_all(&buf).map_err(wrap)?;
    }
    out.flush().map_err(wrap)
}

pub fn save_checkpoint<T: Scalar>(model: &EncoderClassifier<T>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(model, std::io::BufWriter::new(file))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(wrap)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(wrap)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads a checkpoint. With `expected` set, a stored configuration that
/// differs is an error.
pub fn read_checkpoint<T: Scalar, R: Read>(
    mut input: R,
    expected: Option<&ModelConfig>,
) -> Result<EncoderClassifier<T>> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(wrap)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = read_u32(&mut input)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = read_u64(&mut input)? as usize;
    if len > 1 << 20 {
        return Err(Error::Checkpoint(format!("config block of {len} bytes")));
    }
    let mut config = vec![0u8; len];
    input.read_exact(&mut config).map_err(wrap)?;
    let config: ModelConfig =
        serde_json::from_slice(&config).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    if let Some(want) = expected {
        if *want != config {
            return Err(Error::Checkpoint(format!(
                "stored configuration {config:?} does not match {want:?}"
            )));
        }
    }
    let mut model = EncoderClassifier::<T>::zeroed(&config)?;
    let count = read_u32(&mut input)? as usize;
    if count != model.params().len() {
        return Err(Error::Checkpoint(format!(
            "{count} tensors stored, {} expected",
            model.params().len()
        )));
    }
    for id in model.params().ids().collect::<Vec<_>>() {
        let name_len = read_u32(&mut input)? as usize;
        if name_len > 1024 {
            return Err(Error::Checkpoint(format!(
                "tensor name of {name_len} bytes"
            )));
        }
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name).map_err(wrap)?;
        let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let rows = read_u64(&mut input)? as usize;
        let cols = read_u64(&mut input)? as usize;
        let tensor = model.params_mut().get_mut(id);
        if name != tensor.name || (rows, cols) != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} {rows}x{cols} where {} {:?} expected",
                tensor.name,
                tensor.shape()
            )));
        }
        let mut buf = vec![0u8; 8 * rows * cols];
        input.read_exact(&mut buf).map_err(wrap)?;
        for (dst, chunk) in tensor
            .value
            .as_mut_slice()
            .iter_mut()
            .zip(buf.chunks_exact(8))
        {
            *dst = T::of(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest).map_err(wrap)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(model)
}

pub fn load_checkpoint<T: Scalar>(
    path: &Path,
    expected: Option<&ModelConfig>,
) -> Result<EncoderClassifier<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file), expected)
}
