//! Binary parameter checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "AUMN"                          4-byte magic
//! version                         u32 (currently 1)
//! input_dim embed_dim classes templates key_reduction bottleneck kernel
//!                                 7 × u32
//! w_emb b_emb memory w_key b_key w_val1 b_val1 w_val2 b_val2 w_query b_query
//!                                 f64 payloads, row-major, sizes implied by the dims
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{ModelDims, ModelParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"AUMN";
pub const CHECKPOINT_VERSION: u32 = 1;

fn dims_fields(d: &ModelDims) -> [usize; 7] {
    [
        d.input_dim,
        d.embed_dim,
        d.classes,
        d.templates,
        d.key_reduction,
        d.bottleneck,
        d.kernel,
    ]
}

pub fn write_checkpoint(params: &ModelParams, mut out: impl Write) -> std::io::Result<()> {
    out.write_all(&CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for v in dims_fields(&params.dims) {
        out.write_all(&(v as u32).to_le_bytes())?;
    }
    for tensor in params.tensors() {
        for v in tensor {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Parses a checkpoint from raw bytes; `path` is used for error messages only.
pub fn read_checkpoint(bytes: &[u8], path: &Path) -> Result<ModelParams> {
    let truncated = |expected: usize| Error::Truncated {
        path: path.to_path_buf(),
        expected: expected as u64,
        found: bytes.len() as u64,
    };
    let header_len = 4 + 4 + 7 * 4;
    if bytes.len() < header_len {
        return Err(truncated(header_len));
    }
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[..4]);
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let f: Vec<usize> = (0..7).map(|i| u32_at(8 + 4 * i) as usize).collect();
    let dims = ModelDims {
        input_dim: f[0],
        embed_dim: f[1],
        classes: f[2],
        templates: f[3],
        key_reduction: f[4],
        bottleneck: f[5],
        kernel: f[6],
    };
    dims.validate()?;
    let mut params = ModelParams::zeros(dims)?;
    let expected = header_len + 8 * params.parameter_count();
    if bytes.len() < expected {
        return Err(truncated(expected));
    }
    if bytes.len() > expected {
        return Err(Error::invalid(
            "checkpoint",
            format!("{} trailing bytes after payload", bytes.len() - expected),
        ));
    }
    let mut offset = header_len;
    for tensor in params.tensors_mut() {
        for v in tensor.iter_mut() {
            *v = f64::from_le_bytes(bytes[offset..offset + 8].try_into().expect("8 bytes"));
            offset += 8;
        }
    }
    if let Some(name) = params.first_non_finite() {
        return Err(Error::NonFinite {
            tensor: format!("checkpoint tensor {name}"),
        });
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(36 + 8 * params.parameter_count());
    write_checkpoint(params, &mut buf).expect("writing to a Vec cannot fail");
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes, path)
}
