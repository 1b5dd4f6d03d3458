//! Binary parameter checkpoints.
//!
//! Layout (little endian): the 8-byte magic, then `u64` in_dim, out_dim,
//! hidden_layers, width, seed, parameter count, then the parameters as `f64`.

use std::io::{Read, Write};

use super::{MlpArch, MlpParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AQNNCK01";

pub fn write_checkpoint<W: Write>(mut out: W, params: &MlpParams) -> Result<()> {
    let a = params.arch();
    out.write_all(CHECKPOINT_MAGIC)?;
    for v in [
        a.in_dim as u64,
        a.out_dim as u64,
        a.hidden_layers as u64,
        a.width as u64,
        params.seed(),
        params.len() as u64,
    ] {
        out.write_all(&v.to_le_bytes())?;
    }
    for v in params.values() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<MlpParams> {
    let mut magic = [0u8; 8];
    input
        .read_exact(&mut magic)
        .map_err(|e| Error::Checkpoint(format!("missing magic: {e}")))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let in_dim = read_u64(&mut input)? as usize;
    let out_dim = read_u64(&mut input)? as usize;
    let layers = read_u64(&mut input)? as usize;
    let width = read_u64(&mut input)? as usize;
    let seed = read_u64(&mut input)?;
    let count = read_u64(&mut input)? as usize;
    let arch = MlpArch::new(in_dim, out_dim, layers, width)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if count != arch.num_params() {
        return Err(Error::Checkpoint(format!(
            "header declares {count} parameters but the architecture has {}",
            arch.num_params()
        )));
    }
    let mut values = Vec::with_capacity(count);
    let mut b = [0u8; 8];
    for _ in 0..count {
        input
            .read_exact(&mut b)
            .map_err(|e| Error::Checkpoint(format!("truncated parameters: {e}")))?;
        values.push(f64::from_le_bytes(b));
    }
    MlpParams::from_vec(arch, seed, values).map_err(|e| Error::Checkpoint(e.to_string()))
}
