//! Binary checkpoint format.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes  "DLMCKPT\0"
//! version    u32      1
//! layers, model_dim, heads, ff_dim, vocab_size, max_len   u32 each
//! params     u64      parameter count P
//! has_opt    u32      0 or 1
//! step       u64      optimizer steps taken
//! weights    P x f32
//! opt_state  P x f32  (only when has_opt = 1)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{DenoiserParams, ModelConfig, TimeEmbed};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"DLMCKPT\0";
const VERSION: u32 = 1;

/// Model weights plus optional optimizer state for exact resumption.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: DenoiserParams,
    pub step: u64,
    /// Per-parameter second-moment estimates of the optimizer.
    pub opt_state: Option<Vec<f32>>,
}

impl Checkpoint {
    pub fn weights_only(params: DenoiserParams) -> Self {
        Self {
            params,
            step: 0,
            opt_state: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = &self.params.config;
        let n = self.params.values.len();
        let mut out = Vec::with_capacity(64 + 8 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [cfg.layers, cfg.model_dim, cfg.heads, cfg.ff_dim, cfg.vocab_size, cfg.max_len] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&u32::from(self.opt_state.is_some()).to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        for x in &self.params.values {
            out.extend_from_slice(&x.to_le_bytes());
        }
        if let Some(opt) = &self.opt_state {
            for x in opt {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::BadCheckpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::BadCheckpoint(format!("unsupported version {version}")));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = read_u32(&mut r)? as usize;
        }
        let config = ModelConfig {
            layers: dims[0],
            model_dim: dims[1],
            heads: dims[2],
            ff_dim: dims[3],
            vocab_size: dims[4],
            max_len: dims[5],
            time_embed: TimeEmbed::Sinusoidal,
        };
        config.validate()?;
        let n = read_u64(&mut r)? as usize;
        if n != config.param_count() {
            return Err(Error::BadCheckpoint(format!(
                "parameter count {n} does not match config ({})",
                config.param_count()
            )));
        }
        let has_opt = match read_u32(&mut r)? {
            0 => false,
            1 => true,
            x => return Err(Error::BadCheckpoint(format!("bad optimizer flag {x}"))),
        };
        let step = read_u64(&mut r)?;
        let values = read_f32s(&mut r, n)?;
        let opt_state = if has_opt { Some(read_f32s(&mut r, n)?) } else { None };
        if !r.is_empty() {
            return Err(Error::BadCheckpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Self {
            params: DenoiserParams::from_values(&config, values)?,
            step,
            opt_state,
        })
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::BadCheckpoint("truncated".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32s(r: &mut &[u8], n: usize) -> Result<Vec<f32>> {
    if r.len() < 4 * n {
        return Err(Error::BadCheckpoint("truncated".into()));
    }
    let (head, tail) = r.split_at(4 * n);
    *r = tail;
    Ok(head
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&ckpt.to_bytes())?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
