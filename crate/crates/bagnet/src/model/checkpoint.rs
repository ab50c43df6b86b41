//! Checkpoint files: parameters plus optimizer state, bit-exact round-trip.
//!
//! Little-endian binary layout (all floats are f32):
//!
//! ```text
//! magic        8 bytes  "BAGNCKPT"
//! version      u32      currently 1
//! config       10 x u32 full_scale_depth, multi_scale_depth,
//!                       full_scale_channels, multi_scale_channels,
//!                       n_bgb, n_down, n_up, input_channels,
//!                       input_h, input_w
//! per conv layer, declaration order:
//!              weight values, bias values,
//!              if batch-normed: gamma, beta, running_mean, running_var,
//!                               eps, momentum
//! optimizer    u8       0 = none, 1 = Adam
//!   if Adam:   u64 step count, then first and second moments
//!              (one f32 each per learnable scalar, flat order)
//! digest       8 bytes  leading bytes of SHA-256 over everything above
//! ```
//!
//! Declaration order is: full stem, multi stem, the 8 full-branch convs, the
//! 9 multi-branch convs, then per guidance block fuse_multi / fuse_full /
//! proj_full / proj_multi, then the head.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{param_count, BagnetConfig, ModelParams};
use crate::error::{Error, Result};
use crate::train::AdamState;

const MAGIC: &[u8; 8] = b"BAGNCKPT";
const VERSION: u32 = 1;
const DIGEST_LEN: usize = 8;

/// Parameters and optional optimizer state read back from disk.
#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub params: ModelParams<f32>,
    pub optimizer: Option<AdamState<f32>>,
}

pub fn save_checkpoint(
    params: &ModelParams<f32>,
    optimizer: Option<&AdamState<f32>>,
    path: &Path,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let c = &params.config;
    for v in [
        c.full_scale_depth,
        c.multi_scale_depth,
        c.full_scale_channels,
        c.multi_scale_channels,
        c.n_bgb,
        c.n_down,
        c.n_up,
        c.input_channels,
        c.input_size.0,
        c.input_size.1,
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for conv in params.convs() {
        write_f32s(&mut buf, conv.weight.data());
        write_f32s(&mut buf, conv.bias.data());
        if let Some(norm) = &conv.norm {
            write_f32s(&mut buf, norm.gamma.data());
            write_f32s(&mut buf, norm.beta.data());
            write_f32s(&mut buf, &norm.running.mean);
            write_f32s(&mut buf, &norm.running.var);
            buf.extend_from_slice(&norm.eps.to_le_bytes());
            buf.extend_from_slice(&norm.momentum.to_le_bytes());
        }
    }
    match optimizer {
        None => buf.push(0),
        Some(state) => {
            buf.push(1);
            buf.extend_from_slice(&state.t.to_le_bytes());
            write_f32s(&mut buf, &state.m);
            write_f32s(&mut buf, &state.v);
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest[..DIGEST_LEN]);
    std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

/// Read a checkpoint. When `expect` is given, the stored config must match
/// it exactly; nothing is returned on mismatch.
pub fn load_checkpoint(path: &Path, expect: Option<&BagnetConfig>) -> Result<LoadedCheckpoint> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < MAGIC.len() + DIGEST_LEN {
        return Err(Error::CheckpointTruncated);
    }
    if &buf[..MAGIC.len()] != MAGIC {
        return Err(Error::CheckpointMagic);
    }
    let (body, digest) = buf.split_at(buf.len() - DIGEST_LEN);
    if Sha256::digest(body)[..DIGEST_LEN] != *digest {
        return Err(Error::CheckpointIntegrity);
    }

    let mut r = Reader {
        buf: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let fields: Vec<usize> = (0..10)
        .map(|_| r.u32().map(|v| v as usize))
        .collect::<Result<_>>()?;
    let config = BagnetConfig {
        full_scale_depth: fields[0],
        multi_scale_depth: fields[1],
        full_scale_channels: fields[2],
        multi_scale_channels: fields[3],
        n_bgb: fields[4],
        n_down: fields[5],
        n_up: fields[6],
        input_channels: fields[7],
        input_size: (fields[8], fields[9]),
    };
    config
        .validate()
        .map_err(|e| Error::CheckpointConfig(e.to_string()))?;
    if let Some(expect) = expect {
        if *expect != config {
            return Err(Error::CheckpointConfig(format!(
                "stored {config:?}, expected {expect:?}"
            )));
        }
    }

    // a template with the right shapes everywhere, overwritten field by field
    let mut params = super::init_params::<f32>(&config, 0)?;
    for conv in params.convs_mut() {
        read_into(&mut r, conv.weight.data_mut())?;
        read_into(&mut r, conv.bias.data_mut())?;
        if let Some(norm) = &mut conv.norm {
            read_into(&mut r, norm.gamma.data_mut())?;
            read_into(&mut r, norm.beta.data_mut())?;
            read_into(&mut r, &mut norm.running.mean)?;
            read_into(&mut r, &mut norm.running.var)?;
            norm.eps = r.f32()?;
            norm.momentum = r.f32()?;
        }
    }

    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let t = r.u64()?;
            let n = param_count(&config);
            let mut state = AdamState::new(n);
            state.t = t;
            read_into(&mut r, &mut state.m)?;
            read_into(&mut r, &mut state.v)?;
            Some(state)
        }
        other => {
            return Err(Error::CheckpointConfig(format!(
                "unknown optimizer tag {other}"
            )))
        }
    };
    if r.pos != body.len() {
        return Err(Error::CheckpointIntegrity);
    }
    Ok(LoadedCheckpoint { params, optimizer })
}

fn write_f32s(buf: &mut Vec<u8>, values: &[f32]) {
    buf.reserve(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn bytes(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CheckpointTruncated);
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }
}

fn read_into(r: &mut Reader<'_>, dst: &mut [f32]) -> Result<()> {
    for v in dst {
        *v = r.f32()?;
    }
    Ok(())
}
