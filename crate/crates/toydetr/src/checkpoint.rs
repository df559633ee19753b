//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `DGCK`, `u32` version, `u64` seed,
//! `u64` completed epochs, `u64` optimizer step, `u32` length plus JSON of
//! the training config, `u32` block count, then per block a `u16` name
//! length, the name, a `u8` rank, `u32` dims, and the parameter values
//! followed by both Adam moments as `f64`.

use std::path::Path;

use crate::optim::Adam;
use crate::train::{TrainConfig, TrainState};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"DGCK";
const VERSION: u32 = 1;

pub fn to_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let model = state.model()?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&state.seed.to_le_bytes());
    out.extend_from_slice(&(state.epochs_done as u64).to_le_bytes());
    out.extend_from_slice(&state.adam.t.to_le_bytes());
    let cfg = serde_json::to_vec(&state.config)?;
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    let blocks = model.layout().blocks();
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for b in blocks {
        out.extend_from_slice(&(b.name.len() as u16).to_le_bytes());
        out.extend_from_slice(b.name.as_bytes());
        out.push(b.shape.len() as u8);
        for &d in &b.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for src in [&state.params, &state.adam.m, &state.adam.v] {
            for v in &src[b.slot().range()] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, dst: &mut [f64]) -> Result<()> {
        for (d, chunk) in dst.iter_mut().zip(self.take(n * 8)?.chunks_exact(8)) {
            *d = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(())
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let seed = r.u64()?;
    let epochs_done = r.u64()? as usize;
    let t = r.u64()?;
    let cfg_len = r.u32()? as usize;
    let config: TrainConfig = serde_json::from_slice(r.take(cfg_len)?)?;
    let mut state = TrainState::new(config, seed)?;
    state.epochs_done = epochs_done;
    state.adam = Adam { t, ..Adam::new(state.params.len()) };
    let model = state.model()?;
    let blocks = model.layout().blocks();
    let count = r.u32()? as usize;
    if count != blocks.len() {
        return Err(Error::Checkpoint(format!("{count} blocks, model has {}", blocks.len())));
    }
    for b in blocks {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| Error::Checkpoint("block name is not UTF-8".into()))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if name != b.name || shape != b.shape {
            return Err(Error::Checkpoint(format!("block {name} {shape:?} does not match {} {:?}", b.name, b.shape)));
        }
        let range = b.slot().range();
        let n = range.len();
        r.f64s(n, &mut state.params[range.clone()])?;
        r.f64s(n, &mut state.adam.m[range.clone()])?;
        r.f64s(n, &mut state.adam.v[range])?;
    }
    if r.at != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    if state.params.iter().any(|v| !v.is_finite()) {
        return Err(Error::Checkpoint("non-finite parameters".into()));
    }
    Ok(state)
}

/// Writes through a sibling temporary file so an interrupted save never
/// leaves a truncated checkpoint behind.
pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let tmp = path.with_extension("dgck.tmp");
    std::fs::write(&tmp, to_bytes(state)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    from_bytes(&bytes)
}
