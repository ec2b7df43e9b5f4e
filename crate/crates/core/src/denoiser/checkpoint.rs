//! Binary checkpoint: magic, a length-prefixed JSON config block keyed
//! under `model`, then named little-endian f32 parameter records.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dit::{DitParams, ToyDit, ToyDitConfig};
use crate::error::{Error, Result};
use crate::tensor::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VCKP";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigBlock {
    model: ToyDitConfig,
}

pub fn checkpoint_bytes(model: &ToyDit) -> Result<Vec<u8>> {
    let cfg = serde_json::to_vec(&ConfigBlock {
        model: model.config().clone(),
    })?;
    let tensors = model.params().tensors();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, dims, data) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dims.len() as u8);
        for d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(model: &ToyDit, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(model)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn parse_checkpoint(bytes: &[u8], path: &Path) -> Result<ToyDit> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad checkpoint magic"));
    }
    let clen = r.u32("config length")? as usize;
    let block: ConfigBlock = serde_json::from_slice(r.take(clen, "config block")?)
        .map_err(|e| Error::format(path, format!("config block: {e}")))?;
    let cfg = block.model;
    cfg.validate()?;
    let mut params = DitParams::<f32>::zeros(&cfg);
    let expected: Vec<(String, Vec<usize>)> = params.tensors().into_iter().map(|(n, d, _)| (n, d)).collect();
    let count = r.u32("record count")? as usize;
    if count != expected.len() {
        return Err(Error::format(path, format!("{count} records, config implies {}", expected.len())));
    }
    let mut slots = params.tensors_mut();
    for (want_name, want_dims) in &expected {
        let nlen = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(nlen, "name")?).map_err(|_| Error::format(path, "non-UTF-8 name"))?;
        let rank = r.take(1, "rank")?[0] as usize;
        let dims = (0..rank).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if name != want_name || dims != *want_dims {
            return Err(Error::format(
                path,
                format!("record {name} {dims:?}, expected {want_name} {want_dims:?}"),
            ));
        }
        let slot = slots
            .iter_mut()
            .find(|(n, _)| n == want_name)
            .map(|(_, s)| s)
            .expect("record names come from the same layout");
        let raw = r.take(slot.len() * 4, "parameter data")?;
        for (dst, b) in slot.iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(b.try_into().expect("4 bytes"));
        }
    }
    drop(slots);
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after parameters"));
    }
    if !params.all_finite() {
        return Err(Error::format(path, "non-finite parameter"));
    }
    ToyDit::new(cfg, params)
}

pub fn load_checkpoint(path: &Path) -> Result<ToyDit> {
    let bytes = fs::read(path)?;
    parse_checkpoint(&bytes, path)
}
