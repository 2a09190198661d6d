//! Binary network checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "TINYNET\0"
//! version   u32      1
//! manifest  u32 length, then UTF-8 JSON of the NetworkSpec
//! blobs     per parameter tensor in Network::params order:
//!           u64 element count, then that many f64
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::network::{Network, NetworkSpec};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TINYNET\0";
pub const VERSION: u32 = 1;

pub fn to_bytes(net: &Network) -> Result<Vec<u8>> {
    let manifest = serde_json::to_vec(&net.spec())
        .map_err(|e| Error::Checkpoint(format!("manifest encoding: {e}")))?;
    let mut out = Vec::with_capacity(16 + manifest.len() + 8 * net.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);
    for (_, value, _) in net.params() {
        out.extend_from_slice(&(value.len() as u64).to_le_bytes());
        for v in value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Network> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = cur.u32("manifest length")? as usize;
    let spec: NetworkSpec = serde_json::from_slice(cur.take(len, "manifest")?)
        .map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    let mut net = Network::from_spec(&spec)?;
    for (value, _) in net.params_mut() {
        let n = cur.u64("blob length")? as usize;
        if n != value.len() {
            return Err(Error::Checkpoint(format!(
                "blob holds {n} values, layer expects {}",
                value.len()
            )));
        }
        let raw = cur.take(n.saturating_mul(8), "parameter blob")?;
        for (dst, chunk) in value.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last blob".into()));
    }
    Ok(net)
}

pub fn save(net: &Network, path: &Path) -> Result<()> {
    let bytes = to_bytes(net)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Network> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
