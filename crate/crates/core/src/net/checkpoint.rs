//! Little-endian checkpoint files.
//!
//! ```text
//! "WSEG"            magic
//! u32               format version
//! u32 in_channels   u32 num_labels   u32 hidden_count
//! (u32 channels, u32 kernel) x hidden_count
//! u64 init seed
//! u64 parameter count
//! f64 x count       flat parameter vector
//! ```

use std::io::{Read, Write};

use super::{HiddenLayer, NetConfig, NetParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WSEG";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(params: &NetParams, mut out: impl Write) -> std::io::Result<()> {
    let cfg = params.config();
    let mut buf = Vec::with_capacity(40 + params.len() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(cfg.in_channels as u32).to_le_bytes());
    buf.extend_from_slice(&(cfg.num_labels as u32).to_le_bytes());
    buf.extend_from_slice(&(cfg.hidden.len() as u32).to_le_bytes());
    for l in &cfg.hidden {
        buf.extend_from_slice(&(l.channels as u32).to_le_bytes());
        buf.extend_from_slice(&(l.kernel as u32).to_le_bytes());
    }
    buf.extend_from_slice(&cfg.seed.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::data("checkpoint truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(mut input: impl Read) -> Result<NetParams> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::data(format!("reading checkpoint: {e}")))?;
    let mut c = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::data("not a checkpoint (bad magic)"));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::data(format!("unsupported checkpoint version {version}")));
    }
    let in_channels = c.u32()? as usize;
    let num_labels = c.u32()? as usize;
    let n_hidden = c.u32()? as usize;
    if n_hidden > 1024 {
        return Err(Error::data(format!("implausible hidden layer count {n_hidden}")));
    }
    let mut hidden = Vec::with_capacity(n_hidden);
    for _ in 0..n_hidden {
        hidden.push(HiddenLayer {
            channels: c.u32()? as usize,
            kernel: c.u32()? as usize,
        });
    }
    let seed = c.u64()?;
    let count = c.u64()? as usize;
    let raw = c.take(count.checked_mul(8).ok_or_else(|| Error::data("checkpoint truncated"))?)?;
    if c.pos != bytes.len() {
        return Err(Error::data("trailing bytes after checkpoint"));
    }
    let values = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let config = NetConfig {
        in_channels,
        hidden,
        num_labels,
        seed,
    };
    NetParams::from_values(&config, values).map_err(|e| Error::data(format!("checkpoint: {e}")))
}
