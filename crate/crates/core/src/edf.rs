//! EDF1 field container.
//!
//! Layout (all little-endian):
//!
//! ```text
//! b"EDF1"
//! u32 H, u32 W, u32 C
//! f64 lat0, f64 lon0, f64 dlat, f64 dlon
//! C x { u32 len, name bytes, u32 len, unit bytes }   (UTF-8)
//! H*W*C x f32 values, row-major, channels innermost
//! ```
//!
//! Values are stored as `f32`, so writing rounds any `f64` field data.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Channel, Field, Grid};

pub const MAGIC: &[u8; 4] = b"EDF1";

pub fn encode(field: &Field) -> Vec<u8> {
    let g = field.grid();
    let mut out = Vec::with_capacity(64 + field.data().len() * 4);
    out.extend_from_slice(MAGIC);
    for v in [g.height, g.width, field.num_channels()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in [g.lat0, g.lon0, g.dlat, g.dlon] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for ch in field.channels() {
        put_str(&mut out, &ch.name);
        put_str(&mut out, &ch.unit);
    }
    for v in field.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub(crate) fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Bounds-checked little-endian reader reporting byte offsets on failure.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what} ({n} bytes needed)"),
            )),
        }
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let at = self.offset();
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::format(at, format!("{what} is not UTF-8")))
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != magic {
            return Err(Error::format(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub fn decode(buf: &[u8]) -> Result<Field> {
    let mut r = Reader::new(buf);
    r.expect_magic(MAGIC)?;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let c = r.u32("channel count")? as usize;
    let lat0 = r.f64("lat0")?;
    let lon0 = r.f64("lon0")?;
    let dlat = r.f64("dlat")?;
    let dlon = r.f64("dlon")?;
    let header_end = r.offset();
    let grid = Grid::new(lat0, lon0, dlat, dlon, h, w)
        .map_err(|e| Error::format(header_end, format!("invalid grid header: {e}")))?;
    let mut channels = Vec::with_capacity(c.min(1024));
    for _ in 0..c {
        let name = r.string("channel name")?;
        let unit = r.string("channel unit")?;
        channels.push(Channel::new(name, unit));
    }
    let n = h
        .checked_mul(w)
        .and_then(|hw| hw.checked_mul(c))
        .ok_or_else(|| Error::format(header_end, "field dimensions overflow"))?;
    let data_at = r.offset();
    let raw = r.take(n * 4, "field values")?;
    let data = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    r.finish()?;
    Field::new(grid, channels, data).map_err(|e| Error::format(data_at, e.to_string()))
}

pub fn write(path: &Path, field: &Field) -> Result<()> {
    std::fs::write(path, encode(field)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Field> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}
