//! Binary selector checkpoints.
//!
//! Layout, little-endian throughout: `TSEL`, u32 version, u32 tensor count, then
//! per tensor a u16 name length, the UTF-8 name, a u8 rank, u32 dims and
//! row-major f32 values; a CRC-32 of every preceding byte closes the file.

use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::selector::{select, SelectionDistribution, SelectorConfig, SelectorParams, SlotInput};
use crate::domain::Query;

pub const MAGIC: [u8; 4] = *b"TSEL";
pub const VERSION: u32 = 1;

pub fn encode(params: &SelectorParams) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let named: Vec<(String, &Tensor)> = params.named().collect();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        let len = u16::try_from(name.len()).map_err(|_| Error::Contract(format!("tensor name {name} too long")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(u8::try_from(t.rank()).map_err(|_| Error::Contract(format!("rank of {name}")))?);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Contract(format!("dimension of {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::CorruptCheckpoint { field, detail: format!("needs {n} bytes at offset {}", self.pos) })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }
}

/// Decodes checkpoint bytes into named tensors, checking magic, version and CRC.
pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(Error::CorruptCheckpoint { field: "magic", detail: "file does not start with TSEL".into() });
    }
    if bytes.len() < 12 {
        return Err(Error::CorruptCheckpoint { field: "crc", detail: format!("file of {} bytes is truncated", bytes.len()) });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::CorruptCheckpoint { field: "crc", detail: format!("stored {stored:08x}, computed {:08x}", crc32fast::hash(body)) });
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes"));
        let name = std::str::from_utf8(r.take(len as usize, "name")?)
            .map_err(|e| Error::CorruptCheckpoint { field: "name", detail: e.to_string() })?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.filter(|&n| n.checked_mul(4).is_some_and(|b| b <= body.len()));
        let n = n.ok_or_else(|| Error::CorruptCheckpoint { field: "dims", detail: format!("{name}: {shape:?}") })?;
        let data = r.take(n * 4, "data")?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::CorruptCheckpoint { field: "dims", detail: e.to_string() })?;
        out.push((name, t));
    }
    if r.pos != body.len() {
        return Err(Error::CorruptCheckpoint { field: "tensor count", detail: format!("{} trailing bytes", body.len() - r.pos) });
    }
    Ok(out)
}

pub fn save_checkpoint(params: &SelectorParams, path: &Path) -> Result<()> {
    write_atomic(path, &encode(params)?)
}

/// Loads a checkpoint whose tensors must match the shapes implied by `config`.
pub fn load_checkpoint(path: &Path, config: &SelectorConfig) -> Result<SelectorParams> {
    let bytes = std::fs::read(path)?;
    SelectorParams::from_named(config.clone(), decode_tensors(&bytes)?)
}

/// Copy of `params` with every entry rounded to the nearest f32.
pub fn round_to_f32(params: &SelectorParams) -> SelectorParams {
    let mut p = params.clone();
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v = *v as f32 as f64;
        }
    }
    p
}

/// Scores at checkpoint precision: f32 weights, outputs rounded to f32.
pub fn scores_f32(params: &SelectorParams, query: &Query, slots: &[SlotInput]) -> Result<Vec<f32>> {
    let d: SelectionDistribution = select(&round_to_f32(params), query, slots)?;
    Ok(d.scores.iter().map(|&s| s as f32).collect())
}
