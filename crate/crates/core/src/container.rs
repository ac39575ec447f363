//! Single-file container: an 8-byte magic, a format version, a JSON manifest,
//! and a flat little-endian `f32` payload.
//!
//! ```text
//! magic[8] | version: u32 | manifest_len: u64 | manifest (UTF-8 JSON)
//!          | value_count: u64 | values: f32 * value_count
//! ```
//! All integers are little-endian.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

pub(crate) fn write<M: Serialize>(
    path: &Path,
    magic: &[u8; 8],
    manifest: &M,
    payload: impl IntoIterator<Item = f32>,
    value_count: usize,
) -> Result<()> {
    let manifest = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(magic).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(manifest.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&manifest).map_err(io)?;
    w.write_all(&(value_count as u64).to_le_bytes()).map_err(io)?;
    let mut written = 0usize;
    for v in payload {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
        written += 1;
    }
    assert_eq!(written, value_count, "payload length disagrees with header");
    w.flush().map_err(io)?;
    Ok(())
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize, path: &Path, what: &str) -> Result<&'a [u8]> {
    let end = at
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::corrupt(path, format!("truncated while reading {what}")))?;
    let out = &bytes[*at..end];
    *at = end;
    Ok(out)
}

pub(crate) fn read<M: DeserializeOwned>(path: &Path, magic: &[u8; 8]) -> Result<(M, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut at = 0;
    if take(&bytes, &mut at, 8, path, "magic")? != magic {
        return Err(Error::corrupt(path, "unexpected file type"));
    }
    let version = u32::from_le_bytes(take(&bytes, &mut at, 4, path, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::corrupt(path, format!("unsupported version {version}")));
    }
    let mlen = u64::from_le_bytes(take(&bytes, &mut at, 8, path, "manifest length")?.try_into().unwrap());
    let mbytes = take(&bytes, &mut at, mlen as usize, path, "manifest")?;
    let manifest: M = serde_json::from_slice(mbytes)
        .map_err(|e| Error::corrupt(path, format!("bad manifest: {e}")))?;
    let count = u64::from_le_bytes(take(&bytes, &mut at, 8, path, "payload length")?.try_into().unwrap());
    let count = usize::try_from(count).map_err(|_| Error::corrupt(path, "payload too large"))?;
    let raw = take(&bytes, &mut at, count.saturating_mul(4), path, "payload")?;
    if at != bytes.len() {
        return Err(Error::corrupt(path, "trailing bytes after payload"));
    }
    let values = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((manifest, values))
}
