//! `NTT1` binary tensor encoding and named-tensor bundles.
//!
//! Layout: magic `NTT1`, rank as little-endian `u32`, `rank` little-endian `u32`
//! dims, then the row-major values as little-endian `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NTT1";

pub fn encode(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 8 * t.numel());
    encode(t, &mut out);
    out
}

/// Decode one tensor from the front of `bytes`, returning it with the bytes consumed.
pub fn decode(bytes: &[u8]) -> std::result::Result<(Tensor, usize), String> {
    let u32_at = |off: usize| -> std::result::Result<u32, String> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| "truncated header".to_string())
    };
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err("bad magic".into());
    }
    let rank = u32_at(4)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        shape.push(u32_at(8 + 4 * i)? as usize);
    }
    let start = 8 + 4 * rank;
    let n: usize = shape.iter().product();
    let body = bytes
        .get(start..start + 8 * n)
        .ok_or_else(|| format!("truncated body: expected {n} values"))?;
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
    Ok((t, start + 8 * n))
}

pub fn save(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, to_bytes(t)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = decode(&bytes).map_err(|d| Error::format(path, d))?;
    if used != bytes.len() {
        return Err(Error::format(path, "trailing bytes after tensor"));
    }
    Ok(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub offset: usize,
    pub shape: Vec<usize>,
}

/// Write `entries` back to back into `{stem}.ntt` with a `{stem}.json` index.
pub fn save_bundle(dir: &Path, stem: &str, entries: &[(String, Tensor)]) -> Result<()> {
    let mut bytes = Vec::new();
    let mut index = BTreeMap::new();
    for (name, t) in entries {
        index.insert(
            name.clone(),
            IndexEntry {
                offset: bytes.len(),
                shape: t.shape().to_vec(),
            },
        );
        encode(t, &mut bytes);
    }
    let bin = dir.join(format!("{stem}.ntt"));
    let idx = dir.join(format!("{stem}.json"));
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let json = serde_json::to_string_pretty(&index).map_err(|e| Error::json(&idx, e))?;
    fs::write(&idx, json).map_err(|e| Error::io(&idx, e))
}

/// Read a bundle written by [`save_bundle`], in file order.
pub fn load_bundle(dir: &Path, stem: &str) -> Result<Vec<(String, Tensor)>> {
    let bin = dir.join(format!("{stem}.ntt"));
    let idx = dir.join(format!("{stem}.json"));
    let text = fs::read_to_string(&idx).map_err(|e| Error::io(&idx, e))?;
    let index: BTreeMap<String, IndexEntry> =
        serde_json::from_str(&text).map_err(|e| Error::json(&idx, e))?;
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let mut entries: Vec<(String, IndexEntry)> = index.into_iter().collect();
    entries.sort_by_key(|(_, e)| e.offset);
    entries
        .into_iter()
        .map(|(name, e)| {
            let slice = bytes
                .get(e.offset..)
                .ok_or_else(|| Error::format(&bin, format!("offset of {name} past end")))?;
            let (t, _) = decode(slice).map_err(|d| Error::format(&bin, format!("{name}: {d}")))?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::format(
                    &bin,
                    format!("{name}: shape disagrees with index"),
                ));
            }
            Ok((name, t))
        })
        .collect()
}
