//! Latent dump files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LTNT" | version: u32 | D: u32 | n: u32 | id_len: u32 | id: UTF-8 bytes
//!        | n·D f32 values, one row of D per mask
//! ```
//!
//! An evaluation is described by a plain-text manifest listing one dump
//! path per line; relative paths resolve against the manifest's directory.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use super::{LatentSet, LatentVector};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LTNT";
const VERSION: u32 = 1;

pub fn write_latent_dump(path: &Path, set: &LatentSet) -> Result<()> {
    let d = set.latents.first().map_or(0, LatentVector::dim);
    let mut buf = Vec::with_capacity(24 + set.image_id.len() + 4 * d * set.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    buf.extend_from_slice(&(set.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(set.image_id.len() as u32).to_le_bytes());
    buf.extend_from_slice(set.image_id.as_bytes());
    for (i, v) in set.latents.iter().enumerate() {
        if v.dim() != d {
            return Err(Error::mismatch(
                format!("latent dimension {d}"),
                format!("{} at mask {i}", v.dim()),
            ));
        }
        for &x in &v.0 {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn take<'a>(bytes: &mut &'a [u8], len: usize) -> Result<&'a [u8]> {
    if bytes.len() < len {
        return Err(Error::corrupt("latent dump", "unexpected end of file"));
    }
    let (head, tail) = bytes.split_at(len);
    *bytes = tail;
    Ok(head)
}

fn take_u32(bytes: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, 4)?.try_into().unwrap()))
}

pub fn read_latent_dump(path: &Path) -> Result<LatentSet> {
    let mut raw = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    let mut bytes = raw.as_slice();
    if take(&mut bytes, 4)? != MAGIC {
        return Err(Error::corrupt("latent dump", "bad magic"));
    }
    let version = take_u32(&mut bytes)?;
    if version != VERSION {
        return Err(Error::corrupt(
            "latent dump",
            format!("unsupported version {version}"),
        ));
    }
    let d = take_u32(&mut bytes)? as usize;
    let n = take_u32(&mut bytes)? as usize;
    let id_len = take_u32(&mut bytes)? as usize;
    let image_id = String::from_utf8(take(&mut bytes, id_len)?.to_vec())
        .map_err(|_| Error::corrupt("latent dump", "image id is not UTF-8"))?;
    let body = take(&mut bytes, 4 * n * d)?;
    if !bytes.is_empty() {
        return Err(Error::corrupt("latent dump", "trailing bytes"));
    }
    let values: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let latents = values
        .chunks(d.max(1))
        .take(n)
        .map(|row| LatentVector(row.to_vec()))
        .collect();
    Ok(LatentSet { image_id, latents })
}

/// Writes a manifest listing `dumps`, stored relative to the manifest's
/// directory when possible.
pub fn write_manifest(path: &Path, dumps: &[PathBuf]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut text = String::new();
    for p in dumps {
        let rel = p.strip_prefix(base).unwrap_or(p);
        text.push_str(&rel.to_string_lossy());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a manifest; blank lines and `#` comments are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let p = Path::new(l);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        })
        .collect())
}
