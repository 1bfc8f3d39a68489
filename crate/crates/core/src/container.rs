//! Shared on-disk container: 16-byte magic, little-endian u32 header length,
//! JSON header, then a raw payload. Embedding sets and all model checkpoints
//! use this envelope; the header's `kind` field says what the payload holds.

use crate::error::{LafrError, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::fs;
use std::io::Write;
use std::path::Path;

pub(crate) const MAGIC: [u8; 16] = *b"LAFR-CONTAINER-1";

/// Write atomically: temp file in the same directory, then rename.
pub(crate) fn write_container<H: Serialize>(path: &Path, header: &H, payload: &[u8]) -> Result<()> {
    let header_bytes =
        serde_json::to_vec(header).map_err(|e| LafrError::Format(format!("header encode: {e}")))?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|s| s.to_string_lossy()).unwrap_or_default()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&MAGIC)?;
        f.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
        f.write_all(&header_bytes)?;
        f.write_all(payload)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub(crate) fn read_container<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<u8>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < MAGIC.len() + 4 {
        return Err(LafrError::Format(format!(
            "{}: file too short for container header",
            path.display()
        )));
    }
    if bytes[..16] != MAGIC {
        return Err(LafrError::Format(format!(
            "{}: bad magic, not a container file",
            path.display()
        )));
    }
    let header_len = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let body_start = 20 + header_len;
    if bytes.len() < body_start {
        return Err(LafrError::Format(format!(
            "{}: header length {} exceeds file size",
            path.display(),
            header_len
        )));
    }
    let header: H = serde_json::from_slice(&bytes[20..body_start])
        .map_err(|e| LafrError::Format(format!("{}: header decode: {e}", path.display())))?;
    Ok((header, bytes[body_start..].to_vec()))
}

pub(crate) fn f64s_to_bytes(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub(crate) fn bytes_to_f64s(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return Err(LafrError::Format("payload not a multiple of 8 bytes".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}
