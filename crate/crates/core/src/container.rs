//! Versioned binary container shared by datasets, checkpoints, feature
//! banks and exported target features.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes, identifies the payload kind
//! version    1 byte
//! header_len u64
//! header     UTF-8 JSON, `header_len` bytes
//! blob_len   u64
//! blob       raw bytes, `blob_len` bytes
//! ```
//!
//! The JSON header describes where each array lives inside the blob.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u8 = 1;

/// Accumulates arrays into a blob, returning the byte offset of each.
#[derive(Default)]
pub struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_u8(&mut self, data: &[u8]) -> (usize, usize) {
        let off = self.bytes.len();
        self.bytes.extend_from_slice(data);
        (off, data.len())
    }

    pub fn push_f32(&mut self, data: &[f32]) -> (usize, usize) {
        let off = self.bytes.len();
        self.bytes.reserve(data.len() * 4);
        for v in data {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        (off, data.len())
    }

    pub fn push_f64(&mut self, data: &[f64]) -> (usize, usize) {
        let off = self.bytes.len();
        self.bytes.reserve(data.len() * 8);
        for v in data {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        (off, data.len())
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

/// Read-side view over a blob.
pub struct BlobReader<'a> {
    bytes: &'a [u8],
}

impl<'a> BlobReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes }
    }

    fn slice(&self, off: usize, nbytes: usize) -> Result<&'a [u8]> {
        off.checked_add(nbytes)
            .and_then(|end| self.bytes.get(off..end))
            .ok_or_else(|| Error::Format(format!("range {off}+{nbytes} outside blob")))
    }

    pub fn u8s(&self, off: usize, len: usize) -> Result<Vec<u8>> {
        Ok(self.slice(off, len)?.to_vec())
    }

    pub fn f32s(&self, off: usize, len: usize) -> Result<Vec<f32>> {
        let raw = self.slice(off, len * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn f64s(&self, off: usize, len: usize) -> Result<Vec<f64>> {
        let raw = self.slice(off, len * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }
}

pub fn encode<H: Serialize>(magic: &[u8; 8], header: &H, blob: &[u8]) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(8 + 1 + 16 + header.len() + blob.len());
    out.extend_from_slice(magic);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    out.extend_from_slice(blob);
    Ok(out)
}

pub fn decode<H: DeserializeOwned>(magic: &[u8; 8], bytes: &[u8]) -> Result<(H, Vec<u8>)> {
    if bytes.len() < 9 || &bytes[..8] != magic {
        return Err(Error::Format(format!(
            "expected magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    if bytes[8] != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {} (this build reads {FORMAT_VERSION})",
            bytes[8]
        )));
    }
    let mut pos = 9;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(pos..pos + n)
            .ok_or_else(|| Error::Format("truncated container".into()))?;
        pos += n;
        Ok(s)
    };
    let hlen = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let header: H = serde_json::from_slice(take(hlen)?)?;
    let blen = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let blob = take(blen)?.to_vec();
    Ok((header, blob))
}

pub fn write_file<H: Serialize>(path: &Path, magic: &[u8; 8], header: &H, blob: &[u8]) -> Result<()> {
    let bytes = encode(magic, header, blob)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_file<H: DeserializeOwned>(path: &Path, magic: &[u8; 8]) -> Result<(H, Vec<u8>)> {
    decode(magic, &fs::read(path)?)
}
