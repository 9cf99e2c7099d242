//! Binary layout shared by the embedding cache and the image-feature index.
//!
//! ```text
//! magic[8] | version u32 | elem_bytes u32 | dim u32 | rows u64
//! | fingerprint[32] | checksum[32] | payload (row-major, little-endian)
//! | id table (index files only: per row u32 length + UTF-8 bytes)
//! ```
//! The checksum is SHA-256 over everything after the header.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::hashing::sha256;
use crate::scalar::Scalar;

pub const EMBEDDING_MAGIC: &[u8; 8] = b"MCTXEMB\0";
pub const INDEX_MAGIC: &[u8; 8] = b"MCTXIMG\0";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 4 + 4 + 8 + 32 + 32;

#[derive(Debug, Error)]
pub enum BinFileError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("element width {found} bytes, expected {expected}")]
    ElementWidth { found: u32, expected: u32 },
    #[error("file truncated")]
    Truncated,
    #[error("checksum mismatch")]
    Checksum,
    #[error("malformed id table")]
    IdTable,
}

/// Decoded contents of a matrix file.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixFile<S> {
    pub dim: usize,
    pub rows: usize,
    pub fingerprint: [u8; 32],
    pub data: Vec<S>,
    pub ids: Option<Vec<String>>,
}

pub fn encode<S: Scalar>(
    magic: &[u8; 8],
    dim: usize,
    fingerprint: [u8; 32],
    data: &[S],
    ids: Option<&[String]>,
) -> Vec<u8> {
    let rows = if dim == 0 { 0 } else { data.len() / dim };
    let mut body = Vec::with_capacity(data.len() * S::BYTES);
    for &x in data {
        x.write_le(&mut body);
    }
    if let Some(ids) = ids {
        for id in ids {
            body.extend_from_slice(&(id.len() as u32).to_le_bytes());
            body.extend_from_slice(id.as_bytes());
        }
    }
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(S::BYTES as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&fingerprint);
    out.extend_from_slice(&sha256(&body));
    out.extend_from_slice(&body);
    out
}

pub fn decode<S: Scalar>(magic: &[u8; 8], bytes: &[u8]) -> Result<MatrixFile<S>, BinFileError> {
    if bytes.len() < HEADER_LEN {
        return Err(BinFileError::Truncated);
    }
    if &bytes[..8] != magic {
        return Err(BinFileError::BadMagic);
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(8);
    if version != VERSION {
        return Err(BinFileError::Version(version));
    }
    let elem = u32_at(12);
    if elem as usize != S::BYTES {
        return Err(BinFileError::ElementWidth {
            found: elem,
            expected: S::BYTES as u32,
        });
    }
    let dim = u32_at(16) as usize;
    let rows = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
    let fingerprint: [u8; 32] = bytes[28..60].try_into().unwrap();
    let checksum: [u8; 32] = bytes[60..92].try_into().unwrap();
    let body = &bytes[HEADER_LEN..];
    if sha256(body) != checksum {
        return Err(BinFileError::Checksum);
    }
    let payload_len = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(S::BYTES))
        .ok_or(BinFileError::Truncated)?;
    if body.len() < payload_len {
        return Err(BinFileError::Truncated);
    }
    let data = body[..payload_len]
        .chunks_exact(S::BYTES)
        .map(S::read_le)
        .collect();
    let rest = &body[payload_len..];
    let ids = if magic == INDEX_MAGIC {
        Some(decode_ids(rest, rows)?)
    } else {
        None
    };
    Ok(MatrixFile {
        dim,
        rows,
        fingerprint,
        data,
        ids,
    })
}

fn decode_ids(mut rest: &[u8], rows: usize) -> Result<Vec<String>, BinFileError> {
    let mut ids = Vec::with_capacity(rows);
    for _ in 0..rows {
        if rest.len() < 4 {
            return Err(BinFileError::IdTable);
        }
        let len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
        rest = &rest[4..];
        if rest.len() < len {
            return Err(BinFileError::IdTable);
        }
        let id = std::str::from_utf8(&rest[..len]).map_err(|_| BinFileError::IdTable)?;
        ids.push(id.to_string());
        rest = &rest[len..];
    }
    if !rest.is_empty() {
        return Err(BinFileError::IdTable);
    }
    Ok(ids)
}

/// Writes `bytes` to `path` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}
