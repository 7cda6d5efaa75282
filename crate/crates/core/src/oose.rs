//! `OOSE` embedding files.
//!
//! Layout: magic `OOSE`, u32 version (1), u32 count, u32 dim, then
//! `count * dim` little-endian f32 values, row-major. A sidecar jsonl next
//! to the binary maps each row index to an utterance id (and optionally a
//! label): `{"row": 0, "id": "...", "label": "..."}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"OOSE";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub dim: usize,
    /// Row-major, `count * dim` values.
    pub values: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn count(&self) -> usize {
        self.values.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowEntry {
    pub row: usize,
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// Sidecar path for an embedding file: `emb.oose` -> `emb.jsonl`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("jsonl")
}

pub fn encode(matrix: &EmbeddingMatrix) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + matrix.values.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(matrix.count() as u32).to_le_bytes());
    buf.extend_from_slice(&(matrix.dim as u32).to_le_bytes());
    for v in &matrix.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "embedding file truncated: {} bytes, header needs {HEADER_LEN}",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(
            "embedding file has wrong magic (expected OOSE)".into(),
        ));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported embedding file version {version} (expected {VERSION})"
        )));
    }
    let count = word(8) as usize;
    let dim = word(12) as usize;
    if dim == 0 {
        return Err(Error::Format("embedding file declares dim 0".into()));
    }
    let expected = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("embedding header overflows".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "embedding payload is {} bytes, header declares {count}x{dim} f32 = {expected}",
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(EmbeddingMatrix { dim, values })
}

pub fn write(path: &Path, matrix: &EmbeddingMatrix, rows: &[RowEntry]) -> Result<()> {
    if rows.len() != matrix.count() {
        return Err(Error::InvalidData(format!(
            "{} sidecar rows for {} embeddings",
            rows.len(),
            matrix.count()
        )));
    }
    std::fs::write(path, encode(matrix)).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let mut out = BufWriter::new(File::create(&side).map_err(|e| Error::io(&side, e))?);
    for r in rows {
        let line = serde_json::to_string(r).expect("serializable");
        writeln!(out, "{line}").map_err(|e| Error::io(&side, e))?;
    }
    out.flush().map_err(|e| Error::io(&side, e))
}

pub fn read(path: &Path) -> Result<(EmbeddingMatrix, Vec<RowEntry>)> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let matrix = decode(&bytes)?;
    let side = sidecar_path(path);
    let reader = BufReader::new(File::open(&side).map_err(|e| Error::io(&side, e))?);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(&side, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: RowEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: side.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if entry.row >= matrix.count() {
            return Err(Error::Parse {
                path: side.clone(),
                line: i + 1,
                message: format!("row {} beyond {} embeddings", entry.row, matrix.count()),
            });
        }
        rows.push(entry);
    }
    Ok((matrix, rows))
}
