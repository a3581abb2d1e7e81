//! EMB1 binary format and the JSON Lines manifest sidecar.
//!
//! EMB1 layout, little-endian: bytes 0-3 magic `"EMB1"`, bytes 4-7 u32
//! version (= 1), bytes 8-11 u32 row count N, bytes 12-15 u32 dim D, then
//! N*D IEEE-754 f32 values, row-major. The manifest is UTF-8 JSON Lines,
//! one object per matrix row.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{DatasetManifest, EmbeddingMatrix, PatchRecord, StoreError};

pub const EMB1_MAGIC: [u8; 4] = *b"EMB1";
pub const EMB1_VERSION: u32 = 1;

/// Sidecar manifest path: same stem, `.jsonl` extension.
pub fn manifest_path_for(path: &Path) -> PathBuf {
    path.with_extension("jsonl")
}

/// Writes the matrix as EMB1. Values are quantized to f32.
pub fn write_matrix(path: &Path, m: &EmbeddingMatrix) -> Result<(), StoreError> {
    let rows = u32::try_from(m.rows())
        .map_err(|_| StoreError::Format(format!("row count {} exceeds u32", m.rows())))?;
    let dim = u32::try_from(m.dim())
        .map_err(|_| StoreError::Format(format!("dim {} exceeds u32", m.dim())))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&EMB1_MAGIC)?;
    w.write_all(&EMB1_VERSION.to_le_bytes())?;
    w.write_all(&rows.to_le_bytes())?;
    w.write_all(&dim.to_le_bytes())?;
    for v in m.values() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an EMB1 file, validating magic, version, and exact payload size.
pub fn read_matrix(path: &Path) -> Result<EmbeddingMatrix, StoreError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; 16];
    r.read_exact(&mut header)
        .map_err(|_| StoreError::Format("file shorter than the 16-byte header".into()))?;
    if header[0..4] != EMB1_MAGIC {
        return Err(StoreError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&header[0..4]),
            String::from_utf8_lossy(&EMB1_MAGIC)
        )));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != EMB1_VERSION {
        return Err(StoreError::Format(format!(
            "unsupported version {version}, expected {EMB1_VERSION}"
        )));
    }
    let rows = u32::from_le_bytes(header[8..12].try_into().unwrap()) as u64;
    let dim = u32::from_le_bytes(header[12..16].try_into().unwrap()) as u64;
    if dim == 0 {
        return Err(StoreError::ZeroDim);
    }
    let expected = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| StoreError::Format("payload size overflows".into()))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() as u64 != expected {
        return Err(StoreError::Truncation {
            expected,
            got: payload.len() as u64,
        });
    }
    let mut values = Vec::with_capacity((rows * dim) as usize);
    for chunk in payload.chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    EmbeddingMatrix::from_vec(dim as usize, values)
}

/// Writes the manifest as JSON Lines.
pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<(), StoreError> {
    let mut w = BufWriter::new(File::create(path)?);
    for record in manifest.records() {
        let line = serde_json::to_string(record)
            .map_err(|e| StoreError::Format(format!("manifest serialization failed: {e}")))?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a JSON Lines manifest, one record per line.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest, StoreError> {
    let file = File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            StoreError::MissingManifest(path.to_path_buf())
        } else {
            StoreError::Io(e)
        }
    })?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PatchRecord = serde_json::from_str(&line).map_err(|e| StoreError::Manifest {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    DatasetManifest::new(records)
}

/// Writes the matrix and its sidecar manifest together.
pub fn save_embeddings(
    path: &Path,
    m: &EmbeddingMatrix,
    manifest: &DatasetManifest,
) -> Result<(), StoreError> {
    if manifest.len() != m.rows() {
        return Err(StoreError::Alignment {
            records: manifest.len(),
            rows: m.rows(),
        });
    }
    write_matrix(path, m)?;
    write_manifest(&manifest_path_for(path), manifest)
}

/// Loads a matrix plus its sidecar manifest; row i pairs with record i.
pub fn load_embeddings(path: &Path) -> Result<(EmbeddingMatrix, DatasetManifest), StoreError> {
    let matrix = read_matrix(path)?;
    let manifest = read_manifest(&manifest_path_for(path))?;
    if manifest.len() != matrix.rows() {
        return Err(StoreError::Alignment {
            records: manifest.len(),
            rows: matrix.rows(),
        });
    }
    Ok((matrix, manifest))
}
