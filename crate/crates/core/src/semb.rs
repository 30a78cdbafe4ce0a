//! Binary containers.
//!
//! SEMB (embeddings), little-endian:
//!
//! | bytes   | content                         |
//! |---------|---------------------------------|
//! | 0..4    | magic `SEMB`                    |
//! | 4..8    | u32 version = 1                 |
//! | 8..16   | u64 n                           |
//! | 16..24  | u64 d                           |
//! | 24..    | n·d f32 values, row-major       |
//!
//! Model container (`SMDL`), little-endian, used for fitted teachers and
//! trained aligners: magic, u32 version = 1, u32 kind tag, u64 shared
//! dimension, u32 preprocessing flags, u32 entry count, then per entry a u32
//! name length, the UTF-8 name, u64 rows, u64 cols and rows·cols f64 values
//! row-major. Values are stored at full precision so round trips are exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embeddings::EmbeddingMatrix;
use crate::error::{Error, Result};

pub const SEMB_MAGIC: &[u8; 4] = b"SEMB";
pub const SEMB_VERSION: u32 = 1;
const SEMB_HEADER: usize = 24;

pub const MODEL_MAGIC: &[u8; 4] = b"SMDL";
pub const MODEL_VERSION: u32 = 1;

pub fn encode_embeddings(e: &EmbeddingMatrix) -> Vec<u8> {
    let (n, d) = (e.n(), e.d());
    let mut out = Vec::with_capacity(SEMB_HEADER + 4 * n * d);
    out.extend_from_slice(SEMB_MAGIC);
    out.extend_from_slice(&SEMB_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    let m = e.matrix();
    for i in 0..n {
        for j in 0..d {
            out.extend_from_slice(&(m[(i, j)] as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    if bytes.len() < SEMB_HEADER {
        return Err(Error::Format(format!("truncated header: {} bytes", bytes.len())));
    }
    if &bytes[0..4] != SEMB_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[0..4]))));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != SEMB_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let d = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let expected = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| Error::Format(format!("header size {n}x{d} overflows")))?;
    let payload = &bytes[SEMB_HEADER..];
    if payload.len() < expected {
        return Err(Error::Format(format!(
            "truncated payload: header declares {n}x{d} ({} floats), found {} floats",
            n * d,
            payload.len() / 4
        )));
    }
    if payload.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after {n}x{d} payload",
            payload.len() - expected
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if let Some(pos) = values.iter().position(|x| !x.is_finite()) {
        return Err(Error::Data(format!("non-finite entry at row {}, col {}", pos / d, pos % d)));
    }
    EmbeddingMatrix::from_rows(n, d, &values)
}

/// Writes `e` as SEMB. Values are stored as f32.
pub fn write_embeddings(path: impl AsRef<Path>, e: &EmbeddingMatrix) -> Result<()> {
    fs::write(path, encode_embeddings(e))?;
    Ok(())
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    decode_embeddings(&fs::read(path)?)
}

/// Sidecar manifest stored next to a SEMB file as `<file>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub source: String,
    pub modality: String,
    pub n: u64,
    pub d: u64,
    pub sha256: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes the SEMB file and its sidecar manifest.
pub fn write_embeddings_with_manifest(
    path: impl AsRef<Path>,
    e: &EmbeddingMatrix,
    source: &str,
    modality: &str,
) -> Result<Manifest> {
    let path = path.as_ref();
    let bytes = encode_embeddings(e);
    fs::write(path, &bytes)?;
    let manifest = Manifest {
        source: source.to_string(),
        modality: modality.to_string(),
        n: e.n() as u64,
        d: e.d() as u64,
        sha256: sha256_hex(&bytes),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(sidecar_path(path), json + "\n")?;
    Ok(manifest)
}

/// Checks a SEMB file against its sidecar, when one exists.
pub fn verify_sidecar(path: impl AsRef<Path>) -> Result<Option<Manifest>> {
    let path = path.as_ref();
    let side = sidecar_path(path);
    if !side.exists() {
        return Ok(None);
    }
    let manifest: Manifest = serde_json::from_slice(&fs::read(&side)?)
        .map_err(|e| Error::Format(format!("{}: {e}", side.display())))?;
    let digest = sha256_hex(&fs::read(path)?);
    if digest != manifest.sha256 {
        return Err(Error::Data(format!(
            "checksum mismatch for {}: manifest {}, file {digest}",
            path.display(),
            manifest.sha256
        )));
    }
    Ok(Some(manifest))
}

/// Named f64 matrices plus a small header; see the module docs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelContainer {
    pub kind: u32,
    pub dim: u64,
    pub flags: u32,
    pub entries: BTreeMap<String, DMatrix<f64>>,
}

impl ModelContainer {
    pub fn new(kind: u32, dim: u64, flags: u32) -> Self {
        Self { kind, dim, flags, entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, m: DMatrix<f64>) {
        self.entries.insert(name.to_string(), m);
    }

    /// Stores a vector as a `1 × len` entry.
    pub fn insert_vector(&mut self, name: &str, v: &nalgebra::DVector<f64>) {
        self.insert(name, DMatrix::from_row_slice(1, v.len(), v.as_slice()));
    }

    pub fn get_vector(&self, name: &str) -> Result<nalgebra::DVector<f64>> {
        let m = self.get(name)?;
        if m.nrows() != 1 {
            return Err(Error::Format(format!("entry '{name}' is not a row vector")));
        }
        Ok(nalgebra::DVector::from_iterator(m.ncols(), m.iter().copied()))
    }

    pub fn get(&self, name: &str) -> Result<&DMatrix<f64>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Format(format!("container has no entry '{name}'")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&self.kind.to_le_bytes());
        out.extend_from_slice(&self.dim.to_le_bytes());
        out.extend_from_slice(&self.flags.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, m) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    out.extend_from_slice(&m[(i, j)].to_le_bytes());
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MODEL_MAGIC {
            return Err(Error::Format("bad model container magic".into()));
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported model container version {version}")));
        }
        let kind = r.u32()?;
        let dim = r.u64()?;
        let flags = r.u32()?;
        let count = r.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let mut values = Vec::with_capacity(rows.saturating_mul(cols).min(1 << 24));
            for _ in 0..rows * cols {
                values.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
            }
            entries.insert(name, DMatrix::from_row_slice(rows, cols, &values));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after model container".into()));
        }
        Ok(Self { kind, dim, flags, entries })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated model container".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
