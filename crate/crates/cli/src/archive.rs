//! Tensor archive: a magic line, the manifest length, a JSON manifest and a
//! little-endian row-major blob.
//!
//! ```text
//! QMOE-ARCHIVE
//! <manifest bytes>
//! {"format_version":1, ...}
//! <blob>
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAGIC: &str = "QMOE-ARCHIVE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a model archive (bad magic line)")]
    Magic,
    #[error("malformed archive header: {0}")]
    Header(String),
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("checksum mismatch: manifest says {expected}, blob hashes to {actual}")]
    Checksum { expected: String, actual: String },
    #[error("bad tensor directory: {0}")]
    Directory(String),
    #[error("expected a {expected} archive, found {found}")]
    Kind { expected: String, found: String },
    #[error("missing tensor {0}")]
    Missing(String),
    #[error("tensor {name}: {detail}")]
    Tensor { name: String, detail: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    I8,
    I32,
    I64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::I8 => 1,
            DType::F32 | DType::I32 => 4,
            DType::F64 | DType::I64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I8(Vec<i8>),
    I32(Vec<i32>),
    I64(Vec<i64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::I8(_) => DType::I8,
            TensorData::I32(_) => DType::I32,
            TensorData::I64(_) => DType::I64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I8(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Smallest integer type holding every value.
    pub fn compact_ints(values: impl IntoIterator<Item = i64>) -> Self {
        let v: Vec<i64> = values.into_iter().collect();
        if v.iter().all(|&x| i8::try_from(x).is_ok()) {
            TensorData::I8(v.iter().map(|&x| x as i8).collect())
        } else if v.iter().all(|&x| i32::try_from(x).is_ok()) {
            TensorData::I32(v.iter().map(|&x| x as i32).collect())
        } else {
            TensorData::I64(v)
        }
    }

    pub fn to_f64(&self) -> Option<Vec<f64>> {
        match self {
            TensorData::F32(v) => Some(v.iter().map(|&x| x as f64).collect()),
            TensorData::F64(v) => Some(v.clone()),
            _ => None,
        }
    }

    pub fn to_i64(&self) -> Option<Vec<i64>> {
        match self {
            TensorData::I8(v) => Some(v.iter().map(|&x| x as i64).collect()),
            TensorData::I32(v) => Some(v.iter().map(|&x| x as i64).collect()),
            TensorData::I64(v) => Some(v.clone()),
            _ => None,
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I8(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: DType, bytes: &[u8]) -> Self {
        fn chunks<const N: usize>(b: &[u8]) -> impl Iterator<Item = [u8; N]> + '_ {
            b.chunks_exact(N).map(|c| c.try_into().expect("exact chunk"))
        }
        match dtype {
            DType::F32 => TensorData::F32(chunks::<4>(bytes).map(f32::from_le_bytes).collect()),
            DType::F64 => TensorData::F64(chunks::<8>(bytes).map(f64::from_le_bytes).collect()),
            DType::I8 => TensorData::I8(bytes.iter().map(|&b| b as i8).collect()),
            DType::I32 => TensorData::I32(chunks::<4>(bytes).map(i32::from_le_bytes).collect()),
            DType::I64 => TensorData::I64(chunks::<8>(bytes).map(i64::from_le_bytes).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// `float_model`, `quantized_model` or `inputs`.
    pub kind: String,
    /// Kind-specific structured header (config, quantization params, seed).
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub blob_bytes: u64,
    pub blob_sha256: String,
}

/// An in-memory archive; tensors keep insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

impl Archive {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.to_string(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: TensorData) {
        self.tensors.push((name.into(), Tensor { shape, data }));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ArchiveError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| ArchiveError::Missing(name.to_string()))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), ArchiveError> {
        if self.kind != kind {
            return Err(ArchiveError::Kind {
                expected: kind.to_string(),
                found: self.kind.clone(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ArchiveError> {
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let n: usize = t.shape.iter().product();
            if n != t.data.len() {
                return Err(ArchiveError::Tensor {
                    name: name.clone(),
                    detail: format!("shape {:?} holds {n} values, data has {}", t.shape, t.data.len()),
                });
            }
            let offset = blob.len() as u64;
            t.data.write_le(&mut blob);
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: t.data.dtype(),
                shape: t.shape.clone(),
                offset,
                bytes: blob.len() as u64 - offset,
            });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
            blob_bytes: blob.len() as u64,
            blob_sha256: sha256_hex(&blob),
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| ArchiveError::Header(e.to_string()))?;
        let mut out = Vec::with_capacity(json.len() + blob.len() + 32);
        writeln!(out, "{MAGIC}").expect("write to vec");
        writeln!(out, "{}", json.len()).expect("write to vec");
        out.extend_from_slice(json.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArchiveError> {
        let (manifest, blob) = split(bytes)?;
        let actual = sha256_hex(blob);
        if actual != manifest.blob_sha256 {
            return Err(ArchiveError::Checksum {
                expected: manifest.blob_sha256,
                actual,
            });
        }
        let mut cursor = 0u64;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != cursor || e.bytes != (n * e.dtype.size()) as u64 {
                return Err(ArchiveError::Directory(format!(
                    "{} at offset {} with {} bytes does not follow the previous tensor or its shape",
                    e.name, e.offset, e.bytes
                )));
            }
            cursor += e.bytes;
            if cursor > blob.len() as u64 {
                return Err(ArchiveError::Directory(format!("{} runs past the blob", e.name)));
            }
            let raw = &blob[e.offset as usize..cursor as usize];
            tensors.push((
                e.name.clone(),
                Tensor {
                    shape: e.shape.clone(),
                    data: TensorData::read_le(e.dtype, raw),
                },
            ));
        }
        if cursor != manifest.blob_bytes || cursor != blob.len() as u64 {
            return Err(ArchiveError::Directory("tensors do not cover the blob exactly".into()));
        }
        Ok(Self {
            kind: manifest.kind,
            meta: manifest.meta,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), ArchiveError> {
        std::fs::write(path, self.to_bytes()?).map_err(|source| ArchiveError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, ArchiveError> {
        let bytes = std::fs::read(path).map_err(|source| ArchiveError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Parses the header and returns the manifest and the blob that follows it.
pub fn split(bytes: &[u8]) -> Result<(Manifest, &[u8]), ArchiveError> {
    let magic_end = MAGIC.len() + 1;
    if bytes.len() < magic_end || &bytes[..MAGIC.len()] != MAGIC.as_bytes() || bytes[MAGIC.len()] != b'\n' {
        return Err(ArchiveError::Magic);
    }
    let rest = &bytes[magic_end..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| ArchiveError::Header("missing manifest length".into()))?;
    let len: usize = std::str::from_utf8(&rest[..nl])
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| ArchiveError::Header("manifest length is not a number".into()))?;
    let body = &rest[nl + 1..];
    if body.len() < len + 1 || body[len] != b'\n' {
        return Err(ArchiveError::Header("truncated manifest".into()));
    }
    let manifest: Manifest =
        serde_json::from_slice(&body[..len]).map_err(|e| ArchiveError::Header(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(ArchiveError::Version(manifest.format_version));
    }
    Ok((manifest, &body[len + 1..]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Archive {
        let mut a = Archive::new("inputs", serde_json::json!({"seed": 3}));
        a.push("x", vec![2, 2], TensorData::F32(vec![1.0, -2.5, 3.25, 0.0]));
        a.push("codes", vec![3], TensorData::compact_ints([1, -128, 127]));
        a.push("bias", vec![2], TensorData::compact_ints([1 << 40, -7]));
        a
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let a = sample();
        let bytes = a.to_bytes().unwrap();
        let b = Archive::from_bytes(&bytes).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.to_bytes().unwrap(), bytes);
        assert_eq!(b.get("codes").unwrap().data.dtype(), DType::I8);
        assert_eq!(b.get("bias").unwrap().data.dtype(), DType::I64);
    }

    #[test]
    fn corrupt_blob_fails_the_checksum() {
        let mut bytes = sample().to_bytes().unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        assert!(matches!(Archive::from_bytes(&bytes), Err(ArchiveError::Checksum { .. })));
    }

    #[test]
    fn bad_headers_are_rejected() {
        assert!(matches!(Archive::from_bytes(b"nope"), Err(ArchiveError::Magic)));
        assert!(matches!(Archive::from_bytes(b"QMOE-ARCHIVE\nxx\n"), Err(ArchiveError::Header(_))));
        let bytes = sample().to_bytes().unwrap();
        assert!(Archive::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected_on_write() {
        let mut a = Archive::new("inputs", serde_json::Value::Null);
        a.push("x", vec![3], TensorData::F64(vec![1.0]));
        assert!(matches!(a.to_bytes(), Err(ArchiveError::Tensor { .. })));
    }
}
