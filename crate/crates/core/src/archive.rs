//! Named-tensor archive: the weight file format shared by backend weights,
//! retrieval projections, and persisted LoRA deltas.
//!
//! An archive is a raw little-endian `f64` data file plus a `<path>.json`
//! sidecar listing tensor names, shapes, and element offsets, along with an
//! optional string metadata map. Save/load round-trips are bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ARCHIVE_FORMAT: &str = "storyreel-tensors";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed sidecar {path}: {source}")]
    Sidecar {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("unsupported archive format {format:?} version {version} in {path}")]
    Format { format: String, version: u32, path: PathBuf },
    #[error("tensor {name}: shape {shape:?} does not cover {len} elements")]
    ShapeMismatch { name: String, shape: Vec<usize>, len: usize },
    #[error("duplicate tensor name {0}")]
    DuplicateName(String),
    #[error("data file {path} has {got} elements, sidecar expects {expected}")]
    Truncated { path: PathBuf, got: usize, expected: usize },
    #[error("archive {path} is missing tensor {name}")]
    MissingTensor { path: PathBuf, name: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self { name: name.into(), shape, data }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    format: String,
    version: u32,
    #[serde(default)]
    meta: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

pub fn save(
    path: &Path,
    tensors: &[NamedTensor],
    meta: &BTreeMap<String, String>,
) -> Result<(), ArchiveError> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0usize;
    let mut seen = std::collections::BTreeSet::new();
    for t in tensors {
        if !seen.insert(&t.name) {
            return Err(ArchiveError::DuplicateName(t.name.clone()));
        }
        let expect: usize = t.shape.iter().product();
        if expect != t.data.len() {
            return Err(ArchiveError::ShapeMismatch {
                name: t.name.clone(),
                shape: t.shape.clone(),
                len: t.data.len(),
            });
        }
        entries.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            offset,
            len: t.data.len(),
        });
        offset += t.data.len();
    }

    let io_err = |source| ArchiveError::Io { path: path.to_path_buf(), source };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err)?;
        }
    }
    let mut file = fs::File::create(path).map_err(io_err)?;
    let mut buf = Vec::with_capacity(offset * 8);
    for t in tensors {
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    file.write_all(&buf).map_err(io_err)?;

    let sidecar = Sidecar {
        format: ARCHIVE_FORMAT.to_string(),
        version: ARCHIVE_VERSION,
        meta: meta.clone(),
        tensors: entries,
    };
    let sc_path = sidecar_path(path);
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&sc_path, json).map_err(|source| ArchiveError::Io { path: sc_path, source })?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Vec<NamedTensor>, BTreeMap<String, String>), ArchiveError> {
    let sc_path = sidecar_path(path);
    let sc_bytes =
        fs::read(&sc_path).map_err(|source| ArchiveError::Io { path: sc_path.clone(), source })?;
    let sidecar: Sidecar = serde_json::from_slice(&sc_bytes)
        .map_err(|source| ArchiveError::Sidecar { path: sc_path.clone(), source })?;
    if sidecar.format != ARCHIVE_FORMAT || sidecar.version != ARCHIVE_VERSION {
        return Err(ArchiveError::Format {
            format: sidecar.format,
            version: sidecar.version,
            path: sc_path,
        });
    }

    let mut file = fs::File::open(path)
        .map_err(|source| ArchiveError::Io { path: path.to_path_buf(), source })?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|source| ArchiveError::Io { path: path.to_path_buf(), source })?;
    let total: usize = sidecar.tensors.iter().map(|t| t.len).sum();
    if bytes.len() != total * 8 {
        return Err(ArchiveError::Truncated {
            path: path.to_path_buf(),
            got: bytes.len() / 8,
            expected: total,
        });
    }

    let mut tensors = Vec::with_capacity(sidecar.tensors.len());
    for entry in &sidecar.tensors {
        let expect: usize = entry.shape.iter().product();
        if expect != entry.len {
            return Err(ArchiveError::ShapeMismatch {
                name: entry.name.clone(),
                shape: entry.shape.clone(),
                len: entry.len,
            });
        }
        let start = entry.offset * 8;
        let end = start + entry.len * 8;
        let data = bytes[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        tensors.push(NamedTensor { name: entry.name.clone(), shape: entry.shape.clone(), data });
    }
    Ok((tensors, sidecar.meta))
}

/// Pull one tensor out of a loaded archive by name.
pub fn take_tensor(
    tensors: &mut Vec<NamedTensor>,
    path: &Path,
    name: &str,
) -> Result<NamedTensor, ArchiveError> {
    match tensors.iter().position(|t| t.name == name) {
        Some(idx) => Ok(tensors.remove(idx)),
        None => {
            Err(ArchiveError::MissingTensor { path: path.to_path_buf(), name: name.to_string() })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("weights.archive");
        let tensors = vec![
            NamedTensor::new("a", vec![2, 3], vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE, 0.1, 1e300]),
            NamedTensor::new("b", vec![4], vec![0.0, -0.0, 2.0_f64.powi(-53), 7.0]),
        ];
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), "test".to_string());
        save(&path, &tensors, &meta).unwrap();
        let (loaded, got_meta) = load(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        for (orig, back) in tensors.iter().zip(&loaded) {
            assert_eq!(orig.name, back.name);
            assert_eq!(orig.shape, back.shape);
            // Bitwise comparison, not numeric.
            let a: Vec<u64> = orig.data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        assert_eq!(got_meta.get("kind").map(String::as_str), Some("test"));
    }

    #[test]
    fn duplicate_names_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("dup.archive");
        let tensors = vec![
            NamedTensor::new("x", vec![1], vec![1.0]),
            NamedTensor::new("x", vec![1], vec![2.0]),
        ];
        assert!(matches!(
            save(&path, &tensors, &BTreeMap::new()),
            Err(ArchiveError::DuplicateName(_))
        ));
    }

    #[test]
    fn truncated_data_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.archive");
        let tensors = vec![NamedTensor::new("x", vec![4], vec![1.0, 2.0, 3.0, 4.0])];
        save(&path, &tensors, &BTreeMap::new()).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load(&path), Err(ArchiveError::Truncated { .. })));
    }
}
