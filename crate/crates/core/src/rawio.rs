//! Manifest + raw little-endian array files. One directory holds a
//! `manifest.json` listing `{name, shape, dtype, file}` entries plus one raw
//! row-major file per entry. Datasets and checkpoints share this format.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RawArray {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl RawArray {
    pub fn shape(&self) -> &[usize] {
        match self {
            RawArray::F32 { shape, .. } | RawArray::U8 { shape, .. } => shape,
        }
    }

    pub fn len(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> &'static str {
        match self {
            RawArray::F32 { .. } => "f32",
            RawArray::U8 { .. } => "u8",
        }
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match self {
            RawArray::F32 { data, .. } => Ok(data),
            RawArray::U8 { .. } => Err(Error::Data("expected f32 array, found u8".into())),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match self {
            RawArray::U8 { data, .. } => Ok(data),
            RawArray::F32 { .. } => Err(Error::Data("expected u8 array, found f32".into())),
        }
    }
}

/// Write arrays to `dir`. Files are named after the entries; the manifest
/// records the layout. Overwrites existing files.
pub fn write_arrays(dir: &Path, arrays: &[(String, RawArray)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Vec::with_capacity(arrays.len());
    for (name, arr) in arrays {
        let file = format!("{}.{}", name, arr.dtype());
        let path = dir.join(&file);
        let expected = arr.len();
        let bytes = match arr {
            RawArray::F32 { data, .. } => {
                if data.len() != expected {
                    return Err(Error::Data(format!(
                        "array {name}: {} values but shape implies {expected}",
                        data.len()
                    )));
                }
                let mut b = Vec::with_capacity(data.len() * 4);
                for v in data {
                    b.extend_from_slice(&v.to_le_bytes());
                }
                b
            }
            RawArray::U8 { data, .. } => {
                if data.len() != expected {
                    return Err(Error::Data(format!(
                        "array {name}: {} values but shape implies {expected}",
                        data.len()
                    )));
                }
                data.clone()
            }
        };
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: arr.shape().to_vec(),
            dtype: arr.dtype().to_string(),
            file,
        });
    }
    let mpath = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Data(format!("manifest encode: {e}")))?;
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

/// Read every array listed in the directory manifest, in manifest order.
pub fn read_arrays(dir: &Path) -> Result<Vec<(String, RawArray)>> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Vec<ManifestEntry> = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("malformed manifest {}: {e}", mpath.display())))?;
    let mut out = Vec::with_capacity(manifest.len());
    for entry in &manifest {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let count: usize = entry.shape.iter().product();
        let arr = match entry.dtype.as_str() {
            "f32" => {
                if bytes.len() != count * 4 {
                    return Err(Error::Data(format!(
                        "array {}: file {} has {} bytes, manifest shape {:?} implies {}",
                        entry.name,
                        entry.file,
                        bytes.len(),
                        entry.shape,
                        count * 4
                    )));
                }
                let data = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                RawArray::F32 {
                    shape: entry.shape.clone(),
                    data,
                }
            }
            "u8" => {
                if bytes.len() != count {
                    return Err(Error::Data(format!(
                        "array {}: file {} has {} bytes, manifest shape {:?} implies {}",
                        entry.name,
                        entry.file,
                        bytes.len(),
                        entry.shape,
                        count
                    )));
                }
                RawArray::U8 {
                    shape: entry.shape.clone(),
                    data: bytes,
                }
            }
            other => {
                return Err(Error::Data(format!(
                    "array {}: unknown dtype {other:?} (only f32/u8 supported)",
                    entry.name
                )))
            }
        };
        out.push((entry.name.clone(), arr));
    }
    Ok(out)
}

pub fn find<'a>(arrays: &'a [(String, RawArray)], name: &str) -> Result<&'a RawArray> {
    arrays
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, a)| a)
        .ok_or_else(|| Error::Data(format!("array {name} missing from manifest")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn sample() -> Vec<(String, RawArray)> {
        vec![
            (
                "a".into(),
                RawArray::F32 {
                    shape: vec![2, 3],
                    data: vec![0.0, 1.5, -2.0, 3.25, f32::MIN_POSITIVE, 1e9],
                },
            ),
            (
                "b".into(),
                RawArray::U8 {
                    shape: vec![4],
                    data: vec![0, 1, 2, 255],
                },
            ),
        ]
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let arrays = sample();
        write_arrays(dir.path(), &arrays).unwrap();
        let back = read_arrays(dir.path()).unwrap();
        assert_eq!(arrays, back);
    }

    #[test]
    fn truncated_raw_file_is_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write_arrays(dir.path(), &sample()).unwrap();
        let p = dir.path().join("a.f32");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        let err = read_arrays(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "got {err}");
        assert!(err.to_string().contains("implies"));
    }

    #[test]
    fn unknown_dtype_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_arrays(dir.path(), &sample()).unwrap();
        let mpath = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath)
            .unwrap()
            .replace("\"dtype\": \"f32\"", "\"dtype\": \"f64\"");
        fs::write(&mpath, text).unwrap();
        // raw file names still end in .f32 which is fine; dtype drives parsing
        let err = read_arrays(dir.path()).unwrap_err();
        assert!(err.to_string().contains("unknown dtype"));
    }

    #[test]
    fn malformed_manifest_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), "{not json").unwrap();
        let err = read_arrays(dir.path()).unwrap_err();
        assert!(err.to_string().contains("malformed manifest"));
    }
}
