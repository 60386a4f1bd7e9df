//! Weight archive: a directory holding `manifest.json` plus one raw
//! little-endian `.bin` file per named array.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Mat, Real};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT: &str = "slhoi-weights/1";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub format: String,
    pub arrays: Vec<ManifestEntry>,
}

/// Named numeric arrays plus their manifest.
#[derive(Clone, Debug, Default)]
pub struct WeightArchive<T> {
    pub arrays: BTreeMap<String, Mat<T>>,
}

impl<T: Real> WeightArchive<T> {
    pub fn new(arrays: BTreeMap<String, Mat<T>>) -> Self {
        Self { arrays }
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format: FORMAT.to_string(),
            arrays: self
                .arrays
                .iter()
                .map(|(name, m)| ManifestEntry {
                    name: name.clone(),
                    shape: vec![m.rows(), m.cols()],
                    dtype: T::DTYPE.to_string(),
                    file: format!("{name}.bin"),
                })
                .collect(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = self.manifest();
        for entry in &manifest.arrays {
            let path = dir.join(&entry.file);
            let bytes = T::to_le_bytes_vec(self.arrays[&entry.name].data());
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    /// Loads every array listed in the manifest, converting to `T`.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_slice(&text)?;
        if manifest.format != FORMAT {
            return Err(Error::Data(format!(
                "unsupported archive format `{}`",
                manifest.format
            )));
        }
        let mut arrays = BTreeMap::new();
        for entry in manifest.arrays {
            let (rows, cols) = match entry.shape.as_slice() {
                [n] => (1, *n),
                [r, c] => (*r, *c),
                other => {
                    return Err(Error::Data(format!(
                        "array `{}` has unsupported rank {}",
                        entry.name,
                        other.len()
                    )))
                }
            };
            let path = dir.join(&entry.file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let values: Vec<f64> = match entry.dtype.as_str() {
                "f32" => f32::from_le_bytes_slice(&bytes)
                    .into_iter()
                    .map(f64::from)
                    .collect(),
                "f64" => f64::from_le_bytes_slice(&bytes),
                other => {
                    return Err(Error::Data(format!(
                        "array `{}` has unsupported dtype `{other}`",
                        entry.name
                    )))
                }
            };
            if values.len() != rows * cols {
                return Err(Error::Data(format!(
                    "array `{}` holds {} values but its shape is {rows}x{cols}",
                    entry.name,
                    values.len()
                )));
            }
            let data = values.into_iter().map(T::cst).collect();
            arrays.insert(entry.name, Mat::from_vec(rows, cols, data)?);
        }
        Ok(Self { arrays })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut arrays = BTreeMap::new();
        arrays.insert(
            "x.weight".to_string(),
            Mat::from_vec(2, 2, vec![0.1f32, -3.5, f32::MIN_POSITIVE, 7e7]).unwrap(),
        );
        let a = WeightArchive::new(arrays);
        a.save(dir.path()).unwrap();
        let b = WeightArchive::<f32>::load(dir.path()).unwrap();
        assert_eq!(a.arrays, b.arrays);
        assert!(dir.path().join("x.weight.bin").exists());
    }

    #[test]
    fn truncated_array_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut arrays = BTreeMap::new();
        arrays.insert("w".to_string(), Mat::<f32>::zeros(2, 3));
        WeightArchive::new(arrays).save(dir.path()).unwrap();
        fs::write(dir.path().join("w.bin"), [0u8; 8]).unwrap();
        assert!(WeightArchive::<f32>::load(dir.path()).is_err());
    }
}
