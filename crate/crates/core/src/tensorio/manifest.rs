//! Manifest schema and raw binary tensor encoding.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element types the container supports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    Real32,
    Int32,
    Uint8,
    Bit,
}

impl Dtype {
    pub fn as_str(&self) -> &'static str {
        match self {
            Dtype::Real32 => "real32",
            Dtype::Int32 => "int32",
            Dtype::Uint8 => "uint8",
            Dtype::Bit => "bit",
        }
    }

    fn parse(name: &str, s: &str) -> Result<Self> {
        match s {
            "real32" => Ok(Dtype::Real32),
            "int32" => Ok(Dtype::Int32),
            "uint8" => Ok(Dtype::Uint8),
            "bit" => Ok(Dtype::Bit),
            other => Err(Error::UnknownDtype {
                name: name.to_string(),
                dtype: other.to_string(),
            }),
        }
    }
}

pub const BYTE_ORDER: &str = "little-endian";
pub const LAYOUT: &str = "row-major";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub dtype: String,
    pub file: String,
    pub byte_order: String,
    pub layout: String,
}

impl ManifestEntry {
    /// Byte length the entry's file must have.
    pub fn expected_bytes(&self) -> Result<u64> {
        let dtype = Dtype::parse(&self.name, &self.dtype)?;
        if self.dims.is_empty() || self.dims.iter().any(|&d| d == 0) {
            return Err(Error::DimMismatch(format!(
                "entry '{}' has invalid dims {:?}",
                self.name, self.dims
            )));
        }
        let count: u64 = self.dims.iter().map(|&d| d as u64).product();
        Ok(match dtype {
            Dtype::Real32 | Dtype::Int32 => count * 4,
            Dtype::Uint8 => count,
            Dtype::Bit => {
                let cols = *self.dims.last().expect("nonempty") as u64;
                let rows = count / cols;
                rows * cols.div_ceil(8)
            }
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct TensorManifest {
    pub entries: Vec<ManifestEntry>,
    /// Structured artifact metadata; absent for plain tensor containers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact: Option<serde_json::Value>,
}

/// Parse and validate a manifest: entry names unique, fixed fields as
/// declared, every referenced file present with the exact byte length.
pub fn read_manifest(path: &Path) -> Result<TensorManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: TensorManifest =
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            source: e,
        })?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut seen = std::collections::BTreeSet::new();
    for entry in &manifest.entries {
        if !seen.insert(entry.name.clone()) {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                message: format!("duplicate entry name '{}'", entry.name),
            });
        }
        if entry.byte_order != BYTE_ORDER {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                message: format!(
                    "entry '{}': byte_order must be '{BYTE_ORDER}', got '{}'",
                    entry.name, entry.byte_order
                ),
            });
        }
        if entry.layout != LAYOUT {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                message: format!(
                    "entry '{}': layout must be '{LAYOUT}', got '{}'",
                    entry.name, entry.layout
                ),
            });
        }
        let expected = entry.expected_bytes()?;
        let file = dir.join(&entry.file);
        let actual = match fs::metadata(&file) {
            Ok(m) => m.len(),
            Err(_) => {
                return Err(Error::MissingFile {
                    name: entry.name.clone(),
                    path: file,
                })
            }
        };
        if actual != expected {
            return Err(Error::SizeMismatch {
                name: entry.name.clone(),
                expected,
                actual,
            });
        }
    }
    Ok(manifest)
}

/// Dense tensor decoded from a container entry.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    Real(ArrayD<f64>),
    Int(ArrayD<i32>),
    Byte(ArrayD<u8>),
    Bit(ArrayD<bool>),
}

impl TensorData {
    pub fn dims(&self) -> &[usize] {
        match self {
            TensorData::Real(a) => a.shape(),
            TensorData::Int(a) => a.shape(),
            TensorData::Byte(a) => a.shape(),
            TensorData::Bit(a) => a.shape(),
        }
    }

    pub fn into_real(self) -> Result<ArrayD<f64>> {
        match self {
            TensorData::Real(a) => Ok(a),
            other => Err(Error::DimMismatch(format!(
                "expected a real32 tensor, found {}",
                other.dtype_name()
            ))),
        }
    }

    fn dtype_name(&self) -> &'static str {
        match self {
            TensorData::Real(_) => "real32",
            TensorData::Int(_) => "int32",
            TensorData::Byte(_) => "uint8",
            TensorData::Bit(_) => "bit",
        }
    }
}

pub(crate) fn decode_entry_in(dir: &Path, entry: &ManifestEntry) -> Result<TensorData> {
    let dtype = Dtype::parse(&entry.name, &entry.dtype)?;
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let shape = IxDyn(&entry.dims);
    let count: usize = entry.dims.iter().product();
    Ok(match dtype {
        Dtype::Real32 => {
            let vals: Vec<f64> = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            TensorData::Real(ArrayD::from_shape_vec(shape, vals).expect("size checked"))
        }
        Dtype::Int32 => {
            let vals: Vec<i32> = bytes
                .chunks_exact(4)
                .map(|b| i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            TensorData::Int(ArrayD::from_shape_vec(shape, vals).expect("size checked"))
        }
        Dtype::Uint8 => {
            TensorData::Byte(ArrayD::from_shape_vec(shape, bytes).expect("size checked"))
        }
        Dtype::Bit => {
            let cols = *entry.dims.last().expect("nonempty");
            let rows = count / cols;
            let stride = cols.div_ceil(8);
            let mut vals = Vec::with_capacity(count);
            for r in 0..rows {
                let row = &bytes[r * stride..(r + 1) * stride];
                for c in 0..cols {
                    vals.push(row[c / 8] >> (c % 8) & 1 == 1);
                }
            }
            TensorData::Bit(ArrayD::from_shape_vec(shape, vals).expect("size checked"))
        }
    })
}

/// Load one named tensor from a manifest, verbatim.
pub fn load_tensor(manifest_path: &Path, name: &str) -> Result<TensorData> {
    let manifest = read_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let entry = manifest
        .entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::UnknownTensor {
            name: name.to_string(),
            path: manifest_path.to_path_buf(),
        })?;
    decode_entry_in(dir, entry)
}

fn encode(data: &TensorData) -> Vec<u8> {
    match data {
        TensorData::Real(a) => {
            let mut bytes = Vec::with_capacity(a.len() * 4);
            for &v in a.iter() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
            bytes
        }
        TensorData::Int(a) => {
            let mut bytes = Vec::with_capacity(a.len() * 4);
            for &v in a.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            bytes
        }
        TensorData::Byte(a) => a.iter().copied().collect(),
        TensorData::Bit(a) => {
            let dims = a.shape();
            let cols = *dims.last().expect("nonempty");
            let rows = a.len() / cols;
            let stride = cols.div_ceil(8);
            let flat: Vec<bool> = a.iter().copied().collect();
            let mut bytes = vec![0u8; rows * stride];
            for r in 0..rows {
                for c in 0..cols {
                    if flat[r * cols + c] {
                        bytes[r * stride + c / 8] |= 1 << (c % 8);
                    }
                }
            }
            bytes
        }
    }
}

fn dtype_of(data: &TensorData) -> Dtype {
    match data {
        TensorData::Real(_) => Dtype::Real32,
        TensorData::Int(_) => Dtype::Int32,
        TensorData::Byte(_) => Dtype::Uint8,
        TensorData::Bit(_) => Dtype::Bit,
    }
}

/// Accumulates entries and writes `<stem>.manifest.json` plus one binary
/// per entry into a directory.
pub struct ManifestWriter {
    dir: PathBuf,
    stem: String,
    entries: Vec<ManifestEntry>,
    payloads: Vec<Vec<u8>>,
    artifact: Option<serde_json::Value>,
}

impl ManifestWriter {
    pub fn new(dir: &Path, stem: &str) -> Self {
        Self {
            dir: dir.to_path_buf(),
            stem: stem.to_string(),
            entries: Vec::new(),
            payloads: Vec::new(),
            artifact: None,
        }
    }

    pub fn set_artifact(&mut self, value: serde_json::Value) {
        self.artifact = Some(value);
    }

    pub fn add(&mut self, name: &str, data: &TensorData) -> Result<()> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::InvalidParam(format!(
                "duplicate tensor name '{name}'"
            )));
        }
        if data.dims().is_empty() || data.dims().iter().any(|&d| d == 0) {
            return Err(Error::DimMismatch(format!(
                "tensor '{name}' has empty dims"
            )));
        }
        self.entries.push(ManifestEntry {
            name: name.to_string(),
            dims: data.dims().to_vec(),
            dtype: dtype_of(data).as_str().to_string(),
            file: format!("{}.{}.bin", self.stem, name),
            byte_order: BYTE_ORDER.to_string(),
            layout: LAYOUT.to_string(),
        });
        self.payloads.push(encode(data));
        Ok(())
    }

    /// Write all binaries and the manifest; returns the manifest path.
    pub fn finish(self) -> Result<PathBuf> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        for (entry, payload) in self.entries.iter().zip(&self.payloads) {
            let path = self.dir.join(&entry.file);
            fs::write(&path, payload).map_err(|e| Error::io(&path, e))?;
        }
        let manifest = TensorManifest {
            entries: self.entries,
            artifact: self.artifact,
        };
        let path = self.dir.join(format!("{}.manifest.json", self.stem));
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;
    use tempfile::tempdir;

    fn real(dims: &[usize], vals: Vec<f64>) -> TensorData {
        TensorData::Real(ArrayD::from_shape_vec(IxDyn(dims), vals).unwrap())
    }

    #[test]
    fn two_by_two_real_decodes_verbatim() {
        let dir = tempdir().unwrap();
        let mut w = ManifestWriter::new(dir.path(), "t");
        w.add("weight", &real(&[2, 2], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        let path = w.finish().unwrap();
        let t = load_tensor(&path, "weight").unwrap();
        assert_eq!(t, real(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
    }

    #[test]
    fn unknown_name_is_reported() {
        let dir = tempdir().unwrap();
        let mut w = ManifestWriter::new(dir.path(), "t");
        w.add("weight", &real(&[1], vec![0.5])).unwrap();
        let path = w.finish().unwrap();
        assert!(matches!(
            load_tensor(&path, "missing"),
            Err(Error::UnknownTensor { name, .. }) if name == "missing"
        ));
    }

    #[test]
    fn short_file_is_a_size_mismatch() {
        let dir = tempdir().unwrap();
        let mut w = ManifestWriter::new(dir.path(), "t");
        w.add("weight", &real(&[2, 2], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        let path = w.finish().unwrap();
        let bin = dir.path().join("t.weight.bin");
        let mut bytes = fs::read(&bin).unwrap();
        bytes.pop();
        fs::write(&bin, &bytes).unwrap();
        assert!(matches!(
            load_tensor(&path, "weight"),
            Err(Error::SizeMismatch { name, expected: 16, actual: 15 }) if name == "weight"
        ));
    }

    #[test]
    fn missing_file_names_the_entry() {
        let dir = tempdir().unwrap();
        let mut w = ManifestWriter::new(dir.path(), "t");
        w.add("weight", &real(&[1], vec![0.5])).unwrap();
        let path = w.finish().unwrap();
        fs::remove_file(dir.path().join("t.weight.bin")).unwrap();
        assert!(matches!(
            load_tensor(&path, "weight"),
            Err(Error::MissingFile { name, .. }) if name == "weight"
        ));
    }

    #[test]
    fn unknown_dtype_names_the_entry() {
        let dir = tempdir().unwrap();
        let manifest = r#"{"entries":[{"name":"w","dims":[1],"dtype":"real64",
            "file":"w.bin","byte_order":"little-endian","layout":"row-major"}]}"#;
        let path = dir.path().join("m.manifest.json");
        fs::write(&path, manifest).unwrap();
        fs::write(dir.path().join("w.bin"), [0u8; 8]).unwrap();
        assert!(matches!(
            load_tensor(&path, "w"),
            Err(Error::UnknownDtype { name, dtype }) if name == "w" && dtype == "real64"
        ));
    }

    #[test]
    fn duplicate_names_rejected() {
        let dir = tempdir().unwrap();
        let manifest = r#"{"entries":[
            {"name":"w","dims":[1],"dtype":"uint8","file":"w.bin","byte_order":"little-endian","layout":"row-major"},
            {"name":"w","dims":[1],"dtype":"uint8","file":"w.bin","byte_order":"little-endian","layout":"row-major"}]}"#;
        let path = dir.path().join("m.manifest.json");
        fs::write(&path, manifest).unwrap();
        fs::write(dir.path().join("w.bin"), [1u8]).unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Manifest { .. })));
    }

    #[test]
    fn bit_rows_are_byte_padded() {
        let dir = tempdir().unwrap();
        let mut w = ManifestWriter::new(dir.path(), "t");
        let bits = TensorData::Bit(
            ArrayD::from_shape_vec(
                IxDyn(&[2, 9]),
                (0..18).map(|i| i % 3 == 0).collect::<Vec<bool>>(),
            )
            .unwrap(),
        );
        w.add("mask", &bits).unwrap();
        let path = w.finish().unwrap();
        // 9 columns -> 2 bytes per row
        let raw = fs::read(dir.path().join("t.mask.bin")).unwrap();
        assert_eq!(raw.len(), 4);
        assert_eq!(load_tensor(&path, "mask").unwrap(), bits);
    }

    #[test]
    fn int_and_byte_roundtrip() {
        let dir = tempdir().unwrap();
        let mut w = ManifestWriter::new(dir.path(), "t");
        let ints = TensorData::Int(
            ArrayD::from_shape_vec(IxDyn(&[3]), vec![-5, 0, 1 << 20]).unwrap(),
        );
        let bytes =
            TensorData::Byte(ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![0, 255, 7, 128]).unwrap());
        w.add("ints", &ints).unwrap();
        w.add("bytes", &bytes).unwrap();
        let path = w.finish().unwrap();
        assert_eq!(load_tensor(&path, "ints").unwrap(), ints);
        assert_eq!(load_tensor(&path, "bytes").unwrap(), bytes);
    }
}
