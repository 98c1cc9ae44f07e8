//! Named little-endian float arrays in a safetensors container.
//!
//! Metadata is always a single `__metadata__` entry so the header bytes are
//! a pure function of the content (the container keeps metadata in a hash
//! map, whose iteration order would otherwise vary between processes).

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use safetensors::tensor::{Dtype, SafeTensors, View};

use crate::error::{IoError, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl Array {
    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data: ArrayData::F32(data) }
    }

    pub fn f64(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data: ArrayData::F64(data) }
    }

    /// Widens or narrows to `f64`; `f32 → f64` is exact.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            ArrayData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            ArrayData::F64(v) => v.clone(),
        }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            ArrayData::F32(v) => Some(v),
            ArrayData::F64(_) => None,
        }
    }
}

impl View for &Array {
    fn dtype(&self) -> Dtype {
        match self.data {
            ArrayData::F32(_) => Dtype::F32,
            ArrayData::F64(_) => Dtype::F64,
        }
    }
    fn shape(&self) -> &[usize] {
        &self.shape
    }
    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Owned(match &self.data {
            ArrayData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        })
    }
    fn data_len(&self) -> usize {
        match &self.data {
            ArrayData::F32(v) => v.len() * 4,
            ArrayData::F64(v) => v.len() * 8,
        }
    }
}

/// Decoded container contents.
#[derive(Clone, Debug, PartialEq)]
pub struct ArrayFile {
    pub path: PathBuf,
    pub arrays: BTreeMap<String, Array>,
    pub metadata: Option<(String, String)>,
}

impl ArrayFile {
    pub fn take(&mut self, name: &str) -> Result<Array> {
        self.arrays
            .remove(name)
            .ok_or_else(|| IoError::MissingArray { path: self.path.clone(), name: name.to_string() })
    }

    /// Removes `name` and checks its shape.
    pub fn take_shaped(&mut self, name: &str, expected: &[usize]) -> Result<Array> {
        let a = self.take(name)?;
        if a.shape != expected {
            return Err(IoError::Shape {
                path: self.path.clone(),
                name: name.to_string(),
                expected: expected.to_vec(),
                found: a.shape,
            });
        }
        Ok(a)
    }

    /// The metadata value stored under `key`.
    pub fn metadata(&self, key: &str) -> Result<&str> {
        match &self.metadata {
            Some((k, v)) if k == key => Ok(v),
            _ => Err(IoError::manifest(&self.path, format!("no {key:?} metadata entry"))),
        }
    }
}

pub fn to_bytes(arrays: &BTreeMap<String, Array>, metadata: Option<(&str, &str)>) -> Result<Vec<u8>> {
    let info = metadata.map(|(k, v)| HashMap::from([(k.to_string(), v.to_string())]));
    safetensors::serialize(arrays.iter().map(|(k, v)| (k.as_str(), v)), &info)
        .map_err(|e| IoError::Container { path: PathBuf::new(), reason: e.to_string() })
}

pub fn write(path: &Path, arrays: &BTreeMap<String, Array>, metadata: Option<(&str, &str)>) -> Result<()> {
    let bytes = to_bytes(arrays, metadata).map_err(|e| match e {
        IoError::Container { reason, .. } => IoError::Container { path: path.to_path_buf(), reason },
        other => other,
    })?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| IoError::io(path, e))
}

pub fn read(path: &Path) -> Result<ArrayFile> {
    let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
    from_bytes(path, &bytes)
}

pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<ArrayFile> {
    let container = |reason: String| IoError::Container { path: path.to_path_buf(), reason };
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| container(e.to_string()))?;
    let metadata = match header.metadata() {
        None => None,
        Some(m) if m.len() == 1 => m.iter().next().map(|(k, v)| (k.clone(), v.clone())),
        Some(m) => return Err(IoError::manifest(path, format!("expected one metadata entry, found {}", m.len()))),
    };
    let st = SafeTensors::deserialize(bytes).map_err(|e| container(e.to_string()))?;
    let mut arrays = BTreeMap::new();
    for (name, view) in st.tensors() {
        let raw = view.data();
        let data = match view.dtype() {
            Dtype::F32 => ArrayData::F32(
                raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk"))).collect(),
            ),
            Dtype::F64 => ArrayData::F64(
                raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect(),
            ),
            other => return Err(container(format!("array {name:?} has unsupported dtype {other:?}"))),
        };
        arrays.insert(name, Array { shape: view.shape().to_vec(), data });
    }
    Ok(ArrayFile { path: path.to_path_buf(), arrays, metadata })
}
