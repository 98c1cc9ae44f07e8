//! Model checkpoints: one array per parameter tensor, named by its dotted
//! path, plus a JSON snapshot of the configuration.

use std::collections::BTreeMap;
use std::path::Path;

use hqga_core::model::ModelParams;
use hqga_core::params::ParamVisit;
use hqga_core::{HierarchyConfig, InputDims, Real};
use serde::{Deserialize, Serialize};

use crate::arrays::{self, Array, ArrayData};
use crate::error::{IoError, Result};

pub const SNAPSHOT_KEY: &str = "hqga";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Scalars a checkpoint can store without loss.
pub trait StoredScalar: Real {
    const PRECISION: Precision;
    fn to_array(shape: Vec<usize>, values: &[Self]) -> Array;
    fn from_array(a: Array) -> Option<Vec<Self>>;
}

impl StoredScalar for f32 {
    const PRECISION: Precision = Precision::F32;
    fn to_array(shape: Vec<usize>, values: &[Self]) -> Array {
        Array::f32(shape, values.to_vec())
    }
    fn from_array(a: Array) -> Option<Vec<Self>> {
        match a.data {
            ArrayData::F32(v) => Some(v),
            ArrayData::F64(_) => None,
        }
    }
}

impl StoredScalar for f64 {
    const PRECISION: Precision = Precision::F64;
    fn to_array(shape: Vec<usize>, values: &[Self]) -> Array {
        Array::f64(shape, values.to_vec())
    }
    fn from_array(a: Array) -> Option<Vec<Self>> {
        match a.data {
            ArrayData::F64(v) => Some(v),
            ArrayData::F32(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Snapshot {
    pub config: HierarchyConfig,
    pub dims: InputDims,
    pub precision: Precision,
    /// Best validation accuracy recorded when the checkpoint was taken.
    #[serde(default)]
    pub val_acc: Option<f64>,
}

pub fn save_checkpoint<T: StoredScalar>(
    params: &ModelParams<T>,
    config: &HierarchyConfig,
    val_acc: Option<f64>,
    path: &Path,
) -> Result<()> {
    let mut a = BTreeMap::new();
    params.visit("", &mut |name, m| {
        a.insert(name, T::to_array(vec![m.rows(), m.cols()], m.data()));
    });
    let snapshot = Snapshot { config: config.clone(), dims: params.dims(), precision: T::PRECISION, val_acc };
    let json = serde_json::to_string(&snapshot).map_err(|e| IoError::manifest(path, e))?;
    arrays::write(path, &a, Some((SNAPSHOT_KEY, &json)))
}

/// Reads only the configuration snapshot.
pub fn read_snapshot(path: &Path) -> Result<Snapshot> {
    let file = arrays::read(path)?;
    serde_json::from_str(file.metadata(SNAPSHOT_KEY)?).map_err(|e| IoError::manifest(path, e))
}

/// Loads parameters stored at precision `T`.
pub fn load_checkpoint<T: StoredScalar>(path: &Path) -> Result<(ModelParams<T>, Snapshot)> {
    let mut file = arrays::read(path)?;
    let snapshot: Snapshot =
        serde_json::from_str(file.metadata(SNAPSHOT_KEY)?).map_err(|e| IoError::manifest(path, e))?;
    if snapshot.precision != T::PRECISION {
        return Err(IoError::Config(format!(
            "{} stores {:?} parameters, {:?} requested",
            path.display(),
            snapshot.precision,
            T::PRECISION
        )));
    }
    snapshot.config.validate()?;
    let mut params = ModelParams::<T>::zeros(&snapshot.config, &snapshot.dims);
    let mut failure = None;
    params.visit_mut("", &mut |name, m| {
        if failure.is_some() {
            return;
        }
        let loaded = file.take_shaped(&name, &[m.rows(), m.cols()]).and_then(|a| {
            T::from_array(a).ok_or_else(|| IoError::manifest(path, format!("array {name:?} has the wrong dtype")))
        });
        match loaded {
            Ok(v) => m.data_mut().copy_from_slice(&v),
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(extra) = file.arrays.keys().next() {
        return Err(IoError::manifest(path, format!("unexpected array {extra:?}")));
    }
    Ok((params, snapshot))
}
