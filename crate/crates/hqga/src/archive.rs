//! Per-video feature archives and token embedding archives.
//!
//! A feature archive holds exactly six `f32` arrays (`motion`,
//! `appearance`, `region_feats`, `region_boxes`, `frame_size`,
//! `frame_times`) and a JSON manifest under the `manifest` metadata key.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use hqga_core::datamodel::RawFeatureBundle;
use hqga_core::{HierarchyConfig, Matrix};
use serde::{Deserialize, Serialize};

use crate::arrays::{self, Array};
use crate::error::{IoError, Result};

pub const MANIFEST_KEY: &str = "manifest";
pub const FEATURE_ARRAYS: [&str; 6] =
    ["motion", "appearance", "region_feats", "region_boxes", "frame_size", "frame_times"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureManifest {
    #[serde(rename = "K")]
    pub clips: usize,
    #[serde(rename = "L")]
    pub clip_len: usize,
    pub gamma: f64,
    #[serde(rename = "N")]
    pub regions: usize,
    pub d_m: usize,
    pub d_a: usize,
    pub d_r: usize,
}

impl FeatureManifest {
    pub fn for_bundle(bundle: &RawFeatureBundle, config: &HierarchyConfig) -> Self {
        Self {
            clips: bundle.clips(),
            clip_len: config.clip_len,
            gamma: config.gamma,
            regions: bundle.regions(),
            d_m: bundle.motion.cols(),
            d_a: bundle.appearance.cols(),
            d_r: bundle.region_feats.first().map_or(0, Matrix::cols),
        }
    }

    /// `T = γ·L·K`, if that is a positive integer.
    pub fn frames(&self) -> Option<usize> {
        let t = self.gamma * self.clip_len as f64 * self.clips as f64;
        let r = t.round();
        ((t - r).abs() < 1e-9 && r >= 1.0).then_some(r as usize)
    }
}

pub fn save_feature_archive(bundle: &RawFeatureBundle, config: &HierarchyConfig, path: &Path) -> Result<()> {
    bundle.validate()?;
    let manifest = FeatureManifest::for_bundle(bundle, config);
    let (t, n) = (bundle.frames(), bundle.regions());
    let mut a = BTreeMap::new();
    a.insert("motion".into(), Array::f32(vec![bundle.clips(), manifest.d_m], bundle.motion.data().to_vec()));
    a.insert("appearance".into(), Array::f32(vec![t, manifest.d_a], bundle.appearance.data().to_vec()));
    let feats = bundle.region_feats.iter().flat_map(|m| m.data().iter().copied()).collect();
    a.insert("region_feats".into(), Array::f32(vec![t, n, manifest.d_r], feats));
    let boxes = bundle.region_boxes.iter().flatten().flatten().copied().collect();
    a.insert("region_boxes".into(), Array::f32(vec![t, n, 4], boxes));
    a.insert("frame_size".into(), Array::f32(vec![2], vec![bundle.frame_size.0, bundle.frame_size.1]));
    a.insert("frame_times".into(), Array::f32(vec![t], bundle.frame_times.clone()));
    let json = serde_json::to_string(&manifest).map_err(|e| IoError::manifest(path, e))?;
    arrays::write(path, &a, Some((MANIFEST_KEY, &json)))
}

fn f32_payload(path: &Path, name: &str, a: Array) -> Result<Vec<f32>> {
    match a.data {
        arrays::ArrayData::F32(v) => Ok(v),
        arrays::ArrayData::F64(_) => Err(IoError::Container {
            path: path.to_path_buf(),
            reason: format!("array {name:?} must be f32"),
        }),
    }
}

/// Loads and validates a feature archive.
pub fn load_feature_archive(path: &Path) -> Result<(RawFeatureBundle, FeatureManifest)> {
    let mut file = arrays::read(path)?;
    let manifest: FeatureManifest =
        serde_json::from_str(file.metadata(MANIFEST_KEY)?).map_err(|e| IoError::manifest(path, e))?;
    let t = manifest.frames().ok_or_else(|| IoError::manifest(path, "gamma*L*K is not a positive integer"))?;
    let (k, n) = (manifest.clips, manifest.regions);
    if k == 0 || n == 0 {
        return Err(IoError::manifest(path, "K and N must be positive"));
    }
    let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
        let a = file.take_shaped(name, shape)?;
        f32_payload(path, name, a)
    };
    let motion = take("motion", &[k, manifest.d_m])?;
    let appearance = take("appearance", &[t, manifest.d_a])?;
    let feats = take("region_feats", &[t, n, manifest.d_r])?;
    let boxes = take("region_boxes", &[t, n, 4])?;
    let size = take("frame_size", &[2])?;
    let frame_times = take("frame_times", &[t])?;
    if let Some(extra) = file.arrays.keys().next() {
        return Err(IoError::manifest(path, format!("unexpected array {extra:?}")));
    }
    let bundle = RawFeatureBundle {
        motion: Matrix::from_vec(k, manifest.d_m, motion),
        appearance: Matrix::from_vec(t, manifest.d_a, appearance),
        region_feats: feats.chunks(n * manifest.d_r).map(|c| Matrix::from_vec(n, manifest.d_r, c.to_vec())).collect(),
        region_boxes: boxes
            .chunks(n * 4)
            .map(|frame| frame.chunks(4).map(|b| [b[0], b[1], b[2], b[3]]).collect())
            .collect(),
        frame_size: (size[0], size[1]),
        frame_times,
    };
    bundle.validate()?;
    Ok((bundle, manifest))
}

/// Precomputed token embeddings with their vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenEmbeddings {
    /// `V × d_e`, row `i` is the token with index `i`.
    pub embeddings: Matrix<f32>,
    pub vocab: HashMap<String, u32>,
}

pub const VOCAB_KEY: &str = "vocab";

pub fn save_embeddings(e: &TokenEmbeddings, path: &Path) -> Result<()> {
    let mut a = BTreeMap::new();
    let (v, d) = e.embeddings.shape();
    a.insert("embeddings".into(), Array::f32(vec![v, d], e.embeddings.data().to_vec()));
    let sorted: BTreeMap<_, _> = e.vocab.iter().collect();
    let json = serde_json::to_string(&sorted).map_err(|err| IoError::manifest(path, err))?;
    arrays::write(path, &a, Some((VOCAB_KEY, &json)))
}

pub fn load_embeddings(path: &Path) -> Result<TokenEmbeddings> {
    let mut file = arrays::read(path)?;
    let vocab: HashMap<String, u32> =
        serde_json::from_str(file.metadata(VOCAB_KEY)?).map_err(|e| IoError::manifest(path, e))?;
    let a = file.take("embeddings")?;
    if a.shape.len() != 2 {
        return Err(IoError::Shape {
            path: path.to_path_buf(),
            name: "embeddings".into(),
            expected: vec![vocab.len(), 0],
            found: a.shape,
        });
    }
    let (v, d) = (a.shape[0], a.shape[1]);
    if let Some((tok, &i)) = vocab.iter().find(|(_, &i)| i as usize >= v) {
        return Err(IoError::manifest(path, format!("token {tok:?} maps to row {i} of {v}")));
    }
    let data = f32_payload(path, "embeddings", a)?;
    Ok(TokenEmbeddings { embeddings: Matrix::from_vec(v, d, data), vocab })
}
