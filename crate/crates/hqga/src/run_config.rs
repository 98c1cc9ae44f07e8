//! The single JSON run configuration and its `--set key=value` overrides.
//!
//! Resolution order is defaults, then the file, then overrides: the file is
//! decoded with every missing key defaulted, re-encoded, and each dotted
//! override replaces one existing leaf. Unknown keys are errors at every
//! stage.

use std::path::{Path, PathBuf};

use hqga_core::synth::{DatasetSizes, WorldSpec};
use hqga_core::training::TrainConfig;
use hqga_core::{AblationVariant, DecoderMode, HierarchyConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::Precision;
use crate::error::{IoError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset directory; when absent the synthetic dataset is generated
    /// in memory from `world`, `sizes` and `seed`.
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    /// Precomputed token embeddings replacing the learned table's init.
    pub embeddings: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self { data: None, out: PathBuf::from("runs/default"), checkpoint: None, embeddings: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSettings {
    pub seeds: Vec<u64>,
    /// Row labels; empty means the full table.
    pub variants: Vec<String>,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2], variants: Vec::new() }
    }
}

impl AblationSettings {
    pub fn variants(&self) -> Result<Vec<AblationVariant>> {
        if self.variants.is_empty() {
            return Ok(AblationVariant::table_rows());
        }
        self.variants
            .iter()
            .map(|l| AblationVariant::from_label(l).ok_or_else(|| IoError::Config(format!("unknown ablation row {l:?}"))))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSettings {
    pub step: f64,
    pub tolerance: f64,
    /// Number of training samples checked.
    pub samples: usize,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-4, samples: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds data generation, initialisation and shuffling;
    /// `train.seed` is overwritten with it.
    pub seed: u64,
    pub precision: Precision,
    /// Token embedding width.
    pub embed_dim: usize,
    pub hierarchy: HierarchyConfig,
    pub train: TrainConfig,
    pub world: WorldSpec,
    /// Episodes per split; each yields four questions.
    pub sizes: DatasetSizes,
    pub paths: Paths,
    pub ablation: AblationSettings,
    pub gradcheck: GradcheckSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            embed_dim: 32,
            hierarchy: HierarchyConfig::default(),
            train: TrainConfig::default(),
            world: WorldSpec::default(),
            sizes: DatasetSizes::default(),
            paths: Paths::default(),
            ablation: AblationSettings::default(),
            gradcheck: GradcheckSettings::default(),
        }
    }
}

/// Replaces the leaf at dotted `key`. The value is parsed as JSON when it
/// parses, otherwise taken as a string.
pub fn apply_override(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut node = root;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| IoError::Config(format!("unknown configuration key {key:?}")))?;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

/// Splits `key=value`.
pub fn parse_assignment(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| IoError::Config(format!("override {s:?} is not key=value")))
}

impl RunConfig {
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
                serde_json::from_str::<RunConfig>(&text)
                    .map_err(|e| IoError::Config(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        let mut value = serde_json::to_value(&base).map_err(|e| IoError::Config(e.to_string()))?;
        for o in overrides {
            let (k, v) = parse_assignment(o)?;
            apply_override(&mut value, k, v)?;
        }
        let mut config: RunConfig =
            serde_json::from_value(value).map_err(|e| IoError::Config(format!("after overrides: {e}")))?;
        config.train.seed = config.seed;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.hierarchy.validate()?;
        self.train.validate()?;
        if self.embed_dim == 0 {
            return Err(IoError::Config("embed_dim must be positive".into()));
        }
        if self.paths.data.is_none() {
            self.world.validate(self.hierarchy.regions)?;
            if let DecoderMode::OpenEnded { answer_set_size } = self.hierarchy.decoder {
                let n = self.world.answer_set().len();
                if answer_set_size != n {
                    return Err(IoError::Config(format!(
                        "answer_set_size={answer_set_size} but the world has {n} answers"
                    )));
                }
            }
        }
        if !(self.gradcheck.step > 0.0 && self.gradcheck.tolerance > 0.0) {
            return Err(IoError::Config("gradcheck step and tolerance must be positive".into()));
        }
        self.ablation.variants()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serialises")
    }
}
