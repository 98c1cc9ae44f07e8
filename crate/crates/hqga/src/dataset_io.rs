//! On-disk layout of a synthetic dataset:
//!
//! ```text
//! info.json            geometry, decoder, sizes and seed
//! world.json           grammar the episodes were drawn from
//! vocab.json           token list, index = token id
//! answers.json         open-ended answer set
//! scripts.jsonl        one {"video_ref", "script"} object per episode
//! train.json val.json test.json   QA sample lists
//! features/<video_ref>.safetensors
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use hqga_core::datamodel::QASample;
use hqga_core::synth::{DatasetSizes, EpisodeScript, SyntheticDataset, Vocabulary, WorldSpec};
use hqga_core::training::Dataset;
use hqga_core::HierarchyConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::archive::{load_feature_archive, save_feature_archive, FeatureManifest};
use crate::error::{IoError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetInfo {
    pub config: HierarchyConfig,
    pub sizes: DatasetSizes,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ScriptLine {
    video_ref: String,
    script: EpisodeScript,
}

/// Everything read back from a dataset directory.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredDataset {
    pub info: DatasetInfo,
    pub world: WorldSpec,
    pub vocab: Vocabulary,
    pub answer_set: Vec<String>,
    pub scripts: BTreeMap<String, EpisodeScript>,
    pub data: Dataset,
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

pub fn features_path(dir: &Path, video_ref: &str) -> PathBuf {
    dir.join("features").join(format!("{video_ref}.safetensors"))
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| IoError::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| IoError::json(path, e))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| IoError::io(path, e))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = fs::File::open(path).map_err(|e| IoError::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| IoError::json(path, e))
}

pub fn write_dataset(ds: &SyntheticDataset, info: &DatasetInfo, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("features")).map_err(|e| IoError::io(dir, e))?;
    write_json(&dir.join("info.json"), info)?;
    write_json(&dir.join("world.json"), &ds.world.spec)?;
    write_json(&dir.join("vocab.json"), &ds.vocab.tokens)?;
    write_json(&dir.join("answers.json"), &ds.answer_set)?;
    for (name, split) in SPLITS.iter().zip([&ds.train, &ds.val, &ds.test]) {
        write_json(&dir.join(format!("{name}.json")), split)?;
    }
    let path = dir.join("scripts.jsonl");
    let mut w = BufWriter::new(fs::File::create(&path).map_err(|e| IoError::io(&path, e))?);
    for ep in &ds.episodes {
        let line = ScriptLine { video_ref: ep.video_ref.clone(), script: ep.script.clone() };
        serde_json::to_writer(&mut w, &line).map_err(|e| IoError::json(&path, e))?;
        w.write_all(b"\n").map_err(|e| IoError::io(&path, e))?;
        save_feature_archive(&ep.features, &info.config, &features_path(dir, &ep.video_ref))?;
    }
    w.flush().map_err(|e| IoError::io(&path, e))
}

/// Reads a dataset directory and checks it against its own `info.json`:
/// feature geometry, sample validity and video references.
pub fn read_dataset(dir: &Path) -> Result<StoredDataset> {
    let info: DatasetInfo = read_json(&dir.join("info.json"))?;
    info.config.validate()?;
    let world: WorldSpec = read_json(&dir.join("world.json"))?;
    let vocab = Vocabulary::new(read_json(&dir.join("vocab.json"))?);
    let answer_set: Vec<String> = read_json(&dir.join("answers.json"))?;
    let mut splits: Vec<Vec<QASample>> = Vec::new();
    for name in SPLITS {
        splits.push(read_json(&dir.join(format!("{name}.json")))?);
    }
    let test = splits.pop().unwrap_or_default();
    let val = splits.pop().unwrap_or_default();
    let train = splits.pop().unwrap_or_default();

    let path = dir.join("scripts.jsonl");
    let reader = BufReader::new(fs::File::open(&path).map_err(|e| IoError::io(&path, e))?);
    let mut scripts = BTreeMap::new();
    for line in reader.lines() {
        let line = line.map_err(|e| IoError::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: ScriptLine = serde_json::from_str(&line).map_err(|e| IoError::json(&path, e))?;
        scripts.insert(s.video_ref, s.script);
    }

    let mut videos = BTreeMap::new();
    for s in train.iter().chain(&val).chain(&test) {
        if videos.contains_key(&s.video_ref) {
            continue;
        }
        let fp = features_path(dir, &s.video_ref);
        let (bundle, manifest) = load_feature_archive(&fp)?;
        let expected = FeatureManifest::for_bundle(&bundle, &info.config);
        if manifest != expected {
            return Err(IoError::manifest(&fp, "geometry differs from info.json"));
        }
        videos.insert(s.video_ref.clone(), bundle);
    }
    let data = Dataset { videos, train, val, test };
    for s in data.train.iter().chain(&data.val).chain(&data.test) {
        s.validate(&info.config, vocab.len())?;
    }
    Ok(StoredDataset { info, world, vocab, answer_set, scripts, data })
}
