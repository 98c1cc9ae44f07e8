//! Two-stage Adam training, accuracy evaluation and the ablation harness.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{AblationVariant, HierarchyConfig, InputDims};
use crate::datamodel::{QASample, RawFeatureBundle};
use crate::error::{config_err, data_err, Error, Result};
use crate::model::{forward, loss_and_grad, ModelParams};
use crate::optim::Adam;
use crate::params::ParamVisit;
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub stage2_enabled: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr_stage1: 1e-4, lr_stage2: 5e-5, batch_size: 32, max_epochs: 25, seed: 0, stage2_enabled: true }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |lr: f64| lr.is_finite() && lr >= 0.0;
        if !ok(self.lr_stage1) || !ok(self.lr_stage2) {
            return Err(config_err!("learning rates must be finite and non-negative"));
        }
        let both_zero = self.lr_stage1 == 0.0 && self.lr_stage2 == 0.0;
        if !(self.lr_stage2 < self.lr_stage1 || both_zero) {
            return Err(config_err!(
                "lr_stage2={} must be below lr_stage1={}",
                self.lr_stage2,
                self.lr_stage1
            ));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// Feature bundles keyed by video reference plus the three QA splits.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub videos: BTreeMap<String, RawFeatureBundle>,
    pub train: Vec<QASample>,
    pub val: Vec<QASample>,
    pub test: Vec<QASample>,
}

impl Dataset {
    pub fn video(&self, video_ref: &str) -> Result<&RawFeatureBundle> {
        self.videos.get(video_ref).ok_or_else(|| data_err!("unknown video {video_ref}"))
    }

    /// Checks every bundle and every sample against the model shape.
    pub fn validate(&self, config: &HierarchyConfig, dims: &InputDims) -> Result<()> {
        for (name, video) in &self.videos {
            video.validate_for(config, dims).map_err(|e| data_err!("video {name}: {e}"))?;
        }
        for s in self.train.iter().chain(&self.val).chain(&self.test) {
            s.validate(config, dims.vocab)?;
            self.video(&s.video_ref)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagAccuracy {
    pub correct: usize,
    pub total: usize,
}

impl TagAccuracy {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

/// Overall accuracy and a per-granularity breakdown. Tags with no
/// questions do not appear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub per_tag: BTreeMap<String, TagAccuracy>,
}

impl AccuracyReport {
    pub fn tag_accuracy(&self, tag: &str) -> Option<f64> {
        self.per_tag.get(tag).map(TagAccuracy::accuracy)
    }
}

/// Scores predictions against answers.
pub fn accuracy_from_predictions(samples: &[QASample], predictions: &[usize]) -> Result<AccuracyReport> {
    if samples.is_empty() {
        return Err(data_err!("cannot evaluate an empty split"));
    }
    if samples.len() != predictions.len() {
        return Err(data_err!("{} predictions for {} samples", predictions.len(), samples.len()));
    }
    let mut correct = 0;
    let mut per_tag: BTreeMap<String, TagAccuracy> = BTreeMap::new();
    for (s, &p) in samples.iter().zip(predictions) {
        let hit = p == s.answer_index;
        correct += hit as usize;
        if let Some(tag) = s.granularity_tag {
            let e = per_tag.entry(tag.name().to_string()).or_insert(TagAccuracy { correct: 0, total: 0 });
            e.total += 1;
            e.correct += hit as usize;
        }
    }
    Ok(AccuracyReport { accuracy: correct as f64 / samples.len() as f64, correct, total: samples.len(), per_tag })
}

pub fn predict_split<T: Real>(
    params: &ModelParams<T>,
    samples: &[QASample],
    data: &Dataset,
    config: &HierarchyConfig,
) -> Result<Vec<usize>> {
    samples.iter().map(|s| Ok(forward(params, config, data.video(&s.video_ref)?, s)?.prediction())).collect()
}

pub fn evaluate_accuracy<T: Real>(
    params: &ModelParams<T>,
    samples: &[QASample],
    data: &Dataset,
    config: &HierarchyConfig,
) -> Result<AccuracyReport> {
    if samples.is_empty() {
        return Err(data_err!("cannot evaluate an empty split"));
    }
    accuracy_from_predictions(samples, &predict_split(params, samples, data, config)?)
}

/// Mini-batch Adam over the training split with a seeded shuffle.
pub struct Trainer<'a, T: Real> {
    pub params: ModelParams<T>,
    pub config: HierarchyConfig,
    data: &'a Dataset,
    adam: Adam<T>,
    rng: ChaCha8Rng,
    batch_size: usize,
    /// Epochs run so far, used in diagnostics.
    pub epoch: usize,
}

impl<'a, T: Real> Trainer<'a, T> {
    /// Validates `data` up front, so that any data error raised while
    /// training can only come from non-finite activations.
    pub fn new(
        params: ModelParams<T>,
        config: HierarchyConfig,
        data: &'a Dataset,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if batch_size == 0 {
            return Err(config_err!("batch_size must be at least 1"));
        }
        data.validate(&config, &params.dims())?;
        let n = params.num_params();
        Ok(Self { params, config, data, adam: Adam::new(n), rng: ChaCha8Rng::seed_from_u64(seed), batch_size, epoch: 0 })
    }

    /// Discards first and second moment estimates.
    pub fn reset_optimizer(&mut self) {
        self.adam = Adam::new(self.params.num_params());
    }

    /// One pass over the training split; returns the mean sample loss.
    pub fn run_epoch(&mut self, lr: f64) -> Result<f64> {
        self.epoch += 1;
        let data = self.data;
        if data.train.is_empty() {
            return Err(data_err!("training split is empty"));
        }
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for batch in order.chunks(self.batch_size) {
            let mut grads = ModelParams::zeros(&self.config, &self.params.dims());
            for &i in batch {
                let s = &data.train[i];
                let epoch = self.epoch;
                let (loss, _) = loss_and_grad(&self.params, &self.config, data.video(&s.video_ref)?, s, &mut grads)
                    .map_err(|e| match e {
                        Error::Data(msg) => Error::Divergence(format!("epoch {epoch}, sample {}: {msg}", s.sample_id)),
                        other => other,
                    })?;
                let loss = loss.as_f64();
                if !loss.is_finite() {
                    return Err(Error::Divergence(format!(
                        "non-finite loss on sample {} in epoch {}",
                        s.sample_id, self.epoch
                    )));
                }
                total += loss;
            }
            let scale = T::lit(1.0 / batch.len() as f64);
            let g: Vec<T> = grads.flatten().into_iter().map(|v| v * scale).collect();
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::Divergence(format!("non-finite gradient in epoch {}", self.epoch)));
            }
            let mut flat = self.params.flatten();
            self.adam.step(lr, &mut flat, &g);
            if !flat.iter().all(|v| v.is_finite()) {
                return Err(Error::Divergence(format!("non-finite parameters in epoch {}", self.epoch)));
            }
            self.params.unflatten(&flat);
        }
        Ok(total / data.train.len() as f64)
    }

    pub fn evaluate(&self, samples: &[QASample]) -> Result<AccuracyReport> {
        evaluate_accuracy(&self.params, samples, self.data, &self.config)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: u8,
    pub loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome<T> {
    pub best_params: ModelParams<T>,
    pub history: Vec<EpochRecord>,
    /// `(stage, epoch)` of the returned parameters; epoch 0 is the init.
    pub best_at: (u8, usize),
    pub best_val_acc: f64,
}

/// Stage 1 trains from `params` and keeps the checkpoint with the best
/// validation accuracy (earliest epoch on ties). Stage 2 restarts Adam from
/// that checkpoint at `lr_stage2` for `max_epochs`, replacing the result
/// only when validation accuracy strictly improves.
pub fn train_two_stage<T: Real>(
    params: ModelParams<T>,
    data: &Dataset,
    config: &HierarchyConfig,
    train: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    train.validate()?;
    config.validate()?;
    if data.val.is_empty() {
        return Err(data_err!("two-stage training needs a validation split"));
    }
    let mut trainer = Trainer::new(params, config.clone(), data, train.batch_size, train.seed)?;
    let mut history = Vec::new();
    let mut best = trainer.params.clone();
    let mut best_val = trainer.evaluate(&data.val)?.accuracy;
    let mut best_at = (1u8, 0usize);

    let stages: &[(u8, f64)] =
        if train.stage2_enabled { &[(1, train.lr_stage1), (2, train.lr_stage2)] } else { &[(1, train.lr_stage1)] };
    for &(stage, lr) in stages {
        if stage == 2 {
            trainer.params = best.clone();
            trainer.reset_optimizer();
        }
        for epoch in 1..=train.max_epochs {
            let loss = trainer.run_epoch(lr)?;
            // Non-finite activations after an update mean the run blew up.
            let val_acc = trainer
                .evaluate(&data.val)
                .map_err(|e| match e {
                    Error::Data(msg) => Error::Divergence(format!("stage {stage}, epoch {epoch}: {msg}")),
                    other => other,
                })?
                .accuracy;
            let record = EpochRecord { epoch, stage, loss, val_acc };
            on_epoch(&record);
            history.push(record);
            if val_acc > best_val {
                best_val = val_acc;
                best = trainer.params.clone();
                best_at = (stage, epoch);
            }
        }
    }
    Ok(TrainOutcome { best_params: best, history, best_at, best_val_acc: best_val })
}

/// One variant's results across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub val_acc: Vec<f64>,
    pub test_acc: Vec<f64>,
    pub median_val_acc: f64,
    pub median_test_acc: Option<f64>,
    /// Median over seeds of per-tag test accuracy (validation if no test split).
    pub median_tag_acc: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: AblationVariant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant.label())
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Progress notifications from [`run_ablation_suite`].
pub trait AblationObserver {
    fn epoch(&mut self, _variant: AblationVariant, _seed: u64, _record: &EpochRecord) {}
    fn finished(&mut self, _variant: AblationVariant, _seed: u64, _val: &AccuracyReport) {}
}

impl AblationObserver for () {}

/// Trains and evaluates each variant once per seed. Every run starts from
/// parameters initialised with that seed.
pub fn run_ablation_suite<T: Real>(
    base: &HierarchyConfig,
    dims: &InputDims,
    data: &Dataset,
    train: &TrainConfig,
    seeds: &[u64],
    variants: &[AblationVariant],
    observer: &mut dyn AblationObserver,
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(config_err!("ablation suite needs at least one seed"));
    }
    let mut rows = Vec::new();
    for &variant in variants {
        let config = variant.apply(base);
        let mut val_acc = Vec::new();
        let mut test_acc = Vec::new();
        let mut tags: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for &seed in seeds {
            let params = ModelParams::<T>::new(&config, dims, seed)?;
            let cfg = TrainConfig { seed, ..train.clone() };
            let outcome =
                train_two_stage(params, data, &config, &cfg, &mut |r| observer.epoch(variant, seed, r))?;
            let val = evaluate_accuracy(&outcome.best_params, &data.val, data, &config)?;
            observer.finished(variant, seed, &val);
            val_acc.push(val.accuracy);
            let tag_source = if data.test.is_empty() {
                val
            } else {
                let test = evaluate_accuracy(&outcome.best_params, &data.test, data, &config)?;
                test_acc.push(test.accuracy);
                test
            };
            for (tag, acc) in &tag_source.per_tag {
                tags.entry(tag.clone()).or_default().push(acc.accuracy());
            }
        }
        rows.push(AblationRow {
            variant: variant.label().to_string(),
            seeds: seeds.to_vec(),
            median_val_acc: median(&val_acc),
            median_test_acc: if test_acc.is_empty() { None } else { Some(median(&test_acc)) },
            median_tag_acc: tags.iter().map(|(k, v)| (k.clone(), median(v))).collect(),
            val_acc,
            test_acc,
        });
    }
    Ok(AblationTable { rows })
}
