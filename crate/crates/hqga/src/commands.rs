//! Command bodies. Each takes a resolved [`RunConfig`] and writes its
//! artifacts under `paths.out`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hqga_core::config::describe;
use hqga_core::model::{forward, ModelParams};
use hqga_core::oracle::{model_gradient_check, GradReport};
use hqga_core::synth::{build_dataset, Vocabulary};
use hqga_core::trace::{record_trace, top_down_path, TraceRecord};
use hqga_core::training::{
    evaluate_accuracy, run_ablation_suite, train_two_stage, AblationObserver, AccuracyReport, Dataset, EpochRecord,
};
use hqga_core::{AblationVariant, HierarchyConfig, InputDims, Matrix, Real};
use serde::Serialize;

use crate::archive::load_embeddings;
use crate::checkpoint::{load_checkpoint, read_snapshot, save_checkpoint, Precision, Snapshot, StoredScalar};
use crate::dataset_io::{read_dataset, write_dataset, write_json, DatasetInfo};
use crate::error::{IoError, Result};
use crate::metrics::{write_ablation, MetricsWriter};
use crate::render::render_trace;
use crate::run_config::RunConfig;
use crate::trace_io::export_traces;

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const METRICS_FILE: &str = "metrics.csv";

/// Training data plus what the model needs to know about it.
pub struct LoadedData {
    pub data: Dataset,
    pub dims: InputDims,
    pub vocab: Vocabulary,
}

/// Reads `paths.data`, or generates the synthetic dataset in memory.
pub fn load_data(cfg: &RunConfig) -> Result<LoadedData> {
    match &cfg.paths.data {
        Some(dir) => {
            let stored = read_dataset(dir)?;
            let video = stored
                .data
                .videos
                .values()
                .next()
                .ok_or_else(|| IoError::manifest(dir, "dataset has no videos"))?;
            let dims = InputDims {
                motion: video.motion.cols(),
                appearance: video.appearance.cols(),
                region: video.region_feats.first().map_or(0, Matrix::cols),
                embed: cfg.embed_dim,
                vocab: stored.vocab.len(),
            };
            Ok(LoadedData { data: stored.data, dims, vocab: stored.vocab })
        }
        None => {
            let ds = build_dataset(&cfg.world, &cfg.hierarchy, cfg.sizes, cfg.seed)?;
            Ok(LoadedData { dims: ds.input_dims(cfg.embed_dim), data: ds.to_dataset(), vocab: ds.vocab })
        }
    }
}

/// Copies precomputed embeddings into the question encoder's table.
fn install_embeddings<T: Real>(params: &mut ModelParams<T>, path: &Path, vocab: &Vocabulary) -> Result<()> {
    let e = load_embeddings(path)?;
    let table = &mut params.question.embedding;
    if e.embeddings.cols() != table.cols() {
        return Err(IoError::Config(format!(
            "{} has width {}, embed_dim is {}",
            path.display(),
            e.embeddings.cols(),
            table.cols()
        )));
    }
    for (i, token) in vocab.tokens.iter().enumerate() {
        let row = *e.vocab.get(token).ok_or_else(|| IoError::manifest(path, format!("no embedding for {token:?}")))?;
        for (dst, &src) in table.row_mut(i).iter_mut().zip(e.embeddings.row(row as usize)) {
            *dst = T::lit(src as f64);
        }
    }
    Ok(())
}

pub fn generate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let start = Instant::now();
    let ds = build_dataset(&cfg.world, &cfg.hierarchy, cfg.sizes, cfg.seed)?;
    let info = DatasetInfo { config: cfg.hierarchy.clone(), sizes: cfg.sizes, seed: cfg.seed };
    write_dataset(&ds, &info, out)?;
    println!(
        "wrote {} episodes ({} / {} / {} questions) to {} in {:.2?}",
        ds.episodes.len(),
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        out.display(),
        start.elapsed()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub best_val_acc: f64,
    pub best_stage: u8,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

pub fn train<T: StoredScalar>(cfg: &RunConfig) -> Result<TrainSummary> {
    let loaded = load_data(cfg)?;
    let mut params = ModelParams::<T>::new(&cfg.hierarchy, &loaded.dims, cfg.seed)?;
    if let Some(path) = &cfg.paths.embeddings {
        install_embeddings(&mut params, path, &loaded.vocab)?;
    }
    let out = &cfg.paths.out;
    let mut metrics = MetricsWriter::create(&out.join(METRICS_FILE))?;
    let mut write_error = None;
    let outcome = train_two_stage(params, &loaded.data, &cfg.hierarchy, &cfg.train, &mut |r: &EpochRecord| {
        eprintln!("stage {} epoch {:>3}  loss {:.6}  val_acc {:.4}", r.stage, r.epoch, r.loss, r.val_acc);
        if write_error.is_none() {
            write_error = metrics.write(r).err();
        }
    })?;
    if let Some(e) = write_error {
        return Err(e);
    }
    save_checkpoint(&outcome.best_params, &cfg.hierarchy, Some(outcome.best_val_acc), &out.join(CHECKPOINT_FILE))?;
    let summary = TrainSummary {
        best_val_acc: outcome.best_val_acc,
        best_stage: outcome.best_at.0,
        best_epoch: outcome.best_at.1,
        epochs_run: outcome.history.len(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    println!(
        "best val accuracy {:.4} at stage {} epoch {}; checkpoint {}",
        summary.best_val_acc,
        summary.best_stage,
        summary.best_epoch,
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(summary)
}

pub fn checkpoint_path(cfg: &RunConfig, flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.paths.checkpoint.clone())
        .unwrap_or_else(|| cfg.paths.out.join(CHECKPOINT_FILE))
}

fn split<'a>(data: &'a Dataset, name: &str) -> Result<&'a [hqga_core::datamodel::QASample]> {
    match name {
        "train" => Ok(&data.train),
        "val" => Ok(&data.val),
        "test" => Ok(&data.test),
        other => Err(IoError::Config(format!("unknown split {other:?}"))),
    }
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub split: String,
    pub report: AccuracyReport,
    /// Validation accuracy stored in the checkpoint, if any.
    pub recorded_val_acc: Option<f64>,
}

fn evaluate_with<T: StoredScalar>(cfg: &RunConfig, path: &Path, split_name: &str) -> Result<EvalReport> {
    let (params, snapshot) = load_checkpoint::<T>(path)?;
    let loaded = load_data(cfg)?;
    loaded.data.validate(&snapshot.config, &params.dims())?;
    let report = evaluate_accuracy(&params, split(&loaded.data, split_name)?, &loaded.data, &snapshot.config)?;
    Ok(EvalReport { split: split_name.to_string(), report, recorded_val_acc: snapshot.val_acc })
}

pub fn eval(cfg: &RunConfig, path: &Path, split_name: &str) -> Result<EvalReport> {
    let report = match read_snapshot(path)?.precision {
        Precision::F32 => evaluate_with::<f32>(cfg, path, split_name)?,
        Precision::F64 => evaluate_with::<f64>(cfg, path, split_name)?,
    };
    write_json(&cfg.paths.out.join(format!("eval_{split_name}.json")), &report)?;
    println!("{split_name} accuracy {:.4} ({}/{})", report.report.accuracy, report.report.correct, report.report.total);
    for (tag, acc) in &report.report.per_tag {
        println!("  {tag:<9} {:.4} ({}/{})", acc.accuracy(), acc.correct, acc.total);
    }
    if let (Some(recorded), "val") = (report.recorded_val_acc, split_name) {
        let verdict = if recorded == report.report.accuracy { "matches" } else { "DIFFERS FROM" };
        println!("{verdict} the recorded validation accuracy {recorded:.4}");
    }
    Ok(report)
}

struct Progress;

impl AblationObserver for Progress {
    fn epoch(&mut self, variant: AblationVariant, seed: u64, r: &EpochRecord) {
        eprintln!("[{variant} seed {seed}] stage {} epoch {:>3} loss {:.5} val {:.4}", r.stage, r.epoch, r.loss, r.val_acc);
    }
    fn finished(&mut self, variant: AblationVariant, seed: u64, val: &AccuracyReport) {
        eprintln!("[{variant} seed {seed}] best val {:.4}", val.accuracy);
    }
}

pub fn ablate<T: StoredScalar>(cfg: &RunConfig, seeds: &[u64]) -> Result<hqga_core::training::AblationTable> {
    let loaded = load_data(cfg)?;
    let variants = cfg.ablation.variants()?;
    let table = run_ablation_suite::<T>(
        &cfg.hierarchy,
        &loaded.dims,
        &loaded.data,
        &cfg.train,
        seeds,
        &variants,
        &mut Progress,
    )?;
    write_ablation(&table, &cfg.paths.out.join("ablation.json"))?;
    println!("{:<26} {:>8} {:>8}", "variant", "val", "test");
    for row in &table.rows {
        let test = row.median_test_acc.map_or("-".to_string(), |t| format!("{t:.4}"));
        println!("{:<26} {:>8.4} {:>8}", row.variant, row.median_val_acc, test);
    }
    Ok(table)
}

/// Forward pass with tracing; for multi-choice the recorded tensors are
/// those of the predicted candidate's query.
pub fn trace_sample<T: Real>(
    params: &ModelParams<T>,
    config: &HierarchyConfig,
    data: &Dataset,
    sample: &hqga_core::datamodel::QASample,
) -> Result<TraceRecord> {
    let fwd = forward(params, config, data.video(&sample.video_ref)?, sample)?;
    let prediction = fwd.prediction();
    let (which, candidate) = if config.is_multi_choice() { (prediction, Some(prediction)) } else { (0, None) };
    Ok(record_trace(&sample.sample_id, &fwd.traces[which], prediction, Some(sample.answer_index), candidate))
}

fn trace_with<T: StoredScalar>(cfg: &RunConfig, path: &Path, ids: &[String]) -> Result<(Vec<TraceRecord>, Snapshot)> {
    let (params, snapshot) = load_checkpoint::<T>(path)?;
    let loaded = load_data(cfg)?;
    let by_id: BTreeMap<&str, _> = loaded
        .data
        .train
        .iter()
        .chain(&loaded.data.val)
        .chain(&loaded.data.test)
        .map(|s| (s.sample_id.as_str(), s))
        .collect();
    let chosen: Vec<_> = if ids.is_empty() {
        loaded.data.val.iter().take(4).collect()
    } else {
        ids.iter()
            .map(|id| by_id.get(id.as_str()).copied().ok_or_else(|| IoError::Config(format!("no sample {id:?}"))))
            .collect::<Result<_>>()?
    };
    let records = chosen
        .into_iter()
        .map(|s| trace_sample(&params, &snapshot.config, &loaded.data, s))
        .collect::<Result<Vec<_>>>()?;
    Ok((records, snapshot))
}

pub fn trace(cfg: &RunConfig, path: &Path, ids: &[String]) -> Result<Vec<TraceRecord>> {
    let (records, snapshot) = match read_snapshot(path)?.precision {
        Precision::F32 => trace_with::<f32>(cfg, path, ids)?,
        Precision::F64 => trace_with::<f64>(cfg, path, ids)?,
    };
    let out = &cfg.paths.out;
    export_traces(&records, &out.join("traces.jsonl"))?;
    let mut images = 0;
    for r in &records {
        images += render_trace(r, &out.join("png"))?.len();
        match top_down_path(r, &snapshot.config) {
            Ok((c, f, o)) => println!("{}: prediction {} path clip {c} frame {f} object {o}", r.sample_id, r.prediction),
            Err(e) => println!("{}: prediction {} ({e})", r.sample_id, r.prediction),
        }
    }
    println!("{} traces, {images} images under {}", records.len(), out.display());
    Ok(records)
}

/// Finite-difference check of the whole model in 64-bit on the first
/// `gradcheck.samples` training samples; groups keep their worst value.
pub fn gradcheck(cfg: &RunConfig) -> Result<(GradReport, bool)> {
    let loaded = load_data(cfg)?;
    let params = ModelParams::<f64>::new(&cfg.hierarchy, &loaded.dims, cfg.seed)?;
    let mut merged = GradReport::default();
    for s in loaded.data.train.iter().take(cfg.gradcheck.samples.max(1)) {
        let r = model_gradient_check(
            &params,
            &cfg.hierarchy,
            &loaded.dims,
            loaded.data.video(&s.video_ref)?,
            s,
            cfg.gradcheck.step,
        )?;
        for (name, g) in r.groups {
            let m = merged.groups.entry(name).or_default();
            m.max_rel_err = m.max_rel_err.max(g.max_rel_err);
            m.skipped_kinks += g.skipped_kinks;
            m.checked += g.checked;
            m.non_finite += g.non_finite;
        }
    }
    write_json(&cfg.paths.out.join("gradcheck.json"), &merged)?;
    let total = merged.total_params().max(1);
    let ok = merged.max_rel_err() <= cfg.gradcheck.tolerance
        && merged.non_finite() == 0
        && (merged.skipped_kinks() as f64) < 0.01 * total as f64;
    println!(
        "{}: max relative error {:.3e} (tolerance {:.0e}), {} kink skips of {total} probes",
        if ok { "PASS" } else { "FAIL" },
        merged.max_rel_err(),
        cfg.gradcheck.tolerance,
        merged.skipped_kinks()
    );
    Ok((merged, ok))
}

pub fn echo(cfg: &RunConfig) {
    println!("resolved config ({}):\n{}", describe(&cfg.hierarchy), cfg.to_json());
}
