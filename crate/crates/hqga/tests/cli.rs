use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use hqga::checkpoint::read_snapshot;
use hqga::dataset_io::read_dataset;
use hqga::metrics::read_metrics;
use hqga::trace_io::import_traces;

const TINY: [&str; 8] = [
    "hierarchy.hidden=8",
    "hierarchy.clips=2",
    "hierarchy.clip_len=4",
    "hierarchy.gamma=0.5",
    "hierarchy.regions=3",
    "hierarchy.max_tokens=8",
    "embed_dim=6",
    "sizes={\"train\":6,\"val\":3,\"test\":2}",
];

fn hqga(args: &[&str], sets: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hqga"));
    cmd.args(args);
    for s in sets {
        cmd.arg("--set").arg(s);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    assert_eq!(out.status.code(), Some(0), "stdout:\n{stdout}\nstderr:\n{}", String::from_utf8_lossy(&out.stderr));
    stdout
}

fn tiny_train(out: &Path, extra: &[&str]) -> Output {
    let mut sets: Vec<&str> = TINY.to_vec();
    sets.extend(["train.max_epochs=2", "train.lr_stage1=0.003", "train.lr_stage2=0.001"]);
    sets.extend(extra);
    hqga(&["train", "--out", out.to_str().unwrap()], &sets)
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "config.json") {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_is_deterministic_and_readable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&hqga(&["generate", "--seed", "4", "--out", d.to_str().unwrap()], &TINY));
    }
    assert_eq!(files(&a), files(&b));
    let stored = read_dataset(&a).unwrap();
    assert_eq!(stored.data.train.len(), 24);
    assert_eq!(stored.data.val.len(), 12);
    assert_eq!(stored.info.seed, 4);
}

#[test]
fn hundred_episodes_generate_within_a_minute() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    ok(&hqga(&["generate", "--out", dir.path().to_str().unwrap()], &["sizes={\"train\":100,\"val\":0,\"test\":0}"]));
    let took = start.elapsed();
    assert!(took < Duration::from_secs(60), "took {took:?}");
    assert_eq!(read_dataset(dir.path()).unwrap().data.train.len(), 400);
}

#[test]
fn generate_accepts_a_world_file() {
    let dir = tempfile::tempdir().unwrap();
    let world = dir.path().join("world.json");
    let spec = hqga_core::synth::WorldSpec { noise_sigma: 0.0, ..Default::default() };
    fs::write(&world, serde_json::to_string(&spec).unwrap()).unwrap();
    let out = dir.path().join("d");
    ok(&hqga(&["generate", "--world", world.to_str().unwrap(), "--out", out.to_str().unwrap()], &TINY));
    assert_eq!(read_dataset(&out).unwrap().world.noise_sigma, 0.0);
}

#[test]
fn every_command_echoes_the_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&hqga(&["generate", "--seed", "11", "--out", dir.path().to_str().unwrap()], &TINY));
    assert!(stdout.starts_with("resolved config"), "{stdout}");
    assert!(stdout.contains("\"seed\": 11"));
    assert!(stdout.contains("\"hidden\": 8"));
    let saved: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(saved["seed"], 11);
}

#[test]
fn exit_codes_follow_the_failure_kind() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(hqga(&["train", "--out", out], &["hierarchy.hidden=7"]).status.code(), Some(2));
    assert_eq!(hqga(&["train", "--out", out], &["hierarchy.nope=1"]).status.code(), Some(2));
    assert_eq!(hqga(&["frobnicate"], &[]).status.code(), Some(2));
    assert_eq!(hqga(&["train", "--out", out], &["paths.data=\"/nonexistent/data\""]).status.code(), Some(3));
    let diverged = tiny_train(dir.path(), &["train.lr_stage1=1e30", "train.lr_stage2=1e29"]);
    assert_eq!(diverged.status.code(), Some(4), "{}", String::from_utf8_lossy(&diverged.stderr));
}

#[test]
fn eval_reproduces_the_recorded_validation_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    ok(&tiny_train(dir.path(), &[]));
    let ckpt = dir.path().join("checkpoint.safetensors");
    let recorded = read_snapshot(&ckpt).unwrap().val_acc.unwrap();
    let best = read_metrics(&dir.path().join("metrics.csv")).unwrap().iter().map(|r| r.val_acc).fold(0.0, f64::max);
    assert!(recorded >= best);

    let stdout = ok(&hqga(&["eval", "--out", dir.path().to_str().unwrap()], &TINY));
    assert!(stdout.contains("matches the recorded validation accuracy"), "{stdout}");
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("eval_val.json")).unwrap()).unwrap();
    assert_eq!(report["report"]["accuracy"].as_f64().unwrap(), recorded);
}

#[test]
fn trace_exports_valid_jsonl_and_named_images() {
    let dir = tempfile::tempdir().unwrap();
    ok(&tiny_train(dir.path(), &[]));
    let stdout = ok(&hqga(
        &["trace", "--out", dir.path().to_str().unwrap(), "--samples", "ep000006_object,ep000007_event"],
        &TINY,
    ));
    assert!(stdout.contains("path clip"), "{stdout}");
    let records = import_traces(&dir.path().join("traces.jsonl")).unwrap();
    assert_eq!(records.len(), 2);
    let text = fs::read_to_string(dir.path().join("traces.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 2);
    let png = dir.path().join("png");
    for name in ["ep000006_object_O_0_A.png", "ep000006_object_F_1_beta.png", "ep000007_event_C_0_alpha.png"] {
        assert!(png.join(name).exists(), "{name} missing");
    }
    assert!(hqga(&["trace", "--out", dir.path().to_str().unwrap(), "--samples", "nope"], &TINY).status.code() == Some(2));
}

#[test]
fn gradcheck_passes_on_a_tiny_model_and_writes_its_report() {
    let dir = tempfile::tempdir().unwrap();
    let sets = [
        "hierarchy.hidden=4",
        "hierarchy.clips=2",
        "hierarchy.clip_len=4",
        "hierarchy.gamma=0.25",
        "hierarchy.regions=2",
        "hierarchy.max_tokens=3",
        "embed_dim=3",
        "world.region_dim=3",
        "world.motion_dim=3",
        "sizes={\"train\":1,\"val\":0,\"test\":0}",
    ];
    let stdout = ok(&hqga(&["gradcheck", "--out", dir.path().to_str().unwrap()], &sets));
    assert!(stdout.contains("PASS"), "{stdout}");
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    let group = &report["hierarchy.qga_o.w_av"];
    assert!(group["max_rel_err"].as_f64().unwrap() <= 1e-4);
    assert!(group["skipped_kinks"].is_u64());
}

#[test]
fn ablate_writes_one_row_per_requested_variant() {
    let dir = tempfile::tempdir().unwrap();
    let mut sets = TINY.to_vec();
    sets.extend(["train.max_epochs=1", "ablation.variants=[\"HQGA\",\"w/o G_O & G_F\"]"]);
    ok(&hqga(&["ablate", "--seeds", "0", "--out", dir.path().to_str().unwrap()], &sets));
    let table = hqga::metrics::read_ablation(&dir.path().join("ablation.json")).unwrap();
    assert_eq!(table.rows.len(), 2);
    assert_eq!(table.rows[1].variant, "w/o G_O & G_F");
    assert_eq!(table.rows[0].seeds, vec![0]);
}
