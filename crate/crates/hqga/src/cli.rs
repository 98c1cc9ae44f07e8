//! Argument parsing and dispatch.
//!
//! Exit codes: 0 success, 1 failed gradient check, 2 configuration error
//! (including bad arguments), 3 data or file error, 4 training divergence.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Precision;
use crate::commands;
use crate::error::Result;
use crate::run_config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "hqga", version, about = "Hierarchical query-conditioned graph attention for video QA")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Dotted override, e.g. `--set hierarchy.hidden=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory; overrides `paths.out`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset into `--out`.
    Generate {
        #[command(flatten)]
        common: Common,
        /// World grammar JSON replacing the `world` section.
        #[arg(long)]
        world: Option<PathBuf>,
    },
    /// Two-stage training; writes metrics.csv, checkpoint and summary.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Accuracy of a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Train and evaluate the ablation rows over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds; overrides `ablation.seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Export attention traces and render them as PNG files.
    Trace {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated sample ids; default is the first validation samples.
        #[arg(long, value_delimiter = ',')]
        samples: Vec<String>,
    },
    /// Finite-difference gradient check in 64-bit precision.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Self::Generate { common, .. }
            | Self::Train { common }
            | Self::Eval { common, .. }
            | Self::Ablate { common, .. }
            | Self::Trace { common, .. }
            | Self::Gradcheck { common } => common,
        }
    }
}

fn resolve(common: &Common, extra: Vec<String>) -> Result<RunConfig> {
    let mut overrides = extra;
    overrides.extend(common.overrides.iter().cloned());
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(out) = &common.out {
        let out = serde_json::to_string(out).map_err(|e| crate::error::IoError::Config(e.to_string()))?;
        overrides.push(format!("paths.out={out}"));
    }
    RunConfig::resolve(common.config.as_deref(), &overrides)
}

/// Runs one command and returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    let mut extra = Vec::new();
    if let Command::Generate { world: Some(path), .. } = &cli.command {
        let text = std::fs::read_to_string(path).map_err(|e| crate::error::IoError::io(path, e))?;
        extra.push(format!("world={}", text.trim()));
    }
    let cfg = resolve(cli.command.common(), extra)?;
    commands::echo(&cfg);
    std::fs::create_dir_all(&cfg.paths.out).map_err(|e| crate::error::IoError::io(&cfg.paths.out, e))?;
    crate::dataset_io::write_json(&cfg.paths.out.join("config.json"), &cfg)?;
    match &cli.command {
        Command::Generate { .. } => commands::generate(&cfg, &cfg.paths.out)?,
        Command::Train { .. } => {
            match cfg.precision {
                Precision::F32 => commands::train::<f32>(&cfg)?,
                Precision::F64 => commands::train::<f64>(&cfg)?,
            };
        }
        Command::Eval { checkpoint, split, .. } => {
            commands::eval(&cfg, &commands::checkpoint_path(&cfg, checkpoint.as_deref()), split)?;
        }
        Command::Ablate { seeds, .. } => {
            let seeds = seeds.clone().unwrap_or_else(|| cfg.ablation.seeds.clone());
            match cfg.precision {
                Precision::F32 => commands::ablate::<f32>(&cfg, &seeds)?,
                Precision::F64 => commands::ablate::<f64>(&cfg, &seeds)?,
            };
        }
        Command::Trace { checkpoint, samples, .. } => {
            commands::trace(&cfg, &commands::checkpoint_path(&cfg, checkpoint.as_deref()), samples)?;
        }
        Command::Gradcheck { .. } => {
            let (_, ok) = commands::gradcheck(&cfg)?;
            if !ok {
                return Ok(1);
            }
        }
    }
    Ok(0)
}

/// Parses `args`, runs, and reports errors on stderr.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
