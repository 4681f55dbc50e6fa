//! Command-line surface.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use fairmoe_core::data::{self, generate, split, Dataset};
use fairmoe_core::moe::RouteMode;

use crate::ablate::{ablate, write_table};
use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::evaluate::{evaluate, write_routing_csv};
use crate::route_report::{router_depth_report, write_report, ScoreKind};
use crate::train::{train, write_log};

pub const TRAIN_FILE: &str = "train.fmds";
pub const TEST_FILE: &str = "test.fmds";
pub const CHECKPOINT_FILE: &str = "checkpoint.fmck";
pub const LOG_FILE: &str = "train_log.csv";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Parser)]
#[command(name = "fairmoe", version, about = "Group-specialized mixture-of-experts CNN experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InferMode {
    Argmax,
    Sample,
}

impl From<InferMode> for RouteMode {
    fn from(m: InferMode) -> Self {
        match m {
            InferMode::Argmax => RouteMode::Argmax,
            InferMode::Sample => RouteMode::Sample,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset and write its train/test split.
    SynthData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint and per-epoch log.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory holding train.fmds; defaults to `train.data_dir`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to `train.out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split against a baseline checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        /// Defaults to the checkpoint's inference routing.
        #[arg(long, value_enum)]
        mode: Option<InferMode>,
        /// Directory for report.json, predictions.csv and routing.csv;
        /// without it the report is printed.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train with 0..=L trailing MoE layers over several seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
    /// Own-expert router score per MoE layer and group.
    RouteReport {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Average the group-balanced selection probability instead of the score.
        #[arg(long)]
        probability: bool,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn load_split(dir: &Path, file: &str) -> Result<Dataset> {
    Ok(data::load(&dir.join(file))?)
}

fn resolve(flag: Option<PathBuf>, fallback: &Option<String>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::Config(format!("no {what} given on the command line or in the config")))
}

pub fn synth_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let (ds, _) = generate(&cfg.data.synth)?;
    let (tr, te) = split(&ds, cfg.data.train_fraction, cfg.data.split_seed)?;
    fs::create_dir_all(out)?;
    data::save(&tr, &out.join(TRAIN_FILE))?;
    data::save(&te, &out.join(TEST_FILE))?;
    fs::write(out.join(CONFIG_FILE), cfg.to_json())?;
    Ok(())
}

pub fn train_command(cfg: &ExperimentConfig, data_dir: &Path, out: &Path) -> Result<Checkpoint> {
    let tr = load_split(data_dir, TRAIN_FILE)?;
    let outcome = train(cfg, &tr)?;
    fs::create_dir_all(out)?;
    outcome.checkpoint.save(&out.join(CHECKPOINT_FILE))?;
    write_log(&outcome.log, fs::File::create(out.join(LOG_FILE))?)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_json())?;
    Ok(outcome.checkpoint)
}

/// Report JSON of `checkpoint` on the test split, with FATE against `baseline`.
pub fn eval_command(
    checkpoint: &Path,
    data_dir: &Path,
    baseline: &Path,
    mode: Option<RouteMode>,
    out: Option<&Path>,
) -> Result<String> {
    let te = load_split(data_dir, TEST_FILE)?;
    let run = |path: &Path, baseline| {
        let ck = Checkpoint::load(path)?;
        let mode = mode.unwrap_or(ck.config.train.infer_routing);
        evaluate(&ck.model()?, &ck.stats, &te, mode, ck.config.train.seed, baseline)
    };
    let base = run(baseline, None)?.report.summary(&baseline.display().to_string());
    let ev = run(checkpoint, Some(base))?;
    let json = serde_json::to_string_pretty(&ev.report)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), &json)?;
        ev.log.write_csv(fs::File::create(dir.join("predictions.csv"))?)?;
        write_routing_csv(&ev.routing, fs::File::create(dir.join("routing.csv"))?)?;
    }
    Ok(json)
}

pub fn ablate_command(cfg: &ExperimentConfig, data_dir: &Path, out: &Path, seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let tr = load_split(data_dir, TRAIN_FILE)?;
    let te = load_split(data_dir, TEST_FILE)?;
    let rows = ablate(cfg, &tr, &te, seeds)?;
    fs::create_dir_all(out)?;
    write_table(&rows, fs::File::create(out.join("ablation.csv"))?)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_json())?;
    Ok(())
}

pub fn route_report_command(checkpoint: &Path, data_dir: &Path, out: &Path, kind: ScoreKind) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let tr = load_split(data_dir, TRAIN_FILE)?;
    let te = load_split(data_dir, TEST_FILE)?;
    let tc = &ck.config.train;
    let rows = router_depth_report(&ck.model()?, &ck.stats, &tr, &te, kind, tc.infer_routing, tc.seed)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_report(&rows, fs::File::create(out)?)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { config, out } => synth_data(&load_config(config.as_deref())?, &out),
        Command::Train { config, data, out } => {
            let cfg = load_config(config.as_deref())?;
            let data = resolve(data, &cfg.train.data_dir, "data directory")?;
            let out = resolve(out, &cfg.train.out_dir, "output directory")?;
            train_command(&cfg, &data, &out).map(|_| ())
        }
        Command::Eval {
            checkpoint,
            data,
            baseline,
            mode,
            out,
        } => {
            let json = eval_command(&checkpoint, &data, &baseline, mode.map(Into::into), out.as_deref())?;
            if out.is_none() {
                let mut stdout = std::io::stdout().lock();
                writeln!(stdout, "{json}")?;
            }
            Ok(())
        }
        Command::Ablate {
            config,
            data,
            out,
            seeds,
        } => ablate_command(&load_config(config.as_deref())?, &data, &out, &seeds),
        Command::RouteReport {
            checkpoint,
            data,
            out,
            probability,
        } => {
            let kind = if probability { ScoreKind::Probability } else { ScoreKind::Score };
            route_report_command(&checkpoint, &data, &out, kind)
        }
    }
}
