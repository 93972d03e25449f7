//! The `cdcr` command-line front end.
//!
//! Subcommands: `generate`, `train`, `ablate`, `sweep`, `eval`, `diagnose`.
//! Exit codes: 0 on success, 1 when an input is rejected, 2 when training
//! aborts. Outputs are written only after all work has succeeded, each
//! through an atomic rename.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::augment::AugmentPolicy;
use crate::classifier::Checkpoint;
use crate::curriculum::diagnostics;
use crate::datagen::{Dataset, DatasetSpec};
use crate::io::{self, write_atomic};
use crate::losses::NegativeMode;
use crate::metrics::{evaluate, MetricsReport};
use crate::numeric::LabelMatrix;
use crate::trainer::{self, predict, Method, TrainConfig, TrainHistory, TrainOutcome};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "cdcr", version, about = "Curriculum disambiguation for partial multi-label learning")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for outputs (overrides `out_dir` in the config).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Seed override.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Leave the timestamp out of run manifests.
    #[arg(long, global = true)]
    pub no_timestamp: bool,
    /// Only report errors.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic partial-label dataset from a spec file.
    Generate {
        /// Output dataset file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one method and write history, summary, checkpoint and weights.
    Train,
    /// Train BCE, CD, CDCR and CDCR_DIFF with one seed and compare them.
    Ablate,
    /// Train once per alpha value.
    Sweep {
        /// Comma-separated alphas (overrides `alphas` in the config).
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
    },
    /// Evaluate a checkpoint on a dataset's test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Use the live parameters instead of the EMA shadow.
        #[arg(long)]
        raw: bool,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Replay stored weight snapshots against a dataset's true labels.
    Diagnose {
        #[arg(long)]
        history: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
}

/// Flat experiment configuration. Only `dataset` is required; relative
/// paths are resolved against the config file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub method: Method,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub alpha: f64,
    pub difficulty_enabled: bool,
    pub negative_mode: NegativeMode,
    pub gaussian_std: f64,
    pub dropout_rate: f64,
    pub scale_jitter: f64,
    pub ema_decay: f64,
    pub ema_warmup: bool,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub warmup_fraction: f64,
    pub start_div: f64,
    pub final_div: f64,
    pub eval_threshold: f64,
    pub alphas: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        ExperimentConfig {
            dataset: None,
            out_dir: None,
            method: t.method,
            epochs: t.epochs,
            warmup_epochs: t.warmup_epochs,
            batch_size: t.batch_size,
            max_lr: t.max_lr,
            alpha: t.alpha,
            difficulty_enabled: t.difficulty_enabled,
            negative_mode: t.negative_mode,
            gaussian_std: t.augment.gaussian_std,
            dropout_rate: t.augment.dropout_rate,
            scale_jitter: t.augment.scale_jitter,
            ema_decay: t.ema_decay,
            ema_warmup: t.ema_warmup,
            seed: t.seed,
            hidden: t.hidden,
            warmup_fraction: t.warmup_fraction,
            start_div: t.start_div,
            final_div: t.final_div,
            eval_threshold: t.eval_threshold,
            alphas: vec![0.6, 0.7, 0.8, 0.9],
        }
    }
}

impl ExperimentConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            method: self.method,
            epochs: self.epochs,
            warmup_epochs: self.warmup_epochs,
            batch_size: self.batch_size,
            max_lr: self.max_lr,
            alpha: self.alpha,
            difficulty_enabled: self.difficulty_enabled,
            negative_mode: self.negative_mode,
            augment: AugmentPolicy {
                gaussian_std: self.gaussian_std,
                dropout_rate: self.dropout_rate,
                scale_jitter: self.scale_jitter,
            },
            ema_decay: self.ema_decay,
            ema_warmup: self.ema_warmup,
            seed: self.seed,
            hidden: self.hidden.clone(),
            warmup_fraction: self.warmup_fraction,
            start_div: self.start_div,
            final_div: self.final_div,
            eval_threshold: self.eval_threshold,
        }
    }
}

fn require_config(global: &GlobalArgs) -> Result<&Path> {
    global
        .config
        .as_deref()
        .ok_or_else(|| Error::invalid("--config", "this command needs a configuration file"))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new("")).join(p)
    }
}

/// Everything a training-type command needs, validated up front.
struct Experiment {
    config: ExperimentConfig,
    train: TrainConfig,
    data: Dataset,
    out_dir: PathBuf,
}

fn load_experiment(global: &GlobalArgs) -> Result<Experiment> {
    let path = require_config(global)?;
    let mut config: ExperimentConfig = io::read_json(path)?;
    if let Some(seed) = global.seed {
        config.seed = seed;
    }
    let dataset = config
        .dataset
        .as_deref()
        .map(|d| resolve(path, d))
        .ok_or_else(|| Error::invalid("dataset", "the config must name a dataset file"))?;
    let train = config.train_config();
    train.validate()?;
    let data = Dataset::load(&dataset)?;
    let out_dir = match (&global.out_dir, &config.out_dir) {
        (Some(d), _) => d.clone(),
        (None, Some(d)) => resolve(path, d),
        (None, None) => PathBuf::from("out"),
    };
    Ok(Experiment {
        config,
        train,
        data,
        out_dir,
    })
}

fn timestamp() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config: &'a ExperimentConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    timestamp: Option<u64>,
}

fn write_manifest(global: &GlobalArgs, dir: &Path, command: &str, config: &ExperimentConfig) -> Result<()> {
    let manifest = RunManifest {
        command,
        config,
        timestamp: (!global.no_timestamp).then(timestamp),
    };
    io::write_json(&dir.join("run.json"), &manifest)
}

#[derive(Serialize, Deserialize)]
struct OmegaSnapshot {
    n: usize,
    #[serde(rename = "K")]
    k: usize,
    epoch: usize,
    indices: Vec<u32>,
}

fn say(global: &GlobalArgs, msg: impl AsRef<str>) {
    if !global.quiet {
        eprintln!("{}", msg.as_ref());
    }
}

fn cmd_generate(global: &GlobalArgs, out: &Path) -> Result<()> {
    let path = require_config(global)?;
    let mut value: serde_json::Value = io::read_json(path)?;
    let obj = value.as_object_mut().ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        message: "expected a JSON object".into(),
    })?;
    let q = match obj.remove("q") {
        None => 0.0,
        Some(v) => v
            .as_f64()
            .ok_or_else(|| Error::invalid("q", format!("expected a number, got {v}")))?,
    };
    let mut spec: DatasetSpec = serde_json::from_value(value).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if let Some(seed) = global.seed {
        spec.seed = seed;
    }
    let dataset = Dataset::synthesize(&spec, q)?;
    dataset.save(out)?;
    say(
        global,
        format!(
            "wrote {} ({} train / {} test, d={}, K={}, q={q})",
            out.display(),
            dataset.train.len(),
            dataset.test.len(),
            dataset.n_features(),
            dataset.n_classes()
        ),
    );
    Ok(())
}

fn write_run(dir: &Path, outcome: &TrainOutcome, data: &Dataset) -> Result<()> {
    write_atomic(&dir.join("history.jsonl"), outcome.history.to_jsonl().as_bytes())?;
    write_atomic(&dir.join("summary.csv"), outcome.history.summary_csv().as_bytes())?;
    outcome.checkpoint().save(&dir.join("checkpoint.json"))?;
    let snapshot = OmegaSnapshot {
        n: data.train.len(),
        k: data.n_classes(),
        epoch: outcome.final_record().epoch,
        indices: outcome.weights.ones_indices(),
    };
    io::write_json(&dir.join("omega.json"), &snapshot)
}

fn cmd_train(global: &GlobalArgs) -> Result<()> {
    let exp = load_experiment(global)?;
    let outcome = trainer::train(exp.train.clone(), &exp.data)?;
    write_run(&exp.out_dir, &outcome, &exp.data)?;
    write_manifest(global, &exp.out_dir, "train", &exp.config)?;
    let last = outcome.final_record();
    say(
        global,
        format!(
            "{} finished {} epochs: mAP {:.4}, CF1 {:.4}, OF1 {:.4}, disambiguation precision {:.4}",
            exp.train.method,
            outcome.history.records.len(),
            last.test.map,
            last.test.cf1,
            last.test.of1,
            last.precision
        ),
    );
    Ok(())
}

fn cmd_ablate(global: &GlobalArgs) -> Result<()> {
    let exp = load_experiment(global)?;
    let runs = trainer::ablate(&exp.train, &exp.data)?;
    let mut summary = format!("{}\n", TrainHistory::SUMMARY_HEADER);
    for (method, outcome) in &runs {
        write_atomic(
            &exp.out_dir.join(format!("history_{method}.jsonl")),
            outcome.history.to_jsonl().as_bytes(),
        )?;
        for row in outcome.history.summary_rows() {
            summary.push_str(&row);
            summary.push('\n');
        }
    }
    write_atomic(&exp.out_dir.join("summary.csv"), summary.as_bytes())?;
    let table = trainer::ablation_csv(&runs, &exp.data);
    write_atomic(&exp.out_dir.join("ablation.csv"), table.as_bytes())?;
    write_manifest(global, &exp.out_dir, "ablate", &exp.config)?;
    if !global.quiet {
        print!("{table}");
    }
    Ok(())
}

fn cmd_sweep(global: &GlobalArgs, alphas: Option<&[f64]>) -> Result<()> {
    let exp = load_experiment(global)?;
    let alphas = alphas.unwrap_or(&exp.config.alphas);
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::invalid("alphas", format!("{a} lies outside [0, 1]")));
    }
    let rows = trainer::alpha_sweep(&exp.train, &exp.data, alphas)?;
    let table = trainer::sweep_csv(&rows);
    write_atomic(&exp.out_dir.join("sweep.csv"), table.as_bytes())?;
    write_manifest(global, &exp.out_dir, "sweep", &exp.config)?;
    if !global.quiet {
        print!("{table}");
    }
    Ok(())
}

fn cmd_eval(global: &GlobalArgs, checkpoint: &Path, dataset: &Path, raw: bool, threshold: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid("--threshold", format!("must lie in [0, 1], got {threshold}")));
    }
    let ck = Checkpoint::load(checkpoint)?;
    let data = Dataset::load(dataset)?;
    let model = if raw { ck.model } else { ck.ema.model() };
    if model.n_inputs() != data.n_features() || model.n_outputs() != data.n_classes() {
        return Err(Error::invalid(
            "checkpoint",
            format!(
                "model maps {} -> {} but the dataset has d={} and K={}",
                model.n_inputs(),
                model.n_outputs(),
                data.n_features(),
                data.n_classes()
            ),
        ));
    }
    let report = evaluate(&predict(&model, &data.test.features)?, &data.test.true_labels, threshold)?;
    let json = serde_json::to_string(&report).expect("report serializes");
    if let Some(dir) = &global.out_dir {
        write_atomic(&dir.join("metrics.json"), format!("{json}\n").as_bytes())?;
        let csv = format!("{}\n{}\n", MetricsReport::CSV_HEADER, report.csv_row());
        write_atomic(&dir.join("metrics.csv"), csv.as_bytes())?;
    }
    if !global.quiet {
        println!("{json}");
    }
    Ok(())
}

/// Per-epoch precision, repeated noisy labels and identified count from
/// stored snapshots.
pub fn diagnose_csv(history: &TrainHistory, data: &Dataset) -> Result<String> {
    let (n, k) = (data.train.len(), data.n_classes());
    let mut out = String::from("epoch,precision,repeated_noisy,identified\n");
    let mut previous: Option<LabelMatrix> = None;
    for r in &history.records {
        let omega = LabelMatrix::from_ones_indices(n, k, &r.omega)?;
        let d = diagnostics(&omega, previous.as_ref(), data.train.true_labels(), &data.train.candidates)?;
        out.push_str(&format!("{},{},{},{}\n", r.epoch, d.precision, d.repeated_noisy, d.identified));
        previous = Some(omega);
    }
    Ok(out)
}

fn cmd_diagnose(global: &GlobalArgs, history: &Path, dataset: &Path) -> Result<()> {
    let h = TrainHistory::from_jsonl(history, &io::read_to_string(history)?)?;
    let data = Dataset::load(dataset)?;
    let csv = diagnose_csv(&h, &data)?;
    if let Some(dir) = &global.out_dir {
        write_atomic(&dir.join("diagnose.csv"), csv.as_bytes())?;
    }
    if !global.quiet {
        print!("{csv}");
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Generate { out } => cmd_generate(g, out),
        Command::Train => cmd_train(g),
        Command::Ablate => cmd_ablate(g),
        Command::Sweep { alphas } => cmd_sweep(g, alphas.as_deref()),
        Command::Eval {
            checkpoint,
            dataset,
            raw,
            threshold,
        } => cmd_eval(g, checkpoint, dataset, *raw, *threshold),
        Command::Diagnose { history, dataset } => cmd_diagnose(g, history, dataset),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn main() -> i32 {
    main_with_args(std::env::args_os())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn minimal_config_parses() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"dataset": "d.json", "method": "CDCR"}"#).unwrap();
        assert_eq!(c.train_config(), TrainConfig::default());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"dataset": "d.json", "alpah": 0.7}"#).is_err());
    }
}
