use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use abmt::config::{apply_file, set_field};
use abmt::io::{load_checkpoint, save_checkpoint};
use abmt::pipeline::{
    adapt_target, diagnose, pretrain_source, run_eval, run_uda, synth_dataset, Dataset, MetricsReport, SynthConfig,
    TrainConfig,
};
use abmt::{AbmtError, Result};

#[derive(Parser)]
#[command(name = "abmt", version, about = "Asymmetric branched mean teaching on part-feature data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic source/target pair as dataset files.
    Synth(SynthArgs),
    /// Supervised pre-training on a labeled source dataset.
    Pretrain(PretrainArgs),
    /// Pseudo-label adaptation on the target dataset.
    Adapt(AdaptArgs),
    /// Retrieval metrics of a checkpoint on the target query/gallery splits.
    Eval(EvalArgs),
    /// Divergence CSV from an adaptation metrics file.
    Diagnose(DiagnoseArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    n_ids: Option<usize>,
    #[arg(long)]
    imgs_per_id: Option<usize>,
    #[arg(long)]
    n_cams: Option<usize>,
    #[arg(long)]
    parts: Option<usize>,
    #[arg(long)]
    d_in: Option<usize>,
    #[arg(long)]
    domain_shift: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    clutter_gain: Option<f64>,
}

impl SynthArgs {
    fn build(&self) -> SynthConfig {
        let d = SynthConfig::default();
        SynthConfig {
            n_ids: self.n_ids.unwrap_or(d.n_ids),
            imgs_per_id: self.imgs_per_id.unwrap_or(d.imgs_per_id),
            n_cams: self.n_cams.unwrap_or(d.n_cams),
            parts: self.parts.unwrap_or(d.parts),
            d_in: self.d_in.unwrap_or(d.d_in),
            domain_shift: self.domain_shift.unwrap_or(d.domain_shift),
            noise: self.noise.unwrap_or(d.noise),
            clutter_gain: self.clutter_gain.unwrap_or(d.clutter_gain),
            ..d
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    DbscanRerank,
    Kmeans,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    seed: u64,
    /// `key = value` config file applied before the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` assignment, dotted keys allowed. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    epochs_pretrain: Option<usize>,
    #[arg(long)]
    iters_pretrain: Option<usize>,
    #[arg(long)]
    epochs_adapt: Option<usize>,
    #[arg(long)]
    iters_adapt: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_identities: Option<usize>,
    #[arg(long)]
    instances_per_identity: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum)]
    clustering_method: Option<Method>,
    #[arg(long)]
    part_erasing_prob: Option<f64>,
    /// Identical branches with mean pooling (symmetric baseline).
    #[arg(long)]
    symmetric: bool,
    /// Each teacher branch supervises its own student branch.
    #[arg(long)]
    self_wiring: bool,
    #[arg(long)]
    literal_soft_triplet: bool,
    /// Adapt from a fresh encoder even when a source dataset is given.
    #[arg(long)]
    no_source_pretrain: bool,
}

impl TrainArgs {
    fn build(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            cfg = apply_file(cfg, &std::fs::read_to_string(path)?)?;
        }
        let mut sets: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                sets.push((k.to_string(), v));
            }
        };
        put("epochs_pretrain", self.epochs_pretrain.map(|v| v.to_string()));
        put("iters_pretrain", self.iters_pretrain.map(|v| v.to_string()));
        put("epochs_adapt", self.epochs_adapt.map(|v| v.to_string()));
        put("iters_adapt", self.iters_adapt.map(|v| v.to_string()));
        put("lr", self.lr.map(|v| v.to_string()));
        put("batch_identities", self.batch_identities.map(|v| v.to_string()));
        put("instances_per_identity", self.instances_per_identity.map(|v| v.to_string()));
        put("alpha", self.alpha.map(|v| v.to_string()));
        put("part_erasing_prob", self.part_erasing_prob.map(|v| v.to_string()));
        put(
            "clustering_method",
            self.clustering_method.map(|m| match m {
                Method::DbscanRerank => "dbscan_rerank".to_string(),
                Method::Kmeans => "kmeans".to_string(),
            }),
        );
        put("use_asymmetric_branches", self.symmetric.then(|| "false".into()));
        put("use_cross_branch", self.self_wiring.then(|| "false".into()));
        put("literal_soft_triplet", self.literal_soft_triplet.then(|| "true".into()));
        put("source_pretrain", self.no_source_pretrain.then(|| "false".into()));
        for s in &self.sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| AbmtError::Parameter(format!("--set expects KEY=VALUE, got {s:?}")))?;
            sets.push((k.trim().to_string(), v.to_string()));
        }
        for (k, v) in sets {
            cfg = set_field(&cfg, &k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    source: PathBuf,
    /// Target dataset for a direct-transfer evaluation after training.
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    target: PathBuf,
    /// Labeled source; pre-trained on first unless `--init` is given.
    #[arg(long)]
    source: Option<PathBuf>,
    /// Pre-trained checkpoint to adapt from.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Teacher checkpoint written after adaptation.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Per-epoch run log CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Metrics JSON path; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    metrics: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_text(&std::fs::read_to_string(path)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let cfg = a.build();
            let (source, target) = synth_dataset(&cfg, a.seed)?;
            std::fs::create_dir_all(&a.out_dir)?;
            std::fs::write(a.out_dir.join("source.txt"), source.to_text())?;
            std::fs::write(a.out_dir.join("target.txt"), target.to_text())?;
            info!("wrote {} source and {} target samples", source.len(), target.len());
        }
        Command::Pretrain(a) => {
            let cfg = a.train.build()?;
            let source = read_dataset(&a.source)?;
            let (state, report) = pretrain_source(&cfg, &source, a.train.seed)?;
            save_checkpoint(&state, &a.out)?;
            if let Some(last) = report.epoch_losses.last() {
                info!("final source loss {last:.4}");
            }
            if let Some(t) = &a.target {
                let metrics = run_eval(&state, &read_dataset(t)?)?;
                println!("{}", serde_json::to_string_pretty(&metrics)?);
            }
        }
        Command::Adapt(a) => {
            let cfg = a.train.build()?;
            let target = read_dataset(&a.target)?;
            let source = a.source.as_deref().map(read_dataset).transpose()?;
            let (teacher, report) = match &a.init {
                Some(p) => adapt_target(&cfg, Some(&load_checkpoint(p)?), source.as_ref(), &target, a.train.seed)?,
                None => {
                    let (t, _, r) = run_uda(&cfg, source.as_ref(), &target, a.train.seed)?;
                    (t, r)
                }
            };
            save_checkpoint(&teacher, &a.out)?;
            if let Some(p) = &a.metrics {
                std::fs::write(p, report.to_json()?)?;
            }
            if let Some(p) = &a.log {
                std::fs::write(p, report.run_log_csv())?;
            }
            if let Some(m) = &report.final_metrics {
                println!("{}", serde_json::to_string_pretty(m)?);
            }
        }
        Command::Eval(a) => {
            let metrics = run_eval(&load_checkpoint(&a.checkpoint)?, &read_dataset(&a.target)?)?;
            let json = serde_json::to_string_pretty(&metrics)?;
            match &a.out {
                Some(p) => std::fs::write(p, json)?,
                None => println!("{json}"),
            }
        }
        Command::Diagnose(a) => {
            let report = MetricsReport::from_json(&std::fs::read_to_string(&a.metrics)?)?;
            diagnose(&report, &a.out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
