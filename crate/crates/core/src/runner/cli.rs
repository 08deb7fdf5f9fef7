use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::{Result, ResultExt, ScopeError};
use crate::evaluation::AggregationMode;
use crate::provider::SynthParams;

use super::commands::{cmd_build_ipb, cmd_eval, cmd_partition, cmd_run, cmd_sweep, cmd_synth};
use super::config::{ProviderMode, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "scope", version, about = "Incremental few-shot point cloud segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the instance prototype bank from the base scenes.
    BuildIpb(RunArgs),
    /// Run every stage and write metrics, predictions and the bank.
    Run(RunArgs),
    /// One-at-a-time sweep over tau, top-r and lambda.
    Sweep(SweepArgs),
    /// Recompute metrics from stored predictions.
    Eval(EvalArgs),
    /// Generate a synthetic benchmark.
    Synth(SynthArgs),
    /// Split a raw scene into sampled blocks.
    Partition(PartitionArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON run config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub top_r: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub bg_overlap: Option<f64>,
    #[arg(long)]
    pub k_shot: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub provider: Option<ProviderArg>,
    /// Use a prebuilt bank instead of building one.
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Leave stage 0 out of mIoU-I.
    #[arg(long)]
    pub exclude_stage0: bool,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum ProviderArg {
    File,
    Synthetic,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_delimiter = ',')]
    pub sweep_tau: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub sweep_top_r: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub sweep_lambda: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub sweep_seeds: Vec<u64>,
    #[arg(long, value_enum)]
    pub aggregation: Option<AggregationArg>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum AggregationArg {
    PerRunHm,
    AveragedHm,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory with `stage_{t}.prdb` files.
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub exclude_stage0: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON generator parameters; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub base_classes: Option<usize>,
    #[arg(long)]
    pub novel_classes: Option<usize>,
    #[arg(long)]
    pub increments: Option<usize>,
    #[arg(long)]
    pub k_shot: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PartitionArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub block_size: Option<f64>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.manifest {
            cfg.manifest = v.clone();
        }
        if let Some(v) = self.tau {
            cfg.hyperparams.tau = v;
        }
        if let Some(v) = self.top_r {
            cfg.hyperparams.top_r = v;
        }
        if let Some(v) = self.lambda {
            cfg.hyperparams.lambda = v;
        }
        if let Some(v) = self.bg_overlap {
            cfg.hyperparams.bg_overlap = v;
        }
        if self.k_shot.is_some() {
            cfg.k_shot = self.k_shot;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        if let Some(v) = self.provider {
            cfg.provider = match v {
                ProviderArg::File => ProviderMode::File,
                ProviderArg::Synthetic => ProviderMode::Synthetic,
            };
        }
        if let Some(v) = &self.bank {
            cfg.bank = Some(v.clone());
        }
        if self.exclude_stage0 {
            cfg.include_stage0_in_miou_i = false;
        }
        Ok(cfg)
    }
}

impl SweepArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = self.run.resolve()?;
        if !self.sweep_tau.is_empty() {
            cfg.sweep.tau = self.sweep_tau.clone();
        }
        if !self.sweep_top_r.is_empty() {
            cfg.sweep.top_r = self.sweep_top_r.clone();
        }
        if !self.sweep_lambda.is_empty() {
            cfg.sweep.lambda = self.sweep_lambda.clone();
        }
        if !self.sweep_seeds.is_empty() {
            cfg.sweep.seeds = self.sweep_seeds.clone();
        }
        if let Some(a) = self.aggregation {
            cfg.aggregation = match a {
                AggregationArg::PerRunHm => AggregationMode::PerRunHm,
                AggregationArg::AveragedHm => AggregationMode::AveragedHm,
            };
        }
        Ok(cfg)
    }
}

impl SynthArgs {
    pub fn resolve(&self) -> Result<SynthParams> {
        let mut p = match &self.config {
            Some(path) => {
                let bytes = std::fs::read(path).at_path(path)?;
                serde_json::from_slice(&bytes).at_path(path)?
            }
            None => SynthParams::default(),
        };
        if let Some(v) = self.seed {
            p.seed = v;
        }
        if let Some(v) = self.base_classes {
            p.base_classes = v;
        }
        if let Some(v) = self.novel_classes {
            p.novel_classes = v;
        }
        if let Some(v) = self.increments {
            p.increments = v;
        }
        if let Some(v) = self.k_shot {
            p.k_shot = v;
        }
        if let Some(v) = self.embed_dim {
            p.embed_dim = v;
        }
        if let Some(v) = self.noise_sigma {
            p.noise_sigma = v;
        }
        Ok(p)
    }
}

/// Worker threads from `SCOPE_THREADS`, if set.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("SCOPE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| ScopeError::Config(format!("SCOPE_THREADS={raw} is not a thread count")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| ScopeError::Config(format!("thread pool: {e}")))
}

/// Execute a parsed command, printing a short report to stdout.
pub fn dispatch(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::BuildIpb(a) => {
            let cfg = a.resolve()?;
            let bank = cmd_build_ipb(&cfg)?;
            println!("bank: {} prototypes, dim {}", bank.len(), bank.dim());
        }
        Command::Run(a) => {
            let cfg = a.resolve()?;
            let o = cmd_run(&cfg)?;
            let last = o.summary.per_stage.last().ok_or(ScopeError::EmptyRun)?;
            println!(
                "stages: {}  mIoU: {:.4}  mIoU-B: {:.4}  mIoU-N: {:.4}  HM: {:.4}  mIoU-I: {:.4}  FPP: {:.4}",
                o.summary.per_stage.len(),
                last.miou,
                last.miou_b,
                last.miou_n,
                last.hm,
                o.summary.miou_i,
                o.summary.fpp
            );
        }
        Command::Sweep(a) => {
            let cfg = a.resolve()?;
            let r = cmd_sweep(&cfg)?;
            let failed = r.points.iter().filter(|p| p.result.is_err()).count();
            println!(
                "sweep: {} points, {} failed, {} banks",
                r.points.len(),
                failed,
                r.banks.len()
            );
        }
        Command::Eval(a) => {
            let s = cmd_eval(&a.predictions, &a.out, !a.exclude_stage0)?;
            println!("stages: {}  mIoU-I: {:.4}  FPP: {:.4}", s.per_stage.len(), s.miou_i, s.fpp);
        }
        Command::Synth(a) => {
            let params = a.resolve()?;
            let b = cmd_synth(&params, &a.out)?;
            println!("synth: {} scenes", b.scenes.len());
        }
        Command::Partition(a) => {
            let written = cmd_partition(&a.input, &a.out, a.block_size, a.samples, a.seed)?;
            println!("partition: {} blocks", written.len());
        }
    }
    Ok(())
}
