use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::contextualisation::FilterCriteria;
use crate::error::{Result, ResultExt, ScopeError};
use crate::evaluation::{aggregate_runs, finalize_run, summarize, AggregationMode, ConfusionMatrix, RunSummary};
use crate::ingestion::{self, DEFAULT_BLOCK_SIZE_M, DEFAULT_SAMPLE_COUNT};
use crate::manifest::{sha256_hex, Manifest};
use crate::provider::{write_benchmark, SynthParams, SyntheticBenchmark};
use crate::types::{HyperParams, PrototypeBank};

use super::config::RunConfig;
use super::pipeline::{
    build_log, execute_run, write_bank_outputs, write_run_outputs, write_summary_outputs, LoadedBenchmark,
    RunOutcome, PREDICTIONS_DIR,
};

fn load_checked(cfg: &RunConfig) -> Result<LoadedBenchmark> {
    cfg.validate()?;
    let manifest = Manifest::load(&cfg.manifest)?;
    let root = cfg.manifest_root();
    let bad = manifest.verify_checksums(&root)?;
    if let Some(first) = bad.first() {
        return Err(ScopeError::CorruptPayload(format!("checksum mismatch ({} file(s) differ)", bad.len()))
            .at(root.join(first)));
    }
    LoadedBenchmark::from_manifest(manifest, root, cfg.provider)
}

fn built_bank(bench: &LoadedBenchmark, hp: &HyperParams) -> Result<(PrototypeBank, String)> {
    let (bank, stats) = bench.build_bank(&FilterCriteria::from(hp))?;
    let log = build_log(&stats, &bank, hp.tau, hp.bg_overlap);
    Ok((bank, log))
}

/// Build the bank for the config's `tau` and write `ipb.ipbb` plus its log to `out`.
pub fn cmd_build_ipb(cfg: &RunConfig) -> Result<PrototypeBank> {
    let bench = load_checked(cfg)?;
    let (bank, log) = built_bank(&bench, &cfg.hyperparams)?;
    write_bank_outputs(&cfg.out, &bank, &log)?;
    Ok(bank)
}

fn bank_for_run(cfg: &RunConfig, bench: &LoadedBenchmark) -> Result<(PrototypeBank, String)> {
    match &cfg.bank {
        Some(path) => {
            let bank = ingestion::load_bank(path)?;
            let log = format!(
                "source=prebuilt\nbank_size={}\nbank_dim={}\nbank_bytes={}\n",
                bank.len(),
                bank.dim(),
                bank.storage_bytes()
            );
            Ok((bank, log))
        }
        None => built_bank(bench, &cfg.hyperparams),
    }
}

/// Full single run: bank, all stages, and every output file under `cfg.out`.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunOutcome> {
    let bench = load_checked(cfg)?;
    let (bank, log) = bank_for_run(cfg, &bench)?;
    let outcome = execute_run(
        &bench,
        &bank,
        &cfg.hyperparams,
        cfg.k_shot,
        cfg.seed,
        cfg.include_stage0_in_miou_i,
    )?;
    write_bank_outputs(&cfg.out, &bank, &log)?;
    write_run_outputs(&cfg.out, &outcome)?;
    Ok(outcome)
}

/// Recompute `metrics.csv` and `summary.json` from stored per-stage predictions.
pub fn cmd_eval(predictions: &Path, out: &Path, include_stage0: bool) -> Result<RunSummary> {
    let mut files: Vec<(u32, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(predictions).at_path(predictions)? {
        let path = entry.at_path(predictions)?.path();
        let stage = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("stage_"))
            .and_then(|n| n.strip_suffix(".prdb"))
            .and_then(|n| n.parse::<u32>().ok());
        if let Some(stage) = stage {
            files.push((stage, path));
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(ScopeError::EmptyRun.at(predictions));
    }
    let mut reports = Vec::with_capacity(files.len());
    for (stage, path) in &files {
        let p = ingestion::load_predictions(path)?;
        if p.stage != *stage {
            return Err(ScopeError::CorruptPayload(format!(
                "file name says stage {stage}, payload says {}",
                p.stage
            ))
            .at(path));
        }
        let classes: Vec<i32> = p.base_classes.iter().chain(&p.novel_classes).copied().collect();
        let mut cm = ConfusionMatrix::new(&classes).map_err(|e| e.at(path))?;
        cm.accumulate(&p.ground_truth, &p.predicted).map_err(|e| e.at(path))?;
        reports.push(summarize(&cm, &p.base_classes, &p.novel_classes, p.stage as usize)?);
    }
    let summary = finalize_run(&reports, include_stage0)?;
    write_summary_outputs(out, &summary)?;
    Ok(summary)
}

/// Generate a synthetic benchmark under `out`.
pub fn cmd_synth(params: &SynthParams, out: &Path) -> Result<SyntheticBenchmark> {
    let bench = SyntheticBenchmark::generate(params)?;
    write_benchmark(&bench, out)?;
    Ok(bench)
}

/// Split one raw scene into fixed-size blocks written as `{scene}_blk{y}x{x}.scnb`.
pub fn cmd_partition(
    input: &Path,
    out: &Path,
    block_size_m: Option<f64>,
    sample_count: Option<usize>,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    let raw = ingestion::load_scene(input)?;
    let blocks = ingestion::partition_scene(
        &raw,
        block_size_m.unwrap_or(DEFAULT_BLOCK_SIZE_M),
        sample_count.unwrap_or(DEFAULT_SAMPLE_COUNT),
        seed,
    )?;
    let mut written = Vec::with_capacity(blocks.len());
    for b in &blocks {
        let path = out.join(format!("{}.scnb", b.scene_id));
        ingestion::save_scene(b, &path)?;
        written.push(path);
    }
    Ok(written)
}

// --- sweep ---

#[derive(Debug, Clone, Copy, PartialEq)]
enum Knob {
    Tau(f64),
    TopR(usize),
    Lambda(f64),
}

impl Knob {
    fn name(&self) -> &'static str {
        match self {
            Knob::Tau(_) => "tau",
            Knob::TopR(_) => "top_r",
            Knob::Lambda(_) => "lambda",
        }
    }

    fn value(&self) -> String {
        match self {
            Knob::Tau(v) | Knob::Lambda(v) => v.to_string(),
            Knob::TopR(v) => v.to_string(),
        }
    }

    fn apply(&self, hp: &HyperParams) -> HyperParams {
        let mut hp = *hp;
        match *self {
            Knob::Tau(v) => hp.tau = v,
            Knob::TopR(v) => hp.top_r = v,
            Knob::Lambda(v) => hp.lambda = v,
        }
        hp
    }
}

fn csv_quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub param: String,
    pub value: String,
    pub seed: u64,
    pub dir: PathBuf,
    pub result: std::result::Result<RunSummary, String>,
    /// Mean distance of enriched and few-shot novel prototypes to the true class means.
    pub novel_proto_dist: Option<f64>,
    pub novel_fewshot_dist: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankRecord {
    pub tau: f64,
    pub size: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub banks: Vec<BankRecord>,
}

/// One-at-a-time sweep over `cfg.sweep`. Banks are built once per distinct `tau`.
/// A failing grid point is recorded in `sweep.csv` and the sweep continues.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<SweepResult> {
    let grid = &cfg.sweep;
    if grid.is_empty() {
        return Err(ScopeError::Config("sweep grid is empty".into()));
    }
    let bench = load_checked(cfg)?;
    let seeds = if grid.seeds.is_empty() {
        vec![cfg.seed]
    } else {
        grid.seeds.clone()
    };
    let knobs: Vec<Knob> = grid
        .tau
        .iter()
        .map(|&v| Knob::Tau(v))
        .chain(grid.top_r.iter().map(|&v| Knob::TopR(v)))
        .chain(grid.lambda.iter().map(|&v| Knob::Lambda(v)))
        .collect();

    let mut banks: BTreeMap<u64, std::result::Result<(PrototypeBank, String), String>> = BTreeMap::new();
    let mut bank_order = Vec::new();
    let mut points = Vec::new();
    let mut csv = String::from("param,value,seed,stage,metric,score,error\n");

    for knob in &knobs {
        let hp = knob.apply(&cfg.hyperparams);
        for &seed in &seeds {
            let dir = cfg
                .out
                .join("points")
                .join(format!("{}={}", knob.name(), knob.value()))
                .join(format!("seed={seed}"));
            let key = hp.tau.to_bits();
            let cached = banks.entry(key).or_insert_with(|| {
                let built = hp
                    .validate()
                    .and_then(|_| built_bank(&bench, &hp))
                    .map_err(|e| e.to_string());
                if built.is_ok() {
                    bank_order.push(key);
                }
                built
            });
            let result = match cached {
                Err(e) => Err(e.clone()),
                Ok((bank, log)) => execute_run(
                    &bench,
                    bank,
                    &hp,
                    cfg.k_shot,
                    seed,
                    cfg.include_stage0_in_miou_i,
                )
                .and_then(|outcome| {
                    write_bank_outputs(&dir, bank, log)?;
                    write_run_outputs(&dir, &outcome)?;
                    Ok(outcome)
                })
                .map(|o| (o.summary, o.details.novel_enriched_distance, o.details.novel_fewshot_distance))
                .map_err(|e| e.to_string()),
            };
            let (result, enriched, fewshot) = match result {
                Ok((s, e, f)) => (Ok(s), e, f),
                Err(e) => (Err(e), None, None),
            };
            let prefix = format!("{},{},{}", knob.name(), knob.value(), seed);
            match &result {
                Ok(summary) => {
                    for r in &summary.per_stage {
                        for (metric, score) in [("miou", r.miou), ("miou_b", r.miou_b), ("miou_n", r.miou_n), ("hm", r.hm)] {
                            let _ = writeln!(csv, "{prefix},{},{metric},{score},", r.stage);
                        }
                    }
                    let _ = writeln!(csv, "{prefix},,miou_i,{},", summary.miou_i);
                    let _ = writeln!(csv, "{prefix},,fpp,{},", summary.fpp);
                    if let Some(e) = enriched {
                        let _ = writeln!(csv, "{prefix},,novel_proto_dist,{e},");
                    }
                    if let Some(f) = fewshot {
                        let _ = writeln!(csv, "{prefix},,novel_fewshot_dist,{f},");
                    }
                }
                Err(e) => {
                    let _ = writeln!(csv, "{prefix},,,,{}", csv_quote(e));
                }
            }
            points.push(SweepPoint {
                param: knob.name().to_string(),
                value: knob.value(),
                seed,
                dir,
                result,
                novel_proto_dist: enriched,
                novel_fewshot_dist: fewshot,
            });
        }
    }

    let mut agg = String::from("param,value,mode,runs,miou,miou_b,miou_n,hm,miou_i,fpp\n");
    let mut groups: Vec<(String, String, Vec<RunSummary>)> = Vec::new();
    for p in &points {
        let Ok(s) = &p.result else { continue };
        match groups.last_mut() {
            Some((param, value, runs)) if *param == p.param && *value == p.value => runs.push(s.clone()),
            _ => groups.push((p.param.clone(), p.value.clone(), vec![s.clone()])),
        }
    }
    for (param, value, runs) in &groups {
        for mode in [AggregationMode::PerRunHm, AggregationMode::AveragedHm] {
            let a = aggregate_runs(runs, mode)?;
            let mode_name = match mode {
                AggregationMode::PerRunHm => "per-run-hm",
                AggregationMode::AveragedHm => "averaged-hm",
            };
            let _ = writeln!(
                agg,
                "{param},{value},{mode_name},{},{},{},{},{},{},{}",
                a.runs, a.miou, a.miou_b, a.miou_n, a.hm, a.miou_i, a.fpp
            );
        }
    }

    let mut bank_csv = String::from("tau,size,sha256\n");
    let mut bank_records = Vec::new();
    for key in bank_order {
        if let Ok((bank, _)) = &banks[&key] {
            let rec = BankRecord {
                tau: f64::from_bits(key),
                size: bank.len(),
                sha256: sha256_hex(&ingestion::encode_bank(bank)?),
            };
            let _ = writeln!(bank_csv, "{},{},{}", rec.tau, rec.size, rec.sha256);
            bank_records.push(rec);
        }
    }

    ingestion::write_atomic(&cfg.out.join("sweep.csv"), csv.as_bytes())?;
    ingestion::write_atomic(&cfg.out.join("sweep_aggregate.csv"), agg.as_bytes())?;
    ingestion::write_atomic(&cfg.out.join("sweep_banks.csv"), bank_csv.as_bytes())?;
    Ok(SweepResult {
        points,
        banks: bank_records,
    })
}

/// Directory holding per-stage predictions of a run output.
pub fn predictions_dir(run_out: &Path) -> PathBuf {
    run_out.join(PREDICTIONS_DIR)
}
