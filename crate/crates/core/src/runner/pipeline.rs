//! Stage sequencing over a loaded benchmark.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contextualisation::{build_ipb_with_stats, BankBuildStats, ContextInput, FilterCriteria};
use crate::error::{Result, ScopeError};
use crate::evaluation::{finalize_run, metrics_csv, summarize, ConfusionMatrix, RunSummary};
use crate::ingestion::{self, StagePredictions};
use crate::manifest::{sha256_hex, Manifest, SceneRecord, SceneRole};
use crate::primitives::l2_norm;
use crate::provider::{EmbeddingProvider, FileProvider, SyntheticProvider, SyntheticWorldSpec};
use crate::registration::{base_prototypes, predict, register_stage, NovelClassInput, Shot};
use crate::types::{
    ClassId, ClassifierMatrix, EmbeddingMatrix, HyperParams, InstanceMask, PointCloudScene,
    PrototypeBank, StageSchedule, BACKGROUND,
};

use super::config::ProviderMode;

pub struct LoadedScene {
    pub record: SceneRecord,
    pub scene: PointCloudScene,
    pub embeddings: EmbeddingMatrix,
    pub masks: Vec<InstanceMask>,
}

/// A manifest with every scene, mask file and embedding matrix in memory.
pub struct LoadedBenchmark {
    pub root: PathBuf,
    pub manifest: Manifest,
    scenes: Vec<LoadedScene>,
    by_id: BTreeMap<String, usize>,
}

impl LoadedBenchmark {
    pub fn load(manifest_path: &Path, mode: ProviderMode) -> Result<Self> {
        let manifest = Manifest::load(manifest_path)?;
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_manifest(manifest, root, mode)
    }

    pub fn from_manifest(manifest: Manifest, root: PathBuf, mode: ProviderMode) -> Result<Self> {
        let provider: Box<dyn EmbeddingProvider> = match mode {
            ProviderMode::File => Box::new(FileProvider::new(&root)),
            ProviderMode::Synthetic => {
                let world = manifest.world.clone().ok_or_else(|| {
                    ScopeError::Config("synthetic provider needs a manifest with a world".into())
                })?;
                Box::new(SyntheticProvider::new(&root, world))
            }
        };
        Self::load_with(manifest, root, provider.as_ref())
    }

    pub fn load_with(manifest: Manifest, root: PathBuf, provider: &dyn EmbeddingProvider) -> Result<Self> {
        let scenes = manifest
            .scenes
            .par_iter()
            .map(|record| {
                let scene = ingestion::load_scene_as(&record.scene_id, &root.join(&record.scene))?;
                let embeddings = provider.embed(record, &scene)?;
                let masks = match &record.masks {
                    Some(rel) => ingestion::load_masks(&root.join(rel), scene.num_points())?,
                    None => Vec::new(),
                };
                Ok(LoadedScene {
                    record: record.clone(),
                    scene,
                    embeddings,
                    masks,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut by_id = BTreeMap::new();
        for (i, s) in scenes.iter().enumerate() {
            if by_id.insert(s.record.scene_id.clone(), i).is_some() {
                return Err(ScopeError::Config(format!(
                    "scene {} listed twice in the manifest",
                    s.record.scene_id
                )));
            }
        }
        Ok(Self {
            root,
            manifest,
            scenes,
            by_id,
        })
    }

    pub fn scene(&self, id: &str) -> Result<&LoadedScene> {
        self.by_id
            .get(id)
            .map(|&i| &self.scenes[i])
            .ok_or_else(|| ScopeError::Config(format!("scene {id} is not in the manifest")))
    }

    pub fn with_role(&self, role: SceneRole) -> impl Iterator<Item = &LoadedScene> {
        self.scenes.iter().filter(move |s| s.record.role == role)
    }

    pub fn world(&self) -> Option<&SyntheticWorldSpec> {
        self.manifest.world.as_ref()
    }

    /// Bank over the base scenes in manifest order.
    pub fn build_bank(&self, crit: &FilterCriteria) -> Result<(PrototypeBank, BankBuildStats)> {
        let inputs: Vec<ContextInput<'_>> = self
            .with_role(SceneRole::Base)
            .map(|s| ContextInput {
                scene: &s.scene,
                embeddings: &s.embeddings,
                masks: &s.masks,
            })
            .collect();
        build_ipb_with_stats(&inputs, crit)
    }
}

pub fn build_log(stats: &BankBuildStats, bank: &PrototypeBank, tau: f64, bg_overlap: f64) -> String {
    format!(
        "tau={tau}\nbg_overlap={bg_overlap}\nscenes_processed={}\nmasks_seen={}\nmasks_retained={}\nbank_size={}\nbank_dim={}\nbank_bytes={}\n",
        stats.scenes,
        stats.masks_seen,
        stats.masks_retained,
        bank.len(),
        bank.dim(),
        bank.storage_bytes()
    )
}

/// Per-class registration diagnostics written to `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: ClassId,
    pub stage: usize,
    pub effective_r: usize,
    pub mean_similarity: Option<f64>,
    /// Distances to the true class mean, when the manifest carries a world.
    pub fewshot_distance: Option<f64>,
    pub enriched_distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDetails {
    pub seed: u64,
    pub hyperparams: HyperParams,
    pub schedule: StageSchedule,
    pub bank_size: usize,
    pub bank_sha256: String,
    pub classes: Vec<ClassReport>,
    /// Mean enriched / few-shot distance over all novel classes.
    pub novel_enriched_distance: Option<f64>,
    pub novel_fewshot_distance: Option<f64>,
}

pub struct RunOutcome {
    pub summary: RunSummary,
    pub details: RunDetails,
    pub predictions: Vec<StagePredictions>,
    /// Classifier after each stage, index = stage.
    pub classifiers: Vec<ClassifierMatrix>,
}

fn distance(a: &[f32], b: &[f32]) -> f64 {
    let d: Vec<f32> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    l2_norm(&d)
}

fn mean_of(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Evaluate the test split against `classifier`, restricting ground truth to `known`.
fn evaluate_stage(
    bench: &LoadedBenchmark,
    classifier: &ClassifierMatrix,
    schedule: &StageSchedule,
    stage: usize,
) -> Result<(ConfusionMatrix, StagePredictions)> {
    let base = schedule.base_classes.clone();
    let novel = schedule.novel_classes_through(stage);
    let known: BTreeSet<ClassId> = base.iter().chain(&novel).copied().collect();
    let classes = classifier.class_ids();
    let tests: Vec<&LoadedScene> = bench.with_role(SceneRole::Test).collect();
    let per_scene = tests
        .par_iter()
        .map(|s| {
            let pred = predict(&s.embeddings, classifier)?;
            let gt: Vec<i32> = s
                .scene
                .labels()
                .iter()
                .map(|l| if known.contains(l) { *l } else { BACKGROUND })
                .collect();
            let mut cm = ConfusionMatrix::new(&classes)?;
            cm.accumulate(&gt, &pred)?;
            Ok((cm, gt, pred))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cm = ConfusionMatrix::new(&classes)?;
    let mut ground_truth = Vec::new();
    let mut predicted = Vec::new();
    for (c, gt, pred) in per_scene {
        cm.merge(&c)?;
        ground_truth.extend(gt);
        predicted.extend(pred);
    }
    Ok((
        cm,
        StagePredictions {
            stage: stage as u32,
            base_classes: base,
            novel_classes: novel,
            ground_truth,
            predicted,
        },
    ))
}

/// Run stage 0 through `T`: base prototypes, then registration and evaluation per stage.
pub fn execute_run(
    bench: &LoadedBenchmark,
    bank: &PrototypeBank,
    hp: &HyperParams,
    k_shot: Option<usize>,
    seed: u64,
    include_stage0: bool,
) -> Result<RunOutcome> {
    hp.validate()?;
    let schedule = bench.manifest.resolve_schedule(k_shot, seed)?;

    let base_data: Vec<Shot<'_>> = bench
        .with_role(SceneRole::Base)
        .map(|s| (&s.embeddings, s.scene.labels()))
        .collect();
    let base = base_prototypes(&base_data, &schedule.base_classes)?;
    let dim = base[0].dim();
    if !bank.is_empty() && bank.dim() != dim {
        return Err(ScopeError::DimMismatch {
            what: "bank vs embedding dimension",
            expected: dim,
            found: bank.dim(),
        });
    }
    let mut classifier = ClassifierMatrix::from_base(
        dim,
        schedule.base_classes.iter().copied().zip(base).collect(),
    )?;

    let mut reports = Vec::new();
    let mut predictions = Vec::new();
    let mut classifiers = Vec::new();
    let mut class_reports = Vec::new();

    for stage in 0..=schedule.num_increments() {
        if stage > 0 {
            let plan = &schedule.stages[stage - 1];
            let inputs = plan
                .classes
                .iter()
                .map(|cs| {
                    let shots = cs
                        .supports
                        .iter()
                        .map(|id| {
                            let s = bench.scene(id)?;
                            Ok((&s.embeddings, s.scene.labels()))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(NovelClassInput {
                        class_id: cs.class_id,
                        shots,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let before = classifier.rows()[..schedule.base_classes.len()].to_vec();
            let (next, trace) = register_stage(&classifier, stage, &inputs, plan.k_shot, bank, hp)?;
            if next.rows()[..before.len()] != before[..] {
                return Err(ScopeError::Invariant("base rows changed during registration".into()));
            }
            classifier = next;
            for reg in trace {
                let truth = bench.world().and_then(|w| w.mean(reg.class_id).ok());
                let sims: Vec<f64> = reg.retrieval.entries.iter().map(|(_, s)| *s).collect();
                class_reports.push(ClassReport {
                    class_id: reg.class_id,
                    stage,
                    effective_r: reg.retrieval.effective_r,
                    mean_similarity: mean_of(&sims),
                    fewshot_distance: truth.map(|t| distance(&reg.fewshot.vector, t)),
                    enriched_distance: truth.map(|t| distance(&reg.enriched.vector, t)),
                });
            }
        }
        let (cm, preds) = evaluate_stage(bench, &classifier, &schedule, stage)?;
        reports.push(summarize(&cm, &preds.base_classes, &preds.novel_classes, stage)?);
        predictions.push(preds);
        classifiers.push(classifier.clone());
    }

    let summary = finalize_run(&reports, include_stage0)?;
    let enriched: Vec<f64> = class_reports.iter().filter_map(|c| c.enriched_distance).collect();
    let fewshot: Vec<f64> = class_reports.iter().filter_map(|c| c.fewshot_distance).collect();
    let details = RunDetails {
        seed,
        hyperparams: *hp,
        schedule,
        bank_size: bank.len(),
        bank_sha256: sha256_hex(&ingestion::encode_bank(bank)?),
        classes: class_reports,
        novel_enriched_distance: mean_of(&enriched),
        novel_fewshot_distance: mean_of(&fewshot),
    };
    Ok(RunOutcome {
        summary,
        details,
        predictions,
        classifiers,
    })
}

pub(crate) fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v)?;
    b.push(b'\n');
    Ok(b)
}

pub const BANK_FILE: &str = "ipb.ipbb";
pub const BUILD_LOG_FILE: &str = "build_ipb.log";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const DETAILS_FILE: &str = "run.json";
pub const PREDICTIONS_DIR: &str = "predictions";

pub fn write_bank_outputs(out: &Path, bank: &PrototypeBank, log: &str) -> Result<()> {
    ingestion::save_bank(bank, &out.join(BANK_FILE))?;
    ingestion::write_atomic(&out.join(BUILD_LOG_FILE), log.as_bytes())
}

pub fn write_summary_outputs(out: &Path, summary: &RunSummary) -> Result<()> {
    ingestion::write_atomic(&out.join(METRICS_FILE), metrics_csv(&summary.per_stage).as_bytes())?;
    ingestion::write_atomic(&out.join(SUMMARY_FILE), &json_bytes(summary)?)
}

pub fn write_run_outputs(out: &Path, outcome: &RunOutcome) -> Result<()> {
    write_summary_outputs(out, &outcome.summary)?;
    ingestion::write_atomic(&out.join(DETAILS_FILE), &json_bytes(&outcome.details)?)?;
    for p in &outcome.predictions {
        ingestion::save_predictions(p, &out.join(PREDICTIONS_DIR).join(format!("stage_{}.prdb", p.stage)))?;
    }
    Ok(())
}
