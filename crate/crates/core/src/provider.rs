//! Embedding sources: precomputed EMBB files or a seeded Gaussian-cluster world.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScopeError};
use crate::ingestion;
use crate::manifest::{
    sha256_hex, ClassSupportPool, FileChecksum, Manifest, SceneRecord, SceneRole, StagePlan,
    MANIFEST_VERSION,
};
use crate::rng::keyed_seed;
use crate::types::{ClassId, EmbeddingMatrix, InstanceMask, PointCloudScene, BACKGROUND};

/// Gaussian class clusters standing in for a trained encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorldSpec {
    pub class_means: BTreeMap<ClassId, Vec<f32>>,
    pub noise_sigma: f64,
    pub embed_dim: usize,
    pub seed: u64,
}

impl SyntheticWorldSpec {
    /// Means are random directions scaled to `mean_norm`, each keyed by its class id.
    pub fn random(
        class_ids: &[ClassId],
        embed_dim: usize,
        mean_norm: f64,
        noise_sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        if embed_dim == 0 {
            return Err(ScopeError::InvalidParam("embed_dim must be >= 1".into()));
        }
        let mut class_means = BTreeMap::new();
        for &c in class_ids {
            let mut rng = ChaCha8Rng::seed_from_u64(keyed_seed(seed, "class-mean", c as u64));
            let v: Vec<f64> = (0..embed_dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            class_means.insert(c, v.iter().map(|x| (x / n * mean_norm) as f32).collect());
        }
        let world = Self {
            class_means,
            noise_sigma,
            embed_dim,
            seed,
        };
        world.validate()?;
        Ok(world)
    }

    /// `noise_sigma` must be positive; zero-noise worlds are built with
    /// [`SyntheticWorldSpec::noiseless`] and skip this check.
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(ScopeError::InvalidParam(format!(
                "noise_sigma {} must be positive",
                self.noise_sigma
            )));
        }
        self.check_means()
    }

    fn check_means(&self) -> Result<()> {
        for (c, m) in &self.class_means {
            if m.len() != self.embed_dim {
                return Err(ScopeError::DimMismatch {
                    what: "class mean",
                    expected: self.embed_dim,
                    found: m.len(),
                });
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(ScopeError::NonFiniteValue("class mean"));
            }
            if *c < 0 {
                return Err(ScopeError::UnknownClass(*c));
            }
        }
        Ok(())
    }

    /// Copy of this world with zero noise, for exact oracles.
    pub fn noiseless(&self) -> Self {
        Self {
            noise_sigma: 0.0,
            ..self.clone()
        }
    }

    pub fn mean(&self, class_id: ClassId) -> Result<&[f32]> {
        self.class_means
            .get(&class_id)
            .map(Vec::as_slice)
            .ok_or(ScopeError::UnknownClass(class_id))
    }
}

/// Row `i` is `mean[hidden[i]] + sigma * g`, with `g` standard normal keyed by
/// `(world.seed, scene_id, i)`.
pub fn embed_synthetic(
    scene_id: &str,
    world: &SyntheticWorldSpec,
    hidden_labels: &[i32],
) -> Result<EmbeddingMatrix> {
    if world.noise_sigma < 0.0 || !world.noise_sigma.is_finite() {
        return Err(ScopeError::InvalidParam("noise_sigma must be >= 0".into()));
    }
    world.check_means()?;
    let d = world.embed_dim;
    let sigma = world.noise_sigma;
    let mut data = Vec::with_capacity(hidden_labels.len() * d);
    for (i, &label) in hidden_labels.iter().enumerate() {
        let mean = world.mean(label)?;
        if sigma == 0.0 {
            data.extend_from_slice(mean);
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(keyed_seed(world.seed, scene_id, i as u64));
        for &m in mean {
            let g: f64 = rng.sample(StandardNormal);
            data.push((m as f64 + sigma * g) as f32);
        }
    }
    EmbeddingMatrix::new(scene_id, data, hidden_labels.len(), d)
}

/// Load stored embeddings for a scene with `expected_points` points.
pub fn embed_from_file(scene_id: &str, path: &Path, expected_points: usize) -> Result<EmbeddingMatrix> {
    let e = ingestion::load_embeddings(scene_id, path)?;
    if e.rows() != expected_points {
        return Err(ScopeError::DimMismatch {
            what: "embedding rows vs scene points",
            expected: expected_points,
            found: e.rows(),
        }
        .at(path));
    }
    Ok(e)
}

/// A pluggable source of per-scene embeddings.
pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, record: &SceneRecord, scene: &PointCloudScene) -> Result<EmbeddingMatrix>;
}

/// Reads the EMBB file referenced by each scene record.
pub struct FileProvider {
    root: PathBuf,
}

impl FileProvider {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
}

impl EmbeddingProvider for FileProvider {
    fn embed(&self, record: &SceneRecord, scene: &PointCloudScene) -> Result<EmbeddingMatrix> {
        let rel = record.embeddings.as_ref().ok_or_else(|| {
            ScopeError::Config(format!("scene {} has no embeddings file", record.scene_id))
        })?;
        embed_from_file(&record.scene_id, &self.root.join(rel), scene.num_points())
    }
}

/// Regenerates embeddings from the world and each scene's hidden labels.
pub struct SyntheticProvider {
    root: PathBuf,
    world: SyntheticWorldSpec,
}

impl SyntheticProvider {
    pub fn new(root: impl Into<PathBuf>, world: SyntheticWorldSpec) -> Self {
        Self {
            root: root.into(),
            world,
        }
    }
}

impl EmbeddingProvider for SyntheticProvider {
    fn embed(&self, record: &SceneRecord, scene: &PointCloudScene) -> Result<EmbeddingMatrix> {
        let rel = record.hidden_labels.as_ref().ok_or_else(|| {
            ScopeError::Config(format!("scene {} has no hidden labels file", record.scene_id))
        })?;
        let path = self.root.join(rel);
        let hidden = ingestion::load_labels(&path)?;
        if hidden.len() != scene.num_points() {
            return Err(ScopeError::DimMismatch {
                what: "hidden labels vs scene points",
                expected: scene.num_points(),
                found: hidden.len(),
            }
            .at(path));
        }
        embed_synthetic(&record.scene_id, &self.world, &hidden)
    }
}

/// Knobs of the synthetic benchmark generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub base_classes: usize,
    pub novel_classes: usize,
    /// Number of incremental stages the novel classes are split across.
    pub increments: usize,
    pub k_shot: usize,
    /// Candidate support scenes generated per novel class.
    pub support_pool: usize,
    pub embed_dim: usize,
    pub noise_sigma: f64,
    pub mean_norm: f64,
    pub base_scenes: usize,
    pub test_scenes: usize,
    pub base_points_per_class: usize,
    pub bg_instances_per_scene: usize,
    pub points_per_instance: usize,
    /// Background points of novel classes that no mask covers.
    pub clutter_points_per_scene: usize,
    pub distractors_per_scene: usize,
    pub support_points: usize,
    pub support_context_points: usize,
    pub test_points_per_class: usize,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            base_classes: 6,
            novel_classes: 6,
            increments: 3,
            k_shot: 5,
            support_pool: 10,
            embed_dim: 32,
            noise_sigma: 1.0,
            mean_norm: 1.5,
            base_scenes: 20,
            test_scenes: 10,
            base_points_per_class: 64,
            bg_instances_per_scene: 6,
            points_per_instance: 32,
            clutter_points_per_scene: 0,
            distractors_per_scene: 0,
            support_points: 8,
            support_context_points: 16,
            test_points_per_class: 32,
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ScopeError::InvalidParam(m.to_string()));
        if self.base_classes == 0 {
            return bad("need at least one base class");
        }
        if self.novel_classes > 0 && self.increments == 0 && self.bg_instances_per_scene == 0 {
            return bad("novel classes are neither introduced nor planted");
        }
        if self.increments > self.novel_classes {
            return bad("more increments than novel classes");
        }
        if self.increments > 0 && (self.k_shot == 0 || self.support_pool < self.k_shot) {
            return bad("support_pool must be >= k_shot >= 1");
        }
        if self.bg_instances_per_scene > 0 && self.novel_classes == 0 {
            return bad("background instances need novel classes");
        }
        if self.bg_instances_per_scene > 0 && self.points_per_instance == 0 {
            return bad("points_per_instance must be >= 1");
        }
        if self.increments > 0 && self.support_points == 0 {
            return bad("support_points must be >= 1");
        }
        if self.base_scenes == 0 || self.base_points_per_class == 0 {
            return bad("base scenes need points of every base class");
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be >= 1");
        }
        Ok(())
    }

    pub fn base_ids(&self) -> Vec<ClassId> {
        (0..self.base_classes as ClassId).collect()
    }

    pub fn novel_ids(&self) -> Vec<ClassId> {
        let b = self.base_classes as ClassId;
        (b..b + self.novel_classes as ClassId).collect()
    }

    /// Split novel classes into `increments` contiguous groups, earlier groups taking the remainder.
    pub fn stage_classes(&self) -> Vec<Vec<ClassId>> {
        let novel = self.novel_ids();
        if self.increments == 0 {
            return Vec::new();
        }
        let per = novel.len() / self.increments;
        let extra = novel.len() % self.increments;
        let mut out = Vec::new();
        let mut start = 0;
        for t in 0..self.increments {
            let n = per + usize::from(t < extra);
            out.push(novel[start..start + n].to_vec());
            start += n;
        }
        out
    }

    pub fn world(&self) -> Result<SyntheticWorldSpec> {
        let mut ids = self.base_ids();
        ids.extend(self.novel_ids());
        SyntheticWorldSpec::random(&ids, self.embed_dim, self.mean_norm, self.noise_sigma, self.seed)
    }
}

/// A generated scene with everything the pipeline and the oracles need.
#[derive(Debug, Clone)]
pub struct GeneratedScene {
    pub role: SceneRole,
    pub scene: PointCloudScene,
    pub hidden_labels: Vec<i32>,
    /// Ground-truth masks first (one per planted instance), then distractors.
    pub masks: Vec<InstanceMask>,
    /// True class of each ground-truth mask.
    pub planted_classes: Vec<ClassId>,
    pub embeddings: EmbeddingMatrix,
}

#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub params: SynthParams,
    pub world: SyntheticWorldSpec,
    pub base_classes: Vec<ClassId>,
    pub stages: Vec<StagePlan>,
    pub scenes: Vec<GeneratedScene>,
}

impl SyntheticBenchmark {
    pub fn generate(params: &SynthParams) -> Result<Self> {
        params.validate()?;
        let world = params.world()?;
        synth_generate(params, &world)
    }

    pub fn scene(&self, scene_id: &str) -> Option<&GeneratedScene> {
        self.scenes.iter().find(|s| s.scene.scene_id == scene_id)
    }

    pub fn with_role(&self, role: SceneRole) -> impl Iterator<Item = &GeneratedScene> {
        self.scenes.iter().filter(move |s| s.role == role)
    }
}

struct SceneBuilder {
    points: Vec<f32>,
    labels: Vec<i32>,
    hidden: Vec<i32>,
    rng: ChaCha8Rng,
}

impl SceneBuilder {
    const ROOM_M: f32 = 4.0;

    fn new(seed: u64, scene_id: &str) -> Self {
        Self {
            points: Vec::new(),
            labels: Vec::new(),
            hidden: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(keyed_seed(seed, &format!("geometry/{scene_id}"), 0)),
        }
    }

    /// Add a compact blob of `n` points; returns their indices.
    fn blob(&mut self, n: usize, visible: i32, hidden: i32) -> Vec<usize> {
        let cx = self.rng.random_range(0.3..Self::ROOM_M - 0.3);
        let cy = self.rng.random_range(0.3..Self::ROOM_M - 0.3);
        let tint = (hidden.rem_euclid(7) as f32) / 7.0;
        let start = self.labels.len();
        for _ in 0..n {
            let x = cx + self.rng.random_range(-0.3f32..0.3);
            let y = cy + self.rng.random_range(-0.3f32..0.3);
            let z = self.rng.random_range(0.0f32..2.0);
            let jitter: f32 = self.rng.random_range(0.0..0.1);
            self.points
                .extend_from_slice(&[x, y, z, tint, 1.0 - tint, (tint + jitter).min(1.0)]);
            self.labels.push(visible);
            self.hidden.push(hidden);
        }
        (start..self.labels.len()).collect()
    }

    fn finish(self, scene_id: &str) -> Result<(PointCloudScene, Vec<i32>, ChaCha8Rng)> {
        let scene = PointCloudScene::new(scene_id, self.points, 6, self.labels)?;
        Ok((scene, self.hidden, self.rng))
    }
}

/// Role, geometry, hidden labels, masks and planted classes of a scene before embedding.
type RawScene = (SceneRole, PointCloudScene, Vec<i32>, Vec<InstanceMask>, Vec<ClassId>);

/// Generate base, support and test scenes for `world`.
///
/// Base scenes carry visible base labels; every planted background instance is a
/// novel-class blob labelled `-1` and gets one ground-truth mask with confidence in
/// `(0.5, 1.0]`. Distractor masks mix two planted instances with confidence in `[0, 0.5)`.
/// Support scenes label only their class. Test scenes are fully labelled.
pub fn synth_generate(params: &SynthParams, world: &SyntheticWorldSpec) -> Result<SyntheticBenchmark> {
    params.validate()?;
    let base_ids = params.base_ids();
    let novel_ids = params.novel_ids();
    for c in base_ids.iter().chain(&novel_ids) {
        if !world.class_means.contains_key(c) {
            return Err(ScopeError::InsufficientClasses(format!(
                "world has no mean for class {c}"
            )));
        }
    }
    if world.embed_dim != params.embed_dim {
        return Err(ScopeError::DimMismatch {
            what: "world embedding dimension",
            expected: params.embed_dim,
            found: world.embed_dim,
        });
    }
    let seed = params.seed;
    let mut scenes: Vec<RawScene> = Vec::new();

    for s in 0..params.base_scenes {
        let id = format!("base_{s:03}");
        let mut b = SceneBuilder::new(seed, &id);
        for &c in &base_ids {
            b.blob(params.base_points_per_class, c, c);
        }
        let mut instances = Vec::new();
        for j in 0..params.bg_instances_per_scene {
            let c = novel_ids[(s * params.bg_instances_per_scene + j) % novel_ids.len()];
            instances.push((c, b.blob(params.points_per_instance, BACKGROUND, c)));
        }
        if !novel_ids.is_empty() {
            for k in 0..params.clutter_points_per_scene {
                let c = novel_ids[(s + k) % novel_ids.len()];
                b.blob(1, BACKGROUND, c);
            }
        }
        let (scene, hidden, mut rng) = b.finish(&id)?;
        let m = scene.num_points();
        let mut masks = Vec::new();
        let mut planted = Vec::new();
        for (c, idx) in &instances {
            let conf = 1.0 - rng.random_range(0.0f32..0.5);
            masks.push(InstanceMask::from_indices(m, idx.iter().copied(), conf, masks.len() as u32)?);
            planted.push(*c);
        }
        if instances.len() >= 2 {
            for d in 0..params.distractors_per_scene {
                let a = &instances[d % instances.len()].1;
                let b = &instances[(d + 1) % instances.len()].1;
                let pick = a[..a.len().div_ceil(2)].iter().chain(&b[..b.len().div_ceil(2)]);
                let conf = rng.random_range(0.0f32..0.5);
                masks.push(InstanceMask::from_indices(m, pick.copied(), conf, masks.len() as u32)?);
            }
        }
        scenes.push((SceneRole::Base, scene, hidden, masks, planted));
    }

    let mut stages = Vec::new();
    for group in params.stage_classes() {
        let mut pools = Vec::new();
        for &c in &group {
            let mut candidates = Vec::new();
            for j in 0..params.support_pool {
                let id = format!("support_c{c}_{j:02}");
                let mut b = SceneBuilder::new(seed, &id);
                b.blob(params.support_points, c, c);
                for k in 0..params.support_context_points {
                    let ctx = base_ids[k % base_ids.len()];
                    b.blob(1, BACKGROUND, ctx);
                }
                let (scene, hidden, _) = b.finish(&id)?;
                scenes.push((SceneRole::Support, scene, hidden, Vec::new(), Vec::new()));
                candidates.push(id);
            }
            pools.push(ClassSupportPool {
                class_id: c,
                candidates,
            });
        }
        stages.push(StagePlan {
            k_shot: params.k_shot,
            classes: pools,
        });
    }

    for s in 0..params.test_scenes {
        let id = format!("test_{s:03}");
        let mut b = SceneBuilder::new(seed, &id);
        for &c in base_ids.iter().chain(&novel_ids) {
            b.blob(params.test_points_per_class, c, c);
        }
        let (scene, hidden, _) = b.finish(&id)?;
        scenes.push((SceneRole::Test, scene, hidden, Vec::new(), Vec::new()));
    }

    let scenes = scenes
        .into_par_iter()
        .map(|(role, scene, hidden_labels, masks, planted_classes)| {
            let embeddings = embed_synthetic(&scene.scene_id, world, &hidden_labels)?;
            Ok(GeneratedScene {
                role,
                scene,
                hidden_labels,
                masks,
                planted_classes,
                embeddings,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SyntheticBenchmark {
        params: params.clone(),
        world: world.clone(),
        base_classes: base_ids,
        stages,
        scenes,
    })
}

/// True class means, written next to the manifest for oracle checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSidecar {
    pub embed_dim: usize,
    pub noise_sigma: f64,
    pub class_means: BTreeMap<ClassId, Vec<f32>>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ORACLE_FILE: &str = "oracle.json";

/// Write every scene, mask, embedding and hidden-label file plus the manifest and
/// oracle sidecar under `dir`.
pub fn write_benchmark(bench: &SyntheticBenchmark, dir: &Path) -> Result<Manifest> {
    let mut files = Vec::new();
    let mut records = Vec::new();
    let mut put = |rel: PathBuf, bytes: Vec<u8>| -> Result<PathBuf> {
        ingestion::write_atomic(&dir.join(&rel), &bytes)?;
        files.push(FileChecksum {
            path: rel.clone(),
            sha256: sha256_hex(&bytes),
        });
        Ok(rel)
    };
    for g in &bench.scenes {
        let id = &g.scene.scene_id;
        let scene = put(
            PathBuf::from(format!("scenes/{id}.scnb")),
            ingestion::encode_scene(&g.scene)?,
        )?;
        let masks = if g.role == SceneRole::Base {
            Some(put(
                PathBuf::from(format!("masks/{id}.mskb")),
                ingestion::encode_masks(g.scene.num_points(), &g.masks)?,
            )?)
        } else {
            None
        };
        let embeddings = put(
            PathBuf::from(format!("embeddings/{id}.embb")),
            ingestion::encode_embeddings(&g.embeddings)?,
        )?;
        let hidden = put(
            PathBuf::from(format!("hidden/{id}.lblb")),
            ingestion::encode_labels(&g.hidden_labels)?,
        )?;
        records.push(SceneRecord {
            scene_id: id.clone(),
            role: g.role,
            scene,
            masks,
            embeddings: Some(embeddings),
            hidden_labels: Some(hidden),
        });
    }
    let oracle = OracleSidecar {
        embed_dim: bench.world.embed_dim,
        noise_sigma: bench.world.noise_sigma,
        class_means: bench.world.class_means.clone(),
    };
    let mut oracle_bytes = serde_json::to_vec_pretty(&oracle)?;
    oracle_bytes.push(b'\n');
    put(PathBuf::from(ORACLE_FILE), oracle_bytes)?;

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed: bench.params.seed,
        base_classes: bench.base_classes.clone(),
        stages: bench.stages.clone(),
        world: Some(bench.world.clone()),
        params: Some(bench.params.clone()),
        scenes: records,
        files,
    };
    ingestion::write_atomic(&dir.join(MANIFEST_FILE), &manifest.to_json()?)?;
    Ok(manifest)
}
