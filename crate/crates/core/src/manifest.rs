//! Benchmark manifest: the scene list, stage plan and file checksums a run consumes.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, ResultExt, ScopeError};
use crate::provider::{SynthParams, SyntheticWorldSpec};
use crate::rng::keyed_seed;
use crate::types::{ClassId, ClassSupport, IncrementalStage, StageSchedule};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneRole {
    Base,
    Support,
    Test,
}

/// One scene and its companion files. Paths are relative to the manifest directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: String,
    pub role: SceneRole,
    pub scene: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masks: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_labels: Option<PathBuf>,
}

/// Candidate support scenes for one novel class; a run draws `k_shot` of them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSupportPool {
    pub class_id: ClassId,
    pub candidates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub k_shot: usize,
    pub classes: Vec<ClassSupportPool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileChecksum {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub base_classes: Vec<ClassId>,
    pub stages: Vec<StagePlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub world: Option<SyntheticWorldSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<SynthParams>,
    pub scenes: Vec<SceneRecord>,
    #[serde(default)]
    pub files: Vec<FileChecksum>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).at_path(path)?))
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).at_path(path)?;
        let m: Manifest = serde_json::from_slice(&bytes).at_path(path)?;
        if m.version != MANIFEST_VERSION {
            return Err(ScopeError::BadVersion(m.version).at(path));
        }
        Ok(m)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn scenes_with_role(&self, role: SceneRole) -> impl Iterator<Item = &SceneRecord> {
        self.scenes.iter().filter(move |s| s.role == role)
    }

    pub fn scene(&self, scene_id: &str) -> Option<&SceneRecord> {
        self.scenes.iter().find(|s| s.scene_id == scene_id)
    }

    /// Draw the concrete K-shot schedule.
    ///
    /// Each class takes `k_override.unwrap_or(stage.k_shot)` supports from its pool. When the
    /// pool holds more candidates than needed, the draw is a seeded shuffle keyed by
    /// `(seed, class_id)`, so different seeds give different support sets.
    pub fn resolve_schedule(&self, k_override: Option<usize>, seed: u64) -> Result<StageSchedule> {
        let mut stages = Vec::with_capacity(self.stages.len());
        for plan in &self.stages {
            let k = k_override.unwrap_or(plan.k_shot);
            if k == 0 {
                return Err(ScopeError::Config("K must be >= 1".into()));
            }
            let mut classes = Vec::with_capacity(plan.classes.len());
            for pool in &plan.classes {
                if pool.candidates.len() < k {
                    return Err(ScopeError::ShotCountMismatch {
                        class_id: pool.class_id,
                        expected: k,
                        found: pool.candidates.len(),
                    });
                }
                let supports = if pool.candidates.len() == k {
                    pool.candidates.clone()
                } else {
                    let mut c = pool.candidates.clone();
                    let mut rng = ChaCha8Rng::seed_from_u64(keyed_seed(
                        seed,
                        "support",
                        pool.class_id as u64,
                    ));
                    c.shuffle(&mut rng);
                    c.truncate(k);
                    c
                };
                for s in &supports {
                    if self.scene(s).is_none() {
                        return Err(ScopeError::Config(format!(
                            "support scene {s} for class {} is not in the manifest",
                            pool.class_id
                        )));
                    }
                }
                classes.push(ClassSupport {
                    class_id: pool.class_id,
                    supports,
                });
            }
            stages.push(IncrementalStage { k_shot: k, classes });
        }
        let schedule = StageSchedule {
            base_classes: self.base_classes.clone(),
            stages,
        };
        schedule.validate()?;
        Ok(schedule)
    }

    /// Re-hash every listed file under `root` and report mismatches.
    pub fn verify_checksums(&self, root: &Path) -> Result<Vec<PathBuf>> {
        let mut bad = Vec::new();
        for f in &self.files {
            if sha256_file(&root.join(&f.path))? != f.sha256 {
                bad.push(f.path.clone());
            }
        }
        Ok(bad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(pool: usize) -> Manifest {
        let candidates: Vec<String> = (0..pool).map(|i| format!("sup{i}")).collect();
        Manifest {
            version: MANIFEST_VERSION,
            seed: 0,
            base_classes: vec![0],
            stages: vec![StagePlan {
                k_shot: 2,
                classes: vec![ClassSupportPool {
                    class_id: 1,
                    candidates: candidates.clone(),
                }],
            }],
            world: None,
            params: None,
            scenes: candidates
                .iter()
                .map(|c| SceneRecord {
                    scene_id: c.clone(),
                    role: SceneRole::Support,
                    scene: PathBuf::from(format!("{c}.scnb")),
                    masks: None,
                    embeddings: None,
                    hidden_labels: None,
                })
                .collect(),
            files: vec![],
        }
    }

    #[test]
    fn exact_pool_is_taken_in_order() {
        let s = manifest(2).resolve_schedule(None, 99).unwrap();
        assert_eq!(s.stages[0].classes[0].supports, vec!["sup0", "sup1"]);
    }

    #[test]
    fn larger_pool_resamples_per_seed() {
        let m = manifest(10);
        let a = m.resolve_schedule(None, 1).unwrap();
        let b = m.resolve_schedule(None, 1).unwrap();
        assert_eq!(a, b);
        let differs = (2..20).any(|s| m.resolve_schedule(None, s).unwrap() != a);
        assert!(differs);
        let k5 = m.resolve_schedule(Some(5), 1).unwrap();
        assert_eq!(k5.stages[0].classes[0].supports.len(), 5);
        assert!(m.resolve_schedule(Some(11), 1).is_err());
    }

    #[test]
    fn json_round_trip() {
        let m = manifest(3);
        let back: Manifest = serde_json::from_slice(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
