//! Domain types shared by every stage of the pipeline.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use bitvec::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScopeError};

/// Label value for background / unannotated points.
pub const BACKGROUND: i32 = -1;

/// Class identifier. Non-negative for real classes.
pub type ClassId = i32;

/// A point cloud with per-point features and labels.
///
/// `points` is row-major `num_points × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudScene {
    pub scene_id: String,
    points: Vec<f32>,
    dim: usize,
    labels: Vec<i32>,
}

impl PointCloudScene {
    pub fn new(
        scene_id: impl Into<String>,
        points: Vec<f32>,
        dim: usize,
        labels: Vec<i32>,
    ) -> Result<Self> {
        if dim < 3 {
            return Err(ScopeError::InvalidParam(format!(
                "point feature dimension must be >= 3, got {dim}"
            )));
        }
        if points.is_empty() {
            return Err(ScopeError::EmptyScene);
        }
        if !points.len().is_multiple_of(dim) {
            return Err(ScopeError::DimMismatch {
                what: "point buffer",
                expected: (points.len() / dim + 1) * dim,
                found: points.len(),
            });
        }
        let m = points.len() / dim;
        if labels.len() != m {
            return Err(ScopeError::DimMismatch {
                what: "scene labels",
                expected: m,
                found: labels.len(),
            });
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(ScopeError::NonFiniteValue("scene points"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l < BACKGROUND) {
            return Err(ScopeError::UnknownClass(bad));
        }
        Ok(Self {
            scene_id: scene_id.into(),
            points,
            dim,
            labels,
        })
    }

    pub fn num_points(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f32] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> &[f32] {
        &self.points
    }

    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    pub fn has_labels(&self) -> bool {
        self.labels.iter().any(|&l| l != BACKGROUND)
    }
}

/// Point-wise embeddings for one scene, row-major `rows × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub scene_id: String,
    data: Vec<f32>,
    rows: usize,
    dim: usize,
}

impl EmbeddingMatrix {
    pub fn new(scene_id: impl Into<String>, data: Vec<f32>, rows: usize, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(ScopeError::InvalidParam("embedding dimension must be >= 1".into()));
        }
        if data.len() != rows * dim {
            return Err(ScopeError::DimMismatch {
                what: "embedding buffer",
                expected: rows * dim,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ScopeError::NonFiniteValue("embeddings"));
        }
        Ok(Self {
            scene_id: scene_id.into(),
            data,
            rows,
            dim,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Multiply every entry by `s`.
    pub fn scaled(&self, s: f32) -> Self {
        Self {
            scene_id: self.scene_id.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
            rows: self.rows,
            dim: self.dim,
        }
    }
}

/// Binary point selection with a confidence score.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMask {
    pub selection: BitVec<u8, Lsb0>,
    pub confidence: f32,
    pub mask_index: u32,
}

impl InstanceMask {
    pub fn new(selection: BitVec<u8, Lsb0>, confidence: f32, mask_index: u32) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(ScopeError::ConfidenceOutOfRange(confidence));
        }
        Ok(Self {
            selection,
            confidence,
            mask_index,
        })
    }

    /// Build a mask of length `len` selecting `indices`.
    pub fn from_indices(
        len: usize,
        indices: impl IntoIterator<Item = usize>,
        confidence: f32,
        mask_index: u32,
    ) -> Result<Self> {
        let mut selection = bitvec![u8, Lsb0; 0; len];
        for i in indices {
            if i >= len {
                return Err(ScopeError::DimMismatch {
                    what: "mask index",
                    expected: len,
                    found: i,
                });
            }
            selection.set(i, true);
        }
        Self::new(selection, confidence, mask_index)
    }

    pub fn len(&self) -> usize {
        self.selection.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selection.is_empty()
    }

    pub fn count(&self) -> usize {
        self.selection.count_ones()
    }
}

/// Where a prototype came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Base(ClassId),
    FewShot { class_id: ClassId, stage: usize },
    Bank { scene_id: String, mask_index: u32 },
    Enriched { class_id: ClassId, stage: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub vector: Vec<f32>,
    pub provenance: Provenance,
}

impl Prototype {
    pub fn new(vector: Vec<f32>, provenance: Provenance) -> Self {
        Self { vector, provenance }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// The instance prototype bank: pooled background pseudo-instances.
///
/// Entries keep ingestion order. After [`PrototypeBank::freeze`] the bank rejects
/// every mutation.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    prototypes: Vec<Prototype>,
    dim: usize,
    frozen: bool,
}

impl PrototypeBank {
    pub fn new(dim: usize) -> Self {
        Self {
            prototypes: Vec::new(),
            dim,
            frozen: false,
        }
    }

    pub fn push(&mut self, proto: Prototype) -> Result<()> {
        if self.frozen {
            return Err(ScopeError::BankFrozen);
        }
        if !matches!(proto.provenance, Provenance::Bank { .. }) {
            return Err(ScopeError::InvalidParam(
                "bank entries must carry bank provenance".into(),
            ));
        }
        if proto.dim() != self.dim {
            return Err(ScopeError::DimMismatch {
                what: "bank prototype",
                expected: self.dim,
                found: proto.dim(),
            });
        }
        self.prototypes.push(proto);
        Ok(())
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Prototype> {
        self.prototypes.get(index)
    }

    pub fn prototypes(&self) -> &[Prototype] {
        &self.prototypes
    }

    /// Approximate in-memory footprint of the stored vectors and provenance.
    pub fn storage_bytes(&self) -> usize {
        self.prototypes
            .iter()
            .map(|p| {
                p.vector.len() * 4
                    + match &p.provenance {
                        Provenance::Bank { scene_id, .. } => scene_id.len() + 8,
                        _ => 0,
                    }
            })
            .sum()
    }
}

/// The unified classifier: one prototype row per known class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierMatrix {
    rows: Vec<(ClassId, Prototype)>,
    stage_boundaries: BTreeMap<usize, Range<usize>>,
    dim: usize,
}

impl ClassifierMatrix {
    pub fn new(dim: usize) -> Self {
        Self {
            rows: Vec::new(),
            stage_boundaries: BTreeMap::new(),
            dim,
        }
    }

    /// Stage-0 classifier from base prototypes, in the given order.
    pub fn from_base(dim: usize, base: Vec<(ClassId, Prototype)>) -> Result<Self> {
        let mut c = Self::new(dim);
        c.append_stage(0, base)?;
        Ok(c)
    }

    /// Append a block of rows for `stage`. Existing rows are never touched.
    pub fn append_stage(&mut self, stage: usize, rows: Vec<(ClassId, Prototype)>) -> Result<()> {
        if let Some((&last, _)) = self.stage_boundaries.iter().next_back() {
            if stage <= last {
                return Err(ScopeError::InvalidParam(format!(
                    "stage {stage} does not follow recorded stage {last}"
                )));
            }
        }
        let mut seen: BTreeSet<ClassId> = self.rows.iter().map(|(c, _)| *c).collect();
        for (class_id, proto) in &rows {
            if !seen.insert(*class_id) {
                return Err(ScopeError::DuplicateClass(*class_id));
            }
            if proto.dim() != self.dim {
                return Err(ScopeError::DimMismatch {
                    what: "classifier row",
                    expected: self.dim,
                    found: proto.dim(),
                });
            }
        }
        let start = self.rows.len();
        self.rows.extend(rows);
        self.stage_boundaries.insert(stage, start..self.rows.len());
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[(ClassId, Prototype)] {
        &self.rows
    }

    pub fn class_ids(&self) -> Vec<ClassId> {
        self.rows.iter().map(|(c, _)| *c).collect()
    }

    pub fn contains(&self, class_id: ClassId) -> bool {
        self.rows.iter().any(|(c, _)| *c == class_id)
    }

    pub fn stage_rows(&self, stage: usize) -> Option<&[(ClassId, Prototype)]> {
        self.stage_boundaries
            .get(&stage)
            .map(|r| &self.rows[r.clone()])
    }

    pub fn stage_boundaries(&self) -> &BTreeMap<usize, Range<usize>> {
        &self.stage_boundaries
    }
}

/// Support references for one novel class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSupport {
    pub class_id: ClassId,
    pub supports: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncrementalStage {
    pub k_shot: usize,
    pub classes: Vec<ClassSupport>,
}

impl IncrementalStage {
    pub fn class_ids(&self) -> Vec<ClassId> {
        self.classes.iter().map(|c| c.class_id).collect()
    }
}

/// Ordered class-introduction plan: base classes at stage 0, then novel stages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub base_classes: Vec<ClassId>,
    pub stages: Vec<IncrementalStage>,
}

impl StageSchedule {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &c in &self.base_classes {
            if c < 0 {
                return Err(ScopeError::Config(format!("class id {c} is negative")));
            }
            if !seen.insert(c) {
                return Err(ScopeError::Config(format!("class {c} appears twice in the schedule")));
            }
        }
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.k_shot == 0 {
                return Err(ScopeError::Config(format!("stage {} has K = 0", i + 1)));
            }
            for cs in &stage.classes {
                if cs.class_id < 0 {
                    return Err(ScopeError::Config(format!("class id {} is negative", cs.class_id)));
                }
                if !seen.insert(cs.class_id) {
                    return Err(ScopeError::Config(format!(
                        "class {} appears twice in the schedule",
                        cs.class_id
                    )));
                }
                if cs.supports.len() != stage.k_shot {
                    return Err(ScopeError::ShotCountMismatch {
                        class_id: cs.class_id,
                        expected: stage.k_shot,
                        found: cs.supports.len(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Number of incremental stages `T`.
    pub fn num_increments(&self) -> usize {
        self.stages.len()
    }

    /// Novel classes known after stage `t` (empty at stage 0).
    pub fn novel_classes_through(&self, t: usize) -> Vec<ClassId> {
        self.stages
            .iter()
            .take(t)
            .flat_map(|s| s.class_ids())
            .collect()
    }

    pub fn known_classes_through(&self, t: usize) -> Vec<ClassId> {
        let mut all = self.base_classes.clone();
        all.extend(self.novel_classes_through(t));
        all
    }

    pub fn all_classes(&self) -> Vec<ClassId> {
        self.known_classes_through(self.stages.len())
    }
}

/// Pipeline knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    pub tau: f64,
    pub top_r: usize,
    pub lambda: f64,
    pub bg_overlap: f64,
    pub norm_epsilon: f64,
}

pub const DEFAULT_TAU: f64 = 0.75;
pub const DEFAULT_TOP_R: usize = 50;
pub const DEFAULT_LAMBDA: f64 = 0.5;
pub const DEFAULT_NORM_EPSILON: f64 = 1e-12;

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            top_r: DEFAULT_TOP_R,
            lambda: DEFAULT_LAMBDA,
            bg_overlap: 1.0,
            norm_epsilon: DEFAULT_NORM_EPSILON,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(ScopeError::InvalidParam(format!("tau {} outside [0, 1]", self.tau)));
        }
        if self.top_r == 0 {
            return Err(ScopeError::InvalidParam("top_r must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(ScopeError::InvalidParam(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.bg_overlap > 0.0 && self.bg_overlap <= 1.0) {
            return Err(ScopeError::InvalidParam(format!(
                "bg_overlap {} outside (0, 1]",
                self.bg_overlap
            )));
        }
        if !(self.norm_epsilon > 0.0 && self.norm_epsilon.is_finite()) {
            return Err(ScopeError::InvalidParam("norm_epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank_proto(v: Vec<f32>) -> Prototype {
        Prototype::new(
            v,
            Provenance::Bank {
                scene_id: "s".into(),
                mask_index: 0,
            },
        )
    }

    #[test]
    fn frozen_bank_rejects_push() {
        let mut bank = PrototypeBank::new(2);
        bank.push(bank_proto(vec![1.0, 0.0])).unwrap();
        let mut bank = bank.freeze();
        assert!(matches!(bank.push(bank_proto(vec![0.0, 1.0])), Err(ScopeError::BankFrozen)));
        assert_eq!(bank.len(), 1);
    }

    #[test]
    fn bank_rejects_wrong_dim() {
        let mut bank = PrototypeBank::new(3);
        assert!(matches!(
            bank.push(bank_proto(vec![1.0])),
            Err(ScopeError::DimMismatch { .. })
        ));
    }

    #[test]
    fn classifier_rejects_duplicates() {
        let p = Prototype::new(vec![1.0], Provenance::Base(0));
        let mut c = ClassifierMatrix::from_base(1, vec![(0, p.clone())]).unwrap();
        assert!(matches!(
            c.append_stage(1, vec![(0, p)]),
            Err(ScopeError::DuplicateClass(0))
        ));
    }

    #[test]
    fn schedule_validation() {
        let mut s = StageSchedule {
            base_classes: vec![0, 1],
            stages: vec![IncrementalStage {
                k_shot: 1,
                classes: vec![ClassSupport {
                    class_id: 2,
                    supports: vec!["a".into()],
                }],
            }],
        };
        s.validate().unwrap();
        assert_eq!(s.known_classes_through(0), vec![0, 1]);
        assert_eq!(s.known_classes_through(1), vec![0, 1, 2]);
        s.stages[0].classes[0].class_id = 1;
        assert!(s.validate().is_err());
        s.stages[0].classes[0].class_id = 2;
        s.stages[0].k_shot = 2;
        assert!(matches!(s.validate(), Err(ScopeError::ShotCountMismatch { .. })));
    }

    #[test]
    fn hyperparam_ranges() {
        HyperParams::default().validate().unwrap();
        let bad = HyperParams {
            tau: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = HyperParams {
            bg_overlap: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn scene_rejects_nan() {
        assert!(matches!(
            PointCloudScene::new("x", vec![0.0, f32::NAN, 0.0], 3, vec![-1]),
            Err(ScopeError::NonFiniteValue(_))
        ));
    }
}
