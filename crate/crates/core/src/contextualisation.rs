//! Scene contextualisation: mine confident background pseudo-instances into the
//! frozen instance prototype bank.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScopeError};
use crate::primitives::pool_instance;
use crate::types::{EmbeddingMatrix, HyperParams, InstanceMask, PointCloudScene, PrototypeBank, BACKGROUND};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterCriteria {
    pub tau: f64,
    /// Minimum fraction of a mask's points that must be background-labelled.
    pub bg_overlap: f64,
}

impl Default for FilterCriteria {
    fn default() -> Self {
        Self {
            tau: crate::types::DEFAULT_TAU,
            bg_overlap: 1.0,
        }
    }
}

impl From<&HyperParams> for FilterCriteria {
    fn from(hp: &HyperParams) -> Self {
        Self {
            tau: hp.tau,
            bg_overlap: hp.bg_overlap,
        }
    }
}

impl FilterCriteria {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(ScopeError::InvalidParam(format!("tau {} outside [0, 1]", self.tau)));
        }
        if !(self.bg_overlap > 0.0 && self.bg_overlap <= 1.0) {
            return Err(ScopeError::InvalidParam(format!(
                "bg_overlap {} outside (0, 1]",
                self.bg_overlap
            )));
        }
        Ok(())
    }

    pub fn accepts(&self, scene: &PointCloudScene, mask: &InstanceMask) -> bool {
        let total = mask.count();
        if total == 0 || (mask.confidence as f64) <= self.tau {
            return false;
        }
        let labels = scene.labels();
        let bg = mask
            .selection
            .iter_ones()
            .filter(|&i| labels[i] == BACKGROUND)
            .count();
        bg as f64 >= self.bg_overlap * total as f64
    }
}

/// Keep masks with confidence strictly above `tau` whose background fraction reaches
/// `bg_overlap`, in input order. Empty masks are always dropped.
pub fn filter_masks(
    scene: &PointCloudScene,
    masks: &[InstanceMask],
    crit: &FilterCriteria,
) -> Result<Vec<InstanceMask>> {
    crit.validate()?;
    for m in masks {
        if m.len() != scene.num_points() {
            return Err(ScopeError::DimMismatch {
                what: "mask length",
                expected: scene.num_points(),
                found: m.len(),
            });
        }
    }
    Ok(masks
        .iter()
        .filter(|m| crit.accepts(scene, m))
        .cloned()
        .collect())
}

/// One base scene's inputs to bank construction.
#[derive(Debug, Clone, Copy)]
pub struct ContextInput<'a> {
    pub scene: &'a PointCloudScene,
    pub embeddings: &'a EmbeddingMatrix,
    pub masks: &'a [InstanceMask],
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankBuildStats {
    pub scenes: usize,
    pub masks_seen: usize,
    pub masks_retained: usize,
}

/// Pool every retained mask into a frozen bank, in scene-then-mask order.
pub fn build_ipb(inputs: &[ContextInput<'_>], crit: &FilterCriteria) -> Result<PrototypeBank> {
    build_ipb_with_stats(inputs, crit).map(|(bank, _)| bank)
}

pub fn build_ipb_with_stats(
    inputs: &[ContextInput<'_>],
    crit: &FilterCriteria,
) -> Result<(PrototypeBank, BankBuildStats)> {
    crit.validate()?;
    let dim = match inputs.first() {
        Some(first) => first.embeddings.dim(),
        None => return Ok((PrototypeBank::new(0).freeze(), BankBuildStats::default())),
    };
    // Pool per scene in parallel; the ordered collect keeps manifest order.
    let pooled = inputs
        .par_iter()
        .map(|input| {
            if input.embeddings.rows() != input.scene.num_points() {
                return Err(ScopeError::DimMismatch {
                    what: "embedding rows vs scene points",
                    expected: input.scene.num_points(),
                    found: input.embeddings.rows(),
                });
            }
            if input.embeddings.dim() != dim {
                return Err(ScopeError::DimMismatch {
                    what: "embedding dimension",
                    expected: dim,
                    found: input.embeddings.dim(),
                });
            }
            filter_masks(input.scene, input.masks, crit)?
                .iter()
                .map(|m| pool_instance(input.embeddings, m))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut bank = PrototypeBank::new(dim);
    let mut stats = BankBuildStats {
        scenes: inputs.len(),
        masks_seen: inputs.iter().map(|i| i.masks.len()).sum(),
        masks_retained: 0,
    };
    for protos in pooled {
        for p in protos {
            bank.push(p)?;
            stats.masks_retained += 1;
        }
    }
    Ok((bank.freeze(), stats))
}
