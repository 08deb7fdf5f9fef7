//! Incremental class registration and point-wise prediction.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScopeError};
use crate::primitives::{add_row, attention_weights, cosine, finish_mean, l2_normalize_f64, masked_mean_by};
use crate::types::{
    ClassId, ClassifierMatrix, EmbeddingMatrix, HyperParams, Prototype, PrototypeBank, Provenance,
};

/// One support shot: embeddings plus the labels of the same scene.
pub type Shot<'a> = (&'a EmbeddingMatrix, &'a [i32]);

/// Top-R bank entries for one class prototype.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub class_id: ClassId,
    /// `(bank_index, similarity)`, similarity descending, ties by ascending index.
    pub entries: Vec<(usize, f64)>,
    pub requested_r: usize,
    pub effective_r: usize,
}

impl RetrievalResult {
    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|(i, _)| *i).collect()
    }
}

fn check_shot_dims(shot: &Shot<'_>) -> Result<()> {
    if shot.0.rows() != shot.1.len() {
        return Err(ScopeError::DimMismatch {
            what: "support labels vs embedding rows",
            expected: shot.0.rows(),
            found: shot.1.len(),
        });
    }
    Ok(())
}

/// Average over shots of the per-shot class mean.
pub fn fewshot_prototype(
    class_id: ClassId,
    stage: usize,
    shots: &[Shot<'_>],
    k_shot: usize,
) -> Result<Prototype> {
    if shots.len() != k_shot || k_shot == 0 {
        return Err(ScopeError::ShotCountMismatch {
            class_id,
            expected: k_shot,
            found: shots.len(),
        });
    }
    let dim = shots[0].0.dim();
    let mut acc = vec![0f64; dim];
    for shot in shots {
        check_shot_dims(shot)?;
        if shot.0.dim() != dim {
            return Err(ScopeError::DimMismatch {
                what: "support embedding dimension",
                expected: dim,
                found: shot.0.dim(),
            });
        }
        let labels = shot.1;
        let mean = masked_mean_by(shot.0, |i| labels[i] == class_id).map_err(|e| match e {
            ScopeError::EmptyMask => ScopeError::EmptyClassSupport(class_id),
            other => other,
        })?;
        add_row(&mut acc, &mean);
    }
    Ok(Prototype::new(
        finish_mean(&acc, k_shot),
        Provenance::FewShot { class_id, stage },
    ))
}

fn by_similarity(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Top-`min(R, |bank|)` bank entries by cosine similarity to `query`.
pub fn retrieve_context(
    class_id: ClassId,
    query: &[f32],
    bank: &PrototypeBank,
    top_r: usize,
    epsilon: f64,
) -> Result<RetrievalResult> {
    if top_r == 0 {
        return Err(ScopeError::InvalidParam("R must be >= 1".into()));
    }
    if !bank.is_frozen() {
        return Err(ScopeError::InvalidParam("retrieval requires a frozen bank".into()));
    }
    if bank.is_empty() {
        return Ok(RetrievalResult {
            class_id,
            entries: Vec::new(),
            requested_r: top_r,
            effective_r: 0,
        });
    }
    if query.len() != bank.dim() {
        return Err(ScopeError::DimMismatch {
            what: "query vs bank dimension",
            expected: bank.dim(),
            found: query.len(),
        });
    }
    let qn = crate::primitives::l2_norm(query);
    if qn < epsilon {
        return Err(ScopeError::DegenerateVector {
            norm: qn,
            epsilon,
        });
    }
    let mut sims = bank
        .prototypes()
        .iter()
        .enumerate()
        .map(|(b, p)| Ok((b, cosine(query, &p.vector, epsilon)?)))
        .collect::<Result<Vec<_>>>()?;
    let r = top_r.min(sims.len());
    if r < sims.len() {
        sims.select_nth_unstable_by(r - 1, by_similarity);
        sims.truncate(r);
    }
    sims.sort_unstable_by(by_similarity);
    Ok(RetrievalResult {
        class_id,
        entries: sims,
        requested_r: top_r,
        effective_r: r,
    })
}

/// Attention-enriched prototype: `lambda * p + (1 - lambda) * h`.
///
/// `h` is the softmax-weighted sum of the unit-normalized context vectors, with the
/// unit-normalized `p` as query. An empty context returns `p` unchanged.
pub fn enrich<C: AsRef<[f32]>>(
    p: &Prototype,
    context: &[C],
    lambda: f64,
    dim: usize,
    epsilon: f64,
) -> Result<Prototype> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(ScopeError::InvalidParam(format!("lambda {lambda} outside [0, 1]")));
    }
    if p.dim() != dim {
        return Err(ScopeError::DimMismatch {
            what: "prototype dimension",
            expected: dim,
            found: p.dim(),
        });
    }
    if context.is_empty() {
        return Ok(p.clone());
    }
    let (class_id, stage) = match p.provenance {
        Provenance::FewShot { class_id, stage } | Provenance::Enriched { class_id, stage } => {
            (class_id, stage)
        }
        Provenance::Base(c) => (c, 0),
        Provenance::Bank { .. } => {
            return Err(ScopeError::InvalidParam("cannot enrich a bank prototype".into()))
        }
    };
    let query = l2_normalize_f64(&p.vector, epsilon)?;
    let keys = context
        .iter()
        .map(|c| {
            let c = c.as_ref();
            if c.len() != dim {
                return Err(ScopeError::DimMismatch {
                    what: "context dimension",
                    expected: dim,
                    found: c.len(),
                });
            }
            l2_normalize_f64(c, epsilon)
        })
        .collect::<Result<Vec<_>>>()?;
    let weights = attention_weights(&query, &keys, dim)?;
    let provenance = Provenance::Enriched { class_id, stage };
    if lambda == 1.0 {
        return Ok(Prototype::new(p.vector.clone(), provenance));
    }
    let mut h = vec![0f64; dim];
    for (w, k) in weights.iter().zip(&keys) {
        for (acc, v) in h.iter_mut().zip(k) {
            *acc += w * v;
        }
    }
    let vector = p
        .vector
        .iter()
        .zip(&h)
        .map(|(&pv, &hv)| (lambda * pv as f64 + (1.0 - lambda) * hv) as f32)
        .collect();
    Ok(Prototype::new(vector, provenance))
}

/// Per-class mean over every labelled point of every base scene.
pub fn base_prototypes(base_data: &[Shot<'_>], base_ids: &[ClassId]) -> Result<Vec<Prototype>> {
    let dim = base_data
        .first()
        .map(|s| s.0.dim())
        .ok_or_else(|| ScopeError::EmptyClassSupport(base_ids.first().copied().unwrap_or(-1)))?;
    let slot: BTreeMap<ClassId, usize> = base_ids.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    if slot.len() != base_ids.len() {
        return Err(ScopeError::Config("duplicate base class id".into()));
    }
    let mut acc = vec![vec![0f64; dim]; base_ids.len()];
    let mut counts = vec![0usize; base_ids.len()];
    for shot in base_data {
        check_shot_dims(shot)?;
        if shot.0.dim() != dim {
            return Err(ScopeError::DimMismatch {
                what: "base embedding dimension",
                expected: dim,
                found: shot.0.dim(),
            });
        }
        for (i, label) in shot.1.iter().enumerate() {
            if let Some(&k) = slot.get(label) {
                add_row(&mut acc[k], shot.0.row(i));
                counts[k] += 1;
            }
        }
    }
    base_ids
        .iter()
        .enumerate()
        .map(|(k, &c)| {
            if counts[k] == 0 {
                return Err(ScopeError::EmptyClassSupport(c));
            }
            Ok(Prototype::new(finish_mean(&acc[k], counts[k]), Provenance::Base(c)))
        })
        .collect()
}

/// Support data for one novel class of a stage.
#[derive(Debug, Clone)]
pub struct NovelClassInput<'a> {
    pub class_id: ClassId,
    pub shots: Vec<Shot<'a>>,
}

/// Diagnostics of one class registration.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassRegistration {
    pub class_id: ClassId,
    pub fewshot: Prototype,
    pub retrieval: RetrievalResult,
    pub enriched: Prototype,
}

/// Append enriched rows for every class of `stage`, in declared order.
pub fn register_stage(
    classifier: &ClassifierMatrix,
    stage: usize,
    classes: &[NovelClassInput<'_>],
    k_shot: usize,
    bank: &PrototypeBank,
    hp: &HyperParams,
) -> Result<(ClassifierMatrix, Vec<ClassRegistration>)> {
    hp.validate()?;
    if !bank.is_frozen() {
        return Err(ScopeError::InvalidParam("registration requires a frozen bank".into()));
    }
    let mut out = classifier.clone();
    let mut rows = Vec::with_capacity(classes.len());
    let mut trace = Vec::with_capacity(classes.len());
    for input in classes {
        if out.contains(input.class_id) || rows.iter().any(|(c, _)| *c == input.class_id) {
            return Err(ScopeError::DuplicateClass(input.class_id));
        }
        let fewshot = fewshot_prototype(input.class_id, stage, &input.shots, k_shot)?;
        if fewshot.dim() != classifier.dim() {
            return Err(ScopeError::DimMismatch {
                what: "few-shot prototype vs classifier",
                expected: classifier.dim(),
                found: fewshot.dim(),
            });
        }
        let retrieval = retrieve_context(input.class_id, &fewshot.vector, bank, hp.top_r, hp.norm_epsilon)?;
        let context: Vec<&[f32]> = retrieval
            .entries
            .iter()
            .map(|(b, _)| bank.prototypes()[*b].vector.as_slice())
            .collect();
        let enriched = enrich(&fewshot, &context, hp.lambda, classifier.dim(), hp.norm_epsilon)?;
        rows.push((input.class_id, enriched.clone()));
        trace.push(ClassRegistration {
            class_id: input.class_id,
            fewshot,
            retrieval,
            enriched,
        });
    }
    out.append_stage(stage, rows)?;
    Ok((out, trace))
}

/// Arg-max of raw dot products against every classifier row; ties go to the lowest row.
pub fn predict(embedding: &EmbeddingMatrix, classifier: &ClassifierMatrix) -> Result<Vec<ClassId>> {
    if classifier.is_empty() {
        return Err(ScopeError::EmptyClassifier);
    }
    if embedding.dim() != classifier.dim() {
        return Err(ScopeError::DimMismatch {
            what: "embedding vs classifier dimension",
            expected: classifier.dim(),
            found: embedding.dim(),
        });
    }
    let dim = classifier.dim();
    let weights: Vec<f64> = classifier
        .rows()
        .iter()
        .flat_map(|(_, p)| p.vector.iter().map(|&v| v as f64))
        .collect();
    let ids = classifier.class_ids();
    let mut out = Vec::with_capacity(embedding.rows());
    let mut x = vec![0f64; dim];
    for i in 0..embedding.rows() {
        for (xd, &v) in x.iter_mut().zip(embedding.row(i)) {
            *xd = v as f64;
        }
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for (r, w) in weights.chunks_exact(dim).enumerate() {
            let mut s = 0f64;
            for d in 0..dim {
                s += x[d] * w[d];
            }
            if s > best_score {
                best_score = s;
                best = r;
            }
        }
        out.push(ids[best]);
    }
    Ok(out)
}
