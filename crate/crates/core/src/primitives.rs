//! Numeric primitives composed by the rest of the pipeline.
//!
//! Every reduction walks its input in ascending index order with `f64`
//! accumulators, so results are reproducible bit-for-bit for a fixed binary.

use crate::error::{Result, ScopeError};
use crate::types::{EmbeddingMatrix, InstanceMask, Prototype, Provenance};

/// Mean of the embedding rows selected by `mask`.
pub fn masked_mean(features: &EmbeddingMatrix, mask: &InstanceMask) -> Result<Vec<f32>> {
    if mask.len() != features.rows() {
        return Err(ScopeError::DimMismatch {
            what: "mask length",
            expected: features.rows(),
            found: mask.len(),
        });
    }
    masked_mean_by(features, |i| mask.selection[i])
}

/// Mean of the rows for which `select(i)` holds.
pub fn masked_mean_by(features: &EmbeddingMatrix, select: impl Fn(usize) -> bool) -> Result<Vec<f32>> {
    let mut acc = vec![0f64; features.dim()];
    let mut count = 0usize;
    for i in 0..features.rows() {
        if select(i) {
            add_row(&mut acc, features.row(i));
            count += 1;
        }
    }
    if count == 0 {
        return Err(ScopeError::EmptyMask);
    }
    Ok(finish_mean(&acc, count))
}

pub(crate) fn add_row(acc: &mut [f64], row: &[f32]) {
    for (a, &v) in acc.iter_mut().zip(row) {
        *a += v as f64;
    }
}

pub(crate) fn finish_mean(acc: &[f64], count: usize) -> Vec<f32> {
    let n = count as f64;
    acc.iter().map(|&s| (s / n) as f32).collect()
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn l2_norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

fn check_norm(norm: f64, epsilon: f64) -> Result<()> {
    if norm < epsilon || !norm.is_finite() {
        return Err(ScopeError::DegenerateVector { norm, epsilon });
    }
    Ok(())
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine(a: &[f32], b: &[f32], epsilon: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(ScopeError::DimMismatch {
            what: "cosine operand",
            expected: a.len(),
            found: b.len(),
        });
    }
    let na = l2_norm(a);
    let nb = l2_norm(b);
    check_norm(na, epsilon)?;
    check_norm(nb, epsilon)?;
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Unit-norm copy of `v`, kept in `f64` for downstream accumulation.
pub fn l2_normalize_f64(v: &[f32], epsilon: f64) -> Result<Vec<f64>> {
    let n = l2_norm(v);
    check_norm(n, epsilon)?;
    Ok(v.iter().map(|&x| x as f64 / n).collect())
}

pub fn l2_normalize(v: &[f32], epsilon: f64) -> Result<Vec<f32>> {
    Ok(l2_normalize_f64(v, epsilon)?
        .into_iter()
        .map(|x| x as f32)
        .collect())
}

/// Normalize a prototype, keeping its provenance.
pub fn l2_normalize_prototype(p: &Prototype, epsilon: f64) -> Result<Prototype> {
    Ok(Prototype::new(l2_normalize(&p.vector, epsilon)?, p.provenance.clone()))
}

/// Softmax over `logits` with max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Scaled dot-product attention weights of one query over `keys`.
///
/// Query and keys are expected to be unit-norm already. The scale is `1/sqrt(dim)`.
pub fn attention_weights<K: AsRef<[f64]>>(query: &[f64], keys: &[K], dim: usize) -> Result<Vec<f64>> {
    if keys.is_empty() {
        return Err(ScopeError::EmptyContext);
    }
    if dim == 0 {
        return Err(ScopeError::InvalidParam("attention dimension must be >= 1".into()));
    }
    let scale = 1.0 / (dim as f64).sqrt();
    let mut logits = Vec::with_capacity(keys.len());
    for k in keys {
        let k = k.as_ref();
        if k.len() != query.len() {
            return Err(ScopeError::DimMismatch {
                what: "attention key",
                expected: query.len(),
                found: k.len(),
            });
        }
        let d: f64 = query.iter().zip(k).map(|(a, b)| a * b).sum();
        logits.push(d * scale);
    }
    Ok(softmax(&logits))
}

/// Convenience wrapper for `f32` inputs.
pub fn attention_weights_f32<K: AsRef<[f32]>>(query: &[f32], keys: &[K], dim: usize) -> Result<Vec<f64>> {
    let q: Vec<f64> = query.iter().map(|&x| x as f64).collect();
    let ks: Vec<Vec<f64>> = keys
        .iter()
        .map(|k| k.as_ref().iter().map(|&x| x as f64).collect())
        .collect();
    attention_weights(&q, &ks, dim)
}

/// Pool a mask into a bank prototype.
pub fn pool_instance(
    features: &EmbeddingMatrix,
    mask: &InstanceMask,
) -> Result<Prototype> {
    Ok(Prototype::new(
        masked_mean(features, mask)?,
        Provenance::Bank {
            scene_id: features.scene_id.clone(),
            mask_index: mask.mask_index,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn emb(rows: &[&[f32]]) -> EmbeddingMatrix {
        let dim = rows[0].len();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        EmbeddingMatrix::new("t", data, rows.len(), dim).unwrap()
    }

    #[test]
    fn masked_mean_full_mask() {
        let f = emb(&[&[1.0, 1.0], &[3.0, 3.0]]);
        let m = InstanceMask::from_indices(2, [0, 1], 1.0, 0).unwrap();
        assert_eq!(masked_mean(&f, &m).unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn masked_mean_subset() {
        let f = emb(&[&[1.0, 0.0], &[3.0, 0.0], &[5.0, 0.0]]);
        let m = InstanceMask::from_indices(3, [0, 2], 1.0, 0).unwrap();
        assert_eq!(masked_mean(&f, &m).unwrap(), vec![3.0, 0.0]);
    }

    #[test]
    fn masked_mean_singleton_is_row() {
        let f = emb(&[&[0.1, -7.3, 2.5], &[1e-3, 4.0, 9.9]]);
        let m = InstanceMask::from_indices(2, [1], 1.0, 0).unwrap();
        assert_eq!(masked_mean(&f, &m).unwrap(), f.row(1).to_vec());
    }

    #[test]
    fn masked_mean_errors() {
        let f = emb(&[&[1.0], &[2.0]]);
        let empty = InstanceMask::from_indices(2, [], 1.0, 0).unwrap();
        assert!(matches!(masked_mean(&f, &empty), Err(ScopeError::EmptyMask)));
        let short = InstanceMask::from_indices(1, [0], 1.0, 0).unwrap();
        assert!(matches!(masked_mean(&f, &short), Err(ScopeError::DimMismatch { .. })));
    }

    #[test]
    fn cosine_examples() {
        let v = [0.3f32, -1.2, 4.0];
        assert!((cosine(&v, &v, 1e-12).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0], 1e-12).unwrap(), 0.0);
        assert!((cosine(&[1.0, 1.0], &[1.0, 0.0], 1e-12).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 0.0], 1e-12),
            Err(ScopeError::DegenerateVector { .. })
        ));
    }

    #[test]
    fn attention_examples() {
        let q = [1.0f64, 0.0];
        assert_eq!(attention_weights(&q, &[[0.6, 0.8]], 2).unwrap(), vec![1.0]);
        let w = attention_weights(&q, &[[0.5, 0.5], [0.5, -0.5]], 2).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);
        // dots {1, 0} at D = 4: softmax(0.5, 0) = 1 / (1 + e^-0.5)
        let q4 = [1.0f64, 0.0, 0.0, 0.0];
        let w = attention_weights(&q4, &[[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]], 4).unwrap();
        assert!((w[0] - 0.6225).abs() < 1e-4);
        assert!((w[1] - 0.3775).abs() < 1e-4);
        let none: [[f64; 2]; 0] = [];
        assert!(matches!(attention_weights(&q, &none, 2), Err(ScopeError::EmptyContext)));
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0], 1e-12).unwrap(), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[2.0, 0.0, 0.0], 1e-12).unwrap(), vec![1.0, 0.0, 0.0]);
        let u = [0.6f32, 0.8];
        let n = l2_normalize(&u, 1e-12).unwrap();
        assert!(n.iter().zip(&u).all(|(a, b)| (a - b).abs() < 1e-6));
        assert!(l2_normalize(&[0.0, 0.0], 1e-12).is_err());
    }

    fn vec_strategy(dim: usize) -> impl Strategy<Value = Vec<f32>> {
        proptest::collection::vec(-10.0f32..10.0, dim)
    }

    proptest! {
        #[test]
        fn full_mask_equals_column_mean(rows in 1usize..20, dim in 1usize..8, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..rows * dim).map(|_| rng.random_range(-5.0..5.0)).collect();
            let f = EmbeddingMatrix::new("p", data.clone(), rows, dim).unwrap();
            let m = InstanceMask::from_indices(rows, 0..rows, 1.0, 0).unwrap();
            let mean = masked_mean(&f, &m).unwrap();
            for d in 0..dim {
                let col: f64 = (0..rows).map(|r| data[r * dim + d] as f64).sum::<f64>() / rows as f64;
                prop_assert!((mean[d] as f64 - col).abs() <= 1e-6 * col.abs().max(1.0));
            }
        }

        #[test]
        fn masked_mean_subset_permutation(rows in 2usize..16, seed in any::<u64>()) {
            use rand::{seq::SliceRandom, Rng, SeedableRng};
            let dim = 3;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..rows * dim).map(|_| rng.random_range(-5.0..5.0)).collect();
            let sel: Vec<bool> = (0..rows).map(|i| i == 0 || rng.random_bool(0.5)).collect();
            let mut perm: Vec<usize> = (0..rows).collect();
            perm.shuffle(&mut rng);
            let pdata: Vec<f32> = perm.iter().flat_map(|&r| data[r * dim..(r + 1) * dim].to_vec()).collect();
            let a = EmbeddingMatrix::new("a", data, rows, dim).unwrap();
            let b = EmbeddingMatrix::new("b", pdata, rows, dim).unwrap();
            let ma = masked_mean_by(&a, |i| sel[i]).unwrap();
            let mb = masked_mean_by(&b, |i| sel[perm[i]]).unwrap();
            for (x, y) in ma.iter().zip(&mb) {
                prop_assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
            }
        }

        #[test]
        fn cosine_scale_invariant(a in vec_strategy(5), b in vec_strategy(5), s in 0.01f32..100.0, t in 0.01f32..100.0) {
            prop_assume!(l2_norm(&a) > 1e-3 && l2_norm(&b) > 1e-3);
            let sa: Vec<f32> = a.iter().map(|x| x * s).collect();
            let tb: Vec<f32> = b.iter().map(|x| x * t).collect();
            let c1 = cosine(&a, &b, 1e-12).unwrap();
            let c2 = cosine(&sa, &tb, 1e-12).unwrap();
            prop_assert!((c1 - c2).abs() < 1e-6);
            prop_assert!((-1.0..=1.0).contains(&c1));
        }

        #[test]
        fn attention_shift_invariant(dots in proptest::collection::vec(-5.0f64..5.0, 1..20), c in -50.0f64..50.0) {
            let w1 = softmax(&dots);
            let shifted: Vec<f64> = dots.iter().map(|d| d + c).collect();
            let w2 = softmax(&shifted);
            prop_assert!((w1.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for (x, y) in w1.iter().zip(&w2) {
                prop_assert!(*x >= 0.0);
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn normalize_idempotent(v in vec_strategy(6)) {
            prop_assume!(l2_norm(&v) > 1e-3);
            let once = l2_normalize(&v, 1e-12).unwrap();
            let twice = l2_normalize(&once, 1e-12).unwrap();
            prop_assert!((l2_norm(&once) - 1.0).abs() < 1e-6);
            for (x, y) in once.iter().zip(&twice) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
