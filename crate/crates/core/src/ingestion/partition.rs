//! Block partitioning of raw scenes into fixed-size samples.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, ScopeError};
use crate::rng::mix_seed;
use crate::types::PointCloudScene;

pub const DEFAULT_BLOCK_SIZE_M: f64 = 1.0;
pub const DEFAULT_SAMPLE_COUNT: usize = 2048;

/// Split `raw` into non-overlapping `block_size_m` squares on the xy-plane.
///
/// The grid is anchored at the scene's xy minimum and blocks are emitted
/// row-major (y outer, x inner), skipping empty ones. Each block yields exactly
/// `sample_count` points: a seeded permutation when the block is large enough,
/// otherwise every point once plus seeded uniform draws with replacement.
/// Three block-normalized coordinates are appended: x and y relative to the
/// block origin, z relative to the scene's z range.
pub fn partition_scene(
    raw: &PointCloudScene,
    block_size_m: f64,
    sample_count: usize,
    seed: u64,
) -> Result<Vec<PointCloudScene>> {
    if !(block_size_m > 0.0 && block_size_m.is_finite()) {
        return Err(ScopeError::InvalidParam(format!(
            "block size {block_size_m} must be positive"
        )));
    }
    if sample_count == 0 {
        return Err(ScopeError::InvalidParam("sample count must be >= 1".into()));
    }
    let m = raw.num_points();
    if m == 0 {
        return Err(ScopeError::EmptyScene);
    }

    let coord = |i: usize, c: usize| raw.point(i)[c] as f64;
    let (mut xmin, mut ymin, mut zmin, mut zmax) = (f64::MAX, f64::MAX, f64::MAX, f64::MIN);
    for i in 0..m {
        xmin = xmin.min(coord(i, 0));
        ymin = ymin.min(coord(i, 1));
        zmin = zmin.min(coord(i, 2));
        zmax = zmax.max(coord(i, 2));
    }
    let zrange = zmax - zmin;

    let mut blocks: BTreeMap<(u64, u64), Vec<usize>> = BTreeMap::new();
    for i in 0..m {
        let bx = ((coord(i, 0) - xmin) / block_size_m).floor() as u64;
        let by = ((coord(i, 1) - ymin) / block_size_m).floor() as u64;
        blocks.entry((by, bx)).or_default().push(i);
    }

    let d0 = raw.dim();
    let mut out = Vec::with_capacity(blocks.len());
    for (block_no, ((by, bx), members)) in blocks.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, block_no as u64));
        let mut chosen = members.clone();
        chosen.shuffle(&mut rng);
        if chosen.len() >= sample_count {
            chosen.truncate(sample_count);
        } else {
            while chosen.len() < sample_count {
                chosen.push(members[rng.random_range(0..members.len())]);
            }
        }

        let x0 = xmin + bx as f64 * block_size_m;
        let y0 = ymin + by as f64 * block_size_m;
        let mut points = Vec::with_capacity(sample_count * (d0 + 3));
        let mut labels = Vec::with_capacity(sample_count);
        for &i in &chosen {
            points.extend_from_slice(raw.point(i));
            let nx = ((coord(i, 0) - x0) / block_size_m).clamp(0.0, 1.0);
            let ny = ((coord(i, 1) - y0) / block_size_m).clamp(0.0, 1.0);
            let nz = if zrange > 0.0 { (coord(i, 2) - zmin) / zrange } else { 0.0 };
            points.extend_from_slice(&[nx as f32, ny as f32, nz as f32]);
            labels.push(raw.labels()[i]);
        }
        out.push(PointCloudScene::new(
            format!("{}_blk{by}x{bx}", raw.scene_id),
            points,
            d0 + 3,
            labels,
        )?);
    }
    Ok(out)
}
