//! Little-endian binary formats.
//!
//! | magic  | layout after `magic, version: u32 = 1`                                   |
//! |--------|--------------------------------------------------------------------------|
//! | `SCNB` | `M: u32, d0: u32, label_present: u8, M×d0 f32, [M i32 if label_present]` |
//! | `MSKB` | `M: u32, Q: u32, Q × (confidence f32, ceil(M/8) bitset bytes, LSB-first)` |
//! | `EMBB` | `M: u32, D: u32, M×D f32 row-major`                                       |
//! | `IPBB` | `count: u32, D: u32, count × (id_len u32, id UTF-8, mask_index u32, D f32)` |
//! | `LBLB` | `M: u32, M i32`                                                           |
//! | `PRDB` | `stage u32, nb u32, nb i32, nn u32, nn i32, N u32, N i32 gt, N i32 pred`   |

use std::fs;
use std::path::Path;

use bitvec::prelude::*;

use crate::error::{Result, ResultExt, ScopeError};
use crate::types::{
    ClassId, EmbeddingMatrix, InstanceMask, PointCloudScene, Prototype, PrototypeBank, Provenance,
};

pub const SCENE_MAGIC: [u8; 4] = *b"SCNB";
pub const MASK_MAGIC: [u8; 4] = *b"MSKB";
pub const EMBEDDING_MAGIC: [u8; 4] = *b"EMBB";
pub const BANK_MAGIC: [u8; 4] = *b"IPBB";
pub const LABEL_MAGIC: [u8; 4] = *b"LBLB";
pub const PREDICTION_MAGIC: [u8; 4] = *b"PRDB";
pub const FORMAT_VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(ScopeError::TruncatedFile {
            expected: u64::MAX,
            found: self.buf.len() as u64,
        })?;
        if end > self.buf.len() {
            return Err(ScopeError::TruncatedFile {
                expected: end as u64,
                found: self.buf.len() as u64,
            });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or(ScopeError::CorruptPayload("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn i32s(&mut self, n: usize) -> Result<Vec<i32>> {
        let bytes = self.take(n.checked_mul(4).ok_or(ScopeError::CorruptPayload("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn header(&mut self, magic: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4)?.try_into().unwrap();
        if found != magic {
            return Err(ScopeError::BadMagic {
                expected: magic,
                found,
            });
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(ScopeError::BadVersion(version));
        }
        Ok(())
    }

    /// Require the remaining payload to be exactly `n` bytes.
    fn expect_remaining(&self, n: u64) -> Result<()> {
        let remaining = (self.buf.len() - self.pos) as u64;
        if remaining != n {
            return Err(ScopeError::TruncatedFile {
                expected: self.pos as u64 + n,
                found: self.buf.len() as u64,
            });
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        self.expect_remaining(0)
    }
}

fn header(out: &mut Vec<u8>, magic: [u8; 4]) {
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, vs: &[f32]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_i32s(out: &mut Vec<u8>, vs: &[i32]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| ScopeError::InvalidParam(format!("{what} {n} exceeds u32")))
}

/// Write `bytes` to `path` via a sibling temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).at_path(parent)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).at_path(&tmp)?;
    fs::rename(&tmp, path).at_path(path)?;
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).at_path(path)
}

/// Scene id implied by a file name: the stem up to the first `.`.
pub fn scene_id_from_path(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.split('.').next().unwrap_or_default().to_string()
}

// --- scenes ---

/// `label_present` is written as 0 exactly when every label is background.
pub fn encode_scene(scene: &PointCloudScene) -> Result<Vec<u8>> {
    let m = scene.num_points();
    let label_present = scene.has_labels();
    let mut out = Vec::with_capacity(17 + scene.points().len() * 4 + m * 4);
    header(&mut out, SCENE_MAGIC);
    put_u32(&mut out, len_u32(m, "point count")?);
    put_u32(&mut out, len_u32(scene.dim(), "point dimension")?);
    out.push(label_present as u8);
    put_f32s(&mut out, scene.points());
    if label_present {
        put_i32s(&mut out, scene.labels());
    }
    Ok(out)
}

pub fn decode_scene(scene_id: &str, bytes: &[u8]) -> Result<PointCloudScene> {
    let mut r = Reader::new(bytes);
    r.header(SCENE_MAGIC)?;
    let m = r.u32()? as usize;
    let d0 = r.u32()? as usize;
    let flag = r.u8()?;
    if flag > 1 {
        return Err(ScopeError::CorruptPayload(format!("label flag {flag}")));
    }
    if m == 0 {
        return Err(ScopeError::EmptyScene);
    }
    if d0 < 3 {
        return Err(ScopeError::CorruptPayload(format!("d0 = {d0} < 3")));
    }
    let per_point = d0 as u64 * 4 + if flag == 1 { 4 } else { 0 };
    r.expect_remaining(m as u64 * per_point)?;
    let points = r.f32s(m * d0)?;
    let labels = if flag == 1 { r.i32s(m)? } else { vec![-1; m] };
    r.finish()?;
    if points.iter().any(|v| !v.is_finite()) {
        return Err(ScopeError::NonFiniteValue("scene points"));
    }
    PointCloudScene::new(scene_id, points, d0, labels)
}

pub fn save_scene(scene: &PointCloudScene, path: &Path) -> Result<()> {
    write_atomic(path, &encode_scene(scene)?)
}

/// Load a scene; its id is taken from the file name.
pub fn load_scene(path: &Path) -> Result<PointCloudScene> {
    load_scene_as(&scene_id_from_path(path), path)
}

pub fn load_scene_as(scene_id: &str, path: &Path) -> Result<PointCloudScene> {
    decode_scene(scene_id, &read(path)?).at_path(path)
}

// --- masks ---

pub fn encode_masks(num_points: usize, masks: &[InstanceMask]) -> Result<Vec<u8>> {
    let row = num_points.div_ceil(8);
    let mut out = Vec::with_capacity(16 + masks.len() * (4 + row));
    header(&mut out, MASK_MAGIC);
    put_u32(&mut out, len_u32(num_points, "point count")?);
    put_u32(&mut out, len_u32(masks.len(), "mask count")?);
    for mask in masks {
        if mask.len() != num_points {
            return Err(ScopeError::DimMismatch {
                what: "mask length",
                expected: num_points,
                found: mask.len(),
            });
        }
        out.extend_from_slice(&mask.confidence.to_le_bytes());
        let mut bits = mask.selection.clone();
        bits.set_uninitialized(false);
        let raw = bits.as_raw_slice();
        out.extend_from_slice(&raw[..row]);
    }
    Ok(out)
}

pub fn decode_masks(bytes: &[u8], expected_points: usize) -> Result<Vec<InstanceMask>> {
    let mut r = Reader::new(bytes);
    r.header(MASK_MAGIC)?;
    let m = r.u32()? as usize;
    let q = r.u32()? as usize;
    if m != expected_points {
        return Err(ScopeError::DimMismatch {
            what: "mask file point count",
            expected: expected_points,
            found: m,
        });
    }
    let row = m.div_ceil(8);
    r.expect_remaining(q as u64 * (4 + row as u64))?;
    let mut masks = Vec::with_capacity(q);
    for j in 0..q {
        let confidence = r.f32()?;
        if !(0.0..=1.0).contains(&confidence) {
            return Err(ScopeError::ConfidenceOutOfRange(confidence));
        }
        let raw = r.take(row)?;
        let tail_bits = row * 8 - m;
        if tail_bits > 0 && raw[row - 1] >> (8 - tail_bits) != 0 {
            return Err(ScopeError::CorruptPayload(format!(
                "mask {j} sets padding bits beyond point {m}"
            )));
        }
        let mut selection = BitVec::<u8, Lsb0>::from_slice(raw);
        selection.truncate(m);
        masks.push(InstanceMask::new(selection, confidence, j as u32)?);
    }
    r.finish()?;
    Ok(masks)
}

pub fn save_masks(num_points: usize, masks: &[InstanceMask], path: &Path) -> Result<()> {
    write_atomic(path, &encode_masks(num_points, masks)?)
}

pub fn load_masks(path: &Path, expected_points: usize) -> Result<Vec<InstanceMask>> {
    decode_masks(&read(path)?, expected_points).at_path(path)
}

// --- embeddings ---

pub fn encode_embeddings(e: &EmbeddingMatrix) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + e.data().len() * 4);
    header(&mut out, EMBEDDING_MAGIC);
    put_u32(&mut out, len_u32(e.rows(), "row count")?);
    put_u32(&mut out, len_u32(e.dim(), "embedding dimension")?);
    put_f32s(&mut out, e.data());
    Ok(out)
}

pub fn decode_embeddings(scene_id: &str, bytes: &[u8]) -> Result<EmbeddingMatrix> {
    let mut r = Reader::new(bytes);
    r.header(EMBEDDING_MAGIC)?;
    let m = r.u32()? as usize;
    let d = r.u32()? as usize;
    if d == 0 {
        return Err(ScopeError::CorruptPayload("embedding dimension 0".into()));
    }
    r.expect_remaining(m as u64 * d as u64 * 4)?;
    let data = r.f32s(m * d)?;
    r.finish()?;
    EmbeddingMatrix::new(scene_id, data, m, d)
}

pub fn save_embeddings(e: &EmbeddingMatrix, path: &Path) -> Result<()> {
    write_atomic(path, &encode_embeddings(e)?)
}

pub fn load_embeddings(scene_id: &str, path: &Path) -> Result<EmbeddingMatrix> {
    decode_embeddings(scene_id, &read(path)?).at_path(path)
}

// --- prototype bank ---

pub fn encode_bank(bank: &PrototypeBank) -> Result<Vec<u8>> {
    if !bank.is_frozen() {
        return Err(ScopeError::InvalidParam("bank must be frozen before saving".into()));
    }
    let mut out = Vec::new();
    header(&mut out, BANK_MAGIC);
    put_u32(&mut out, len_u32(bank.len(), "bank size")?);
    put_u32(&mut out, len_u32(bank.dim(), "bank dimension")?);
    for p in bank.prototypes() {
        let Provenance::Bank {
            scene_id,
            mask_index,
        } = &p.provenance
        else {
            return Err(ScopeError::Invariant("non-bank prototype in bank".into()));
        };
        put_u32(&mut out, len_u32(scene_id.len(), "scene id length")?);
        out.extend_from_slice(scene_id.as_bytes());
        put_u32(&mut out, *mask_index);
        put_f32s(&mut out, &p.vector);
    }
    Ok(out)
}

pub fn decode_bank(bytes: &[u8]) -> Result<PrototypeBank> {
    let mut r = Reader::new(bytes);
    r.header(BANK_MAGIC)?;
    let count = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let mut bank = PrototypeBank::new(dim);
    for _ in 0..count {
        let id_len = r.u32()? as usize;
        let id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|e| ScopeError::CorruptPayload(format!("scene id: {e}")))?
            .to_string();
        let mask_index = r.u32()?;
        let vector = r.f32s(dim)?;
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(ScopeError::NonFiniteValue("bank prototype"));
        }
        bank.push(Prototype::new(
            vector,
            Provenance::Bank {
                scene_id: id,
                mask_index,
            },
        ))?;
    }
    r.finish()?;
    Ok(bank.freeze())
}

pub fn save_bank(bank: &PrototypeBank, path: &Path) -> Result<()> {
    write_atomic(path, &encode_bank(bank)?)
}

pub fn load_bank(path: &Path) -> Result<PrototypeBank> {
    decode_bank(&read(path)?).at_path(path)
}

// --- label arrays ---

pub fn encode_labels(labels: &[i32]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + labels.len() * 4);
    header(&mut out, LABEL_MAGIC);
    put_u32(&mut out, len_u32(labels.len(), "label count")?);
    put_i32s(&mut out, labels);
    Ok(out)
}

pub fn decode_labels(bytes: &[u8]) -> Result<Vec<i32>> {
    let mut r = Reader::new(bytes);
    r.header(LABEL_MAGIC)?;
    let m = r.u32()? as usize;
    r.expect_remaining(m as u64 * 4)?;
    let labels = r.i32s(m)?;
    r.finish()?;
    Ok(labels)
}

pub fn save_labels(labels: &[i32], path: &Path) -> Result<()> {
    write_atomic(path, &encode_labels(labels)?)
}

pub fn load_labels(path: &Path) -> Result<Vec<i32>> {
    decode_labels(&read(path)?).at_path(path)
}

// --- stored predictions ---

/// Ground truth and predictions for one evaluated stage, concatenated over the test split.
#[derive(Debug, Clone, PartialEq)]
pub struct StagePredictions {
    pub stage: u32,
    pub base_classes: Vec<ClassId>,
    pub novel_classes: Vec<ClassId>,
    pub ground_truth: Vec<i32>,
    pub predicted: Vec<i32>,
}

pub fn encode_predictions(p: &StagePredictions) -> Result<Vec<u8>> {
    if p.ground_truth.len() != p.predicted.len() {
        return Err(ScopeError::LengthMismatch {
            gt: p.ground_truth.len(),
            pred: p.predicted.len(),
        });
    }
    let mut out = Vec::new();
    header(&mut out, PREDICTION_MAGIC);
    put_u32(&mut out, p.stage);
    put_u32(&mut out, len_u32(p.base_classes.len(), "base class count")?);
    put_i32s(&mut out, &p.base_classes);
    put_u32(&mut out, len_u32(p.novel_classes.len(), "novel class count")?);
    put_i32s(&mut out, &p.novel_classes);
    put_u32(&mut out, len_u32(p.ground_truth.len(), "point count")?);
    put_i32s(&mut out, &p.ground_truth);
    put_i32s(&mut out, &p.predicted);
    Ok(out)
}

pub fn decode_predictions(bytes: &[u8]) -> Result<StagePredictions> {
    let mut r = Reader::new(bytes);
    r.header(PREDICTION_MAGIC)?;
    let stage = r.u32()?;
    let nb = r.u32()? as usize;
    let base_classes = r.i32s(nb)?;
    let nn = r.u32()? as usize;
    let novel_classes = r.i32s(nn)?;
    let n = r.u32()? as usize;
    r.expect_remaining(n as u64 * 8)?;
    let ground_truth = r.i32s(n)?;
    let predicted = r.i32s(n)?;
    r.finish()?;
    Ok(StagePredictions {
        stage,
        base_classes,
        novel_classes,
        ground_truth,
        predicted,
    })
}

pub fn save_predictions(p: &StagePredictions, path: &Path) -> Result<()> {
    write_atomic(path, &encode_predictions(p)?)
}

pub fn load_predictions(path: &Path) -> Result<StagePredictions> {
    decode_predictions(&read(path)?).at_path(path)
}
