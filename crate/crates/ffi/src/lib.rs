//! C ABI over `scope-core`.
//!
//! Every fallible entry point returns a [`ScopeStatus`]; on failure the message is kept in a
//! thread-local slot readable with [`scope_last_error`]. Banks and classifiers are opaque
//! handles released with their `_free` functions. No function unwinds across the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use scope_core::ingestion;
use scope_core::primitives;
use scope_core::registration;
use scope_core::{
    ClassifierMatrix, EmbeddingMatrix, InstanceMask, Prototype, PrototypeBank, Provenance, ScopeError,
};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScopeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    DegenerateVector = 4,
    EmptyInput = 5,
    Io = 6,
    Format = 7,
    DuplicateClass = 8,
    Internal = 9,
}

impl From<&ScopeError> for ScopeStatus {
    fn from(e: &ScopeError) -> Self {
        match e.root() {
            ScopeError::DimMismatch { .. } | ScopeError::LengthMismatch { .. } => Self::DimensionMismatch,
            ScopeError::DegenerateVector { .. } => Self::DegenerateVector,
            ScopeError::EmptyMask
            | ScopeError::EmptyContext
            | ScopeError::EmptyScene
            | ScopeError::EmptyClassifier
            | ScopeError::EmptyRun
            | ScopeError::EmptyClassSupport(_) => Self::EmptyInput,
            ScopeError::Io(_) => Self::Io,
            ScopeError::BadMagic { .. }
            | ScopeError::BadVersion(_)
            | ScopeError::TruncatedFile { .. }
            | ScopeError::NonFiniteValue(_)
            | ScopeError::ConfidenceOutOfRange(_)
            | ScopeError::CorruptPayload(_)
            | ScopeError::Json(_) => Self::Format,
            ScopeError::DuplicateClass(_) => Self::DuplicateClass,
            ScopeError::BankFrozen | ScopeError::Invariant(_) => Self::Internal,
            _ => Self::InvalidArgument,
        }
    }
}

/// A frozen instance prototype bank.
pub struct ScopeBank {
    inner: PrototypeBank,
}

/// A classifier matrix grown stage by stage.
pub struct ScopeClassifier {
    inner: ClassifierMatrix,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
}

struct Fail(ScopeStatus, String);

impl From<ScopeError> for Fail {
    fn from(e: ScopeError) -> Self {
        Fail(ScopeStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(ScopeStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ScopeStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ScopeStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            ScopeStatus::Internal
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(ScopeStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

fn matrix(data: &[f32], rows: usize, dim: usize) -> Result<EmbeddingMatrix, Fail> {
    Ok(EmbeddingMatrix::new("ffi", data.to_vec(), rows, dim)?)
}

fn len_product(a: usize, b: usize) -> Result<usize, Fail> {
    a.checked_mul(b)
        .ok_or_else(|| Fail(ScopeStatus::InvalidArgument, "size overflow".into()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn scope_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn scope_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Harmonic mean `2bn / (b + n)`, 0 when both are 0.
#[no_mangle]
pub extern "C" fn scope_harmonic_mean(base: f64, novel: f64) -> f64 {
    scope_core::evaluation::harmonic_mean(base, novel)
}

/// Mean of the `features` rows whose `mask` byte is non-zero.
///
/// # Safety
/// `features` holds `rows * dim` floats, `mask` holds `rows` bytes and `out` has room for
/// `dim` floats.
#[no_mangle]
pub unsafe extern "C" fn scope_masked_mean(
    features: *const f32,
    rows: usize,
    dim: usize,
    mask: *const u8,
    out: *mut f32,
) -> ScopeStatus {
    guard(|| {
        let data = slice(features, len_product(rows, dim)?, "features")?;
        let bits = slice(mask, rows, "mask")?;
        let out = slice_mut(out, dim, "out")?;
        let emb = matrix(data, rows, dim)?;
        let m = InstanceMask::from_indices(
            rows,
            bits.iter().enumerate().filter(|(_, &b)| b != 0).map(|(i, _)| i),
            1.0,
            0,
        )?;
        out.copy_from_slice(&primitives::masked_mean(&emb, &m)?);
        Ok(())
    })
}

/// Cosine similarity of two `dim`-vectors, written to `out`.
///
/// # Safety
/// `a` and `b` hold `dim` floats; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn scope_cosine(
    a: *const f32,
    b: *const f32,
    dim: usize,
    epsilon: f64,
    out: *mut f64,
) -> ScopeStatus {
    guard(|| {
        let a = slice(a, dim, "a")?;
        let b = slice(b, dim, "b")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = primitives::cosine(a, b, epsilon)?;
        Ok(())
    })
}

/// Build a frozen bank from `n` row-major prototypes of width `dim`.
///
/// # Safety
/// `rows` holds `n * dim` floats; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn scope_bank_from_rows(
    rows: *const f32,
    n: usize,
    dim: usize,
    out: *mut *mut ScopeBank,
) -> ScopeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if dim == 0 {
            return Err(Fail(ScopeStatus::InvalidArgument, "dim must be >= 1".into()));
        }
        let data = slice(rows, len_product(n, dim)?, "rows")?;
        let mut bank = PrototypeBank::new(dim);
        for (i, row) in data.chunks_exact(dim).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(ScopeError::NonFiniteValue("bank row").into());
            }
            bank.push(Prototype::new(
                row.to_vec(),
                Provenance::Bank {
                    scene_id: "ffi".into(),
                    mask_index: i as u32,
                },
            ))?;
        }
        *out = Box::into_raw(Box::new(ScopeBank { inner: bank.freeze() }));
        Ok(())
    })
}

/// Load an IPBB bank file.
///
/// # Safety
/// `path` is a NUL-terminated UTF-8 string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn scope_bank_load(path: *const c_char, out: *mut *mut ScopeBank) -> ScopeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let bank = ingestion::load_bank(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(ScopeBank { inner: bank }));
        Ok(())
    })
}

/// Write `bank` as an IPBB file.
///
/// # Safety
/// `bank` comes from this library; `path` is a NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn scope_bank_save(bank: *const ScopeBank, path: *const c_char) -> ScopeStatus {
    guard(|| {
        let bank = bank.as_ref().ok_or_else(|| null("bank"))?;
        ingestion::save_bank(&bank.inner, &path_arg(path)?)?;
        Ok(())
    })
}

/// Number of prototypes, 0 for a null handle.
///
/// # Safety
/// `bank` is null or comes from this library.
#[no_mangle]
pub unsafe extern "C" fn scope_bank_len(bank: *const ScopeBank) -> usize {
    bank.as_ref().map_or(0, |b| b.inner.len())
}

/// Prototype width, 0 for a null handle.
///
/// # Safety
/// `bank` is null or comes from this library.
#[no_mangle]
pub unsafe extern "C" fn scope_bank_dim(bank: *const ScopeBank) -> usize {
    bank.as_ref().map_or(0, |b| b.inner.dim())
}

/// Copy prototype `index` into `out`, which has room for `dim` floats.
///
/// # Safety
/// `bank` comes from this library; `out` holds `dim` floats.
#[no_mangle]
pub unsafe extern "C" fn scope_bank_get(
    bank: *const ScopeBank,
    index: usize,
    out: *mut f32,
    dim: usize,
) -> ScopeStatus {
    guard(|| {
        let bank = bank.as_ref().ok_or_else(|| null("bank"))?;
        if dim != bank.inner.dim() {
            return Err(ScopeError::DimMismatch {
                what: "output buffer",
                expected: bank.inner.dim(),
                found: dim,
            }
            .into());
        }
        let p = bank
            .inner
            .get(index)
            .ok_or_else(|| Fail(ScopeStatus::InvalidArgument, format!("index {index} out of range")))?;
        slice_mut(out, dim, "out")?.copy_from_slice(&p.vector);
        Ok(())
    })
}

/// Release a bank. Null is a no-op.
///
/// # Safety
/// `bank` is null or an unreleased handle from this library.
#[no_mangle]
pub unsafe extern "C" fn scope_bank_free(bank: *mut ScopeBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// Top-`min(top_r, len)` bank entries by cosine similarity to `query`, best first, ties by
/// ascending index. `indices` and `similarities` need room for `top_r` entries; `count`
/// receives the number written.
///
/// # Safety
/// `bank` comes from this library; `query` holds `dim` floats; the output buffers are
/// writable for `top_r` entries.
#[no_mangle]
pub unsafe extern "C" fn scope_retrieve(
    bank: *const ScopeBank,
    query: *const f32,
    dim: usize,
    top_r: usize,
    epsilon: f64,
    indices: *mut usize,
    similarities: *mut f64,
    count: *mut usize,
) -> ScopeStatus {
    guard(|| {
        let bank = bank.as_ref().ok_or_else(|| null("bank"))?;
        let q = slice(query, dim, "query")?;
        if count.is_null() {
            return Err(null("count"));
        }
        let r = registration::retrieve_context(-1, q, &bank.inner, top_r, epsilon)?;
        let idx = slice_mut(indices, r.effective_r, "indices")?;
        let sims = slice_mut(similarities, r.effective_r, "similarities")?;
        for (k, (b, s)) in r.entries.iter().enumerate() {
            idx[k] = *b;
            sims[k] = *s;
        }
        *count = r.effective_r;
        Ok(())
    })
}

/// Enriched prototype `lambda * p + (1 - lambda) * h` over `n` row-major context vectors.
/// With `n == 0` the output equals `p`.
///
/// # Safety
/// `p` and `out` hold `dim` floats; `context` holds `n * dim` floats.
#[no_mangle]
pub unsafe extern "C" fn scope_enrich(
    p: *const f32,
    context: *const f32,
    n: usize,
    dim: usize,
    lambda: f64,
    epsilon: f64,
    out: *mut f32,
) -> ScopeStatus {
    guard(|| {
        if dim == 0 {
            return Err(Fail(ScopeStatus::InvalidArgument, "dim must be >= 1".into()));
        }
        let p = slice(p, dim, "p")?;
        let ctx = slice(context, len_product(n, dim)?, "context")?;
        let out = slice_mut(out, dim, "out")?;
        let proto = Prototype::new(p.to_vec(), Provenance::FewShot { class_id: -1, stage: 1 });
        let rows: Vec<&[f32]> = ctx.chunks_exact(dim).collect();
        let e = registration::enrich(&proto, &rows, lambda, dim, epsilon)?;
        out.copy_from_slice(&e.vector);
        Ok(())
    })
}

/// New empty classifier of width `dim`.
///
/// # Safety
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn scope_classifier_new(dim: usize, out: *mut *mut ScopeClassifier) -> ScopeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if dim == 0 {
            return Err(Fail(ScopeStatus::InvalidArgument, "dim must be >= 1".into()));
        }
        *out = Box::into_raw(Box::new(ScopeClassifier {
            inner: ClassifierMatrix::new(dim),
        }));
        Ok(())
    })
}

/// Append `n` rows for `stage`, which must exceed every stage already added. Existing rows
/// are left untouched.
///
/// # Safety
/// `classifier` comes from this library; `class_ids` holds `n` ids and `rows` holds
/// `n * dim` floats.
#[no_mangle]
pub unsafe extern "C" fn scope_classifier_append_stage(
    classifier: *mut ScopeClassifier,
    stage: usize,
    class_ids: *const i32,
    rows: *const f32,
    n: usize,
) -> ScopeStatus {
    guard(|| {
        let c = classifier.as_mut().ok_or_else(|| null("classifier"))?;
        let dim = c.inner.dim();
        let ids = slice(class_ids, n, "class_ids")?;
        let data = slice(rows, len_product(n, dim)?, "rows")?;
        let block = ids
            .iter()
            .zip(data.chunks_exact(dim))
            .map(|(&id, row)| (id, Prototype::new(row.to_vec(), Provenance::Enriched { class_id: id, stage })))
            .collect();
        c.inner.append_stage(stage, block)?;
        Ok(())
    })
}

/// Number of classifier rows, 0 for a null handle.
///
/// # Safety
/// `classifier` is null or comes from this library.
#[no_mangle]
pub unsafe extern "C" fn scope_classifier_len(classifier: *const ScopeClassifier) -> usize {
    classifier.as_ref().map_or(0, |c| c.inner.len())
}

/// Arg-max class per embedding row; ties go to the earliest row.
///
/// # Safety
/// `classifier` comes from this library; `embeddings` holds `rows * dim` floats and `out`
/// holds `rows` ints.
#[no_mangle]
pub unsafe extern "C" fn scope_classifier_predict(
    classifier: *const ScopeClassifier,
    embeddings: *const f32,
    rows: usize,
    dim: usize,
    out: *mut i32,
) -> ScopeStatus {
    guard(|| {
        let c = classifier.as_ref().ok_or_else(|| null("classifier"))?;
        let data = slice(embeddings, len_product(rows, dim)?, "embeddings")?;
        let out = slice_mut(out, rows, "out")?;
        let emb = matrix(data, rows, dim)?;
        out.copy_from_slice(&registration::predict(&emb, &c.inner)?);
        Ok(())
    })
}

/// Release a classifier. Null is a no-op.
///
/// # Safety
/// `classifier` is null or an unreleased handle from this library.
#[no_mangle]
pub unsafe extern "C" fn scope_classifier_free(classifier: *mut ScopeClassifier) {
    if !classifier.is_null() {
        drop(Box::from_raw(classifier));
    }
}
