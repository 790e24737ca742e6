//! C interface to `abe-core`.
//!
//! Handles are opaque heap objects released with the matching `_free`
//! function. Every fallible call returns an [`AbeStatus`]; on failure the
//! message is available from [`abe_last_error`] on the same thread until
//! the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use abe_core::data::{generate, load_dataset, save_dataset, Dataset, SyntheticSpec};
use abe_core::evaluation::{embed_dataset, recall_at_k, EmbeddingSet};
use abe_core::experiment::Checkpoint;
use abe_core::model::EnsembleModel;
use abe_core::Error;

/// Result of an FFI call. Codes 1 to 4 match the `abe` binary's exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AbeStatus {
    Ok = 0,
    Internal = 1,
    Config = 2,
    Data = 3,
    Numerical = 4,
    /// A required pointer was null or a string was not UTF-8.
    InvalidArgument = 5,
    /// Rust code panicked; the handle involved should be discarded.
    Panic = 6,
}

/// Immutable image dataset.
pub struct AbeDataset {
    inner: Dataset,
}

/// Trained ensemble restored from a checkpoint.
pub struct AbeModel {
    inner: EnsembleModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> AbeStatus {
    match e.exit_code() {
        2 => AbeStatus::Config,
        3 => AbeStatus::Data,
        4 => AbeStatus::Numerical,
        _ => AbeStatus::Internal,
    }
}

enum Fail {
    Core(Error),
    Arg(String),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AbeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AbeStatus::Ok,
        Ok(Err(Fail::Core(e))) => {
            let s = status_of(&e);
            set_error(e.to_string());
            s
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            AbeStatus::InvalidArgument
        }
        Err(_) => {
            set_error("panic inside abe".into());
            AbeStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Arg(format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail::Arg(format!("{what} is not UTF-8")))
}

unsafe fn href<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail::Arg(format!("{what} is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| Fail::Arg(format!("{what} is null")))
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn abe_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Generate a synthetic dataset from `key = value` spec text.
///
/// # Safety
/// `spec` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn abe_dataset_generate(spec: *const c_char, out: *mut *mut AbeDataset) -> AbeStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let spec = SyntheticSpec::parse(text(spec, "spec")?)?;
        let ds = generate(&spec)?;
        *out = Box::into_raw(Box::new(AbeDataset { inner: ds }));
        Ok(())
    })
}

/// Load a dataset file.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn abe_dataset_load(path: *const c_char, out: *mut *mut AbeDataset) -> AbeStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let path = PathBuf::from(text(path, "path")?);
        let ds = load_dataset(&path).map_err(|e| match e {
            Error::Io(io) => Error::Dataset(format!("{}: {io}", path.display())),
            other => other,
        })?;
        *out = Box::into_raw(Box::new(AbeDataset { inner: ds }));
        Ok(())
    })
}

/// Save a dataset to `path`.
///
/// # Safety
/// `ds` must come from this library; `path` must be a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn abe_dataset_save(ds: *const AbeDataset, path: *const c_char) -> AbeStatus {
    guard(|| {
        let ds = href(ds, "dataset")?;
        save_dataset(text(path, "path")?, &ds.inner)?;
        Ok(())
    })
}

/// Shape `[N, C, H, W]` of a dataset.
///
/// # Safety
/// `ds` must come from this library; `shape` must point to 4 writable values.
#[no_mangle]
pub unsafe extern "C" fn abe_dataset_shape(ds: *const AbeDataset, shape: *mut usize) -> AbeStatus {
    guard(|| {
        let ds = href(ds, "dataset")?;
        if shape.is_null() {
            return Err(Fail::Arg("shape is null".into()));
        }
        std::slice::from_raw_parts_mut(shape, 4).copy_from_slice(&ds.inner.shape());
        Ok(())
    })
}

/// Copy the `N` labels into `labels`.
///
/// # Safety
/// `ds` must come from this library; `labels` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn abe_dataset_labels(ds: *const AbeDataset, labels: *mut u32, len: usize) -> AbeStatus {
    guard(|| {
        let ds = href(ds, "dataset")?;
        let src = ds.inner.labels();
        if labels.is_null() || len != src.len() {
            return Err(Fail::Arg(format!("labels buffer must hold {} values", src.len())));
        }
        std::slice::from_raw_parts_mut(labels, len).copy_from_slice(src);
        Ok(())
    })
}

/// Release a dataset. Null is ignored.
///
/// # Safety
/// `ds` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn abe_dataset_free(ds: *mut AbeDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Restore the model stored in a checkpoint file.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn abe_model_load(path: *const c_char, out: *mut *mut AbeModel) -> AbeStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let (_, model) = Checkpoint::load(text(path, "path")?)?.restore()?;
        *out = Box::into_raw(Box::new(AbeModel { inner: model }));
        Ok(())
    })
}

/// Number of learners `M` and per-learner embedding size `d`.
///
/// # Safety
/// `model` must come from this library; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn abe_model_dims(model: *const AbeModel, learners: *mut usize, dim: *mut usize) -> AbeStatus {
    guard(|| {
        let model = href(model, "model")?;
        *out_ptr(learners, "learners")? = model.inner.learners();
        *out_ptr(dim, "dim")? = model.inner.config().learner_dim();
        Ok(())
    })
}

/// Embed every image of `ds`. Writes `N * M * d` values, row-major by
/// sample then learner, into `out`, which must hold exactly `len` values.
///
/// # Safety
/// Handles must come from this library; `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn abe_model_embed(
    model: *const AbeModel,
    ds: *const AbeDataset,
    out: *mut f64,
    len: usize,
) -> AbeStatus {
    guard(|| {
        let model = href(model, "model")?;
        let ds = href(ds, "dataset")?;
        let want = ds.inner.len() * model.inner.learners() * model.inner.config().learner_dim();
        if out.is_null() || len != want {
            return Err(Fail::Arg(format!("embedding buffer must hold {want} values, got {len}")));
        }
        if ds.inner.image_shape() != model.inner.config().input_shape {
            return Err(Error::config(format!(
                "dataset images are {:?} but the model expects {:?}",
                ds.inner.image_shape(),
                model.inner.config().input_shape
            ))
            .into());
        }
        let e = embed_dataset(&model.inner, &ds.inner, 128)?;
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(e.data());
        Ok(())
    })
}

/// Release a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn abe_model_free(model: *mut AbeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Ensemble Recall@K of `n` samples with `learners` slices of `dim` values
/// each (layout as written by [`abe_model_embed`]).
///
/// # Safety
/// `embeddings` must hold `n * learners * dim` values and `labels` `n`.
#[no_mangle]
pub unsafe extern "C" fn abe_recall_at_k(
    embeddings: *const f64,
    labels: *const u32,
    n: usize,
    learners: usize,
    dim: usize,
    k: usize,
    recall: *mut f64,
) -> AbeStatus {
    guard(|| {
        if embeddings.is_null() || labels.is_null() {
            return Err(Fail::Arg("embeddings or labels is null".into()));
        }
        let recall = out_ptr(recall, "recall")?;
        let total = n
            .checked_mul(learners)
            .and_then(|v| v.checked_mul(dim))
            .ok_or_else(|| Fail::Arg("embedding size overflows".into()))?;
        let data = std::slice::from_raw_parts(embeddings, total).to_vec();
        let labels = std::slice::from_raw_parts(labels, n).to_vec();
        let set = EmbeddingSet::new(n, learners, dim, data, labels)?;
        *recall = recall_at_k(&set, &[k])?[&k];
        Ok(())
    })
}
