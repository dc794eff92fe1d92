//! C ABI over the `dbfem` library.
//!
//! Every fallible function returns a [`DbfemStatus`]; on failure a message
//! is available from [`dbfem_last_error`] until the next call on the same
//! thread. Models are opaque handles created by [`dbfem_model_create`] or
//! [`dbfem_model_load`] and released with [`dbfem_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use dbfem::checkpoint::{self, AnyModel};
use dbfem::data::{merge_label, region_for_au};
use dbfem::train::{lr_at, metrics_from, ConfusionMatrix, TrainConfig};
use dbfem::{flops_estimate, Dbfem, Error, InputShape, ModelConfig, Real, Tensor, Variant};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DbfemStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Shape = 5,
    NotFound = 6,
    Internal = 7,
}

/// Opaque model handle.
pub struct DbfemModel {
    inner: AnyModel,
}

/// Summary metrics of a confusion matrix.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DbfemMetrics {
    pub accuracy: f64,
    pub uf1: f64,
    pub uar: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DbfemStatus {
    match e {
        Error::Shape { .. } => DbfemStatus::Shape,
        Error::Io { .. } | Error::MissingFile(_) | Error::Image { .. } => DbfemStatus::Io,
        Error::Checkpoint(_) => DbfemStatus::Checkpoint,
        _ => DbfemStatus::InvalidArgument,
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (DbfemStatus, String)>) -> DbfemStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DbfemStatus::Ok,
        Ok(Err((status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            DbfemStatus::Internal
        }
    }
}

type FfiResult<T> = Result<T, (DbfemStatus, String)>;

fn lib<T>(r: dbfem::Result<T>) -> FfiResult<T> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (DbfemStatus, String) {
    (DbfemStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (DbfemStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn model_arg<'a>(p: *const DbfemModel) -> FfiResult<&'a DbfemModel> {
    p.as_ref().ok_or_else(|| null("model"))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> FfiResult<&'a mut T> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn dbfem_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Creates a freshly initialised single-precision model. `preset` is
/// `"desk"` or `"paper"`; `variant` is a row label such as `"DBFEM+CAFFM"`.
///
/// # Safety
/// `preset` and `variant` must be nul-terminated strings; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn dbfem_model_create(
    preset: *const c_char,
    variant: *const c_char,
    seed: u64,
    out: *mut *mut DbfemModel,
) -> DbfemStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let base = match str_arg(preset, "preset")? {
            "desk" => ModelConfig::desk(),
            "paper" => ModelConfig::paper(),
            other => return Err((DbfemStatus::InvalidArgument, format!("unknown preset `{other}`"))),
        };
        let variant: Variant = lib(str_arg(variant, "variant")?.parse())?;
        let model = lib(Dbfem::<f32>::new(&base.with_variant(variant), seed))?;
        *out = Box::into_raw(Box::new(DbfemModel {
            inner: AnyModel::Single(model),
        }));
        Ok(())
    })
}

/// Loads a checkpoint written by `dbfem train`.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dbfem_model_load(path: *const c_char, out: *mut *mut DbfemModel) -> DbfemStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let inner = lib(checkpoint::load(Path::new(str_arg(path, "path")?)))?;
        *out = Box::into_raw(Box::new(DbfemModel { inner }));
        Ok(())
    })
}

/// Writes the model as a checkpoint.
///
/// # Safety
/// `model` must come from this library; `path` must be a nul-terminated
/// string.
#[no_mangle]
pub unsafe extern "C" fn dbfem_model_save(model: *const DbfemModel, path: *const c_char) -> DbfemStatus {
    guard(|| {
        let m = model_arg(model)?;
        let path = Path::new(str_arg(path, "path")?);
        lib(match &m.inner {
            AnyModel::Single(x) => checkpoint::save(path, x),
            AnyModel::Double(x) => checkpoint::save(path, x),
        })
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dbfem_model_free(model: *mut DbfemModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of learnable scalars.
///
/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dbfem_model_param_count(model: *const DbfemModel, out: *mut u64) -> DbfemStatus {
    guard(|| {
        let m = model_arg(model)?;
        *out_arg(out, "out")? = lib(dbfem::param_count(m.inner.config()))?;
        Ok(())
    })
}

/// Multiply-accumulates of one single-image forward pass.
///
/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dbfem_model_flops(model: *const DbfemModel, out: *mut u64) -> DbfemStatus {
    guard(|| {
        let cfg = model_arg(model)?.inner.config();
        *out_arg(out, "out")? = lib(flops_estimate(cfg, &InputShape::of(cfg)))?;
        Ok(())
    })
}

/// Per-item input extents `[C, H, W]` of the face image and region stack,
/// and the number of classes.
///
/// # Safety
/// `model` must come from this library; `global` and `regions` must point
/// to three writable `size_t`; `classes` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dbfem_model_input_shape(
    model: *const DbfemModel,
    global: *mut usize,
    regions: *mut usize,
    classes: *mut usize,
) -> DbfemStatus {
    guard(|| {
        let cfg = model_arg(model)?.inner.config();
        if global.is_null() || regions.is_null() {
            return Err(null("shape buffer"));
        }
        let s = InputShape::of(cfg);
        std::slice::from_raw_parts_mut(global, 3).copy_from_slice(&s.global);
        std::slice::from_raw_parts_mut(regions, 3).copy_from_slice(&s.regions);
        *out_arg(classes, "classes")? = cfg.num_classes;
        Ok(())
    })
}

fn logits_typed<T: Real>(m: &Dbfem<T>, global: &[f32], regions: &[f32], batch: usize) -> dbfem::Result<Vec<f32>> {
    let s = InputShape::of(m.config());
    let v = m.config().variant;
    let to_t = |x: &[f32]| x.iter().map(|&a| T::from_f64(a as f64)).collect::<Vec<T>>();
    let g = Tensor::new(vec![batch, s.global[0], s.global[1], s.global[2]], to_t(global))?;
    let r = Tensor::new(vec![batch, s.regions[0], s.regions[1], s.regions[2]], to_t(regions))?;
    let out = m.logits(v.uses_global().then_some(&g), v.uses_local().then_some(&r))?;
    Ok(out.data().iter().map(|x| x.as_f64() as f32).collect())
}

/// Computes `batch x classes` logits, row-major, into `logits`. Inputs are
/// `batch` items laid out as reported by [`dbfem_model_input_shape`];
/// a variant that ignores one input still needs a correctly sized buffer.
///
/// # Safety
/// Each pointer must reference at least the stated number of `float`s.
#[no_mangle]
pub unsafe extern "C" fn dbfem_model_predict(
    model: *const DbfemModel,
    batch: usize,
    global: *const f32,
    global_len: usize,
    regions: *const f32,
    regions_len: usize,
    logits: *mut f32,
    logits_len: usize,
) -> DbfemStatus {
    guard(|| {
        let m = model_arg(model)?;
        if global.is_null() || regions.is_null() || logits.is_null() {
            return Err(null("buffer"));
        }
        let cfg = m.inner.config();
        let s = InputShape::of(cfg);
        let want = |e: [usize; 3]| batch * e.iter().product::<usize>();
        if batch == 0
            || global_len != want(s.global)
            || regions_len != want(s.regions)
            || logits_len != batch * cfg.num_classes
        {
            return Err((
                DbfemStatus::Shape,
                format!(
                    "batch {batch} needs {} + {} input floats and {} output floats, got {global_len} + {regions_len} and {logits_len}",
                    want(s.global),
                    want(s.regions),
                    batch * cfg.num_classes
                ),
            ));
        }
        let g = std::slice::from_raw_parts(global, global_len);
        let r = std::slice::from_raw_parts(regions, regions_len);
        let out = lib(match &m.inner {
            AnyModel::Single(x) => logits_typed(x, g, r, batch),
            AnyModel::Double(x) => logits_typed(x, g, r, batch),
        })?;
        std::slice::from_raw_parts_mut(logits, logits_len).copy_from_slice(&out);
        Ok(())
    })
}

/// Learning rate of the step schedule at `epoch`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dbfem_lr_at(epoch: u64, lr0: f64, decay_step: u64, gamma: f64, out: *mut f64) -> DbfemStatus {
    guard(|| {
        let cfg = TrainConfig {
            lr0,
            decay_step: decay_step as usize,
            gamma,
            ..TrainConfig::default()
        };
        lib(cfg.validate())?;
        *out_arg(out, "out")? = lr_at(epoch as usize, &cfg);
        Ok(())
    })
}

/// Metrics of a `classes x classes` confusion matrix given row-major
/// (rows are true classes).
///
/// # Safety
/// `counts` must reference `classes * classes` values; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn dbfem_metrics(counts: *const u64, classes: usize, out: *mut DbfemMetrics) -> DbfemStatus {
    guard(|| {
        if counts.is_null() {
            return Err(null("counts"));
        }
        let n = classes
            .checked_mul(classes)
            .ok_or_else(|| (DbfemStatus::InvalidArgument, "class count overflows".to_string()))?;
        let cm = lib(ConfusionMatrix::from_counts(
            classes,
            std::slice::from_raw_parts(counts, n).to_vec(),
        ))?;
        let m = lib(metrics_from(&cm))?;
        *out_arg(out, "out")? = DbfemMetrics {
            accuracy: m.accuracy,
            uf1: m.uf1,
            uar: m.uar,
            macro_precision: m.macro_precision,
            macro_recall: m.macro_recall,
        };
        Ok(())
    })
}

/// Maps a dataset emotion label to one of the five merged classes
/// (0 Happiness, 1 Surprise, 2 Disgust, 3 Repression, 4 Others).
///
/// # Safety
/// `raw` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dbfem_merge_label(raw: *const c_char, out: *mut u32) -> DbfemStatus {
    guard(|| {
        let class = lib(merge_label(str_arg(raw, "raw")?))?;
        *out_arg(out, "out")? = class.index() as u32;
        Ok(())
    })
}

/// Facial region of an action unit (0 ocular/brow, 1 oral, 2 mandibular,
/// 3 cheek, 4 nasal). Returns `DBFEM_STATUS_NOT_FOUND` for an unlisted AU.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dbfem_region_for_au(au: u32, out: *mut u32) -> DbfemStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let r = region_for_au(au).ok_or_else(|| (DbfemStatus::NotFound, format!("AU{au} belongs to no region")))?;
        *out = r.index() as u32;
        Ok(())
    })
}
