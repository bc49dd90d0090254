//! C ABI for training and querying meta-learned sine regressors.
//!
//! Every fallible call returns a [`DmcmStatus`]. On failure the message is
//! kept per thread and can be read with [`dmcm_last_error`]. Handles are
//! opaque, created by `dmcm_trainer_*` constructors and released with
//! [`dmcm_trainer_free`]. A handle must not be used from two threads at once.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use dmcm_core::autodiff::Array;
use dmcm_core::experiments::{eval_set, eval_tasks, ExperimentConfig};
use dmcm_core::meta::Trainer;
use dmcm_core::tasks::TaskDataset;
use dmcm_core::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DmcmStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    /// Bad config, bad checkpoint or bad argument value.
    Config = 3,
    /// Non-finite values or failed sampling.
    Numerical = 4,
    /// Array sizes that do not fit the model.
    Shape = 5,
    /// A Rust panic was caught at the boundary.
    Panic = 6,
}

/// Opaque training state.
pub struct DmcmTrainer {
    inner: Trainer,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DmcmStatus {
    match e {
        Error::Shape { .. } | Error::NotScalar(_) | Error::CheckpointShape { .. } => DmcmStatus::Shape,
        e if e.is_numerical() => DmcmStatus::Numerical,
        _ => DmcmStatus::Config,
    }
}

enum Fail {
    Null(&'static str),
    Utf8(&'static str),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DmcmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DmcmStatus::Ok,
        Ok(Err(Fail::Null(arg))) => {
            set_error(format!("`{arg}` is null"));
            DmcmStatus::NullArgument
        }
        Ok(Err(Fail::Utf8(arg))) => {
            set_error(format!("`{arg}` is not valid UTF-8"));
            DmcmStatus::InvalidUtf8
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            DmcmStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, name: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(name));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail::Utf8(name))
}

unsafe fn handle<'a>(t: *const DmcmTrainer) -> Result<&'a DmcmTrainer, Fail> {
    t.as_ref().ok_or(Fail::Null("trainer"))
}

unsafe fn handle_mut<'a>(t: *mut DmcmTrainer) -> Result<&'a mut DmcmTrainer, Fail> {
    t.as_mut().ok_or(Fail::Null("trainer"))
}

unsafe fn slice<'a>(p: *const f64, n: usize, name: &'static str) -> Result<&'a [f64], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(name));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

fn publish(out: *mut *mut DmcmTrainer, trainer: Trainer) {
    let boxed = Box::new(DmcmTrainer { inner: trainer });
    // SAFETY: callers check `out` for null before building the trainer.
    unsafe { *out = Box::into_raw(boxed) };
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dmcm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn dmcm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a trainer from an experiment config in TOML for `seed`, using the
/// first trial of its range partition.
///
/// # Safety
/// `config_toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dmcm_trainer_from_toml(
    config_toml: *const c_char,
    seed: u64,
    out: *mut *mut DmcmTrainer,
) -> DmcmStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let src = text(config_toml, "config_toml")?;
        let cfg: ExperimentConfig = toml::from_str(src).map_err(Error::from)?;
        cfg.validate()?;
        publish(out, cfg.trainer(seed, 0)?);
        Ok(())
    })
}

/// Restores a trainer saved with [`dmcm_trainer_to_json`].
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dmcm_trainer_from_json(json: *const c_char, out: *mut *mut DmcmTrainer) -> DmcmStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let src = text(json, "json")?;
        let trainer: Trainer = serde_json::from_str(src).map_err(Error::from)?;
        let expected = trainer.arch.layer_shapes();
        for (i, (l, &(r, c))) in trainer.params.layers.iter().zip(&expected).enumerate() {
            if l.weight.shape() != [r, c] {
                return Err(Error::CheckpointShape {
                    layer: format!("layer {i} weight"),
                    expected: vec![r, c],
                    found: l.weight.shape().to_vec(),
                }
                .into());
            }
        }
        if trainer.params.layers.len() != expected.len() {
            return Err(Error::CheckpointShape {
                layer: "layers".into(),
                expected: vec![expected.len()],
                found: vec![trainer.params.layers.len()],
            }
            .into());
        }
        publish(out, trainer);
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `trainer` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dmcm_trainer_free(trainer: *mut DmcmTrainer) {
    if !trainer.is_null() {
        drop(Box::from_raw(trainer));
    }
}

/// One meta-update. `loss_out`, when not null, receives the pre-update outer loss.
///
/// # Safety
/// `trainer` must be a live handle; `loss_out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn dmcm_trainer_step(trainer: *mut DmcmTrainer, loss_out: *mut f64) -> DmcmStatus {
    guard(|| {
        let t = handle_mut(trainer)?;
        let report = t.inner.step()?;
        if !loss_out.is_null() {
            *loss_out = report.basic_loss;
        }
        Ok(())
    })
}

/// Meta-updates applied so far; 0 for a null handle.
///
/// # Safety
/// `trainer` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dmcm_trainer_meta_steps(trainer: *const DmcmTrainer) -> u64 {
    trainer.as_ref().map_or(0, |t| t.inner.meta_steps)
}

/// Order-sensitive checksum of every parameter's bit pattern.
///
/// # Safety
/// `trainer` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dmcm_trainer_checksum(trainer: *const DmcmTrainer) -> u64 {
    trainer.as_ref().map_or(0, |t| t.inner.params.checksum())
}

/// Mean adapted MSE and its 95% half-width over `tasks` tasks drawn from the
/// full factor ranges with `seed`, each scored on `test_points` query points.
///
/// # Safety
/// `trainer` must be a live handle; `mean_out` and `ci_out` writable.
#[no_mangle]
pub unsafe extern "C" fn dmcm_trainer_evaluate(
    trainer: *const DmcmTrainer,
    tasks: usize,
    test_points: usize,
    seed: u64,
    mean_out: *mut f64,
    ci_out: *mut f64,
) -> DmcmStatus {
    guard(|| {
        let t = handle(trainer)?;
        if mean_out.is_null() {
            return Err(Fail::Null("mean_out"));
        }
        if ci_out.is_null() {
            return Err(Fail::Null("ci_out"));
        }
        if tasks == 0 || test_points == 0 {
            return Err(Error::Config {
                path: "tasks".into(),
                msg: "task and point counts must be positive".into(),
            }
            .into());
        }
        let set = eval_set(&t.inner.sampler.family, tasks, t.inner.cfg.shots, test_points, seed)?;
        let (m, c) = eval_tasks(&t.inner, &set)?;
        *mean_out = m;
        *ci_out = c;
        Ok(())
    })
}

/// Adapts to the support points `(xs, ys)` and writes predictions for the
/// `m` query inputs `qx` into `out`. The trainer itself is not modified.
///
/// # Safety
/// `xs`, `ys` must hold `n` values, `qx` and `out` `m` values.
#[no_mangle]
pub unsafe extern "C" fn dmcm_trainer_adapt_predict(
    trainer: *const DmcmTrainer,
    xs: *const f64,
    ys: *const f64,
    n: usize,
    qx: *const f64,
    m: usize,
    out: *mut f64,
) -> DmcmStatus {
    guard(|| {
        let t = handle(trainer)?;
        if n == 0 {
            return Err(Error::Shape { op: "adapt_predict", detail: "no support points".into() }.into());
        }
        let support = TaskDataset {
            x: Array::column(slice(xs, n, "xs")?.to_vec()),
            y: Array::column(slice(ys, n, "ys")?.to_vec()),
        };
        let query = Array::column(slice(qx, m, "qx")?.to_vec());
        if m > 0 && out.is_null() {
            return Err(Fail::Null("out"));
        }
        let adapted = t.inner.adapt(&support)?;
        let pred = t.inner.predict(&adapted, &query)?;
        if m > 0 {
            std::slice::from_raw_parts_mut(out, m).copy_from_slice(pred.data());
        }
        Ok(())
    })
}

/// Serializes the full training state. Free the string with [`dmcm_string_free`].
///
/// # Safety
/// `trainer` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dmcm_trainer_to_json(trainer: *const DmcmTrainer, out: *mut *mut c_char) -> DmcmStatus {
    guard(|| {
        let t = handle(trainer)?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let s = serde_json::to_string(&t.inner).map_err(Error::from)?;
        *out = CString::new(s).expect("json has no NUL").into_raw();
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dmcm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
