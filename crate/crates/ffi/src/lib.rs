//! C interface. Objects cross the boundary as opaque handles that the
//! caller releases with the matching `_free` function. Every fallible call
//! returns an [`OccdetStatus`]; on failure [`occdet_last_error`] describes
//! what went wrong on the calling thread.
//!
//! Strings returned through `char **` out-parameters are owned by the
//! caller and must be released with [`occdet_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use occdet::metrics::{nds_score, MetricReport};
use occdet::numcore::Module;
use occdet::pipeline::{evaluate, load_checkpoint, load_scene_set, train, training_scenes, Model, PipelineConfig};
use occdet::{gradsuite, Error};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OccdetStatus {
    Ok = 0,
    /// A required pointer was null or a string was not UTF-8.
    InvalidArgument = 1,
    /// The configuration or a file's contents failed validation.
    Invalid = 2,
    /// Training produced a non-finite loss or gradient.
    NonFinite = 3,
    Io = 4,
    /// A panic was caught at the boundary.
    Internal = 5,
}

pub struct OccdetConfig {
    inner: PipelineConfig,
}

pub struct OccdetModel {
    config: PipelineConfig,
    model: Model<f32>,
}

pub struct OccdetReport {
    inner: MetricReport,
}

/// Headline numbers of a report. Optional metrics are NaN when absent.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OccdetMetrics {
    pub miou: f64,
    pub miou_visible: f64,
    pub point_miou: f64,
    pub map: f64,
    pub nds: f64,
    pub mate: f64,
    pub mase: f64,
    pub maoe: f64,
    pub mave: f64,
    pub maae: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(OccdetStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::NonFinite(_) => OccdetStatus::NonFinite,
            Error::Io { .. } => OccdetStatus::Io,
            _ => OccdetStatus::Invalid,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: &str) -> Failure {
    Failure(OccdetStatus::InvalidArgument, msg.to_string())
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> OccdetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            OccdetStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(p) => {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            set_last_error(format!("internal error: {}", msg.unwrap_or_else(|| "panic".into())));
            OccdetStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(&format!("{what} is not UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, what).map(Some)
    }
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| invalid(&format!("{what} is null")))
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| invalid(&format!("{what} is null")))
}

unsafe fn write_out<T>(out: *mut T, v: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(invalid("output pointer is null"));
    }
    out.write(v);
    Ok(())
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|_| invalid("string contains NUL"))?;
    write_out(out, c.into_raw())
}

unsafe fn write_box<T>(out: *mut *mut T, v: T) -> Result<(), Failure> {
    write_out(out, Box::into_raw(Box::new(v)))
}

unsafe fn free_box<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn occdet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null after a
/// successful call. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn occdet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must be null or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn occdet_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn occdet_config_default(out: *mut *mut OccdetConfig) -> OccdetStatus {
    guard(|| write_box(out, OccdetConfig { inner: PipelineConfig::default() }))
}

/// The small single-scene configuration used for overfitting.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn occdet_config_tiny(out: *mut *mut OccdetConfig) -> OccdetStatus {
    guard(|| write_box(out, OccdetConfig { inner: PipelineConfig::tiny() }))
}

/// Parses and validates a JSON document; missing fields take defaults.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn occdet_config_from_json(json: *const c_char, out: *mut *mut OccdetConfig) -> OccdetStatus {
    guard(|| {
        let inner = PipelineConfig::from_json(str_arg(json, "json")?)?;
        write_box(out, OccdetConfig { inner })
    })
}

/// # Safety
/// `cfg` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn occdet_config_to_json(cfg: *const OccdetConfig, out: *mut *mut c_char) -> OccdetStatus {
    guard(|| {
        let cfg = handle(cfg, "config")?;
        let text = serde_json::to_string_pretty(&cfg.inner).map_err(Error::from)?;
        write_string(out, text)
    })
}

/// Content hash that identifies the configuration in logs and checkpoints.
///
/// # Safety
/// `cfg` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn occdet_config_hash(cfg: *const OccdetConfig, out: *mut *mut c_char) -> OccdetStatus {
    guard(|| write_string(out, handle(cfg, "config")?.inner.hash()))
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn occdet_config_set_seed(cfg: *mut OccdetConfig, seed: u64) -> OccdetStatus {
    guard(|| {
        handle_mut(cfg, "config")?.inner.seed = seed;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn occdet_config_set_steps(cfg: *mut OccdetConfig, steps: usize) -> OccdetStatus {
    guard(|| {
        handle_mut(cfg, "config")?.inner.steps = steps;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn occdet_config_free(cfg: *mut OccdetConfig) {
    free_box(cfg)
}

/// Trains from scratch. With a non-null `out_dir`, the log and the final
/// checkpoint are written there.
///
/// # Safety
/// `cfg` must be a live handle, `out_dir` null or a NUL-terminated string,
/// and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn occdet_train(cfg: *const OccdetConfig, out_dir: *const c_char, out: *mut *mut OccdetModel) -> OccdetStatus {
    guard(|| {
        let cfg = handle(cfg, "config")?;
        let dir = opt_str_arg(out_dir, "out_dir")?;
        let run = train(&cfg.inner, dir.map(Path::new))?;
        write_box(out, OccdetModel { config: run.config, model: run.model })
    })
}

/// Loads a checkpoint directory written by [`occdet_train`].
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn occdet_model_load(dir: *const c_char, out: *mut *mut OccdetModel) -> OccdetStatus {
    guard(|| {
        let (config, model, _) = load_checkpoint(Path::new(str_arg(dir, "dir")?))?;
        write_box(out, OccdetModel { config, model })
    })
}

/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn occdet_model_param_count(model: *mut OccdetModel, out: *mut usize) -> OccdetStatus {
    guard(|| {
        let n = handle_mut(model, "model")?.model.param_count();
        write_out(out, n)
    })
}

/// Copies the model's configuration into a new handle.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn occdet_model_config(model: *const OccdetModel, out: *mut *mut OccdetConfig) -> OccdetStatus {
    guard(|| write_box(out, OccdetConfig { inner: handle(model, "model")?.config.clone() }))
}

/// Scores the model on a scene directory (or a directory of scenes). A
/// null `scenes_dir` evaluates on the configuration's training scenes.
///
/// # Safety
/// `model` must be a live handle, `scenes_dir` null or a NUL-terminated
/// string, and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn occdet_model_evaluate(
    model: *const OccdetModel,
    scenes_dir: *const c_char,
    out: *mut *mut OccdetReport,
) -> OccdetStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let scenes = match opt_str_arg(scenes_dir, "scenes_dir")? {
            Some(d) => load_scene_set(Path::new(d))?,
            None => training_scenes(&m.config)?,
        };
        let inner = evaluate(&m.model, &m.config, &scenes)?;
        write_box(out, OccdetReport { inner })
    })
}

/// # Safety
/// `model` must be null or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn occdet_model_free(model: *mut OccdetModel) {
    free_box(model)
}

/// # Safety
/// `report` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn occdet_report_metrics(report: *const OccdetReport, out: *mut OccdetMetrics) -> OccdetStatus {
    guard(|| {
        let r = &handle(report, "report")?.inner;
        write_out(
            out,
            OccdetMetrics {
                miou: r.miou,
                miou_visible: r.miou_visible.unwrap_or(f64::NAN),
                point_miou: r.point_miou.unwrap_or(f64::NAN),
                map: r.map,
                nds: r.nds,
                mate: r.mate,
                mase: r.mase,
                maoe: r.maoe,
                mave: r.mave,
                maae: r.maae,
            },
        )
    })
}

/// # Safety
/// `report` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn occdet_report_to_json(report: *const OccdetReport, out: *mut *mut c_char) -> OccdetStatus {
    guard(|| write_string(out, handle(report, "report")?.inner.to_json()?))
}

/// # Safety
/// `report` must be null or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn occdet_report_free(report: *mut OccdetReport) {
    free_box(report)
}

/// Runs the finite-difference suite, or only case `op` when non-null.
/// `all_passed` receives whether every selected case met its tolerance.
///
/// # Safety
/// `op` must be null or a NUL-terminated string and `all_passed` a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn occdet_gradcheck(op: *const c_char, seeds: u64, all_passed: *mut bool) -> OccdetStatus {
    guard(|| {
        let results = gradsuite::run(opt_str_arg(op, "op")?, seeds)?;
        write_out(all_passed, results.iter().all(|r| r.passed))
    })
}

/// Detection score from mAP and the five mean true-positive errors.
#[no_mangle]
pub extern "C" fn occdet_nds_score(map: f64, mate: f64, mase: f64, maoe: f64, mave: f64, maae: f64) -> f64 {
    nds_score(map, mate, mase, maoe, mave, maae)
}
