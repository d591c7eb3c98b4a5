//! C ABI over `capsroute`.
//!
//! Every fallible call returns a [`CapsrouteStatus`]; on failure the message
//! is available from [`capsroute_last_error`] on the same thread until the
//! next failing call. Models are opaque handles released with
//! [`capsroute_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use capsroute::checkpoint::Checkpoint;
use capsroute::cli::train_to_dir;
use capsroute::config::{parse_pairs, resolve, to_text};
use capsroute::gradcheck::{run_suite, Precision};
use capsroute::model::{forward, CapsNetParams, ModelConfig};
use capsroute::rng::SeedStream;
use capsroute::routing::RoutingConfig;
use capsroute::train::{route_for, TrainConfig};
use capsroute::{Error, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapsrouteStatus {
    Ok = 0,
    /// Invalid configuration or argument.
    Usage = 1,
    /// Missing or malformed data, checkpoint or file.
    Data = 2,
    /// Divergence, non-finite values or a failed gradient check.
    Numeric = 3,
    NullPointer = 4,
    /// A Rust panic was caught at the boundary.
    Panic = 5,
}

/// Opaque model handle.
pub struct CapsrouteModel {
    config: TrainConfig,
    model: ModelConfig,
    params: CapsNetParams<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(err: Error) -> CapsrouteStatus {
    let status = match err.exit_code() {
        1 => CapsrouteStatus::Usage,
        2 => CapsrouteStatus::Data,
        _ => CapsrouteStatus::Numeric,
    };
    set_error(err.to_string());
    status
}

fn null(what: &str) -> CapsrouteStatus {
    set_error(format!("{what} is null"));
    CapsrouteStatus::NullPointer
}

fn guard(f: impl FnOnce() -> CapsrouteStatus) -> CapsrouteStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| {
        set_error("internal panic".into());
        CapsrouteStatus::Panic
    })
}

/// # Safety
/// `p` must be null or a valid NUL-terminated string.
unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, CapsrouteStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        CapsrouteStatus::Usage
    })
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(e) => return fail(e),
        }
    };
}

macro_rules! arg {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(status) => return status,
        }
    };
}

/// Message of the most recent failure on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn capsroute_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn capsroute_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

fn config_from_text(text: &str) -> Result<TrainConfig, Error> {
    let cfg = resolve(&parse_pairs(text, "config")?)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Freshly initialised model from `key = value` config text (may be empty).
///
/// # Safety
/// `config_text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn capsroute_model_new(
    config_text: *const c_char,
    out: *mut *mut CapsrouteModel,
) -> CapsrouteStatus {
    guard(|| {
        if out.is_null() {
            return null("out");
        }
        let cfg = tri!(config_from_text(arg!(text(config_text, "config_text"))));
        let model = cfg.model.clone();
        let params = tri!(CapsNetParams::init(
            &model,
            cfg.routing.mode.uses_coefficients(),
            SeedStream::new(cfg.seed)
        ));
        *out = Box::into_raw(Box::new(CapsrouteModel {
            config: cfg,
            model,
            params,
        }));
        CapsrouteStatus::Ok
    })
}

/// Loads a checkpoint written by `capsroute train` or [`capsroute_model_save`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn capsroute_model_load(
    path: *const c_char,
    out: *mut *mut CapsrouteModel,
) -> CapsrouteStatus {
    guard(|| {
        if out.is_null() {
            return null("out");
        }
        let path = Path::new(arg!(text(path, "path")));
        let ck = tri!(Checkpoint::<f32>::load(path));
        let cfg = tri!(config_from_text(&ck.config_text));
        let model = cfg.model.clone();
        let params = tri!(ck.into_params(&model, cfg.routing.mode.uses_coefficients()));
        *out = Box::into_raw(Box::new(CapsrouteModel {
            config: cfg,
            model,
            params,
        }));
        CapsrouteStatus::Ok
    })
}

/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn capsroute_model_free(model: *mut CapsrouteModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn capsroute_model_save(
    model: *const CapsrouteModel,
    path: *const c_char,
) -> CapsrouteStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return null("model");
        };
        let path = PathBuf::from(arg!(text(path, "path")));
        tri!(Checkpoint::from_params(to_text(&m.config), &m.params).save(&path));
        CapsrouteStatus::Ok
    })
}

/// Number of output classes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn capsroute_model_num_classes(model: *const CapsrouteModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.classes)
}

/// Writes channels, height, width into `out[0..3]`.
///
/// # Safety
/// `model` must be a live handle and `out` must point to 3 writable values.
#[no_mangle]
pub unsafe extern "C" fn capsroute_model_input_shape(
    model: *const CapsrouteModel,
    out: *mut usize,
) -> CapsrouteStatus {
    let Some(m) = model.as_ref() else {
        return null("model");
    };
    if out.is_null() {
        return null("out");
    }
    let shape = [m.model.in_channels, m.model.height, m.model.width];
    ptr::copy_nonoverlapping(shape.as_ptr(), out, 3);
    CapsrouteStatus::Ok
}

/// Output capsule lengths for `count` images laid out N×C×H×W; writes
/// `count × classes` values into `lengths`, whose capacity is `lengths_len`.
///
/// # Safety
/// `images` must hold `count·C·H·W` floats and `lengths` `lengths_len` floats.
#[no_mangle]
pub unsafe extern "C" fn capsroute_model_lengths(
    model: *const CapsrouteModel,
    images: *const f32,
    count: usize,
    lengths: *mut f32,
    lengths_len: usize,
) -> CapsrouteStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return null("model");
        };
        if images.is_null() {
            return null("images");
        }
        if lengths.is_null() {
            return null("lengths");
        }
        let cfg = &m.model;
        let need = count * cfg.classes;
        if lengths_len < need {
            return fail(Error::Config(format!(
                "lengths buffer holds {lengths_len} values, need {need}"
            )));
        }
        if count == 0 {
            return CapsrouteStatus::Ok;
        }
        let per = cfg.in_channels * cfg.height * cfg.width;
        let data = std::slice::from_raw_parts(images, count * per).to_vec();
        let x = tri!(Tensor::new(
            &[count, cfg.in_channels, cfg.height, cfg.width],
            data
        ));
        let route = tri!(route_for(&m.params, &m.config.routing));
        let trace = tri!(forward(&x, &m.params, cfg, route));
        ptr::copy_nonoverlapping(trace.lengths().data().as_ptr(), lengths, need);
        CapsrouteStatus::Ok
    })
}

/// Routing configuration of the model: writes λ and γ.
///
/// # Safety
/// `model` must be a live handle; `lambda` and `gamma` may be null.
#[no_mangle]
pub unsafe extern "C" fn capsroute_model_routing(
    model: *const CapsrouteModel,
    lambda: *mut f64,
    gamma: *mut f64,
) -> CapsrouteStatus {
    let Some(m) = model.as_ref() else {
        return null("model");
    };
    let r: &RoutingConfig = &m.config.routing;
    if !lambda.is_null() {
        *lambda = r.lambda;
    }
    if !gamma.is_null() {
        *gamma = r.gamma;
    }
    CapsrouteStatus::Ok
}

/// Trains with `config_text`, writing metrics.csv, config.cfg and model.ckpt
/// into `out_dir`. `final_error_pct` (nullable) receives the last test error.
///
/// # Safety
/// String arguments must be NUL-terminated; `final_error_pct` null or writable.
#[no_mangle]
pub unsafe extern "C" fn capsroute_train(
    config_text: *const c_char,
    data_dir: *const c_char,
    out_dir: *const c_char,
    final_error_pct: *mut f64,
) -> CapsrouteStatus {
    guard(|| {
        let cfg = tri!(config_from_text(arg!(text(config_text, "config_text"))));
        let data = PathBuf::from(arg!(text(data_dir, "data_dir")));
        let out = PathBuf::from(arg!(text(out_dir, "out_dir")));
        let outcome = tri!(train_to_dir(&cfg, &data, &out));
        if !final_error_pct.is_null() {
            *final_error_pct = outcome.rows.last().map_or(f64::NAN, |r| r.eval_error_pct);
        }
        CapsrouteStatus::Ok
    })
}

/// Runs the gradient-check suite on seeds `first_seed..first_seed + seeds`.
/// Returns `Numeric` if any component exceeds its threshold; `worst`
/// (nullable) receives the largest relative error seen.
///
/// # Safety
/// `worst` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn capsroute_gradcheck(
    first_seed: u64,
    seeds: u64,
    use_f64: bool,
    worst: *mut f64,
) -> CapsrouteStatus {
    guard(|| {
        if seeds == 0 {
            return fail(Error::Config("seeds must be >= 1".into()));
        }
        let precision = if use_f64 {
            Precision::F64
        } else {
            Precision::F32
        };
        let reports = tri!(run_suite(first_seed..first_seed + seeds, precision, None));
        if !worst.is_null() {
            *worst = reports.iter().map(|r| r.max_error).fold(0.0, f64::max);
        }
        let failed: Vec<&str> = reports
            .iter()
            .filter(|r| !r.passed())
            .map(|r| r.component.name())
            .collect();
        if failed.is_empty() {
            CapsrouteStatus::Ok
        } else {
            fail(Error::GradientCheck(failed.join(", ")))
        }
    })
}
