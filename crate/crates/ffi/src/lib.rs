//! C ABI over the `bdsde` library.
//!
//! Every fallible call returns a [`BdsdeStatus`]. On failure the message and a JSON error
//! record are kept per thread and read back with [`bdsde_last_error_message`] and
//! [`bdsde_last_error_json`]. Objects cross the boundary as opaque handles that the caller
//! releases with the matching `*_free` function. Strings returned by the library are
//! either borrowed from a handle (valid until it is freed) or owned and released with
//! [`bdsde_string_free`], as documented per function.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use bdsde::experiment::presets::preset_table;
use bdsde::experiment::{error_record, run, ExperimentConfig, Overrides, RunSummary};
use bdsde::model::conditions::SampleSpec;
use bdsde::noise::{backward_ito_integral, reflected_forward_integral, sample_qwiener, NoisePath, TimeGrid};
use bdsde::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BdsdeStatus {
    Ok = 0,
    /// Null pointer, invalid UTF-8 or an index out of range.
    InvalidArgument = 1,
    /// Schema or validation failure (CLI exit code 2).
    Config = 2,
    /// Numerical failure (CLI exit code 3).
    Numerical = 3,
    /// I/O failure (CLI exit code 4).
    Io = 4,
    /// A panic was caught at the boundary.
    Internal = 5,
}

/// Parsed experiment configuration.
pub struct BdsdeConfig {
    config: ExperimentConfig,
    overrides: Overrides,
    experiment: CString,
}

/// Outcome of a completed experiment run.
pub struct BdsdeRun {
    summary: RunSummary,
    output_dir: CString,
    files: Vec<CString>,
}

/// One sampled backward-noise path.
pub struct BdsdeNoise {
    path: NoisePath,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<(CString, CString)>> = const { RefCell::new(None) };
}

fn to_cstring(s: &str) -> CString {
    CString::new(s.replace('\0', " ")).expect("interior NULs removed")
}

fn set_error(status: BdsdeStatus, message: &str, json: String) -> BdsdeStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = Some((to_cstring(message), to_cstring(&json))));
    status
}

fn from_error(err: &Error) -> BdsdeStatus {
    let status = match err.exit_code() {
        2 => BdsdeStatus::Config,
        3 => BdsdeStatus::Numerical,
        _ => BdsdeStatus::Io,
    };
    set_error(status, &err.to_string(), error_record(err))
}

fn argument_error(message: &str) -> BdsdeStatus {
    let json = serde_json::json!({ "kind": "invalid_argument", "exit_code": 2, "message": message }).to_string();
    set_error(BdsdeStatus::InvalidArgument, message, json)
}

fn guard(f: impl FnOnce() -> BdsdeStatus) -> BdsdeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => {
            if status == BdsdeStatus::Ok {
                LAST_ERROR.with(|e| *e.borrow_mut() = None);
            }
            status
        }
        Err(_) => {
            let json = serde_json::json!({ "kind": "internal", "exit_code": 3, "message": "panic" }).to_string();
            set_error(BdsdeStatus::Internal, "internal panic caught at the C boundary", json)
        }
    }
}

unsafe fn read_str<'a>(s: *const c_char, what: &str) -> Result<&'a str, BdsdeStatus> {
    if s.is_null() {
        return Err(argument_error(&format!("{what} is null")));
    }
    CStr::from_ptr(s).to_str().map_err(|_| argument_error(&format!("{what} is not valid UTF-8")))
}

macro_rules! non_null {
    ($p:expr, $what:expr) => {
        if $p.is_null() {
            return argument_error(concat!($what, " is null"));
        }
    };
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bdsde_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Borrowed until the next call.
#[no_mangle]
pub extern "C" fn bdsde_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |(m, _)| m.as_ptr()))
}

/// JSON record `{kind, exit_code, message}` of the last failed call, or null.
#[no_mangle]
pub extern "C" fn bdsde_last_error_json() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |(_, j)| j.as_ptr()))
}

/// Release a string returned as owned by this library. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn bdsde_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parse a TOML experiment configuration.
#[no_mangle]
pub unsafe extern "C" fn bdsde_config_from_toml(toml: *const c_char, out: *mut *mut BdsdeConfig) -> BdsdeStatus {
    guard(|| {
        non_null!(out, "out");
        *out = ptr::null_mut();
        let text = match read_str(toml, "toml") {
            Ok(t) => t,
            Err(s) => return s,
        };
        match ExperimentConfig::from_toml(text) {
            Ok(config) => {
                let experiment = to_cstring(config.experiment.name());
                *out = Box::into_raw(Box::new(BdsdeConfig { config, overrides: Overrides::default(), experiment }));
                BdsdeStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}

/// Override the master seed.
#[no_mangle]
pub unsafe extern "C" fn bdsde_config_set_seed(config: *mut BdsdeConfig, seed: u64) -> BdsdeStatus {
    guard(|| {
        non_null!(config, "config");
        (*config).overrides.seed = Some(seed);
        BdsdeStatus::Ok
    })
}

/// Override the output directory.
#[no_mangle]
pub unsafe extern "C" fn bdsde_config_set_output_dir(config: *mut BdsdeConfig, dir: *const c_char) -> BdsdeStatus {
    guard(|| {
        non_null!(config, "config");
        match read_str(dir, "dir") {
            Ok(d) => {
                (*config).overrides.out = Some(PathBuf::from(d));
                BdsdeStatus::Ok
            }
            Err(s) => s,
        }
    })
}

/// Experiment name of a configuration, borrowed from the handle.
#[no_mangle]
pub unsafe extern "C" fn bdsde_config_experiment(config: *const BdsdeConfig) -> *const c_char {
    if config.is_null() {
        return ptr::null();
    }
    (&*config).experiment.as_ptr()
}

#[no_mangle]
pub unsafe extern "C" fn bdsde_config_free(config: *mut BdsdeConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Run the configured experiment, writing its outputs to disk.
#[no_mangle]
pub unsafe extern "C" fn bdsde_run(config: *const BdsdeConfig, out: *mut *mut BdsdeRun) -> BdsdeStatus {
    guard(|| {
        non_null!(config, "config");
        non_null!(out, "out");
        *out = ptr::null_mut();
        let c = &*config;
        match run(c.config.clone(), &c.overrides) {
            Ok(summary) => {
                let output_dir = to_cstring(&summary.output_dir.to_string_lossy());
                let files = summary.files.iter().map(|f| to_cstring(f)).collect();
                *out = Box::into_raw(Box::new(BdsdeRun { summary, output_dir, files }));
                BdsdeStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}

/// Output directory of a run, borrowed from the handle.
#[no_mangle]
pub unsafe extern "C" fn bdsde_run_output_dir(run: *const BdsdeRun) -> *const c_char {
    if run.is_null() {
        return ptr::null();
    }
    (&*run).output_dir.as_ptr()
}

/// Number of files written by a run.
#[no_mangle]
pub unsafe extern "C" fn bdsde_run_file_count(run: *const BdsdeRun) -> usize {
    if run.is_null() {
        return 0;
    }
    (&*run).files.len()
}

/// Name of file `index` relative to the output directory, borrowed from the handle; null
/// when out of range.
#[no_mangle]
pub unsafe extern "C" fn bdsde_run_file_name(run: *const BdsdeRun, index: usize) -> *const c_char {
    if run.is_null() {
        return ptr::null();
    }
    (&*run).files.get(index).map_or(ptr::null(), |f| f.as_ptr())
}

/// Named scalar result of a run (for instance `max_relative`).
#[no_mangle]
pub unsafe extern "C" fn bdsde_run_result(run: *const BdsdeRun, key: *const c_char, value: *mut f64) -> BdsdeStatus {
    guard(|| {
        non_null!(run, "run");
        non_null!(value, "value");
        let key = match read_str(key, "key") {
            Ok(k) => k,
            Err(s) => return s,
        };
        match (&*run).summary.results.get(key) {
            Some(v) => {
                *value = *v;
                BdsdeStatus::Ok
            }
            None => argument_error(&format!("run has no result named '{key}'")),
        }
    })
}

/// Named boolean flag of a run (for instance `cauchy`).
#[no_mangle]
pub unsafe extern "C" fn bdsde_run_flag(run: *const BdsdeRun, key: *const c_char, value: *mut bool) -> BdsdeStatus {
    guard(|| {
        non_null!(run, "run");
        non_null!(value, "value");
        let key = match read_str(key, "key") {
            Ok(k) => k,
            Err(s) => return s,
        };
        match (&*run).summary.flags.get(key) {
            Some(v) => {
                *value = *v;
                BdsdeStatus::Ok
            }
            None => argument_error(&format!("run has no flag named '{key}'")),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn bdsde_run_free(run: *mut BdsdeRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Built-in preset table as an owned string; release with [`bdsde_string_free`].
#[no_mangle]
pub unsafe extern "C" fn bdsde_preset_table(out: *mut *mut c_char) -> BdsdeStatus {
    guard(|| {
        non_null!(out, "out");
        *out = ptr::null_mut();
        match preset_table(SampleSpec { samples: 2000, terminal_paths: 100, ..SampleSpec::default() }) {
            Ok(t) => {
                *out = to_cstring(&t).into_raw();
                BdsdeStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}

/// Sample the first `n` components of a Q-Wiener path with eigenvalues `lambdas[0..n)` on
/// a uniform grid of `steps` steps over `[t_start, t_end]`.
#[no_mangle]
pub unsafe extern "C" fn bdsde_noise_sample(
    lambdas: *const f64,
    n: usize,
    t_start: f64,
    t_end: f64,
    steps: usize,
    seed: u64,
    out: *mut *mut BdsdeNoise,
) -> BdsdeStatus {
    guard(|| {
        non_null!(out, "out");
        *out = ptr::null_mut();
        if n > 0 && lambdas.is_null() {
            return argument_error("lambdas is null");
        }
        let lambdas = if n == 0 { &[][..] } else { std::slice::from_raw_parts(lambdas, n) };
        let path = TimeGrid::new(t_start, t_end, steps).and_then(|g| sample_qwiener(lambdas, n, g, 0, seed));
        match path {
            Ok(path) => {
                *out = Box::into_raw(Box::new(BdsdeNoise { path }));
                BdsdeStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}

/// Value `B_j(t_k)` of a sampled path.
#[no_mangle]
pub unsafe extern "C" fn bdsde_noise_value(noise: *const BdsdeNoise, k: usize, j: usize, value: *mut f64) -> BdsdeStatus {
    guard(|| {
        non_null!(noise, "noise");
        non_null!(value, "value");
        let p = &(*noise).path;
        if k > p.grid().n_steps() || j >= p.components() {
            return argument_error("grid index or component out of range");
        }
        *value = p.b(k, j);
        BdsdeStatus::Ok
    })
}

unsafe fn integrand<'a>(noise: &NoisePath, values: *const f64, len: usize) -> Result<&'a [f64], BdsdeStatus> {
    if values.is_null() {
        return Err(argument_error("integrand is null"));
    }
    let expected = (noise.grid().n_steps() + 1) * noise.components();
    if len != expected {
        return Err(argument_error(&format!("integrand has {len} entries, expected {expected}")));
    }
    Ok(std::slice::from_raw_parts(values, len))
}

/// Backward Itô sum over steps `[k0, k1)`. `values` holds one row per grid point and one
/// column per component.
#[no_mangle]
pub unsafe extern "C" fn bdsde_backward_integral(
    noise: *const BdsdeNoise,
    values: *const f64,
    len: usize,
    k0: usize,
    k1: usize,
    result: *mut f64,
) -> BdsdeStatus {
    guard(|| {
        non_null!(noise, "noise");
        non_null!(result, "result");
        let p = &(*noise).path;
        let v = match integrand(p, values, len) {
            Ok(v) => v,
            Err(s) => return s,
        };
        match backward_ito_integral(v, p, k0, k1) {
            Ok(r) => {
                *result = r;
                BdsdeStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}

/// The same integral computed through the time reversal at `t_prime` (already negated).
#[no_mangle]
pub unsafe extern "C" fn bdsde_reflected_forward_integral(
    noise: *const BdsdeNoise,
    values: *const f64,
    len: usize,
    k0: usize,
    k1: usize,
    t_prime: f64,
    result: *mut f64,
) -> BdsdeStatus {
    guard(|| {
        non_null!(noise, "noise");
        non_null!(result, "result");
        let p = &(*noise).path;
        let v = match integrand(p, values, len) {
            Ok(v) => v,
            Err(s) => return s,
        };
        match reflected_forward_integral(v, p, k0, k1, t_prime) {
            Ok(r) => {
                *result = r;
                BdsdeStatus::Ok
            }
            Err(e) => from_error(&e),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn bdsde_noise_free(noise: *mut BdsdeNoise) {
    if !noise.is_null() {
        drop(Box::from_raw(noise));
    }
}
