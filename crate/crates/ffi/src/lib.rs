//! C ABI for the experiment runner: opaque experiment handles, integer
//! status codes, and UTF-8 JSON strings across the boundary.
//!
//! The header `include/intrinsic_flow.h` mirrors this surface (kept in sync
//! by hand; `cbindgen.toml` is provided for regeneration with cbindgen).
//!
//! Ownership rules:
//! * every `*mut IfExperiment` returned through an out-pointer is owned by
//!   the caller and must be released with [`if_experiment_free`];
//! * every `*mut c_char` returned by this library must be released with
//!   [`if_string_free`];
//! * all `const char*` arguments must be NUL-terminated UTF-8.

use intrinsic_flow::cli::{runner, Manifest};
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IfStatus {
    /// Success.
    IfOk = 0,
    /// A pointer argument was null or a string was not valid UTF-8.
    IfErrInvalidArgument = 1,
    /// The config failed schema validation.
    IfErrSchema = 2,
    /// The experiment failed numerically (partial outputs were kept).
    IfErrNumerical = 3,
    /// Filesystem failure.
    IfErrIo = 4,
    /// The experiment has not been run yet.
    IfErrNotRun = 5,
    /// A panic was caught at the boundary.
    IfErrPanic = 6,
}

thread_local! {
    static LAST_ERROR: std::cell::RefCell<Option<CString>> =
        const { std::cell::RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn run_error_status(e: &runner::RunError) -> IfStatus {
    match e.exit_code() {
        2 => IfStatus::IfErrSchema,
        3 => IfStatus::IfErrNumerical,
        _ => IfStatus::IfErrIo,
    }
}

/// An experiment: a parsed config plus, after a successful run, its manifest.
pub struct IfExperiment {
    raw_config: String,
    manifest: Option<Manifest>,
    output_dir: Option<String>,
}

fn guard<F: FnOnce() -> IfStatus>(f: F) -> IfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_last_error(msg);
            IfStatus::IfErrPanic
        }
    }
}

unsafe fn cstr_arg<'a>(ptr: *const c_char) -> Result<&'a str, IfStatus> {
    if ptr.is_null() {
        set_last_error("null pointer argument".into());
        return Err(IfStatus::IfErrInvalidArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_last_error("argument is not valid UTF-8".into());
        IfStatus::IfErrInvalidArgument
    })
}

/// Library version as a static NUL-terminated string (do not free).
#[no_mangle]
pub extern "C" fn if_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Creates an experiment from JSON config text. The config is validated on
/// `if_experiment_run`, not here.
///
/// # Safety
/// `json` must be a NUL-terminated UTF-8 string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn if_experiment_new_from_json(
    json: *const c_char,
    out: *mut *mut IfExperiment,
) -> IfStatus {
    guard(|| {
        if out.is_null() {
            set_last_error("null out-pointer".into());
            return IfStatus::IfErrInvalidArgument;
        }
        let text = match cstr_arg(json) {
            Ok(t) => t.to_string(),
            Err(s) => return s,
        };
        let handle = Box::new(IfExperiment {
            raw_config: text,
            manifest: None,
            output_dir: None,
        });
        *out = Box::into_raw(handle);
        IfStatus::IfOk
    })
}

/// Creates an experiment by reading a JSON config file.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn if_experiment_new_from_file(
    path: *const c_char,
    out: *mut *mut IfExperiment,
) -> IfStatus {
    guard(|| {
        if out.is_null() {
            set_last_error("null out-pointer".into());
            return IfStatus::IfErrInvalidArgument;
        }
        let p = match cstr_arg(path) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match std::fs::read_to_string(Path::new(p)) {
            Ok(text) => {
                let handle = Box::new(IfExperiment {
                    raw_config: text,
                    manifest: None,
                    output_dir: None,
                });
                *out = Box::into_raw(handle);
                IfStatus::IfOk
            }
            Err(e) => {
                set_last_error(e.to_string());
                IfStatus::IfErrIo
            }
        }
    })
}

/// Runs the experiment; artifacts are written as by the CLI `run` command.
///
/// # Safety
/// `exp` must be a live handle from one of the constructors.
#[no_mangle]
pub unsafe extern "C" fn if_experiment_run(exp: *mut IfExperiment) -> IfStatus {
    guard(|| {
        let Some(exp) = exp.as_mut() else {
            set_last_error("null experiment handle".into());
            return IfStatus::IfErrInvalidArgument;
        };
        match runner::run_config_str(&exp.raw_config) {
            Ok((manifest, dir)) => {
                exp.manifest = Some(manifest);
                exp.output_dir = Some(dir.display().to_string());
                IfStatus::IfOk
            }
            Err(e) => {
                let status = run_error_status(&e);
                set_last_error(e.to_string());
                status
            }
        }
    })
}

/// Manifest JSON of the last successful run; NULL if the experiment has not
/// run. Free with [`if_string_free`].
///
/// # Safety
/// `exp` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn if_experiment_manifest_json(exp: *const IfExperiment) -> *mut c_char {
    let result = catch_unwind(AssertUnwindSafe(|| {
        let exp = exp.as_ref()?;
        let manifest = exp.manifest.as_ref()?;
        CString::new(manifest.to_json()).ok()
    }));
    match result {
        Ok(Some(c)) => c.into_raw(),
        _ => ptr::null_mut(),
    }
}

/// Output directory of the last successful run; NULL before a run. Free
/// with [`if_string_free`].
///
/// # Safety
/// `exp` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn if_experiment_output_dir(exp: *const IfExperiment) -> *mut c_char {
    let result = catch_unwind(AssertUnwindSafe(|| {
        let exp = exp.as_ref()?;
        let dir = exp.output_dir.as_ref()?;
        CString::new(dir.as_str()).ok()
    }));
    match result {
        Ok(Some(c)) => c.into_raw(),
        _ => ptr::null_mut(),
    }
}

/// One summary metric of the last run. Returns `IfErrNotRun` before a run
/// and `IfErrInvalidArgument` for unknown keys.
///
/// # Safety
/// `exp` must be a live handle; `key` NUL-terminated UTF-8; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn if_experiment_metric(
    exp: *const IfExperiment,
    key: *const c_char,
    out: *mut f64,
) -> IfStatus {
    guard(|| {
        let Some(exp) = exp.as_ref() else {
            set_last_error("null experiment handle".into());
            return IfStatus::IfErrInvalidArgument;
        };
        if out.is_null() {
            set_last_error("null out-pointer".into());
            return IfStatus::IfErrInvalidArgument;
        }
        let key = match cstr_arg(key) {
            Ok(k) => k,
            Err(s) => return s,
        };
        let Some(manifest) = exp.manifest.as_ref() else {
            set_last_error("experiment has not been run".into());
            return IfStatus::IfErrNotRun;
        };
        match manifest.summary.get(key) {
            Some(v) => {
                *out = *v;
                IfStatus::IfOk
            }
            None => {
                set_last_error(format!("no metric named {key:?}"));
                IfStatus::IfErrInvalidArgument
            }
        }
    })
}

/// Convenience one-shot: parse, run, and (optionally) return the manifest.
/// `manifest_out` may be NULL.
///
/// # Safety
/// `json` must be NUL-terminated UTF-8; `manifest_out` NULL or valid.
#[no_mangle]
pub unsafe extern "C" fn if_run_json(
    json: *const c_char,
    manifest_out: *mut *mut c_char,
) -> IfStatus {
    guard(|| {
        let text = match cstr_arg(json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match runner::run_config_str(text) {
            Ok((manifest, _)) => {
                if !manifest_out.is_null() {
                    *manifest_out = CString::new(manifest.to_json())
                        .map(CString::into_raw)
                        .unwrap_or(ptr::null_mut());
                }
                IfStatus::IfOk
            }
            Err(e) => {
                let status = run_error_status(&e);
                set_last_error(e.to_string());
                status
            }
        }
    })
}

/// Message of the most recent error on this thread; NULL if none. Free with
/// [`if_string_free`].
#[no_mangle]
pub extern "C" fn if_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| {
        e.borrow()
            .as_ref()
            .map(|c| c.clone().into_raw())
            .unwrap_or(ptr::null_mut())
    })
}

/// Releases a string returned by this library. NULL is a no-op.
///
/// # Safety
/// `s` must have been returned by this library and not freed before.
#[no_mangle]
pub unsafe extern "C" fn if_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Releases an experiment handle. NULL is a no-op.
///
/// # Safety
/// `exp` must have been returned by a constructor and not freed before.
#[no_mangle]
pub unsafe extern "C" fn if_experiment_free(exp: *mut IfExperiment) {
    if !exp.is_null() {
        drop(Box::from_raw(exp));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(s: &str) -> CString {
        CString::new(s).unwrap()
    }

    #[test]
    fn version_is_a_c_string() {
        let v = unsafe { CStr::from_ptr(if_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }

    #[test]
    fn run_round_trip_through_the_abi() {
        let dir = std::env::temp_dir().join("if_ffi_test");
        let config = format!(
            r#"{{
                "experiment": "check-criteria",
                "seed": 3,
                "model": {{"kind": "rank_one", "n": 2, "m": 2, "r": 1}},
                "num_seeds": 3,
                "tolerances": {{"min": {{"frac_intersection_trivial": 1.0}}}},
                "output": {{"dir": {:?}, "prefix": "ffi"}}
            }}"#,
            dir.display()
        );
        let cfg = c(&config);
        let mut handle: *mut IfExperiment = std::ptr::null_mut();
        let status = unsafe { if_experiment_new_from_json(cfg.as_ptr(), &mut handle) };
        assert_eq!(status, IfStatus::IfOk);
        // metric before run reports not-run
        let mut val = 0.0f64;
        let key = c("frac_intersection_trivial");
        let status = unsafe { if_experiment_metric(handle, key.as_ptr(), &mut val) };
        assert_eq!(status, IfStatus::IfErrNotRun);

        let status = unsafe { if_experiment_run(handle) };
        assert_eq!(status, IfStatus::IfOk);
        let status = unsafe { if_experiment_metric(handle, key.as_ptr(), &mut val) };
        assert_eq!(status, IfStatus::IfOk);
        assert_eq!(val, 1.0);

        let manifest = unsafe { if_experiment_manifest_json(handle) };
        assert!(!manifest.is_null());
        let text = unsafe { CStr::from_ptr(manifest) }.to_str().unwrap();
        assert!(text.contains("\"experiment\": \"check-criteria\""));
        unsafe {
            if_string_free(manifest);
            if_experiment_free(handle);
        }
    }

    #[test]
    fn schema_errors_surface_with_messages() {
        let cfg = c("{not json");
        let mut out: *mut c_char = std::ptr::null_mut();
        let status = unsafe { if_run_json(cfg.as_ptr(), &mut out) };
        assert_eq!(status, IfStatus::IfErrSchema);
        assert!(out.is_null());
        let msg = if_last_error_message();
        assert!(!msg.is_null());
        let text = unsafe { CStr::from_ptr(msg) }.to_str().unwrap().to_string();
        assert!(text.contains("config error"), "{text}");
        unsafe { if_string_free(msg) };
    }

    #[test]
    fn null_arguments_are_rejected() {
        let mut handle: *mut IfExperiment = std::ptr::null_mut();
        let status = unsafe { if_experiment_new_from_json(std::ptr::null(), &mut handle) };
        assert_eq!(status, IfStatus::IfErrInvalidArgument);
        assert_eq!(
            unsafe { if_experiment_run(std::ptr::null_mut()) },
            IfStatus::IfErrInvalidArgument
        );
        unsafe { if_string_free(std::ptr::null_mut()) };
        unsafe { if_experiment_free(std::ptr::null_mut()) };
    }
}
