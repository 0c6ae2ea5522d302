//! C ABI for the motion generation engine. Handles are opaque pointers,
//! every call returns a status code, and the last error message is kept in
//! thread-local storage.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use mofusion::checkpoint::{self, WeightKind};
use mofusion::error::Error;
use mofusion::footskate::{cleanup, CleanupConfig, ContactConfig};
use mofusion::motion::{load_motion_with_spec, save_motion_with_spec};
use mofusion::sampling::{InferenceEngine, SamplerConfig};
use mofusion::skeleton::Skeleton;

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum MofusionStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Invalid configuration, arguments, or file contents.
    Config = 3,
    /// Numerical or backend failure at run time.
    Runtime = 4,
    /// A panic was caught at the FFI boundary.
    Panic = 5,
}

/// Opaque engine handle. Create with `mofusion_engine_load`, release with
/// `mofusion_engine_free`.
#[repr(C)]
pub struct MofusionEngine {
    _opaque: [u8; 0],
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().map(|c| if c == '\0' { ' ' } else { c }).collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn status_of(err: &Error) -> MofusionStatus {
    match err {
        Error::NonFinite(_) | Error::Numerical(_) | Error::Candle(_) => MofusionStatus::Runtime,
        _ => MofusionStatus::Config,
    }
}

fn fail(err: Error) -> MofusionStatus {
    let status = status_of(&err);
    set_error(&err.to_string());
    status
}

fn guard(f: impl FnOnce() -> MofusionStatus) -> MofusionStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("panic at FFI boundary");
            MofusionStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` must be a valid NUL-terminated string or the call fails.
unsafe fn cstr<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, MofusionStatus> {
    if ptr.is_null() {
        set_error(&format!("{what} is null"));
        return Err(MofusionStatus::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(&format!("{what} is not valid UTF-8"));
        MofusionStatus::InvalidUtf8
    })
}

unsafe fn engine_ref<'a>(
    handle: *const MofusionEngine,
) -> Result<&'a InferenceEngine, MofusionStatus> {
    if handle.is_null() {
        set_error("engine handle is null");
        return Err(MofusionStatus::NullArgument);
    }
    Ok(&*(handle as *const InferenceEngine))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mofusion_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message describing the most recent failure on this thread. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mofusion_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint directory (EMA weights when present, raw otherwise)
/// and writes the engine handle to `out`.
///
/// # Safety
/// `checkpoint_dir` must be NUL-terminated; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mofusion_engine_load(
    checkpoint_dir: *const c_char,
    out: *mut *mut MofusionEngine,
) -> MofusionStatus {
    guard(|| {
        if out.is_null() {
            set_error("out pointer is null");
            return MofusionStatus::NullArgument;
        }
        let dir = match cstr(checkpoint_dir, "checkpoint_dir") {
            Ok(s) => Path::new(s),
            Err(st) => return st,
        };
        let device = candle_core::Device::Cpu;
        let loaded = match checkpoint::load_model(dir, WeightKind::Ema, &device)
            .or_else(|_| checkpoint::load_model(dir, WeightKind::Raw, &device))
        {
            Ok(l) => l,
            Err(e) => return fail(e),
        };
        let engine = Box::new(InferenceEngine::new(loaded));
        *out = Box::into_raw(engine) as *mut MofusionEngine;
        MofusionStatus::Ok
    })
}

/// Releases an engine handle. A null handle is a no-op.
///
/// # Safety
/// `handle` must have come from `mofusion_engine_load` and not be used again.
#[no_mangle]
pub unsafe extern "C" fn mofusion_engine_free(handle: *mut MofusionEngine) {
    if !handle.is_null() {
        drop(Box::from_raw(handle as *mut InferenceEngine));
    }
}

/// Generates a motion for `prompt` and writes it to `out_path` as a .mot
/// file with an embedded representation header.
///
/// `frames` must be within the model's trained window. `steps == 0` and
/// `guidance_scale < 0` select the sampler defaults.
///
/// # Safety
/// All pointer arguments must satisfy the usual C string contracts.
#[no_mangle]
pub unsafe extern "C" fn mofusion_engine_generate(
    handle: *const MofusionEngine,
    prompt: *const c_char,
    frames: u64,
    seed: u64,
    steps: u32,
    guidance_scale: f64,
    out_path: *const c_char,
) -> MofusionStatus {
    guard(|| {
        let engine = match engine_ref(handle) {
            Ok(e) => e,
            Err(st) => return st,
        };
        let prompt = match cstr(prompt, "prompt") {
            Ok(s) => s,
            Err(st) => return st,
        };
        let out_path = match cstr(out_path, "out_path") {
            Ok(s) => Path::new(s),
            Err(st) => return st,
        };
        let mut config = SamplerConfig { seed, ..Default::default() };
        if steps > 0 {
            config.steps = steps as usize;
        }
        if guidance_scale >= 0.0 {
            config.guidance_scale = guidance_scale;
        }
        let (motion, _timing, _counters) =
            match engine.generate(prompt, frames as usize, &config, None) {
                Ok(r) => r,
                Err(e) => return fail(e),
            };
        let spec = engine.loaded.meta.representation;
        if let Err(e) = save_motion_with_spec(&motion, Some(&spec), out_path) {
            return fail(e);
        }
        MofusionStatus::Ok
    })
}

/// Runs footskate cleanup on a .mot file (desk skeleton, default thresholds)
/// and writes the corrected motion to `out_path`. When non-null,
/// `skate_before` and `skate_after` receive the skating ratios.
///
/// # Safety
/// Path arguments must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn mofusion_cleanup_file(
    in_path: *const c_char,
    out_path: *const c_char,
    skate_before: *mut f64,
    skate_after: *mut f64,
) -> MofusionStatus {
    guard(|| {
        let in_path = match cstr(in_path, "in_path") {
            Ok(s) => Path::new(s),
            Err(st) => return st,
        };
        let out_path = match cstr(out_path, "out_path") {
            Ok(s) => Path::new(s),
            Err(st) => return st,
        };
        let (motion, spec) = match load_motion_with_spec(in_path) {
            Ok(r) => r,
            Err(e) => return fail(e),
        };
        let spec = match spec {
            Some(s) => s,
            None => {
                return fail(Error::Format(
                    "motion file has no representation header".into(),
                ))
            }
        };
        let skeleton = Skeleton::desk_default();
        let (fixed, report) = match cleanup(
            &motion,
            &spec,
            &skeleton,
            &CleanupConfig::default(),
            &ContactConfig::default(),
        ) {
            Ok(r) => r,
            Err(e) => return fail(e),
        };
        if let Err(e) = save_motion_with_spec(&fixed, Some(&spec), out_path) {
            return fail(e);
        }
        if !skate_before.is_null() {
            *skate_before = report.skate_ratio_before;
        }
        if !skate_after.is_null() {
            *skate_after = report.skate_ratio_after;
        }
        MofusionStatus::Ok
    })
}
