//! C ABI over `specvid`.
//!
//! Every fallible call returns a [`SpecvidStatus`] and writes its result
//! through an out-pointer that is left untouched on failure. The message of
//! the most recent failure on the calling thread is available from
//! [`specvid_last_error`]. Handles are opaque and owned by the caller until
//! passed to their `_free` function. Panics never cross the boundary; they
//! surface as `SPECVID_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use specvid::calibration::Calibration;
use specvid::costmodel;
use specvid::engine::{run_video_detailed, RunOptions};
use specvid::router::{self, AggregationMode, Policy};
use specvid::synth::SyntheticFamily;
use specvid::traceio::{self, ReplayOptions, ReplayReport};
use specvid::{default_config, Error, ErrorKind, GenerationConfig, PromptSpec};

/// Result code of every fallible call. `SPECVID_STATUS_OK` is zero.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecvidStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    Validation = 5,
    Calibration = 6,
    Internal = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecvidPolicyKind {
    Threshold = 0,
    Random = 1,
    AlwaysAccept = 2,
    AlwaysReject = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecvidAggregation {
    MinFrame = 0,
    MeanFrame = 1,
}

/// Routing policy and run settings. `tau` is read only by threshold
/// policies, `accept_prob` and `rng_seed` only by random ones.
/// `num_blocks == 0` selects the default block count.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SpecvidRunParams {
    pub policy: SpecvidPolicyKind,
    pub tau: f64,
    pub accept_prob: f64,
    pub rng_seed: u64,
    pub force_reject_block0: bool,
    pub aggregation: SpecvidAggregation,
    pub num_blocks: usize,
    pub seed: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SpecvidRunStats {
    /// Accepted fraction of blocks after block 0.
    pub accept_rate: f64,
    pub time_s: f64,
    pub quality: f64,
    pub num_blocks: usize,
    pub accepted_blocks: usize,
    pub emitted_frames: usize,
}

/// Opaque calibration handle.
pub struct SpecvidCalibration {
    inner: Calibration,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> SpecvidStatus {
    match err.kind() {
        ErrorKind::Parse => SpecvidStatus::Parse,
        ErrorKind::Validation => SpecvidStatus::Validation,
        ErrorKind::Calibration => SpecvidStatus::Calibration,
        ErrorKind::Io => SpecvidStatus::Io,
        ErrorKind::Internal => SpecvidStatus::Internal,
    }
}

struct Failure(SpecvidStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(SpecvidStatus::NullPointer, format!("{what} is null"))
}

/// Run `f`, record any failure, and convert panics to `Internal`.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SpecvidStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            SpecvidStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            SpecvidStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(SpecvidStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn calibration_arg<'a>(p: *const SpecvidCalibration) -> Result<&'a Calibration, Failure> {
    p.as_ref().map(|c| &c.inner).ok_or_else(|| null("calibration"))
}

fn aggregation(a: SpecvidAggregation) -> AggregationMode {
    match a {
        SpecvidAggregation::MinFrame => AggregationMode::MinFrame,
        SpecvidAggregation::MeanFrame => AggregationMode::MeanFrame,
    }
}

fn policy(p: &SpecvidRunParams) -> Result<Policy, Failure> {
    let policy = match p.policy {
        SpecvidPolicyKind::Threshold => Policy::Threshold {
            tau: p.tau,
            force_reject_block0: p.force_reject_block0,
        },
        SpecvidPolicyKind::Random => Policy::Random {
            accept_prob: p.accept_prob,
            force_reject_block0: p.force_reject_block0,
            rng_seed: p.rng_seed,
        },
        SpecvidPolicyKind::AlwaysAccept => Policy::AlwaysAccept,
        SpecvidPolicyKind::AlwaysReject => Policy::AlwaysReject,
    };
    policy.validate()?;
    Ok(policy)
}

fn config(p: &SpecvidRunParams) -> GenerationConfig {
    let mut c = default_config();
    if p.num_blocks > 0 {
        c.num_blocks = p.num_blocks;
    }
    c.seed = p.seed;
    c
}

fn give_string(s: String, out: *mut *mut c_char) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|_| Failure(SpecvidStatus::Internal, "interior NUL in output".into()))?;
    unsafe { *out = c.into_raw() };
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn specvid_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or an empty string.
/// Valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn specvid_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Calibration fitted to the bundled reference table.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn specvid_calibration_default(out: *mut *mut SpecvidCalibration) -> SpecvidStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = Calibration::bundled()?;
        *out = Box::into_raw(Box::new(SpecvidCalibration { inner }));
        Ok(())
    })
}

/// Load a calibration TOML file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` as for
/// [`specvid_calibration_default`].
#[no_mangle]
pub unsafe extern "C" fn specvid_calibration_load(
    path: *const c_char,
    out: *mut *mut SpecvidCalibration,
) -> SpecvidStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = Calibration::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(SpecvidCalibration { inner }));
        Ok(())
    })
}

/// Release a handle. Null is ignored.
///
/// # Safety
/// `cal` must be null or a handle returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn specvid_calibration_free(cal: *mut SpecvidCalibration) {
    if !cal.is_null() {
        drop(Box::from_raw(cal));
    }
}

/// Run one synthetic prompt end to end.
///
/// # Safety
/// `cal` must be a live handle; `params` and `out` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn specvid_simulate_prompt(
    cal: *const SpecvidCalibration,
    params: *const SpecvidRunParams,
    prompt_index: usize,
    out: *mut SpecvidRunStats,
) -> SpecvidStatus {
    guard(|| {
        let cal = calibration_arg(cal)?;
        let params = params.as_ref().ok_or_else(|| null("params"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let policy = policy(params)?;
        let config = config(params);
        let prompt = PromptSpec::simulated(prompt_index);
        let family = SyntheticFamily::new(&config, cal);
        let mut decoder = family.decoder();
        let mut router = policy.router(&prompt.prompt_id);
        let options = RunOptions {
            aggregation: aggregation(params.aggregation),
            latency: cal.latency.clone(),
        };
        let art = run_video_detailed(&config, &prompt, family.models(), &mut decoder, &mut router, &options)?;
        let s = &art.summary;
        *out = SpecvidRunStats {
            accept_rate: s.accept_rate_excl_block0,
            time_s: s.total_time_s,
            quality: s.quality_proxy,
            num_blocks: s.block_traces.len(),
            accepted_blocks: s.block_traces.iter().filter(|t| t.decision.accepted()).count(),
            emitted_frames: art.emitted_frame_count(),
        };
        Ok(())
    })
}

/// Aggregate per-frame scores of one block.
///
/// # Safety
/// `scores` must point to `len` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn specvid_aggregate(
    scores: *const f64,
    len: usize,
    mode: SpecvidAggregation,
    out: *mut f64,
) -> SpecvidStatus {
    guard(|| {
        if scores.is_null() || out.is_null() {
            return Err(null("scores or out"));
        }
        let s = std::slice::from_raw_parts(scores, len);
        *out = router::aggregate_slice(s, aggregation(mode))?;
        Ok(())
    })
}

/// Threshold decision for one block: writes `true` to `accept` iff
/// `q >= tau`, except that block 0 is rejected when forced.
///
/// # Safety
/// `accept` must be writable.
#[no_mangle]
pub unsafe extern "C" fn specvid_decide_threshold(
    block_index: usize,
    q: f64,
    tau: f64,
    force_reject_block0: bool,
    accept: *mut bool,
) -> SpecvidStatus {
    guard(|| {
        if accept.is_null() {
            return Err(null("accept"));
        }
        let policy = Policy::Threshold { tau, force_reject_block0 };
        policy.validate()?;
        *accept = router::decide(&policy, None, block_index, Some(q))?.accepted();
        Ok(())
    })
}

/// `t_target_only / t`; both must be positive and finite.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn specvid_speedup(t: f64, t_target_only: f64, out: *mut f64) -> SpecvidStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = costmodel::speedup(t, t_target_only)?;
        Ok(())
    })
}

/// Replay a JSONL trace under `params` and return the report as JSON.
/// `params.seed` is ignored. The string must be released with
/// [`specvid_string_free`].
///
/// # Safety
/// `cal` must be a live handle, `trace` NUL-terminated, `params` and
/// `out_json` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn specvid_replay_jsonl(
    cal: *const SpecvidCalibration,
    trace: *const c_char,
    params: *const SpecvidRunParams,
    out_json: *mut *mut c_char,
) -> SpecvidStatus {
    guard(|| {
        let cal = calibration_arg(cal)?;
        let trace = str_arg(trace, "trace")?;
        let params = params.as_ref().ok_or_else(|| null("params"))?;
        if out_json.is_null() {
            return Err(null("out_json"));
        }
        let options = ReplayOptions {
            policy: policy(params)?,
            aggregation: aggregation(params.aggregation),
            latency: cal.latency.clone(),
            num_blocks: config(params).num_blocks,
        };
        let records = traceio::parse_trace_str(trace, options.num_blocks)?;
        let runs = traceio::replay(&records, &options, &cal.quality_proxy)?;
        let report = ReplayReport::new(runs, &options)?;
        let json = serde_json::to_string(&report).map_err(|e| Failure(SpecvidStatus::Internal, e.to_string()))?;
        give_string(json, out_json)
    })
}

/// Release a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn specvid_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
