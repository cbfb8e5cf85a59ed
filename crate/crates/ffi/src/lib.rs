//! C ABI over the fedrelay library.
//!
//! Every entry point returns an [`FrStatus`]. On failure a message is kept
//! per thread and can be read with [`fr_last_error`] until the next call on
//! that thread. Strings and buffers handed out by this library must be
//! released with [`fr_string_free`] and [`fr_buffer_free`]; simulator
//! handles with [`fr_sim_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use fedrelay::config::{JobSpec, ScenarioConfig};
use fedrelay::guestfl::{history_json, run_direct, AppConfig};
use fedrelay::runtime::sim::Simulation;
use fedrelay::runtime::ControlReply;
use fedrelay::store::RunStore;
use fedrelay::wire::{decode_envelope, encode_envelope, frame_body, MsgId, WireError};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    /// Config or envelope JSON failed to parse or validate.
    InvalidConfig = 3,
    Truncated = 4,
    Malformed = 5,
    FrameTooLarge = 6,
    InvalidEnvelope = 7,
    /// The control plane refused a submission.
    Rejected = 8,
    NotFound = 9,
    /// A run stopped before every job or round completed.
    Incomplete = 10,
    Io = 11,
    Panic = 12,
}

/// Owned byte buffer returned across the boundary.
#[repr(C)]
pub struct FrBuffer {
    pub data: *mut u8,
    pub len: usize,
}

/// Opaque simulator handle.
pub struct FrSim {
    sim: Simulation,
    pending: Vec<(String, MsgId)>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(FrStatus, String);

impl From<WireError> for Failure {
    fn from(e: WireError) -> Self {
        let status = match e {
            WireError::Truncated { .. } => FrStatus::Truncated,
            WireError::Malformed(_) => FrStatus::Malformed,
            WireError::FrameTooLarge(_) => FrStatus::FrameTooLarge,
            WireError::Invalid(_) => FrStatus::InvalidEnvelope,
        };
        Failure(status, e.to_string())
    }
}

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure(FrStatus::InvalidConfig, e.to_string())
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FrStatus {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FrStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            FrStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(FrStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|e| Failure(FrStatus::InvalidUtf8, format!("{name}: {e}")))
}

unsafe fn bytes_arg<'a>(p: *const u8, len: usize, name: &str) -> Result<&'a [u8], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure(FrStatus::NullArgument, format!("{name} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn out_arg<T>(p: *mut T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(FrStatus::NullArgument, format!("{name} is null")))
    } else {
        Ok(())
    }
}

fn into_c_string(bytes: Vec<u8>) -> Result<*mut c_char, Failure> {
    let s = CString::new(bytes).map_err(|_| Failure(FrStatus::Malformed, "output contains a NUL byte".into()))?;
    Ok(s.into_raw())
}

fn parse<T: serde::de::DeserializeOwned>(json: &str, what: &str) -> Result<T, Failure> {
    serde_json::from_str(json).map_err(|e| config_err(format!("{what}: {e}")))
}

/// The last error recorded on this thread, or null. The pointer stays valid
/// until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn fr_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn fr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Releases a buffer returned by this library.
///
/// # Safety
/// `buf` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn fr_buffer_free(buf: FrBuffer) {
    if !buf.data.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(buf.data, buf.len)));
    }
}

/// Builds a frame from an envelope body in JSON form. The body is checked
/// exactly as the decoder would check it, and the frame carries the
/// canonical encoding.
///
/// # Safety
/// `body_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fr_frame_encode(body_json: *const c_char, out: *mut FrBuffer) -> FrStatus {
    guard(|| {
        out_arg(out, "out")?;
        let body = str_arg(body_json, "body_json")?;
        let env = decode_envelope(&frame_body(body.as_bytes())?)?;
        let frame = encode_envelope(&env)?.into_boxed_slice();
        let len = frame.len();
        *out = FrBuffer { data: Box::into_raw(frame) as *mut u8, len };
        Ok(())
    })
}

/// Decodes one frame and returns its canonical JSON body.
///
/// # Safety
/// `frame` must point to `len` readable bytes; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fr_frame_decode(frame: *const u8, len: usize, out_json: *mut *mut c_char) -> FrStatus {
    guard(|| {
        out_arg(out_json, "out_json")?;
        let env = decode_envelope(bytes_arg(frame, len, "frame")?)?;
        let canonical = encode_envelope(&env)?;
        *out_json = into_c_string(canonical[4..].to_vec())?;
        Ok(())
    })
}

/// Runs an app with every node calling the link in-process and returns
/// `history.json`.
///
/// # Safety
/// `app_json` must be a NUL-terminated string; `out_history` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fr_direct_run(app_json: *const c_char, out_history: *mut *mut c_char) -> FrStatus {
    guard(|| {
        out_arg(out_history, "out_history")?;
        let app: AppConfig = parse(str_arg(app_json, "app_json")?, "app")?;
        let run = run_direct(&app).map_err(config_err)?;
        if let Some(reason) = run.failure {
            return Err(Failure(FrStatus::Incomplete, reason));
        }
        *out_history = into_c_string(history_json(&run.history))?;
        Ok(())
    })
}

/// Creates a simulator for `scenario_json`. When `runs_dir` is non-null,
/// run artifacts are written below it.
///
/// # Safety
/// String arguments must be NUL-terminated or (for `runs_dir`) null;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fr_sim_new(
    scenario_json: *const c_char,
    runs_dir: *const c_char,
    out: *mut *mut FrSim,
) -> FrStatus {
    guard(|| {
        out_arg(out, "out")?;
        let scenario: ScenarioConfig = parse(str_arg(scenario_json, "scenario_json")?, "scenario")?;
        let store = if runs_dir.is_null() {
            None
        } else {
            let dir = PathBuf::from(str_arg(runs_dir, "runs_dir")?);
            std::fs::create_dir_all(&dir).map_err(|e| Failure(FrStatus::Io, format!("{}: {e}", dir.display())))?;
            Some(RunStore::new(&dir))
        };
        let sim = Simulation::new(scenario, store).map_err(config_err)?;
        *out = Box::into_raw(Box::new(FrSim { sim, pending: Vec::new() }));
        Ok(())
    })
}

/// Releases a simulator. Null is ignored.
///
/// # Safety
/// `sim` must come from [`fr_sim_new`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn fr_sim_free(sim: *mut FrSim) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

unsafe fn sim_arg<'a>(sim: *mut FrSim) -> Result<&'a mut FrSim, Failure> {
    sim.as_mut().ok_or_else(|| Failure(FrStatus::NullArgument, "sim is null".into()))
}

/// Queues a job. `app_json` may be null when the job needs no guest app.
/// The control plane accepts or refuses it once the simulator runs.
///
/// # Safety
/// `sim` must be a live handle; strings must be NUL-terminated or null.
#[no_mangle]
pub unsafe extern "C" fn fr_sim_submit(sim: *mut FrSim, job_json: *const c_char, app_json: *const c_char) -> FrStatus {
    guard(|| {
        let h = sim_arg(sim)?;
        let job: JobSpec = parse(str_arg(job_json, "job_json")?, "job")?;
        let app: Option<AppConfig> =
            if app_json.is_null() { None } else { Some(parse(str_arg(app_json, "app_json")?, "app")?) };
        let id = job.job_id.clone();
        let call = h.sim.submit(job, app);
        h.pending.push((id, call));
        Ok(())
    })
}

/// Runs until every accepted job is terminal or the scenario horizon is
/// reached, then writes each job's artifacts. Returns `Rejected` if any
/// queued submission was refused; the accepted ones still run.
///
/// # Safety
/// `sim` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn fr_sim_run(sim: *mut FrSim) -> FrStatus {
    guard(|| {
        let h = sim_arg(sim)?;
        let horizon = h.sim.scenario().horizon_ms;
        let mut jobs = Vec::new();
        let mut refused = Vec::new();
        for (job_id, call) in std::mem::take(&mut h.pending) {
            let reply = loop {
                if let Some(r) = h.sim.take_reply(call) {
                    break Some(r);
                }
                if !h.sim.step() {
                    break None;
                }
            };
            match reply {
                Some(Ok(ControlReply::Status { .. })) => jobs.push(job_id),
                Some(Ok(ControlReply::Error { code, message })) => refused.push(format!("{job_id}: {code}: {message}")),
                Some(Ok(other)) => refused.push(format!("{job_id}: unexpected reply {other:?}")),
                Some(Err(e)) => refused.push(format!("{job_id}: {e}")),
                None => refused.push(format!("{job_id}: no reply to SUBMIT")),
            }
        }
        let done = h.sim.run_jobs(&jobs);
        for j in &jobs {
            h.sim.finish_job(j);
        }
        if !refused.is_empty() {
            Err(Failure(FrStatus::Rejected, refused.join("; ")))
        } else if !done {
            Err(Failure(FrStatus::Incomplete, format!("jobs still running at the {horizon} ms horizon")))
        } else {
            Ok(())
        }
    })
}

/// Submits one job and runs it to a terminal state. Writes the final
/// status as JSON.
///
/// # Safety
/// `sim` must be a live handle; strings must be NUL-terminated or (for
/// `app_json`) null; `out_status` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fr_sim_run_job(
    sim: *mut FrSim,
    job_json: *const c_char,
    app_json: *const c_char,
    out_status: *mut *mut c_char,
) -> FrStatus {
    guard(|| {
        out_arg(out_status, "out_status")?;
        let h = sim_arg(sim)?;
        let job: JobSpec = parse(str_arg(job_json, "job_json")?, "job")?;
        let app: Option<AppConfig> =
            if app_json.is_null() { None } else { Some(parse(str_arg(app_json, "app_json")?, "app")?) };
        match h.sim.run_job(job, app) {
            Ok(status) => {
                *out_status = into_c_string(serde_json::to_vec(&status).expect("status serializes"))?;
                Ok(())
            }
            Err(ControlReply::Error { code, message }) => {
                Err(Failure(FrStatus::Rejected, format!("{code}: {message}")))
            }
            Err(other) => Err(Failure(FrStatus::Rejected, format!("unexpected reply {other:?}"))),
        }
    })
}

/// Current status of `job_id` as JSON.
///
/// # Safety
/// `sim` must be a live handle; `job_id` NUL-terminated; `out_status`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn fr_sim_status_json(
    sim: *mut FrSim,
    job_id: *const c_char,
    out_status: *mut *mut c_char,
) -> FrStatus {
    guard(|| {
        out_arg(out_status, "out_status")?;
        let h = sim_arg(sim)?;
        let id = str_arg(job_id, "job_id")?;
        let status = h.sim.status(id).ok_or_else(|| Failure(FrStatus::NotFound, format!("unknown job {id}")))?;
        *out_status = into_c_string(serde_json::to_vec(&status).expect("status serializes"))?;
        Ok(())
    })
}

/// Simulated time in milliseconds.
///
/// # Safety
/// `sim` must be a live handle or null (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn fr_sim_now(sim: *const FrSim) -> u64 {
    sim.as_ref().map_or(0, |h| h.sim.now())
}
