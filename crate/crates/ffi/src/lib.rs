//! C ABI bindings.
//!
//! Every function returns an [`FsStatus`]; on failure a message is kept per
//! thread and can be read with [`fs_last_error_message`]. Networks are
//! opaque handles created by `fs_network_*` and released with
//! [`fs_network_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use feedersim::cli::{cmd_simulate, RunArgs};
use feedersim::config::ScenarioConfig;
use feedersim::inverters::{volt_var_target, volt_watt_target, DroopSettings};
use feedersim::network::{generate_synthetic_feeder, FeederSpec, NetworkModel};
use feedersim::powerflow::{solve_ac, InjectionSet, DEFAULT_MAX_ITER, DEFAULT_TOLERANCE};
use feedersim::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Topology = 5,
    Divergence = 6,
    Config = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Opaque network handle.
pub struct FsNetwork {
    model: NetworkModel,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(err: &Error) -> FsStatus {
    match err {
        Error::Topology(_) => FsStatus::Topology,
        Error::Parameter(_) => FsStatus::InvalidArgument,
        Error::Divergence { .. } => FsStatus::Divergence,
        Error::Config(_) => FsStatus::Config,
        Error::Io(_) => FsStatus::Io,
        Error::Json(_) | Error::Csv(_) => FsStatus::Parse,
    }
}

fn guard<F: FnOnce() -> Result<(), FsStatus>>(f: F) -> FsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FsStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic");
            FsStatus::Panic
        }
    }
}

fn fail(err: Error) -> FsStatus {
    let s = status_of(&err);
    set_error(err.to_string());
    s
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, FsStatus> {
    if p.is_null() {
        set_error("null path");
        return Err(FsStatus::NullPointer);
    }
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(FsStatus::InvalidArgument)
        }
    }
}

/// Copies the last error message of this thread into `buf` as a
/// NUL-terminated string. Returns the buffer size needed, including the
/// terminator; nothing is written when `buf` is null or too small.
///
/// # Safety
///
/// `buf` must be null or valid for writes of `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn fs_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let need = msg.len() + 1;
        if !buf.is_null() && len >= need {
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), msg.len());
            *buf.add(msg.len()) = 0;
        }
        need
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a network JSON file.
///
/// # Safety
///
/// `path` must be null or a NUL-terminated string; `out` must be null or valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn fs_network_load_json(
    path: *const c_char,
    out: *mut *mut FsNetwork,
) -> FsStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output handle");
            return Err(FsStatus::NullPointer);
        }
        let path = path_arg(path)?;
        let model = NetworkModel::load_json(&path).map_err(fail)?;
        *out = Box::into_raw(Box::new(FsNetwork { model }));
        Ok(())
    })
}

/// Generates a synthetic radial feeder with `nodes` buses including the
/// slack.
///
/// # Safety
///
/// `out` must be null or valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn fs_network_generate(
    nodes: usize,
    seed: u64,
    segment_r_ohm: f64,
    out: *mut *mut FsNetwork,
) -> FsStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output handle");
            return Err(FsStatus::NullPointer);
        }
        let spec = FeederSpec {
            nodes,
            seed,
            segment_r_ohm,
            ..FeederSpec::default()
        };
        let model = generate_synthetic_feeder(&spec).map_err(fail)?;
        *out = Box::into_raw(Box::new(FsNetwork { model }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
///
/// `net` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fs_network_free(net: *mut FsNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Number of buses including the slack; 0 for a null handle.
///
/// # Safety
///
/// `net` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fs_network_bus_count(net: *const FsNetwork) -> usize {
    net.as_ref().map_or(0, |n| n.model.bus_count())
}

/// Number of non-slack buses, the length of the injection arrays.
///
/// # Safety
///
/// `net` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fs_network_reduced_count(net: *const FsNetwork) -> usize {
    net.as_ref().map_or(0, |n| n.model.reduced_buses().len())
}

/// Id of the `index`-th non-slack bus, or `usize::MAX` when out of range.
///
/// # Safety
///
/// `net` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fs_network_reduced_bus(net: *const FsNetwork, index: usize) -> usize {
    net.as_ref()
        .and_then(|n| n.model.reduced_buses().get(index).copied())
        .unwrap_or(usize::MAX)
}

/// AC power flow. `p_kw` and `q_kvar` hold signed injections per non-slack
/// bus (`n_reduced` entries, in `fs_network_reduced_bus` order);
/// `v_pu_out` receives the voltage magnitude of every bus (`n_bus`
/// entries, by bus id).
///
/// # Safety
///
/// `net` must be null or a live handle; the arrays must be null or hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn fs_power_flow(
    net: *const FsNetwork,
    p_kw: *const f64,
    q_kvar: *const f64,
    n_reduced: usize,
    v_pu_out: *mut f64,
    n_bus: usize,
) -> FsStatus {
    guard(|| {
        let Some(net) = net.as_ref() else {
            set_error("null network");
            return Err(FsStatus::NullPointer);
        };
        if p_kw.is_null() || q_kvar.is_null() || v_pu_out.is_null() {
            set_error("null buffer");
            return Err(FsStatus::NullPointer);
        }
        if n_reduced != net.model.reduced_buses().len() {
            set_error(format!(
                "expected {} injections, got {n_reduced}",
                net.model.reduced_buses().len()
            ));
            return Err(FsStatus::InvalidArgument);
        }
        if n_bus < net.model.bus_count() {
            set_error(format!("output needs {} entries", net.model.bus_count()));
            return Err(FsStatus::BufferTooSmall);
        }
        let inj = InjectionSet {
            p: std::slice::from_raw_parts(p_kw, n_reduced).to_vec(),
            q: std::slice::from_raw_parts(q_kvar, n_reduced).to_vec(),
        };
        let sol = solve_ac(&net.model, &inj, DEFAULT_TOLERANCE, DEFAULT_MAX_ITER)
            .and_then(|s| s.into_result())
            .map_err(fail)?;
        let out = std::slice::from_raw_parts_mut(v_pu_out, n_bus);
        for (o, v) in out.iter_mut().zip(&sol.v) {
            *o = v.norm();
        }
        Ok(())
    })
}

/// Steady-state droop targets at voltage `v_pu` with the default
/// settings: reactive power as a fraction of the rating (non-positive)
/// and active power as a fraction of available output.
///
/// # Safety
///
/// The output pointers must be null or valid for an `f64` write.
#[no_mangle]
pub unsafe extern "C" fn fs_droop_targets(
    v_pu: f64,
    q_frac_out: *mut f64,
    p_frac_out: *mut f64,
) -> FsStatus {
    guard(|| {
        if q_frac_out.is_null() || p_frac_out.is_null() {
            set_error("null output");
            return Err(FsStatus::NullPointer);
        }
        if !v_pu.is_finite() {
            set_error("voltage must be finite");
            return Err(FsStatus::InvalidArgument);
        }
        let s = DroopSettings::default();
        *q_frac_out = volt_var_target(v_pu, &s);
        *p_frac_out = volt_watt_target(v_pu, &s);
        Ok(())
    })
}

/// Runs the `simulate` command for a config file and writes its outputs
/// below `out_dir`. The run directory is copied into `run_dir_out` when
/// that buffer is non-null and large enough.
///
/// # Safety
///
/// Paths must be null or NUL-terminated; `run_dir_out` must be null or valid for `run_dir_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn fs_simulate(
    config_path: *const c_char,
    out_dir: *const c_char,
    run_dir_out: *mut c_char,
    run_dir_len: usize,
) -> FsStatus {
    guard(|| {
        let config = path_arg(config_path)?;
        let out = path_arg(out_dir)?;
        let args = RunArgs {
            config: config.clone(),
            out,
            seed: None,
            jobs: None,
            step_seconds: None,
        };
        let cfg = ScenarioConfig::load(&config).map_err(fail)?;
        let dir = cmd_simulate(&cfg, &args).map_err(fail)?;
        if !run_dir_out.is_null() {
            let s = dir.display().to_string();
            if run_dir_len < s.len() + 1 {
                set_error(format!("run directory needs {} bytes", s.len() + 1));
                return Err(FsStatus::BufferTooSmall);
            }
            ptr::copy_nonoverlapping(s.as_ptr(), run_dir_out.cast::<u8>(), s.len());
            *run_dir_out.add(s.len()) = 0;
        }
        Ok(())
    })
}
