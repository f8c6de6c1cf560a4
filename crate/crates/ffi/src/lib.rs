//! C ABI over the feedback-opf core.
//!
//! Every function returns an [`FopfStatus`]; results go through out-pointers.
//! On failure, [`fopf_last_error`] returns a message for the calling thread.
//! Handles are opaque and must be released with the matching `_free` call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use feedback_opf::controller::{local_update, rho_alpha, tracking_bound, LocalView};
use feedback_opf::feeder::{build_sensitivities, load_feeder, parse_feeder, spectral_norm, FeederGraph, LinearVoltageModel};
use feedback_opf::policy::{forward, PolicyParams};
use feedback_opf::powerflow::{solve_nonlinear, InjectionState};
use feedback_opf::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FopfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    Numerical = 4,
    Io = 5,
    Panic = 6,
}

/// Loaded feeder together with its linearized voltage model.
pub struct FopfFeeder {
    graph: FeederGraph,
    model: LinearVoltageModel,
}

/// Trained policy checkpoint.
pub struct FopfPolicy {
    params: PolicyParams,
}

/// Quantities one node needs for its update.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FopfLocalView {
    pub p: f64,
    pub q: f64,
    pub v_hat: f64,
    pub p_u: f64,
    pub q_u: f64,
    pub p_floor: f64,
    pub q_floor: f64,
    pub weight: f64,
    pub p_lo: f64,
    pub p_hi: f64,
    pub q_lo: f64,
    pub q_hi: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> FopfStatus {
    match err {
        Error::Parse { .. }
        | Error::Cycle { .. }
        | Error::Disconnected { .. }
        | Error::DuplicateLine { .. }
        | Error::NonPositiveImpedance { .. }
        | Error::UnknownBus(_) => FopfStatus::Parse,
        Error::Io { .. } => FopfStatus::Io,
        Error::Dimension(_) | Error::InvalidConstants(_) | Error::Config(_) | Error::TapeMismatch => FopfStatus::InvalidArgument,
        _ => FopfStatus::Numerical,
    }
}

/// Run `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), FopfError>) -> FopfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FopfStatus::Ok
        }
        Ok(Err(FopfError(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            FopfStatus::Panic
        }
    }
}

struct FopfError(FopfStatus, String);

impl From<Error> for FopfError {
    fn from(e: Error) -> Self {
        FopfError(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> FopfError {
    FopfError(FopfStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> FopfError {
    FopfError(FopfStatus::InvalidArgument, msg.into())
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, FopfError> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn input<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], FopfError> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], FopfError> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn store<T>(out: *mut T, value: T, what: &str) -> Result<(), FopfError> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

fn boxed_feeder(graph: FeederGraph) -> *mut FopfFeeder {
    let model = build_sensitivities(&graph, graph.v0);
    Box::into_raw(Box::new(FopfFeeder { graph, model }))
}

/// Message for the last failed call on this thread, or NULL. Valid until the next call.
#[no_mangle]
pub extern "C" fn fopf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Load a feeder file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fopf_feeder_load(path: *const c_char, out: *mut *mut FopfFeeder) -> FopfStatus {
    guard(|| {
        let path = c_str(path, "path")?;
        let graph = load_feeder(Path::new(path))?;
        store(out, boxed_feeder(graph), "out")
    })
}

/// Parse feeder text.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fopf_feeder_parse(text: *const c_char, out: *mut *mut FopfFeeder) -> FopfStatus {
    guard(|| {
        let text = c_str(text, "text")?;
        let graph = parse_feeder(text)?;
        store(out, boxed_feeder(graph), "out")
    })
}

/// Release a feeder handle. NULL is ignored.
///
/// # Safety
/// `feeder` must come from a feeder constructor and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn fopf_feeder_free(feeder: *mut FopfFeeder) {
    if !feeder.is_null() {
        drop(Box::from_raw(feeder));
    }
}

/// Number of non-substation buses.
///
/// # Safety
/// `feeder` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fopf_feeder_bus_count(feeder: *const FopfFeeder, out: *mut usize) -> FopfStatus {
    guard(|| {
        let f = feeder.as_ref().ok_or_else(|| null("feeder"))?;
        store(out, f.model.n(), "out")
    })
}

/// Copy the R and X sensitivity matrices, row-major, into buffers of `len` = N*N doubles.
///
/// # Safety
/// `r_out` and `x_out` must each hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn fopf_feeder_sensitivities(feeder: *const FopfFeeder, r_out: *mut f64, x_out: *mut f64, len: usize) -> FopfStatus {
    guard(|| {
        let f = feeder.as_ref().ok_or_else(|| null("feeder"))?;
        let n = f.model.n();
        if len != n * n {
            return Err(invalid(format!("buffers must hold {} values, got {len}", n * n)));
        }
        let r = output(r_out, len, "r_out")?;
        let x = output(x_out, len, "x_out")?;
        for i in 0..n {
            for j in 0..n {
                r[i * n + j] = f.model.r[(i, j)];
                x[i * n + j] = f.model.x[(i, j)];
            }
        }
        Ok(())
    })
}

/// Spectral norm of `[R X]`.
///
/// # Safety
/// `feeder` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fopf_feeder_spectral_norm(feeder: *const FopfFeeder, out: *mut f64) -> FopfStatus {
    guard(|| {
        let f = feeder.as_ref().ok_or_else(|| null("feeder"))?;
        store(out, spectral_norm(&f.model), "out")
    })
}

/// Nonlinear power flow. Inputs hold `n` per-bus values (bus 1..N); `v_out`
/// receives squared voltage magnitudes. `iterations_out` may be NULL.
///
/// # Safety
/// All arrays must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn fopf_power_flow(
    feeder: *const FopfFeeder,
    p: *const f64,
    q: *const f64,
    p_u: *const f64,
    q_u: *const f64,
    n: usize,
    v_out: *mut f64,
    iterations_out: *mut usize,
) -> FopfStatus {
    guard(|| {
        let f = feeder.as_ref().ok_or_else(|| null("feeder"))?;
        if n != f.model.n() {
            return Err(invalid(format!("feeder has {} buses, got {n}", f.model.n())));
        }
        let s = InjectionState {
            p: input(p, n, "p")?.to_vec(),
            q: input(q, n, "q")?.to_vec(),
            p_u: input(p_u, n, "p_u")?.to_vec(),
            q_u: input(q_u, n, "q_u")?.to_vec(),
        };
        let v = output(v_out, n, "v_out")?;
        let sol = solve_nonlinear(&f.graph, &s, f.graph.v0)?;
        if !sol.converged {
            return Err(FopfError(FopfStatus::Numerical, "power flow did not converge".into()));
        }
        v.copy_from_slice(&sol.v);
        if !iterations_out.is_null() {
            iterations_out.write(sol.iterations);
        }
        Ok(())
    })
}

/// Load a policy checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fopf_policy_load(path: *const c_char, out: *mut *mut FopfPolicy) -> FopfStatus {
    guard(|| {
        let path = c_str(path, "path")?;
        let params = PolicyParams::load(Path::new(path))?;
        store(out, Box::into_raw(Box::new(FopfPolicy { params })), "out")
    })
}

/// Release a policy handle. NULL is ignored.
///
/// # Safety
/// `policy` must come from [`fopf_policy_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn fopf_policy_free(policy: *mut FopfPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Policy output `MLP(d) + k v` for `bus`; `channel` 0 is active power, 1 reactive.
///
/// # Safety
/// `policy` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fopf_policy_eval(policy: *const FopfPolicy, bus: usize, channel: u32, v: f64, d: f64, out: *mut f64) -> FopfStatus {
    guard(|| {
        let pol = policy.as_ref().ok_or_else(|| null("policy"))?;
        let node = pol.params.node_of(bus).ok_or_else(|| invalid(format!("bus {bus} has no controller")))?;
        let nd = &pol.params.nodes[node];
        let ch = match channel {
            0 => &nd.p,
            1 => &nd.q,
            _ => return Err(invalid("channel must be 0 or 1")),
        };
        store(out, forward(ch, v, d).0, "out")
    })
}

/// One local controller update for `bus`. `policy` may be NULL, which means no learned term.
///
/// # Safety
/// `view`, `p_out` and `q_out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn fopf_local_update(
    policy: *const FopfPolicy,
    bus: usize,
    view: *const FopfLocalView,
    alpha: f64,
    p_out: *mut f64,
    q_out: *mut f64,
) -> FopfStatus {
    guard(|| {
        let v = view.as_ref().ok_or_else(|| null("view"))?;
        if p_out.is_null() || q_out.is_null() {
            return Err(null("output"));
        }
        let node = match policy.as_ref() {
            Some(pol) => pol.params.node_of(bus).map(|k| &pol.params.nodes[k]),
            None => None,
        };
        let lv = LocalView {
            p: v.p,
            q: v.q,
            v_hat: v.v_hat,
            p_u: v.p_u,
            q_u: v.q_u,
            p_floor: v.p_floor,
            q_floor: v.q_floor,
            weight: v.weight,
            p_lo: v.p_lo,
            p_hi: v.p_hi,
            q_lo: v.q_lo,
            q_hi: v.q_hi,
        };
        let (p, q) = local_update(&lv, node, alpha);
        p_out.write(p);
        q_out.write(q);
        Ok(())
    })
}

/// Contraction factor of the closed loop.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fopf_rho(m: f64, xi: f64, l_theta: f64, a_norm: f64, alpha: f64, out: *mut f64) -> FopfStatus {
    guard(|| store(out, rho_alpha(m, xi, l_theta, a_norm, alpha)?, "out"))
}

/// Asymptotic tracking bound; fails when `rho >= 1`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fopf_tracking_bound(rho: f64, gamma: f64, l_h: f64, approx_eps: f64, out: *mut f64) -> FopfStatus {
    guard(|| store(out, tracking_bound(rho, gamma, l_h, approx_eps)?, "out"))
}
