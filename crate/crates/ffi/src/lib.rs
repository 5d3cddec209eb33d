// SPDX-License-Identifier: Apache-2.0

//! C interface to circuit loading, simulation, conversion and the trained
//! models.
//!
//! Every fallible function returns a [`CktStatus`]; on failure the message
//! is available from [`ckt_last_error`] on the same thread. Objects are
//! opaque handles released with their `_free` function. Strings returned
//! through `char**` are released with [`ckt_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use cktgnn::acsim::{simulate, FomWeights, SweepConfig};
use cktgnn::basis::{build_default_basis, SubgraphBasis};
use cktgnn::circuit::{canonicalize, DeviceDag};
use cktgnn::generator::{DecodeMode, Example, Vae};
use cktgnn::graphlize::graphlize;
use cktgnn::netlist::{export_netlist, parse_netlist};
use cktgnn::stage::{from_stage_graph, to_stage_graph};
use cktgnn::CktError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CktStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Malformed JSON, netlist or file contents.
    Parse = 3,
    /// Structurally broken graph or an invalid circuit.
    InvalidCircuit = 4,
    Simulation = 5,
    Io = 6,
    /// Wrong buffer size or latent dimension.
    Shape = 7,
    Panic = 8,
    Other = 9,
}

/// Small-signal specs; unavailable values are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CktSpecs {
    pub converged: bool,
    pub gain_db: f64,
    pub bw_hz: f64,
    pub ugf_hz: f64,
    pub pm_deg: f64,
    pub fom: f64,
}

/// A device-level circuit graph.
pub struct CktCircuit {
    dag: DeviceDag,
}

/// A trained VAE.
pub struct CktModel {
    vae: Vae,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &CktError) -> CktStatus {
    match e {
        CktError::Json(_) | CktError::Format(_) => CktStatus::Parse,
        CktError::Structural(_)
        | CktError::Cycle
        | CktError::InvalidCircuit(_)
        | CktError::Conversion(_)
        | CktError::Decomposition(_)
        | CktError::UnknownEntry(_)
        | CktError::SizeGuard { .. } => CktStatus::InvalidCircuit,
        CktError::Simulation(_) | CktError::Numerical(_) => CktStatus::Simulation,
        CktError::Io(_) => CktStatus::Io,
        CktError::Shape { .. } => CktStatus::Shape,
        _ => CktStatus::Other,
    }
}

struct Fail(CktStatus, String);

impl From<CktError> for Fail {
    fn from(e: CktError) -> Self {
        Fail(status_of(&e), format!("{}: {e}", e.kind()))
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CktStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CktStatus::Ok
        }
        Ok(Err(Fail(s, m))) => {
            set_error(&m);
            s
        }
        Err(_) => {
            set_error("panic inside the library");
            CktStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(CktStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(CktStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn out_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    let c = CString::new(s).map_err(|_| Fail(CktStatus::Other, "string contains NUL".into()))?;
    *out = c.into_raw();
    Ok(())
}

fn basis() -> &'static SubgraphBasis {
    use std::sync::OnceLock;
    static B: OnceLock<SubgraphBasis> = OnceLock::new();
    B.get_or_init(build_default_basis)
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn ckt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version string (static).
#[no_mangle]
pub extern "C" fn ckt_version() -> *const c_char {
    static V: &str = concat!("cktgnn ", env!("CARGO_PKG_VERSION"), "\0");
    V.as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ckt_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses a circuit from device-graph JSON or a netlist.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ckt_circuit_parse(
    text: *const c_char,
    out: *mut *mut CktCircuit,
) -> CktStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let t = str_arg(text, "text")?;
        let dag = if t.trim_start().starts_with('*') {
            from_stage_graph(&parse_netlist(t)?)?
        } else {
            DeviceDag::from_json(t)?
        };
        dag.index()?;
        *out = Box::into_raw(Box::new(CktCircuit { dag }));
        Ok(())
    })
}

/// Releases a circuit. Null is ignored.
///
/// # Safety
/// `c` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ckt_circuit_free(c: *mut CktCircuit) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// Device-graph JSON of a circuit.
///
/// # Safety
/// `c` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ckt_circuit_to_json(
    c: *const CktCircuit,
    out: *mut *mut c_char,
) -> CktStatus {
    guard(|| {
        let c = c.as_ref().ok_or_else(|| null("circuit"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        out_string(out, c.dag.to_json()?)
    })
}

/// Simulates with the default sweep and FoM weights.
///
/// # Safety
/// `c` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ckt_circuit_simulate(
    c: *const CktCircuit,
    out: *mut CktSpecs,
) -> CktStatus {
    guard(|| {
        let c = c.as_ref().ok_or_else(|| null("circuit"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let r = simulate(&c.dag, &SweepConfig::default(), &FomWeights::default())?;
        let v = |x: Option<f64>| x.unwrap_or(f64::NAN);
        *out = CktSpecs {
            converged: r.converged,
            gain_db: v(r.gain_db),
            bw_hz: v(r.bw_hz),
            ugf_hz: v(r.ugf_hz),
            pm_deg: v(r.pm_deg),
            fom: v(r.fom),
        };
        Ok(())
    })
}

/// Subgraph-basis form of a circuit as JSON.
///
/// # Safety
/// `c` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ckt_circuit_graphlize(
    c: *const CktCircuit,
    out: *mut *mut c_char,
) -> CktStatus {
    guard(|| {
        let c = c.as_ref().ok_or_else(|| null("circuit"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let (g, _) = canonicalize(&c.dag)?;
        out_string(out, graphlize(&g, basis())?.to_json()?)
    })
}

/// SPICE netlist of a circuit with the default sweep directive.
///
/// # Safety
/// `c` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ckt_circuit_netlist(
    c: *const CktCircuit,
    out: *mut *mut c_char,
) -> CktStatus {
    guard(|| {
        let c = c.as_ref().ok_or_else(|| null("circuit"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        out_string(
            out,
            export_netlist(&to_stage_graph(&c.dag)?, &SweepConfig::default())?,
        )
    })
}

/// Loads a model checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ckt_model_load(path: *const c_char, out: *mut *mut CktModel) -> CktStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let p = str_arg(path, "path")?;
        let (vae, _) = Vae::load_path(Path::new(p))?;
        *out = Box::into_raw(Box::new(CktModel { vae }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `m` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ckt_model_free(m: *mut CktModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Latent dimension of a model, 0 for null.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ckt_model_latent_dim(m: *const CktModel) -> usize {
    m.as_ref().map_or(0, |m| m.vae.cfg.latent)
}

/// Posterior mean of a circuit; `len` must equal the latent dimension.
///
/// # Safety
/// `m` and `c` must be live handles; `z` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ckt_model_encode(
    m: *const CktModel,
    c: *const CktCircuit,
    z: *mut f64,
    len: usize,
) -> CktStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("model"))?;
        let c = c.as_ref().ok_or_else(|| null("circuit"))?;
        if z.is_null() {
            return Err(null("z"));
        }
        if len != m.vae.cfg.latent {
            return Err(Fail(
                CktStatus::Shape,
                format!(
                    "buffer holds {len} values, latent dimension is {}",
                    m.vae.cfg.latent
                ),
            ));
        }
        let mu = m.vae.latent_mean(&Example::new(&c.dag, &m.vae.basis)?)?;
        std::slice::from_raw_parts_mut(z, len).copy_from_slice(&mu);
        Ok(())
    })
}

/// Greedy decode of a latent point. Fails with `InvalidCircuit` when the
/// decoded graph has no device-level form.
///
/// # Safety
/// `m` must be a live handle; `z` must hold `len` doubles; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn ckt_model_decode(
    m: *const CktModel,
    z: *const f64,
    len: usize,
    out: *mut *mut CktCircuit,
) -> CktStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("model"))?;
        if z.is_null() {
            return Err(null("z"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let z = std::slice::from_raw_parts(z, len);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let d = m.vae.decode(z, DecodeMode::Greedy, &mut rng)?;
        let dag = m.vae.realize(&d.seq).dag.ok_or_else(|| {
            Fail(
                CktStatus::InvalidCircuit,
                "decoded graph has no device-level form".into(),
            )
        })?;
        *out = Box::into_raw(Box::new(CktCircuit { dag }));
        Ok(())
    })
}
