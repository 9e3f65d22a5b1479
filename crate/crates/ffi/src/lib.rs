//! C ABI over the `qmri` toolkit.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/builder
//! functions and released with the matching `*_free`. Every fallible call
//! returns a [`QmriStatus`]; on failure the message is available from
//! [`qmri_last_error`] on the same thread. Array arguments are row-major
//! (`i = y * nx + x`); complex arrays interleave `(re, im)`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use qmri::bloch::{build_dictionary, simulate_bloch, FingerprintDictionary, SequenceSpec};
use qmri::forward::{add_noise, apply_forward, make_cartesian_masks};
use qmri::harness::{make_phantom, run_experiment, ExperimentConfig, PhantomSpec};
use qmri::integrated::{lm_reconstruct_bloch, LmConfig};
use qmri::metrics::rel_error_map;
use qmri::mrf::mrf_reconstruct;
use qmri::{AdmissibleBox, Error, Grid, KSpaceData, ParamMap};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QmriStatus {
    Ok = 0,
    InvalidArgument = 1,
    ShapeMismatch = 2,
    Numerical = 3,
    Config = 4,
    Io = 5,
    NullPointer = 6,
    Panic = 7,
}

/// Parameter map `(rho, T1, T2)` on a grid.
pub struct QmriParamMap(ParamMap);
/// Flip-angle train.
pub struct QmriSequence(SequenceSpec);
/// Fingerprint dictionary tied to one sequence.
pub struct QmriDictionary(FingerprintDictionary);
/// Subsampled multi-frame k-space data.
pub struct QmriKSpace(KSpaceData);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> QmriStatus {
    match e {
        Error::InvalidArgument(_) => QmriStatus::InvalidArgument,
        Error::ShapeMismatch(_) => QmriStatus::ShapeMismatch,
        Error::Numerical(_) => QmriStatus::Numerical,
        Error::Config(_) | Error::Json(_) => QmriStatus::Config,
        Error::Io(_) => QmriStatus::Io,
    }
}

enum Failure {
    Core(Error),
    Null(&'static str),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type FfiResult<T> = std::result::Result<T, Failure>;

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> FfiResult<()>) -> QmriStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            QmriStatus::Ok
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer passed for {what}"));
            QmriStatus::NullPointer
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            QmriStatus::Panic
        }
    }
}

unsafe fn href<'a, T>(p: *const T, what: &'static str) -> FfiResult<&'a T> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &'static str) -> FfiResult<&'a [f64]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &'static str) -> FfiResult<&'a mut [f64]> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn put<T>(out: *mut *mut T, v: T) -> FfiResult<()> {
    if out.is_null() {
        return Err(Failure::Null("output handle"));
    }
    *out = Box::into_raw(Box::new(v));
    Ok(())
}

unsafe fn cstr<'a>(p: *const c_char, what: &'static str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::Core(Error::InvalidArgument(format!("{what} is not UTF-8"))))
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn qmri_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn qmri_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds a map from three channels of `nx * ny` values each.
///
/// # Safety
/// Channel pointers must reference `nx * ny` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn qmri_param_map_new(
    nx: usize,
    ny: usize,
    rho: *const f64,
    t1: *const f64,
    t2: *const f64,
    out: *mut *mut QmriParamMap,
) -> QmriStatus {
    guard(|| {
        let grid = Grid::new(nx, ny)?;
        let n = grid.len();
        let (r, a, b) = (slice(rho, n, "rho")?, slice(t1, n, "t1")?, slice(t2, n, "t2")?);
        put(out, QmriParamMap(ParamMap::new(grid, r.to_vec(), a.to_vec(), b.to_vec())?))
    })
}

/// Built-in `n x n` desk phantom.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn qmri_phantom_desk(n: usize, out: *mut *mut QmriParamMap) -> QmriStatus {
    guard(|| put(out, QmriParamMap(make_phantom(&PhantomSpec::desk(n))?.map)))
}

/// # Safety
/// `map` must be null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn qmri_param_map_free(map: *mut QmriParamMap) {
    free(map)
}

/// # Safety
/// `map` must be a live handle; `nx`, `ny` writable.
#[no_mangle]
pub unsafe extern "C" fn qmri_param_map_dims(map: *const QmriParamMap, nx: *mut usize, ny: *mut usize) -> QmriStatus {
    guard(|| {
        let m = href(map, "map")?;
        if nx.is_null() || ny.is_null() {
            return Err(Failure::Null("dimension outputs"));
        }
        *nx = m.0.grid.nx;
        *ny = m.0.grid.ny;
        Ok(())
    })
}

/// Copies channel 0 (rho), 1 (T1) or 2 (T2) into `dst`, which holds `len`
/// doubles and must match the voxel count.
///
/// # Safety
/// `dst` must reference `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn qmri_param_map_channel(
    map: *const QmriParamMap,
    channel: usize,
    dst: *mut f64,
    len: usize,
) -> QmriStatus {
    guard(|| {
        let m = &href(map, "map")?.0;
        if channel > 2 {
            return Err(Error::InvalidArgument(format!("channel {channel} is not 0, 1 or 2")).into());
        }
        if len != m.grid.len() {
            return Err(Error::ShapeMismatch(format!("buffer holds {len} values, map has {}", m.grid.len())).into());
        }
        slice_mut(dst, len, "dst")?.copy_from_slice(m.channel(channel));
        Ok(())
    })
}

/// Built-in inversion-prepared MRF train with `frames` readouts.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn qmri_sequence_default(frames: usize, out: *mut *mut QmriSequence) -> QmriStatus {
    guard(|| {
        let s = SequenceSpec::default_mrf(frames);
        s.validate()?;
        put(out, QmriSequence(s))
    })
}

/// Sequence from per-readout flip angles (rad) and repetition times (s).
///
/// # Safety
/// Both arrays must hold `frames` doubles.
#[no_mangle]
pub unsafe extern "C" fn qmri_sequence_new(
    flip_angles: *const f64,
    tr: *const f64,
    frames: usize,
    inversion: bool,
    out: *mut *mut QmriSequence,
) -> QmriStatus {
    guard(|| {
        let a = slice(flip_angles, frames, "flip_angles")?.to_vec();
        let t = slice(tr, frames, "tr")?.to_vec();
        put(out, QmriSequence(SequenceSpec::new(a, t, inversion)?))
    })
}

/// # Safety
/// `seq` must be null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn qmri_sequence_free(seq: *mut QmriSequence) {
    free(seq)
}

/// # Safety
/// `seq` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn qmri_sequence_frames(seq: *const QmriSequence) -> usize {
    seq.as_ref().map_or(0, |s| s.0.frames())
}

/// Fingerprint of one `(T1, T2)` pair, written as `2 * frames` interleaved
/// doubles.
///
/// # Safety
/// `dst` must reference `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn qmri_simulate_bloch(
    seq: *const QmriSequence,
    t1: f64,
    t2: f64,
    dst: *mut f64,
    len: usize,
) -> QmriStatus {
    guard(|| {
        let s = &href(seq, "sequence")?.0;
        if len != 2 * s.frames() {
            return Err(Error::ShapeMismatch(format!("need {} doubles, got {len}", 2 * s.frames())).into());
        }
        let f = simulate_bloch(t1, t2, s)?;
        let d = slice_mut(dst, len, "dst")?;
        for (k, z) in f.values.iter().enumerate() {
            d[2 * k] = z.re;
            d[2 * k + 1] = z.im;
        }
        Ok(())
    })
}

/// Dictionary over the product of the two grids (pairs with `T2 > T1` are
/// dropped).
///
/// # Safety
/// Grid arrays must hold `n_t1` and `n_t2` doubles.
#[no_mangle]
pub unsafe extern "C" fn qmri_dictionary_build(
    seq: *const QmriSequence,
    t1_grid: *const f64,
    n_t1: usize,
    t2_grid: *const f64,
    n_t2: usize,
    out: *mut *mut QmriDictionary,
) -> QmriStatus {
    guard(|| {
        let s = &href(seq, "sequence")?.0;
        let d = build_dictionary(slice(t1_grid, n_t1, "t1_grid")?, slice(t2_grid, n_t2, "t2_grid")?, s)?;
        put(out, QmriDictionary(d))
    })
}

/// # Safety
/// `dict` must be null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn qmri_dictionary_free(dict: *mut QmriDictionary) {
    free(dict)
}

/// # Safety
/// `dict` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn qmri_dictionary_len(dict: *const QmriDictionary) -> usize {
    dict.as_ref().map_or(0, |d| d.0.len())
}

/// Bloch series of `map`, Cartesian subsampling by `factor` (fresh rows per
/// frame) and complex noise of std `sigma`, all seeded by `seed`.
///
/// # Safety
/// Handles must be live; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn qmri_kspace_simulate(
    map: *const QmriParamMap,
    seq: *const QmriSequence,
    factor: usize,
    sigma: f64,
    seed: u64,
    out: *mut *mut QmriKSpace,
) -> QmriStatus {
    guard(|| {
        let q = &href(map, "map")?.0;
        let s = &href(seq, "sequence")?.0;
        let u = qmri::bloch::bloch_map(q, s)?;
        let pat = make_cartesian_masks(q.grid, factor, s.frames(), seed, true)?;
        put(out, QmriKSpace(add_noise(&apply_forward(&u, &pat)?, sigma, seed)?))
    })
}

/// # Safety
/// `y` must be null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn qmri_kspace_free(y: *mut QmriKSpace) {
    free(y)
}

/// Zero-filled dictionary matching.
///
/// # Safety
/// Handles must be live; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn qmri_mrf_reconstruct(
    y: *const QmriKSpace,
    dict: *const QmriDictionary,
    out: *mut *mut QmriParamMap,
) -> QmriStatus {
    guard(|| put(out, QmriParamMap(mrf_reconstruct(&href(y, "kspace")?.0, &href(dict, "dictionary")?.0)?)))
}

/// Integrated-physics Levenberg-Marquardt from `init` inside the default
/// admissible box. A negative `sigma` estimates the noise from the data.
///
/// # Safety
/// Handles must be live; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn qmri_lm_reconstruct(
    y: *const QmriKSpace,
    seq: *const QmriSequence,
    init: *const QmriParamMap,
    max_iters: usize,
    sigma: f64,
    out: *mut *mut QmriParamMap,
) -> QmriStatus {
    guard(|| {
        let cfg = LmConfig { max_iters, sigma: (sigma >= 0.0).then_some(sigma), ..LmConfig::default() };
        let r = lm_reconstruct_bloch(
            &href(y, "kspace")?.0,
            &href(seq, "sequence")?.0,
            &href(init, "init")?.0,
            &AdmissibleBox::default(),
            &cfg,
        )?;
        put(out, QmriParamMap(r.map))
    })
}

/// Foreground (`rho > 0` in `truth`) mean relative errors, written to
/// `dst[0..3]` as `(rho, T1, T2)`.
///
/// # Safety
/// `dst` must reference 3 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn qmri_rel_errors(
    estimate: *const QmriParamMap,
    truth: *const QmriParamMap,
    dst: *mut f64,
) -> QmriStatus {
    guard(|| {
        let t = &href(truth, "truth")?.0;
        let fg: Vec<bool> = t.rho.iter().map(|&r| r > 0.0).collect();
        let e = rel_error_map(&href(estimate, "estimate")?.0, t, &fg)?;
        slice_mut(dst, 3, "dst")?.copy_from_slice(&[e.mean_rho, e.mean_t1, e.mean_t2]);
        Ok(())
    })
}

/// Runs an experiment described by a JSON config (missing keys default).
/// With a non-null `out_dir` the artifacts are written there. `metrics`
/// receives the foreground mean relative errors `(rho, T1, T2)`.
///
/// # Safety
/// `config_json` must be NUL-terminated; `metrics` 3 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn qmri_run_experiment(
    config_json: *const c_char,
    out_dir: *const c_char,
    metrics: *mut f64,
) -> QmriStatus {
    guard(|| {
        let cfg = ExperimentConfig::from_json(cstr(config_json, "config_json")?)?;
        let dir = if out_dir.is_null() { None } else { Some(cstr(out_dir, "out_dir")?) };
        let r = run_experiment(&cfg, dir.map(Path::new))?;
        let m = &r.metrics;
        slice_mut(metrics, 3, "metrics")?.copy_from_slice(&[m.mean_rel_rho, m.mean_rel_t1, m.mean_rel_t2]);
        Ok(())
    })
}
