//! C ABI for geoedit.
//!
//! Every fallible function returns a [`GeoeditStatus`]. On failure the message is
//! kept per thread and can be read with [`geoedit_last_error`]. Handles are opaque
//! and must be released with their `_free` function. A handle must not be shared
//! between threads.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use geoedit::autodiff::ParamStore;
use geoedit::diffusion_toy::{DenoiserConfig, NoiseSchedule, Pipeline, ToyDenoiser, ToyImage, PIXELS};
use geoedit::{blending, checkpoint, metrics_flops, pruned_attention, Error};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeoeditStatus {
    Ok = 0,
    NullPointer = 1,
    /// Bad argument, shape mismatch or out-of-range parameter.
    InvalidArgument = 2,
    Degenerate = 3,
    /// Geodesic solver divergence or step budget exhausted.
    Solver = 4,
    Checkpoint = 5,
    Io = 6,
    Internal = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> GeoeditStatus {
    match e {
        Error::Dimension { .. } | Error::Contract(_) | Error::Config(_) | Error::Parse(_) => GeoeditStatus::InvalidArgument,
        Error::Degenerate(_) => GeoeditStatus::Degenerate,
        Error::Divergence { .. } | Error::Budget { .. } => GeoeditStatus::Solver,
        Error::AtStep { source, .. } => status_of(source),
        Error::Checkpoint(_) => GeoeditStatus::Checkpoint,
        Error::Io { .. } => GeoeditStatus::Io,
        _ => GeoeditStatus::Internal,
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GeoeditStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GeoeditStatus::Ok,
        Ok(Err(Fail::Null(name))) => {
            set_error(format!("null pointer: {name}"));
            GeoeditStatus::NullPointer
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            GeoeditStatus::Internal
        }
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, name: &'static str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(Fail::Null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, name: &'static str) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(Fail::Null(name));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Message of the last failed call on this thread, or NULL. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn geoedit_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Static NUL-terminated version string.
#[no_mangle]
pub extern "C" fn geoedit_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Spherical interpolation of two length-`d` vectors into `out`.
///
/// # Safety
/// `a`, `b` and `out` must point to `d` valid f64 values.
#[no_mangle]
pub unsafe extern "C" fn geoedit_slerp(a: *const f64, b: *const f64, d: usize, t: f64, out: *mut f64) -> GeoeditStatus {
    guard(|| {
        let r = blending::slerp(slice(a, d, "a")?, slice(b, d, "b")?, t)?;
        slice_mut(out, d, "out")?.copy_from_slice(&r);
        Ok(())
    })
}

/// Norm-preserving blend of a fidelity and a semantic latent.
///
/// # Safety
/// `x_fid`, `x_sem` and `out` must point to `d` valid f64 values.
#[no_mangle]
pub unsafe extern "C" fn geoedit_fuse(
    x_fid: *const f64,
    x_sem: *const f64,
    d: usize,
    alpha_outer: f64,
    out: *mut f64,
) -> GeoeditStatus {
    guard(|| {
        let r = blending::fuse(slice(x_fid, d, "x_fid")?, slice(x_sem, d, "x_sem")?, alpha_outer)?;
        slice_mut(out, d, "out")?.copy_from_slice(&r);
        Ok(())
    })
}

/// Number of tokens kept out of `n` at pruning ratio `rho`.
///
/// # Safety
/// `k_out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn geoedit_keep_count(n: usize, rho: f64, k_out: *mut usize) -> GeoeditStatus {
    guard(|| {
        if k_out.is_null() {
            return Err(Fail::Null("k_out"));
        }
        *k_out = pruned_attention::keep_count(n, rho)?.0;
        Ok(())
    })
}

/// Mean absolute error of two length-`len` arrays.
///
/// # Safety
/// `a` and `b` must point to `len` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn geoedit_mae(a: *const f64, b: *const f64, len: usize, out: *mut f64) -> GeoeditStatus {
    guard(|| {
        let v = metrics_flops::mae(slice(a, len, "a")?, slice(b, len, "b")?)?;
        *slice_mut(out, 1, "out")?.first_mut().expect("len 1") = v;
        Ok(())
    })
}

/// SSIM of two row-major images of `len` pixels and row width `width`.
///
/// # Safety
/// `a` and `b` must point to `len` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn geoedit_ssim(a: *const f64, b: *const f64, len: usize, width: usize, out: *mut f64) -> GeoeditStatus {
    guard(|| {
        let cfg = metrics_flops::SsimConfig::default();
        let v = metrics_flops::ssim_with(slice(a, len, "a")?, slice(b, len, "b")?, width, &cfg)?;
        *slice_mut(out, 1, "out")?.first_mut().expect("len 1") = v;
        Ok(())
    })
}

/// Opaque trained denoiser with its noise schedule.
pub struct GeoeditDenoiser {
    store: ParamStore,
    model: ToyDenoiser,
    schedule: NoiseSchedule,
}

/// Loads a denoiser checkpoint. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn geoedit_denoiser_load(path: *const c_char, out: *mut *mut GeoeditDenoiser) -> GeoeditStatus {
    guard(|| {
        if path.is_null() {
            return Err(Fail::Null("path"));
        }
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Error::contract("path is not UTF-8"))?;
        let store = checkpoint::store_from_tensors(checkpoint::load(Path::new(path))?)?;
        let model = ToyDenoiser::from_store(&store, DenoiserConfig::infer(&store)?)?;
        let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02)?;
        *out = Box::into_raw(Box::new(GeoeditDenoiser { store, model, schedule }));
        Ok(())
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `h` must come from [`geoedit_denoiser_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn geoedit_denoiser_free(h: *mut GeoeditDenoiser) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Pixels per image accepted by [`geoedit_denoiser_reconstruct`].
#[no_mangle]
pub extern "C" fn geoedit_image_pixels() -> usize {
    PIXELS
}

/// DDIM inversion to `t0` with `s_for` steps, then regeneration with `s_gen` steps.
/// `image` and `out` hold [`geoedit_image_pixels`] values in [−1, 1].
///
/// # Safety
/// `h` must be a live handle; `image` and `out` must hold `geoedit_image_pixels()` values.
#[no_mangle]
pub unsafe extern "C" fn geoedit_denoiser_reconstruct(
    h: *const GeoeditDenoiser,
    image: *const f64,
    t0: f64,
    s_for: usize,
    s_gen: usize,
    out: *mut f64,
) -> GeoeditStatus {
    guard(|| {
        let h = h.as_ref().ok_or(Fail::Null("handle"))?;
        let src = ToyImage::new(slice(image, PIXELS, "image")?.to_vec())?;
        let pipeline = Pipeline {
            model: &h.model,
            store: &h.store,
            schedule: &h.schedule,
            prune: None,
        };
        let rec = pipeline.reconstruct(&src.to_tensor(), t0, s_for, s_gen)?;
        let rec = ToyImage::unbatch(&rec)?.remove(0);
        slice_mut(out, PIXELS, "out")?.copy_from_slice(rec.data());
        Ok(())
    })
}
