//! C ABI over the `saak` crate.
//!
//! Models are opaque handles created by `saak_model_fit` or
//! `saak_model_load` and released with `saak_model_free`. Every fallible
//! call returns a status code; on failure a message is kept per thread and
//! can be read with `saak_last_error`. Images are single-channel, row-major
//! `side × side` arrays of doubles.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use saak::dataset::{Cuboid, ImageSet};
use saak::io::{load, read_model, save, write_model};
use saak::multistage::fit_model;
use saak::stage::{position_to_sign, sign_to_position, KernelCap};
use saak::{Error, ErrorKind};

/// Call outcome.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaakStatus {
    Ok = 0,
    /// A required pointer was null or a string was not UTF-8.
    NullArgument = 1,
    /// Invalid argument or dimension mismatch.
    InvalidArgument = 2,
    /// Unreadable or malformed input data.
    DataError = 3,
    /// Numerical failure (no convergence, malformed position vector, ...).
    NumericalError = 4,
    /// A Rust panic was caught at the boundary.
    Internal = 5,
}

/// Cap value meaning "keep every AC kernel".
pub const SAAK_CAP_ALL: u32 = u32::MAX;

/// Opaque fitted cascade.
pub struct SaakModel {
    inner: saak::multistage::SaakModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SaakStatus {
    match e.kind() {
        ErrorKind::Argument => SaakStatus::InvalidArgument,
        ErrorKind::Data => SaakStatus::DataError,
        ErrorKind::Numerical => SaakStatus::NumericalError,
    }
}

enum Failure {
    Null(&'static str),
    Saak(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Saak(e)
    }
}

/// Runs `f`, recording any error or panic for `saak_last_error`.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SaakStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SaakStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is null or invalid"));
            SaakStatus::NullArgument
        }
        Ok(Err(Failure::Saak(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            SaakStatus::Internal
        }
    }
}

unsafe fn model_ref<'a>(m: *const SaakModel) -> Result<&'a saak::multistage::SaakModel, Failure> {
    m.as_ref().map(|m| &m.inner).ok_or(Failure::Null("model"))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return if len == 0 { Ok(&[]) } else { Err(Failure::Null(what)) };
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &'static str) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return if len == 0 {
            Ok(&mut [])
        } else {
            Err(Failure::Null(what))
        };
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn path<'a>(p: *const c_char) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return Err(Failure::Null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| Failure::Null("path"))
}

fn copy_out(src: &[f64], dst: &mut [f64]) -> Result<(), Failure> {
    if dst.len() != src.len() {
        return Err(Error::DimensionMismatch {
            expected: src.len(),
            actual: dst.len(),
        }
        .into());
    }
    dst.copy_from_slice(src);
    Ok(())
}

fn image(model: &saak::multistage::SaakModel, pixels: &[f64]) -> Result<Cuboid, Failure> {
    Ok(Cuboid::new(
        model.side(),
        model.side(),
        model.input_depth(),
        pixels.to_vec(),
    )?)
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn saak_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Fits a cascade on `count` images of `side × side` pixels. `caps` holds
/// one AC kernel cap per stage (`log2(side)` entries); `SAAK_CAP_ALL` keeps
/// every kernel. A null `caps` means lossless.
///
/// # Safety
/// `pixels` must point to `count·side·side` doubles, `caps` to `n_caps`
/// values, and `out` to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn saak_model_fit(
    pixels: *const f64,
    count: usize,
    side: usize,
    caps: *const u32,
    n_caps: usize,
    out: *mut *mut SaakModel,
) -> SaakStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = ptr::null_mut();
        let len = side
            .checked_mul(side)
            .and_then(|s| s.checked_mul(count))
            .ok_or_else(|| Error::InvalidArgument("image buffer size overflows".into()))?;
        let px = slice(pixels, len, "pixels")?.to_vec();
        let stages = saak::multistage::stage_count_for_side(side)?;
        let caps: Vec<KernelCap> = if caps.is_null() {
            vec![KernelCap::All; stages]
        } else {
            std::slice::from_raw_parts(caps, n_caps)
                .iter()
                .map(|&c| {
                    if c == SAAK_CAP_ALL {
                        KernelCap::All
                    } else {
                        KernelCap::Max(c as usize)
                    }
                })
                .collect()
        };
        let set = ImageSet::new(count, side, side, 1, px, None)?;
        let inner = fit_model(&set, &caps)?;
        *out = Box::into_raw(Box::new(SaakModel { inner }));
        Ok(())
    })
}

/// Reads a model file.
///
/// # Safety
/// `file` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn saak_model_load(file: *const c_char, out: *mut *mut SaakModel) -> SaakStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = ptr::null_mut();
        let inner = load(path(file)?, read_model)?;
        *out = Box::into_raw(Box::new(SaakModel { inner }));
        Ok(())
    })
}

/// Writes a model file.
///
/// # Safety
/// `model` must be a live handle and `file` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn saak_model_save(model: *const SaakModel, file: *const c_char) -> SaakStatus {
    guard(|| {
        let m = model_ref(model)?;
        save(path(file)?, m, write_model)?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn saak_model_free(model: *mut SaakModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input side, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn saak_model_side(model: *const SaakModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.side())
}

/// Stage count, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn saak_model_stage_count(model: *const SaakModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.stage_count())
}

/// Signed coefficient count per spatial position of stage `stage`
/// (1-based), or 0 when out of range.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn saak_model_signed_dim(model: *const SaakModel, stage: usize) -> usize {
    match model.as_ref() {
        Some(m) if stage >= 1 && stage <= m.inner.stage_count() => m.inner.stage(stage).signed_dim(),
        _ => 0,
    }
}

/// Number of values in stage `stage`'s grid (side² · signed dim), or 0.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn saak_model_stage_len(model: *const SaakModel, stage: usize) -> usize {
    match model.as_ref() {
        Some(m) if stage >= 1 && stage <= m.inner.stage_count() => m.inner.stage_len(stage),
        _ => 0,
    }
}

/// 1 when every stage keeps all kernels, 0 otherwise or for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn saak_model_is_lossless(model: *const SaakModel) -> i32 {
    model.as_ref().map_or(0, |m| m.inner.is_lossless() as i32)
}

/// Forward transform of one image; writes stage `stage`'s signed grid
/// (`saak_model_stage_len` values, position-major, channel fastest).
///
/// # Safety
/// `pixels` must hold `side²` doubles and `out` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn saak_model_forward(
    model: *const SaakModel,
    pixels: *const f64,
    n_pixels: usize,
    stage: usize,
    out: *mut f64,
    out_len: usize,
) -> SaakStatus {
    guard(|| {
        let m = model_ref(model)?;
        if stage == 0 || stage > m.stage_count() {
            return Err(Error::InvalidArgument(format!("stage {stage} out of range")).into());
        }
        let img = image(m, slice(pixels, n_pixels, "pixels")?)?;
        let coeffs = m.forward(&img)?;
        copy_out(coeffs.stage(stage).values(), slice_mut(out, out_len, "out")?)
    })
}

/// Inverts a last-stage signed grid to pixels (strict P/S for lossless
/// models, nearest valid pairs otherwise).
///
/// # Safety
/// `coeffs` must hold `n_coeffs` doubles and `out` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn saak_model_inverse(
    model: *const SaakModel,
    coeffs: *const f64,
    n_coeffs: usize,
    out: *mut f64,
    out_len: usize,
) -> SaakStatus {
    guard(|| {
        let m = model_ref(model)?;
        let p = m.stage_count();
        let n = m.grid_side(p);
        let last = Cuboid::new(
            n,
            n,
            m.stage(p).signed_dim(),
            slice(coeffs, n_coeffs, "coeffs")?.to_vec(),
        )?;
        let img = m.inverse(&last)?;
        copy_out(img.values(), slice_mut(out, out_len, "out")?)
    })
}

/// Synthesizes an image from its `k` leading last-stage coefficients.
///
/// # Safety
/// `pixels` must hold `n_pixels` doubles and `out` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn saak_model_reconstruct_topk(
    model: *const SaakModel,
    pixels: *const f64,
    n_pixels: usize,
    k: usize,
    out: *mut f64,
    out_len: usize,
) -> SaakStatus {
    guard(|| {
        let m = model_ref(model)?;
        let img = image(m, slice(pixels, n_pixels, "pixels")?)?;
        let rec = m.reconstruct_topk(&img, k)?;
        copy_out(rec.values(), slice_mut(out, out_len, "out")?)
    })
}

/// Sign-to-position conversion: writes `2·n` values.
///
/// # Safety
/// `values` must hold `n` doubles and `out` `2·n`.
#[no_mangle]
pub unsafe extern "C" fn saak_sign_to_position(values: *const f64, n: usize, out: *mut f64) -> SaakStatus {
    guard(|| {
        let s = slice(values, n, "values")?;
        let mut v = Vec::with_capacity(2 * n);
        sign_to_position(s, &mut v);
        copy_out(&v, slice_mut(out, 2 * n, "out")?)
    })
}

/// Position-to-sign conversion of `2·n` values; rejects pairs with two
/// nonzero slots or a negative slot.
///
/// # Safety
/// `position` must hold `2·n` doubles and `out` `n`.
#[no_mangle]
pub unsafe extern "C" fn saak_position_to_sign(position: *const f64, n: usize, out: *mut f64) -> SaakStatus {
    guard(|| {
        let p = slice(position, 2 * n, "position")?;
        let mut v = Vec::with_capacity(n);
        position_to_sign(p, &mut v)?;
        copy_out(&v, slice_mut(out, n, "out")?)
    })
}
