//! C interface to the `hvae` library: loading a trained generative model
//! and sampling from it, phantom generation, and the evaluation metrics.
//!
//! Every fallible function returns an [`HvaeStatus`]. On failure the
//! message is available from [`hvae_last_error`] on the same thread.
//! Images are row-major `height * width` arrays of `double`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hvae::data::{generate_phantom, PhantomConfig};
use hvae::error::Error;
use hvae::metrics::{dice, psnr, ssim};
use hvae::tensor::Tensor;
use hvae::train::GenerativeModel;

/// Result of a call. The error codes match the exit codes of the `hvae`
/// command-line tool.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HvaeStatus {
    Ok = 0,
    ConfigError = 2,
    DataError = 3,
    NumericError = 4,
    IoError = 5,
    /// A required pointer was null.
    NullArgument = 6,
    /// The library panicked; this is a bug.
    Internal = 7,
}

/// A trained VAE or HVAE. Create with [`hvae_model_load`], release with
/// [`hvae_model_free`].
pub struct HvaeModel {
    inner: GenerativeModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> HvaeStatus {
    match e.exit_code() {
        2 => HvaeStatus::ConfigError,
        3 => HvaeStatus::DataError,
        4 => HvaeStatus::NumericError,
        _ => HvaeStatus::IoError,
    }
}

enum Fail {
    Lib(Error),
    Null(&'static str),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

/// Runs `f`, recording any failure for [`hvae_last_error`].
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> HvaeStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HvaeStatus::Ok,
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("{what} is null"));
            HvaeStatus::NullArgument
        }
        Err(_) => {
            set_error("internal error".into());
            HvaeStatus::Internal
        }
    }
}

fn non_null<T>(p: *const T, what: &'static str) -> Result<*const T, Fail> {
    if p.is_null() {
        Err(Fail::Null(what))
    } else {
        Ok(p)
    }
}

fn non_null_mut<T>(p: *mut T, what: &'static str) -> Result<*mut T, Fail> {
    if p.is_null() {
        Err(Fail::Null(what))
    } else {
        Ok(p)
    }
}

/// Copies `len` doubles from `p` into a `[1, height, width]` tensor.
unsafe fn image_from(p: *const f64, height: usize, width: usize, what: &'static str) -> Result<Tensor, Fail> {
    let p = non_null(p, what)?;
    let data = std::slice::from_raw_parts(p, height * width).to_vec();
    Ok(Tensor::new(vec![1, height, width], data)?)
}

/// Message of the last failed call on this thread, or null. The string is
/// owned by the library and valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn hvae_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a VAE/HVAE checkpoint. On success `*out` holds a new handle.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hvae_model_load(path: *const c_char, out: *mut *mut HvaeModel) -> HvaeStatus {
    guard(|| {
        let path = non_null(path, "path")?;
        let out = non_null_mut(out, "out")?;
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Error::Config("path is not valid UTF-8".into()))?;
        let inner = GenerativeModel::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(HvaeModel { inner }));
        Ok(())
    })
}

/// Releases a handle from [`hvae_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hvae_model_free(model: *mut HvaeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Image extent and latent dimension of a loaded model.
///
/// # Safety
/// `model` must be a live handle; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn hvae_model_shape(
    model: *const HvaeModel,
    height: *mut usize,
    width: *mut usize,
    latent_dim: *mut usize,
) -> HvaeStatus {
    guard(|| {
        let m = &*non_null(model, "model")?;
        let c = &m.inner.config;
        *non_null_mut(height, "height")? = c.height;
        *non_null_mut(width, "width")? = c.width;
        *non_null_mut(latent_dim, "latent_dim")? = c.latent_dim;
        Ok(())
    })
}

/// Draws `n` image+mask pairs from `z ~ N(0, I)`. `images` and `masks`
/// each receive `n * height * width` values; masks are `σ(logit) >
/// threshold` as 0/1. The same seed gives the same pairs.
///
/// # Safety
/// `model` must be a live handle; both buffers must hold
/// `n * height * width` doubles.
#[no_mangle]
pub unsafe extern "C" fn hvae_model_sample(
    model: *const HvaeModel,
    n: usize,
    threshold: f64,
    seed: u64,
    images: *mut f64,
    masks: *mut f64,
) -> HvaeStatus {
    guard(|| {
        let m = &*non_null(model, "model")?;
        let images = non_null_mut(images, "images")?;
        let masks = non_null_mut(masks, "masks")?;
        let pairs = m.inner.sample(n, threshold, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let px = m.inner.config.height * m.inner.config.width;
        for (i, p) in pairs.iter().enumerate() {
            ptr::copy_nonoverlapping(p.image.data().as_ptr(), images.add(i * px), px);
            ptr::copy_nonoverlapping(p.mask.data().as_ptr(), masks.add(i * px), px);
        }
        Ok(())
    })
}

/// Phantom `index` of the stream `seed` at the default settings for the
/// extent. Writes `height * width` values to each buffer.
///
/// # Safety
/// Both buffers must hold `height * width` doubles.
#[no_mangle]
pub unsafe extern "C" fn hvae_phantom_generate(
    height: usize,
    width: usize,
    seed: u64,
    index: u64,
    image: *mut f64,
    mask: *mut f64,
) -> HvaeStatus {
    guard(|| {
        let image = non_null_mut(image, "image")?;
        let mask = non_null_mut(mask, "mask")?;
        let cfg = PhantomConfig {
            seed,
            ..PhantomConfig::with_extent(height, width)
        };
        let pair = generate_phantom(&cfg, index)?;
        let px = height * width;
        ptr::copy_nonoverlapping(pair.image.data().as_ptr(), image, px);
        ptr::copy_nonoverlapping(pair.mask.data().as_ptr(), mask, px);
        Ok(())
    })
}

/// Dice overlap of two binary masks of `len` values; two empty masks give 1.
///
/// # Safety
/// `a` and `b` must hold `len` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hvae_dice(a: *const f64, b: *const f64, len: usize, out: *mut f64) -> HvaeStatus {
    guard(|| {
        let out = non_null_mut(out, "out")?;
        let (a, b) = (image_from(a, 1, len, "a")?, image_from(b, 1, len, "b")?);
        *out = dice(&a, &b)?;
        Ok(())
    })
}

/// PSNR in dB of two images of `len` values; identical images give +inf.
///
/// # Safety
/// `a` and `b` must hold `len` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hvae_psnr(
    a: *const f64,
    b: *const f64,
    len: usize,
    max_val: f64,
    out: *mut f64,
) -> HvaeStatus {
    guard(|| {
        let out = non_null_mut(out, "out")?;
        let (a, b) = (image_from(a, 1, len, "a")?, image_from(b, 1, len, "b")?);
        *out = psnr(&a, &b, max_val)?;
        Ok(())
    })
}

/// Mean SSIM over non-overlapping 8x8 windows of two `height * width` images.
///
/// # Safety
/// `a` and `b` must hold `height * width` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hvae_ssim(
    a: *const f64,
    b: *const f64,
    height: usize,
    width: usize,
    max_val: f64,
    out: *mut f64,
) -> HvaeStatus {
    guard(|| {
        let out = non_null_mut(out, "out")?;
        let a = image_from(a, height, width, "a")?;
        let b = image_from(b, height, width, "b")?;
        *out = ssim(&a, &b, max_val)?;
        Ok(())
    })
}
