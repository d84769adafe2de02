//! C ABI over `tobo-core`.
//!
//! Every function returns a [`ToboStatus`]; on failure a message is kept per
//! thread and can be read with [`tobo_last_error_message`]. Encoders are
//! opaque handles owned by the caller and released with
//! [`tobo_encoder_free`]. Images are `3 x size x size` channel-major floats
//! in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use tobo_core::eval::dense_features;
use tobo_core::harness::{Checkpoint, RunConfig};
use tobo_core::imaging::Image;
use tobo_core::objective::{mask_count, sample_mask, squeeze};
use tobo_core::rng::{substream, Stream};
use tobo_core::scene::LabelMap;
use tobo_core::tensor::ParamStore;
use tobo_core::vit::{Encoder, EncoderConfig};
use tobo_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToboStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Config = 5,
    /// A Rust panic was caught at the boundary.
    Internal = 6,
}

/// Opaque encoder handle.
pub struct ToboEncoder {
    encoder: Encoder,
    store: ParamStore<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(e: &Error) -> ToboStatus {
    match e {
        Error::Io(_) => ToboStatus::Io,
        Error::Checkpoint(_) | Error::Json(_) => ToboStatus::Checkpoint,
        Error::Config(_) => ToboStatus::Config,
        _ => ToboStatus::InvalidArgument,
    }
}

/// Runs `f`, recording any error or panic.
fn guard(f: impl FnOnce() -> Result<(), (ToboStatus, String)>) -> ToboStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            ToboStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            ToboStatus::Internal
        }
    }
}

fn core<T>(r: tobo_core::Result<T>) -> Result<T, (ToboStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (ToboStatus, String) {
    (ToboStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: String) -> (ToboStatus, String) {
    (ToboStatus::InvalidArgument, msg)
}

/// Message of the last failed call on this thread, or NULL after a
/// success. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn tobo_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version, static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tobo_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Untrained desk-default encoder with weights from `seed`; matches the
/// encoder of a `tobo` run with the same weight seed.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn tobo_encoder_random(seed: u64, out: *mut *mut ToboEncoder) -> ToboStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mut store = ParamStore::new();
        let encoder = core(Encoder::new(
            RunConfig::default().encoder,
            &mut store,
            &mut substream(seed, Stream::Weights, 0),
        ))?;
        *out = Box::into_raw(Box::new(ToboEncoder { encoder, store }));
        Ok(())
    })
}

/// Encoder weights from a checkpoint manifest written by `tobo pretrain`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` as for
/// [`tobo_encoder_random`].
#[no_mangle]
pub unsafe extern "C" fn tobo_encoder_load(path: *const c_char, out: *mut *mut ToboEncoder) -> ToboStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not UTF-8".into()))?;
        let ckpt = core(Checkpoint::load(Path::new(path)))?;
        let mut store = ParamStore::new();
        let encoder = core(Encoder::new(
            ckpt.manifest.config.encoder.clone(),
            &mut store,
            &mut substream(0, Stream::Weights, 0),
        ))?;
        core(ckpt.load_params(&mut store))?;
        *out = Box::into_raw(Box::new(ToboEncoder { encoder, store }));
        Ok(())
    })
}

/// Releases a handle; NULL is ignored.
///
/// # Safety
/// `encoder` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tobo_encoder_free(encoder: *mut ToboEncoder) {
    if !encoder.is_null() {
        drop(Box::from_raw(encoder));
    }
}

/// Image side length, token width and patch-grid side of an encoder.
///
/// # Safety
/// `encoder` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn tobo_encoder_shape(
    encoder: *const ToboEncoder,
    image_size: *mut usize,
    embed_dim: *mut usize,
    grid: *mut usize,
) -> ToboStatus {
    guard(|| {
        let enc = encoder.as_ref().ok_or_else(|| null("encoder"))?;
        if image_size.is_null() || embed_dim.is_null() || grid.is_null() {
            return Err(null("output"));
        }
        let cfg: &EncoderConfig = enc.encoder.config();
        *image_size = cfg.image_size;
        *embed_dim = cfg.embed_dim;
        *grid = cfg.grid();
        Ok(())
    })
}

unsafe fn image_arg(enc: &ToboEncoder, rgb: *const f32, len: usize) -> Result<Image, (ToboStatus, String)> {
    if rgb.is_null() {
        return Err(null("rgb"));
    }
    let s = enc.encoder.config().image_size;
    if len != 3 * s * s {
        return Err(invalid(format!("image of {len} values, expected 3x{s}x{s}")));
    }
    core(Image::new(s, s, std::slice::from_raw_parts(rgb, len).to_vec()))
}

unsafe fn out_arg<'a>(out: *mut f32, len: usize, need: usize) -> Result<&'a mut [f32], (ToboStatus, String)> {
    if out.is_null() {
        return Err(null("out"));
    }
    if len != need {
        return Err(invalid(format!("output of {len} values, expected {need}")));
    }
    Ok(std::slice::from_raw_parts_mut(out, len))
}

/// Bottleneck token (CLS output of encoding every patch) of one image into
/// `out[embed_dim]`.
///
/// # Safety
/// `rgb` must hold `rgb_len` floats and `out` `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn tobo_encoder_bottleneck(
    encoder: *const ToboEncoder,
    rgb: *const f32,
    rgb_len: usize,
    out: *mut f32,
    out_len: usize,
) -> ToboStatus {
    guard(|| {
        let enc = encoder.as_ref().ok_or_else(|| null("encoder"))?;
        let img = image_arg(enc, rgb, rgb_len)?;
        let dst = out_arg(out, out_len, enc.encoder.config().embed_dim)?;
        let tokens = core(squeeze(&enc.encoder, &enc.store, &img))?;
        let cls = tokens
            .cls
            .ok_or_else(|| (ToboStatus::Config, "encoder has no CLS token".to_string()))?;
        dst.copy_from_slice(&cls);
        Ok(())
    })
}

/// Unit-norm spatial features, `grid x grid x embed_dim` row-major.
///
/// # Safety
/// As for [`tobo_encoder_bottleneck`].
#[no_mangle]
pub unsafe extern "C" fn tobo_encoder_dense_features(
    encoder: *const ToboEncoder,
    rgb: *const f32,
    rgb_len: usize,
    out: *mut f32,
    out_len: usize,
) -> ToboStatus {
    guard(|| {
        let enc = encoder.as_ref().ok_or_else(|| null("encoder"))?;
        let img = image_arg(enc, rgb, rgb_len)?;
        let cfg = enc.encoder.config();
        let dst = out_arg(out, out_len, cfg.num_patches() * cfg.embed_dim)?;
        let f = core(dense_features(&enc.encoder, &enc.store, &img))?;
        for i in 0..f.rows {
            for j in 0..f.cols {
                let at = (i * f.cols + j) * f.dim;
                for (d, s) in dst[at..at + f.dim].iter_mut().zip(f.cell(i, j)) {
                    *d = *s as f32;
                }
            }
        }
        Ok(())
    })
}

/// Mean IoU over the classes present in `gt`; both maps `height x width`.
///
/// # Safety
/// `pred` and `gt` must hold `height * width` labels; `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn tobo_miou(
    pred: *const u16,
    gt: *const u16,
    height: usize,
    width: usize,
    out: *mut f64,
) -> ToboStatus {
    guard(|| {
        if pred.is_null() || gt.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let n = height
            .checked_mul(width)
            .ok_or_else(|| invalid("extent overflows".into()))?;
        let map = |p: *const u16| core(LabelMap::new(height, width, std::slice::from_raw_parts(p, n).to_vec()));
        *out = core(tobo_core::eval::miou(&map(pred)?, &map(gt)?))?;
        Ok(())
    })
}

/// Number of masked patches, `floor(ratio * n)`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tobo_mask_count(n: usize, ratio: f64, out: *mut usize) -> ToboStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = core(mask_count(n, ratio))?;
        Ok(())
    })
}

/// Draws a mask from substream `index` of `seed` and writes the sorted
/// masked indices to `masked` (capacity `cap`), their count to `written`.
///
/// # Safety
/// `masked` must hold `cap` entries; `written` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tobo_sample_mask(
    n: usize,
    ratio: f64,
    seed: u64,
    index: u64,
    masked: *mut usize,
    cap: usize,
    written: *mut usize,
) -> ToboStatus {
    guard(|| {
        if masked.is_null() || written.is_null() {
            return Err(null("output"));
        }
        let m = core(sample_mask(n, ratio, &mut substream(seed, Stream::Masks, index)))?;
        if m.masked.len() > cap {
            return Err(invalid(format!(
                "{} masked indices exceed capacity {cap}",
                m.masked.len()
            )));
        }
        std::slice::from_raw_parts_mut(masked, m.masked.len()).copy_from_slice(&m.masked);
        *written = m.masked.len();
        Ok(())
    })
}
