//! C ABI over the croco library.
//!
//! Every function returns a [`CrocoStatus`]; on failure the message is
//! available from [`croco_last_error`] on the same thread. Models are
//! opaque handles released with [`croco_model_free`]. Images cross the
//! boundary as row-major `height × width × 3` float buffers in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use croco::checkpoint::Checkpoint;
use croco::flops::{count_flops, count_params};
use croco::heads::metrics;
use croco::io::RawMap;
use croco::model::{CroCo, DecoderVariant, ModelConfig};
use croco::patches::{masked_count, sample_mask, ImageRgb};
use croco::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrocoStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Data = 3,
    Numerical = 4,
    Panic = 5,
}

/// Opaque model handle.
pub struct CrocoModel {
    inner: CroCo<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CrocoStatus {
    match e.exit_code() {
        2 => CrocoStatus::Config,
        4 => CrocoStatus::Numerical,
        _ => CrocoStatus::Data,
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

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CrocoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CrocoStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            CrocoStatus::NullPointer
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            CrocoStatus::Panic
        }
    }
}

unsafe fn nonnull<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<String, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Fail::Lib(Error::Input(format!("{what} is not valid UTF-8"))))
}

unsafe fn image_arg(p: *const f32, size: usize, what: &'static str) -> Result<ImageRgb, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(ImageRgb::new(
        size,
        size,
        slice::from_raw_parts(p, size * size * 3).to_vec(),
    )?)
}

/// Last error message on this thread, or null. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn croco_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Creates a freshly initialized model. `base` selects the ViT-Base sizes
/// (with `catblock` choosing the decoder), otherwise the tiny 64×64 config.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn croco_model_new(
    base: bool,
    catblock: bool,
    seed: u64,
    out: *mut *mut CrocoModel,
) -> CrocoStatus {
    guard(|| {
        let out = out.as_mut().ok_or(Fail::Null("out"))?;
        let variant = if catblock {
            DecoderVariant::CatBlock
        } else {
            DecoderVariant::CrossBlock
        };
        let cfg = if base {
            ModelConfig::base(variant)
        } else {
            ModelConfig {
                decoder: variant,
                ..ModelConfig::tiny()
            }
        };
        let inner = CroCo::<f32>::new(cfg, seed)?;
        *out = Box::into_raw(Box::new(CrocoModel { inner }));
        Ok(())
    })
}

/// Loads a model from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn croco_model_load(path: *const c_char, out: *mut *mut CrocoModel) -> CrocoStatus {
    guard(|| {
        let out = out.as_mut().ok_or(Fail::Null("out"))?;
        let path = path_arg(path, "path")?;
        let inner = Checkpoint::load(&path)?.restore_model()?;
        *out = Box::into_raw(Box::new(CrocoModel { inner }));
        Ok(())
    })
}

/// Saves the model weights (without optimizer state).
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn croco_model_save(model: *const CrocoModel, path: *const c_char) -> CrocoStatus {
    guard(|| {
        let m = nonnull(model, "model")?;
        let path = path_arg(path, "path")?;
        Checkpoint::from_model(&m.inner, None).save(path)?;
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn croco_model_free(model: *mut CrocoModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input side in pixels and number of parameters.
///
/// # Safety
/// `model` must come from this library; outputs may be null.
#[no_mangle]
pub unsafe extern "C" fn croco_model_info(
    model: *const CrocoModel,
    image_size: *mut usize,
    num_params: *mut usize,
) -> CrocoStatus {
    guard(|| {
        let m = nonnull(model, "model")?;
        if let Some(s) = image_size.as_mut() {
            *s = m.inner.cfg().image_size;
        }
        if let Some(n) = num_params.as_mut() {
            *n = m.inner.num_params();
        }
        Ok(())
    })
}

/// Pre-training loss of one pair under a mask drawn from `seed`.
///
/// # Safety
/// `view1` and `view2` must hold `image_size² · 3` floats; `loss` must be valid.
#[no_mangle]
pub unsafe extern "C" fn croco_model_loss(
    model: *const CrocoModel,
    view1: *const f32,
    view2: *const f32,
    mask_ratio: f64,
    seed: u64,
    loss: *mut f64,
) -> CrocoStatus {
    guard(|| {
        let m = &nonnull(model, "model")?.inner;
        let loss = loss.as_mut().ok_or(Fail::Null("loss"))?;
        let size = m.cfg().image_size;
        let (a, b) = (image_arg(view1, size, "view1")?, image_arg(view2, size, "view2")?);
        let mask = sample_mask(m.cfg().num_patches(), mask_ratio, seed)?;
        *loss = m.eval_loss(&m.tokens(&a)?, &m.tokens(&b)?, &mask)?;
        Ok(())
    })
}

/// Writes the reconstruction composite (prediction at masked patches, input
/// elsewhere) into `composite`.
///
/// # Safety
/// All image buffers must hold `image_size² · 3` floats.
#[no_mangle]
pub unsafe extern "C" fn croco_model_reconstruct(
    model: *const CrocoModel,
    view1: *const f32,
    view2: *const f32,
    mask_ratio: f64,
    seed: u64,
    composite: *mut f32,
) -> CrocoStatus {
    guard(|| {
        let m = &nonnull(model, "model")?.inner;
        if composite.is_null() {
            return Err(Fail::Null("composite"));
        }
        let size = m.cfg().image_size;
        let (a, b) = (image_arg(view1, size, "view1")?, image_arg(view2, size, "view2")?);
        let mask = sample_mask(m.cfg().num_patches(), mask_ratio, seed)?;
        let r = m.reconstruct(&a, &b, &mask)?;
        slice::from_raw_parts_mut(composite, size * size * 3).copy_from_slice(&r.composite.data);
        Ok(())
    })
}

/// Number of masked tokens out of `n` at ratio `r`.
#[no_mangle]
pub extern "C" fn croco_masked_count(n: usize, r: f64) -> usize {
    masked_count(n, r)
}

/// Parameter count and forward FLOPs (both encoder passes) of the ViT-Base
/// configuration with the chosen decoder.
///
/// # Safety
/// Outputs may be null.
#[no_mangle]
pub unsafe extern "C" fn croco_base_counts(catblock: bool, params: *mut u64, flops: *mut u64) -> CrocoStatus {
    guard(|| {
        let cfg = ModelConfig::base(if catblock {
            DecoderVariant::CatBlock
        } else {
            DecoderVariant::CrossBlock
        });
        if let Some(p) = params.as_mut() {
            *p = count_params(&cfg).total as u64;
        }
        if let Some(f) = flops.as_mut() {
            *f = count_flops(&cfg).total;
        }
        Ok(())
    })
}

/// Average endpoint error of two `height × width × 2` flow fields.
///
/// # Safety
/// `pred` and `gt` must hold `height · width · 2` floats; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn croco_aepe(
    pred: *const f32,
    gt: *const f32,
    height: usize,
    width: usize,
    out: *mut f64,
) -> CrocoStatus {
    guard(|| {
        let out = out.as_mut().ok_or(Fail::Null("out"))?;
        if pred.is_null() || gt.is_null() {
            return Err(Fail::Null("pred/gt"));
        }
        let n = height * width * 2;
        let p = RawMap::new(height, width, 2, slice::from_raw_parts(pred, n).to_vec())?;
        let g = RawMap::new(height, width, 2, slice::from_raw_parts(gt, n).to_vec())?;
        *out = metrics::aepe(&p, &g, None)?;
        Ok(())
    })
}
