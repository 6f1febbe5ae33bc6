//! C ABI over `wsol`: load a checkpoint, classify images and compute
//! localization maps and boxes.
//!
//! Every fallible function returns a `WsolStatus`; on failure the message is
//! available from `wsol_last_error` on the same thread. Images are passed as
//! `H×W×3` row-major `double` pixels in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use wsol::attribution::{self, MapOptions, MapSource};
use wsol::metrics::{self, BBox};
use wsol::model::{checkpoint, Vit};
use wsol::{Error, Tensor};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WsolStatus {
    Ok = 0,
    /// Null pointer, wrong buffer length or out-of-range value.
    InvalidArgument = 1,
    Io = 2,
    /// Malformed checkpoint or image file.
    Format = 3,
    /// Input does not match the model.
    Shape = 4,
    Config = 5,
    /// A Rust panic was caught at the boundary.
    Internal = 6,
}

/// Localization map method.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WsolMethod {
    /// Attention rollout, class-agnostic.
    Ar = 0,
    /// Gradient-weighted attention rollout.
    Gar = 1,
}

/// Half-open pixel box `[x0, x1) × [y0, y1)`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WsolBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WsolModelInfo {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub num_classes: usize,
    /// Side of the patch grid, and of the raw map.
    pub grid_size: usize,
}

/// Opaque loaded model.
pub struct WsolModel {
    vit: Vit,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> WsolStatus {
    match e {
        Error::Shape(_) => WsolStatus::Shape,
        Error::InvalidArgument(_) => WsolStatus::InvalidArgument,
        Error::Config(_) | Error::Parse { .. } => WsolStatus::Config,
        Error::Io { .. } => WsolStatus::Io,
        Error::Format { .. } => WsolStatus::Format,
    }
}

fn invalid(msg: &str) -> Error {
    Error::InvalidArgument(msg.to_string())
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Error>) -> WsolStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            WsolStatus::Ok
        }
        Ok(Err(e)) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            WsolStatus::Internal
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Error> {
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Error> {
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn model_ref<'a>(model: *const WsolModel) -> Result<&'a WsolModel, Error> {
    model.as_ref().ok_or_else(|| invalid("model is null"))
}

unsafe fn image_tensor(vit: &Vit, pixels: *const f64, len: usize) -> Result<Tensor, Error> {
    let c = &vit.config;
    let need = c.image_size * c.image_size * c.channels;
    if len != need {
        return Err(Error::Shape(format!(
            "image buffer has {len} values, the model expects {need}"
        )));
    }
    let data = slice(pixels, len, "pixels")?;
    Tensor::new(vec![c.image_size, c.image_size, c.channels], data.to_vec())
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn wsol_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn wsol_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint. On success `*out` owns the model; release it with
/// `wsol_model_free`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wsol_model_load(path: *const c_char, out: *mut *mut WsolModel) -> WsolStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return Err(invalid("path and out must not be null"));
        }
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| invalid("path is not UTF-8"))?;
        let vit = checkpoint::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(WsolModel { vit }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from `wsol_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn wsol_model_free(model: *mut WsolModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` and `info` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn wsol_model_info(model: *const WsolModel, info: *mut WsolModelInfo) -> WsolStatus {
    guard(|| {
        let m = model_ref(model)?;
        let info = info.as_mut().ok_or_else(|| invalid("info is null"))?;
        let c = &m.vit.config;
        *info = WsolModelInfo {
            image_size: c.image_size,
            channels: c.channels,
            patch_size: c.patch_size,
            depth: c.depth,
            embed_dim: c.embed_dim,
            heads: c.heads,
            num_classes: c.num_classes,
            grid_size: c.grid_size(),
        };
        Ok(())
    })
}

/// Eval-mode forward pass. Writes `num_classes` logits and the argmax class.
///
/// # Safety
/// `pixels` must hold `pixels_len` values and `logits` `logits_len` values;
/// `predicted` may be null.
#[no_mangle]
pub unsafe extern "C" fn wsol_model_classify(
    model: *const WsolModel,
    pixels: *const f64,
    pixels_len: usize,
    logits: *mut f64,
    logits_len: usize,
    predicted: *mut usize,
) -> WsolStatus {
    guard(|| {
        let m = model_ref(model)?;
        let image = image_tensor(&m.vit, pixels, pixels_len)?;
        if logits_len != m.vit.config.num_classes {
            return Err(Error::Shape(format!(
                "logits buffer has {logits_len} slots, the model has {} classes",
                m.vit.config.num_classes
            )));
        }
        let out = slice_mut(logits, logits_len, "logits")?;
        let r = m.vit.forward(&image, None)?;
        out.copy_from_slice(&r.logits);
        if let Some(p) = predicted.as_mut() {
            *p = wsol::model::argmax(&r.logits);
        }
        Ok(())
    })
}

/// Localization map upsampled to the image and min-max normalized to `[0, 1]`.
/// `target_class < 0` targets the predicted class; AR ignores the class.
///
/// # Safety
/// `pixels` must hold `pixels_len` values and `map` `map_len` values
/// (`image_size²`); `predicted` may be null.
#[no_mangle]
pub unsafe extern "C" fn wsol_model_localization_map(
    model: *const WsolModel,
    pixels: *const f64,
    pixels_len: usize,
    method: WsolMethod,
    target_class: i64,
    map: *mut f64,
    map_len: usize,
    predicted: *mut usize,
) -> WsolStatus {
    guard(|| {
        let m = model_ref(model)?;
        let image = image_tensor(&m.vit, pixels, pixels_len)?;
        let n = m.vit.config.image_size;
        if map_len != n * n {
            return Err(Error::Shape(format!("map buffer has {map_len} slots, expected {}", n * n)));
        }
        let class = match target_class {
            c if c < 0 => None,
            c if (c as usize) < m.vit.config.num_classes => Some(c as usize),
            c => return Err(Error::Shape(format!("class {c} out of range"))),
        };
        let opts = MapOptions {
            source: match method {
                WsolMethod::Ar => MapSource::Ar,
                WsolMethod::Gar => MapSource::Gar,
            },
            ..MapOptions::default()
        };
        let out = slice_mut(map, map_len, "map")?;
        let ex = attribution::explain(&m.vit, &image, class, &opts)?;
        let up = metrics::normalize_map(&attribution::upsample_map(&ex.map.grid, n)?);
        out.copy_from_slice(up.data());
        if let Some(p) = predicted.as_mut() {
            *p = ex.predicted;
        }
        Ok(())
    })
}

/// Box of the largest 4-connected component of `map > tau`. `*found` is false
/// when the mask is empty.
///
/// # Safety
/// `map` must hold `width·height` values; `out` and `found` must be valid.
#[no_mangle]
pub unsafe extern "C" fn wsol_box_from_map(
    map: *const f64,
    width: usize,
    height: usize,
    tau: f64,
    out: *mut WsolBox,
    found: *mut bool,
) -> WsolStatus {
    guard(|| {
        let values = slice(map, width * height, "map")?;
        let (out, found) = match (out.as_mut(), found.as_mut()) {
            (Some(o), Some(f)) => (o, f),
            _ => return Err(invalid("out and found must not be null")),
        };
        if width == 0 || height == 0 || !tau.is_finite() {
            return Err(invalid("empty map or non-finite tau"));
        }
        let t = Tensor::new(vec![height, width], values.to_vec())?;
        let b = metrics::box_from_mask(&metrics::binarize(&t, tau)?);
        *found = b.is_some();
        *out = b.map_or_else(WsolBox::default, |b| WsolBox {
            x0: b.x0,
            y0: b.y0,
            x1: b.x1,
            y1: b.y1,
        });
        Ok(())
    })
}

/// Intersection over union of two half-open boxes.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn wsol_iou(a: *const WsolBox, b: *const WsolBox, out: *mut f64) -> WsolStatus {
    guard(|| {
        let (a, b, out) = match (a.as_ref(), b.as_ref(), out.as_mut()) {
            (Some(a), Some(b), Some(o)) => (a, b, o),
            _ => return Err(invalid("boxes and out must not be null")),
        };
        let conv = |w: &WsolBox| BBox::new(w.x0, w.y0, w.x1, w.y1);
        *out = metrics::iou(&conv(a)?, &conv(b)?);
        Ok(())
    })
}
