//! C ABI for the cystseg pipeline: opaque handles, integer status codes,
//! and a thread-local last-error message.
//!
//! Conventions:
//! - Constructors return an opaque pointer, or NULL on failure; the error
//!   is then available from `cystseg_last_error_message`.
//! - Fallible non-constructors return a [`CystsegStatus`] code.
//! - Every handle has exactly one `*_free` function; passing NULL to a
//!   `*_free` is a no-op. Handles are not reference counted.
//! - UTF-8 is required for all string arguments.
//!
//! The header `include/cystseg.h` is generated by cbindgen at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use cystseg::config;
use cystseg::eval::dice;
use cystseg::forest::{load_model, save_model, ForestModel};
use cystseg::phantom::{write_phantom, PhantomSpec};
use cystseg::pipeline::{
    classify_volume, prepare_eval_volumes, process_volume, train_on_volumes, PipelineConfig,
};
use cystseg::volume::{load_bundle, BinaryMask, MaskSource, VolumeBundle};

/// Status codes returned by fallible functions.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CystsegStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullArgument = 1,
    /// An argument failed validation (bad key, bad value, bad index).
    InvalidArgument = 2,
    /// File system or image format failure.
    IoError = 3,
    /// Data or model error (dimensions, classes, corrupt files).
    DataError = 4,
    /// Unexpected internal failure.
    InternalError = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(msg).ok();
    });
}

fn clear_error() {
    LAST_ERROR.with(|slot| slot.borrow_mut().take());
}

/// Message describing the most recent failure on this thread, or NULL.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cystseg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| match &*slot.borrow() {
        Some(msg) => msg.as_ptr(),
        None => std::ptr::null(),
    })
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn cystseg_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Opaque pipeline configuration.
pub struct CystsegConfig(PipelineConfig);
/// Opaque loaded volume (slices plus any ground truth).
pub struct CystsegVolume(VolumeBundle);
/// Opaque trained random-forest model.
pub struct CystsegModel(ForestModel);
/// Opaque segmentation result: one mask per slice on the 512x256 grid.
pub struct CystsegResult {
    masks: Vec<BinaryMask>,
}

fn guard<T>(
    what: &str,
    f: impl FnOnce() -> Result<T, (CystsegStatus, String)>,
) -> Result<T, CystsegStatus> {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(v)) => {
            clear_error();
            Ok(v)
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            Err(status)
        }
        Err(_) => {
            set_error(format!("{what}: internal panic"));
            Err(CystsegStatus::InternalError)
        }
    }
}

/// # Safety
/// `ptr` must be NULL or a valid NUL-terminated string.
unsafe fn cstr_arg(ptr: *const c_char, what: &str) -> Result<String, (CystsegStatus, String)> {
    if ptr.is_null() {
        return Err((CystsegStatus::NullArgument, format!("{what} is NULL")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| {
            (
                CystsegStatus::InvalidArgument,
                format!("{what} is not UTF-8"),
            )
        })
}

fn volume_err_status(e: &cystseg::volume::VolumeError) -> CystsegStatus {
    use cystseg::volume::VolumeError::*;
    match e {
        MissingFile(_) | Io { .. } => CystsegStatus::IoError,
        _ => CystsegStatus::DataError,
    }
}

fn pipeline_err_status(e: &cystseg::PipelineError) -> CystsegStatus {
    use cystseg::PipelineError::*;
    match e {
        Volume(v) => volume_err_status(v),
        Forest(cystseg::forest::ForestError::Io(_)) => CystsegStatus::IoError,
        Denoise(cystseg::denoise::DenoiseError::InvalidParams(_)) | Saliency(_) | Mser(_) => {
            CystsegStatus::InvalidArgument
        }
        _ => CystsegStatus::DataError,
    }
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

/// Creates a configuration with the library defaults.
#[no_mangle]
pub extern "C" fn cystseg_config_new() -> *mut CystsegConfig {
    clear_error();
    Box::into_raw(Box::new(CystsegConfig(PipelineConfig::default())))
}

/// Sets one configuration key (same keys as the config-file format, e.g.
/// `tv_lambda`, `mser_min_area`, `threshold`, `seed`).
///
/// # Safety
/// `cfg` must come from [`cystseg_config_new`]; `key` and `value` must be
/// valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn cystseg_config_set(
    cfg: *mut CystsegConfig,
    key: *const c_char,
    value: *const c_char,
) -> CystsegStatus {
    let result = guard("config_set", || {
        if cfg.is_null() {
            return Err((CystsegStatus::NullArgument, "cfg is NULL".into()));
        }
        let key = cstr_arg(key, "key")?;
        let value = cstr_arg(value, "value")?;
        let cfg = &mut (*cfg).0;
        config::apply_one(cfg, &key, &value)
            .map_err(|e| (CystsegStatus::InvalidArgument, e.to_string()))?;
        config::validate(cfg).map_err(|e| (CystsegStatus::InvalidArgument, e))
    });
    result.err().unwrap_or(CystsegStatus::Ok)
}

/// # Safety
/// `cfg` must be NULL or an unfreed pointer from [`cystseg_config_new`].
#[no_mangle]
pub unsafe extern "C" fn cystseg_config_free(cfg: *mut CystsegConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

// ---------------------------------------------------------------------------
// Volumes
// ---------------------------------------------------------------------------

/// Loads a volume (and any ground truth) from a manifest file.
/// Returns NULL on failure.
///
/// # Safety
/// `manifest_path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cystseg_volume_load(manifest_path: *const c_char) -> *mut CystsegVolume {
    let result = guard("volume_load", || {
        let path = cstr_arg(manifest_path, "manifest_path")?;
        let bundle =
            load_bundle(Path::new(&path)).map_err(|e| (volume_err_status(&e), e.to_string()))?;
        Ok(CystsegVolume(bundle))
    });
    match result {
        Ok(v) => Box::into_raw(Box::new(v)),
        Err(_) => std::ptr::null_mut(),
    }
}

/// Number of slices, or -1 if the handle is NULL.
///
/// # Safety
/// `vol` must be NULL or an unfreed pointer from [`cystseg_volume_load`].
#[no_mangle]
pub unsafe extern "C" fn cystseg_volume_slice_count(vol: *const CystsegVolume) -> i64 {
    if vol.is_null() {
        return -1;
    }
    (*vol).0.volume.slices.len() as i64
}

/// # Safety
/// `vol` must be NULL or an unfreed pointer from [`cystseg_volume_load`].
#[no_mangle]
pub unsafe extern "C" fn cystseg_volume_free(vol: *mut CystsegVolume) {
    if !vol.is_null() {
        drop(Box::from_raw(vol));
    }
}

/// Writes one synthetic phantom volume (manifest + PGM slices + ground
/// truth) under `dir`.
///
/// # Safety
/// `dir` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cystseg_phantom_write(
    dir: *const c_char,
    n_slices: usize,
    speckle_sigma: f64,
    seed: u64,
) -> CystsegStatus {
    let result = guard("phantom_write", || {
        let dir = cstr_arg(dir, "dir")?;
        let spec = PhantomSpec {
            n_slices,
            speckle_sigma,
            seed,
            volume_id: format!("phantom_{seed:08x}"),
            ..PhantomSpec::default()
        };
        write_phantom(Path::new(&dir), &spec).map_err(|e| {
            let status = match &e {
                cystseg::phantom::PhantomError::Volume(v) => volume_err_status(v),
                _ => CystsegStatus::InvalidArgument,
            };
            (status, e.to_string())
        })?;
        Ok(())
    });
    result.err().unwrap_or(CystsegStatus::Ok)
}

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

/// Loads a `.ocsf` model file. Returns NULL on failure.
///
/// # Safety
/// `path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cystseg_model_load(path: *const c_char) -> *mut CystsegModel {
    let result = guard("model_load", || {
        let path = cstr_arg(path, "path")?;
        let model = load_model(Path::new(&path)).map_err(|e| {
            let status = match &e {
                cystseg::forest::ForestError::Io(_) => CystsegStatus::IoError,
                _ => CystsegStatus::DataError,
            };
            (status, e.to_string())
        })?;
        Ok(CystsegModel(model))
    });
    match result {
        Ok(m) => Box::into_raw(Box::new(m)),
        Err(_) => std::ptr::null_mut(),
    }
}

/// # Safety
/// `model` must be an unfreed pointer from a model constructor; `path` must
/// be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cystseg_model_save(
    model: *const CystsegModel,
    path: *const c_char,
) -> CystsegStatus {
    let result = guard("model_save", || {
        if model.is_null() {
            return Err((CystsegStatus::NullArgument, "model is NULL".into()));
        }
        let path = cstr_arg(path, "path")?;
        save_model(&(*model).0, Path::new(&path))
            .map_err(|e| (CystsegStatus::IoError, e.to_string()))
    });
    result.err().unwrap_or(CystsegStatus::Ok)
}

/// Number of trees, or -1 if the handle is NULL.
///
/// # Safety
/// `model` must be NULL or an unfreed model pointer.
#[no_mangle]
pub unsafe extern "C" fn cystseg_model_n_trees(model: *const CystsegModel) -> i32 {
    if model.is_null() {
        return -1;
    }
    (*model).0.n_trees() as i32
}

/// # Safety
/// `model` must be NULL or an unfreed model pointer.
#[no_mangle]
pub unsafe extern "C" fn cystseg_model_free(model: *mut CystsegModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Trains a model on manifests that carry ground truth. `manifests` is an
/// array of `n_manifests` NUL-terminated paths. Returns NULL on failure.
///
/// # Safety
/// `cfg` must be an unfreed config pointer; `manifests` must point to
/// `n_manifests` valid strings.
#[no_mangle]
pub unsafe extern "C" fn cystseg_train(
    cfg: *const CystsegConfig,
    manifests: *const *const c_char,
    n_manifests: usize,
) -> *mut CystsegModel {
    let result = guard("train", || {
        if cfg.is_null() {
            return Err((CystsegStatus::NullArgument, "cfg is NULL".into()));
        }
        if manifests.is_null() || n_manifests == 0 {
            return Err((CystsegStatus::NullArgument, "manifest list is empty".into()));
        }
        let cfg = &(*cfg).0;
        let mut paths = Vec::with_capacity(n_manifests);
        for i in 0..n_manifests {
            let p = *manifests.add(i);
            paths.push(PathBuf::from(cstr_arg(p, "manifest path")?));
        }
        let mut bundles = Vec::new();
        for p in &paths {
            bundles.push(load_bundle(p).map_err(|e| (volume_err_status(&e), e.to_string()))?);
        }
        let volumes = prepare_eval_volumes(&bundles, cfg)
            .map_err(|e| (pipeline_err_status(&e), e.to_string()))?;
        let inputs: Vec<_> = volumes
            .iter()
            .map(|ev| (&ev.artifacts, ev.gt.as_slice()))
            .collect();
        let (model, _) =
            train_on_volumes(&inputs, cfg).map_err(|e| (pipeline_err_status(&e), e.to_string()))?;
        Ok(CystsegModel(model))
    });
    match result {
        Ok(m) => Box::into_raw(Box::new(m)),
        Err(_) => std::ptr::null_mut(),
    }
}

// ---------------------------------------------------------------------------
// Segmentation
// ---------------------------------------------------------------------------

/// Runs the full pipeline on a volume with a trained model. Returns NULL
/// on failure.
///
/// # Safety
/// All three handles must be unfreed pointers from their constructors.
#[no_mangle]
pub unsafe extern "C" fn cystseg_segment(
    cfg: *const CystsegConfig,
    volume: *const CystsegVolume,
    model: *const CystsegModel,
) -> *mut CystsegResult {
    let result = guard("segment", || {
        if cfg.is_null() || volume.is_null() || model.is_null() {
            return Err((
                CystsegStatus::NullArgument,
                "cfg/volume/model is NULL".into(),
            ));
        }
        let cfg = &(*cfg).0;
        let arts = process_volume(&(*volume).0.volume, cfg)
            .map_err(|e| (pipeline_err_status(&e), e.to_string()))?;
        let classified = classify_volume(&arts, &(*model).0, cfg.threshold)
            .map_err(|e| (pipeline_err_status(&e), e.to_string()))?;
        Ok(CystsegResult {
            masks: classified.into_iter().map(|c| c.mask).collect(),
        })
    });
    match result {
        Ok(r) => Box::into_raw(Box::new(r)),
        Err(_) => std::ptr::null_mut(),
    }
}

/// Number of per-slice masks, or -1 if the handle is NULL.
///
/// # Safety
/// `result` must be NULL or an unfreed pointer from [`cystseg_segment`].
#[no_mangle]
pub unsafe extern "C" fn cystseg_result_slice_count(result: *const CystsegResult) -> i64 {
    if result.is_null() {
        return -1;
    }
    (*result).masks.len() as i64
}

/// Mask width in pixels (the standard grid), or -1 on NULL/empty.
///
/// # Safety
/// `result` must be NULL or an unfreed pointer from [`cystseg_segment`].
#[no_mangle]
pub unsafe extern "C" fn cystseg_result_width(result: *const CystsegResult) -> i64 {
    if result.is_null() {
        return -1;
    }
    let masks = &(*result).masks;
    match masks.first() {
        Some(m) => m.width() as i64,
        None => -1,
    }
}

/// Mask height in pixels, or -1 on NULL/empty.
///
/// # Safety
/// `result` must be NULL or an unfreed pointer from [`cystseg_segment`].
#[no_mangle]
pub unsafe extern "C" fn cystseg_result_height(result: *const CystsegResult) -> i64 {
    if result.is_null() {
        return -1;
    }
    let masks = &(*result).masks;
    match masks.first() {
        Some(m) => m.height() as i64,
        None => -1,
    }
}

/// Copies one slice's mask into `buffer` as 0/255 bytes, row-major.
/// `buffer_len` must be at least `width * height`.
///
/// # Safety
/// `result` must be an unfreed pointer from [`cystseg_segment`]; `buffer`
/// must point to at least `buffer_len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn cystseg_result_mask(
    result: *const CystsegResult,
    slice_index: usize,
    buffer: *mut u8,
    buffer_len: usize,
) -> CystsegStatus {
    let r = guard("result_mask", || {
        if result.is_null() || buffer.is_null() {
            return Err((CystsegStatus::NullArgument, "result/buffer is NULL".into()));
        }
        let masks = &(*result).masks;
        let mask = masks.get(slice_index).ok_or((
            CystsegStatus::InvalidArgument,
            format!("slice index {slice_index} out of range ({})", masks.len()),
        ))?;
        let needed = mask.width() * mask.height();
        if buffer_len < needed {
            return Err((
                CystsegStatus::InvalidArgument,
                format!("buffer holds {buffer_len} bytes, need {needed}"),
            ));
        }
        for (i, &bit) in mask.bits().iter().enumerate() {
            *buffer.add(i) = if bit { 255 } else { 0 };
        }
        Ok(())
    });
    r.err().unwrap_or(CystsegStatus::Ok)
}

/// # Safety
/// `result` must be NULL or an unfreed pointer from [`cystseg_segment`].
#[no_mangle]
pub unsafe extern "C" fn cystseg_result_free(result: *mut CystsegResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Dice coefficient of two row-major byte masks of `width * height` pixels
/// (nonzero = foreground). Returns a value in [0,1], or -1.0 on bad input.
///
/// # Safety
/// `pred` and `gt` must each point to `width * height` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn cystseg_dice(
    pred: *const u8,
    gt: *const u8,
    width: usize,
    height: usize,
) -> f64 {
    let result = guard("dice", || {
        if pred.is_null() || gt.is_null() {
            return Err((CystsegStatus::NullArgument, "pred/gt is NULL".into()));
        }
        if width == 0 || height == 0 {
            return Err((
                CystsegStatus::InvalidArgument,
                "empty mask dimensions".into(),
            ));
        }
        let n = width * height;
        let pred = std::slice::from_raw_parts(pred, n);
        let gt = std::slice::from_raw_parts(gt, n);
        let to_mask = |bytes: &[u8]| {
            BinaryMask::new(
                width,
                height,
                bytes.iter().map(|&b| b != 0).collect(),
                MaskSource::Prediction,
            )
        };
        dice(&to_mask(pred), &to_mask(gt)).map_err(|e| (CystsegStatus::DataError, e.to_string()))
    });
    result.unwrap_or(-1.0)
}
