//! C ABI for the magnet-da toolkit.
//!
//! The surface follows the usual opaque-handle pattern: constructors return
//! `MagnetStatus` and write a handle through an out-pointer, every handle has
//! a `_free` function, and the last error message is kept per thread and
//! fetched with [`magnet_last_error_message`]. The header is generated by
//! cbindgen into `include/magnet_da.h` at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

use magnet_da::checkpoint;
use magnet_da::cli::{apply_overrides, parse_config_text};
use magnet_da::data::{self, Domain};
use magnet_da::error::MagnetError;
use magnet_da::losses;
use magnet_da::network::{MagnetModel, NetworkConfig, TransitionType};
use magnet_da::tensor::Tensor;
use magnet_da::train::{self, TrainConfig};

/// Result codes returned by every fallible call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum MagnetStatus {
    MagnetOk = 0,
    /// A required pointer argument was null.
    MagnetNullArgument = 1,
    /// An argument failed validation; see `magnet_last_error_message`.
    MagnetInvalidArgument = 2,
    /// File or parsing failure.
    MagnetIoError = 3,
    /// Training or evaluation failed.
    MagnetRuntimeError = 4,
}

/// Opaque dataset handle.
pub struct MagnetDataset(data::Dataset);

/// Opaque model handle.
pub struct MagnetModelHandle(MagnetModel);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(err: &MagnetError) -> MagnetStatus {
    let status = match err {
        MagnetError::Parameter(_) | MagnetError::Config(_) | MagnetError::Dimension(_) => {
            MagnetStatus::MagnetInvalidArgument
        }
        MagnetError::Io(_)
        | MagnetError::BadMagic { .. }
        | MagnetError::Version { .. }
        | MagnetError::Truncated(_) => MagnetStatus::MagnetIoError,
        _ => MagnetStatus::MagnetRuntimeError,
    };
    let msg = CString::new(err.to_string()).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = msg);
    status
}

fn set_error_msg(msg: &str, status: MagnetStatus) -> MagnetStatus {
    let msg = CString::new(msg).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = msg);
    status
}

/// Message describing the most recent error on this thread. The pointer is
/// valid until the next failing call on the same thread; do not free it.
#[no_mangle]
pub extern "C" fn magnet_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Crate version as a static string; do not free it.
#[no_mangle]
pub extern "C" fn magnet_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

unsafe fn cstr_arg<'a>(ptr: *const c_char) -> Option<&'a str> {
    if ptr.is_null() {
        return None;
    }
    CStr::from_ptr(ptr).to_str().ok()
}

/// Generate a synthetic shape dataset.
///
/// `domain` is one of `"photo"`, `"cad"`, `"sketch"`.
///
/// # Safety
/// `domain` must be a valid NUL-terminated string and `out` a valid pointer;
/// the returned handle must be released with `magnet_dataset_free`.
#[no_mangle]
pub unsafe extern "C" fn magnet_dataset_generate(
    domain: *const c_char,
    classes: u32,
    n: u64,
    image_size: u32,
    seed: u64,
    out: *mut *mut MagnetDataset,
) -> MagnetStatus {
    if out.is_null() {
        return set_error_msg("out pointer is null", MagnetStatus::MagnetNullArgument);
    }
    let Some(domain) = cstr_arg(domain) else {
        return set_error_msg("domain is null or not UTF-8", MagnetStatus::MagnetNullArgument);
    };
    let result = Domain::parse(domain).and_then(|d| {
        data::generate_shapes(d, classes as usize, n as usize, image_size as usize, seed)
    });
    match result {
        Ok(ds) => {
            *out = Box::into_raw(Box::new(MagnetDataset(ds)));
            MagnetStatus::MagnetOk
        }
        Err(e) => set_error(&e),
    }
}

/// Read a DMDS file.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer;
/// the returned handle must be released with `magnet_dataset_free`.
#[no_mangle]
pub unsafe extern "C" fn magnet_dataset_read(
    path: *const c_char,
    out: *mut *mut MagnetDataset,
) -> MagnetStatus {
    if out.is_null() {
        return set_error_msg("out pointer is null", MagnetStatus::MagnetNullArgument);
    }
    let Some(path) = cstr_arg(path) else {
        return set_error_msg("path is null or not UTF-8", MagnetStatus::MagnetNullArgument);
    };
    match data::read_dataset(Path::new(path)) {
        Ok(ds) => {
            *out = Box::into_raw(Box::new(MagnetDataset(ds)));
            MagnetStatus::MagnetOk
        }
        Err(e) => set_error(&e),
    }
}

/// Write a dataset as a DMDS file.
///
/// # Safety
/// `ds` must be a live handle from this library and `path` a valid string.
#[no_mangle]
pub unsafe extern "C" fn magnet_dataset_write(
    ds: *const MagnetDataset,
    path: *const c_char,
) -> MagnetStatus {
    let Some(ds) = ds.as_ref() else {
        return set_error_msg("dataset handle is null", MagnetStatus::MagnetNullArgument);
    };
    let Some(path) = cstr_arg(path) else {
        return set_error_msg("path is null or not UTF-8", MagnetStatus::MagnetNullArgument);
    };
    match data::write_dataset(&ds.0, Path::new(path)) {
        Ok(()) => MagnetStatus::MagnetOk,
        Err(e) => set_error(&e),
    }
}

/// Number of images in a dataset; 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn magnet_dataset_len(ds: *const MagnetDataset) -> u64 {
    ds.as_ref().map_or(0, |d| d.0.len() as u64)
}

/// Number of classes in a dataset's vocabulary; 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn magnet_dataset_num_classes(ds: *const MagnetDataset) -> u32 {
    ds.as_ref().map_or(0, |d| d.0.num_classes() as u32)
}

/// Copy one image's pixels (row-major, `[0, 1]`) into `buffer`.
///
/// # Safety
/// `buffer` must point to at least `buffer_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn magnet_dataset_pixels(
    ds: *const MagnetDataset,
    index: u64,
    buffer: *mut f64,
    buffer_len: u64,
) -> MagnetStatus {
    let Some(ds) = ds.as_ref() else {
        return set_error_msg("dataset handle is null", MagnetStatus::MagnetNullArgument);
    };
    if buffer.is_null() {
        return set_error_msg("buffer is null", MagnetStatus::MagnetNullArgument);
    }
    if index as usize >= ds.0.len() {
        return set_error_msg("image index out of range", MagnetStatus::MagnetInvalidArgument);
    }
    let pixels = ds.0.image(index as usize);
    if (buffer_len as usize) < pixels.len() {
        return set_error_msg("buffer too small", MagnetStatus::MagnetInvalidArgument);
    }
    std::ptr::copy_nonoverlapping(pixels.as_ptr(), buffer, pixels.len());
    MagnetStatus::MagnetOk
}

/// Release a dataset handle (null is ignored).
///
/// # Safety
/// `ds` must be null or a handle previously returned by this library, not
/// yet freed.
#[no_mangle]
pub unsafe extern "C" fn magnet_dataset_free(ds: *mut MagnetDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Load a DMCK checkpoint.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer;
/// the returned handle must be released with `magnet_model_free`.
#[no_mangle]
pub unsafe extern "C" fn magnet_model_load(
    path: *const c_char,
    out: *mut *mut MagnetModelHandle,
) -> MagnetStatus {
    if out.is_null() {
        return set_error_msg("out pointer is null", MagnetStatus::MagnetNullArgument);
    }
    let Some(path) = cstr_arg(path) else {
        return set_error_msg("path is null or not UTF-8", MagnetStatus::MagnetNullArgument);
    };
    match checkpoint::load_model(Path::new(path)) {
        Ok(model) => {
            *out = Box::into_raw(Box::new(MagnetModelHandle(model)));
            MagnetStatus::MagnetOk
        }
        Err(e) => set_error(&e),
    }
}

/// Save a model as a DMCK checkpoint.
///
/// # Safety
/// `model` must be a live handle and `path` a valid string.
#[no_mangle]
pub unsafe extern "C" fn magnet_model_save(
    model: *const MagnetModelHandle,
    path: *const c_char,
) -> MagnetStatus {
    let Some(model) = model.as_ref() else {
        return set_error_msg("model handle is null", MagnetStatus::MagnetNullArgument);
    };
    let Some(path) = cstr_arg(path) else {
        return set_error_msg("path is null or not UTF-8", MagnetStatus::MagnetNullArgument);
    };
    match checkpoint::save_model(&model.0, Path::new(path)) {
        Ok(()) => MagnetStatus::MagnetOk,
        Err(e) => set_error(&e),
    }
}

/// Total scalar parameter count; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn magnet_model_param_count(model: *const MagnetModelHandle) -> u64 {
    model.as_ref().map_or(0, |m| m.0.param_count() as u64)
}

/// Release a model handle (null is ignored).
///
/// # Safety
/// `model` must be null or a handle previously returned by this library, not
/// yet freed.
#[no_mangle]
pub unsafe extern "C" fn magnet_model_free(model: *mut MagnetModelHandle) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Train a model on a labeled source and an unlabeled target dataset.
///
/// `config` is optional `key = value` text with the same keys as the CLI
/// config files (pass null for defaults). On success writes a new model
/// handle to `out`.
///
/// # Safety
/// `source` and `target` must be live dataset handles, `config` null or a
/// valid string, and `out` a valid pointer. The returned handle must be
/// released with `magnet_model_free`.
#[no_mangle]
pub unsafe extern "C" fn magnet_train(
    source: *const MagnetDataset,
    target: *const MagnetDataset,
    config: *const c_char,
    seed: u64,
    out: *mut *mut MagnetModelHandle,
) -> MagnetStatus {
    if out.is_null() {
        return set_error_msg("out pointer is null", MagnetStatus::MagnetNullArgument);
    }
    let (Some(source), Some(target)) = (source.as_ref(), target.as_ref()) else {
        return set_error_msg("dataset handle is null", MagnetStatus::MagnetNullArgument);
    };
    let config_text = if config.is_null() {
        ""
    } else {
        match cstr_arg(config) {
            Some(t) => t,
            None => {
                return set_error_msg("config is not UTF-8", MagnetStatus::MagnetInvalidArgument)
            }
        }
    };

    let result = (|| -> magnet_da::Result<MagnetModel> {
        let shape = source.0.images.shape().to_vec();
        let mut network = NetworkConfig::new(shape[1], shape[2], source.0.num_classes());
        network.transition_type = TransitionType::B;
        let mut cfg = TrainConfig::default();
        apply_overrides(&mut cfg, &mut network, &parse_config_text(config_text)?)?;
        cfg.seed = seed;
        let pair = data::DomainPair::new(source.0.clone(), target.0.clone())?;
        let mut model = MagnetModel::new(network, seed)?;
        train::train(&mut model, &pair, &cfg)?;
        Ok(model)
    })();
    match result {
        Ok(model) => {
            *out = Box::into_raw(Box::new(MagnetModelHandle(model)));
            MagnetStatus::MagnetOk
        }
        Err(e) => set_error(&e),
    }
}

/// Classification accuracy of a model on a labeled dataset.
///
/// # Safety
/// `model` and `ds` must be live handles; `out_accuracy` must be valid.
#[no_mangle]
pub unsafe extern "C" fn magnet_evaluate(
    model: *mut MagnetModelHandle,
    ds: *const MagnetDataset,
    out_accuracy: *mut f64,
) -> MagnetStatus {
    if out_accuracy.is_null() {
        return set_error_msg("out pointer is null", MagnetStatus::MagnetNullArgument);
    }
    let (Some(model), Some(ds)) = (model.as_mut(), ds.as_ref()) else {
        return set_error_msg("handle is null", MagnetStatus::MagnetNullArgument);
    };
    match train::evaluate(&mut model.0, &ds.0) {
        Ok(acc) => {
            *out_accuracy = acc;
            MagnetStatus::MagnetOk
        }
        Err(e) => set_error(&e),
    }
}

/// Biased Gaussian-kernel MMD between two row-major sample matrices.
///
/// # Safety
/// `zs` must point to `ns * d` doubles and `zt` to `nt * d`; `out` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn magnet_mmd_biased(
    zs: *const f64,
    ns: u64,
    zt: *const f64,
    nt: u64,
    d: u64,
    sigma: f64,
    out: *mut f64,
) -> MagnetStatus {
    if zs.is_null() || zt.is_null() || out.is_null() {
        return set_error_msg("null buffer", MagnetStatus::MagnetNullArgument);
    }
    let (ns, nt, d) = (ns as usize, nt as usize, d as usize);
    let result = (|| -> magnet_da::Result<f64> {
        let zs = Tensor::from_vec(
            vec![ns, d],
            std::slice::from_raw_parts(zs, ns * d).to_vec(),
        )?;
        let zt = Tensor::from_vec(
            vec![nt, d],
            std::slice::from_raw_parts(zt, nt * d).to_vec(),
        )?;
        losses::mmd_biased_reference(&zs, &zt, &[sigma], &[1.0])
    })();
    match result {
        Ok(v) => {
            *out = v;
            MagnetStatus::MagnetOk
        }
        Err(e) => set_error(&e),
    }
}
