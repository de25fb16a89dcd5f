//! C ABI over the forknet library.
//!
//! Models and volumes are opaque heap handles released with their `_free`
//! function. Every fallible call returns a [`ForknetStatus`]; the message
//! of the most recent failure on the calling thread is available through
//! [`forknet_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use forknet::eval::{complete_depth, infer, Completion};
use forknet::model::{load_checkpoint, ForkNet};
use forknet::voxel::{default_truncation, read_volume, write_volume, GridSpec, SdfVolume, Volume};
use forknet::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForknetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Config = 6,
    Checkpoint = 7,
    NonFinite = 8,
    Contract = 9,
    Data = 10,
    State = 11,
    Panic = 12,
}

/// A loaded network.
pub struct ForknetModel {
    net: ForkNet<f32>,
}

/// A channel-major voxel volume.
pub struct ForknetVolume {
    volume: Volume,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure(ForknetStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidShape(_) | Error::Shape(_) => ForknetStatus::Shape,
            Error::Contract(_) => ForknetStatus::Contract,
            Error::Data(_) | Error::Sample { .. } => ForknetStatus::Data,
            Error::Config(_) => ForknetStatus::Config,
            Error::State(_) => ForknetStatus::State,
            Error::Format { .. } => ForknetStatus::Format,
            Error::Checkpoint { .. } => ForknetStatus::Checkpoint,
            Error::NonFinite { .. } => ForknetStatus::NonFinite,
            Error::Io { .. } => ForknetStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(ForknetStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(message: String) -> Failure {
    Failure(ForknetStatus::InvalidArgument, message)
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ForknetStatus {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|payload| {
        let msg = payload
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| payload.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "panic".into());
        Err(Failure(ForknetStatus::Panic, msg))
    });
    match outcome {
        Ok(()) => {
            LAST_ERROR.with(|e| e.borrow_mut().clear());
            ForknetStatus::Ok
        }
        Err(Failure(status, msg)) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = msg);
            status
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("`{what}` is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn model_ref<'a>(m: *const ForknetModel) -> Result<&'a ForknetModel, Failure> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn volume_ref<'a>(v: *const ForknetVolume) -> Result<&'a ForknetVolume, Failure> {
    v.as_ref().ok_or_else(|| null("volume"))
}

fn into_handle(volume: Volume) -> *mut ForknetVolume {
    Box::into_raw(Box::new(ForknetVolume { volume }))
}

unsafe fn emit(c: Completion, sdf: *mut *mut ForknetVolume, geometry: *mut *mut ForknetVolume, semantic: *mut *mut ForknetVolume) {
    *sdf = into_handle(c.x_hat);
    *geometry = into_handle(c.g);
    *semantic = into_handle(c.s);
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn forknet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (truncated and
/// NUL-terminated when `len > 0`) and returns its full length in bytes.
///
/// # Safety
/// `buf` must be null or valid for `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn forknet_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a checkpoint into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn forknet_model_load(path: *const c_char, out: *mut *mut ForknetModel) -> ForknetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path, "path")?;
        let net = load_checkpoint(&path)?;
        *out = Box::into_raw(Box::new(ForknetModel { net }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`forknet_model_load`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn forknet_model_free(model: *mut ForknetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the model grid extents into `dims[0..3]` and the number of
/// non-empty classes into `*classes`.
///
/// # Safety
/// `dims` must be valid for 3 writes and `classes` for one.
#[no_mangle]
pub unsafe extern "C" fn forknet_model_layout(model: *const ForknetModel, dims: *mut usize, classes: *mut usize) -> ForknetStatus {
    guard(|| {
        let m = model_ref(model)?;
        if dims.is_null() || classes.is_null() {
            return Err(null("dims/classes"));
        }
        let cfg = m.net.config();
        ptr::copy_nonoverlapping(cfg.grid.as_ptr(), dims, 3);
        *classes = cfg.classes;
        Ok(())
    })
}

/// Completes a stored depth image (PGM plus sidecar) on the model grid
/// with the given voxel size, returning SDF (meters), occupancy and
/// semantic volumes.
///
/// # Safety
/// Pointers must be valid; `depth_path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn forknet_model_complete_depth(
    model: *const ForknetModel,
    depth_path: *const c_char,
    voxel_size: f32,
    sdf: *mut *mut ForknetVolume,
    geometry: *mut *mut ForknetVolume,
    semantic: *mut *mut ForknetVolume,
) -> ForknetStatus {
    guard(|| {
        let m = model_ref(model)?;
        if sdf.is_null() || geometry.is_null() || semantic.is_null() {
            return Err(null("output"));
        }
        let path = path_arg(depth_path, "depth_path")?;
        if !(voxel_size > 0.0) {
            return Err(invalid(format!("voxel size {voxel_size}")));
        }
        emit(complete_depth(&path, &m.net, voxel_size)?, sdf, geometry, semantic);
        Ok(())
    })
}

/// Completes a precomputed truncated SDF given in meters, `len` values in
/// grid order. The truncation is four voxels.
///
/// # Safety
/// `values` must be valid for `len` reads; outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn forknet_model_complete_sdf(
    model: *const ForknetModel,
    values: *const f32,
    len: usize,
    voxel_size: f32,
    sdf: *mut *mut ForknetVolume,
    geometry: *mut *mut ForknetVolume,
    semantic: *mut *mut ForknetVolume,
) -> ForknetStatus {
    guard(|| {
        let m = model_ref(model)?;
        if values.is_null() {
            return Err(null("values"));
        }
        if sdf.is_null() || geometry.is_null() || semantic.is_null() {
            return Err(null("output"));
        }
        if !(voxel_size > 0.0) {
            return Err(invalid(format!("voxel size {voxel_size}")));
        }
        let grid = GridSpec::new(m.net.config().grid, voxel_size, [0.0; 3]);
        let data = std::slice::from_raw_parts(values, len).to_vec();
        let x = SdfVolume::new(Volume::new(grid, 1, data)?, default_truncation(voxel_size))?;
        emit(infer(&m.net, &x)?, sdf, geometry, semantic);
        Ok(())
    })
}

/// Reads an FVOX file into `*out`.
///
/// # Safety
/// `path` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn forknet_volume_read(path: *const c_char, out: *mut *mut ForknetVolume) -> ForknetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path, "path")?;
        *out = into_handle(read_volume(&path)?);
        Ok(())
    })
}

/// Writes a volume as FVOX.
///
/// # Safety
/// `volume` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn forknet_volume_write(volume: *const ForknetVolume, path: *const c_char) -> ForknetStatus {
    guard(|| {
        let v = volume_ref(volume)?;
        let path = path_arg(path, "path")?;
        write_volume(&path, &v.volume)?;
        Ok(())
    })
}

/// Releases a volume; null is ignored.
///
/// # Safety
/// `volume` must be a handle returned by this library and not used again.
#[no_mangle]
pub unsafe extern "C" fn forknet_volume_free(volume: *mut ForknetVolume) {
    if !volume.is_null() {
        drop(Box::from_raw(volume));
    }
}

/// Writes `[channels, L, H, W]` into `shape[0..4]`.
///
/// # Safety
/// `shape` must be valid for 4 writes.
#[no_mangle]
pub unsafe extern "C" fn forknet_volume_shape(volume: *const ForknetVolume, shape: *mut usize) -> ForknetStatus {
    guard(|| {
        let v = volume_ref(volume)?;
        if shape.is_null() {
            return Err(null("shape"));
        }
        ptr::copy_nonoverlapping(v.volume.shape().as_ptr(), shape, 4);
        Ok(())
    })
}

/// Copies all values (channel-major) into `out`; `len` must equal the
/// element count.
///
/// # Safety
/// `out` must be valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn forknet_volume_copy(volume: *const ForknetVolume, out: *mut f32, len: usize) -> ForknetStatus {
    guard(|| {
        let v = volume_ref(volume)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let data = &v.volume.data;
        if len != data.len() {
            return Err(invalid(format!("buffer of {len} for {} values", data.len())));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), out, len);
        Ok(())
    })
}

/// Writes the per-voxel argmax class (ties to the lowest) into `out`;
/// `len` must equal the voxel count.
///
/// # Safety
/// `out` must be valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn forknet_volume_labels(volume: *const ForknetVolume, out: *mut u8, len: usize) -> ForknetStatus {
    guard(|| {
        let v = volume_ref(volume)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let n = v.volume.grid.len();
        if len != n {
            return Err(invalid(format!("buffer of {len} for {n} voxels")));
        }
        if v.volume.channels > 256 {
            return Err(invalid(format!("{} channels exceed the label range", v.volume.channels)));
        }
        let labels = v.volume.argmax();
        ptr::copy_nonoverlapping(labels.as_ptr(), out, n);
        Ok(())
    })
}
