//! C ABI over the registration engine.
//!
//! Every object crosses the boundary as an opaque pointer owned by the
//! caller and released with the matching `_free` function. Functions return
//! a [`GlideStatus`]; on failure the message is available from
//! [`glide_last_error`] on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use glide::dimred::DimredMethod;
use glide::grid::{warp_volume, Interpolation};
use glide::instance_opt::{Mode, RegConfig};
use glide::mind::{extract_mind, MindConfig};
use glide::pipeline::register_pair;
use glide::{io, DisplacementField, Error, FeatureVolume, Volume};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlideStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Io = 4,
    Format = 5,
    NonFinite = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlideMode {
    Glide = 0,
    GlobalOnly = 1,
    LocalOnly = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlideDimred {
    Pca = 0,
    Sdr = 1,
    Ddr = 2,
}

/// Scalar intensity volume.
pub struct GlideVolume(Volume);

/// Multi-channel feature volume.
pub struct GlideFeatures(FeatureVolume);

/// Displacement field in voxels.
pub struct GlideField(DisplacementField);

/// Registration configuration.
pub struct GlideConfig(RegConfig);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> GlideStatus {
    match e {
        Error::InvalidArgument(_) | Error::InvalidCoordinate | Error::MindTooSmall | Error::TooLarge(_) => {
            GlideStatus::InvalidArgument
        }
        Error::DimensionMismatch(_) => GlideStatus::DimensionMismatch,
        Error::Io(_) => GlideStatus::Io,
        Error::Format(_) | Error::Json(_) | Error::Csv(_) => GlideStatus::Format,
        Error::NonFiniteLoss { .. } | Error::NonFinite(_) => GlideStatus::NonFinite,
    }
}

struct Fail(GlideStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(GlideStatus::NullPointer, format!("{what} is null"))
}

/// Run `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> GlideStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GlideStatus::Ok,
        Ok(Err(Fail(s, m))) => {
            set_error(m);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            GlideStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn as_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<String, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Fail(GlideStatus::InvalidArgument, "path is not valid UTF-8".into()))
}

unsafe fn triple<T: Copy>(p: *const T, what: &str) -> Result<[T; 3], Fail> {
    let s = std::slice::from_raw_parts(as_ref(p, what)?, 3);
    Ok([s[0], s[1], s[2]])
}

unsafe fn copy_in(data: *const f64, len: usize) -> Result<Vec<f64>, Fail> {
    if len == 0 {
        return Ok(vec![]);
    }
    Ok(std::slice::from_raw_parts(as_ref(data, "data")?, len).to_vec())
}

unsafe fn copy_out(src: &[f64], out: *mut f64, len: usize) -> Result<(), Fail> {
    if len != src.len() {
        return Err(Fail(
            GlideStatus::DimensionMismatch,
            format!("buffer holds {len} values, need {}", src.len()),
        ));
    }
    if len > 0 {
        std::slice::from_raw_parts_mut(as_mut(out, "out")?, len).copy_from_slice(src);
    }
    Ok(())
}

unsafe fn put<T>(out: *mut *mut T, v: T) -> Result<(), Fail> {
    let slot = as_mut(out, "out")?;
    *slot = Box::into_raw(Box::new(v));
    Ok(())
}

unsafe fn dims_out(dims: [usize; 3], out: *mut usize) -> Result<(), Fail> {
    std::slice::from_raw_parts_mut(as_mut(out, "out_dims")?, 3).copy_from_slice(&dims);
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn glide_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn glide_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

// ---- volumes ----

/// Create a volume from `len = dims[0]*dims[1]*dims[2]` values, x fastest.
///
/// # Safety
/// `dims` and `spacing` point to 3 values, `data` to `len` values.
#[no_mangle]
pub unsafe extern "C" fn glide_volume_new(
    dims: *const usize,
    spacing: *const f64,
    data: *const f64,
    len: usize,
    out: *mut *mut GlideVolume,
) -> GlideStatus {
    guard(|| {
        let v = Volume::new(triple(dims, "dims")?, triple(spacing, "spacing")?, copy_in(data, len)?)?;
        put(out, GlideVolume(v))
    })
}

/// # Safety
/// `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn glide_volume_read(path: *const c_char, out: *mut *mut GlideVolume) -> GlideStatus {
    guard(|| {
        let (v, _) = io::read_volume(path_arg(path)?)?;
        put(out, GlideVolume(v))
    })
}

/// # Safety
/// `v` is a live volume handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn glide_volume_write(v: *const GlideVolume, path: *const c_char) -> GlideStatus {
    guard(|| Ok(io::write_volume(path_arg(path)?, &as_ref(v, "volume")?.0, io::Kind::Intensity)?))
}

/// # Safety
/// `out_dims` points to space for 3 values.
#[no_mangle]
pub unsafe extern "C" fn glide_volume_dims(v: *const GlideVolume, out_dims: *mut usize) -> GlideStatus {
    guard(|| dims_out(as_ref(v, "volume")?.0.dims(), out_dims))
}

/// Copy the voxel values into `out`, which must hold exactly `len` values.
///
/// # Safety
/// `out` points to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn glide_volume_copy_data(v: *const GlideVolume, out: *mut f64, len: usize) -> GlideStatus {
    guard(|| copy_out(as_ref(v, "volume")?.0.data(), out, len))
}

/// # Safety
/// `v` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn glide_volume_free(v: *mut GlideVolume) {
    if !v.is_null() {
        drop(Box::from_raw(v));
    }
}

// ---- features ----

/// Create a feature volume with channels interleaved per voxel.
///
/// # Safety
/// `dims` and `spacing` point to 3 values, `data` to `len` values.
#[no_mangle]
pub unsafe extern "C" fn glide_features_new(
    dims: *const usize,
    channels: usize,
    spacing: *const f64,
    data: *const f64,
    len: usize,
    out: *mut *mut GlideFeatures,
) -> GlideStatus {
    guard(|| {
        let f = FeatureVolume::new(triple(dims, "dims")?, channels, triple(spacing, "spacing")?, copy_in(data, len)?)?;
        put(out, GlideFeatures(f))
    })
}

/// # Safety
/// `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn glide_features_read(path: *const c_char, out: *mut *mut GlideFeatures) -> GlideStatus {
    guard(|| put(out, GlideFeatures(io::read_features(path_arg(path)?)?)))
}

/// # Safety
/// `f` is a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn glide_features_write(f: *const GlideFeatures, path: *const c_char) -> GlideStatus {
    guard(|| Ok(io::write_features(path_arg(path)?, &as_ref(f, "features")?.0)?))
}

/// # Safety
/// `out_dims` points to space for 3 values and `out_channels` to one.
#[no_mangle]
pub unsafe extern "C" fn glide_features_shape(
    f: *const GlideFeatures,
    out_dims: *mut usize,
    out_channels: *mut usize,
) -> GlideStatus {
    guard(|| {
        let f = &as_ref(f, "features")?.0;
        dims_out(f.dims(), out_dims)?;
        *as_mut(out_channels, "out_channels")? = f.channels();
        Ok(())
    })
}

/// # Safety
/// `out` points to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn glide_features_copy_data(f: *const GlideFeatures, out: *mut f64, len: usize) -> GlideStatus {
    guard(|| copy_out(as_ref(f, "features")?.0.data(), out, len))
}

/// # Safety
/// `f` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn glide_features_free(f: *mut GlideFeatures) {
    if !f.is_null() {
        drop(Box::from_raw(f));
    }
}

/// MIND descriptors with default settings.
///
/// # Safety
/// `v` is a live volume handle.
#[no_mangle]
pub unsafe extern "C" fn glide_extract_mind(v: *const GlideVolume, out: *mut *mut GlideFeatures) -> GlideStatus {
    guard(|| {
        let f = extract_mind(&as_ref(v, "volume")?.0, &MindConfig::default())?;
        put(out, GlideFeatures(f))
    })
}

// ---- configuration ----

/// # Safety
/// `out` is null or points to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn glide_config_default(out: *mut *mut GlideConfig) -> GlideStatus {
    guard(|| put(out, GlideConfig(RegConfig::default())))
}

/// Parse a JSON object; missing keys keep their defaults.
///
/// # Safety
/// `json` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn glide_config_from_json(json: *const c_char, out: *mut *mut GlideConfig) -> GlideStatus {
    guard(|| {
        let text = path_arg(json)?;
        let cfg: RegConfig = serde_json::from_str(&text).map_err(Error::from)?;
        cfg.validate()?;
        put(out, GlideConfig(cfg))
    })
}

/// # Safety
/// `cfg` is a live handle.
#[no_mangle]
pub unsafe extern "C" fn glide_config_set_iterations(cfg: *mut GlideConfig, iters: usize) -> GlideStatus {
    guard(|| {
        as_mut(cfg, "config")?.0.iters = iters;
        Ok(())
    })
}

/// # Safety
/// `cfg` is a live handle.
#[no_mangle]
pub unsafe extern "C" fn glide_config_set_seed(cfg: *mut GlideConfig, seed: u64) -> GlideStatus {
    guard(|| {
        as_mut(cfg, "config")?.0.dimred.seed = seed;
        Ok(())
    })
}

/// # Safety
/// `cfg` is a live handle.
#[no_mangle]
pub unsafe extern "C" fn glide_config_set_mode(cfg: *mut GlideConfig, mode: GlideMode) -> GlideStatus {
    guard(|| {
        as_mut(cfg, "config")?.0.mode = match mode {
            GlideMode::Glide => Mode::Glide,
            GlideMode::GlobalOnly => Mode::GlobalOnly,
            GlideMode::LocalOnly => Mode::LocalOnly,
        };
        Ok(())
    })
}

/// # Safety
/// `cfg` is a live handle.
#[no_mangle]
pub unsafe extern "C" fn glide_config_set_dimred(cfg: *mut GlideConfig, method: GlideDimred) -> GlideStatus {
    guard(|| {
        as_mut(cfg, "config")?.0.dimred.method = match method {
            GlideDimred::Pca => DimredMethod::Pca,
            GlideDimred::Sdr => DimredMethod::Sdr,
            GlideDimred::Ddr => DimredMethod::Ddr,
        };
        Ok(())
    })
}

/// # Safety
/// `cfg` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn glide_config_free(cfg: *mut GlideConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

// ---- registration and fields ----

/// Register `moving` onto `fixed`. The global features may both be null
/// when the mode is local-only.
///
/// # Safety
/// Non-null pointers are live handles.
#[no_mangle]
pub unsafe extern "C" fn glide_register(
    fixed: *const GlideVolume,
    moving: *const GlideVolume,
    global_fixed: *const GlideFeatures,
    global_moving: *const GlideFeatures,
    cfg: *const GlideConfig,
    out: *mut *mut GlideField,
) -> GlideStatus {
    guard(|| {
        let r = register_pair(
            &as_ref(fixed, "fixed")?.0,
            &as_ref(moving, "moving")?.0,
            global_fixed.as_ref().map(|f| &f.0),
            global_moving.as_ref().map(|f| &f.0),
            &as_ref(cfg, "config")?.0,
        )?;
        put(out, GlideField(r.u))
    })
}

/// # Safety
/// `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn glide_field_read(path: *const c_char, out: *mut *mut GlideField) -> GlideStatus {
    guard(|| put(out, GlideField(io::read_field(path_arg(path)?)?)))
}

/// # Safety
/// `u` is a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn glide_field_write(u: *const GlideField, path: *const c_char) -> GlideStatus {
    guard(|| Ok(io::write_field(path_arg(path)?, &as_ref(u, "field")?.0)?))
}

/// # Safety
/// `out_dims` points to space for 3 values.
#[no_mangle]
pub unsafe extern "C" fn glide_field_dims(u: *const GlideField, out_dims: *mut usize) -> GlideStatus {
    guard(|| dims_out(as_ref(u, "field")?.0.dims(), out_dims))
}

/// Copy the displacement (3 interleaved components per voxel).
///
/// # Safety
/// `out` points to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn glide_field_copy_data(u: *const GlideField, out: *mut f64, len: usize) -> GlideStatus {
    guard(|| copy_out(as_ref(u, "field")?.0.data(), out, len))
}

/// Trilinearly warp `moving` by `u`.
///
/// # Safety
/// `moving` and `u` are live handles.
#[no_mangle]
pub unsafe extern "C" fn glide_warp(
    moving: *const GlideVolume,
    u: *const GlideField,
    out: *mut *mut GlideVolume,
) -> GlideStatus {
    guard(|| {
        let w = warp_volume(&as_ref(moving, "moving")?.0, &as_ref(u, "field")?.0, Interpolation::Trilinear)?;
        put(out, GlideVolume(w))
    })
}

/// # Safety
/// `u` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn glide_field_free(u: *mut GlideField) {
    if !u.is_null() {
        drop(Box::from_raw(u));
    }
}
