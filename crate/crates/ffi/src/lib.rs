//! C ABI over the scn-gait feature extractor.
//!
//! Every fallible function returns an [`ScnStatus`]; on failure a message is
//! available from [`scn_last_error`] on the same thread. Panics are caught at
//! the boundary and reported as [`ScnStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use scn_gait::data::align::align_bits;
use scn_gait::model::{extract, ModelConfig, ScnParams};
use scn_gait::templates::{self, StaticFilter, TemplateKind};
use scn_gait::tensor::Tensor;
use scn_gait::train::load_checkpoint;
use scn_gait::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Checkpoint = 4,
    Io = 5,
    Dimension = 6,
    SequenceTooShort = 7,
    DegenerateFrame = 8,
    NonFinite = 9,
    Internal = 10,
    Panic = 11,
}

/// Template kinds accepted by [`scn_template`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScnTemplateKind {
    Diff = 0,
    MultiDiff = 1,
    StaticExclMean = 2,
    StaticExclMedian = 3,
}

impl From<ScnTemplateKind> for TemplateKind {
    fn from(k: ScnTemplateKind) -> Self {
        match k {
            ScnTemplateKind::Diff => TemplateKind::Diff,
            ScnTemplateKind::MultiDiff => TemplateKind::MultiDiff,
            ScnTemplateKind::StaticExclMean => TemplateKind::StaticExcl(StaticFilter::Mean),
            ScnTemplateKind::StaticExclMedian => TemplateKind::StaticExcl(StaticFilter::Median),
        }
    }
}

/// Opaque handle to a frozen model.
pub struct ScnModel {
    params: ScnParams,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior nuls replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(ScnStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Dimension { .. }
            | Error::Alignment(_)
            | Error::Window { .. }
            | Error::EmptyReduction { .. } => ScnStatus::Dimension,
            Error::SequenceTooShort { .. } => ScnStatus::SequenceTooShort,
            Error::DegenerateFrame => ScnStatus::DegenerateFrame,
            Error::NonFinite { .. } => ScnStatus::NonFinite,
            Error::Checkpoint(_) => ScnStatus::Checkpoint,
            Error::Io { .. } | Error::Image { .. } | Error::Ingestion { .. } => ScnStatus::Io,
            Error::Config(_) => ScnStatus::InvalidArgument,
            Error::BatchComposition(_) => ScnStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: ScnStatus, message: impl Into<String>) -> Failure {
    Failure(status, message.into())
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ScnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ScnStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {message}"));
            ScnStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(fail(ScnStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// Copies `src` into the caller's buffer of `len` values.
///
/// # Safety
/// `out` must be valid for `len` writes.
unsafe fn write_out(src: &[f64], out: *mut f64, len: usize) -> Result<(), Failure> {
    if len < src.len() {
        return Err(fail(
            ScnStatus::BufferTooSmall,
            format!("output buffer holds {len} values, {} needed", src.len()),
        ));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    Ok(())
}

fn boxed(params: ScnParams, out: *mut *mut ScnModel) {
    // SAFETY: callers check `out` for null before building the model.
    unsafe { *out = Box::into_raw(Box::new(ScnModel { params })) };
}

/// Loads a checkpoint written by `scn train`.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn scn_model_load(path: *const c_char, out: *mut *mut ScnModel) -> ScnStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(ScnStatus::InvalidArgument, "path is not valid UTF-8"))?;
        let params = load_checkpoint(Path::new(path))?.params;
        boxed(params, out);
        Ok(())
    })
}

/// Creates a model with the default configuration and freshly initialized
/// weights.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn scn_model_init_default(seed: u64, out: *mut *mut ScnModel) -> ScnStatus {
    guard(|| {
        non_null(out, "out")?;
        let params = ScnParams::init(&ModelConfig::default(), seed)?;
        boxed(params, out);
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn scn_model_free(model: *mut ScnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of values in one sequence feature, or 0 for a null model.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn scn_model_feature_len(model: *const ScnModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.config.feature_len())
}

/// Aligned frame size the model expects.
///
/// # Safety
/// `model` must be a live handle; `height` and `width` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn scn_model_input_size(
    model: *const ScnModel,
    height: *mut usize,
    width: *mut usize,
) -> ScnStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(height, "height")?;
        non_null(width, "width")?;
        let cfg = &(*model).params.config;
        *height = cfg.height;
        *width = cfg.width;
        Ok(())
    })
}

/// Extracts the feature of `n_frames` aligned frames stored row-major as
/// `[n_frames, height, width]` with the model's input size.
///
/// # Safety
/// `frames` must hold `n_frames * height * width` values and `out` `out_len`.
#[no_mangle]
pub unsafe extern "C" fn scn_model_extract(
    model: *const ScnModel,
    frames: *const f64,
    n_frames: usize,
    out: *mut f64,
    out_len: usize,
) -> ScnStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(frames, "frames")?;
        non_null(out, "out")?;
        let params = &(*model).params;
        let (h, w) = (params.config.height, params.config.width);
        let data = std::slice::from_raw_parts(frames, n_frames * h * w).to_vec();
        let input = Tensor::new(vec![n_frames, h, w], data)?;
        let feature = extract(params, &input)?;
        write_out(feature.flat(), out, out_len)
    })
}

/// Crops, scales and centers an 8-bit grayscale silhouette (row-major,
/// `height * width` bytes, foreground above 127) into `out_height * out_width`
/// values in {0, 1}.
///
/// # Safety
/// `pixels` must hold `height * width` bytes and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn scn_align_frame(
    pixels: *const u8,
    height: usize,
    width: usize,
    out_height: usize,
    out_width: usize,
    out: *mut f64,
    out_len: usize,
) -> ScnStatus {
    guard(|| {
        non_null(pixels, "pixels")?;
        non_null(out, "out")?;
        if height == 0 || width == 0 || out_height == 0 || out_width == 0 {
            return Err(fail(
                ScnStatus::InvalidArgument,
                "image sizes must be positive",
            ));
        }
        let data = std::slice::from_raw_parts(pixels, height * width).to_vec();
        let img =
            image::GrayImage::from_raw(width as u32, height as u32, data).ok_or_else(|| {
                fail(
                    ScnStatus::InvalidArgument,
                    "pixel buffer does not match the image size",
                )
            })?;
        let bits = align_bits(&img, out_height, out_width)?;
        let values: Vec<f64> = bits.into_iter().map(f64::from).collect();
        write_out(&values, out, out_len)
    })
}

/// Motion template of a `[n, channels, height, width]` feature sequence.
/// Writes `[m, channels, height, width]` values and stores `m` in
/// `out_frames`.
///
/// # Safety
/// `features` must hold `n * channels * height * width` values, `out`
/// `out_len`, and `out_frames` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn scn_template(
    kind: ScnTemplateKind,
    features: *const f64,
    n: usize,
    channels: usize,
    height: usize,
    width: usize,
    out: *mut f64,
    out_len: usize,
    out_frames: *mut usize,
) -> ScnStatus {
    guard(|| {
        non_null(features, "features")?;
        non_null(out, "out")?;
        non_null(out_frames, "out_frames")?;
        let len = n * channels * height * width;
        let data = std::slice::from_raw_parts(features, len).to_vec();
        let input = Tensor::new(vec![n, channels, height, width], data)?;
        let t = templates::evaluate(kind.into(), &input)?;
        write_out(t.maps.data(), out, out_len)?;
        *out_frames = t.maps.shape()[0];
        Ok(())
    })
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn scn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}
