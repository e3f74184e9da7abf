//! C ABI over the `glottisnet` library.
//!
//! Every fallible function returns a [`GnStatus`]; on failure a message is
//! kept per thread and can be read with [`gn_last_error_message`]. Models are
//! opaque handles released with [`gn_model_free`]; strings returned by the
//! library are released with [`gn_string_free`]. Panics never cross the
//! boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use glottisnet::assign::{assign, cost_from_iou};
use glottisnet::gradcheck::{self, GradCheckConfig};
use glottisnet::io::{self, AssignReport, InstanceFile};
use glottisnet::metrics::evaluate;
use glottisnet::weights::WeightStore;
use glottisnet::{iou, BBox, Error, InitOptions, Model, ModelConfig};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Validation = 3,
    Dimension = 4,
    Index = 5,
    Contract = 6,
    MissingTensor = 7,
    Format = 8,
    Corrupt = 9,
    Parse = 10,
    Image = 11,
    Io = 12,
    BufferTooSmall = 13,
    Panic = 14,
}

impl From<&Error> for GnStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Dimension { .. } => GnStatus::Dimension,
            Error::Index { .. } => GnStatus::Index,
            Error::InvalidArgument(_) => GnStatus::InvalidArgument,
            Error::Validation(_) => GnStatus::Validation,
            Error::Contract(_) => GnStatus::Contract,
            Error::Format(_) => GnStatus::Format,
            Error::Corrupt(_) => GnStatus::Corrupt,
            Error::MissingTensor(_) => GnStatus::MissingTensor,
            Error::Parse { .. } => GnStatus::Parse,
            Error::Image(_) => GnStatus::Image,
            Error::Io(_) => GnStatus::Io,
        }
    }
}

/// Opaque loaded model.
pub struct GnModel {
    model: Model,
}

/// Box corners in pixels.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GnBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GnDetection {
    pub bbox: GnBox,
    pub score: f64,
    pub class_id: u32,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NULs replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(GnStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(GnStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(GnStatus::NullPointer, format!("`{what}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GnStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GnStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            GnStatus::Panic
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(GnStatus::InvalidArgument, format!("`{what}` is not UTF-8: {e}")))
}

unsafe fn optional_config(config_json: *const c_char) -> Result<Option<ModelConfig>, Failure> {
    if config_json.is_null() {
        return Ok(None);
    }
    Ok(Some(ModelConfig::from_json(read_str(config_json, "config_json")?, "config_json")?))
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure(GnStatus::InvalidArgument, "output contains NUL".into()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `cap > 0`) and returns its full length in bytes
/// without the terminator; 0 when there is none.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn gn_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else {
            if !buf.is_null() && cap > 0 {
                *buf = 0;
            }
            return 0;
        };
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Loads a weight file. `config_json` may be null to use the config embedded
/// in the file (or the default config).
///
/// # Safety
/// `path` and a non-null `config_json` must be NUL-terminated strings; `out`
/// must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gn_model_load(path: *const c_char, config_json: *const c_char, out: *mut *mut GnModel) -> GnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = read_str(path, "path")?;
        let config = optional_config(config_json)?;
        let store = WeightStore::load(Path::new(path))?;
        let model = Model::load_store(&store, config.as_ref())?;
        *out = Box::into_raw(Box::new(GnModel { model }));
        Ok(())
    })
}

/// Seeded random model (offset networks zero), mainly for tests and benchmarks.
///
/// # Safety
/// A non-null `config_json` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gn_model_new_random(config_json: *const c_char, seed: u64, out: *mut *mut GnModel) -> GnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let config = optional_config(config_json)?.unwrap_or_default();
        let model = Model::random(&config, &InitOptions::seeded(seed))?;
        *out = Box::into_raw(Box::new(GnModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gn_model_free(model: *mut GnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Square network input side in pixels; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gn_model_input_size(model: *const GnModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.input_size)
}

/// Size in bytes the model's weight file would have.
///
/// # Safety
/// `model` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn gn_model_serialized_size(model: *const GnModel, out: *mut usize) -> GnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.model.serialized_size();
        Ok(())
    })
}

/// Detects on an interleaved 8-bit RGB image. Writes up to `capacity`
/// detections (highest score first) and the total count to `out_count`;
/// returns `GN_STATUS_BUFFER_TOO_SMALL` when `capacity` is smaller than it.
///
/// # Safety
/// `rgb` must hold `width * height * 3` bytes, `dets` must hold `capacity`
/// elements (may be null when `capacity == 0`), `out_count` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gn_model_detect_rgb8(
    model: *const GnModel,
    rgb: *const u8,
    width: usize,
    height: usize,
    dets: *mut GnDetection,
    capacity: usize,
    out_count: *mut usize,
) -> GnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out_count = out_count.as_mut().ok_or_else(|| null("out_count"))?;
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        if capacity > 0 && dets.is_null() {
            return Err(null("dets"));
        }
        let len = width
            .checked_mul(height)
            .and_then(|v| v.checked_mul(3))
            .ok_or_else(|| Failure(GnStatus::InvalidArgument, "image size overflows".into()))?;
        let pixels = std::slice::from_raw_parts(rgb, len);
        let found = m.model.detect(&io::image_from_rgb8(width, height, pixels)?)?;
        *out_count = found.len();
        for (i, d) in found.iter().take(capacity).enumerate() {
            *dets.add(i) = GnDetection {
                bbox: GnBox { x1: d.bbox.x1, y1: d.bbox.y1, x2: d.bbox.x2, y2: d.bbox.y2 },
                score: d.score,
                class_id: d.class_id as u32,
            };
        }
        if found.len() > capacity {
            return Err(Failure(
                GnStatus::BufferTooSmall,
                format!("{} detections, buffer holds {capacity}", found.len()),
            ));
        }
        Ok(())
    })
}

/// Intersection over union of two boxes.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn gn_iou(a: *const GnBox, b: *const GnBox, out: *mut f64) -> GnStatus {
    guard(|| {
        let a = a.as_ref().ok_or_else(|| null("a"))?;
        let b = b.as_ref().ok_or_else(|| null("b"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = iou(&BBox::new(a.x1, a.y1, a.x2, a.y2), &BBox::new(b.x1, b.y1, b.x2, b.y2));
        Ok(())
    })
}

/// Matching cost `-lambda * log_softmax(logits)[class_id] + (1 - lambda) * (1 - iou)`.
///
/// # Safety
/// `logits` must hold `num_logits` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gn_assign_cost(
    logits: *const f64,
    num_logits: usize,
    class_id: usize,
    iou: f64,
    lambda: f64,
    out: *mut f64,
) -> GnStatus {
    guard(|| {
        if logits.is_null() && num_logits > 0 {
            return Err(null("logits"));
        }
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let logits = if num_logits == 0 { &[][..] } else { std::slice::from_raw_parts(logits, num_logits) };
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Failure(GnStatus::Validation, format!("lambda must lie in [0, 1], got {lambda}")));
        }
        *out = cost_from_iou(logits, class_id, iou, lambda)?;
        Ok(())
    })
}

/// Runs label assignment on an instance document (the `assign` command's
/// input format) and returns the JSON report in `*out`, to be released with
/// [`gn_string_free`].
///
/// # Safety
/// `instances_json` must be a NUL-terminated string and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn gn_assign_json(instances_json: *const c_char, out: *mut *mut c_char) -> GnStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let inst: InstanceFile = io::parse_json(read_str(instances_json, "instances_json")?, "instances_json")?;
        let cfg = inst.config.apply(Default::default());
        let result = assign(&inst.predictions, &inst.ground_truths, &cfg)?;
        *out = into_c_string(io::to_json_string(&AssignReport::new(cfg, &inst.ground_truths, &result)))?;
        Ok(())
    })
}

/// Evaluates detections (COCO results array or a `detect` output document)
/// against a COCO-style annotation document; returns the JSON report.
///
/// # Safety
/// Both inputs must be NUL-terminated strings and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn gn_eval_json(gt_json: *const c_char, dets_json: *const c_char, out: *mut *mut c_char) -> GnStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let gt = io::parse_json(read_str(gt_json, "gt_json")?, "gt_json")?;
        let dets = io::parse_detections(read_str(dets_json, "dets_json")?, "dets_json")?;
        let report = evaluate(&io::eval_set(&gt, &dets)?)?;
        *out = into_c_string(io::to_json_string(&report))?;
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gn_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Finite-difference check of the deformable convolution gradients. Writes
/// the max relative error for input, weights and offsets to
/// `out_max_rel_errors[0..3]` and whether all were within tolerance.
///
/// # Safety
/// `out_max_rel_errors` must hold 3 values and `out_passed` be valid.
#[no_mangle]
pub unsafe extern "C" fn gn_gradcheck(
    seed: u64,
    eps: f64,
    trials: usize,
    out_max_rel_errors: *mut f64,
    out_passed: *mut bool,
) -> GnStatus {
    guard(|| {
        if out_max_rel_errors.is_null() {
            return Err(null("out_max_rel_errors"));
        }
        let passed = out_passed.as_mut().ok_or_else(|| null("out_passed"))?;
        let report = gradcheck::run(&GradCheckConfig { seed, eps, trials })?;
        for (i, g) in report.groups.iter().enumerate() {
            *out_max_rel_errors.add(i) = g.max_rel_error;
        }
        *passed = report.passed();
        Ok(())
    })
}
