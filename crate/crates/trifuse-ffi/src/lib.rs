//! C ABI for the trifuse library.
//!
//! Handles are opaque pointers owned by Rust; every fallible call returns a
//! [`TrifuseStatus`] and records a message retrievable (per thread) via
//! `trifuse_last_error`. Configs cross the boundary as JSON strings matching
//! the library's `ModelConfig` / `TrainConfig` field names; reports come back
//! as JSON strings released with `trifuse_string_free`.

use serde::Deserialize;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::PathBuf;
use std::str::FromStr;
use trifuse::data::{Dataset, LabelKind, LinearGen, MultimodalSample, ParityGen, SplitSizes};
use trifuse::error::Error;
use trifuse::model::{Architecture, ModelBundle, ModelConfig};
use trifuse::tensor::Tensor;
use trifuse::train::{evaluate, train, TrainConfig};

/// Status code returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrifuseStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    ShapeMismatch = 4,
    NumericError = 5,
    IoError = 6,
    FormatError = 7,
    InternalError = 8,
}

/// Opaque model handle.
pub struct TrifuseModel {
    inner: ModelBundle,
}

/// Opaque dataset handle.
pub struct TrifuseDataset {
    inner: Dataset,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(message: String) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(e: &Error) -> TrifuseStatus {
    match e {
        Error::ShapeMismatch(_)
        | Error::AxisOutOfRange { .. }
        | Error::EvenKernelWithSamePadding(_)
        | Error::EmptySequence
        | Error::EmptySource
        | Error::NonVectorInput(_)
        | Error::OddDimension(_)
        | Error::DimMismatch(_)
        | Error::LengthMismatch { .. } => TrifuseStatus::ShapeMismatch,
        Error::NonFinite(_) | Error::NonFiniteLoss(_) => TrifuseStatus::NumericError,
        Error::Io(_) => TrifuseStatus::IoError,
        Error::VersionMismatch(_)
        | Error::ShapeCorruption(_)
        | Error::SchemaViolation(_)
        | Error::DimMismatchAgainstManifest(_)
        | Error::Json(_) => TrifuseStatus::FormatError,
        Error::InvalidConfig(_) | Error::InvalidRange(_) | Error::Usage(_) => {
            TrifuseStatus::InvalidArgument
        }
        Error::NonScalarLoss(_) | Error::DetachedTensor | Error::MissingGradient(_) => {
            TrifuseStatus::InternalError
        }
    }
}

fn fail(e: Error) -> TrifuseStatus {
    let status = status_of(&e);
    set_error(e.to_string());
    status
}

/// # Safety
/// `ptr` must be null or a valid NUL-terminated string.
unsafe fn cstr<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, TrifuseStatus> {
    if ptr.is_null() {
        set_error(format!("{what} is null"));
        return Err(TrifuseStatus::NullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        TrifuseStatus::InvalidUtf8
    })
}

fn parse_json<T: serde::de::DeserializeOwned>(s: &str, what: &str) -> Result<T, TrifuseStatus> {
    serde_json::from_str(s).map_err(|e| {
        set_error(format!("{what}: {e}"));
        TrifuseStatus::FormatError
    })
}

macro_rules! try_ffi {
    ($expr:expr) => {
        match $expr {
            Ok(v) => v,
            Err(status) => return status,
        }
    };
}

/// Library version string; static storage, do not free.
#[no_mangle]
pub extern "C" fn trifuse_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Message of the most recent error on this thread; valid until the next
/// failing call on the same thread. Do not free.
#[no_mangle]
pub extern "C" fn trifuse_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Build a model.
///
/// `arch` is one of `lmf-mult`, `fusion-cm-attn`, `mult-lite`,
/// `unimodal-lstm-{l,a,v}`; `config_json` may be empty for defaults.
///
/// # Safety
/// String arguments must be null or valid NUL-terminated strings; `out` must
/// be a valid pointer. On success `*out` owns the model until
/// `trifuse_model_free`.
#[no_mangle]
pub unsafe extern "C" fn trifuse_model_build(
    arch: *const c_char,
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut TrifuseModel,
) -> TrifuseStatus {
    if out.is_null() {
        set_error("out is null".into());
        return TrifuseStatus::NullPointer;
    }
    let arch_str = try_ffi!(cstr(arch, "arch"));
    let arch = match Architecture::from_str(arch_str) {
        Ok(a) => a,
        Err(e) => return fail(e),
    };
    let config: ModelConfig = if config_json.is_null() {
        ModelConfig::default()
    } else {
        let text = try_ffi!(cstr(config_json, "config_json"));
        if text.trim().is_empty() {
            ModelConfig::default()
        } else {
            try_ffi!(parse_json(text, "config_json"))
        }
    };
    match ModelBundle::build(arch, &config, seed) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(TrifuseModel { inner }));
            TrifuseStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `model` must be null or a pointer returned by this library and not yet
/// freed.
#[no_mangle]
pub unsafe extern "C" fn trifuse_model_free(model: *mut TrifuseModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn trifuse_model_param_count(
    model: *const TrifuseModel,
    out: *mut u64,
) -> TrifuseStatus {
    if model.is_null() || out.is_null() {
        set_error("model or out is null".into());
        return TrifuseStatus::NullPointer;
    }
    *out = (*model).inner.param_count() as u64;
    TrifuseStatus::Ok
}

/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn trifuse_model_stack_count(
    model: *const TrifuseModel,
    out: *mut u64,
) -> TrifuseStatus {
    if model.is_null() || out.is_null() {
        set_error("model or out is null".into());
        return TrifuseStatus::NullPointer;
    }
    *out = (*model).inner.transformer_stack_count() as u64;
    TrifuseStatus::Ok
}

/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn trifuse_model_output_dim(
    model: *const TrifuseModel,
    out: *mut u64,
) -> TrifuseStatus {
    if model.is_null() || out.is_null() {
        set_error("model or out is null".into());
        return TrifuseStatus::NullPointer;
    }
    *out = (*model).inner.output_dim() as u64;
    TrifuseStatus::Ok
}

/// Eval-mode forward pass over one sample.
///
/// Each sequence is row-major `steps x dim` with the per-modality feature
/// dims fixed by the model config. `output_len` receives the number of
/// values written (1 for regression, 8 for emotions).
///
/// # Safety
/// The three sequence pointers must reference `steps * dim` doubles each;
/// `output` must have room for `output_capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn trifuse_model_forward(
    model: *const TrifuseModel,
    language: *const f64,
    language_steps: usize,
    audio: *const f64,
    audio_steps: usize,
    visual: *const f64,
    visual_steps: usize,
    output: *mut f64,
    output_capacity: usize,
    output_len: *mut usize,
) -> TrifuseStatus {
    if model.is_null()
        || language.is_null()
        || audio.is_null()
        || visual.is_null()
        || output.is_null()
        || output_len.is_null()
    {
        set_error("null pointer argument".into());
        return TrifuseStatus::NullPointer;
    }
    let bundle = &(*model).inner;
    let [dl, da, dv] = bundle.config.input_dims;
    let needed = bundle.output_dim();
    if output_capacity < needed {
        set_error(format!(
            "output capacity {output_capacity} < required {needed}"
        ));
        return TrifuseStatus::ShapeMismatch;
    }
    let seq = |ptr: *const f64, steps: usize, dim: usize, what: &str| -> Result<Tensor, TrifuseStatus> {
        let data = std::slice::from_raw_parts(ptr, steps * dim).to_vec();
        Tensor::new(vec![steps, dim], data).map_err(|e| {
            set_error(format!("{what}: {e}"));
            status_of(&e)
        })
    };
    let sample = MultimodalSample {
        language: try_ffi!(seq(language, language_steps, dl, "language")),
        audio: try_ffi!(seq(audio, audio_steps, da, "audio")),
        visual: try_ffi!(seq(visual, visual_steps, dv, "visual")),
        label: match bundle.config.output {
            trifuse::model::OutputKind::Regression => trifuse::data::Label::Sentiment(0.0),
            trifuse::model::OutputKind::Emotions => trifuse::data::Label::Emotions([0; 4]),
        },
    };
    match bundle.forward(&sample, false) {
        Ok(t) => {
            std::ptr::copy_nonoverlapping(t.data().as_ptr(), output, needed);
            *output_len = needed;
            TrifuseStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `model` must be valid; `path` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn trifuse_model_save(
    model: *const TrifuseModel,
    path: *const c_char,
) -> TrifuseStatus {
    if model.is_null() {
        set_error("model is null".into());
        return TrifuseStatus::NullPointer;
    }
    let path = PathBuf::from(try_ffi!(cstr(path, "path")));
    match trifuse::model::save_model(&(*model).inner, &path) {
        Ok(()) => TrifuseStatus::Ok,
        Err(e) => fail(e),
    }
}

/// # Safety
/// `path` must be a valid NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn trifuse_model_load(
    path: *const c_char,
    out: *mut *mut TrifuseModel,
) -> TrifuseStatus {
    if out.is_null() {
        set_error("out is null".into());
        return TrifuseStatus::NullPointer;
    }
    let path = PathBuf::from(try_ffi!(cstr(path, "path")));
    match trifuse::model::load_model(&path) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(TrifuseModel { inner }));
            TrifuseStatus::Ok
        }
        Err(e) => fail(e),
    }
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum GeneratorSpec {
    Parity {
        dims: [usize; 3],
        len_range: (usize, usize),
        noise: f64,
        #[serde(default)]
        aligned: bool,
        #[serde(default = "default_label_kind")]
        label_kind: LabelKind,
        seed: u64,
        splits: SplitSizes,
    },
    Linear {
        dims: [usize; 3],
        len_range: (usize, usize),
        noise: f64,
        seed: u64,
        splits: SplitSizes,
    },
}

fn default_label_kind() -> LabelKind {
    LabelKind::Sentiment
}

/// Generate a synthetic dataset from a JSON spec, e.g.
/// `{"kind":"parity","dims":[6,5,4],"len_range":[4,10],"noise":0.1,
///   "seed":0,"splits":{"train":256,"valid":64,"test":64}}`.
///
/// # Safety
/// `spec_json` must be a valid NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn trifuse_dataset_generate(
    spec_json: *const c_char,
    out: *mut *mut TrifuseDataset,
) -> TrifuseStatus {
    if out.is_null() {
        set_error("out is null".into());
        return TrifuseStatus::NullPointer;
    }
    let text = try_ffi!(cstr(spec_json, "spec_json"));
    let spec: GeneratorSpec = try_ffi!(parse_json(text, "spec_json"));
    let result = match spec {
        GeneratorSpec::Parity {
            dims,
            len_range,
            noise,
            aligned,
            label_kind,
            seed,
            splits,
        } => ParityGen {
            dims,
            len_range,
            noise,
            aligned,
            label_kind,
            seed,
        }
        .dataset(splits),
        GeneratorSpec::Linear {
            dims,
            len_range,
            noise,
            seed,
            splits,
        } => LinearGen {
            dims,
            len_range,
            noise,
            seed,
        }
        .dataset(splits),
    };
    match result {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(TrifuseDataset { inner }));
            TrifuseStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `dir` must be a valid NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn trifuse_dataset_load(
    dir: *const c_char,
    out: *mut *mut TrifuseDataset,
) -> TrifuseStatus {
    if out.is_null() {
        set_error("out is null".into());
        return TrifuseStatus::NullPointer;
    }
    let dir = PathBuf::from(try_ffi!(cstr(dir, "dir")));
    match trifuse::data::load_dataset(&dir) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(TrifuseDataset { inner }));
            TrifuseStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `dataset` must be valid; `dir` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn trifuse_dataset_save(
    dataset: *const TrifuseDataset,
    dir: *const c_char,
) -> TrifuseStatus {
    if dataset.is_null() {
        set_error("dataset is null".into());
        return TrifuseStatus::NullPointer;
    }
    let dir = PathBuf::from(try_ffi!(cstr(dir, "dir")));
    match trifuse::data::save_dataset(&(*dataset).inner, &dir) {
        Ok(()) => TrifuseStatus::Ok,
        Err(e) => fail(e),
    }
}

/// # Safety
/// `dataset` must be null or a pointer returned by this library and not yet
/// freed.
#[no_mangle]
pub unsafe extern "C" fn trifuse_dataset_free(dataset: *mut TrifuseDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Number of samples in a split (`"train"`, `"valid"`, `"test"`).
///
/// # Safety
/// `dataset`, `split`, and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn trifuse_dataset_len(
    dataset: *const TrifuseDataset,
    split: *const c_char,
    out: *mut usize,
) -> TrifuseStatus {
    if dataset.is_null() || out.is_null() {
        set_error("dataset or out is null".into());
        return TrifuseStatus::NullPointer;
    }
    let split = try_ffi!(cstr(split, "split"));
    match (*dataset).inner.split(split) {
        Ok(samples) => {
            *out = samples.len();
            TrifuseStatus::Ok
        }
        Err(e) => fail(e),
    }
}

fn to_json_cstring<T: serde::Serialize>(value: &T) -> Result<*mut c_char, TrifuseStatus> {
    let text = serde_json::to_string(value).map_err(|e| {
        set_error(format!("serializing report: {e}"));
        TrifuseStatus::InternalError
    })?;
    CString::new(text)
        .map(CString::into_raw)
        .map_err(|_| TrifuseStatus::InternalError)
}

/// Train the model in place; on success `*report_json` holds the per-epoch
/// log as JSON (free with `trifuse_string_free`). `train_config_json` may be
/// null or empty for defaults.
///
/// # Safety
/// `model` and `dataset` must be valid handles; `report_json` a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn trifuse_train(
    model: *mut TrifuseModel,
    dataset: *const TrifuseDataset,
    train_config_json: *const c_char,
    report_json: *mut *mut c_char,
) -> TrifuseStatus {
    if model.is_null() || dataset.is_null() || report_json.is_null() {
        set_error("null pointer argument".into());
        return TrifuseStatus::NullPointer;
    }
    let tc: TrainConfig = if train_config_json.is_null() {
        TrainConfig::default()
    } else {
        let text = try_ffi!(cstr(train_config_json, "train_config_json"));
        if text.trim().is_empty() {
            TrainConfig::default()
        } else {
            try_ffi!(parse_json(text, "train_config_json"))
        }
    };
    match train(&mut (*model).inner, &(*dataset).inner, &tc) {
        Ok(report) => {
            *report_json = try_ffi!(to_json_cstring(&report));
            TrifuseStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Evaluate on a split; on success `*metrics_json` holds the metric report
/// as JSON (free with `trifuse_string_free`).
///
/// # Safety
/// `model` and `dataset` must be valid handles; `split` a valid string;
/// `metrics_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn trifuse_evaluate(
    model: *const TrifuseModel,
    dataset: *const TrifuseDataset,
    split: *const c_char,
    metrics_json: *mut *mut c_char,
) -> TrifuseStatus {
    if model.is_null() || dataset.is_null() || metrics_json.is_null() {
        set_error("null pointer argument".into());
        return TrifuseStatus::NullPointer;
    }
    let split = try_ffi!(cstr(split, "split"));
    let samples = match (*dataset).inner.split(split) {
        Ok(s) => s,
        Err(e) => return fail(e),
    };
    match evaluate(&(*model).inner, samples) {
        Ok(eval) => {
            *metrics_json = try_ffi!(to_json_cstring(&eval));
            TrifuseStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Release a string returned by this library.
///
/// # Safety
/// `s` must be null or a pointer returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn trifuse_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
