//! C interface. Objects cross the boundary as opaque handles created by
//! `*_load`/`*_new` style functions and released with the matching `*_free`.
//! Every fallible call returns an [`MpStatus`]; the message of the last
//! failure on the calling thread is available from [`mp_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use metapatch::attacks::LowPass;
use metapatch::config::RunConfig;
use metapatch::data::{load_folder, synth_dataset, Dataset};
use metapatch::evaluation;
use metapatch::model::{Classifier, Model, ModelParams};
use metapatch::perturbation::{self, Patch, PerturbationSpec};
use metapatch::training;
use metapatch::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Format = 5,
    Config = 6,
    Runtime = 7,
    Panic = 8,
}

/// A trained classifier.
pub struct MpModel {
    model: Model,
}

/// A labelled image set.
pub struct MpDataset {
    data: Dataset,
}

/// A perturbation together with its threat model.
pub struct MpPatch {
    patch: Patch,
    spec: PerturbationSpec,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Fail(MpStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape { .. } | Error::LabelOutOfRange { .. } => MpStatus::Shape,
            Error::InvalidArgument(_) | Error::EmptyClass(_) => MpStatus::InvalidArgument,
            Error::Config(_) => MpStatus::Config,
            Error::Format { .. } | Error::Json(_) => MpStatus::Format,
            Error::Io { .. } => MpStatus::Io,
            _ => MpStatus::Runtime,
        };
        Fail(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MpStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside metapatch".into());
            MpStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(MpStatus::NullPointer, format!("{what} is null"))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn string(p: *const c_char, what: &str) -> Result<String, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_string)
        .map_err(|_| Fail(MpStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn parse_spec(json: &str) -> Result<PerturbationSpec, Fail> {
    serde_json::from_str(json).map_err(|e| Fail(MpStatus::Config, format!("perturbation spec: {e}")))
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length excluding the NUL.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn mp_last_error(buf: *mut c_char, len: usize) -> usize {
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

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint written by `metapatch train`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mp_model_load(path: *const c_char, out: *mut *mut MpModel) -> MpStatus {
    guard(|| {
        let path = PathBuf::from(string(path, "path")?);
        let (params, _) = ModelParams::load(&path)?;
        put(out, MpModel {
            model: Model::new(params)?,
        })
    })
}

/// Trains a model from a JSON run configuration on its training split.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mp_train(config_json: *const c_char, out: *mut *mut MpModel) -> MpStatus {
    guard(|| {
        let text = string(config_json, "config")?;
        let config = RunConfig::from_json(std::path::Path::new("<ffi>"), &text)?;
        config.validate()?;
        let train_cfg = config
            .train
            .as_ref()
            .ok_or_else(|| Fail(MpStatus::Config, "configuration has no `train` section".into()))?;
        let (train, _) = config.data.load()?.split(config.seed)?;
        let outcome = training::train(&train, &config.perturbation, &config.architecture, train_cfg, config.seed)?;
        put(out, MpModel {
            model: Model::new(outcome.params)?,
        })
    })
}

/// Saves a model checkpoint.
///
/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mp_model_save(model: *const MpModel, path: *const c_char) -> MpStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let path = PathBuf::from(string(path, "path")?);
        m.model.params().save(&path, None)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mp_model_free(model: *mut MpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the model's input shape `[C, H, W]` and class count.
///
/// # Safety
/// `model` must be a live handle; `shape` must point to 3 writable values.
#[no_mangle]
pub unsafe extern "C" fn mp_model_info(model: *const MpModel, shape: *mut usize, classes: *mut usize) -> MpStatus {
    guard(|| {
        let m = deref(model, "model")?;
        if shape.is_null() || classes.is_null() {
            return Err(null("output"));
        }
        let s = m.model.params().architecture().input_shape();
        ptr::copy_nonoverlapping(s.as_ptr(), shape, 3);
        *classes = m.model.num_classes();
        Ok(())
    })
}

/// Predicts labels for `n` images stored contiguously as `[n, C, H, W]`.
///
/// # Safety
/// `x` must point to `n * C * H * W` values and `labels` to `n` writable values.
#[no_mangle]
pub unsafe extern "C" fn mp_model_predict(model: *mut MpModel, x: *const f64, n: usize, labels: *mut usize) -> MpStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        if x.is_null() || labels.is_null() {
            return Err(null("buffer"));
        }
        let [c, h, w] = m.model.params().architecture().input_shape();
        let values = std::slice::from_raw_parts(x, n * c * h * w).to_vec();
        let batch = Tensor::new(vec![n, c, h, w], values)?;
        let pred = m.model.predict(&batch)?;
        ptr::copy_nonoverlapping(pred.as_ptr(), labels, n);
        Ok(())
    })
}

/// Generates the synthetic shapes dataset.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mp_dataset_synth(
    per_class: usize,
    classes: usize,
    resolution: usize,
    seed: u64,
    out: *mut *mut MpDataset,
) -> MpStatus {
    guard(|| {
        let data = synth_dataset(per_class, classes, resolution, seed)?;
        put(out, MpDataset { data })
    })
}

/// Loads an image folder (one subdirectory per class).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mp_dataset_load(path: *const c_char, resolution: usize, out: *mut *mut MpDataset) -> MpStatus {
    guard(|| {
        let path = PathBuf::from(string(path, "path")?);
        put(out, MpDataset {
            data: load_folder(&path, resolution)?,
        })
    })
}

/// Splits into training and evaluation parts (one of every five samples held out).
///
/// # Safety
/// `data` must be a live handle; `train` and `eval` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mp_dataset_split(
    data: *const MpDataset,
    seed: u64,
    train: *mut *mut MpDataset,
    eval: *mut *mut MpDataset,
) -> MpStatus {
    guard(|| {
        let d = deref(data, "dataset")?;
        if train.is_null() || eval.is_null() {
            return Err(null("output handle"));
        }
        let (t, e) = d.data.split(seed)?;
        put(train, MpDataset { data: t })?;
        put(eval, MpDataset { data: e })
    })
}

/// # Safety
/// `data` must be a live handle; `len` writable.
#[no_mangle]
pub unsafe extern "C" fn mp_dataset_len(data: *const MpDataset, len: *mut usize) -> MpStatus {
    guard(|| {
        let d = deref(data, "dataset")?;
        if len.is_null() {
            return Err(null("len"));
        }
        *len = d.data.len();
        Ok(())
    })
}

/// # Safety
/// `data` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mp_dataset_free(data: *mut MpDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Loads a patch file for images of shape `[channels, height, width]`.
/// `spec_json` is the perturbation spec, e.g.
/// `{"mode":"patch","channels":3,"height":8,"width":8,"max_dy":8,"max_dx":8}`.
///
/// # Safety
/// `path` and `spec_json` must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mp_patch_load(
    path: *const c_char,
    spec_json: *const c_char,
    channels: usize,
    height: usize,
    width: usize,
    out: *mut *mut MpPatch,
) -> MpStatus {
    guard(|| {
        let path = PathBuf::from(string(path, "path")?);
        let spec = parse_spec(&string(spec_json, "spec")?)?;
        let patch = perturbation::load_patch(&path, &spec, [channels, height, width])?;
        put(out, MpPatch { patch, spec })
    })
}

/// Copies up to `len` patch values into `buf` and stores the total count in `count`.
///
/// # Safety
/// `patch` must be a live handle; `buf` null or `len` writable values; `count` writable.
#[no_mangle]
pub unsafe extern "C" fn mp_patch_values(patch: *const MpPatch, buf: *mut f64, len: usize, count: *mut usize) -> MpStatus {
    guard(|| {
        let p = deref(patch, "patch")?;
        if count.is_null() {
            return Err(null("count"));
        }
        let data = p.patch.data();
        if !buf.is_null() {
            ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len().min(len));
        }
        *count = data.len();
        Ok(())
    })
}

/// # Safety
/// `patch` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mp_patch_free(patch: *mut MpPatch) {
    if !patch.is_null() {
        drop(Box::from_raw(patch));
    }
}

/// Accuracy of `model` on `data` with `patch` applied at per-sample placements
/// derived from `seed`; clean accuracy when `patch` is null.
///
/// # Safety
/// `model` and `data` must be live handles; `patch` null or live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mp_accuracy_under(
    model: *mut MpModel,
    data: *const MpDataset,
    patch: *const MpPatch,
    seed: u64,
    out: *mut f64,
) -> MpStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        let d = deref(data, "dataset")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let clean = PerturbationSpec::Additive { epsilon: 0.0 };
        let acc = match patch.as_ref() {
            Some(p) => evaluation::accuracy_under(&mut m.model, &d.data, Some(&p.patch), &p.spec, seed)?,
            None => evaluation::accuracy_under(&mut m.model, &d.data, None, &clean, seed)?,
        };
        *out = acc;
        Ok(())
    })
}

/// Band-limits a `[channels, height, width]` array to DFT radius `cutoff`
/// while keeping every value in `[lo, hi]`.
///
/// # Safety
/// `input` and `output` must each hold `channels * height * width` values.
#[no_mangle]
pub unsafe extern "C" fn mp_low_pass(
    input: *const f64,
    output: *mut f64,
    channels: usize,
    height: usize,
    width: usize,
    cutoff: f64,
    lo: f64,
    hi: f64,
) -> MpStatus {
    guard(|| {
        if input.is_null() || output.is_null() {
            return Err(null("buffer"));
        }
        if !(lo <= hi) {
            return Err(Fail(MpStatus::InvalidArgument, format!("empty box [{lo}, {hi}]")));
        }
        let n = channels * height * width;
        let lp = LowPass::new(&[channels, height, width], cutoff)?;
        let values = std::slice::from_raw_parts(input, n);
        let y = lp.project(values, lo, hi);
        ptr::copy_nonoverlapping(y.as_ptr(), output, n);
        Ok(())
    })
}
