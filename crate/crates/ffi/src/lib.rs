//! C interface to `mtn-core`.
//!
//! Every fallible function returns an [`MtnStatus`]; on failure the message
//! is available from [`mtn_last_error_message`] on the same thread. Strings
//! handed out by the library must be released with [`mtn_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use mtn_core::data::{encode_examples, load_dataset, EncodedExample, FeatureStore, Vocabulary};
use mtn_core::engine::{decode_examples, rank_candidates, write_generations, Checkpoint, DecodeConfig};
use mtn_core::metrics::evaluate;
use mtn_core::numerics::{noam_lr, ScheduleConfig};
use mtn_core::MtnError;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MtnStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Data = 4,
    Runtime = 5,
    Panic = 6,
}

/// A loaded checkpoint.
pub struct MtnModel {
    model: mtn_core::model::MtnModel<f32>,
    vocab: Vocabulary,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &MtnError) -> MtnStatus {
    match err.exit_code() {
        2 => MtnStatus::Config,
        3 => MtnStatus::Data,
        _ => MtnStatus::Runtime,
    }
}

enum Failure {
    Null(&'static str),
    Utf8(&'static str),
    Core(MtnError),
}

impl From<MtnError> for Failure {
    fn from(e: MtnError) -> Self {
        Failure::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MtnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MtnStatus::Ok,
        Ok(Err(Failure::Null(name))) => {
            set_error(format!("`{name}` is null"));
            MtnStatus::NullArgument
        }
        Ok(Err(Failure::Utf8(name))) => {
            set_error(format!("`{name}` is not valid UTF-8"));
            MtnStatus::InvalidUtf8
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            MtnStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, name: &'static str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Failure::Utf8(name))
}

unsafe fn model_arg<'a>(m: *const MtnModel) -> Result<&'a MtnModel, Failure> {
    m.as_ref().ok_or(Failure::Null("model"))
}

fn load_inputs(model: &MtnModel, dataset: &Path, features: &Path) -> Result<(Vec<EncodedExample>, FeatureStore), Failure> {
    let raw = load_dataset(dataset, model.model.config.max_history)?;
    let examples = encode_examples(&raw, &model.vocab);
    let store = FeatureStore::load_dir(
        features,
        &model.model.config.modalities,
        examples.iter().map(|e| e.video_id.as_str()),
    )?;
    Ok((examples, store))
}

/// Loads the checkpoint directory at `dir` into `*out`.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mtn_model_load(dir: *const c_char, out: *mut *mut MtnModel) -> MtnStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = ptr::null_mut();
        let ckpt = Checkpoint::load(&path_arg(dir, "dir")?)?;
        let model = ckpt.model()?;
        *out = Box::into_raw(Box::new(MtnModel {
            model,
            vocab: ckpt.vocab,
        }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`mtn_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mtn_model_free(model: *mut MtnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size of a loaded model, 0 for null.
///
/// # Safety
/// `model` must be null or come from [`mtn_model_load`].
#[no_mangle]
pub unsafe extern "C" fn mtn_model_vocab_size(model: *const MtnModel) -> usize {
    model.as_ref().map_or(0, |m| m.vocab.len())
}

/// Decodes every example of `dataset` and writes generation JSON lines to
/// `output`. A `beam_size` of 0 selects greedy decoding.
///
/// # Safety
/// String arguments must be NUL-terminated; `model` from [`mtn_model_load`].
#[no_mangle]
pub unsafe extern "C" fn mtn_generate(
    model: *const MtnModel,
    dataset: *const c_char,
    features: *const c_char,
    beam_size: usize,
    length_penalty: f64,
    max_len: usize,
    output: *const c_char,
) -> MtnStatus {
    guard(|| {
        let m = model_arg(model)?;
        let (dataset, features, output) = (
            path_arg(dataset, "dataset")?,
            path_arg(features, "features")?,
            path_arg(output, "output")?,
        );
        if max_len == 0 {
            return Err(MtnError::config("decode.max_len", "must be at least 1").into());
        }
        let (examples, store) = load_inputs(m, &dataset, &features)?;
        let cfg = DecodeConfig {
            beam_size: beam_size.max(1),
            length_penalty,
            max_len,
        };
        let records = decode_examples(&m.model, &m.vocab, &examples, &store, &cfg, beam_size == 0)?;
        write_generations(&output, &records)?;
        Ok(())
    })
}

/// Ranks each example's candidates; writes one JSON line per example with
/// the candidate indices best first.
///
/// # Safety
/// String arguments must be NUL-terminated; `model` from [`mtn_model_load`].
#[no_mangle]
pub unsafe extern "C" fn mtn_rank(
    model: *const MtnModel,
    dataset: *const c_char,
    features: *const c_char,
    output: *const c_char,
) -> MtnStatus {
    guard(|| {
        let m = model_arg(model)?;
        let (dataset, features, output) = (
            path_arg(dataset, "dataset")?,
            path_arg(features, "features")?,
            path_arg(output, "output")?,
        );
        let (examples, store) = load_inputs(m, &dataset, &features)?;
        let mut text = String::new();
        for e in &examples {
            let cands = e.candidates.as_ref().ok_or_else(|| {
                MtnError::Data(format!("{} turn {} has no candidates", e.video_id, e.turn))
            })?;
            let order = rank_candidates(&m.model, e, cands, &store)?;
            let line = serde_json::json!({"dialogue_id": e.video_id, "turn": e.turn, "ranking": order});
            text.push_str(&line.to_string());
            text.push('\n');
        }
        std::fs::write(&output, text).map_err(|e| MtnError::io(&output, e))?;
        Ok(())
    })
}

/// Scores `hyp` against `reference` (generation JSON lines) and stores the
/// metric report as a JSON string in `*out_json`.
///
/// # Safety
/// Paths must be NUL-terminated; `out_json` a valid pointer. Free the result
/// with [`mtn_string_free`].
#[no_mangle]
pub unsafe extern "C" fn mtn_evaluate_files(
    hyp: *const c_char,
    reference: *const c_char,
    out_json: *mut *mut c_char,
) -> MtnStatus {
    guard(|| {
        if out_json.is_null() {
            return Err(Failure::Null("out_json"));
        }
        *out_json = ptr::null_mut();
        let report = evaluate(&path_arg(hyp, "hyp")?, &path_arg(reference, "reference")?)?;
        let json = CString::new(report.to_json()).expect("JSON has no NUL bytes");
        *out_json = json.into_raw();
        Ok(())
    })
}

/// Learning rate at 1-based `step`; NaN when `model_dim` or `warmup_steps`
/// is zero.
#[no_mangle]
pub extern "C" fn mtn_noam_lr(step: u64, model_dim: usize, warmup_steps: u64) -> f64 {
    ScheduleConfig::new(model_dim, warmup_steps).map_or(f64::NAN, |c| noam_lr(step, &c))
}

/// Message of the last failure on this thread, or null. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn mtn_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must be null or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn mtn_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
