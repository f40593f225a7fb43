//! C interface to the captioner.
//!
//! Every function returns a [`SemcapStatus`]. On failure a message is kept
//! per thread and can be read with [`semcap_last_error`] until the next call
//! on that thread. Strings handed out by the library must be released with
//! [`semcap_string_free`], models with [`semcap_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use semcap::attributes::AttributeSet;
use semcap::checkpoint::Checkpoint;
use semcap::decode::{greedy_decode, Captioner};
use semcap::metrics::{evaluate, parse_caption_table};
use semcap::model::ModelConfig;
use semcap::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SemcapStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Checkpoint = 5,
    Parse = 6,
    MissingReference = 7,
    Numeric = 8,
    Panic = 9,
}

impl From<&Error> for SemcapStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Argument(_) | Error::Config { .. } | Error::State(_) => SemcapStatus::InvalidArgument,
            Error::Numeric(_) | Error::Evaluation { .. } => SemcapStatus::Numeric,
            Error::Parse { .. } => SemcapStatus::Parse,
            Error::MissingReference(_) => SemcapStatus::MissingReference,
            Error::Checkpoint(_) => SemcapStatus::Checkpoint,
            Error::Io(_) => SemcapStatus::Io,
        }
    }
}

/// Corpus scores as printed by the `evaluate` command.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SemcapMetrics {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

/// A loaded checkpoint. Opaque to C.
pub struct SemcapModel {
    checkpoint: Checkpoint,
    config: ModelConfig,
    attribute_count: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(SemcapStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(SemcapStatus::from(&e), e.to_string())
    }
}

fn set_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = c);
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> SemcapStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => SemcapStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(&message);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SemcapStatus::Panic
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(SemcapStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(SemcapStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn null(what: &str) -> Failure {
    Failure(SemcapStatus::NullPointer, format!("{what} is null"))
}

/// Message for the last failed call on this thread, or an empty string.
/// The pointer stays valid until the next library call on this thread.
#[no_mangle]
pub extern "C" fn semcap_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn semcap_model_load(path: *const c_char, out: *mut *mut SemcapModel) -> SemcapStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = read_str(path, "path")?;
        let checkpoint = Checkpoint::load(Path::new(path))?;
        let config = checkpoint.model_config()?;
        let attribute_count = checkpoint.config.attribute_count();
        *out = Box::into_raw(Box::new(SemcapModel {
            checkpoint,
            config,
            attribute_count,
        }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`semcap_model_load`] and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn semcap_model_free(model: *mut SemcapModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Length of the feature vector the model expects, 0 for a null model.
///
/// # Safety
/// `model` must be null or a live model.
#[no_mangle]
pub unsafe extern "C" fn semcap_model_feature_dim(model: *const SemcapModel) -> usize {
    model.as_ref().map_or(0, |m| m.config.feature_dim)
}

/// Number of words including the reserved tokens, 0 for a null model.
///
/// # Safety
/// `model` must be null or a live model.
#[no_mangle]
pub unsafe extern "C" fn semcap_model_vocab_size(model: *const SemcapModel) -> usize {
    model.as_ref().map_or(0, |m| m.config.vocab_size)
}

/// Greedy caption for one image. `attributes` holds whitespace separated
/// words, best first; it may be null or empty for models without attributes.
/// On success `*out_caption` receives a string to release with
/// [`semcap_string_free`].
///
/// # Safety
/// `features` must point to `n_features` doubles; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn semcap_caption_greedy(
    model: *const SemcapModel,
    features: *const f64,
    n_features: usize,
    attributes: *const c_char,
    max_len: usize,
    out_caption: *mut *mut c_char,
) -> SemcapStatus {
    guard(|| {
        if out_caption.is_null() {
            return Err(null("out_caption"));
        }
        *out_caption = ptr::null_mut();
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        if features.is_null() {
            return Err(null("features"));
        }
        let features = std::slice::from_raw_parts(features, n_features);
        let words = if attributes.is_null() {
            ""
        } else {
            read_str(attributes, "attributes")?
        };
        let vocab = &model.checkpoint.vocab;
        let ids = words
            .split_whitespace()
            .map(|w| vocab.get(w).ok_or_else(|| Error::arg(format!("attribute `{w}` is not in the vocabulary"))))
            .collect::<semcap::Result<Vec<_>>>()?;
        let mut attrs = AttributeSet::from_ids(&ids);
        attrs.truncate(model.attribute_count);
        let captioner = Captioner::new(&model.checkpoint.params, &model.config, features, &attrs)?;
        let (caption, _) = greedy_decode(&captioner, attrs.ids(), max_len)?;
        let text = vocab.decode(&caption.tokens).join(" ");
        let c = CString::new(text).map_err(|_| Error::arg("caption contains NUL"))?;
        *out_caption = c.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn semcap_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Scores candidate captions against references. Both texts use the
/// `id<TAB>caption` layout or COCO JSON.
///
/// # Safety
/// Strings must be NUL-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn semcap_evaluate(
    candidates: *const c_char,
    references: *const c_char,
    out: *mut SemcapMetrics,
) -> SemcapStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let cands = parse_caption_table(read_str(candidates, "candidates")?)?;
        let refs = parse_caption_table(read_str(references, "references")?)?;
        let r = evaluate(&cands, &refs)?;
        *out = SemcapMetrics {
            bleu1: r.bleu[0],
            bleu2: r.bleu[1],
            bleu3: r.bleu[2],
            bleu4: r.bleu[3],
            rouge_l: r.rouge_l,
            cider: r.cider,
        };
        Ok(())
    })
}
