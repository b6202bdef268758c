//! C ABI over cotkit.
//!
//! Conventions:
//! - every fallible function returns a `CotkitStatus`; results go through
//!   out-pointers;
//! - on failure `cotkit_last_error()` describes the error (per thread);
//! - strings returned through `char **` are owned by the caller and must be
//!   released with `cotkit_string_free`;
//! - `CotkitModel` is opaque and released with `cotkit_model_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use cotkit::agents::{
    render_consistency_prompt, render_cot_prompt, render_doc_check_prompt, render_quality_prompt,
};
use cotkit::corpus::{parse_jsonl, token_stats, CoTRecord, WhitespaceTokenizer};
use cotkit::evalharness::improvement;
use cotkit::textmetrics::{bleu_n, meteor_lite, rouge_l, TokenSeq};
use cotkit::tinylm::{self, decode_greedy, render_instruction, Adapted, Adapters, ByteTokenizer, Model};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CotkitStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Format = 5,
    Model = 6,
    /// Undefined result, e.g. an improvement over a zero baseline.
    Undefined = 7,
    Panic = 8,
}

/// Which prompt template `cotkit_render_prompt` fills.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CotkitTemplate {
    /// `first` = code.
    Quality = 0,
    /// `first` = prompt with signature.
    CotGenerator = 1,
    /// `first` = code, `second` = CoT.
    Consistency = 2,
    /// `first` = code, `second` = docstring.
    DocCheck = 3,
    /// `first` = prompt.
    Instruction = 4,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(msg).expect("nul bytes removed")));
}

struct Fail(CotkitStatus, String);

type FfiResult<T> = Result<T, Fail>;

fn fail<T>(status: CotkitStatus, msg: impl Into<String>) -> FfiResult<T> {
    Err(Fail(status, msg.into()))
}

/// Runs `f`, records any error and converts panics.
fn guard(f: impl FnOnce() -> FfiResult<()>) -> CotkitStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CotkitStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CotkitStatus::Panic
        }
    }
}

/// # Safety
/// `p` is null or a valid NUL-terminated string.
unsafe fn text<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return fail(CotkitStatus::NullPointer, format!("{what} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(CotkitStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn out_ptr<T>(p: *mut T, what: &str) -> FfiResult<()> {
    if p.is_null() {
        fail(CotkitStatus::NullPointer, format!("{what} is null"))
    } else {
        Ok(())
    }
}

/// # Safety
/// `out` is valid for writes.
unsafe fn put_string(out: *mut *mut c_char, s: String) -> FfiResult<()> {
    let c = CString::new(s).or_else(|_| fail(CotkitStatus::Format, "result contains a NUL byte"))?;
    *out = c.into_raw();
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. Valid until
/// the next cotkit call on the same thread.
#[no_mangle]
pub extern "C" fn cotkit_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn cotkit_version() -> *const c_char {
    static V: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    V.as_ptr().cast()
}

/// Frees a string returned by this library. NULL is a no-op.
///
/// # Safety
/// `s` is NULL or came from this library and was not freed before.
#[no_mangle]
pub unsafe extern "C" fn cotkit_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// BLEU-n (1..=4) of `candidate` against `reference`.
///
/// # Safety
/// Strings are NUL-terminated; `out` is valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cotkit_bleu(
    candidate: *const c_char,
    reference: *const c_char,
    n: u32,
    out: *mut f64,
) -> CotkitStatus {
    guard(|| {
        let c = text(candidate, "candidate")?;
        let r = text(reference, "reference")?;
        out_ptr(out, "out")?;
        if !(1..=4).contains(&n) {
            return fail(CotkitStatus::InvalidArgument, format!("n must be 1..=4, got {n}"));
        }
        *out = bleu_n(&TokenSeq::tokenize(c), &TokenSeq::tokenize(r), n as usize);
        Ok(())
    })
}

/// METEOR of `candidate` against `reference`.
///
/// # Safety
/// As for `cotkit_bleu`.
#[no_mangle]
pub unsafe extern "C" fn cotkit_meteor(candidate: *const c_char, reference: *const c_char, out: *mut f64) -> CotkitStatus {
    guard(|| {
        let c = text(candidate, "candidate")?;
        let r = text(reference, "reference")?;
        out_ptr(out, "out")?;
        *out = meteor_lite(&TokenSeq::tokenize(c), &TokenSeq::tokenize(r));
        Ok(())
    })
}

/// ROUGE-L F-score of `candidate` against `reference`.
///
/// # Safety
/// As for `cotkit_bleu`.
#[no_mangle]
pub unsafe extern "C" fn cotkit_rouge_l(candidate: *const c_char, reference: *const c_char, out: *mut f64) -> CotkitStatus {
    guard(|| {
        let c = text(candidate, "candidate")?;
        let r = text(reference, "reference")?;
        out_ptr(out, "out")?;
        *out = rouge_l(&TokenSeq::tokenize(c), &TokenSeq::tokenize(r));
        Ok(())
    })
}

/// Relative improvement in percent, rounded to two decimals. Returns
/// `Undefined` when `old_pct` is zero.
///
/// # Safety
/// `out` is valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cotkit_improvement(old_pct: f64, new_pct: f64, out: *mut f64) -> CotkitStatus {
    guard(|| {
        out_ptr(out, "out")?;
        match improvement(old_pct, new_pct) {
            Some(v) => {
                *out = v;
                Ok(())
            }
            None => fail(CotkitStatus::Undefined, "improvement over a zero baseline is undefined"),
        }
    })
}

/// Fills a prompt template; `kind` is a `CotkitTemplate` value.
/// `second` may be NULL for one-slot templates.
///
/// # Safety
/// Strings are NUL-terminated or NULL; `out` is valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cotkit_render_prompt(
    kind: u32,
    first: *const c_char,
    second: *const c_char,
    out: *mut *mut c_char,
) -> CotkitStatus {
    guard(|| {
        let a = text(first, "first")?;
        out_ptr(out, "out")?;
        let kind = match kind {
            0 => CotkitTemplate::Quality,
            1 => CotkitTemplate::CotGenerator,
            2 => CotkitTemplate::Consistency,
            3 => CotkitTemplate::DocCheck,
            4 => CotkitTemplate::Instruction,
            other => return fail(CotkitStatus::InvalidArgument, format!("unknown template {other}")),
        };
        let s = match kind {
            CotkitTemplate::Quality => render_quality_prompt(a),
            CotkitTemplate::CotGenerator => render_cot_prompt(a),
            CotkitTemplate::Instruction => render_instruction(a),
            CotkitTemplate::Consistency => render_consistency_prompt(a, text(second, "second")?)
                .or_else(|e| fail(CotkitStatus::InvalidArgument, e.to_string()))?,
            CotkitTemplate::DocCheck => render_doc_check_prompt(a, text(second, "second")?),
        };
        put_string(out, s)
    })
}

/// Token statistics of a CoT corpus given as JSONL text, as JSON.
///
/// # Safety
/// `jsonl` is NUL-terminated; `out` is valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cotkit_corpus_stats_json(jsonl: *const c_char, out: *mut *mut c_char) -> CotkitStatus {
    guard(|| {
        let t = text(jsonl, "jsonl")?;
        out_ptr(out, "out")?;
        let records: Vec<CoTRecord> = parse_jsonl(t).or_else(|e| fail(CotkitStatus::Format, e.to_string()))?;
        let stats = token_stats(&records, &WhitespaceTokenizer);
        put_string(out, serde_json::to_string(&stats).expect("stats serialize"))
    })
}

/// A loaded byte-level model with optional adapters.
pub struct CotkitModel {
    model: Model,
    adapters: Option<Adapters>,
}

/// Loads a model file written by `cotkit tinylm-train`.
///
/// # Safety
/// `path` is NUL-terminated; `out` is valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cotkit_model_load(path: *const c_char, out: *mut *mut CotkitModel) -> CotkitStatus {
    guard(|| {
        let p = text(path, "path")?;
        out_ptr(out, "out")?;
        let (model, adapters) = tinylm::io::load(Path::new(p)).or_else(|e| match e {
            tinylm::TinyLmError::Io(m) => fail(CotkitStatus::Io, m),
            other => fail(CotkitStatus::Format, other.to_string()),
        })?;
        *out = Box::into_raw(Box::new(CotkitModel { model, adapters }));
        Ok(())
    })
}

/// Releases a model. NULL is a no-op.
///
/// # Safety
/// `model` is NULL or came from `cotkit_model_load` and was not freed.
#[no_mangle]
pub unsafe extern "C" fn cotkit_model_free(model: *mut CotkitModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Hex sha256 of the base weights.
///
/// # Safety
/// `model` came from `cotkit_model_load`; `out` is valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cotkit_model_checksum(model: *const CotkitModel, out: *mut *mut c_char) -> CotkitStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail(CotkitStatus::NullPointer, "model is null".into()))?;
        out_ptr(out, "out")?;
        put_string(out, m.model.checksum())
    })
}

/// Greedy continuation of `prompt` (raw text, byte tokens), at most
/// `max_new` tokens; the end-of-sequence token is not rendered.
///
/// # Safety
/// `model` came from `cotkit_model_load`; `prompt` is NUL-terminated;
/// `out` is valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cotkit_model_generate_greedy(
    model: *const CotkitModel,
    prompt: *const c_char,
    max_new: u32,
    out: *mut *mut c_char,
) -> CotkitStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail(CotkitStatus::NullPointer, "model is null".into()))?;
        let p = text(prompt, "prompt")?;
        out_ptr(out, "out")?;
        let tok = ByteTokenizer;
        let scorer = Adapted {
            model: &m.model,
            adapters: m.adapters.as_ref(),
        };
        let ids = decode_greedy(&scorer, &tok.encode(p), max_new as usize).or_else(|e| match e {
            tinylm::TinyLmError::EmptySequence | tinylm::TinyLmError::SequenceTooLong { .. } => {
                fail(CotkitStatus::InvalidArgument, e.to_string())
            }
            other => fail(CotkitStatus::Model, other.to_string()),
        })?;
        put_string(out, tok.decode(&ids))
    })
}
