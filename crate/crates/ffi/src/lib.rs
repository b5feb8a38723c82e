//! C interface to the assessment and correction pipeline.
//!
//! Every fallible call returns a [`CdfStatus`]; on failure a message for the
//! calling thread is available from [`cdf_last_error`]. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::BufReader;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use cdf::eval::{self, Corrector, EvalOptions, Verdict};
use cdf::ids::{IdsDictionary, SymbolVocabulary};
use cdf::model::CdfModel;
use cdf::synth::GlyphImage;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CdfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Incompatible = 4,
    Model = 5,
    OutOfRange = 6,
    Panic = 7,
}

/// Candidate source for misspelled characters.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CdfCorrectorKind {
    Fetcher = 0,
    EditDistance = 1,
    ProbEmbed = 2,
}

/// A loaded model with its vocabulary, dictionary and inference options.
pub struct CdfCorrector {
    model: CdfModel<f32>,
    vocab: SymbolVocabulary,
    dict: IdsDictionary,
    opts: EvalOptions,
}

/// Outcome of assessing one image.
pub struct CdfResult {
    ids: CString,
    class: Option<u32>,
    unparseable: bool,
    candidates: Vec<(u32, f64)>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn fail(status: CdfStatus, msg: impl Into<String>) -> CdfStatus {
    set_error(msg);
    status
}

/// Runs `f`, turning a panic into [`CdfStatus::Panic`].
fn guarded(f: impl FnOnce() -> CdfStatus) -> CdfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p.downcast_ref::<&str>().map(|s| s.to_string()).or_else(|| p.downcast_ref::<String>().cloned());
            fail(CdfStatus::Panic, msg.unwrap_or_else(|| "panic".into()))
        }
    }
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a Path, CdfStatus> {
    if p.is_null() {
        return Err(fail(CdfStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| fail(CdfStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn open(path: &Path) -> Result<BufReader<File>, CdfStatus> {
    File::open(path).map(BufReader::new).map_err(|e| fail(CdfStatus::Io, format!("{}: {e}", path.display())))
}

fn load(corpus_dir: &Path, checkpoint: &Path) -> Result<CdfCorrector, CdfStatus> {
    let (model, vocab) = eval::load_checkpoint(open(checkpoint)?).map_err(|e| fail(CdfStatus::Model, e.to_string()))?;
    let corpus_vocab = SymbolVocabulary::read_from(open(&corpus_dir.join("vocab.tsv"))?)
        .map_err(|e| fail(CdfStatus::Io, format!("vocab.tsv: {e}")))?;
    let dict = IdsDictionary::read_from(open(&corpus_dir.join("dict.tsv"))?, &corpus_vocab)
        .map_err(|e| fail(CdfStatus::Io, format!("dict.tsv: {e}")))?;
    let same = vocab.len() == corpus_vocab.len() && vocab.ids().all(|id| vocab.name(id) == corpus_vocab.name(id));
    if !same || model.config.n_classes != dict.len() {
        return Err(fail(CdfStatus::Incompatible, "checkpoint was trained on a different vocabulary or dictionary"));
    }
    Ok(CdfCorrector { model, vocab, dict, opts: EvalOptions::default() })
}

/// Loads the checkpoint at `checkpoint` against the dictionary of the corpus
/// in `corpus_dir`. On success `*out` owns a new handle.
///
/// # Safety
/// The paths must be NUL-terminated strings and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cdf_corrector_open(
    corpus_dir: *const c_char,
    checkpoint: *const c_char,
    out: *mut *mut CdfCorrector,
) -> CdfStatus {
    guarded(|| {
        if out.is_null() {
            return fail(CdfStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let r = path_arg(corpus_dir, "corpus_dir")
            .and_then(|c| path_arg(checkpoint, "checkpoint").map(|k| (c, k)))
            .and_then(|(c, k)| load(c, k));
        match r {
            Ok(c) => {
                *out = Box::into_raw(Box::new(c));
                CdfStatus::Ok
            }
            Err(s) => s,
        }
    })
}

/// Releases a corrector. Null is ignored.
///
/// # Safety
/// `c` must come from [`cdf_corrector_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cdf_corrector_free(c: *mut CdfCorrector) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// Side length in pixels of the images the model expects, 0 for null.
///
/// # Safety
/// `c` must be null or a live corrector.
#[no_mangle]
pub unsafe extern "C" fn cdf_corrector_image_size(c: *const CdfCorrector) -> u32 {
    c.as_ref().map_or(0, |c| c.model.config.image_size as u32)
}

/// Number of right characters in the dictionary, 0 for null.
///
/// # Safety
/// `c` must be null or a live corrector.
#[no_mangle]
pub unsafe extern "C" fn cdf_corrector_class_count(c: *const CdfCorrector) -> u32 {
    c.as_ref().map_or(0, |c| c.dict.len() as u32)
}

/// Sets the inference switches. Nonzero flags enable re-weighting and the
/// counting vector; `topk` must be positive.
///
/// # Safety
/// `c` must be a live corrector.
#[no_mangle]
pub unsafe extern "C" fn cdf_corrector_set_options(
    c: *mut CdfCorrector,
    reweight: i32,
    count_vector: i32,
    kind: CdfCorrectorKind,
    topk: u32,
) -> CdfStatus {
    guarded(|| {
        let Some(c) = c.as_mut() else { return fail(CdfStatus::NullPointer, "corrector is null") };
        if topk == 0 {
            return fail(CdfStatus::InvalidArgument, "topk must be positive");
        }
        let corrector = match kind {
            CdfCorrectorKind::Fetcher => Corrector::Fetcher,
            CdfCorrectorKind::EditDistance => Corrector::Edit,
            CdfCorrectorKind::ProbEmbed => Corrector::ProbEmbed,
        };
        c.opts = EvalOptions { reweight: reweight != 0, count_vector: count_vector != 0, corrector, topk: topk as usize };
        CdfStatus::Ok
    })
}

fn assess(c: &CdfCorrector, image: &[f32]) -> Result<CdfResult, CdfStatus> {
    let model = if c.model.config.use_count_vector == c.opts.count_vector {
        std::borrow::Cow::Borrowed(&c.model)
    } else {
        let mut m = c.model.clone();
        m.config.use_count_vector = c.opts.count_vector;
        std::borrow::Cow::Owned(m)
    };
    let a = eval::analyze(&model, image, c.opts.reweight).map_err(|e| fail(CdfStatus::Model, e.to_string()))?;
    let ids = CString::new(c.vocab.decode(&a.symbols)).unwrap_or_default();
    Ok(match eval::verdict_of(&a, &c.vocab, &c.dict, &c.opts) {
        Verdict::Right { class } => CdfResult { ids, class: Some(class.0), unparseable: false, candidates: vec![] },
        Verdict::Misspelled { unparseable, candidates, .. } => CdfResult {
            ids,
            class: None,
            unparseable,
            candidates: candidates.into_iter().map(|(k, s)| (k.0, s)).collect(),
        },
    })
}

/// Assesses a grayscale image of `len` intensities in [0, 1] (row major,
/// ink high). On success `*out` owns a new result.
///
/// # Safety
/// `pixels` must point to `len` floats and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cdf_assess(
    c: *const CdfCorrector,
    pixels: *const f32,
    len: usize,
    out: *mut *mut CdfResult,
) -> CdfStatus {
    guarded(|| {
        if out.is_null() || pixels.is_null() {
            return fail(CdfStatus::NullPointer, "pixels or out is null");
        }
        *out = ptr::null_mut();
        let Some(c) = c.as_ref() else { return fail(CdfStatus::NullPointer, "corrector is null") };
        let side = c.model.config.image_size;
        if len != side * side {
            return fail(CdfStatus::InvalidArgument, format!("expected {} pixels, got {len}", side * side));
        }
        let image = std::slice::from_raw_parts(pixels, len);
        if image.iter().any(|v| !v.is_finite()) {
            return fail(CdfStatus::InvalidArgument, "pixels must be finite");
        }
        match assess(c, image) {
            Ok(r) => {
                *out = Box::into_raw(Box::new(r));
                CdfStatus::Ok
            }
            Err(s) => s,
        }
    })
}

/// Assesses a binary PGM image file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cdf_assess_pgm(c: *const CdfCorrector, path: *const c_char, out: *mut *mut CdfResult) -> CdfStatus {
    guarded(|| {
        let path = match path_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let img = match open(path).and_then(|r| GlyphImage::read_pgm(r).map_err(|e| fail(CdfStatus::Io, e.to_string()))) {
            Ok(i) => i,
            Err(s) => return s,
        };
        let pixels = img.intensities();
        cdf_assess(c, pixels.as_ptr(), pixels.len(), out)
    })
}

/// Releases a result. Null is ignored.
///
/// # Safety
/// `r` must come from an assess call and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cdf_result_free(r: *mut CdfResult) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// 1 if the image was judged misspelled, 0 if right, -1 for null.
///
/// # Safety
/// `r` must be null or a live result.
#[no_mangle]
pub unsafe extern "C" fn cdf_result_is_misspelled(r: *const CdfResult) -> i32 {
    r.as_ref().map_or(-1, |r| i32::from(r.class.is_none()))
}

/// 1 if the decode was not a well-formed IDS, 0 otherwise, -1 for null.
///
/// # Safety
/// `r` must be null or a live result.
#[no_mangle]
pub unsafe extern "C" fn cdf_result_is_unparseable(r: *const CdfResult) -> i32 {
    r.as_ref().map_or(-1, |r| i32::from(r.unparseable))
}

/// Recognized class of a right character, -1 if misspelled or null.
///
/// # Safety
/// `r` must be null or a live result.
#[no_mangle]
pub unsafe extern "C" fn cdf_result_class(r: *const CdfResult) -> i64 {
    r.as_ref().and_then(|r| r.class).map_or(-1, i64::from)
}

/// Decoded IDS as space-separated symbol names. The string lives as long
/// as the result; null for a null result.
///
/// # Safety
/// `r` must be null or a live result.
#[no_mangle]
pub unsafe extern "C" fn cdf_result_ids(r: *const CdfResult) -> *const c_char {
    r.as_ref().map_or(ptr::null(), |r| r.ids.as_ptr())
}

/// Number of correction candidates (0 for right characters).
///
/// # Safety
/// `r` must be null or a live result.
#[no_mangle]
pub unsafe extern "C" fn cdf_result_candidate_count(r: *const CdfResult) -> usize {
    r.as_ref().map_or(0, |r| r.candidates.len())
}

/// Candidate `i` in rank order: its class and score (a probability for the
/// fetcher, a distance for the baselines).
///
/// # Safety
/// `r` must be a live result; `class` and `score` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn cdf_result_candidate(r: *const CdfResult, i: usize, class: *mut u32, score: *mut f64) -> CdfStatus {
    guarded(|| {
        let Some(r) = r.as_ref() else { return fail(CdfStatus::NullPointer, "result is null") };
        if class.is_null() || score.is_null() {
            return fail(CdfStatus::NullPointer, "class or score is null");
        }
        match r.candidates.get(i) {
            Some(&(k, s)) => {
                *class = k;
                *score = s;
                CdfStatus::Ok
            }
            None => fail(CdfStatus::OutOfRange, format!("candidate {i} of {}", r.candidates.len())),
        }
    })
}

/// Message of the last failure on this thread; empty if none. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cdf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn cdf_status_message(s: CdfStatus) -> *const c_char {
    let m: &'static [u8] = match s {
        CdfStatus::Ok => b"ok\0",
        CdfStatus::NullPointer => b"null pointer\0",
        CdfStatus::InvalidArgument => b"invalid argument\0",
        CdfStatus::Io => b"i/o or format error\0",
        CdfStatus::Incompatible => b"checkpoint and corpus disagree\0",
        CdfStatus::Model => b"model error\0",
        CdfStatus::OutOfRange => b"index out of range\0",
        CdfStatus::Panic => b"internal panic\0",
    };
    m.as_ptr().cast()
}
