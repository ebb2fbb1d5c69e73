//! C ABI over the `multicap` captioner.
//!
//! Every fallible call returns a [`McStatus`]. On failure the message is kept
//! per thread and can be fetched with [`mc_last_error`]. Strings handed out
//! by the library must be released with [`mc_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use multicap::embedding::{pool_frames, retrieve_prompts, UnitVector};
use multicap::inference::{caption_greedy_with, caption_with, DecodeConfig};
use multicap::io::Checkpoint;
use multicap::metrics::{evaluate, EvalCorpus};
use multicap::{Error, ErrorKind};

/// Status codes. The first four match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum McStatus {
    Ok = 0,
    Usage = 1,
    Data = 2,
    Numeric = 3,
    NullArgument = 4,
    Panic = 5,
}

impl From<&Error> for McStatus {
    fn from(e: &Error) -> Self {
        match e.kind() {
            ErrorKind::Usage => McStatus::Usage,
            ErrorKind::Data => McStatus::Data,
            ErrorKind::Numeric => McStatus::Numeric,
        }
    }
}

/// A loaded checkpoint.
pub struct McModel {
    ck: Checkpoint,
}

/// Corpus-level caption scores.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct McScores {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Failure {
    Lib(Error),
    Null(&'static str),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard<F>(f: F) -> McStatus
where
    F: FnOnce() -> Result<(), Failure>,
{
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => McStatus::Ok,
        Ok(Err(Failure::Lib(e))) => {
            let status = McStatus::from(&e);
            set_error(e.to_string());
            status
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is null"));
            McStatus::NullArgument
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            McStatus::Panic
        }
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Lib(Error::Argument(format!("{what} is not valid UTF-8"))))
}

fn non_null<T>(p: *const T, what: &'static str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::Null(what))
    } else {
        Ok(())
    }
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " "))
        .expect("nul bytes replaced")
        .into_raw()
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn mc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn mc_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => panic!("version contains a nul byte"),
    };
    VERSION.as_ptr()
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn mc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a checkpoint directory into `*out`.
///
/// # Safety
/// `dir` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mc_model_load(dir: *const c_char, out: *mut *mut McModel) -> McStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let dir = c_str(dir, "dir")?;
        let ck = Checkpoint::load(Path::new(dir))?;
        *out = Box::into_raw(Box::new(McModel { ck }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`mc_model_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn mc_model_free(model: *mut McModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Width of the feature vectors the model expects, or 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mc_model_feature_dim(model: *const McModel) -> usize {
    model.as_ref().map_or(0, |m| m.ck.params.config().d_clip)
}

/// Number of languages the model decodes, or 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mc_model_language_count(model: *const McModel) -> usize {
    model.as_ref().map_or(0, |m| m.ck.languages.len())
}

/// Captions one video given as `n_frames` row-major frame features of width
/// `dim`. Rows need not be normalized. `lang` may be null for the first
/// language. `beam_size` 0 decodes greedily. On success `*caption` holds a
/// string to release with [`mc_string_free`].
///
/// # Safety
/// `frames` must point to `n_frames * dim` floats; `model` must be a live
/// handle; `lang` must be null or nul-terminated; `caption` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mc_model_caption(
    model: *const McModel,
    frames: *const f32,
    n_frames: usize,
    dim: usize,
    lang: *const c_char,
    beam_size: usize,
    max_len: usize,
    caption: *mut *mut c_char,
) -> McStatus {
    guard(|| {
        non_null(caption, "caption")?;
        *caption = ptr::null_mut();
        let m = model.as_ref().ok_or(Failure::Null("model"))?;
        non_null(frames, "frames")?;
        let ck = &m.ck;
        let lang_id = if lang.is_null() {
            0
        } else {
            ck.languages.id(c_str(lang, "lang")?)?
        };
        let len = n_frames
            .checked_mul(dim)
            .ok_or_else(|| Error::Argument("frame buffer size overflows".into()))?;
        if len == 0 {
            return Err(Error::EmptyInput("no frames".into()).into());
        }
        let data = std::slice::from_raw_parts(frames, len);
        let units = data
            .chunks_exact(dim)
            .map(|row| UnitVector::normalize(&row.iter().map(|&x| f64::from(x)).collect::<Vec<_>>()))
            .collect::<multicap::Result<Vec<_>>>()?;
        let feature = pool_frames(&units)?;
        let prompts = retrieve_prompts(&feature, &ck.bank, ck.k_prompts)?;
        let c = if beam_size == 0 {
            caption_greedy_with(&feature, prompts, lang_id, &ck.params, max_len)?
        } else {
            let decode = DecodeConfig {
                beam_size,
                max_len,
                ..DecodeConfig::default()
            };
            caption_with(&feature, prompts, lang_id, &ck.params, &decode)?
        };
        *caption = into_c_string(ck.vocab.decode(&c.tokens).join(" "));
        Ok(())
    })
}

/// Scores `n_items` candidates. `references` holds the references of every
/// item back to back; `ref_counts[i]` says how many belong to item `i`.
///
/// # Safety
/// `candidates` and `ref_counts` must point to `n_items` entries,
/// `references` to their sum, and every string must be nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn mc_evaluate(
    candidates: *const *const c_char,
    n_items: usize,
    references: *const *const c_char,
    ref_counts: *const usize,
    out: *mut McScores,
) -> McStatus {
    guard(|| {
        non_null(out, "out")?;
        non_null(candidates, "candidates")?;
        non_null(ref_counts, "ref_counts")?;
        let cands = std::slice::from_raw_parts(candidates, n_items);
        let counts = std::slice::from_raw_parts(ref_counts, n_items);
        let total = counts
            .iter()
            .try_fold(0usize, |a, &c| a.checked_add(c))
            .ok_or_else(|| Error::Argument("reference count overflows".into()))?;
        if total > 0 {
            non_null(references, "references")?;
        }
        let refs: &[*const c_char] = if total == 0 {
            &[]
        } else {
            std::slice::from_raw_parts(references, total)
        };
        let mut items = Vec::with_capacity(n_items);
        let mut at = 0;
        for (i, (&c, &n)) in cands.iter().zip(counts).enumerate() {
            let r = refs[at..at + n]
                .iter()
                .map(|&p| c_str(p, "reference"))
                .collect::<Result<Vec<_>, _>>()?;
            at += n;
            items.push((
                i.to_string(),
                c_str(c, "candidate")?.to_string(),
                r.into_iter().map(String::from).collect(),
            ));
        }
        let report = evaluate(&EvalCorpus::from_text(items)?);
        *out = McScores {
            bleu4: report.bleu4,
            rouge_l: report.rouge_l,
            cider: report.cider,
        };
        Ok(())
    })
}

/// Runs the command-line tool in-process with `argc` arguments (the first
/// being the program name) and returns its exit code.
///
/// # Safety
/// `argv` must point to `argc` nul-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn mc_run_cli(argc: usize, argv: *const *const c_char) -> i32 {
    let mut code = 0;
    let status = guard(|| {
        non_null(argv, "argv")?;
        let args = std::slice::from_raw_parts(argv, argc)
            .iter()
            .map(|&p| c_str(p, "argument").map(String::from))
            .collect::<Result<Vec<_>, _>>()?;
        code = multicap::cli::run(args, &mut std::io::stdout(), &mut std::io::stderr());
        Ok(())
    });
    if status == McStatus::Ok {
        code
    } else {
        status as i32
    }
}
