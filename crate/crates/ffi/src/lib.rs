//! C ABI over the promptsmith pipeline.
//!
//! Gateways and images are opaque handles freed with their `_free`
//! function. Functions return a `PsStatus`; on failure the message is
//! available from `ps_last_error()` on the same thread. Structured results
//! are JSON strings owned by the caller and released with `ps_string_free`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use promptsmith::edit::{build_edited_prompt, classify_level};
use promptsmith::gateway::mock::{mock_gateway, synthetic_image};
use promptsmith::gateway::{remote, Gateway};
use promptsmith::image::Image;
use promptsmith::injector::{inject, InjectConfig};
use promptsmith::optimizer::{optimize, OptimizerConfig};
use promptsmith::token_filter::{filter, protect_words};
use promptsmith::types::{split_words, AttributePair, PromptLevel};
use promptsmith::Error;

/// Opaque model gateway.
pub struct PsGateway(Gateway);

/// Opaque RGB image.
pub struct PsImage(Image);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Contract = 3,
    Vocabulary = 4,
    NoMatch = 5,
    Capability = 6,
    Config = 7,
    Gateway = 8,
    Backend = 9,
    Numeric = 10,
    Io = 11,
    NotFound = 12,
    Busy = 13,
    Panic = 14,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsPromptLevel {
    OneNoun = 0,
    FullNouns = 1,
    FullDescription = 2,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(PsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Contract(_) => PsStatus::Contract,
            Error::Vocabulary { .. } => PsStatus::Vocabulary,
            Error::NoMatch { .. } => PsStatus::NoMatch,
            Error::Capability(_) => PsStatus::Capability,
            Error::Config(_) => PsStatus::Config,
            Error::Gateway(_) => PsStatus::Gateway,
            Error::Backend { .. } => PsStatus::Backend,
            Error::Numeric(_) => PsStatus::Numeric,
            Error::NotFound(_) => PsStatus::NotFound,
            Error::Busy { .. } => PsStatus::Busy,
            Error::Io(_) | Error::Json(_) | Error::Image(_) => PsStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure(PsStatus::Config, e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn guard(f: impl FnOnce() -> Outcome) -> PsStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PsStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            PsStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(PsStatus::NullArgument, format!("`{name}` is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(PsStatus::InvalidUtf8, format!("`{name}` is not UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, name).map(Some)
    }
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(PsStatus::NullArgument, format!("`{name}` is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure(PsStatus::NullArgument, format!("`{name}` is null")))
}

fn to_c(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("interior nul removed").into_raw()
}

unsafe fn write_json(out: *mut *mut c_char, v: &impl serde::Serialize) -> Outcome {
    let slot = out_ptr(out, "out_json")?;
    *slot = to_c(serde_json::to_string(v)?);
    Ok(())
}

fn attr_words(s: &str) -> Result<Vec<String>, Failure> {
    let w = split_words(s);
    if w.is_empty() {
        return Err(Failure(PsStatus::Contract, "source attribute is empty".into()));
    }
    Ok(w)
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn ps_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version, a static string.
#[no_mangle]
pub extern "C" fn ps_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn ps_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Deterministic offline gateway.
#[no_mangle]
pub unsafe extern "C" fn ps_gateway_new_mock(seed: u64, out: *mut *mut PsGateway) -> PsStatus {
    guard(|| {
        let slot = out_ptr(out, "out")?;
        *slot = Box::into_raw(Box::new(PsGateway(mock_gateway(seed))));
        Ok(())
    })
}

/// Gateway backed by a model server at `base_url`.
#[no_mangle]
pub unsafe extern "C" fn ps_gateway_connect(base_url: *const c_char, out: *mut *mut PsGateway) -> PsStatus {
    guard(|| {
        let url = str_arg(base_url, "base_url")?;
        let slot = out_ptr(out, "out")?;
        *slot = Box::into_raw(Box::new(PsGateway(remote::connect(url, "remote")?)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ps_gateway_free(gw: *mut PsGateway) {
    if !gw.is_null() {
        drop(Box::from_raw(gw));
    }
}

/// Loads a PNG (or any format the image decoder knows) from `path`.
#[no_mangle]
pub unsafe extern "C" fn ps_image_load(path: *const c_char, out: *mut *mut PsImage) -> PsStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let slot = out_ptr(out, "out")?;
        *slot = Box::into_raw(Box::new(PsImage(Image::load(path)?)));
        Ok(())
    })
}

/// Decodes PNG bytes.
#[no_mangle]
pub unsafe extern "C" fn ps_image_from_png(data: *const u8, len: usize, out: *mut *mut PsImage) -> PsStatus {
    guard(|| {
        if data.is_null() {
            return Err(Failure(PsStatus::NullArgument, "`data` is null".into()));
        }
        let bytes = std::slice::from_raw_parts(data, len);
        let slot = out_ptr(out, "out")?;
        *slot = Box::into_raw(Box::new(PsImage(Image::from_png_bytes(bytes)?)));
        Ok(())
    })
}

/// Seeded synthetic test image.
#[no_mangle]
pub unsafe extern "C" fn ps_image_synthetic(seed: u64, width: u32, height: u32, out: *mut *mut PsImage) -> PsStatus {
    guard(|| {
        if width == 0 || height == 0 {
            return Err(Failure(PsStatus::Contract, "image dimensions must be positive".into()));
        }
        let slot = out_ptr(out, "out")?;
        *slot = Box::into_raw(Box::new(PsImage(synthetic_image(seed, width, height))));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ps_image_size(img: *const PsImage, width: *mut u32, height: *mut u32) -> PsStatus {
    guard(|| {
        let img = handle(img, "img")?;
        *out_ptr(width, "width")? = img.0.width();
        *out_ptr(height, "height")? = img.0.height();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn ps_image_free(img: *mut PsImage) {
    if !img.is_null() {
        drop(Box::from_raw(img));
    }
}

/// Caption of at most `max_tokens` tokens, as a Prompt JSON object.
#[no_mangle]
pub unsafe extern "C" fn ps_caption(
    gw: *const PsGateway,
    img: *const PsImage,
    max_tokens: usize,
    out_json: *mut *mut c_char,
) -> PsStatus {
    guard(|| {
        let (gw, img) = (handle(gw, "gw")?, handle(img, "img")?);
        write_json(out_json, &gw.0.captioner.generate(&img.0, max_tokens)?)
    })
}

/// Injects `source_attr` into the image caption. `config_json` is an
/// optional InjectConfig object (NULL for defaults). Writes the
/// InjectionReport as JSON.
#[no_mangle]
pub unsafe extern "C" fn ps_inject(
    gw: *const PsGateway,
    img: *const PsImage,
    source_attr: *const c_char,
    config_json: *const c_char,
    out_json: *mut *mut c_char,
) -> PsStatus {
    guard(|| {
        let (gw, img) = (handle(gw, "gw")?, handle(img, "img")?);
        let attr = attr_words(str_arg(source_attr, "source_attr")?)?;
        let cfg: InjectConfig = match opt_str_arg(config_json, "config_json")? {
            Some(s) => serde_json::from_str(s)?,
            None => InjectConfig::default(),
        };
        write_json(out_json, &inject(&img.0, &attr, &gw.0, &cfg)?)
    })
}

/// Hard-prompt optimization. `config_json` is an optional OptimizerConfig
/// object. Writes the OptimizeOutcome, trace included, as JSON.
#[no_mangle]
pub unsafe extern "C" fn ps_optimize(
    gw: *const PsGateway,
    img: *const PsImage,
    source_attr: *const c_char,
    config_json: *const c_char,
    out_json: *mut *mut c_char,
) -> PsStatus {
    guard(|| {
        let (gw, img) = (handle(gw, "gw")?, handle(img, "img")?);
        let attr = attr_words(str_arg(source_attr, "source_attr")?)?;
        let cfg: OptimizerConfig = match opt_str_arg(config_json, "config_json")? {
            Some(s) => serde_json::from_str(s)?,
            None => OptimizerConfig::default(),
        };
        let outcome = optimize(&img.0, &attr, &cfg, &gw.0).map_err(Error::from)?;
        write_json(out_json, &outcome)
    })
}

/// Removes redundant words from `prompt`. Words of `protect` (may be NULL)
/// are never removed. Writes the FilterOutcome as JSON.
#[no_mangle]
pub unsafe extern "C" fn ps_filter(
    gw: *const PsGateway,
    img: *const PsImage,
    prompt: *const c_char,
    protect: *const c_char,
    out_json: *mut *mut c_char,
) -> PsStatus {
    guard(|| {
        let (gw, img) = (handle(gw, "gw")?, handle(img, "img")?);
        let p = gw.0.encoder.tokenizer().tokenize(str_arg(prompt, "prompt")?)?;
        let protected: BTreeSet<usize> = match opt_str_arg(protect, "protect")? {
            Some(words) => protect_words(&p, &split_words(words)),
            None => BTreeSet::new(),
        };
        write_json(out_json, &filter(&p, &img.0, &gw.0, &protected)?)
    })
}

/// CLIP score (100 × cosine) of `text` against the image.
#[no_mangle]
pub unsafe extern "C" fn ps_clip_score(
    gw: *const PsGateway,
    img: *const PsImage,
    text: *const c_char,
    out: *mut f64,
) -> PsStatus {
    guard(|| {
        let (gw, img) = (handle(gw, "gw")?, handle(img, "img")?);
        let text = str_arg(text, "text")?;
        let slot = out_ptr(out, "out")?;
        let image_emb = gw.0.encoder.encode_image(&img.0)?;
        *slot = gw.0.score_text(text, &image_emb)?;
        Ok(())
    })
}

/// `prompt` with every occurrence of `source` replaced by `target`.
#[no_mangle]
pub unsafe extern "C" fn ps_edited_prompt(
    gw: *const PsGateway,
    prompt: *const c_char,
    source: *const c_char,
    target: *const c_char,
    out: *mut *mut c_char,
) -> PsStatus {
    guard(|| {
        let gw = handle(gw, "gw")?;
        let pair = AttributePair::new(str_arg(source, "source")?, str_arg(target, "target")?)?;
        let tok = gw.0.encoder.tokenizer();
        let p = tok.tokenize(str_arg(prompt, "prompt")?)?;
        let edited = build_edited_prompt(&p, &pair, tok)?;
        *out_ptr(out, "out")? = to_c(edited.text);
        Ok(())
    })
}

/// Prompt level of `prompt` for the given attribute pair.
#[no_mangle]
pub unsafe extern "C" fn ps_classify_level(
    prompt: *const c_char,
    source: *const c_char,
    target: *const c_char,
    out: *mut PsPromptLevel,
) -> PsStatus {
    guard(|| {
        let pair = AttributePair::new(str_arg(source, "source")?, str_arg(target, "target")?)?;
        let level = classify_level(str_arg(prompt, "prompt")?, &pair);
        *out_ptr(out, "out")? = match level {
            PromptLevel::OneNoun => PsPromptLevel::OneNoun,
            PromptLevel::FullNouns => PsPromptLevel::FullNouns,
            PromptLevel::FullDescription => PsPromptLevel::FullDescription,
        };
        Ok(())
    })
}
