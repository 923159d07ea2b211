//! C interface to the cpcvar library.
//!
//! Every call returns a [`CpcStatus`]. On failure a message is kept per
//! thread and can be read with [`cpc_last_error`]. Objects live behind
//! opaque handles that the caller releases with the matching `*_free`.
//! Output buffers follow one rule: the required length is always written
//! to `*out_len`, and the call fails with `CPC_STATUS_BUFFER_TOO_SMALL` when
//! `capacity` is short.
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use cpcvar::composer::{compose_sample, CompositionSpec};
use cpcvar::gcns::{select_mask, TaskLedger};
use cpcvar::model::{SampleConfig, VarModel};
use cpcvar::tokenizer::{TokenPyramid, Tokenizer};
use cpcvar::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CpcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    BufferTooSmall = 3,
    Config = 4,
    InvalidArgument = 5,
    Shape = 6,
    Numeric = 7,
    Artifact = 8,
    State = 9,
    UnknownToken = 10,
    Io = 11,
    Panic = 12,
}

impl From<&Error> for CpcStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) | Error::Json(_) => CpcStatus::Config,
            Error::InvalidArgument(_) => CpcStatus::InvalidArgument,
            Error::Shape { .. } => CpcStatus::Shape,
            Error::Numeric { .. } | Error::NonDeterministic(_) => CpcStatus::Numeric,
            Error::Artifact(_) => CpcStatus::Artifact,
            Error::State(_) => CpcStatus::State,
            Error::UnknownToken(_) => CpcStatus::UnknownToken,
            Error::Io(_) => CpcStatus::Io,
        }
    }
}

/// Base model plus any registered concept tokens.
pub struct CpcModel(VarModel);
pub struct CpcTokenizer(Tokenizer);
pub struct CpcLedger(TaskLedger);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(CpcStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(CpcStatus::from(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CpcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CpcStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside cpcvar".into());
            CpcStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(CpcStatus::NullPointer, format!("{what} is null")));
    }
    // SAFETY: caller passes a nul-terminated string that outlives the call.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Fail(CpcStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    // SAFETY: non-null handles come from this library and are still alive.
    unsafe { p.as_ref() }.ok_or_else(|| Fail(CpcStatus::NullPointer, format!("{what} is null")))
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    // SAFETY: as for `handle`, and the caller holds no other reference.
    unsafe { p.as_mut() }.ok_or_else(|| Fail(CpcStatus::NullPointer, format!("{what} is null")))
}

unsafe fn write_out<T>(out: *mut T, v: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail(CpcStatus::NullPointer, format!("{what} is null")));
    }
    // SAFETY: checked non-null; caller provides a writable slot.
    unsafe { out.write(v) };
    Ok(())
}

/// Copies `data` into `buf` after reporting its length.
unsafe fn fill<T: Copy>(data: &[T], buf: *mut T, capacity: usize, out_len: *mut usize) -> Result<(), Fail> {
    unsafe { write_out(out_len, data.len(), "out_len") }?;
    if capacity < data.len() {
        return Err(Fail(
            CpcStatus::BufferTooSmall,
            format!("buffer holds {capacity}, need {}", data.len()),
        ));
    }
    if !data.is_empty() {
        if buf.is_null() {
            return Err(Fail(CpcStatus::NullPointer, "buffer is null".into()));
        }
        // SAFETY: buf has room for `capacity >= data.len()` elements.
        unsafe { ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len()) };
    }
    Ok(())
}

/// Message of the last failed call on this thread, or null. Valid until
/// the next call on the same thread.
#[no_mangle]
pub extern "C" fn cpc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static, nul-terminated crate version.
#[no_mangle]
pub extern "C" fn cpc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub unsafe extern "C" fn cpc_model_load(path: *const c_char, out: *mut *mut CpcModel) -> CpcStatus {
    guard(|| {
        let p = unsafe { text(path, "path") }?;
        let m = VarModel::load(Path::new(p))?;
        unsafe { write_out(out, Box::into_raw(Box::new(CpcModel(m))), "out") }
    })
}

#[no_mangle]
pub unsafe extern "C" fn cpc_model_free(model: *mut CpcModel) {
    if !model.is_null() {
        // SAFETY: created by cpc_model_load and not freed before.
        drop(unsafe { Box::from_raw(model) });
    }
}

#[no_mangle]
pub unsafe extern "C" fn cpc_model_save(model: *const CpcModel, path: *const c_char, seed: u64) -> CpcStatus {
    guard(|| {
        let m = unsafe { handle(model, "model") }?;
        let p = unsafe { text(path, "path") }?;
        m.0.save(Path::new(p), seed)?;
        Ok(())
    })
}

/// Registers `<name>` with its row copied from `class_word`.
#[no_mangle]
pub unsafe extern "C" fn cpc_model_register_concept(
    model: *mut CpcModel,
    name: *const c_char,
    class_word: *const c_char,
    out_id: *mut usize,
) -> CpcStatus {
    guard(|| {
        let m = unsafe { handle_mut(model, "model") }?;
        let name = unsafe { text(name, "name") }?;
        let class_word = unsafe { text(class_word, "class_word") }?;
        let id = m.0.register_concept(name, class_word)?;
        unsafe { write_out(out_id, id, "out_id") }
    })
}

/// Number of cross-attention coordinates, the mask index space.
#[no_mangle]
pub unsafe extern "C" fn cpc_model_ca_len(model: *const CpcModel, out: *mut usize) -> CpcStatus {
    guard(|| {
        let m = unsafe { handle(model, "model") }?;
        unsafe { write_out(out, m.0.store.ca_indices().len(), "out") }
    })
}

/// Samples a token pyramid for `prompt`; `top_k` 0 keeps the whole
/// vocabulary. Writes the flat tokens in scale order.
#[no_mangle]
pub unsafe extern "C" fn cpc_model_sample(
    model: *const CpcModel,
    prompt: *const c_char,
    seed: u64,
    temperature: f64,
    top_k: usize,
    tokens: *mut usize,
    capacity: usize,
    out_len: *mut usize,
) -> CpcStatus {
    guard(|| {
        let m = unsafe { handle(model, "model") }?;
        let prompt = m.0.prompt(unsafe { text(prompt, "prompt") }?)?;
        let cfg = SampleConfig {
            temperature,
            top_k: (top_k > 0).then_some(top_k),
        };
        let pyr = m.0.sample(&prompt, &cfg, seed)?;
        unsafe { fill(&pyr.flat(), tokens, capacity, out_len) }
    })
}

/// Composition from a JSON spec; writes the flat tokens like
/// [`cpc_model_sample`].
#[no_mangle]
pub unsafe extern "C" fn cpc_model_compose(
    model: *const CpcModel,
    spec_json: *const c_char,
    temperature: f64,
    top_k: usize,
    tokens: *mut usize,
    capacity: usize,
    out_len: *mut usize,
) -> CpcStatus {
    guard(|| {
        let m = unsafe { handle(model, "model") }?;
        let spec = CompositionSpec::from_json(unsafe { text(spec_json, "spec_json") }?)?;
        let cfg = SampleConfig {
            temperature,
            top_k: (top_k > 0).then_some(top_k),
        };
        let out = compose_sample(&m.0, &spec, &cfg)?;
        unsafe { fill(&out.pyramid.flat(), tokens, capacity, out_len) }
    })
}

#[no_mangle]
pub unsafe extern "C" fn cpc_tokenizer_load(path: *const c_char, out: *mut *mut CpcTokenizer) -> CpcStatus {
    guard(|| {
        let p = unsafe { text(path, "path") }?;
        let t = Tokenizer::load(Path::new(p))?;
        unsafe { write_out(out, Box::into_raw(Box::new(CpcTokenizer(t))), "out") }
    })
}

#[no_mangle]
pub unsafe extern "C" fn cpc_tokenizer_free(tokenizer: *mut CpcTokenizer) {
    if !tokenizer.is_null() {
        // SAFETY: created by cpc_tokenizer_load and not freed before.
        drop(unsafe { Box::from_raw(tokenizer) });
    }
}

/// Decodes flat `tokens` laid out by `model`'s schedule into interleaved
/// RGB8 of `*out_height` x `*out_width` pixels.
#[no_mangle]
pub unsafe extern "C" fn cpc_tokenizer_decode(
    tokenizer: *const CpcTokenizer,
    model: *const CpcModel,
    tokens: *const usize,
    n_tokens: usize,
    rgb: *mut u8,
    capacity: usize,
    out_len: *mut usize,
    out_height: *mut usize,
    out_width: *mut usize,
) -> CpcStatus {
    guard(|| {
        let t = unsafe { handle(tokenizer, "tokenizer") }?;
        let m = unsafe { handle(model, "model") }?;
        if tokens.is_null() {
            return Err(Fail(CpcStatus::NullPointer, "tokens is null".into()));
        }
        // SAFETY: caller passes n_tokens readable elements.
        let flat = unsafe { std::slice::from_raw_parts(tokens, n_tokens) };
        let sched = &m.0.config.schedule;
        if flat.len() != sched.total_cells() {
            return Err(Fail(
                CpcStatus::Shape,
                format!("{} tokens for a schedule of {} cells", flat.len(), sched.total_cells()),
            ));
        }
        let mut pyr = TokenPyramid::empty(sched.finest());
        for (s, &scale) in sched.scales().iter().enumerate() {
            let off = sched.offset(s);
            pyr.push(scale, flat[off..off + sched.cells(s)].to_vec())?;
        }
        let img = t.0.detokenize(&pyr)?.clamped();
        unsafe { write_out(out_height, img.height, "out_height") }?;
        unsafe { write_out(out_width, img.width, "out_width") }?;
        unsafe { fill(&img.to_rgb8(), rgb, capacity, out_len) }
    })
}

#[no_mangle]
pub unsafe extern "C" fn cpc_ledger_load(path: *const c_char, out: *mut *mut CpcLedger) -> CpcStatus {
    guard(|| {
        let p = unsafe { text(path, "path") }?;
        let l = TaskLedger::load(Path::new(p))?;
        unsafe { write_out(out, Box::into_raw(Box::new(CpcLedger(l))), "out") }
    })
}

#[no_mangle]
pub unsafe extern "C" fn cpc_ledger_free(ledger: *mut CpcLedger) {
    if !ledger.is_null() {
        // SAFETY: created by cpc_ledger_load and not freed before.
        drop(unsafe { Box::from_raw(ledger) });
    }
}

/// Learned task count and popcount of the history mask.
#[no_mangle]
pub unsafe extern "C" fn cpc_ledger_summary(
    ledger: *const CpcLedger,
    out_tasks: *mut usize,
    out_history_popcount: *mut usize,
) -> CpcStatus {
    guard(|| {
        let l = unsafe { handle(ledger, "ledger") }?;
        unsafe { write_out(out_tasks, l.0.next_task_id() - 1, "out_tasks") }?;
        unsafe { write_out(out_history_popcount, l.0.history_mask().popcount(), "out_history_popcount") }
    })
}

/// Top-`p` percent of `|saliency|` as a packed little-endian bit mask of
/// `ceil(len / 8)` bytes.
#[no_mangle]
pub unsafe extern "C" fn cpc_select_mask(
    saliency: *const f64,
    len: usize,
    p: f64,
    bits: *mut u8,
    capacity: usize,
    out_len: *mut usize,
    out_popcount: *mut usize,
) -> CpcStatus {
    guard(|| {
        if saliency.is_null() && len > 0 {
            return Err(Fail(CpcStatus::NullPointer, "saliency is null".into()));
        }
        let g = if len == 0 {
            &[][..]
        } else {
            // SAFETY: caller passes len readable elements.
            unsafe { std::slice::from_raw_parts(saliency, len) }
        };
        let mask = select_mask(g, p, 1, None)?;
        unsafe { write_out(out_popcount, mask.popcount(), "out_popcount") }?;
        unsafe { fill(&mask.to_bytes(), bits, capacity, out_len) }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn errors_map_to_distinct_statuses() {
        let cases = [
            (Error::Config("x".into()), CpcStatus::Config),
            (Error::InvalidArgument("x".into()), CpcStatus::InvalidArgument),
            (Error::Artifact("x".into()), CpcStatus::Artifact),
            (Error::State("x".into()), CpcStatus::State),
            (Error::UnknownToken("<v1>".into()), CpcStatus::UnknownToken),
            (Error::NonDeterministic("x".into()), CpcStatus::Numeric),
        ];
        for (e, s) in cases {
            assert_eq!(CpcStatus::from(&e), s);
        }
    }

    #[test]
    fn panics_become_a_status() {
        let s = guard(|| panic!("boom"));
        assert_eq!(s, CpcStatus::Panic);
        assert!(!cpc_last_error().is_null());
        assert_eq!(guard(|| Ok(())), CpcStatus::Ok);
        assert!(cpc_last_error().is_null());
    }

    #[test]
    fn short_buffers_report_the_needed_length() {
        let mut len = 0;
        let mut buf = [0u8; 2];
        let r = unsafe { fill(&[1u8, 2, 3], buf.as_mut_ptr(), 2, &mut len) };
        assert!(matches!(r, Err(Fail(CpcStatus::BufferTooSmall, _))));
        assert_eq!(len, 3);
        assert!(unsafe { fill::<u8>(&[], ptr::null_mut(), 0, &mut len) }.is_ok());
        assert_eq!(len, 0);
    }
}
