//! C ABI over `interleave-core`.
//!
//! Every fallible call returns an [`IlStatus`]; on failure the message is
//! kept per thread and read back with [`il_last_error`]. Objects are opaque
//! handles released by their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ndarray::{Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use interleave_core::backbone::Backbone;
use interleave_core::codec::{Codec, CodecConfig, VisionTokens};
use interleave_core::flow::{sample, ModelField, SampleRequest};
use interleave_core::harness::{Checkpoint, RunConfig};
use interleave_core::layout::Segment;
use interleave_core::packing::{bin_lower_bound, ffd_bins};
use interleave_core::synth::{encode_words, from_signed, parse_instruction, render_prompt};
use interleave_core::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IlStatus {
    Ok = 0,
    NullArgument = 1,
    Dimension = 2,
    Input = 3,
    Config = 4,
    Contract = 5,
    Checkpoint = 6,
    Io = 7,
    Format = 8,
    /// Output buffer too small; the required size has been written.
    BufferTooSmall = 9,
    Panic = 10,
}

impl From<&Error> for IlStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Dimension(_) => IlStatus::Dimension,
            Error::Input(_) => IlStatus::Input,
            Error::Config(_) => IlStatus::Config,
            Error::Contract(_) => IlStatus::Contract,
            Error::Checkpoint(_) => IlStatus::Checkpoint,
            Error::Io { .. } => IlStatus::Io,
            Error::Format(_) => IlStatus::Format,
        }
    }
}

/// Space-to-channel codec with its tokenizer.
pub struct IlCodec {
    codec: Codec,
}

/// A trained model loaded from a checkpoint.
pub struct IlModel {
    cfg: RunConfig,
    codec: Codec,
    backbone: Backbone,
    ck: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

enum Failure {
    Core(Error),
    Status(IlStatus, String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn null(name: &str) -> Failure {
    Failure::Status(IlStatus::NullArgument, format!("{name} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> IlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            IlStatus::Ok
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            IlStatus::from(&e)
        }
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            IlStatus::Panic
        }
    }
}

unsafe fn c_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Status(IlStatus::Input, format!("{name} is not UTF-8")))
}

unsafe fn write_out<T>(out: *mut T, value: T, name: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(name));
    }
    out.write(value);
    Ok(())
}

/// Copy `data` into a caller buffer of `cap` elements, reporting the needed
/// length through `out_len` either way.
unsafe fn fill<T: Copy>(data: &[T], buf: *mut T, cap: usize, out_len: *mut usize) -> Result<(), Failure> {
    write_out(out_len, data.len(), "out_len")?;
    if data.len() > cap {
        return Err(Failure::Status(
            IlStatus::BufferTooSmall,
            format!("buffer holds {cap} elements, {} needed", data.len()),
        ));
    }
    if buf.is_null() {
        return Err(null("buffer"));
    }
    ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn il_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn il_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn il_codec_new(r_t: usize, r_h: usize, r_w: usize, mix_seed: u64, out: *mut *mut IlCodec) -> IlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let codec = Codec::new(CodecConfig { r_t, r_h, r_w, mix_seed })?;
        out.write(Box::into_raw(Box::new(IlCodec { codec })));
        Ok(())
    })
}

/// # Safety
/// `codec` must come from [`il_codec_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn il_codec_free(codec: *mut IlCodec) {
    if !codec.is_null() {
        drop(Box::from_raw(codec));
    }
}

/// Channels per vision token.
///
/// # Safety
/// `codec` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn il_codec_token_width(codec: *const IlCodec) -> usize {
    codec.as_ref().map_or(0, |c| c.codec.config().c_vision())
}

/// Token grid `(t, h, w)` of a clip of `frames × height × width` pixels.
///
/// # Safety
/// `codec` must be a live handle; `grid` must hold three elements.
#[no_mangle]
pub unsafe extern "C" fn il_codec_token_grid(
    codec: *const IlCodec,
    frames: usize,
    height: usize,
    width: usize,
    grid: *mut usize,
) -> IlStatus {
    guard(|| {
        let c = codec.as_ref().ok_or_else(|| null("codec"))?;
        if grid.is_null() {
            return Err(null("grid"));
        }
        let (t, h, w) = c.codec.config().token_grid(frames, height, width)?;
        ptr::copy_nonoverlapping([t, h, w].as_ptr(), grid, 3);
        Ok(())
    })
}

/// Tokenize `frames × height × width × 3` pixels (row-major, in [-1, 1])
/// into row-major tokens.
///
/// # Safety
/// `pixels` must hold `frames*height*width*3` floats; `tokens` must hold
/// `cap` floats; `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn il_codec_tokenize(
    codec: *const IlCodec,
    pixels: *const f32,
    frames: usize,
    height: usize,
    width: usize,
    tokens: *mut f32,
    cap: usize,
    out_len: *mut usize,
) -> IlStatus {
    guard(|| {
        let c = codec.as_ref().ok_or_else(|| null("codec"))?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        let n = frames * height * width * 3;
        let px = std::slice::from_raw_parts(pixels, n).to_vec();
        let px = Array4::from_shape_vec((frames, height, width, 3), px).map_err(|e| Error::Dimension(e.to_string()))?;
        let tok = c.codec.tokenize(&px)?;
        fill(tok.tokens.as_standard_layout().as_slice().expect("standard layout"), tokens, cap, out_len)
    })
}

/// Inverse of [`il_codec_tokenize`] for a token grid `(t, h, w)`.
///
/// # Safety
/// `tokens` must hold `t*h*w*token_width` floats; `pixels` must hold `cap`
/// floats; `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn il_codec_detokenize(
    codec: *const IlCodec,
    tokens: *const f32,
    t: usize,
    h: usize,
    w: usize,
    pixels: *mut f32,
    cap: usize,
    out_len: *mut usize,
) -> IlStatus {
    guard(|| {
        let c = codec.as_ref().ok_or_else(|| null("codec"))?;
        if tokens.is_null() {
            return Err(null("tokens"));
        }
        let width = c.codec.config().c_vision();
        let data = std::slice::from_raw_parts(tokens, t * h * w * width).to_vec();
        let arr = Array2::from_shape_vec((t * h * w, width), data).map_err(|e| Error::Dimension(e.to_string()))?;
        let px = c.codec.detokenize(&VisionTokens::new(arr, (t, h, w))?)?;
        fill(px.as_standard_layout().as_slice().expect("standard layout"), pixels, cap, out_len)
    })
}

/// First-fit-decreasing packing: writes the bin of each document to
/// `bins[i]` and the bin count to `out_bins`.
///
/// # Safety
/// `lengths` and `bins` must each hold `n` elements.
#[no_mangle]
pub unsafe extern "C" fn il_pack(
    lengths: *const usize,
    n: usize,
    budget: usize,
    bins: *mut usize,
    out_bins: *mut usize,
) -> IlStatus {
    guard(|| {
        if n > 0 && (lengths.is_null() || bins.is_null()) {
            return Err(null("lengths or bins"));
        }
        let lens = if n == 0 { &[][..] } else { std::slice::from_raw_parts(lengths, n) };
        let packed = ffd_bins(lens, budget)?;
        for (b, docs) in packed.iter().enumerate() {
            for &d in docs {
                bins.add(d).write(b);
            }
        }
        write_out(out_bins, packed.len(), "out_bins")
    })
}

/// Lower bound on the bins any packing of `lengths` needs.
///
/// # Safety
/// `lengths` must hold `n` elements.
#[no_mangle]
pub unsafe extern "C" fn il_pack_lower_bound(lengths: *const usize, n: usize, budget: usize) -> usize {
    if n == 0 || lengths.is_null() {
        return 0;
    }
    bin_lower_bound(std::slice::from_raw_parts(lengths, n), budget)
}

/// Load a checkpoint written by `interleave train`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn il_model_load(path: *const c_char, out: *mut *mut IlModel) -> IlStatus {
    guard(|| {
        let path = c_str(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = Checkpoint::load(Path::new(path))?;
        let cfg = ck.config.clone();
        let model = IlModel {
            codec: Codec::new(cfg.codec)?,
            backbone: Backbone::new(cfg.model_config()?)?,
            cfg,
            ck,
        };
        out.write(Box::into_raw(Box::new(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`il_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn il_model_free(model: *mut IlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Training step count stored in the checkpoint.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn il_model_step(model: *const IlModel) -> u64 {
    model.as_ref().map_or(0, |m| m.ck.opt.step)
}

/// Generate from a prompt such as `"red square left"` and write the clip as
/// `frames × height × width × 3` floats in [0, 1]. `steps` of 0 and a
/// negative `cfg_scale` keep the checkpoint's sampler settings.
///
/// # Safety
/// `prompt` must be NUL-terminated; `pixels` must hold `cap` floats; `shape`
/// must hold four elements; `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn il_model_sample_prompt(
    model: *const IlModel,
    prompt: *const c_char,
    seed: u64,
    steps: usize,
    cfg_scale: f64,
    pixels: *mut f32,
    cap: usize,
    shape: *mut usize,
    out_len: *mut usize,
) -> IlStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let prompt = c_str(prompt, "prompt")?;
        if shape.is_null() {
            return Err(null("shape"));
        }
        let ids = encode_words(prompt)?;
        let scene = render_prompt(&parse_instruction(&ids)?, &m.cfg.synth)?;
        let req = SampleRequest {
            context: vec![Segment::text(ids)],
            target_grid: m.codec.config().token_grid(scene.frames, scene.height, scene.width)?,
        };
        let mut sampler = m.cfg.sampler;
        if steps > 0 {
            sampler.steps = steps;
        }
        if cfg_scale >= 0.0 {
            sampler.cfg_scale = cfg_scale;
        }
        let field = ModelField {
            backbone: &m.backbone,
            params: &m.ck.params,
            layout: m.cfg.layout(),
        };
        let tokens = sample(&field, &req, &sampler, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let px = from_signed(&m.codec.detokenize(&tokens)?);
        let (t, h, w, c) = px.dim();
        ptr::copy_nonoverlapping([t, h, w, c].as_ptr(), shape, 4);
        fill(px.as_standard_layout().as_slice().expect("standard layout"), pixels, cap, out_len)
    })
}
