//! C ABI over the `bdrfsq` quantizer.
//!
//! Every function returns a [`BdrfsqStatus`]. On failure a message is kept
//! per thread and can be copied out with [`bdrfsq_last_error`]. Models are
//! opaque handles created by a load or init call and released with
//! [`bdrfsq_model_free`]. Buffers are frame-major.
//!
//! # Safety
//!
//! Pointer arguments must be null or valid for the stated length. A model
//! handle must come from this library and must not be used after it is freed.
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use bdrfsq::bitstream::bitrate;
use bdrfsq::feature_io::FeatureMatrix;
use bdrfsq::param_file::{load_params, params_from_json};
use bdrfsq::quantizer::{decode_indices, encode, init_params, EncodeOptions};
use bdrfsq::{Error, QuantizerConfig, QuantizerParams, Rng, TokenGrid};

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BdrfsqStatus {
    Ok = 0,
    NullPointer = 1,
    /// Bad shape, configuration or stage count.
    InvalidArgument = 2,
    /// Output buffer shorter than required.
    BufferTooSmall = 3,
    Io = 4,
    /// Malformed parameter file or container.
    Format = 5,
    /// Token or code outside its grid.
    OutOfRange = 6,
    NonFinite = 7,
    Internal = 8,
}

/// Opaque model: configuration plus parameters.
pub struct BdrfsqModel {
    config: QuantizerConfig,
    params: QuantizerParams,
}

/// Dimensions of a loaded model.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct BdrfsqModelInfo {
    pub stages: u32,
    pub emotion_input_dim: u32,
    pub acoustic_input_dim: u32,
    /// Width of decoded frames.
    pub latent_dim: u32,
    pub fsq_dim: u32,
    pub codes_per_stage: u32,
    pub frame_rate_hz: u32,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> BdrfsqStatus {
    match e {
        Error::Io { .. } => BdrfsqStatus::Io,
        Error::OutOfRange { .. } => BdrfsqStatus::OutOfRange,
        Error::NonFinite(_) => BdrfsqStatus::NonFinite,
        Error::BadMagic { .. }
        | Error::UnsupportedVersion(_)
        | Error::Truncated { .. }
        | Error::PayloadMismatch { .. }
        | Error::ParamFile(_)
        | Error::Csv(_) => BdrfsqStatus::Format,
        e if e.is_validation() => BdrfsqStatus::InvalidArgument,
        _ => BdrfsqStatus::Internal,
    }
}

struct Fail(BdrfsqStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(BdrfsqStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> BdrfsqStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            BdrfsqStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            BdrfsqStatus::Internal
        }
    }
}

unsafe fn model_ref<'a>(m: *const BdrfsqModel) -> Result<&'a BdrfsqModel, Fail> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn c_str<'a>(s: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| Fail(BdrfsqStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn check_len(what: &str, have: usize, need: usize) -> Result<(), Fail> {
    if have < need {
        return Err(Fail(BdrfsqStatus::BufferTooSmall, format!("{what} holds {have} values, need {need}")));
    }
    Ok(())
}

fn frames_times(frames: usize, width: usize, what: &str) -> Result<usize, Fail> {
    frames
        .checked_mul(width)
        .ok_or_else(|| Fail(BdrfsqStatus::InvalidArgument, format!("{what} size overflows")))
}

unsafe fn store(out: *mut *mut BdrfsqModel, model: BdrfsqModel) {
    *out = Box::into_raw(Box::new(model));
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length without the NUL.
#[no_mangle]
pub unsafe extern "C" fn bdrfsq_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a JSON parameter file.
#[no_mangle]
pub unsafe extern "C" fn bdrfsq_model_load(path: *const c_char, out: *mut *mut BdrfsqModel) -> BdrfsqStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (config, params) = load_params(c_str(path, "path")?)?;
        store(out, BdrfsqModel { config, params });
        Ok(())
    })
}

/// Parses a JSON parameter document held in memory.
#[no_mangle]
pub unsafe extern "C" fn bdrfsq_model_from_json(json: *const c_char, out: *mut *mut BdrfsqModel) -> BdrfsqStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (config, params) = params_from_json(c_str(json, "json")?)?;
        store(out, BdrfsqModel { config, params });
        Ok(())
    })
}

/// Fresh parameters for the default configuration (K=8, 256+768 latent,
/// 3+6 FSQ dims) with the given input feature widths.
#[no_mangle]
pub unsafe extern "C" fn bdrfsq_model_init_default(
    seed: u64,
    emotion_input_dim: u32,
    acoustic_input_dim: u32,
    out: *mut *mut BdrfsqModel,
) -> BdrfsqStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let config = QuantizerConfig::standard();
        let params = init_params(
            &config,
            &mut Rng::new(seed),
            (emotion_input_dim as usize, acoustic_input_dim as usize),
        )?;
        store(out, BdrfsqModel { config, params });
        Ok(())
    })
}

/// Releases a model. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn bdrfsq_model_free(model: *mut BdrfsqModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

#[no_mangle]
pub unsafe extern "C" fn bdrfsq_model_info(model: *const BdrfsqModel, info: *mut BdrfsqModelInfo) -> BdrfsqStatus {
    guard(|| {
        let m = model_ref(model)?;
        let info = info.as_mut().ok_or_else(|| null("info"))?;
        let (de, da) = m.params.input_dims();
        *info = BdrfsqModelInfo {
            stages: m.config.stages() as u32,
            emotion_input_dim: de as u32,
            acoustic_input_dim: da as u32,
            latent_dim: m.config.latent_dim() as u32,
            fsq_dim: m.config.fsq_dim() as u32,
            codes_per_stage: m.config.levels().codes_per_stage() as u32,
            frame_rate_hz: u32::from(m.config.frame_rate_hz()),
        };
        Ok(())
    })
}

/// Encodes `frames` frames of emotion and acoustic features into
/// `frames × stages` tokens. `stages` 0 means all stages.
#[no_mangle]
pub unsafe extern "C" fn bdrfsq_encode(
    model: *const BdrfsqModel,
    emotion: *const f32,
    acoustic: *const f32,
    frames: usize,
    stages: u32,
    tokens: *mut u16,
    tokens_len: usize,
) -> BdrfsqStatus {
    guard(|| {
        let m = model_ref(model)?;
        let (de, da) = m.params.input_dims();
        let active = if stages == 0 { m.config.stages() } else { stages as usize };
        m.config.check_active(active)?;
        let need = frames_times(frames, active, "token buffer")?;
        check_len("token buffer", tokens_len, need)?;
        let widen = |p: *const f32, dim: usize, what: &str| -> Result<FeatureMatrix, Fail> {
            let data = slice(p, frames_times(frames, dim, what)?, what)?;
            Ok(FeatureMatrix::new(frames, dim, data.iter().map(|&v| f64::from(v)).collect())?)
        };
        let e = widen(emotion, de, "emotion")?;
        let a = widen(acoustic, da, "acoustic")?;
        let result = encode(&e, &a, &m.params, &m.config, &EncodeOptions::stages(active))?;
        let out = slice_mut(tokens, need, "tokens")?;
        for (dst, &t) in out.iter_mut().zip(result.tokens.as_slice()) {
            *dst = u16::try_from(t).map_err(|_| Fail(BdrfsqStatus::OutOfRange, format!("token {t} exceeds u16")))?;
        }
        Ok(())
    })
}

/// Decodes `frames × stages` tokens into `frames × latent_dim` values.
/// Any stage count from 1 to K is accepted.
#[no_mangle]
pub unsafe extern "C" fn bdrfsq_decode(
    model: *const BdrfsqModel,
    tokens: *const u16,
    frames: usize,
    stages: u32,
    out: *mut f32,
    out_len: usize,
) -> BdrfsqStatus {
    guard(|| {
        let m = model_ref(model)?;
        m.config.check_active(stages as usize)?;
        let need = frames_times(frames, m.config.latent_dim(), "output buffer")?;
        check_len("output buffer", out_len, need)?;
        let src = slice(tokens, frames_times(frames, stages as usize, "tokens")?, "tokens")?;
        let grid = TokenGrid::new(frames, stages as usize, src.iter().map(|&t| u32::from(t)).collect())?;
        let latent = decode_indices(&grid, &m.params, &m.config)?;
        let dst = slice_mut(out, need, "out")?;
        for (d, &v) in dst.iter_mut().zip(latent.as_slice()) {
            *d = v as f32;
        }
        Ok(())
    })
}

/// Bits per second when transmitting the first `stages` stages.
#[no_mangle]
pub unsafe extern "C" fn bdrfsq_bitrate(model: *const BdrfsqModel, stages: u32, bps: *mut f64) -> BdrfsqStatus {
    guard(|| {
        let m = model_ref(model)?;
        let dst = bps.as_mut().ok_or_else(|| null("bps"))?;
        *dst = bitrate(&m.config, stages as usize)?.total_bps;
        Ok(())
    })
}

/// Packs one per-dimension code vector (length `fsq_dim`) into a stage token.
#[no_mangle]
pub unsafe extern "C" fn bdrfsq_pack(
    model: *const BdrfsqModel,
    codes: *const u32,
    codes_len: usize,
    token: *mut u32,
) -> BdrfsqStatus {
    guard(|| {
        let m = model_ref(model)?;
        let dst = token.as_mut().ok_or_else(|| null("token"))?;
        *dst = m.config.levels().pack_index(slice(codes, codes_len, "codes")?)?;
        Ok(())
    })
}

/// Splits a stage token into `fsq_dim` per-dimension codes.
#[no_mangle]
pub unsafe extern "C" fn bdrfsq_unpack(
    model: *const BdrfsqModel,
    token: u32,
    codes: *mut u32,
    codes_len: usize,
) -> BdrfsqStatus {
    guard(|| {
        let m = model_ref(model)?;
        let levels = m.config.levels();
        check_len("code buffer", codes_len, levels.dims())?;
        let values = levels.unpack_index(token)?;
        slice_mut(codes, values.len(), "codes")?.copy_from_slice(&values);
        Ok(())
    })
}
