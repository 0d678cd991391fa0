//! Token container and bitrate accounting.
//!
//! AFTK layout (little-endian): `"AFTK"` | version `u8` = 1 | stages `u8` |
//! f_e `u8` | f_a `u8` | levels `u8` × (f_e + f_a) | frame rate `u16` |
//! frames `u32` | frames × stages `u16` tokens, frame-major.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsq::{LevelSpec, Token};
use crate::quantizer::{QuantizerConfig, TokenGrid};

pub const AFTK_MAGIC: [u8; 4] = *b"AFTK";
pub const AFTK_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TokenStream {
    levels: LevelSpec,
    frame_rate_hz: u16,
    tokens: TokenGrid,
}

impl TokenStream {
    pub fn new(levels: LevelSpec, frame_rate_hz: u16, tokens: TokenGrid) -> Result<Self> {
        if tokens.stages() == 0 || tokens.stages() > usize::from(u8::MAX) {
            return Err(Error::OutOfRange {
                what: "stage count",
                value: tokens.stages() as u64,
                limit: u64::from(u8::MAX),
            });
        }
        if levels.emotion_dims() > usize::from(u8::MAX) || levels.acoustic_dims() > usize::from(u8::MAX) {
            return Err(Error::InvalidConfig("partition too wide for the token header".into()));
        }
        if let Some(&l) = levels.levels().iter().find(|&&l| l > u32::from(u8::MAX)) {
            return Err(Error::OutOfRange {
                what: "level count",
                value: u64::from(l),
                limit: u64::from(u8::MAX),
            });
        }
        if levels.codes_per_stage() > 1 << 16 {
            return Err(Error::InvalidConfig(format!(
                "{} codes per stage do not fit 16-bit tokens",
                levels.codes_per_stage()
            )));
        }
        if u32::try_from(tokens.frames()).is_err() {
            return Err(Error::OutOfRange {
                what: "frame count",
                value: tokens.frames() as u64,
                limit: u64::from(u32::MAX),
            });
        }
        for &t in tokens.as_slice() {
            levels.check_token(t)?;
        }
        Ok(Self {
            levels,
            frame_rate_hz,
            tokens,
        })
    }

    pub fn from_config(config: &QuantizerConfig, tokens: TokenGrid) -> Result<Self> {
        Self::new(config.levels().clone(), config.frame_rate_hz(), tokens)
    }

    pub fn levels(&self) -> &LevelSpec {
        &self.levels
    }
    pub fn frame_rate_hz(&self) -> u16 {
        self.frame_rate_hz
    }
    pub fn tokens(&self) -> &TokenGrid {
        &self.tokens
    }
    pub fn stages(&self) -> usize {
        self.tokens.stages()
    }
    pub fn frames(&self) -> usize {
        self.tokens.frames()
    }

    /// Keeps only the first `stages` token columns.
    pub fn truncate(&self, stages: usize) -> Result<Self> {
        Ok(Self {
            levels: self.levels.clone(),
            frame_rate_hz: self.frame_rate_hz,
            tokens: self.tokens.prefix(stages)?,
        })
    }
}

pub fn encode_token_bytes(ts: &TokenStream) -> Vec<u8> {
    let levels = ts.levels.levels();
    let mut out = Vec::with_capacity(14 + levels.len() + 2 * ts.tokens.as_slice().len());
    out.extend_from_slice(&AFTK_MAGIC);
    out.push(AFTK_VERSION);
    out.push(ts.stages() as u8);
    out.push(ts.levels.emotion_dims() as u8);
    out.push(ts.levels.acoustic_dims() as u8);
    out.extend(levels.iter().map(|&l| l as u8));
    out.extend_from_slice(&ts.frame_rate_hz.to_le_bytes());
    out.extend_from_slice(&(ts.frames() as u32).to_le_bytes());
    for &t in ts.tokens.as_slice() {
        out.extend_from_slice(&(t as u16).to_le_bytes());
    }
    out
}

fn need(bytes: &[u8], len: usize, what: &'static str) -> Result<()> {
    if bytes.len() < len {
        return Err(Error::Truncated {
            what,
            expected: len,
            actual: bytes.len(),
        });
    }
    Ok(())
}

/// Parses an AFTK buffer, keeping at most `max_stages` token columns.
pub fn decode_token_bytes(bytes: &[u8], max_stages: Option<usize>) -> Result<TokenStream> {
    need(bytes, 4, "AFTK header")?;
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != AFTK_MAGIC {
        return Err(Error::BadMagic {
            expected: AFTK_MAGIC,
            found: magic,
        });
    }
    need(bytes, 8, "AFTK header")?;
    if bytes[4] != AFTK_VERSION {
        return Err(Error::UnsupportedVersion(bytes[4]));
    }
    let stages = usize::from(bytes[5]);
    let (fe, fa) = (usize::from(bytes[6]), usize::from(bytes[7]));
    let header_len = 8 + fe + fa + 6;
    need(bytes, header_len, "AFTK header")?;
    let levels: Vec<u32> = bytes[8..8 + fe + fa].iter().map(|&l| u32::from(l)).collect();
    let levels = LevelSpec::new(levels, fe)?;
    let rest = &bytes[8 + fe + fa..];
    let frame_rate_hz = u16::from_le_bytes([rest[0], rest[1]]);
    let frames = u32::from_le_bytes(rest[2..6].try_into().unwrap()) as usize;
    if stages == 0 {
        return Err(Error::Shape("AFTK stream declares zero stages".into()));
    }

    let expected = frames * stages * 2;
    let payload = &bytes[header_len..];
    if payload.len() < expected {
        return Err(Error::Truncated {
            what: "AFTK payload",
            expected,
            actual: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::PayloadMismatch {
            expected,
            actual: payload.len(),
        });
    }
    let keep = match max_stages {
        None => stages,
        Some(k) if k >= 1 && k <= stages => k,
        Some(k) => {
            return Err(Error::Precondition(format!(
                "cannot read {k} stages from a {stages}-stage stream"
            )))
        }
    };
    let mut tokens = Vec::with_capacity(frames * keep);
    for (i, c) in payload.chunks_exact(2).enumerate() {
        let token = Token::from(u16::from_le_bytes([c[0], c[1]]));
        levels.check_token(token)?;
        if i % stages < keep {
            tokens.push(token);
        }
    }
    TokenStream::new(levels, frame_rate_hz, TokenGrid::new(frames, keep, tokens)?)
}

pub fn write_tokens(ts: &TokenStream, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_token_bytes(ts)).map_err(|e| Error::io(path, e))
}

pub fn read_tokens(path: impl AsRef<Path>, max_stages: Option<usize>) -> Result<TokenStream> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_token_bytes(&bytes, max_stages)
}

/// Information-theoretic rate at a given number of active stages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BitrateReport {
    pub active_stages: usize,
    pub bits_per_frame_per_stage: f64,
    pub total_bps: f64,
    pub total_kbps: f64,
    pub emotion_bits_per_frame: f64,
    pub acoustic_bits_per_frame: f64,
    pub emotion_ratio: f64,
}

pub fn bitrate(config: &QuantizerConfig, active_stages: usize) -> Result<BitrateReport> {
    config.check_active(active_stages)?;
    Ok(bitrate_for_levels(config.levels(), f64::from(config.frame_rate_hz()), active_stages))
}

pub fn bitrate_for_levels(levels: &LevelSpec, frame_rate_hz: f64, active_stages: usize) -> BitrateReport {
    let k = active_stages as f64;
    let per_stage = levels.bits_per_stage();
    let emo = levels.emotion_bits() * k;
    let aco = levels.acoustic_bits() * k;
    let total_bps = per_stage * k * frame_rate_hz;
    BitrateReport {
        active_stages,
        bits_per_frame_per_stage: per_stage,
        total_bps,
        total_kbps: total_bps / 1000.0,
        emotion_bits_per_frame: emo,
        acoustic_bits_per_frame: aco,
        emotion_ratio: if emo + aco > 0.0 { emo / (emo + aco) } else { 0.0 },
    }
}
