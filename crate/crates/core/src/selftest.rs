//! Built-in consistency checks run by `bdrfsq selftest`.

use std::fs;
use std::path::PathBuf;

use crate::analysis::pareto::{analyze, read_points_csv, REFERENCE_FRONT_CSV};
use crate::bitstream::bitrate;
use crate::error::{Error, Result};
use crate::feature_io::{gaussian_features, FeatureMatrix};
use crate::fsq::LevelSpec;
use crate::matrix::Matrix;
use crate::quantizer::{
    decode_indices, encode, init_params, EncodeOptions, EncodeResult, QuantizerConfig, QuantizerParams,
};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct SelftestOptions {
    pub seed: u64,
    pub separation_cases: usize,
    pub decode_cases: usize,
    /// Replaces the built-in reference front (d, L, mse rows with K = 2).
    pub front_fixture: Option<PathBuf>,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            separation_cases: 1000,
            decode_cases: 500,
            front_fixture: None,
        }
    }
}

/// A random small configuration with latent width `d`, `stages` stages and
/// its freshly initialized parameters, with ell and bias jittered so the
/// affine is not at its initial value.
pub fn random_case(rng: &mut Rng, d: usize, stages: usize) -> Result<(QuantizerConfig, QuantizerParams)> {
    let d_e = 1 + rng.below(d as u64 - 1) as usize;
    let f_e = 1 + rng.below(3) as usize;
    let f_a = 1 + rng.below(4) as usize;
    let levels: Vec<u32> = (0..f_e + f_a).map(|_| 2 + rng.below(4) as u32).collect();
    let config = QuantizerConfig::new(stages, d_e, d - d_e, f_e, f_a, levels, 0.1, 50)?;
    let dims = (1 + rng.below(8) as usize, 1 + rng.below(8) as usize);
    let mut params = init_params(&config, rng, dims)?;
    for s in &mut params.quantizer.stages {
        for v in s.ell.iter_mut().chain(s.bias.iter_mut()) {
            *v = 0.5 * rng.normal();
        }
    }
    Ok((config, params))
}

fn bits(m: &[f64]) -> Vec<u64> {
    m.iter().map(|v| v.to_bits()).collect()
}

/// Compares one partition of two cached encodes: sub-indices and the given
/// latent rows of every residual and stage output.
fn partition_identical(
    a: &EncodeResult,
    b: &EncodeResult,
    levels: &LevelSpec,
    rows: std::ops::Range<usize>,
    emotion: bool,
) -> bool {
    let (ca, cb) = (a.cache.as_ref().unwrap(), b.cache.as_ref().unwrap());
    for t in 0..a.tokens.frames() {
        for k in 0..a.tokens.stages() {
            let (ia, ib) = (a.tokens.get(t, k), b.tokens.get(t, k));
            let same = if emotion {
                levels.emotion_subindex(ia) == levels.emotion_subindex(ib)
            } else {
                levels.acoustic_subindex(ia) == levels.acoustic_subindex(ib)
            };
            if !same
                || bits(&ca.residual_in(t, k)[rows.clone()]) != bits(&cb.residual_in(t, k)[rows.clone()])
                || bits(&ca.u_hat(t, k)[rows.clone()]) != bits(&cb.u_hat(t, k)[rows.clone()])
            {
                return false;
            }
        }
        if bits(&a.residual_final.frame(t)[rows.clone()]) != bits(&b.residual_final.frame(t)[rows.clone()]) {
            return false;
        }
    }
    true
}

/// Perturbs one input stream at a time and checks that the other partition's
/// sub-indices, residual rows and stage outputs do not change. Returns the
/// number of failing cases.
pub fn block_separation_suite(cases: usize, seed: u64) -> Result<usize> {
    const D: usize = 32;
    const T: usize = 64;
    const K: usize = 4;
    let mut failures = 0;
    for case in 0..cases {
        let mut rng = Rng::derive(seed, case as u64);
        let (config, params) = random_case(&mut rng, D, K)?;
        let (de_in, da_in) = params.input_dims();
        let sd = 0.2 + 3.0 * rng.uniform();
        let e = gaussian_features(&mut rng, T, de_in, sd)?;
        let a = gaussian_features(&mut rng, T, da_in, sd)?;
        let e2 = gaussian_features(&mut rng, T, de_in, sd)?;
        let a2 = gaussian_features(&mut rng, T, da_in, sd)?;
        let opts = EncodeOptions::default().with_cache();
        let base = encode(&e, &a, &params, &config, &opts)?;
        let acoustic_moved = encode(&e, &a2, &params, &config, &opts)?;
        let emotion_moved = encode(&e2, &a, &params, &config, &opts)?;
        let de = config.emotion_latent();
        let ok = partition_identical(&base, &acoustic_moved, config.levels(), 0..de, true)
            && partition_identical(&base, &emotion_moved, config.levels(), de..config.latent_dim(), false);
        if !ok {
            failures += 1;
        }
    }
    Ok(failures)
}

/// Encodes random inputs at a random active stage count and decodes the
/// tokens; returns the number of cases where the two latents differ in any bit.
pub fn decode_exactness_suite(cases: usize, seed: u64) -> Result<usize> {
    let mut failures = 0;
    for case in 0..cases {
        let mut rng = Rng::derive(seed ^ 0xdec0de, case as u64);
        let stages = 1 + rng.below(6) as usize;
        let d = 2 + rng.below(20) as usize;
        let (config, mut params) = random_case(&mut rng, d, stages)?;
        if rng.below(2) == 1 {
            params.post = Some(Matrix::gaussian(d, d, 1.0, &mut rng));
        }
        let active = 1 + rng.below(stages as u64) as usize;
        let frames = rng.below(40) as usize;
        let (de_in, da_in) = params.input_dims();
        let e = gaussian_features(&mut rng, frames, de_in, 2.0)?;
        let a = gaussian_features(&mut rng, frames, da_in, 2.0)?;
        let result = encode(&e, &a, &params, &config, &EncodeOptions::stages(active))?;
        let expected = params.apply_post(&result.quantized)?;
        let decoded = decode_indices(&result.tokens, &params, &config)?;
        if bits(expected.as_slice()) != bits(decoded.as_slice()) {
            failures += 1;
        }
    }
    Ok(failures)
}

/// Exhaustive pack/unpack and quantize/values round trips over a level set.
pub fn index_round_trip(levels: &LevelSpec) -> Result<()> {
    for i in 0..levels.codes_per_stage() {
        let i = i as u32;
        let codes = levels.unpack_index(i)?;
        if levels.pack_index(&codes)? != i {
            return Err(Error::Precondition(format!("pack(unpack({i})) != {i}")));
        }
        let (again, _) = levels.quantize_vector(&levels.codes_to_values(&codes)?)?;
        if again != codes {
            return Err(Error::Precondition(format!("quantize(values(codes)) != codes at index {i}")));
        }
    }
    Ok(())
}

/// Published bitrate rows: (K', kbps, emotion bits, acoustic bits).
pub const REFERENCE_BITRATES: [(usize, f64, f64, f64); 3] = [(2, 1.5, 6.0, 24.0), (4, 3.0, 12.0, 48.0), (8, 6.0, 24.0, 96.0)];

pub fn bitrate_fixture() -> Result<()> {
    let config = QuantizerConfig::standard();
    for (k, kbps, emo, aco) in REFERENCE_BITRATES {
        let r = bitrate(&config, k)?;
        if r.total_kbps != kbps
            || r.emotion_bits_per_frame != emo
            || r.acoustic_bits_per_frame != aco
            || r.emotion_ratio != 0.2
        {
            return Err(Error::Precondition(format!("K'={k}: got {r:?}")));
        }
    }
    Ok(())
}

/// Printed efficiency column of the reference front.
pub const REFERENCE_EFFICIENCIES: [f64; 6] = [19.6, 301.2, 27.2, 23.8, 5.7, 26.3];

/// Recomputes efficiencies and the knee from a front fixture.
pub fn front_fixture(csv_text: &str) -> Result<()> {
    let points = read_points_csv(csv_text.as_bytes(), 2)?;
    let a = analyze(&points)?;
    if a.front.len() != REFERENCE_EFFICIENCIES.len() + 1 {
        return Err(Error::Precondition(format!("front has {} points, expected 7", a.front.len())));
    }
    for (i, (p, want)) in a.front[1..].iter().zip(REFERENCE_EFFICIENCIES).enumerate() {
        let got = p.marginal_efficiency.unwrap_or(f64::NAN);
        if !((got - want).abs() <= 0.5) {
            return Err(Error::Precondition(format!("efficiency {}: {got:.2} vs {want}", i + 1)));
        }
    }
    let at = |i: Option<usize>| i.map(|i| (a.front[i].d, a.front[i].levels));
    if at(a.knee) != Some((2, 2)) || at(a.selected) != Some((3, 2)) {
        return Err(Error::Precondition(format!(
            "knee {:?} / selected {:?}, expected (2, 2) / (3, 2)",
            at(a.knee),
            at(a.selected)
        )));
    }
    Ok(())
}

fn outcome(name: &'static str, r: Result<String>) -> CheckOutcome {
    match r {
        Ok(detail) => CheckOutcome { name, passed: true, detail },
        Err(e) => CheckOutcome { name, passed: false, detail: e.to_string() },
    }
}

fn count_check(failures: Result<usize>, cases: usize) -> Result<String> {
    match failures? {
        0 => Ok(format!("{cases} cases")),
        n => Err(Error::Precondition(format!("{n} of {cases} cases failed"))),
    }
}

pub fn run_selftest(opts: &SelftestOptions) -> Vec<CheckOutcome> {
    let mut out = vec![
        outcome(
            "block_separation",
            count_check(block_separation_suite(opts.separation_cases, opts.seed), opts.separation_cases),
        ),
        outcome(
            "index_only_decode",
            count_check(decode_exactness_suite(opts.decode_cases, opts.seed), opts.decode_cases),
        ),
        outcome(
            "index_round_trip",
            index_round_trip(&LevelSpec::standard()).map(|_| "32768 indices".to_string()),
        ),
        outcome("bitrate_fixture", bitrate_fixture().map(|_| "K' = 2, 4, 8".to_string())),
    ];
    let front = match &opts.front_fixture {
        None => Ok(REFERENCE_FRONT_CSV.to_string()),
        Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e)),
    };
    out.push(outcome(
        "front_fixture",
        front.and_then(|text| front_fixture(&text)).map(|_| "knee d=2 L=2, selected d=3 L=2".to_string()),
    ));
    out
}

/// Random T×D features; exposed for the CLI's synthetic mode.
pub fn synthetic_features(frames: usize, dim: usize, seed: u64) -> Result<FeatureMatrix> {
    gaussian_features(&mut Rng::new(seed), frames, dim, 1.0)
}
