//! Block-diagonal residual FSQ.
//!
//! Each stage projects the current residual into the compact FSQ space with a
//! block-diagonal input map, normalizes it with a learned per-dimension affine
//! (`s = softplus(ell) + epsilon`), quantizes, inverts the affine with the same
//! fixed parameters and maps back with a block-diagonal output map. The stage
//! reconstruction is subtracted from the residual before the next stage.
//!
//! Because every operation either acts per dimension or through diagonal
//! blocks, the emotion rows of every residual depend only on the emotion rows
//! of the input latent, and likewise for the acoustic rows.

use crate::conditioning::CemWeights;
use crate::error::{Error, Result};
use crate::feature_io::FeatureMatrix;
use crate::fsq::{LevelSpec, Token};
use crate::matrix::{BlockDiagonal, Matrix};
use crate::rng::Rng;

pub const DEFAULT_EPSILON: f64 = 0.1;
pub const DEFAULT_FRAME_RATE_HZ: u16 = 50;

/// How the per-stage projections are wired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Structure {
    /// Emotion and acoustic partitions each get their own diagonal block.
    #[default]
    BlockDiagonal,
    /// One unconstrained f×d block; the leakage-probe baseline.
    Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerConfig {
    stages: usize,
    emotion_latent: usize,
    acoustic_latent: usize,
    levels: LevelSpec,
    epsilon: f64,
    frame_rate_hz: u16,
    structure: Structure,
}

impl QuantizerConfig {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        stages: usize,
        emotion_latent: usize,
        acoustic_latent: usize,
        emotion_fsq: usize,
        acoustic_fsq: usize,
        levels: Vec<u32>,
        epsilon: f64,
        frame_rate_hz: u16,
    ) -> Result<Self> {
        if stages == 0 {
            return Err(Error::InvalidConfig("K must be at least 1".into()));
        }
        if emotion_latent == 0 || acoustic_latent == 0 {
            return Err(Error::InvalidConfig(format!(
                "latent partition sizes must be at least 1, got d_e={emotion_latent}, d_a={acoustic_latent}"
            )));
        }
        if emotion_fsq == 0 || acoustic_fsq == 0 {
            return Err(Error::InvalidConfig(format!(
                "FSQ partition sizes must be at least 1, got f_e={emotion_fsq}, f_a={acoustic_fsq}"
            )));
        }
        if levels.len() != emotion_fsq + acoustic_fsq {
            return Err(Error::InvalidConfig(format!(
                "{} levels given for f_e + f_a = {}",
                levels.len(),
                emotion_fsq + acoustic_fsq
            )));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!("epsilon must be positive, got {epsilon}")));
        }
        if frame_rate_hz == 0 {
            return Err(Error::InvalidConfig("frame rate must be positive".into()));
        }
        Ok(Self {
            stages,
            emotion_latent,
            acoustic_latent,
            levels: LevelSpec::new(levels, emotion_fsq)?,
            epsilon,
            frame_rate_hz,
            structure: Structure::BlockDiagonal,
        })
    }

    /// K=8, (d_e, d_a) = (256, 768), (f_e, f_a) = (3, 6), L = [2,2,2,4,4,4,4,4,4].
    pub fn standard() -> Self {
        Self::new(
            8,
            256,
            768,
            3,
            6,
            vec![2, 2, 2, 4, 4, 4, 4, 4, 4],
            DEFAULT_EPSILON,
            DEFAULT_FRAME_RATE_HZ,
        )
        .unwrap()
    }

    pub fn with_structure(mut self, structure: Structure) -> Self {
        self.structure = structure;
        self
    }

    pub fn stages(&self) -> usize {
        self.stages
    }
    pub fn emotion_latent(&self) -> usize {
        self.emotion_latent
    }
    pub fn acoustic_latent(&self) -> usize {
        self.acoustic_latent
    }
    pub fn latent_dim(&self) -> usize {
        self.emotion_latent + self.acoustic_latent
    }
    pub fn emotion_fsq(&self) -> usize {
        self.levels.emotion_dims()
    }
    pub fn acoustic_fsq(&self) -> usize {
        self.levels.acoustic_dims()
    }
    pub fn fsq_dim(&self) -> usize {
        self.levels.dims()
    }
    pub fn levels(&self) -> &LevelSpec {
        &self.levels
    }
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
    pub fn frame_rate_hz(&self) -> u16 {
        self.frame_rate_hz
    }
    pub fn structure(&self) -> Structure {
        self.structure
    }

    /// (latent, fsq) size of each projection block.
    pub fn block_layout(&self) -> Vec<(usize, usize)> {
        match self.structure {
            Structure::BlockDiagonal => vec![
                (self.emotion_latent, self.emotion_fsq()),
                (self.acoustic_latent, self.acoustic_fsq()),
            ],
            Structure::Dense => vec![(self.latent_dim(), self.fsq_dim())],
        }
    }

    pub fn check_active(&self, active: usize) -> Result<()> {
        if active == 0 || active > self.stages {
            return Err(Error::Precondition(format!(
                "active stages must be in 1..={}, got {active}",
                self.stages
            )));
        }
        Ok(())
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Learnable state of one residual stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageParams {
    /// f×d, one block per partition.
    pub input: BlockDiagonal,
    /// d×f, one block per partition.
    pub output: BlockDiagonal,
    /// Raw scale; the effective scale is `softplus(ell) + epsilon`.
    pub ell: Vec<f64>,
    pub bias: Vec<f64>,
}

impl StageParams {
    pub fn scale(&self, epsilon: f64) -> Vec<f64> {
        self.ell.iter().map(|&l| softplus(l) + epsilon).collect()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            input: self.input.zeros_like(),
            output: self.output.zeros_like(),
            ell: vec![0.0; self.ell.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }

    /// Emotion input block (f_e×d_e) of a block-diagonal stage.
    pub fn in_e(&self) -> Option<&Matrix> {
        self.block_pair(&self.input).map(|b| &b[0])
    }
    pub fn in_a(&self) -> Option<&Matrix> {
        self.block_pair(&self.input).map(|b| &b[1])
    }
    pub fn out_e(&self) -> Option<&Matrix> {
        self.block_pair(&self.output).map(|b| &b[0])
    }
    pub fn out_a(&self) -> Option<&Matrix> {
        self.block_pair(&self.output).map(|b| &b[1])
    }

    fn block_pair<'a>(&self, bd: &'a BlockDiagonal) -> Option<&'a [Matrix]> {
        (bd.blocks().len() == 2).then(|| bd.blocks())
    }

    fn visit(&self, mut f: impl FnMut(&[f64])) {
        for b in self.input.blocks().iter().chain(self.output.blocks()) {
            f(b.as_slice());
        }
        f(&self.ell);
        f(&self.bias);
    }

    fn visit_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        for b in self.input.blocks_mut() {
            f(b.as_mut_slice());
        }
        for b in self.output.blocks_mut() {
            f(b.as_mut_slice());
        }
        f(&mut self.ell);
        f(&mut self.bias);
    }

    fn is_finite(&self) -> bool {
        self.input.is_finite()
            && self.output.is_finite()
            && self.ell.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

/// Per-stage result of quantizing one residual vector.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub u_hat: Vec<f64>,
    pub index: Token,
    pub codes: Vec<u32>,
    /// Projected residual before normalization.
    pub z: Vec<f64>,
    /// Normalized pre-quantization vector.
    pub z_pre: Vec<f64>,
    /// Its quantized counterpart (grid values).
    pub z_post: Vec<f64>,
}

/// Frame-major T×K' grid of composite tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    frames: usize,
    stages: usize,
    data: Vec<Token>,
}

impl TokenGrid {
    pub fn new(frames: usize, stages: usize, data: Vec<Token>) -> Result<Self> {
        if data.len() != frames * stages {
            return Err(Error::Shape(format!(
                "{frames}x{stages} token grid needs {} tokens, got {}",
                frames * stages,
                data.len()
            )));
        }
        Ok(Self {
            frames,
            stages,
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }
    pub fn stages(&self) -> usize {
        self.stages
    }
    pub fn as_slice(&self) -> &[Token] {
        &self.data
    }
    pub fn get(&self, t: usize, k: usize) -> Token {
        self.data[t * self.stages + k]
    }
    pub fn frame(&self, t: usize) -> &[Token] {
        &self.data[t * self.stages..(t + 1) * self.stages]
    }

    /// First `stages` columns.
    pub fn prefix(&self, stages: usize) -> Result<Self> {
        if stages == 0 || stages > self.stages {
            return Err(Error::Precondition(format!(
                "cannot keep {stages} of {} stages",
                self.stages
            )));
        }
        let data = (0..self.frames)
            .flat_map(|t| self.frame(t)[..stages].iter().copied())
            .collect();
        Ok(Self {
            frames: self.frames,
            stages,
            data,
        })
    }
}

/// Intermediate values kept for the straight-through backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    frames: usize,
    stages: usize,
    latent_dim: usize,
    fsq_dim: usize,
    residual_in: Vec<f64>,
    u_hat: Vec<f64>,
    z: Vec<f64>,
    z_pre: Vec<f64>,
    z_post: Vec<f64>,
}

impl ForwardCache {
    fn latent_at(&self, t: usize, k: usize) -> std::ops::Range<usize> {
        let base = (t * self.stages + k) * self.latent_dim;
        base..base + self.latent_dim
    }

    fn fsq_at(&self, t: usize, k: usize) -> std::ops::Range<usize> {
        let base = (t * self.stages + k) * self.fsq_dim;
        base..base + self.fsq_dim
    }

    /// Residual entering stage `k` (0-based) at frame `t`, i.e. r_k in 0-based terms.
    pub fn residual_in(&self, t: usize, k: usize) -> &[f64] {
        &self.residual_in[self.latent_at(t, k)]
    }
    pub fn u_hat(&self, t: usize, k: usize) -> &[f64] {
        &self.u_hat[self.latent_at(t, k)]
    }
    pub fn z_pre(&self, t: usize, k: usize) -> &[f64] {
        &self.z_pre[self.fsq_at(t, k)]
    }
    pub fn z_post(&self, t: usize, k: usize) -> &[f64] {
        &self.z_post[self.fsq_at(t, k)]
    }
    pub fn stages(&self) -> usize {
        self.stages
    }
    pub fn frames(&self) -> usize {
        self.frames
    }
}

#[derive(Debug, Clone, Default)]
pub struct EncodeOptions {
    pub active_stages: Option<usize>,
    /// Stage counts m for which the cumulative latent Σ_{k≤m} û_k is returned.
    pub cumulative_at: Vec<usize>,
    pub keep_cache: bool,
}

impl EncodeOptions {
    pub fn stages(active: usize) -> Self {
        Self {
            active_stages: Some(active),
            ..Self::default()
        }
    }

    pub fn with_cache(mut self) -> Self {
        self.keep_cache = true;
        self
    }
}

#[derive(Debug, Clone)]
pub struct EncodeResult {
    pub tokens: TokenGrid,
    /// Σ over active stages of û_k, before any post projection.
    pub quantized: FeatureMatrix,
    pub residual_final: FeatureMatrix,
    pub cumulative: Vec<(usize, FeatureMatrix)>,
    pub commitment: f64,
    pub cache: Option<ForwardCache>,
}

/// Gradients with the same layout as the parameters they belong to.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// Gradient with respect to the input latent U.
    pub latent: FeatureMatrix,
    pub stages: Vec<StageParams>,
}

/// The K-stage residual chain with its grid and affine floor.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualQuantizer {
    pub levels: LevelSpec,
    pub epsilon: f64,
    pub stages: Vec<StageParams>,
}

impl ResidualQuantizer {
    /// Fresh stages: fan-in scaled Gaussian blocks, `ell = 0`, `bias = 0`.
    pub fn init(
        layout: &[(usize, usize)],
        levels: LevelSpec,
        epsilon: f64,
        stages: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let fsq: usize = layout.iter().map(|b| b.1).sum();
        if fsq != levels.dims() {
            return Err(Error::InvalidConfig(format!(
                "projection blocks cover {fsq} FSQ dims but {} levels are given",
                levels.dims()
            )));
        }
        if layout.iter().any(|&(d, f)| d == 0 || f == 0) {
            return Err(Error::InvalidConfig("empty projection block".into()));
        }
        let stages = (0..stages)
            .map(|_| {
                let input = layout
                    .iter()
                    .map(|&(d, f)| Matrix::gaussian(f, d, 1.0 / (d as f64).sqrt(), rng))
                    .collect();
                let output = layout
                    .iter()
                    .map(|&(d, f)| Matrix::gaussian(d, f, 1.0 / (f as f64).sqrt(), rng))
                    .collect();
                StageParams {
                    input: BlockDiagonal::new(input),
                    output: BlockDiagonal::new(output),
                    ell: vec![0.0; fsq],
                    bias: vec![0.0; fsq],
                }
            })
            .collect();
        Ok(Self {
            levels,
            epsilon,
            stages,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.stages.first().map_or(0, |s| s.input.cols())
    }

    pub fn fsq_dim(&self) -> usize {
        self.levels.dims()
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Every stage has the same block layout and matches the grid.
    pub fn validate(&self) -> Result<()> {
        let first = self
            .stages
            .first()
            .ok_or_else(|| Error::InvalidConfig("quantizer has no stages".into()))?;
        let layout: Vec<(usize, usize)> = first
            .input
            .blocks()
            .iter()
            .map(|b| (b.cols(), b.rows()))
            .collect();
        for (k, s) in self.stages.iter().enumerate() {
            let ins: Vec<_> = s.input.blocks().iter().map(|b| (b.cols(), b.rows())).collect();
            let outs: Vec<_> = s.output.blocks().iter().map(|b| (b.rows(), b.cols())).collect();
            if ins != layout || outs != layout {
                return Err(Error::Shape(format!(
                    "stage {k}: projection blocks {ins:?}/{outs:?} disagree with {layout:?}"
                )));
            }
            if s.ell.len() != self.levels.dims() || s.bias.len() != self.levels.dims() {
                return Err(Error::Shape(format!(
                    "stage {k}: ell/bias length must be {}",
                    self.levels.dims()
                )));
            }
            if !s.is_finite() {
                return Err(Error::NonFinite(format!("stage {k} parameters")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("epsilon must be positive".into()));
        }
        Ok(())
    }

    /// Runs stage `k` on one residual vector.
    pub fn stage_forward(&self, k: usize, r: &[f64]) -> Result<StageOutput> {
        let stage = &self.stages[k];
        if r.len() != stage.input.cols() {
            return Err(Error::Shape(format!(
                "residual has {} dims, stage expects {}",
                r.len(),
                stage.input.cols()
            )));
        }
        if let Some(v) = r.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("residual value {v}")));
        }
        let f = self.levels.dims();
        let scale = stage.scale(self.epsilon);
        let z = stage.input.apply(r);
        let z_pre: Vec<f64> = (0..f).map(|j| scale[j] * (z[j] - stage.bias[j])).collect();
        let mut codes = vec![0; f];
        let mut z_post = vec![0.0; f];
        self.levels.quantize_into(&z_pre, &mut codes, &mut z_post)?;
        let index = self.levels.pack_index(&codes)?;
        let u_hat = stage.output.apply(&denormalize(&z_post, &scale, &stage.bias));
        Ok(StageOutput {
            u_hat,
            index,
            codes,
            z,
            z_pre,
            z_post,
        })
    }

    /// Quantizes a T×d latent through the first `active` stages.
    pub fn quantize_latent(&self, latent: &FeatureMatrix, opts: &EncodeOptions) -> Result<EncodeResult> {
        let active = opts.active_stages.unwrap_or(self.stages.len());
        if active == 0 || active > self.stages.len() {
            return Err(Error::Precondition(format!(
                "active stages must be in 1..={}, got {active}",
                self.stages.len()
            )));
        }
        let d = self.latent_dim();
        if latent.dim() != d {
            return Err(Error::Shape(format!(
                "latent has {} dims, quantizer expects {d}",
                latent.dim()
            )));
        }
        let mut cumulative_at: Vec<usize> = opts.cumulative_at.clone();
        cumulative_at.sort_unstable();
        cumulative_at.dedup();
        if let Some(&m) = cumulative_at.iter().find(|&&m| m == 0 || m > active) {
            return Err(Error::Precondition(format!(
                "cumulative stage {m} outside 1..={active}"
            )));
        }

        let frames = latent.frames();
        let f = self.fsq_dim();
        let scales: Vec<Vec<f64>> = self.stages.iter().map(|s| s.scale(self.epsilon)).collect();
        let mut tokens = Vec::with_capacity(frames * active);
        let mut quantized = FeatureMatrix::zeros(frames, d);
        let mut residual_final = FeatureMatrix::zeros(frames, d);
        let mut cumulative: Vec<(usize, FeatureMatrix)> = cumulative_at
            .iter()
            .map(|&m| (m, FeatureMatrix::zeros(frames, d)))
            .collect();
        let mut cache = opts.keep_cache.then(|| ForwardCache {
            frames,
            stages: active,
            latent_dim: d,
            fsq_dim: f,
            residual_in: Vec::with_capacity(frames * active * d),
            u_hat: Vec::with_capacity(frames * active * d),
            z: Vec::with_capacity(frames * active * f),
            z_pre: Vec::with_capacity(frames * active * f),
            z_post: Vec::with_capacity(frames * active * f),
        });
        let mut commit_sum = 0.0;

        let mut residual = vec![0.0; d];
        let mut z = vec![0.0; f];
        let mut z_pre = vec![0.0; f];
        let mut z_post = vec![0.0; f];
        let mut z_hat = vec![0.0; f];
        let mut u_hat = vec![0.0; d];
        let mut codes = vec![0u32; f];
        for t in 0..frames {
            residual.copy_from_slice(latent.frame(t));
            let acc = quantized.frame_mut(t);
            let mut next_cum = 0;
            for (k, (stage, scale)) in self.stages[..active].iter().zip(&scales).enumerate() {
                stage.input.apply_into(&residual, &mut z);
                for j in 0..f {
                    z_pre[j] = scale[j] * (z[j] - stage.bias[j]);
                }
                self.levels.quantize_into(&z_pre, &mut codes, &mut z_post)?;
                tokens.push(self.levels.pack_index(&codes)?);
                denormalize_into(&z_post, scale, &stage.bias, &mut z_hat);
                stage.output.apply_into(&z_hat, &mut u_hat);

                if let Some(c) = cache.as_mut() {
                    c.residual_in.extend_from_slice(&residual);
                    c.u_hat.extend_from_slice(&u_hat);
                    c.z.extend_from_slice(&z);
                    c.z_pre.extend_from_slice(&z_pre);
                    c.z_post.extend_from_slice(&z_post);
                }
                commit_sum += z_post
                    .iter()
                    .zip(&z_pre)
                    .map(|(q, p)| (q - p) * (q - p))
                    .sum::<f64>();
                for i in 0..d {
                    residual[i] -= u_hat[i];
                    acc[i] += u_hat[i];
                }
                if next_cum < cumulative.len() && cumulative[next_cum].0 == k + 1 {
                    cumulative[next_cum].1.frame_mut(t).copy_from_slice(acc);
                    next_cum += 1;
                }
            }
            residual_final.frame_mut(t).copy_from_slice(&residual);
        }

        let n = (frames * active * f) as f64;
        Ok(EncodeResult {
            tokens: TokenGrid::new(frames, active, tokens)?,
            quantized,
            residual_final,
            cumulative,
            commitment: if frames == 0 { 0.0 } else { commit_sum / n },
            cache,
        })
    }

    /// Index-only reconstruction: Σ_k π_out(values(I_k) ⊘ s_k + b_k).
    pub fn decode_tokens(&self, tokens: &TokenGrid) -> Result<FeatureMatrix> {
        let active = tokens.stages();
        if active == 0 || active > self.stages.len() {
            return Err(Error::Precondition(format!(
                "token grid has {active} stages, quantizer has {}",
                self.stages.len()
            )));
        }
        let d = self.latent_dim();
        let f = self.fsq_dim();
        let scales: Vec<Vec<f64>> = self.stages.iter().map(|s| s.scale(self.epsilon)).collect();
        let mut out = FeatureMatrix::zeros(tokens.frames(), d);
        let mut codes = vec![0u32; f];
        let mut values = vec![0.0; f];
        let mut z_hat = vec![0.0; f];
        let mut u_hat = vec![0.0; d];
        for t in 0..tokens.frames() {
            let acc = out.frame_mut(t);
            for (k, &token) in tokens.frame(t).iter().enumerate() {
                let stage = &self.stages[k];
                self.levels.unpack_into(token, &mut codes)?;
                for j in 0..f {
                    values[j] = crate::fsq::code_value(codes[j], self.levels.levels()[j])?;
                }
                denormalize_into(&values, &scales[k], &stage.bias, &mut z_hat);
                stage.output.apply_into(&z_hat, &mut u_hat);
                for i in 0..d {
                    acc[i] += u_hat[i];
                }
            }
        }
        Ok(out)
    }

    /// Reverse pass through the straight-through surrogate.
    ///
    /// `upstream` is ∂L/∂Û. FSQ is treated as the identity, so a stage's
    /// Jacobian with respect to its input residual is π_out·π_in. The
    /// commitment term (mean squared `z_post - z_pre`, quantized side held
    /// constant) is added with weight `commitment_weight`.
    pub fn backward(
        &self,
        result: &EncodeResult,
        upstream: &FeatureMatrix,
        commitment_weight: f64,
    ) -> Result<Gradients> {
        let cache = result.cache.as_ref().ok_or(Error::MissingCache)?;
        let d = self.latent_dim();
        let f = self.fsq_dim();
        if upstream.frames() != cache.frames || upstream.dim() != d {
            return Err(Error::Shape(format!(
                "upstream gradient is {}x{}, expected {}x{d}",
                upstream.frames(),
                upstream.dim(),
                cache.frames
            )));
        }
        let active = cache.stages;
        let mut grads: Vec<StageParams> = self.stages.iter().map(StageParams::zeros_like).collect();
        let mut latent_grad = FeatureMatrix::zeros(cache.frames, d);
        let scales: Vec<Vec<f64>> = self.stages.iter().map(|s| s.scale(self.epsilon)).collect();
        let n_commit = (cache.frames * active * f) as f64;
        let commit_coef = if n_commit > 0.0 {
            -2.0 * commitment_weight / n_commit
        } else {
            0.0
        };

        let mut g_res = vec![0.0; d];
        let mut g_u = vec![0.0; d];
        let mut g_zhat = vec![0.0; f];
        let mut g_z = vec![0.0; f];
        let mut z_hat = vec![0.0; f];
        for t in 0..cache.frames {
            let g_total = upstream.frame(t);
            g_res.fill(0.0);
            for k in (0..active).rev() {
                let stage = &self.stages[k];
                let grad = &mut grads[k];
                let scale = &scales[k];
                let r_in = cache.residual_in(t, k);
                let zr = &cache.z[cache.fsq_at(t, k)];
                let z_pre = cache.z_pre(t, k);
                let z_post = cache.z_post(t, k);

                // r_k = r_{k-1} - û_k, and û_k also feeds Û directly.
                for i in 0..d {
                    g_u[i] = g_total[i] - g_res[i];
                }
                denormalize_into(z_post, scale, &stage.bias, &mut z_hat);
                stage.output.accumulate_outer(&mut grad.output, &g_u, &z_hat);
                g_zhat.fill(0.0);
                stage.output.apply_transpose_add(&g_u, &mut g_zhat);

                for j in 0..f {
                    let s = scale[j];
                    // ẑ = q/s + b with q = z̃ + const under STE.
                    let g_q = g_zhat[j] / s;
                    let mut g_s = -z_post[j] / (s * s) * g_zhat[j];
                    let mut g_b = g_zhat[j];
                    let g_zt = g_q + commit_coef * (z_post[j] - z_pre[j]);
                    // z̃ = s ⊙ (z - b)
                    g_s += (zr[j] - stage.bias[j]) * g_zt;
                    g_b -= s * g_zt;
                    g_z[j] = s * g_zt;
                    grad.ell[j] += g_s * sigmoid(stage.ell[j]);
                    grad.bias[j] += g_b;
                }
                stage.input.accumulate_outer(&mut grad.input, &g_z, r_in);
                stage.input.apply_transpose_add(&g_z, &mut g_res);
            }
            latent_grad.frame_mut(t).copy_from_slice(&g_res);
        }
        Ok(Gradients {
            latent: latent_grad,
            stages: grads,
        })
    }

    /// Flattened parameters: per stage, input blocks, output blocks, ell, bias.
    pub fn parameter_vector(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for s in &self.stages {
            s.visit(|x| out.extend_from_slice(x));
        }
        out
    }

    pub fn set_parameter_vector(&mut self, values: &[f64]) -> Result<()> {
        let mut offset = 0;
        for s in &mut self.stages {
            s.visit_mut(|x| {
                let n = x.len();
                if offset + n <= values.len() {
                    x.copy_from_slice(&values[offset..offset + n]);
                }
                offset += n;
            });
        }
        if offset != values.len() {
            return Err(Error::Shape(format!(
                "parameter vector has {} values, quantizer has {offset}",
                values.len()
            )));
        }
        Ok(())
    }
}

/// Flattens gradients in the same order as [`ResidualQuantizer::parameter_vector`].
pub fn flatten_stage_grads(grads: &[StageParams]) -> Vec<f64> {
    let mut out = Vec::new();
    for s in grads {
        s.visit(|x| out.extend_from_slice(x));
    }
    out
}

fn denormalize(values: &[f64], scale: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    denormalize_into(values, scale, bias, &mut out);
    out
}

#[inline]
fn denormalize_into(values: &[f64], scale: &[f64], bias: &[f64], out: &mut [f64]) {
    for j in 0..values.len() {
        out[j] = values[j] / scale[j] + bias[j];
    }
}

/// Full quantizer state: partition pre-projections φ_e/φ_a, the residual
/// chain, an optional post projection and optional CEM weights.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerParams {
    /// d_e×D_e.
    pub pre_e: Matrix,
    /// d_a×D_a.
    pub pre_a: Matrix,
    pub quantizer: ResidualQuantizer,
    /// d×d; `None` is the identity.
    pub post: Option<Matrix>,
    pub cem: Option<CemWeights>,
}

impl QuantizerParams {
    pub fn stages(&self) -> &[StageParams] {
        &self.quantizer.stages
    }

    pub fn input_dims(&self) -> (usize, usize) {
        (self.pre_e.cols(), self.pre_a.cols())
    }

    pub fn validate(&self, config: &QuantizerConfig) -> Result<()> {
        if self.quantizer.stages.len() != config.stages() {
            return Err(Error::Shape(format!(
                "{} stages stored, config says K={}",
                self.quantizer.stages.len(),
                config.stages()
            )));
        }
        if self.quantizer.levels != *config.levels() || self.quantizer.epsilon != config.epsilon() {
            return Err(Error::Shape("stage grid or epsilon disagrees with config".into()));
        }
        self.quantizer.validate()?;
        let layout: Vec<(usize, usize)> = self.quantizer.stages[0]
            .input
            .blocks()
            .iter()
            .map(|b| (b.cols(), b.rows()))
            .collect();
        if layout != config.block_layout() {
            return Err(Error::Shape(format!(
                "projection blocks {layout:?} do not match config {:?}",
                config.block_layout()
            )));
        }
        if self.pre_e.rows() != config.emotion_latent() || self.pre_a.rows() != config.acoustic_latent() {
            return Err(Error::Shape(format!(
                "pre projections map to {}+{} dims, config has {}+{}",
                self.pre_e.rows(),
                self.pre_a.rows(),
                config.emotion_latent(),
                config.acoustic_latent()
            )));
        }
        if self.pre_e.cols() == 0 || self.pre_a.cols() == 0 {
            return Err(Error::Shape("pre projections need at least one input dim".into()));
        }
        if !(self.pre_e.is_finite() && self.pre_a.is_finite()) {
            return Err(Error::NonFinite("pre projection".into()));
        }
        if let Some(post) = &self.post {
            let d = config.latent_dim();
            if post.rows() != d || post.cols() != d {
                return Err(Error::Shape(format!(
                    "post projection is {}x{}, expected {d}x{d}",
                    post.rows(),
                    post.cols()
                )));
            }
            if !post.is_finite() {
                return Err(Error::NonFinite("post projection".into()));
            }
        }
        if let Some(cem) = &self.cem {
            cem.validate(self.pre_e.cols(), self.pre_a.cols())?;
        }
        Ok(())
    }

    /// Applies the post projection (identity when absent).
    pub fn apply_post(&self, latent: &FeatureMatrix) -> Result<FeatureMatrix> {
        let Some(post) = &self.post else {
            return Ok(latent.clone());
        };
        if latent.dim() != post.cols() {
            return Err(Error::Shape(format!(
                "post projection expects {} dims, got {}",
                post.cols(),
                latent.dim()
            )));
        }
        let mut out = FeatureMatrix::zeros(latent.frames(), post.rows());
        for t in 0..latent.frames() {
            post.mul_vec_into(latent.frame(t), out.frame_mut(t));
        }
        Ok(out)
    }

    /// U = Concat(φ_e(E), φ_a(A)).
    pub fn project_inputs(&self, features_e: &FeatureMatrix, features_a: &FeatureMatrix) -> Result<FeatureMatrix> {
        if features_e.frames() != features_a.frames() {
            return Err(Error::Shape(format!(
                "emotion has {} frames, acoustic has {}",
                features_e.frames(),
                features_a.frames()
            )));
        }
        if features_e.dim() != self.pre_e.cols() || features_a.dim() != self.pre_a.cols() {
            return Err(Error::Shape(format!(
                "inputs are {}+{} dims, pre projections expect {}+{}",
                features_e.dim(),
                features_a.dim(),
                self.pre_e.cols(),
                self.pre_a.cols()
            )));
        }
        let (de, da) = (self.pre_e.rows(), self.pre_a.rows());
        let mut latent = FeatureMatrix::zeros(features_e.frames(), de + da);
        for t in 0..features_e.frames() {
            let row = latent.frame_mut(t);
            self.pre_e.mul_vec_into(features_e.frame(t), &mut row[..de]);
            self.pre_a.mul_vec_into(features_a.frame(t), &mut row[de..]);
        }
        Ok(latent)
    }
}

/// Fresh parameters: fan-in scaled Gaussian blocks, `ell = 0` (so every scale
/// starts at `ln 2 + epsilon`), zero bias, identity post projection.
pub fn init_params(
    config: &QuantizerConfig,
    rng: &mut Rng,
    input_dims: (usize, usize),
) -> Result<QuantizerParams> {
    let (de_in, da_in) = input_dims;
    if de_in == 0 || da_in == 0 {
        return Err(Error::InvalidConfig("input feature dims must be at least 1".into()));
    }
    let pre_e = Matrix::gaussian(config.emotion_latent(), de_in, 1.0 / (de_in as f64).sqrt(), rng);
    let pre_a = Matrix::gaussian(config.acoustic_latent(), da_in, 1.0 / (da_in as f64).sqrt(), rng);
    let quantizer = ResidualQuantizer::init(
        &config.block_layout(),
        config.levels().clone(),
        config.epsilon(),
        config.stages(),
        rng,
    )?;
    Ok(QuantizerParams {
        pre_e,
        pre_a,
        quantizer,
        post: None,
        cem: None,
    })
}

/// Single stage on a latent-space residual vector.
pub fn stage_forward(
    r: &[f64],
    stage: &StageParams,
    config: &QuantizerConfig,
) -> Result<StageOutput> {
    let q = ResidualQuantizer {
        levels: config.levels().clone(),
        epsilon: config.epsilon(),
        stages: vec![stage.clone()],
    };
    q.validate()?;
    q.stage_forward(0, r)
}

/// Projects both feature streams (after CEM modulation of the acoustic stream,
/// when CEM weights are present) and runs the residual chain.
pub fn encode(
    features_e: &FeatureMatrix,
    features_a: &FeatureMatrix,
    params: &QuantizerParams,
    config: &QuantizerConfig,
    opts: &EncodeOptions,
) -> Result<EncodeResult> {
    config.check_active(opts.active_stages.unwrap_or(config.stages()))?;
    let fused;
    let acoustic = match &params.cem {
        Some(cem) if features_e.frames() > 0 => {
            fused = cem.apply(features_e, features_a)?;
            &fused
        }
        _ => features_a,
    };
    let latent = params.project_inputs(features_e, acoustic)?;
    params.quantizer.quantize_latent(&latent, opts)
}

/// Tokens → post-projected latent, using fixed parameters only.
pub fn decode_indices(
    tokens: &TokenGrid,
    params: &QuantizerParams,
    config: &QuantizerConfig,
) -> Result<FeatureMatrix> {
    if tokens.stages() > config.stages() {
        return Err(Error::Precondition(format!(
            "token grid has {} stages, config has K={}",
            tokens.stages(),
            config.stages()
        )));
    }
    let summed = params.quantizer.decode_tokens(tokens)?;
    params.apply_post(&summed)
}

/// ∂L/∂U and per-stage parameter gradients for a cached forward pass,
/// without the commitment term.
pub fn ste_backward(
    params: &QuantizerParams,
    result: &EncodeResult,
    upstream: &FeatureMatrix,
) -> Result<Gradients> {
    params.quantizer.backward(result, upstream, 0.0)
}

pub fn commitment_loss(result: &EncodeResult) -> f64 {
    result.commitment
}
