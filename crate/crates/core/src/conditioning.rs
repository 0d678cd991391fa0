//! Coarse emotion conditioning: attentive pooling of frame-level emotion
//! features into one global embedding, and FiLM modulation of the acoustic
//! stream by that embedding. Weights are supplied by the caller.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_io::FeatureMatrix;
use crate::matrix::Matrix;

/// Two-layer score MLP: `score_t = w2 · tanh(w1 · e_t + b1) + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttnPoolWeights {
    /// H×D.
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// 1×H.
    pub w2: Matrix,
    pub b2: f64,
}

impl AttnPoolWeights {
    /// All-zero score weights: every frame gets the same score.
    pub fn uniform(dim: usize, hidden: usize) -> Self {
        Self {
            w1: Matrix::zeros(hidden, dim),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(1, hidden),
            b2: 0.0,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let h = self.w1.rows();
        if self.w1.cols() != dim || self.b1.len() != h || self.w2.rows() != 1 || self.w2.cols() != h {
            return Err(Error::Shape(format!(
                "attention pooling weights do not fit D={dim} (w1 {}x{}, b1 {}, w2 {}x{})",
                self.w1.rows(),
                self.w1.cols(),
                self.b1.len(),
                self.w2.rows(),
                self.w2.cols()
            )));
        }
        Ok(())
    }

    /// Softmax attention weights over frames.
    pub fn attention(&self, e: &FeatureMatrix) -> Result<Vec<f64>> {
        if e.frames() == 0 {
            return Err(Error::Precondition("attentive pooling needs at least one frame".into()));
        }
        self.validate(e.dim())?;
        let w2 = self.w2.row(0);
        let mut hidden = vec![0.0; self.b1.len()];
        let scores: Vec<f64> = e
            .rows()
            .map(|frame| {
                self.w1.mul_vec_into(frame, &mut hidden);
                hidden
                    .iter()
                    .zip(&self.b1)
                    .zip(w2)
                    .map(|((h, b), w)| w * (h + b).tanh())
                    .sum::<f64>()
                    + self.b2
            })
            .collect();
        Ok(softmax(&scores))
    }
}

/// γ = g_weight · e_g + g_bias, β = h_weight · e_g + h_bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilmWeights {
    pub g_weight: Matrix,
    pub g_bias: Vec<f64>,
    pub h_weight: Matrix,
    pub h_bias: Vec<f64>,
}

impl FilmWeights {
    /// γ ≡ 1 and β ≡ 0 regardless of the embedding.
    pub fn identity(embed_dim: usize, feature_dim: usize) -> Self {
        Self {
            g_weight: Matrix::zeros(feature_dim, embed_dim),
            g_bias: vec![1.0; feature_dim],
            h_weight: Matrix::zeros(feature_dim, embed_dim),
            h_bias: vec![0.0; feature_dim],
        }
    }

    pub fn validate(&self, embed_dim: usize, feature_dim: usize) -> Result<()> {
        let ok = |m: &Matrix, b: &[f64]| {
            m.rows() == feature_dim && m.cols() == embed_dim && b.len() == feature_dim
        };
        if !ok(&self.g_weight, &self.g_bias) || !ok(&self.h_weight, &self.h_bias) {
            return Err(Error::Shape(format!(
                "FiLM weights do not map a {embed_dim}-dim embedding onto {feature_dim} features"
            )));
        }
        Ok(())
    }

    pub fn gamma_beta(&self, embedding: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut gamma = self.g_weight.mul_vec(embedding);
        gamma.iter_mut().zip(&self.g_bias).for_each(|(g, b)| *g += b);
        let mut beta = self.h_weight.mul_vec(embedding);
        beta.iter_mut().zip(&self.h_bias).for_each(|(v, b)| *v += b);
        (gamma, beta)
    }
}

/// Optional CEM section of a parameter file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CemWeights {
    pub attn_pool: AttnPoolWeights,
    pub film: FilmWeights,
}

impl CemWeights {
    pub fn validate(&self, emotion_dim: usize, acoustic_dim: usize) -> Result<()> {
        self.attn_pool.validate(emotion_dim)?;
        self.film.validate(emotion_dim, acoustic_dim)
    }

    /// A_f = γ(e_g) ⊙ A + β(e_g), with e_g pooled from `emotion`.
    pub fn apply(&self, emotion: &FeatureMatrix, acoustic: &FeatureMatrix) -> Result<FeatureMatrix> {
        let pooled = attentive_pool(emotion, &self.attn_pool)?;
        film_modulate(acoustic, &pooled, &self.film)
    }
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Softmax-weighted temporal average of the frames of `e`.
pub fn attentive_pool(e: &FeatureMatrix, w: &AttnPoolWeights) -> Result<Vec<f64>> {
    let alpha = w.attention(e)?;
    let mut out = vec![0.0; e.dim()];
    for (a, frame) in alpha.iter().zip(e.rows()) {
        for (o, v) in out.iter_mut().zip(frame) {
            *o += a * v;
        }
    }
    Ok(out)
}

pub fn film_modulate(a: &FeatureMatrix, embedding: &[f64], w: &FilmWeights) -> Result<FeatureMatrix> {
    w.validate(embedding.len(), a.dim())?;
    let (gamma, beta) = w.gamma_beta(embedding);
    let data = a
        .rows()
        .flat_map(|frame| {
            frame
                .iter()
                .zip(&gamma)
                .zip(&beta)
                .map(|((x, g), b)| g * x + b)
        })
        .collect();
    FeatureMatrix::new(a.frames(), a.dim(), data)
}
