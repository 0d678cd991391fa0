//! Small straight-through trainer for the residual chain.

use crate::error::{Error, Result};
use crate::feature_io::FeatureMatrix;
use crate::quantizer::{flatten_stage_grads, EncodeOptions, QuantizerParams, ResidualQuantizer};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub commitment_weight: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            learning_rate: 1e-3,
            batch_size: 256,
            seed: 0,
            commitment_weight: 0.25,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if self.batch_size == 0
            || !positive(self.learning_rate)
            || !positive(self.adam_epsilon)
            || !(self.commitment_weight >= 0.0 && self.commitment_weight.is_finite())
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(Error::InvalidConfig(format!("bad trainer settings: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Minibatch objective at every iteration.
    pub curve: Vec<f64>,
    /// Full-data objective before the first step.
    pub initial_loss: f64,
    /// Full-data objective after the last step.
    pub final_loss: f64,
    /// Full-data reconstruction MSE after the last step.
    pub final_mse: f64,
}

/// MSE(Û, U) + w·commitment over every frame of `data`.
pub fn objective(q: &ResidualQuantizer, data: &FeatureMatrix, commitment_weight: f64) -> Result<(f64, f64)> {
    let r = q.quantize_latent(data, &EncodeOptions::default())?;
    let mse = mse(&r.quantized, data);
    Ok((mse + commitment_weight * r.commitment, mse))
}

pub(crate) fn mse(a: &FeatureMatrix, b: &FeatureMatrix) -> f64 {
    let n = a.as_slice().len();
    if n == 0 {
        return 0.0;
    }
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n as f64
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grads: &[f64], cfg: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_epsilon);
        }
    }
}

/// Minimizes MSE(Û, U) plus the weighted commitment term over minibatches
/// drawn without replacement from reshuffled epochs of `data`.
pub fn train_residual(
    data: &FeatureMatrix,
    quantizer: &ResidualQuantizer,
    cfg: &TrainConfig,
) -> Result<(ResidualQuantizer, TrainReport)> {
    cfg.validate()?;
    quantizer.validate()?;
    if data.dim() != quantizer.latent_dim() {
        return Err(Error::Shape(format!(
            "training data has {} dims, quantizer expects {}",
            data.dim(),
            quantizer.latent_dim()
        )));
    }
    if data.frames() == 0 {
        return Err(Error::Precondition("training data has no frames".into()));
    }
    let mut q = quantizer.clone();
    let (initial_loss, _) = objective(&q, data, cfg.commitment_weight)?;
    if !initial_loss.is_finite() {
        return Err(Error::Diverged {
            iteration: 0,
            last_finite_loss: f64::NAN,
        });
    }

    let mut rng = Rng::new(cfg.seed);
    let mut theta = q.parameter_vector();
    let mut adam = Adam::new(theta.len());
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let batch = cfg.batch_size.min(data.frames());
    let opts = EncodeOptions::default().with_cache();
    let mut curve = Vec::with_capacity(cfg.iterations);
    let mut last_finite = initial_loss;

    for it in 0..cfg.iterations {
        if cursor + batch > order.len() {
            order = rng.permutation(data.frames());
            cursor = 0;
        }
        let x = data.select_frames(&order[cursor..cursor + batch]);
        cursor += batch;

        let result = q.quantize_latent(&x, &opts)?;
        let n = x.as_slice().len() as f64;
        let mut upstream = FeatureMatrix::zeros(x.frames(), x.dim());
        let mut sse = 0.0;
        for (g, (a, b)) in upstream
            .as_mut_slice()
            .iter_mut()
            .zip(result.quantized.as_slice().iter().zip(x.as_slice()))
        {
            sse += (a - b) * (a - b);
            *g = 2.0 * (a - b) / n;
        }
        let loss = sse / n + cfg.commitment_weight * result.commitment;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                last_finite_loss: last_finite,
            });
        }
        last_finite = loss;
        curve.push(loss);

        let grads = q.backward(&result, &upstream, cfg.commitment_weight)?;
        let flat = flatten_stage_grads(&grads.stages[..q.num_stages()]);
        adam.update(&mut theta, &flat, cfg);
        q.set_parameter_vector(&theta)?;
    }

    let (final_loss, final_mse) = objective(&q, data, cfg.commitment_weight)?;
    if !final_loss.is_finite() {
        return Err(Error::Diverged {
            iteration: cfg.iterations,
            last_finite_loss: last_finite,
        });
    }
    Ok((
        q,
        TrainReport {
            curve,
            initial_loss,
            final_loss,
            final_mse,
        },
    ))
}

/// Trains the residual chain of `params` on latent-space data (pre and post
/// projections are left untouched).
pub fn train_quantizer(
    data: &FeatureMatrix,
    params: &QuantizerParams,
    cfg: &TrainConfig,
) -> Result<(QuantizerParams, TrainReport)> {
    let (quantizer, report) = train_residual(data, &params.quantizer, cfg)?;
    Ok((
        QuantizerParams {
            quantizer,
            ..params.clone()
        },
        report,
    ))
}
