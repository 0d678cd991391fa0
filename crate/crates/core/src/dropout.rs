//! Biased stage dropout and its alignment with the multi-rate supervision points.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::MultiRateSchedule;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutConfig {
    #[serde(rename = "full_K")]
    pub full_k: usize,
    pub dropout_probability: f64,
    /// (stage count, probability) pairs of the categorical draw.
    pub categorical: Vec<(usize, f64)>,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        Self {
            full_k: 8,
            dropout_probability: 0.75,
            categorical: vec![(2, 0.50), (4, 0.30), (8, 0.20)],
        }
    }
}

impl DropoutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.full_k == 0 {
            return Err(Error::InvalidConfig("full_k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.dropout_probability) {
            return Err(Error::InvalidConfig(format!(
                "dropout_probability {} outside [0, 1]",
                self.dropout_probability
            )));
        }
        for &(stage, p) in &self.categorical {
            if stage == 0 || stage > self.full_k {
                return Err(Error::InvalidConfig(format!(
                    "categorical stage {stage} outside 1..={}",
                    self.full_k
                )));
            }
            if !(p >= 0.0 && p.is_finite()) {
                return Err(Error::InvalidConfig(format!("probability {p} for stage {stage}")));
            }
        }
        if self.dropout_probability > 0.0 || !self.categorical.is_empty() {
            let total: f64 = self.categorical.iter().map(|c| c.1).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!(
                    "categorical probabilities sum to {total}, not 1"
                )));
            }
        }
        Ok(())
    }

    /// Closed-form P(active = m): p·cat(m) + (1 − p)·[m = K].
    pub fn marginal(&self, stage: usize) -> f64 {
        let cat: f64 = self
            .categorical
            .iter()
            .filter(|c| c.0 == stage)
            .map(|c| c.1)
            .sum();
        let full = if stage == self.full_k { 1.0 } else { 0.0 };
        self.dropout_probability * cat + (1.0 - self.dropout_probability) * full
    }
}

/// Active stage count for one training sample.
pub fn sample_active_stages(cfg: &DropoutConfig, rng: &mut Rng) -> usize {
    if rng.uniform() >= cfg.dropout_probability {
        return cfg.full_k;
    }
    let u = rng.uniform();
    let mut acc = 0.0;
    for &(stage, p) in &cfg.categorical {
        acc += p;
        if u < acc {
            return stage;
        }
    }
    // Rounding left u just above the cumulative total.
    cfg.categorical.last().map_or(cfg.full_k, |c| c.0)
}

/// Stage counts that are both dropout targets and multi-rate supervision
/// points; any stage present in only one of the two is an error.
pub fn supervision_points(cfg: &DropoutConfig, schedule: &MultiRateSchedule) -> Result<BTreeSet<usize>> {
    let targets: BTreeSet<usize> = cfg.categorical.iter().map(|c| c.0).collect();
    let supervised: BTreeSet<usize> = schedule.stages().collect();
    let differing: Vec<usize> = targets.symmetric_difference(&supervised).copied().collect();
    if !differing.is_empty() {
        return Err(Error::Misaligned(differing));
    }
    Ok(targets)
}
