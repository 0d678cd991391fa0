//! Loss terms and combiners for the multi-rate training objective.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_io::FeatureMatrix;

/// Weights of the total objective, including the three terms that make up
/// the reconstruction loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub mel: f64,
    pub gen: f64,
    pub feat: f64,
    pub commit: f64,
    pub emo: f64,
    pub cycle: f64,
    pub mr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mel: 15.0,
            gen: 1.0,
            feat: 2.0,
            commit: 0.25,
            emo: 25.0,
            cycle: 25.0,
            mr: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.mel, self.gen, self.feat, self.commit, self.emo, self.cycle, self.mr];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidConfig(format!("loss weights must be nonnegative: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleEntry {
    pub stage: usize,
    pub mel_weight: f64,
    pub cycle_weight: f64,
}

/// Supervision points for the multi-rate loss.
///
/// With `eta = None` each stage contributes `mel_weight·mel + cycle_weight·cycle`.
/// With `eta = Some(η)` the single-weight form `mel_weight·(mel + η·cycle)` is
/// used and `cycle_weight` is ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiRateSchedule {
    pub entries: Vec<ScheduleEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
}

impl Default for MultiRateSchedule {
    fn default() -> Self {
        let e = |stage, w| ScheduleEntry {
            stage,
            mel_weight: w,
            cycle_weight: w,
        };
        Self {
            entries: vec![e(2, 0.5), e(4, 0.3), e(8, 0.0)],
            eta: None,
        }
    }
}

impl MultiRateSchedule {
    pub fn validate(&self, max_stage: usize) -> Result<()> {
        for pair in self.entries.windows(2) {
            if pair[1].stage <= pair[0].stage {
                return Err(Error::InvalidConfig(format!(
                    "schedule stages must be strictly increasing ({} then {})",
                    pair[0].stage, pair[1].stage
                )));
            }
        }
        for e in &self.entries {
            if e.stage == 0 || e.stage > max_stage {
                return Err(Error::InvalidConfig(format!(
                    "schedule stage {} outside 1..={max_stage}",
                    e.stage
                )));
            }
            if !(e.mel_weight >= 0.0 && e.cycle_weight >= 0.0) {
                return Err(Error::InvalidConfig(format!("negative weight at stage {}", e.stage)));
            }
        }
        if let Some(eta) = self.eta {
            if !(eta.is_finite() && eta >= 0.0) {
                return Err(Error::InvalidConfig(format!("eta must be nonnegative, got {eta}")));
            }
        }
        Ok(())
    }

    pub fn stages(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.stage)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageTerms {
    pub mel: f64,
    pub cycle: f64,
}

/// Mean squared difference between predicted and reference emotion features.
pub fn emotion_feature_loss(predicted: &FeatureMatrix, reference: &FeatureMatrix) -> Result<f64> {
    if predicted.frames() != reference.frames() || predicted.dim() != reference.dim() {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            predicted.frames(),
            predicted.dim(),
            reference.frames(),
            reference.dim()
        )));
    }
    let n = predicted.as_slice().len();
    if n == 0 {
        return Ok(0.0);
    }
    let sse: f64 = predicted
        .as_slice()
        .iter()
        .zip(reference.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sse / n as f64)
}

/// Cosine distance `1 - cos(a, b)`, in [0, 2].
pub fn cycle_loss(predicted: &[f64], reference: &[f64]) -> Result<f64> {
    if predicted.len() != reference.len() {
        return Err(Error::Shape(format!(
            "embedding lengths differ: {} vs {}",
            predicted.len(),
            reference.len()
        )));
    }
    let dot: f64 = predicted.iter().zip(reference).map(|(a, b)| a * b).sum();
    let na = predicted.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = reference.iter().map(|b| b * b).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Precondition("cosine distance of a zero vector".into()));
    }
    Ok((1.0 - dot / (na * nb)).clamp(0.0, 2.0))
}

pub fn multirate_loss(terms: &BTreeMap<usize, StageTerms>, schedule: &MultiRateSchedule) -> Result<f64> {
    let mut total = 0.0;
    for e in &schedule.entries {
        let (wm, wc) = match schedule.eta {
            Some(eta) => (e.mel_weight, e.mel_weight * eta),
            None => (e.mel_weight, e.cycle_weight),
        };
        if wm == 0.0 && wc == 0.0 {
            continue;
        }
        let t = terms.get(&e.stage).ok_or_else(|| {
            Error::Precondition(format!("no loss terms supplied for supervised stage {}", e.stage))
        })?;
        total += wm * t.mel + wc * t.cycle;
    }
    Ok(total)
}

/// The reconstruction loss from its externally computed parts.
pub fn reconstruction_loss(mel: f64, gen: f64, feat: f64, w: &LossWeights) -> Result<f64> {
    check_finite(&[mel, gen, feat])?;
    Ok(w.mel * mel + w.gen * gen + w.feat * feat)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub rec: f64,
    pub commit: f64,
    pub emo: f64,
    pub cycle: f64,
    pub mr: f64,
}

/// rec + α·commit + β·emo + λ·cycle + δ·mr.
pub fn total_loss(t: &LossTerms, w: &LossWeights) -> Result<f64> {
    check_finite(&[t.rec, t.commit, t.emo, t.cycle, t.mr])?;
    Ok(t.rec + w.commit * t.commit + w.emo * t.emo + w.cycle * t.cycle + w.mr * t.mr)
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().find(|v| !v.is_finite()) {
        Some(v) => Err(Error::NonFinite(format!("loss term {v}"))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn emotion_loss_examples() {
        let z = FeatureMatrix::zeros(3, 4);
        assert_eq!(emotion_feature_loss(&z, &z).unwrap(), 0.0);
        let ones = FeatureMatrix::new(3, 4, vec![1.0; 12]).unwrap();
        assert_eq!(emotion_feature_loss(&ones, &z).unwrap(), 1.0);
        let a = FeatureMatrix::new(1, 2, vec![0.0, 0.0]).unwrap();
        let b = FeatureMatrix::new(1, 2, vec![3.0, 4.0]).unwrap();
        assert_eq!(emotion_feature_loss(&b, &a).unwrap(), 12.5);
        assert!(emotion_feature_loss(&a, &ones).is_err());
    }

    #[test]
    fn cycle_loss_examples() {
        assert!(cycle_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap().abs() < 1e-15);
        assert!((cycle_loss(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cycle_loss(&[1.0, -2.0], &[-1.0, 2.0]).unwrap() - 2.0).abs() < 1e-15);
        assert!(cycle_loss(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        // Invariant under positive scaling.
        let a = cycle_loss(&[0.3, 0.9, -0.1], &[1.0, 0.2, 0.5]).unwrap();
        let b = cycle_loss(&[3.0, 9.0, -1.0], &[0.5, 0.1, 0.25]).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn multirate_examples() {
        let s = MultiRateSchedule::default();
        let mut terms = BTreeMap::new();
        terms.insert(2, StageTerms::default());
        terms.insert(4, StageTerms::default());
        assert_eq!(multirate_loss(&terms, &s).unwrap(), 0.0);

        let unit = StageTerms { mel: 1.0, cycle: 1.0 };
        terms.insert(2, unit);
        terms.insert(4, unit);
        assert!((multirate_loss(&terms, &s).unwrap() - 1.6).abs() < 1e-12);

        terms.insert(8, StageTerms { mel: 123.0, cycle: 9.0 });
        assert!((multirate_loss(&terms, &s).unwrap() - 1.6).abs() < 1e-12);

        terms.remove(&4);
        assert!(matches!(multirate_loss(&terms, &s), Err(Error::Precondition(_))));
    }

    #[test]
    fn multirate_eta_form() {
        let s = MultiRateSchedule {
            eta: Some(2.0),
            ..MultiRateSchedule::default()
        };
        let mut terms = BTreeMap::new();
        terms.insert(2, StageTerms { mel: 1.0, cycle: 1.0 });
        terms.insert(4, StageTerms { mel: 1.0, cycle: 1.0 });
        // 0.5·(1 + 2) + 0.3·(1 + 2)
        assert!((multirate_loss(&terms, &s).unwrap() - 2.4).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(&LossTerms::default(), &w).unwrap(), 0.0);
        let unit = LossTerms { rec: 1.0, commit: 1.0, emo: 1.0, cycle: 1.0, mr: 1.0 };
        assert!((total_loss(&unit, &w).unwrap() - 52.25).abs() < 1e-12);
        let rec = reconstruction_loss(1.0, 1.0, 1.0, &w).unwrap();
        assert_eq!(rec, 18.0);
        let t = LossTerms { rec, ..unit };
        assert!((total_loss(&t, &w).unwrap() - 69.25).abs() < 1e-12);
        let bad = LossTerms { emo: f64::NAN, ..unit };
        assert!(matches!(total_loss(&bad, &w), Err(Error::NonFinite(_))));
    }

    #[test]
    fn schedule_validation() {
        assert!(MultiRateSchedule::default().validate(8).is_ok());
        assert!(MultiRateSchedule::default().validate(4).is_err());
        let mut s = MultiRateSchedule::default();
        s.entries.swap(0, 1);
        assert!(s.validate(8).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn multirate_is_linear(m2 in 0.0f64..10.0, c2 in 0.0f64..10.0, m4 in 0.0f64..10.0, c4 in 0.0f64..10.0) {
                let s = MultiRateSchedule::default();
                let mut terms = BTreeMap::new();
                terms.insert(2, StageTerms { mel: m2, cycle: c2 });
                terms.insert(4, StageTerms { mel: m4, cycle: c4 });
                let got = multirate_loss(&terms, &s).unwrap();
                let want = 0.5 * m2 + 0.5 * c2 + 0.3 * m4 + 0.3 * c4;
                prop_assert!((got - want).abs() < 1e-12);
            }
        }
    }
}
