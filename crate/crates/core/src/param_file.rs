//! JSON parameter files and the shared CLI config document.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conditioning::CemWeights;
use crate::dropout::DropoutConfig;
use crate::error::{Error, Result};
use crate::losses::MultiRateSchedule;
use crate::matrix::{BlockDiagonal, Matrix};
use crate::quantizer::{
    QuantizerConfig, QuantizerParams, ResidualQuantizer, StageParams, Structure, DEFAULT_EPSILON,
    DEFAULT_FRAME_RATE_HZ,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDoc {
    #[serde(rename = "K")]
    pub stages: usize,
    pub d_e: usize,
    pub d_a: usize,
    pub f_e: usize,
    pub f_a: usize,
    pub levels: Vec<u32>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_frame_rate")]
    pub frame_rate_hz: u16,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}
fn default_frame_rate() -> u16 {
    DEFAULT_FRAME_RATE_HZ
}

impl ConfigDoc {
    pub fn to_config(&self) -> Result<QuantizerConfig> {
        QuantizerConfig::new(
            self.stages,
            self.d_e,
            self.d_a,
            self.f_e,
            self.f_a,
            self.levels.clone(),
            self.epsilon,
            self.frame_rate_hz,
        )
    }
}

impl From<&QuantizerConfig> for ConfigDoc {
    fn from(c: &QuantizerConfig) -> Self {
        Self {
            stages: c.stages(),
            d_e: c.emotion_latent(),
            d_a: c.acoustic_latent(),
            f_e: c.emotion_fsq(),
            f_a: c.acoustic_fsq(),
            levels: c.levels().levels().to_vec(),
            epsilon: c.epsilon(),
            frame_rate_hz: c.frame_rate_hz(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StageDoc {
    in_e: Matrix,
    in_a: Matrix,
    out_e: Matrix,
    out_a: Matrix,
    ell: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamDoc {
    config: ConfigDoc,
    pre_e: Matrix,
    pre_a: Matrix,
    #[serde(default)]
    post: Option<Matrix>,
    stages: Vec<StageDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cem: Option<CemWeights>,
}

/// Serializes config and parameters. Dense-structure parameters have no
/// emotion/acoustic blocks and cannot be written.
pub fn params_to_json(config: &QuantizerConfig, params: &QuantizerParams) -> Result<String> {
    if config.structure() != Structure::BlockDiagonal {
        return Err(Error::InvalidConfig(
            "only block-diagonal parameters can be written to a parameter file".into(),
        ));
    }
    params.validate(config)?;
    let stages = params
        .stages()
        .iter()
        .map(|s| {
            let (i, o) = (s.input.blocks(), s.output.blocks());
            StageDoc {
                in_e: i[0].clone(),
                in_a: i[1].clone(),
                out_e: o[0].clone(),
                out_a: o[1].clone(),
                ell: s.ell.clone(),
                bias: s.bias.clone(),
            }
        })
        .collect();
    let doc = ParamDoc {
        config: config.into(),
        pre_e: params.pre_e.clone(),
        pre_a: params.pre_a.clone(),
        post: params.post.clone(),
        stages,
        cem: params.cem.clone(),
    };
    let mut text = serde_json::to_string_pretty(&doc).map_err(|e| Error::ParamFile(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

pub fn params_from_json(text: &str) -> Result<(QuantizerConfig, QuantizerParams)> {
    let doc: ParamDoc = serde_json::from_str(text).map_err(|e| Error::ParamFile(e.to_string()))?;
    let config = doc.config.to_config()?;
    let stages = doc
        .stages
        .into_iter()
        .map(|s| StageParams {
            input: BlockDiagonal::new(vec![s.in_e, s.in_a]),
            output: BlockDiagonal::new(vec![s.out_e, s.out_a]),
            ell: s.ell,
            bias: s.bias,
        })
        .collect();
    let params = QuantizerParams {
        pre_e: doc.pre_e,
        pre_a: doc.pre_a,
        quantizer: ResidualQuantizer {
            levels: config.levels().clone(),
            epsilon: config.epsilon(),
            stages,
        },
        post: doc.post,
        cem: doc.cem,
    };
    params.validate(&config)?;
    Ok((config, params))
}

pub fn save_params(config: &QuantizerConfig, params: &QuantizerParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, params_to_json(config, params)?).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<(QuantizerConfig, QuantizerParams)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    params_from_json(&text)
}

/// Config document shared by the CLI commands. Every section is optional and
/// falls back to the defaults of the corresponding type.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfigDoc {
    #[serde(default)]
    pub quantizer: Option<ConfigDoc>,
    /// (D_e, D_a) of the raw feature streams; defaults to (d_e, d_a).
    #[serde(default)]
    pub input_dims: Option<(usize, usize)>,
    #[serde(default)]
    pub dropout: Option<DropoutConfig>,
    #[serde(default)]
    pub schedule: Option<MultiRateSchedule>,
}

impl CliConfigDoc {
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Self = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        doc.validate()?;
        Ok(doc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let config = self.quantizer_config()?;
        if let Some((de, da)) = self.input_dims {
            if de == 0 || da == 0 {
                return Err(Error::InvalidConfig("input_dims must be positive".into()));
            }
        }
        if let Some(d) = &self.dropout {
            d.validate()?;
            if d.full_k != config.stages() {
                return Err(Error::InvalidConfig(format!(
                    "dropout full_K={} but the quantizer has K={}",
                    d.full_k,
                    config.stages()
                )));
            }
        }
        if let Some(s) = &self.schedule {
            s.validate(config.stages())?;
        }
        Ok(())
    }

    pub fn quantizer_config(&self) -> Result<QuantizerConfig> {
        match &self.quantizer {
            Some(q) => q.to_config(),
            None => Ok(QuantizerConfig::standard()),
        }
    }

    pub fn input_dims(&self) -> Result<(usize, usize)> {
        let c = self.quantizer_config()?;
        Ok(self.input_dims.unwrap_or((c.emotion_latent(), c.acoustic_latent())))
    }

    /// The dropout section, or the default table when the quantizer has the
    /// default depth.
    pub fn dropout_config(&self) -> Result<DropoutConfig> {
        if let Some(d) = &self.dropout {
            return Ok(d.clone());
        }
        let d = DropoutConfig::default();
        let k = self.quantizer_config()?.stages();
        if k != d.full_k {
            return Err(Error::InvalidConfig(format!("K={k} needs an explicit dropout section")));
        }
        Ok(d)
    }

    /// The schedule section, or the default when it fits the quantizer depth.
    pub fn schedule(&self) -> Result<MultiRateSchedule> {
        if let Some(s) = &self.schedule {
            return Ok(s.clone());
        }
        let s = MultiRateSchedule::default();
        let k = self.quantizer_config()?.stages();
        s.validate(k)
            .map_err(|_| Error::InvalidConfig(format!("K={k} needs an explicit schedule section")))?;
        Ok(s)
    }
}
