//! Block-diagonal residual finite scalar quantization for emotion-aware
//! speech tokens.

pub mod analysis;
pub mod bitstream;
pub mod cli;
pub mod conditioning;
pub mod dropout;
pub mod error;
pub mod feature_io;
pub mod fsq;
pub mod losses;
pub mod matrix;
pub mod param_file;
pub mod quantizer;
pub mod rng;
pub mod selftest;

pub use error::{Error, Result};
pub use feature_io::FeatureMatrix;
pub use fsq::{LevelSpec, Token};
pub use quantizer::{QuantizerConfig, QuantizerParams, Structure, TokenGrid};
pub use rng::Rng;
