//! Leakage probe, trainer and rate-distortion search.

pub mod pareto;
pub mod probe;
pub mod train;

pub use pareto::{
    analyze, exact_bits, find_knee, marginal_efficiency, pareto_front, rd_search, FrontAnalysis, ParetoPoint,
    RdCell,
};
pub use probe::{extract_probe_features, ols_r2, partition_code_values, Partition, ProbeReport};
pub use train::{train_quantizer, train_residual, TrainConfig, TrainReport};
