//! Shared fixtures for the kernel benchmarks.

use nnquine::{FixedProjections, NetworkSpec, ParamVector, TrainConfig};

/// Default-initialised parameters and projections for `spec` at seed 0.
pub fn fixture(spec: NetworkSpec) -> (TrainConfig, ParamVector, FixedProjections) {
    let cfg = TrainConfig::new(spec);
    let params = cfg.init_params();
    let proj = cfg.projections();
    (cfg, params, proj)
}
