//! Fixtures shared by the benchmarks.

use slotmixer_core::data::synthetic::noisy_sines;
use slotmixer_core::data::{prepare, PreparedData, SplitSpec};
use slotmixer_core::model::{ModelConfig, ModelParams};
use slotmixer_core::{Rng, Tensor};

/// A mid-sized config: `L = 96`, `T = 24`, seven channels.
pub fn bench_config(lookback: usize) -> ModelConfig {
    let mut cfg = ModelConfig::new(lookback, 24, 7);
    cfg.blocks = 2;
    cfg.slots = 16;
    cfg.hidden = 64;
    cfg
}

pub fn params(cfg: &ModelConfig) -> ModelParams {
    ModelParams::init(cfg, &mut Rng::seed_from(0)).expect("valid bench config")
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::seed_from(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).expect("shape matches data")
}

/// Small two-tone series windowed for quick fitness evaluations.
pub fn tiny_data() -> PreparedData {
    let series = noisy_sines(600, &[12.0, 20.0], 0.05, 0);
    prepare(&series, &SplitSpec::DEFAULT, 24, 6, None, 1).expect("series long enough")
}
