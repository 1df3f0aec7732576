//! Fixtures shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tsim_core::agent::{AgentNet, EncoderSpec};
use tsim_core::env::{EnvConfig, Playpen};
use tsim_core::render::SceneStyle;
use tsim_core::Tensor;

pub fn playpen() -> Playpen {
    Playpen::new(EnvConfig::default(), SceneStyle::default()).expect("default config is valid")
}

pub fn agent(seed: u64) -> AgentNet {
    AgentNet::new(EncoderSpec::default(), 6, &mut ChaCha8Rng::seed_from_u64(seed)).expect("default spec")
}

/// `n` rendered frames from distinct episodes, stacked `[n, 6, 84, 84]`.
pub fn frames(n: usize) -> Tensor {
    let p = playpen();
    let obs: Vec<Tensor> = (0..n as u64).map(|s| p.reset(s).1.pixels).collect();
    Tensor::stack(&obs.iter().collect::<Vec<_>>()).expect("same shapes")
}
