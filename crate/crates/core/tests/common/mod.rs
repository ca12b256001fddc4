#![allow(dead_code, clippy::too_many_arguments)]

use tempo_prune::model::{ModelConfig, Mode, UnitsKind};
use tempo_prune::planner::{prune_count, Policy, PrunePlan, PLAN_VERSION};
use tempo_prune::model::ConfigHash;

pub fn entangled(m: usize, n: usize, p: usize, d: usize, h: usize, layers: usize, causal: bool) -> ModelConfig {
    ModelConfig {
        mode: Mode::Entangled,
        num_layers: layers,
        num_timesteps: 1,
        num_frames: n,
        tokens_per_frame: p,
        text_tokens: m,
        model_dim: d,
        num_heads: h,
        causal,
        seed: 17,
    }
}

pub fn cascaded(
    m: usize,
    n: usize,
    p: usize,
    d: usize,
    h: usize,
    layers: usize,
    steps: usize,
    causal: bool,
) -> ModelConfig {
    ModelConfig {
        mode: Mode::Cascaded,
        num_layers: layers,
        num_timesteps: steps,
        num_frames: n,
        tokens_per_frame: p,
        text_tokens: m,
        model_dim: d,
        num_heads: h,
        causal,
        seed: 23,
    }
}

/// Plan pruning exactly `units`, with the ratio set so the cardinality rule holds.
pub fn plan_for(config: &ModelConfig, units: &[usize]) -> PrunePlan {
    let total = config.num_units();
    let ratio = units.len() as f64 / total as f64;
    assert_eq!(prune_count(ratio, total), units.len());
    let mut pruned = units.to_vec();
    pruned.sort_unstable();
    PrunePlan {
        version: PLAN_VERSION,
        ratio,
        units_kind: config.units_kind(),
        policy: Policy::RankedAas,
        num_units: total,
        pruned_units: pruned,
        source_profile_hash: ConfigHash(0),
    }
}

pub fn other_kind(kind: UnitsKind) -> UnitsKind {
    match kind {
        UnitsKind::Layer => UnitsKind::Timestep,
        UnitsKind::Timestep => UnitsKind::Layer,
    }
}
