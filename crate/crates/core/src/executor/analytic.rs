//! Closed-form FLOP counts under the convention in [`crate::tensor_kernel::flops`].

use crate::cost::{CostClass, CostKey, FlopTally};
use crate::model::{Mode, ModelConfig};
use crate::planner::PrunePlan;
use crate::tensor_kernel::{flops, SubmoduleKind};

/// Visible (query, key) pairs in a block where each of `n` groups of `p`
/// queries attends to its own `p` keys.
fn intra_frame_pairs(n: usize, p: usize, causal: bool) -> usize {
    if causal {
        n * p * (p + 1) / 2
    } else {
        n * p * p
    }
}

/// Pairs between frame-token queries and keys of other frames.
fn cross_frame_pairs(n: usize, p: usize, causal: bool) -> usize {
    if causal {
        p * p * n * (n - 1) / 2
    } else {
        n * (n - 1) * p * p
    }
}

/// Expected tally of one forward pass with the given plan applied.
pub fn analytic_tally(config: &ModelConfig, plan: Option<&PrunePlan>) -> FlopTally {
    let (m, n, p) = (config.text_tokens, config.num_frames, config.tokens_per_frame);
    let (d, h, dh) = (config.model_dim, config.num_heads, config.head_dim());
    let causal = config.causal;
    let entry = h as u64 * flops::attention_entry(dh, dh);
    let np = n * p;
    let pruned = |unit: usize| plan.is_some_and(|pl| pl.prunes(unit));

    let mut tally = FlopTally::new();
    let mut put = |unit, module, class, count: u64| tally.add(CostKey { unit, module, class }, count);

    match config.mode {
        Mode::Entangled => {
            let seq = m + np;
            let joint = SubmoduleKind::Joint;
            for layer in 0..config.num_layers {
                let text_pairs = if causal { m * (m + 1) / 2 } else { m * seq };
                put(layer, joint, CostClass::Projection, 4 * flops::matmul(seq, d, d));
                put(layer, joint, CostClass::Text, text_pairs as u64 * entry);
                put(layer, joint, CostClass::Ca, (np * m) as u64 * entry);
                put(layer, joint, CostClass::Sa, intra_frame_pairs(n, p, causal) as u64 * entry);
                if !pruned(layer) {
                    put(layer, joint, CostClass::Ta, cross_frame_pairs(n, p, causal) as u64 * entry);
                }
            }
        }
        Mode::Cascaded => {
            for t in 0..config.num_timesteps {
                for _ in 0..config.num_layers {
                    let sp = SubmoduleKind::Spatial;
                    put(t, sp, CostClass::Projection, 4 * n as u64 * flops::matmul(p, d, d));
                    put(t, sp, CostClass::Sa, intra_frame_pairs(n, p, causal) as u64 * entry);

                    let cr = SubmoduleKind::Cross;
                    put(
                        t,
                        cr,
                        CostClass::Projection,
                        2 * flops::matmul(np, d, d) + 2 * flops::matmul(m, d, d),
                    );
                    put(t, cr, CostClass::Ca, (np * m) as u64 * entry);

                    if pruned(t) {
                        continue;
                    }
                    let tm = SubmoduleKind::Temporal;
                    put(t, tm, CostClass::Projection, 4 * flops::matmul(np, d, d));
                    put(t, tm, CostClass::Sa, intra_frame_pairs(n, p, causal) as u64 * entry);
                    put(t, tm, CostClass::Ta, cross_frame_pairs(n, p, causal) as u64 * entry);
                }
            }
        }
    }
    tally
}
