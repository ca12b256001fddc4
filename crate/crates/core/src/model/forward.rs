use super::config::{Mode, ModelConfig, Segment, TokenLayout};
use super::weights::{Projections, SampleBatch, Weights};
use crate::cost::{FlopTally, TallyMeter};
use crate::error::{Error, Result};
use crate::planner::{validate_plan, PrunePlan};
use crate::tensor_kernel::{
    attention_metered, matmul_metered, AttentionMap, KeyMask, LogitBias, MapTag, Matrix,
    SubmoduleKind,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Full sequence (entangled) or frame tokens only (cascaded).
    pub tokens: Matrix,
    /// One map per head per attention call, in execution order.
    pub maps: Vec<AttentionMap>,
}

/// Dispatches on `config.mode`.
pub fn forward(
    config: &ModelConfig,
    weights: &Weights,
    batch: &SampleBatch,
    plan: Option<&PrunePlan>,
    tally: Option<&mut FlopTally>,
) -> Result<ForwardOutput> {
    match config.mode {
        Mode::Entangled => forward_entangled_metered(config, weights, batch, plan, tally),
        Mode::Cascaded => forward_cascaded_metered(config, weights, batch, plan, tally),
    }
}

pub fn forward_entangled(
    config: &ModelConfig,
    weights: &Weights,
    batch: &SampleBatch,
    plan: Option<&PrunePlan>,
) -> Result<ForwardOutput> {
    forward_entangled_metered(config, weights, batch, plan, None)
}

pub fn forward_cascaded(
    config: &ModelConfig,
    weights: &Weights,
    batch: &SampleBatch,
    plan: Option<&PrunePlan>,
) -> Result<ForwardOutput> {
    forward_cascaded_metered(config, weights, batch, plan, None)
}

fn check_inputs(
    expected: Mode,
    config: &ModelConfig,
    weights: &Weights,
    batch: &SampleBatch,
    plan: Option<&PrunePlan>,
) -> Result<()> {
    config.validate()?;
    if config.mode != expected {
        return Err(Error::ModeMismatch(format!(
            "{expected:?} forward called with a {:?} config",
            config.mode
        )));
    }
    weights.check_matches(config)?;
    batch.check_matches(config)?;
    if let Some(plan) = plan {
        if plan.units_kind != config.units_kind() {
            return Err(Error::ModeMismatch(format!(
                "plan prunes {:?} units but a {:?} model prunes {:?} units",
                plan.units_kind,
                config.mode,
                config.units_kind()
            )));
        }
        validate_plan(plan, config)?;
    }
    Ok(())
}

/// Frame index of every position, `None` for text.
fn frame_table(layout: &TokenLayout) -> Vec<Option<usize>> {
    (0..layout.len())
        .map(|p| match layout.segment(p) {
            Segment::Text => None,
            Segment::Frame(f) => Some(f),
        })
        .collect()
}

struct ModuleCall<'a> {
    proj: &'a Projections,
    queries: &'a Matrix,
    keys: &'a Matrix,
    mask: &'a KeyMask,
    bias: Option<LogitBias<'a>>,
    tag: MapTag,
    unit: usize,
    query_offset: usize,
    key_offset: usize,
}

/// Multi-head attention followed by the output projection. Returns the
/// sub-module output (before the residual add) and one map per head.
fn run_module(
    config: &ModelConfig,
    call: ModuleCall<'_>,
    tally: &mut Option<&mut FlopTally>,
) -> Result<(Matrix, Vec<AttentionMap>)> {
    let mut meter = TallyMeter {
        tally: tally.as_deref_mut(),
        unit: call.unit,
        module: call.tag.kind,
        layout: config.layout(),
        query_offset: call.query_offset,
        key_offset: call.key_offset,
    };
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let q = matmul_metered(call.queries, &call.proj.query, &mut meter)?;
    let k = matmul_metered(call.keys, &call.proj.key, &mut meter)?;
    let v = matmul_metered(call.keys, &call.proj.value, &mut meter)?;
    let mut z = Matrix::zeros(call.queries.rows(), config.model_dim);
    let mut maps = Vec::with_capacity(config.num_heads);
    for head in 0..config.num_heads {
        let cols = head * dh;
        let (out, probs) = attention_metered(
            &q.column_block(cols, dh),
            &k.column_block(cols, dh),
            &v.column_block(cols, dh),
            call.mask,
            scale,
            call.bias,
            &mut meter,
        )?;
        z.set_block(0, cols, &out);
        maps.push(AttentionMap {
            probs,
            head,
            tag: call.tag,
            query_offset: call.query_offset,
            key_offset: call.key_offset,
        });
    }
    let y = matmul_metered(&z, &call.proj.output, &mut meter)?;
    Ok((y, maps))
}

/// Joint attention over `text ++ frames` at every layer, with a residual.
///
/// A pruned layer hides other frames' keys from frame-token queries before
/// the softmax, so their mass is renormalized onto text and own-frame keys.
pub fn forward_entangled_metered(
    config: &ModelConfig,
    weights: &Weights,
    batch: &SampleBatch,
    plan: Option<&PrunePlan>,
    mut tally: Option<&mut FlopTally>,
) -> Result<ForwardOutput> {
    check_inputs(Mode::Entangled, config, weights, batch, plan)?;
    let layout = config.layout();
    let frames = frame_table(&layout);
    let seq = layout.len();
    let pattern = weights.pattern;

    let mut parts = Vec::with_capacity(1 + batch.frames.len());
    parts.push(batch.text.clone());
    parts.extend(batch.frames.iter().cloned());
    let mut x = Matrix::vstack(&parts)?;
    let mut maps = Vec::with_capacity(config.num_layers * config.num_heads);

    for layer in 0..config.num_layers {
        let pruned = plan.is_some_and(|p| p.prunes(layer));
        let mask = KeyMask::from_fn(seq, seq, |i, j| {
            let causal_ok = !config.causal || j <= i;
            let cross_frame = matches!((frames[i], frames[j]), (Some(a), Some(b)) if a != b);
            causal_ok && !(pruned && cross_frame)
        });
        let bias = |i: usize, j: usize| match (frames[i], frames[j]) {
            (Some(a), Some(b)) if a != b => pattern.cross_frame_bias(layer, a, b),
            _ => 0.0,
        };
        let (y, layer_maps) = run_module(
            config,
            ModuleCall {
                proj: weights.module(config, 0, layer, SubmoduleKind::Joint),
                queries: &x,
                keys: &x,
                mask: &mask,
                bias: Some(&bias),
                tag: MapTag {
                    timestep: 0,
                    layer,
                    kind: SubmoduleKind::Joint,
                },
                unit: layer,
                query_offset: 0,
                key_offset: 0,
            },
            &mut tally,
        )?;
        x.add_assign(&y)?;
        maps.extend(layer_maps);
    }
    Ok(ForwardOutput { tokens: x, maps })
}

/// Stylized denoising loop: each timestep applies `num_layers` blocks of
/// spatial, then cross, then temporal attention to the frame latents, each
/// with a residual. A pruned timestep skips its temporal sub-modules.
pub fn forward_cascaded_metered(
    config: &ModelConfig,
    weights: &Weights,
    batch: &SampleBatch,
    plan: Option<&PrunePlan>,
    mut tally: Option<&mut FlopTally>,
) -> Result<ForwardOutput> {
    check_inputs(Mode::Cascaded, config, weights, batch, plan)?;
    let layout = config.layout();
    let frames = frame_table(&layout);
    let (m, n, p) = (config.text_tokens, config.num_frames, config.tokens_per_frame);
    let np = n * p;
    let pattern = weights.pattern;

    let mut x = Matrix::vstack(&batch.frames)?;
    let mut maps = Vec::new();

    let spatial_mask = if config.causal {
        KeyMask::causal(p)
    } else {
        KeyMask::all_visible(p, p)
    };
    let cross_mask = KeyMask::all_visible(np, m);
    let temporal_mask = if config.causal {
        KeyMask::causal(np)
    } else {
        KeyMask::all_visible(np, np)
    };

    for t in 0..config.num_timesteps {
        let pruned = plan.is_some_and(|pl| pl.prunes(t));
        for layer in 0..config.num_layers {
            let tag = |kind| MapTag {
                timestep: t,
                layer,
                kind,
            };

            let mut y = Matrix::zeros(np, config.model_dim);
            for f in 0..n {
                let xf = x.row_block(f * p, p);
                let offset = m + f * p;
                let (yf, frame_maps) = run_module(
                    config,
                    ModuleCall {
                        proj: weights.module(config, t, layer, SubmoduleKind::Spatial),
                        queries: &xf,
                        keys: &xf,
                        mask: &spatial_mask,
                        bias: None,
                        tag: tag(SubmoduleKind::Spatial),
                        unit: t,
                        query_offset: offset,
                        key_offset: offset,
                    },
                    &mut tally,
                )?;
                y.set_block(f * p, 0, &yf);
                maps.extend(frame_maps);
            }
            x.add_assign(&y)?;

            let (y, cross_maps) = run_module(
                config,
                ModuleCall {
                    proj: weights.module(config, t, layer, SubmoduleKind::Cross),
                    queries: &x,
                    keys: &batch.text,
                    mask: &cross_mask,
                    bias: None,
                    tag: tag(SubmoduleKind::Cross),
                    unit: t,
                    query_offset: m,
                    key_offset: 0,
                },
                &mut tally,
            )?;
            x.add_assign(&y)?;
            maps.extend(cross_maps);

            if pruned {
                continue;
            }
            let bias = |i: usize, j: usize| match (frames[m + i], frames[m + j]) {
                (Some(a), Some(b)) if a != b => pattern.cross_frame_bias(t, a, b),
                _ => 0.0,
            };
            let (y, temporal_maps) = run_module(
                config,
                ModuleCall {
                    proj: weights.module(config, t, layer, SubmoduleKind::Temporal),
                    queries: &x,
                    keys: &x,
                    mask: &temporal_mask,
                    bias: Some(&bias),
                    tag: tag(SubmoduleKind::Temporal),
                    unit: t,
                    query_offset: m,
                    key_offset: m,
                },
                &mut tally,
            )?;
            x.add_assign(&y)?;
            maps.extend(temporal_maps);
        }
    }
    Ok(ForwardOutput { tokens: x, maps })
}
