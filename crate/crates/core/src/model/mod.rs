//! Desk-scale entangled and cascaded attention stacks.

mod config;
mod forward;
mod weights;

pub use config::{ConfigHash, Mode, ModelConfig, Segment, TokenLayout, UnitsKind};
pub use forward::{
    forward, forward_cascaded, forward_cascaded_metered, forward_entangled,
    forward_entangled_metered, ForwardOutput,
};
pub use weights::{
    synth_corpus, synth_weights, Pattern, Projections, SampleBatch, Weights, FORMAT_VERSION,
    SAMPLE_MAGIC, WEIGHTS_MAGIC,
};
