use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One joint softmax over text and all frame tokens per layer.
    Entangled,
    /// Spatial, cross and temporal sub-modules applied in sequence, once per
    /// layer per denoising timestep.
    Cascaded,
}

/// Granularity at which temporal attention is removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitsKind {
    Layer,
    Timestep,
}

impl Mode {
    pub fn units_kind(self) -> UnitsKind {
        match self {
            Mode::Entangled => UnitsKind::Layer,
            Mode::Cascaded => UnitsKind::Timestep,
        }
    }
}

/// 64-bit digest identifying the config an artifact was produced from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConfigHash(pub u64);

impl ConfigHash {
    /// First eight bytes (little-endian) of the SHA-256 of `bytes`.
    pub fn of_bytes(bytes: &[u8]) -> Self {
        let digest = Sha256::digest(bytes);
        let mut head = [0u8; 8];
        head.copy_from_slice(&digest[..8]);
        ConfigHash(u64::from_le_bytes(head))
    }
}

impl fmt::Display for ConfigHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl std::str::FromStr for ConfigHash {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.len() != 16 {
            return Err(Error::Malformed(format!("hash {s:?} is not 16 hex digits")));
        }
        u64::from_str_radix(s, 16)
            .map(ConfigHash)
            .map_err(|_| Error::Malformed(format!("hash {s:?} is not hexadecimal")))
    }
}

impl Serialize for ConfigHash {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ConfigHash {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Architecture geometry.
///
/// `num_frames` is the frame count N, `tokens_per_frame` is P and
/// `text_tokens` is M. Entangled stacks always have a single timestep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: Mode,
    pub num_layers: usize,
    pub num_timesteps: usize,
    pub num_frames: usize,
    pub tokens_per_frame: usize,
    pub text_tokens: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub causal: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.num_layers < 1 {
            return fail("num_layers must be at least 1");
        }
        if self.num_timesteps < 1 {
            return fail("num_timesteps must be at least 1");
        }
        if self.mode == Mode::Entangled && self.num_timesteps != 1 {
            return fail("entangled models have exactly one timestep");
        }
        if self.num_frames < 2 {
            return fail("num_frames must be at least 2");
        }
        if self.tokens_per_frame < 1 {
            return fail("tokens_per_frame must be at least 1");
        }
        if self.text_tokens < 1 {
            return fail("text_tokens must be at least 1");
        }
        if self.num_heads < 1 || self.model_dim < 1 {
            return fail("model_dim and num_heads must be positive");
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return fail("model_dim must be divisible by num_heads");
        }
        Ok(())
    }

    pub fn hash(&self) -> ConfigHash {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        ConfigHash::of_bytes(&canonical)
    }

    pub fn layout(&self) -> TokenLayout {
        TokenLayout {
            text_tokens: self.text_tokens,
            num_frames: self.num_frames,
            tokens_per_frame: self.tokens_per_frame,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn units_kind(&self) -> UnitsKind {
        self.mode.units_kind()
    }

    /// Number of prune units: layers when entangled, timesteps when cascaded.
    pub fn num_units(&self) -> usize {
        match self.mode {
            Mode::Entangled => self.num_layers,
            Mode::Cascaded => self.num_timesteps,
        }
    }

    pub fn frame_token_count(&self) -> usize {
        self.num_frames * self.tokens_per_frame
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Text,
    Frame(usize),
}

/// Text tokens first, then frames back to back.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    pub text_tokens: usize,
    pub num_frames: usize,
    pub tokens_per_frame: usize,
}

impl TokenLayout {
    pub fn len(&self) -> usize {
        self.text_tokens + self.num_frames * self.tokens_per_frame
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn text_span(&self) -> Range<usize> {
        0..self.text_tokens
    }

    pub fn frame_span(&self, frame: usize) -> Range<usize> {
        let start = self.text_tokens + frame * self.tokens_per_frame;
        start..start + self.tokens_per_frame
    }

    /// Panics if `pos` lies outside the sequence.
    #[inline]
    pub fn segment(&self, pos: usize) -> Segment {
        assert!(pos < self.len(), "position {pos} outside layout");
        if pos < self.text_tokens {
            Segment::Text
        } else {
            Segment::Frame((pos - self.text_tokens) / self.tokens_per_frame)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample_config() -> ModelConfig {
        ModelConfig {
            mode: Mode::Entangled,
            num_layers: 2,
            num_timesteps: 1,
            num_frames: 3,
            tokens_per_frame: 2,
            text_tokens: 2,
            model_dim: 4,
            num_heads: 2,
            causal: false,
            seed: 1,
        }
    }

    #[test]
    fn layout_spans_partition_the_sequence() {
        let layout = sample_config().layout();
        let mut covered = vec![0u8; layout.len()];
        for p in layout.text_span() {
            covered[p] += 1;
            assert_eq!(layout.segment(p), Segment::Text);
        }
        for f in 0..layout.num_frames {
            for p in layout.frame_span(f) {
                covered[p] += 1;
                assert_eq!(layout.segment(p), Segment::Frame(f));
            }
        }
        assert!(covered.iter().all(|&c| c == 1));
    }

    #[test]
    fn validation_catches_each_invariant() {
        let ok = sample_config();
        ok.validate().unwrap();
        let broken = [
            ModelConfig { num_layers: 0, ..ok },
            ModelConfig { num_frames: 1, ..ok },
            ModelConfig { tokens_per_frame: 0, ..ok },
            ModelConfig { text_tokens: 0, ..ok },
            ModelConfig { num_heads: 3, ..ok },
            ModelConfig { num_timesteps: 2, ..ok },
        ];
        for cfg in broken {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
        ModelConfig {
            mode: Mode::Cascaded,
            num_timesteps: 4,
            ..ok
        }
        .validate()
        .unwrap();
    }

    #[test]
    fn hash_tracks_every_field() {
        let a = sample_config();
        assert_eq!(a.hash(), a.hash());
        assert_ne!(a.hash(), ModelConfig { seed: 2, ..a }.hash());
        assert_ne!(a.hash(), ModelConfig { causal: true, ..a }.hash());
    }

    #[test]
    fn hash_text_round_trips() {
        let h = sample_config().hash();
        assert_eq!(h.to_string().parse::<ConfigHash>().unwrap(), h);
        assert!("xyz".parse::<ConfigHash>().is_err());
    }
}
