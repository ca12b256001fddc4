use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{ConfigHash, Mode, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor_kernel::{Matrix, SubmoduleKind};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"F3PW";
pub const SAMPLE_MAGIC: &[u8; 4] = b"F3PS";
pub const FORMAT_VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 8;

/// Query, key, value and output projections of one attention sub-module,
/// each `model_dim x model_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projections {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
    pub output: Matrix,
}

impl Projections {
    fn zeros(d: usize) -> Self {
        Self {
            query: Matrix::zeros(d, d),
            key: Matrix::zeros(d, d),
            value: Matrix::zeros(d, d),
            output: Matrix::zeros(d, d),
        }
    }

    fn matrices(&self) -> [&Matrix; 4] {
        [&self.query, &self.key, &self.value, &self.output]
    }
}

/// Logit bias planted on cross-frame keys.
///
/// A key in frame `j` seen from a query in frame `i != j` at unit `u` gets
/// `-(decay * u + locality * |i - j|)` added to its logit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pattern {
    pub decay: f64,
    pub locality: f64,
}

impl Pattern {
    pub const NONE: Pattern = Pattern {
        decay: 0.0,
        locality: 0.0,
    };

    #[inline]
    pub fn cross_frame_bias(&self, unit: usize, frame_i: usize, frame_j: usize) -> f64 {
        -(self.decay * unit as f64 + self.locality * frame_i.abs_diff(frame_j) as f64)
    }
}

/// All projection matrices of a model, stored flat in declaration order:
/// entangled models hold one joint module per layer; cascaded models hold
/// spatial, cross and temporal modules for each (timestep, layer).
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub config_hash: ConfigHash,
    pub pattern: Pattern,
    modules: Vec<Projections>,
}

const CASCADED_ORDER: [SubmoduleKind; 3] = [
    SubmoduleKind::Spatial,
    SubmoduleKind::Cross,
    SubmoduleKind::Temporal,
];

fn module_count(config: &ModelConfig) -> usize {
    match config.mode {
        Mode::Entangled => config.num_layers,
        Mode::Cascaded => config.num_timesteps * config.num_layers * CASCADED_ORDER.len(),
    }
}

fn module_index(config: &ModelConfig, timestep: usize, layer: usize, kind: SubmoduleKind) -> usize {
    match (config.mode, kind) {
        (Mode::Entangled, SubmoduleKind::Joint) => layer,
        (Mode::Cascaded, kind) if kind != SubmoduleKind::Joint => {
            let k = CASCADED_ORDER.iter().position(|&c| c == kind).unwrap();
            (timestep * config.num_layers + layer) * CASCADED_ORDER.len() + k
        }
        (mode, kind) => panic!("{kind:?} sub-module does not exist in {mode:?} models"),
    }
}

impl Weights {
    /// Every projection zero: all logits vanish and every layer is an identity.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config_hash: config.hash(),
            pattern: Pattern::NONE,
            modules: vec![Projections::zeros(config.model_dim); module_count(config)],
        })
    }

    pub fn module(
        &self,
        config: &ModelConfig,
        timestep: usize,
        layer: usize,
        kind: SubmoduleKind,
    ) -> &Projections {
        &self.modules[module_index(config, timestep, layer, kind)]
    }

    pub fn module_mut(
        &mut self,
        config: &ModelConfig,
        timestep: usize,
        layer: usize,
        kind: SubmoduleKind,
    ) -> &mut Projections {
        &mut self.modules[module_index(config, timestep, layer, kind)]
    }

    pub fn check_matches(&self, config: &ModelConfig) -> Result<()> {
        let expected = config.hash();
        if self.config_hash != expected {
            return Err(Error::HashMismatch {
                expected,
                actual: self.config_hash,
            });
        }
        if self.modules.len() != module_count(config) {
            return Err(Error::Shape(format!(
                "{} modules for a config needing {}",
                self.modules.len(),
                module_count(config)
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = header(WEIGHTS_MAGIC, self.config_hash);
        for m in &self.modules {
            for mat in m.matrices() {
                put_f64s(&mut buf, mat.data());
            }
        }
        put_f64s(&mut buf, &[self.pattern.decay, self.pattern.locality]);
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let bytes = fs::read(path.as_ref())?;
        let body = read_header(&bytes, WEIGHTS_MAGIC, config.hash())?;
        let d = config.model_dim;
        let count = module_count(config);
        let mut values = F64Reader::new(body, count * 4 * d * d + 2)?;
        let mut modules = Vec::with_capacity(count);
        for _ in 0..count {
            modules.push(Projections {
                query: values.matrix(d, d)?,
                key: values.matrix(d, d)?,
                value: values.matrix(d, d)?,
                output: values.matrix(d, d)?,
            });
        }
        let pattern = Pattern {
            decay: values.next(),
            locality: values.next(),
        };
        Ok(Self {
            config_hash: config.hash(),
            pattern,
            modules,
        })
    }
}

/// Random projections with entries drawn from `N(0, 1/d)` plus the planted
/// cross-frame logit pattern. Output projections are further scaled by one
/// over the number of residual adds, which keeps the residual stream (and
/// so the logits) bounded however deep the stack is.
pub fn synth_weights(config: &ModelConfig, decay: f64, locality: f64, seed: u64) -> Result<Weights> {
    config.validate()?;
    if !(decay >= 0.0 && locality >= 0.0 && decay.is_finite() && locality.is_finite()) {
        return Err(Error::Config(format!(
            "pattern parameters must be finite and non-negative (decay {decay}, locality {locality})"
        )));
    }
    let d = config.model_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
    let count = module_count(config);
    let out_scale = 1.0 / count as f64;
    let mut draw = |scale: f64| Matrix::from_fn(d, d, |_, _| scale * normal.sample(&mut rng));
    let modules = (0..count)
        .map(|_| Projections {
            query: draw(1.0),
            key: draw(1.0),
            value: draw(1.0),
            output: draw(out_scale),
        })
        .collect();
    Ok(Weights {
        config_hash: config.hash(),
        pattern: Pattern { decay, locality },
        modules,
    })
}

/// One calibration input: text embeddings (`M x d`) and one `P x d` matrix
/// per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub id: u64,
    pub text: Matrix,
    pub frames: Vec<Matrix>,
}

impl SampleBatch {
    /// Frames share a per-sample base pattern plus independent noise, so
    /// neighbouring frames look alike the way video frames do.
    pub fn synth(config: &ModelConfig, id: u64, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let p = config.tokens_per_frame;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id);
        let normal = Normal::new(0.0, 1.0).expect("valid std");
        let text = Matrix::from_fn(config.text_tokens, d, |_, _| normal.sample(&mut rng));
        let base = Matrix::from_fn(p, d, |_, _| normal.sample(&mut rng));
        let frames = (0..config.num_frames)
            .map(|_| Matrix::from_fn(p, d, |i, j| base.get(i, j) + 0.5 * normal.sample(&mut rng)))
            .collect();
        Ok(Self { id, text, frames })
    }

    pub fn check_matches(&self, config: &ModelConfig) -> Result<()> {
        let d = config.model_dim;
        if self.text.shape() != (config.text_tokens, d) {
            return Err(Error::Shape(format!(
                "text embeddings {:?}, expected {:?}",
                self.text.shape(),
                (config.text_tokens, d)
            )));
        }
        if self.frames.len() != config.num_frames
            || self
                .frames
                .iter()
                .any(|f| f.shape() != (config.tokens_per_frame, d))
        {
            return Err(Error::Shape("frame embeddings do not match config".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>, config: &ModelConfig) -> Result<()> {
        self.check_matches(config)?;
        let mut buf = header(SAMPLE_MAGIC, config.hash());
        buf.extend_from_slice(&self.id.to_le_bytes());
        put_f64s(&mut buf, self.text.data());
        for f in &self.frames {
            put_f64s(&mut buf, f.data());
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let bytes = fs::read(path.as_ref())?;
        let body = read_header(&bytes, SAMPLE_MAGIC, config.hash())?;
        if body.len() < 8 {
            return Err(Error::Truncated("sample id missing".into()));
        }
        let id = u64::from_le_bytes(body[..8].try_into().unwrap());
        let d = config.model_dim;
        let (m, n, p) = (config.text_tokens, config.num_frames, config.tokens_per_frame);
        let mut values = F64Reader::new(&body[8..], (m + n * p) * d)?;
        let text = values.matrix(m, d)?;
        let frames = (0..n).map(|_| values.matrix(p, d)).collect::<Result<_>>()?;
        Ok(Self { id, text, frames })
    }
}

pub fn synth_corpus(config: &ModelConfig, size: usize, seed: u64) -> Result<Vec<SampleBatch>> {
    (0..size as u64)
        .map(|id| SampleBatch::synth(config, id, seed))
        .collect()
}

fn header(magic: &[u8; 4], hash: ConfigHash) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(magic);
    buf.push(FORMAT_VERSION);
    buf.extend_from_slice(&hash.0.to_le_bytes());
    buf
}

fn read_header<'a>(bytes: &'a [u8], magic: &[u8; 4], expected: ConfigHash) -> Result<&'a [u8]> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated(format!(
            "{} bytes is shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[..4] != magic {
        return Err(Error::Malformed(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(Error::Malformed(format!("unsupported version {}", bytes[4])));
    }
    let actual = ConfigHash(u64::from_le_bytes(bytes[5..13].try_into().unwrap()));
    if actual != expected {
        return Err(Error::HashMismatch { expected, actual });
    }
    Ok(&bytes[HEADER_LEN..])
}

fn put_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct F64Reader<'a> {
    chunks: std::slice::ChunksExact<'a, u8>,
}

impl<'a> F64Reader<'a> {
    fn new(body: &'a [u8], expected: usize) -> Result<Self> {
        let want = expected * 8;
        if body.len() < want {
            return Err(Error::Truncated(format!(
                "payload has {} bytes, expected {want}",
                body.len()
            )));
        }
        if body.len() > want {
            return Err(Error::Malformed(format!(
                "{} trailing bytes after payload",
                body.len() - want
            )));
        }
        Ok(Self {
            chunks: body.chunks_exact(8),
        })
    }

    fn next(&mut self) -> f64 {
        f64::from_le_bytes(self.chunks.next().unwrap().try_into().unwrap())
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let data = (0..rows * cols).map(|_| self.next()).collect();
        Matrix::new(rows, cols, data)
    }
}
