//! Attention-mass partitioning and aggregate attention scores.
//!
//! A frame-token query row splits its probability mass three ways: text keys
//! (cross-modal), keys of its own frame (spatial) and keys of other frames
//! (temporal). The aggregate attention score (AAS) of a prune unit is the mean
//! temporal mass over every frame-token query row of that unit's maps, with
//! heads averaged first. Text-token query rows never contribute.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, ConfigHash, Mode, ModelConfig, SampleBatch, TokenLayout, UnitsKind, Weights};
use crate::tensor_kernel::{AttentionMap, MapTag, SubmoduleKind};

pub const PROFILE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowMass {
    /// Global sequence position of the query.
    pub query: usize,
    pub frame: usize,
    pub ca: f64,
    pub sa: f64,
    pub ta: f64,
}

impl RowMass {
    pub fn total(&self) -> f64 {
        self.ca + self.sa + self.ta
    }
}

/// Frame-token rows of one map, split into cross-modal, spatial and temporal mass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPartition {
    pub tag: MapTag,
    pub rows: Vec<RowMass>,
}

impl AttentionPartition {
    pub fn frame_rows(&self) -> usize {
        self.rows.len()
    }

    /// Summed `(ca, sa, ta)` over all frame-token rows.
    pub fn totals(&self) -> (f64, f64, f64) {
        self.rows.iter().fold((0.0, 0.0, 0.0), |(c, s, t), r| {
            (c + r.ca, s + r.sa, t + r.ta)
        })
    }
}

#[derive(Clone, Copy)]
enum KeyClass {
    Text,
    Frame(usize),
}

pub fn partition_map(map: &AttentionMap, layout: &TokenLayout) -> Result<AttentionPartition> {
    let (rows, cols) = map.probs.shape();
    if map.query_offset + rows > layout.len() || map.key_offset + cols > layout.len() {
        return Err(Error::Shape(format!(
            "{rows}x{cols} map at offsets ({}, {}) does not fit a {}-token layout",
            map.query_offset,
            map.key_offset,
            layout.len()
        )));
    }
    let key_class: Vec<KeyClass> = (0..cols)
        .map(|c| match layout.segment(map.key_offset + c) {
            crate::model::Segment::Text => KeyClass::Text,
            crate::model::Segment::Frame(f) => KeyClass::Frame(f),
        })
        .collect();
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let query = map.query_offset + r;
        let crate::model::Segment::Frame(frame) = layout.segment(query) else {
            continue;
        };
        let (mut ca, mut sa, mut ta) = (0.0, 0.0, 0.0);
        for (p, class) in map.probs.row(r).iter().zip(&key_class) {
            match class {
                KeyClass::Text => ca += p,
                KeyClass::Frame(f) if *f == frame => sa += p,
                KeyClass::Frame(_) => ta += p,
            }
        }
        out.push(RowMass {
            query,
            frame,
            ca,
            sa,
            ta,
        });
    }
    Ok(AttentionPartition {
        tag: map.tag,
        rows: out,
    })
}

/// Mean temporal mass per frame-token query row across all partitions.
pub fn aas_of_unit(partitions: &[AttentionPartition]) -> Result<f64> {
    let rows: usize = partitions.iter().map(AttentionPartition::frame_rows).sum();
    if rows == 0 {
        return Err(Error::Empty("unit has no frame-token query rows".into()));
    }
    let ta: f64 = partitions
        .iter()
        .flat_map(|p| p.rows.iter())
        .map(|r| r.ta)
        .sum();
    Ok(ta / rows as f64)
}

/// Kind of map whose temporal mass defines a unit's score, and the unit a
/// map belongs to.
fn profiled_unit(mode: Mode, tag: &MapTag) -> Option<usize> {
    match (mode, tag.kind) {
        (Mode::Entangled, SubmoduleKind::Joint) => Some(tag.layer),
        (Mode::Cascaded, SubmoduleKind::Temporal) => Some(tag.timestep),
        _ => None,
    }
}

/// Head-averaged partitions of every profiled map, grouped by unit.
pub fn partitions_by_unit(
    config: &ModelConfig,
    maps: &[AttentionMap],
) -> Result<BTreeMap<usize, Vec<AttentionPartition>>> {
    let layout = config.layout();
    let mut groups: BTreeMap<(usize, MapTag, usize, usize), Vec<&AttentionMap>> = BTreeMap::new();
    for map in maps {
        if let Some(unit) = profiled_unit(config.mode, &map.tag) {
            if !map.probs.is_finite() {
                return Err(Error::NonFiniteAttention { unit });
            }
            groups
                .entry((unit, map.tag, map.query_offset, map.key_offset))
                .or_default()
                .push(map);
        }
    }
    let mut by_unit: BTreeMap<usize, Vec<AttentionPartition>> = BTreeMap::new();
    for ((unit, ..), heads) in groups {
        let averaged = AttentionMap::average_heads(&heads)?;
        by_unit
            .entry(unit)
            .or_default()
            .push(partition_map(&averaged, &layout)?);
    }
    Ok(by_unit)
}

/// Per-unit AAS of one forward pass, in unit order.
pub fn unit_scores(config: &ModelConfig, maps: &[AttentionMap]) -> Result<Vec<f64>> {
    let by_unit = partitions_by_unit(config, maps)?;
    (0..config.num_units())
        .map(|unit| {
            let parts = by_unit.get(&unit).ok_or_else(|| {
                Error::Empty(format!("no temporal attention maps recorded for unit {unit}"))
            })?;
            aas_of_unit(parts)
        })
        .collect()
}

/// Checks that every frame-token row of every map splits into masses that
/// sum to one.
pub fn check_partition_identity(
    config: &ModelConfig,
    maps: &[AttentionMap],
    tol: f64,
) -> Result<()> {
    let layout = config.layout();
    for map in maps {
        let part = partition_map(map, &layout)?;
        for row in &part.rows {
            let total = row.total();
            if (total - 1.0).abs() > tol || row.ca < 0.0 || row.sa < 0.0 || row.ta < 0.0 {
                return Err(Error::Invariant(format!(
                    "partition identity: {:?} head {} query {} sums to {total}",
                    map.tag, map.head, row.query
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    PerQueryMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitScore {
    pub unit: usize,
    pub score: f64,
}

/// Per-unit AAS averaged over a calibration corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AASProfile {
    pub version: u32,
    pub config_hash: ConfigHash,
    pub units_kind: UnitsKind,
    pub num_samples: usize,
    pub normalization: Normalization,
    pub scores: Vec<UnitScore>,
}

impl AASProfile {
    pub fn from_scores(
        config_hash: ConfigHash,
        units_kind: UnitsKind,
        num_samples: usize,
        scores: &[f64],
    ) -> Result<Self> {
        let profile = Self {
            version: PROFILE_VERSION,
            config_hash,
            units_kind,
            num_samples,
            normalization: Normalization::PerQueryMean,
            scores: scores
                .iter()
                .enumerate()
                .map(|(unit, &score)| UnitScore { unit, score })
                .collect(),
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != PROFILE_VERSION {
            return Err(Error::Malformed(format!(
                "unsupported profile version {}",
                self.version
            )));
        }
        if self.num_samples < 1 {
            return Err(Error::Malformed("profile built from zero samples".into()));
        }
        if self.scores.is_empty() {
            return Err(Error::Empty("profile has no units".into()));
        }
        for (i, s) in self.scores.iter().enumerate() {
            if s.unit != i {
                return Err(Error::Malformed(format!(
                    "score entry {i} is for unit {}, expected {i}",
                    s.unit
                )));
            }
            if !s.score.is_finite() || s.score < 0.0 {
                return Err(Error::Malformed(format!(
                    "unit {} has invalid score {}",
                    s.unit, s.score
                )));
            }
        }
        Ok(())
    }

    pub fn num_units(&self) -> usize {
        self.scores.len()
    }

    pub fn values(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s.score).collect()
    }

    /// Digest of the canonical JSON encoding; plans record it.
    pub fn hash(&self) -> ConfigHash {
        ConfigHash::of_bytes(&serde_json::to_vec(self).expect("profile serializes"))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Parses and validates; with `expected`, also requires a matching config hash.
    pub fn load(path: impl AsRef<Path>, expected: Option<ConfigHash>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let profile: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Malformed(format!("profile: {e}")))?;
        profile.validate()?;
        if let Some(expected) = expected {
            if profile.config_hash != expected {
                return Err(Error::HashMismatch {
                    expected,
                    actual: profile.config_hash,
                });
            }
        }
        Ok(profile)
    }

    /// `unit_index,aas` rows for plotting the score curve.
    pub fn write_curve_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["unit_index", "aas"])?;
        for s in &self.scores {
            w.write_record([s.unit.to_string(), s.score.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs the unpruned model over every sample and averages per-unit AAS.
///
/// Samples are profiled in parallel; per-sample scores are then summed in
/// corpus order so the result is bit-stable regardless of scheduling.
pub fn calibrate(config: &ModelConfig, weights: &Weights, corpus: &[SampleBatch]) -> Result<AASProfile> {
    config.validate()?;
    weights.check_matches(config)?;
    if corpus.is_empty() {
        return Err(Error::Empty("calibration corpus is empty".into()));
    }
    let per_sample: Vec<Vec<f64>> = corpus
        .par_iter()
        .map(|sample| {
            let out = forward(config, weights, sample, None, None)?;
            unit_scores(config, &out.maps)
        })
        .collect::<Result<_>>()?;

    let units = config.num_units();
    let mut sums = vec![0.0; units];
    for scores in &per_sample {
        for (acc, s) in sums.iter_mut().zip(scores) {
            *acc += s;
        }
    }
    let n = corpus.len() as f64;
    let means: Vec<f64> = sums.iter().map(|s| s / n).collect();
    if let Some(unit) = means.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFiniteAttention { unit });
    }
    AASProfile::from_scores(config.hash(), config.units_kind(), corpus.len(), &means)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_kernel::Matrix;

    fn layout() -> TokenLayout {
        TokenLayout {
            text_tokens: 2,
            num_frames: 2,
            tokens_per_frame: 2,
        }
    }

    fn joint(probs: Matrix) -> AttentionMap {
        AttentionMap {
            probs,
            head: 0,
            tag: MapTag {
                timestep: 0,
                layer: 0,
                kind: SubmoduleKind::Joint,
            },
            query_offset: 0,
            key_offset: 0,
        }
    }

    #[test]
    fn uniform_map_splits_in_thirds() {
        let map = joint(Matrix::from_fn(6, 6, |_, _| 1.0 / 6.0));
        let part = partition_map(&map, &layout()).unwrap();
        assert_eq!(part.frame_rows(), 4);
        let row = part.rows[0];
        assert_eq!((row.query, row.frame), (2, 0));
        for m in [row.ca, row.sa, row.ta] {
            assert!((m - 2.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_first_frame_token_has_no_temporal_mass() {
        let probs = Matrix::from_fn(6, 6, |i, j| if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 });
        let part = partition_map(&joint(probs), &layout()).unwrap();
        assert_eq!(part.rows[0].ta, 0.0);
        assert!(part.rows[2].ta > 0.0);
    }

    #[test]
    fn oversized_map_rejected() {
        let map = joint(Matrix::zeros(7, 6));
        assert!(matches!(partition_map(&map, &layout()), Err(Error::Shape(_))));
    }

    fn part_with(ta: &[f64]) -> AttentionPartition {
        AttentionPartition {
            tag: MapTag {
                timestep: 0,
                layer: 0,
                kind: SubmoduleKind::Joint,
            },
            rows: ta
                .iter()
                .map(|&ta| RowMass {
                    query: 0,
                    frame: 0,
                    ca: 0.0,
                    sa: 1.0 - ta,
                    ta,
                })
                .collect(),
        }
    }

    #[test]
    fn aas_is_row_mean() {
        assert_eq!(aas_of_unit(&[part_with(&[0.5, 0.5, 0.5])]).unwrap(), 0.5);
        let got = aas_of_unit(&[part_with(&[0.2, 0.4]), part_with(&[0.9])]).unwrap();
        assert!((got - 0.5).abs() < 1e-15);
        assert!(matches!(aas_of_unit(&[part_with(&[])]), Err(Error::Empty(_))));
        assert!(aas_of_unit(&[]).is_err());
    }

    #[test]
    fn profile_file_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let p = AASProfile::from_scores(ConfigHash(0xabc), UnitsKind::Layer, 3, &[0.4, 0.1]).unwrap();
        p.save(&path).unwrap();
        assert_eq!(AASProfile::load(&path, Some(ConfigHash(0xabc))).unwrap(), p);
        assert!(matches!(
            AASProfile::load(&path, Some(ConfigHash(1))),
            Err(Error::HashMismatch { .. })
        ));

        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text.replace("0.4", "7.25")).unwrap();
        assert_eq!(AASProfile::load(&path, None).unwrap().scores[0].score, 7.25);

        fs::write(&path, text.replace("0.4", "-0.4")).unwrap();
        assert!(AASProfile::load(&path, None).is_err());

        fs::write(&path, "{ not json").unwrap();
        assert!(matches!(AASProfile::load(&path, None), Err(Error::Malformed(_))));
    }

    #[test]
    fn profile_json_shape() {
        let p = AASProfile::from_scores(ConfigHash(0x10), UnitsKind::Timestep, 1, &[0.5]).unwrap();
        let v: serde_json::Value = serde_json::to_value(&p).unwrap();
        assert_eq!(v["config_hash"], "0000000000000010");
        assert_eq!(v["units_kind"], "timestep");
        assert_eq!(v["normalization"], "per_query_mean");
        assert_eq!(v["scores"][0]["unit"], 0);
    }
}
