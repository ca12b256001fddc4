//! Rank-and-cut selection of prune units.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ConfigHash, ModelConfig, UnitsKind};
use crate::profiler::AASProfile;

pub const PLAN_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Lowest scores first; on equal scores the later unit goes first.
    #[serde(rename = "ranked")]
    RankedAas,
    /// The last units, whatever their scores.
    Suffix,
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ranked" => Ok(Policy::RankedAas),
            "suffix" => Ok(Policy::Suffix),
            other => Err(Error::Config(format!(
                "unknown policy {other:?} (expected \"ranked\" or \"suffix\")"
            ))),
        }
    }
}

/// Number of units pruned at ratio `alpha` out of `units`: `floor(alpha * units)`.
///
/// The product is nudged by 1e-9 before flooring so that ratios such as
/// 0.29 of 100 land on 29 instead of 28.999999999999996.
pub fn prune_count(alpha: f64, units: usize) -> usize {
    ((alpha * units as f64) + 1e-9).floor() as usize
}

fn check_ratio(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::Ratio(alpha))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrunePlan {
    pub version: u32,
    pub ratio: f64,
    pub units_kind: UnitsKind,
    pub policy: Policy,
    /// Total prune units of the profiled model.
    pub num_units: usize,
    /// Ascending, no duplicates.
    pub pruned_units: Vec<usize>,
    pub source_profile_hash: ConfigHash,
}

impl PrunePlan {
    pub fn prunes(&self, unit: usize) -> bool {
        self.pruned_units.binary_search(&unit).is_ok()
    }

    /// Plan-internal consistency, independent of any model config.
    pub fn check(&self) -> Result<()> {
        if self.version != PLAN_VERSION {
            return Err(Error::Plan {
                field: "version",
                reason: format!("unsupported version {}", self.version),
            });
        }
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::Plan {
                field: "ratio",
                reason: format!("{} outside [0, 1]", self.ratio),
            });
        }
        if self.pruned_units.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Plan {
                field: "pruned_units",
                reason: "not strictly ascending".into(),
            });
        }
        if let Some(&bad) = self.pruned_units.iter().find(|&&u| u >= self.num_units) {
            return Err(Error::Plan {
                field: "pruned_units",
                reason: format!("unit {bad} out of range for {} units", self.num_units),
            });
        }
        let want = prune_count(self.ratio, self.num_units);
        if self.pruned_units.len() != want {
            return Err(Error::Plan {
                field: "pruned_units",
                reason: format!(
                    "cardinality {} but ratio {} of {} units requires {want}",
                    self.pruned_units.len(),
                    self.ratio,
                    self.num_units
                ),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Parses and checks the plan; with a config, also runs [`validate_plan`].
    pub fn load(path: impl AsRef<Path>, config: Option<&ModelConfig>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let plan: Self =
            serde_json::from_str(&text).map_err(|e| Error::Malformed(format!("plan: {e}")))?;
        plan.check()?;
        if let Some(config) = config {
            validate_plan(&plan, config)?;
        }
        Ok(plan)
    }
}

pub fn make_plan(profile: &AASProfile, alpha: f64, policy: Policy) -> Result<PrunePlan> {
    check_ratio(alpha)?;
    profile.validate()?;
    let units = profile.num_units();
    let k = prune_count(alpha, units);
    let mut pruned: Vec<usize> = match policy {
        Policy::RankedAas => {
            let mut order: Vec<usize> = (0..units).collect();
            // scores are non-negative, so |score| ordering is score ordering
            order.sort_by(|&a, &b| {
                let (sa, sb) = (profile.scores[a].score, profile.scores[b].score);
                sa.total_cmp(&sb).then(b.cmp(&a))
            });
            order.truncate(k);
            order
        }
        Policy::Suffix => (units - k..units).collect(),
    };
    pruned.sort_unstable();
    Ok(PrunePlan {
        version: PLAN_VERSION,
        ratio: alpha,
        units_kind: profile.units_kind,
        policy,
        num_units: units,
        pruned_units: pruned,
        source_profile_hash: profile.hash(),
    })
}

/// Checks a plan against the model it will be applied to.
pub fn validate_plan(plan: &PrunePlan, config: &ModelConfig) -> Result<()> {
    if plan.units_kind != config.units_kind() {
        return Err(Error::Plan {
            field: "units_kind",
            reason: format!(
                "kind mismatch: plan prunes {:?} units, {:?} model has {:?} units",
                plan.units_kind,
                config.mode,
                config.units_kind()
            ),
        });
    }
    let units = config.num_units();
    if let Some(&bad) = plan.pruned_units.iter().find(|&&u| u >= units) {
        return Err(Error::Plan {
            field: "pruned_units",
            reason: format!("unit {bad} out of range (model has {units} units)"),
        });
    }
    if plan.num_units != units {
        return Err(Error::Plan {
            field: "num_units",
            reason: format!("plan built for {} units, model has {units}", plan.num_units),
        });
    }
    plan.check()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mode;

    fn profile(scores: &[f64]) -> AASProfile {
        AASProfile::from_scores(ConfigHash(7), UnitsKind::Layer, 1, scores).unwrap()
    }

    fn config(mode: Mode, units: usize) -> ModelConfig {
        ModelConfig {
            mode,
            num_layers: if mode == Mode::Entangled { units } else { 1 },
            num_timesteps: if mode == Mode::Cascaded { units } else { 1 },
            num_frames: 2,
            tokens_per_frame: 1,
            text_tokens: 1,
            model_dim: 2,
            num_heads: 1,
            causal: false,
            seed: 0,
        }
    }

    #[test]
    fn ranked_prunes_bottom_half() {
        let plan = make_plan(&profile(&[5.0, 3.0, 1.0, 0.5]), 0.5, Policy::RankedAas).unwrap();
        assert_eq!(plan.pruned_units, vec![2, 3]);
    }

    #[test]
    fn boundary_ratios() {
        let p = profile(&[5.0, 3.0, 1.0, 0.5]);
        assert!(make_plan(&p, 0.0, Policy::RankedAas).unwrap().pruned_units.is_empty());
        assert_eq!(make_plan(&p, 1.0, Policy::RankedAas).unwrap().pruned_units, vec![0, 1, 2, 3]);
        assert!(matches!(make_plan(&p, 1.5, Policy::Suffix), Err(Error::Ratio(_))));
        assert!(matches!(make_plan(&p, -0.1, Policy::Suffix), Err(Error::Ratio(_))));
    }

    #[test]
    fn ties_prefer_later_unit() {
        let plan = make_plan(&profile(&[1.0, 1.0, 9.0, 9.0]), 0.25, Policy::RankedAas).unwrap();
        assert_eq!(plan.pruned_units, vec![1]);
    }

    #[test]
    fn suffix_ignores_scores() {
        let plan = make_plan(&profile(&[0.0, 0.1, 0.9, 1.0]), 0.5, Policy::Suffix).unwrap();
        assert_eq!(plan.pruned_units, vec![2, 3]);
    }

    #[test]
    fn empty_profile_rejected() {
        let mut p = profile(&[1.0]);
        p.scores.clear();
        assert!(make_plan(&p, 0.5, Policy::RankedAas).is_err());
    }

    #[test]
    fn prune_count_floors() {
        assert_eq!(prune_count(0.5, 5), 2);
        assert_eq!(prune_count(0.29, 100), 29);
        assert_eq!(prune_count(1.0 / 3.0, 3), 1);
        assert_eq!(prune_count(0.999, 4), 3);
    }

    #[test]
    fn validation_names_the_problem() {
        let plan = make_plan(&profile(&[0.3, 0.2, 0.1, 0.0]), 0.5, Policy::RankedAas).unwrap();
        validate_plan(&plan, &config(Mode::Entangled, 4)).unwrap();

        let err = validate_plan(&plan, &config(Mode::Cascaded, 4)).unwrap_err();
        assert!(err.to_string().contains("kind mismatch"), "{err}");

        let err = validate_plan(&plan, &config(Mode::Entangled, 3)).unwrap_err();
        assert!(err.to_string().contains("out of range"), "{err}");

        let mut short = plan.clone();
        short.pruned_units.pop();
        let err = validate_plan(&short, &config(Mode::Entangled, 4)).unwrap_err();
        assert!(err.to_string().contains("cardinality"), "{err}");
    }

    #[test]
    fn plan_file_round_trip_and_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plan.json");
        let plan = make_plan(&profile(&[0.3, 0.2, 0.1, 0.0]), 0.5, Policy::Suffix).unwrap();
        plan.save(&path).unwrap();
        assert_eq!(PrunePlan::load(&path, Some(&config(Mode::Entangled, 4))).unwrap(), plan);

        let text = fs::read_to_string(&path).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["policy"], "suffix");
        assert_eq!(v["units_kind"], "layer");

        fs::write(&path, text.replace("\"suffix\"", "\"random\"")).unwrap();
        assert!(matches!(PrunePlan::load(&path, None), Err(Error::Malformed(_))));

        let mut wrong = plan.clone();
        wrong.pruned_units = vec![3];
        wrong.save(&path).unwrap();
        assert!(matches!(PrunePlan::load(&path, None), Err(Error::Plan { .. })));
    }

    #[test]
    fn policy_parses_cli_names() {
        assert_eq!("ranked".parse::<Policy>().unwrap(), Policy::RankedAas);
        assert_eq!("suffix".parse::<Policy>().unwrap(), Policy::Suffix);
        assert!("top".parse::<Policy>().is_err());
    }
}
