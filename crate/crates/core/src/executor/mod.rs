//! Baseline and pruned inference with FLOP accounting and wall-clock timing.

mod analytic;

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use analytic::analytic_tally;

use crate::cost::{CostClass, FlopTally};
use crate::error::{Error, Result};
use crate::model::{forward, ConfigHash, ForwardOutput, Mode, ModelConfig, SampleBatch, UnitsKind, Weights};
use crate::planner::{make_plan, validate_plan, Policy, PrunePlan};
use crate::profiler::{calibrate, AASProfile};

pub const DEFAULT_REPETITIONS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitFlops {
    pub unit: usize,
    pub ca: u64,
    pub sa: u64,
    pub ta: u64,
    pub text: u64,
    pub projections: u64,
    /// Work removed when this unit is pruned.
    pub prunable: u64,
    pub total: u64,
}

fn unit_breakdown(mode: Mode, units: usize, tally: &FlopTally) -> Vec<UnitFlops> {
    (0..units)
        .map(|unit| UnitFlops {
            unit,
            ca: tally.class_total(unit, CostClass::Ca),
            sa: tally.class_total(unit, CostClass::Sa),
            ta: tally.class_total(unit, CostClass::Ta),
            text: tally.class_total(unit, CostClass::Text),
            projections: tally.class_total(unit, CostClass::Projection),
            prunable: tally.prunable(mode, unit),
            total: tally.unit_total(unit),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSummary {
    pub ratio: f64,
    pub policy: Option<Policy>,
    pub pruned_units: Vec<usize>,
}

impl PlanSummary {
    fn of(plan: Option<&PrunePlan>) -> Self {
        match plan {
            Some(p) => Self {
                ratio: p.ratio,
                policy: Some(p.policy),
                pruned_units: p.pruned_units.clone(),
            },
            None => Self {
                ratio: 0.0,
                policy: None,
                pruned_units: Vec::new(),
            },
        }
    }
}

/// Baseline vs pruned FLOPs, per unit and in total. Wall times are absent
/// for purely analytic reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlopReport {
    pub config_hash: ConfigHash,
    pub mode: Mode,
    pub units_kind: UnitsKind,
    pub plan: PlanSummary,
    pub baseline_units: Vec<UnitFlops>,
    pub pruned_units: Vec<UnitFlops>,
    pub baseline_total: u64,
    pub pruned_total: u64,
    pub reduction_ratio: f64,
    pub wall_time_baseline_s: Option<f64>,
    pub wall_time_pruned_s: Option<f64>,
}

impl FlopReport {
    fn from_tallies(
        config: &ModelConfig,
        plan: Option<&PrunePlan>,
        baseline: &FlopTally,
        pruned: &FlopTally,
    ) -> Self {
        let units = config.num_units();
        let baseline_total = baseline.total();
        let pruned_total = pruned.total();
        Self {
            config_hash: config.hash(),
            mode: config.mode,
            units_kind: config.units_kind(),
            plan: PlanSummary::of(plan),
            baseline_units: unit_breakdown(config.mode, units, baseline),
            pruned_units: unit_breakdown(config.mode, units, pruned),
            baseline_total,
            pruned_total,
            reduction_ratio: 1.0 - pruned_total as f64 / baseline_total as f64,
            wall_time_baseline_s: None,
            wall_time_pruned_s: None,
        }
    }

    /// Fraction of baseline work that pruning every unit would remove.
    pub fn prunable_share(&self) -> f64 {
        let prunable: u64 = self.baseline_units.iter().map(|u| u.prunable).sum();
        prunable as f64 / self.baseline_total as f64
    }

    /// Equality of everything except wall times.
    pub fn same_counts(&self, other: &FlopReport) -> bool {
        self.config_hash == other.config_hash
            && self.plan == other.plan
            && self.baseline_units == other.baseline_units
            && self.pruned_units == other.pruned_units
            && self.baseline_total == other.baseline_total
            && self.pruned_total == other.pruned_total
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.pruned_total > self.baseline_total {
            return Err(Error::Invariant(format!(
                "pruned total {} exceeds baseline {}",
                self.pruned_total, self.baseline_total
            )));
        }
        if !(0.0..=1.0).contains(&self.reduction_ratio) {
            return Err(Error::Invariant(format!(
                "reduction ratio {} outside [0, 1]",
                self.reduction_ratio
            )));
        }
        let saved: u64 = self
            .plan
            .pruned_units
            .iter()
            .map(|&u| self.baseline_units[u].prunable)
            .sum();
        if self.baseline_total - self.pruned_total != saved {
            return Err(Error::Invariant(format!(
                "additivity: saved {} but pruned units account for {saved}",
                self.baseline_total - self.pruned_total
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Malformed(format!("report: {e}")))
    }
}

/// Closed-form baseline and pruned counts.
pub fn count_flops_analytic(config: &ModelConfig, plan: Option<&PrunePlan>) -> Result<FlopReport> {
    config.validate()?;
    if let Some(plan) = plan {
        validate_plan(plan, config)?;
    }
    Ok(FlopReport::from_tallies(
        config,
        plan,
        &analytic_tally(config, None),
        &analytic_tally(config, plan),
    ))
}

/// Fails unless the instrumented counts in `report` match the analytic model.
pub fn check_oracle(config: &ModelConfig, plan: Option<&PrunePlan>, report: &FlopReport) -> Result<()> {
    let expected = count_flops_analytic(config, plan)?;
    if !expected.same_counts(report) {
        return Err(Error::Invariant(format!(
            "oracle equivalence: instrumented {} / {} vs analytic {} / {} (baseline / pruned)",
            report.baseline_total, report.pruned_total, expected.baseline_total, expected.pruned_total
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Timed repetitions per variant, after one warm-up each. Zero skips timing.
    pub repetitions: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            repetitions: DEFAULT_REPETITIONS,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub baseline: ForwardOutput,
    pub pruned: ForwardOutput,
    pub baseline_tally: FlopTally,
    pub pruned_tally: FlopTally,
    pub report: FlopReport,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let mid = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[mid]
    } else {
        0.5 * (xs[mid - 1] + xs[mid])
    }
}

/// Runs baseline and pruned forwards with instrumented counters, then times
/// both variants (median of `repetitions`, interleaved, counters detached).
pub fn run(
    config: &ModelConfig,
    weights: &Weights,
    batch: &SampleBatch,
    plan: Option<&PrunePlan>,
    options: &RunOptions,
) -> Result<RunOutcome> {
    config.validate()?;
    if let Some(plan) = plan {
        if plan.units_kind != config.units_kind() {
            return Err(Error::ModeMismatch(format!(
                "plan prunes {:?} units, model prunes {:?} units",
                plan.units_kind,
                config.units_kind()
            )));
        }
        validate_plan(plan, config)?;
    }
    weights.check_matches(config)?;
    batch.check_matches(config)?;

    let mut baseline_tally = FlopTally::new();
    let baseline = forward(config, weights, batch, None, Some(&mut baseline_tally))?;
    let mut pruned_tally = FlopTally::new();
    let pruned = forward(config, weights, batch, plan, Some(&mut pruned_tally))?;
    let mut report = FlopReport::from_tallies(config, plan, &baseline_tally, &pruned_tally);

    if options.repetitions > 0 {
        forward(config, weights, batch, None, None)?;
        forward(config, weights, batch, plan, None)?;
        let mut base_times = Vec::with_capacity(options.repetitions);
        let mut pruned_times = Vec::with_capacity(options.repetitions);
        for _ in 0..options.repetitions {
            let start = Instant::now();
            std::hint::black_box(forward(config, weights, batch, None, None)?);
            base_times.push(start.elapsed().as_secs_f64());
            let start = Instant::now();
            std::hint::black_box(forward(config, weights, batch, plan, None)?);
            pruned_times.push(start.elapsed().as_secs_f64());
        }
        report.wall_time_baseline_s = Some(median(base_times));
        report.wall_time_pruned_s = Some(median(pruned_times));
    }

    Ok(RunOutcome {
        baseline,
        pruned,
        baseline_tally,
        pruned_tally,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepEntry {
    pub alpha: f64,
    pub plan: PrunePlan,
    pub report: FlopReport,
    pub profile: AASProfile,
}

/// Calibrates once, then plans and runs every ratio in ascending order. Runs
/// and timings use the first corpus sample.
pub fn sweep(
    config: &ModelConfig,
    weights: &Weights,
    corpus: &[SampleBatch],
    alphas: &[f64],
    policy: Policy,
    options: &RunOptions,
) -> Result<Vec<SweepEntry>> {
    if let Some(&bad) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::Ratio(bad));
    }
    if alphas.is_empty() {
        return Ok(Vec::new());
    }
    let profile = calibrate(config, weights, corpus)?;
    let mut sorted = alphas.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted
        .into_iter()
        .map(|alpha| {
            let plan = make_plan(&profile, alpha, policy)?;
            let outcome = run(config, weights, &corpus[0], Some(&plan), options)?;
            Ok(SweepEntry {
                alpha,
                plan,
                report: outcome.report,
                profile: profile.clone(),
            })
        })
        .collect()
}

/// One CSV row per report: `alpha, baseline_flops, pruned_flops, reduction,
/// time_baseline_s, time_pruned_s`. Timing columns come last and are empty
/// when the report is untimed.
pub fn write_reports_csv<'a>(
    path: impl AsRef<Path>,
    rows: impl IntoIterator<Item = (f64, &'a FlopReport)>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "alpha",
        "baseline_flops",
        "pruned_flops",
        "reduction",
        "time_baseline_s",
        "time_pruned_s",
    ])?;
    let time = |t: Option<f64>| t.map_or_else(String::new, |t| format!("{t:.9}"));
    for (alpha, r) in rows {
        w.write_record([
            alpha.to_string(),
            r.baseline_total.to_string(),
            r.pruned_total.to_string(),
            format!("{:.6}", r.reduction_ratio),
            time(r.wall_time_baseline_s),
            time(r.wall_time_pruned_s),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Fixed-width table for terminal output.
pub fn summary_table<'a>(rows: impl IntoIterator<Item = (f64, &'a FlopReport)>) -> String {
    let mut out = format!(
        "{:>6}  {:>16}  {:>16}  {:>9}  {:>12}  {:>12}  {:>8}\n",
        "alpha", "baseline_flops", "pruned_flops", "reduction", "t_base_ms", "t_pruned_ms", "speedup"
    );
    for (alpha, r) in rows {
        let ms = |t: Option<f64>| t.map_or_else(|| "-".to_string(), |t| format!("{:.3}", t * 1e3));
        let speedup = match (r.wall_time_baseline_s, r.wall_time_pruned_s) {
            (Some(b), Some(p)) if p > 0.0 => format!("{:.2}x", b / p),
            _ => "-".to_string(),
        };
        out.push_str(&format!(
            "{:>6.3}  {:>16}  {:>16}  {:>9.4}  {:>12}  {:>12}  {:>8}\n",
            alpha,
            r.baseline_total,
            r.pruned_total,
            r.reduction_ratio,
            ms(r.wall_time_baseline_s),
            ms(r.wall_time_pruned_s),
            speedup
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_handles_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn csv_has_timing_columns_last() {
        let cfg = ModelConfig {
            mode: Mode::Entangled,
            num_layers: 2,
            num_timesteps: 1,
            num_frames: 2,
            tokens_per_frame: 2,
            text_tokens: 1,
            model_dim: 4,
            num_heads: 1,
            causal: false,
            seed: 0,
        };
        let report = count_flops_analytic(&cfg, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        write_reports_csv(&path, [(0.0, &report)]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "alpha,baseline_flops,pruned_flops,reduction,time_baseline_s,time_pruned_s"
        );
        assert!(lines.next().unwrap().ends_with(",0.000000,,"));
    }
}
