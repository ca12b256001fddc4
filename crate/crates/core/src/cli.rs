//! Command-line pipeline: synth, profile, plan, run, sweep, report.
//!
//! Every subcommand reads the same experiment config and works inside one
//! output directory:
//!
//! ```text
//! weights.bin            synth
//! corpus/sample_NNNN.bin synth
//! profile.json           profile
//! aas_curve.csv          profile
//! plan.json              plan
//! run_report.{json,csv}  run
//! sweep.{json,csv}       sweep
//! ```
//!
//! Exit codes: 0 success, 1 invalid input, 2 invariant failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::executor::{
    check_oracle, run, summary_table, sweep, write_reports_csv, RunOptions, SweepEntry,
};
use crate::model::{forward, synth_corpus, synth_weights, ModelConfig, SampleBatch, Weights};
use crate::planner::{make_plan, Policy, PrunePlan};
use crate::profiler::{calibrate, check_partition_identity, AASProfile};

pub const EXPERIMENT_VERSION: u32 = 1;
const IDENTITY_TOL: f64 = 1e-9;

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const CORPUS_DIR: &str = "corpus";
pub const PROFILE_FILE: &str = "profile.json";
pub const CURVE_FILE: &str = "aas_curve.csv";
pub const PLAN_FILE: &str = "plan.json";
pub const RUN_JSON: &str = "run_report.json";
pub const RUN_CSV: &str = "run_report.csv";
pub const SWEEP_JSON: &str = "sweep.json";
pub const SWEEP_CSV: &str = "sweep.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub model: ModelConfig,
    pub corpus_size: usize,
    pub corpus_seed: u64,
    /// Per-unit decay of cross-frame logits.
    pub gamma: f64,
    /// Per-frame-distance decay of cross-frame logits.
    pub beta: f64,
    pub alpha: f64,
    pub alphas: Vec<f64>,
    pub policy: Policy,
    pub output_dir: PathBuf,
    pub repetitions: usize,
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, Error> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.version != EXPERIMENT_VERSION {
            return Err(Error::Config(format!(
                "unsupported experiment version {}",
                self.version
            )));
        }
        self.model.validate()?;
        if self.corpus_size < 1 {
            return Err(Error::Config("corpus_size must be at least 1".into()));
        }
        if !(self.gamma >= 0.0 && self.beta >= 0.0 && self.gamma.is_finite() && self.beta.is_finite()) {
            return Err(Error::Config("gamma and beta must be finite and non-negative".into()));
        }
        if let Some(&a) = std::iter::once(&self.alpha)
            .chain(&self.alphas)
            .find(|a| !(0.0..=1.0).contains(*a))
        {
            return Err(Error::Ratio(a));
        }
        if self.repetitions < 1 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "tempo-prune", version, about = "Temporal-attention pruning pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate weights and the calibration corpus.
    Synth(CommonArgs),
    /// Calibrate per-unit AAS over the corpus.
    Profile(CommonArgs),
    /// Turn the profile into a prune plan.
    Plan(CommonArgs),
    /// Run baseline and pruned inference with the saved plan.
    Run(CommonArgs),
    /// Profile once, then plan and run every ratio in `alphas`.
    Sweep(CommonArgs),
    /// Print the saved run and sweep reports.
    Report(CommonArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Pruning ratio; overrides `alpha` (and `alphas` for sweep).
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_parser = ["ranked", "suffix"])]
    policy: Option<String>,
    /// Timed repetitions; overrides `repetitions`.
    #[arg(long)]
    reps: Option<usize>,
    /// Weight seed; overrides `model.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug)]
enum Failure {
    Input(String),
    Invariant(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Invariant(msg) => Failure::Invariant(msg),
            other => Failure::Input(other.to_string()),
        }
    }
}

type CmdResult<T = ()> = Result<T, Failure>;

struct Context {
    cfg: ExperimentConfig,
    out: PathBuf,
}

impl Context {
    fn from_args(args: &CommonArgs) -> CmdResult<Self> {
        let mut cfg = ExperimentConfig::load(&args.config)?;
        if let Some(seed) = args.seed {
            cfg.model.seed = seed;
        }
        if let Some(alpha) = args.alpha {
            cfg.alpha = alpha;
            cfg.alphas = vec![alpha];
        }
        if let Some(policy) = &args.policy {
            cfg.policy = policy.parse()?;
        }
        if let Some(reps) = args.reps {
            cfg.repetitions = reps;
        }
        cfg.validate()?;
        let out = args.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
        Ok(Self { cfg, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn sample_path(&self, id: usize) -> PathBuf {
        self.out.join(CORPUS_DIR).join(format!("sample_{id:04}.bin"))
    }

    fn weights(&self) -> CmdResult<Weights> {
        let path = self.path(WEIGHTS_FILE);
        Weights::load(&path, &self.cfg.model)
            .map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
    }

    fn corpus(&self) -> CmdResult<Vec<SampleBatch>> {
        (0..self.cfg.corpus_size)
            .map(|i| {
                let path = self.sample_path(i);
                SampleBatch::load(&path, &self.cfg.model)
                    .map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
            })
            .collect()
    }

    fn first_sample(&self) -> CmdResult<SampleBatch> {
        let path = self.sample_path(0);
        SampleBatch::load(&path, &self.cfg.model)
            .map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
    }

    fn options(&self) -> RunOptions {
        RunOptions {
            repetitions: self.cfg.repetitions,
        }
    }
}

fn cmd_synth(ctx: &Context) -> CmdResult {
    let model = &ctx.cfg.model;
    fs::create_dir_all(ctx.out.join(CORPUS_DIR)).map_err(Error::from)?;
    let weights = synth_weights(model, ctx.cfg.gamma, ctx.cfg.beta, model.seed)?;
    weights.save(ctx.path(WEIGHTS_FILE))?;
    for sample in synth_corpus(model, ctx.cfg.corpus_size, ctx.cfg.corpus_seed)? {
        sample.save(ctx.sample_path(sample.id as usize), model)?;
    }
    println!(
        "wrote {} and {} corpus samples to {} (config {})",
        WEIGHTS_FILE,
        ctx.cfg.corpus_size,
        ctx.out.display(),
        model.hash()
    );
    Ok(())
}

fn cmd_profile(ctx: &Context) -> CmdResult {
    let weights = ctx.weights()?;
    let corpus = ctx.corpus()?;
    let profile = calibrate(&ctx.cfg.model, &weights, &corpus)?;
    profile.save(ctx.path(PROFILE_FILE))?;
    profile.write_curve_csv(ctx.path(CURVE_FILE))?;
    println!("unit  aas");
    for s in &profile.scores {
        println!("{:>4}  {:.6e}", s.unit, s.score);
    }
    Ok(())
}

fn load_profile(ctx: &Context) -> CmdResult<AASProfile> {
    let path = ctx.path(PROFILE_FILE);
    AASProfile::load(&path, Some(ctx.cfg.model.hash()))
        .map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn cmd_plan(ctx: &Context) -> CmdResult {
    let profile = load_profile(ctx)?;
    let plan = make_plan(&profile, ctx.cfg.alpha, ctx.cfg.policy)?;
    plan.save(ctx.path(PLAN_FILE))?;
    println!(
        "alpha {} ({:?}): pruning {:?} units {:?}",
        plan.ratio, plan.policy, plan.units_kind, plan.pruned_units
    );
    Ok(())
}

fn cmd_run(ctx: &Context) -> CmdResult {
    let model = &ctx.cfg.model;
    let profile = load_profile(ctx)?;
    let plan_path = ctx.path(PLAN_FILE);
    let plan = PrunePlan::load(&plan_path, Some(model))
        .map_err(|e| Failure::Input(format!("{}: {e}", plan_path.display())))?;
    if plan.source_profile_hash != profile.hash() {
        return Err(Error::HashMismatch {
            expected: profile.hash(),
            actual: plan.source_profile_hash,
        }
        .into());
    }
    let weights = ctx.weights()?;
    let sample = ctx.first_sample()?;
    let outcome = run(model, &weights, &sample, Some(&plan), &ctx.options())?;

    check_partition_identity(model, &outcome.baseline.maps, IDENTITY_TOL)?;
    check_partition_identity(model, &outcome.pruned.maps, IDENTITY_TOL)?;
    check_oracle(model, Some(&plan), &outcome.report)?;
    outcome.report.check_invariants()?;

    outcome.report.save(ctx.path(RUN_JSON))?;
    write_reports_csv(ctx.path(RUN_CSV), [(plan.ratio, &outcome.report)])?;
    print!("{}", summary_table([(plan.ratio, &outcome.report)]));
    Ok(())
}

fn cmd_sweep(ctx: &Context) -> CmdResult {
    let model = &ctx.cfg.model;
    let weights = ctx.weights()?;
    let corpus = ctx.corpus()?;

    let baseline = forward(model, &weights, &corpus[0], None, None)?;
    check_partition_identity(model, &baseline.maps, IDENTITY_TOL)?;

    let entries = sweep(model, &weights, &corpus, &ctx.cfg.alphas, ctx.cfg.policy, &ctx.options())?;
    for e in &entries {
        check_oracle(model, Some(&e.plan), &e.report)?;
        e.report.check_invariants()?;
    }
    if ctx.cfg.policy == Policy::RankedAas {
        if let Some(w) = entries
            .windows(2)
            .find(|w| w[1].report.reduction_ratio < w[0].report.reduction_ratio)
        {
            return Err(Failure::Invariant(format!(
                "monotone savings: reduction falls from {} at alpha {} to {} at alpha {}",
                w[0].report.reduction_ratio, w[0].alpha, w[1].report.reduction_ratio, w[1].alpha
            )));
        }
    }

    fs::write(
        ctx.path(SWEEP_JSON),
        serde_json::to_string_pretty(&entries).map_err(Error::from)? + "\n",
    )
    .map_err(Error::from)?;
    write_reports_csv(ctx.path(SWEEP_CSV), entries.iter().map(|e| (e.alpha, &e.report)))?;
    print!("{}", summary_table(entries.iter().map(|e| (e.alpha, &e.report))));
    Ok(())
}

fn cmd_report(ctx: &Context) -> CmdResult {
    let mut found = false;
    let run_path = ctx.path(RUN_JSON);
    if run_path.exists() {
        let report = crate::executor::FlopReport::load(&run_path)?;
        println!("run ({})", run_path.display());
        print!("{}", summary_table([(report.plan.ratio, &report)]));
        found = true;
    }
    let sweep_path = ctx.path(SWEEP_JSON);
    if sweep_path.exists() {
        let text = fs::read_to_string(&sweep_path).map_err(Error::from)?;
        let entries: Vec<SweepEntry> = serde_json::from_str(&text)
            .map_err(|e| Failure::Input(format!("{}: {e}", sweep_path.display())))?;
        println!("sweep ({})", sweep_path.display());
        print!("{}", summary_table(entries.iter().map(|e| (e.alpha, &e.report))));
        found = true;
    }
    if !found {
        return Err(Failure::Input(format!(
            "no {RUN_JSON} or {SWEEP_JSON} in {}",
            ctx.out.display()
        )));
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs one subcommand.
/// Returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let (args, cmd): (&CommonArgs, fn(&Context) -> CmdResult) = match &cli.command {
        Command::Synth(a) => (a, cmd_synth),
        Command::Profile(a) => (a, cmd_profile),
        Command::Plan(a) => (a, cmd_plan),
        Command::Run(a) => (a, cmd_run),
        Command::Sweep(a) => (a, cmd_sweep),
        Command::Report(a) => (a, cmd_report),
    };
    match Context::from_args(args).and_then(|ctx| cmd(&ctx)) {
        Ok(()) => 0,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Invariant(msg)) => {
            eprintln!("invariant failure: {msg}");
            2
        }
    }
}
