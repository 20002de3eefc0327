//! Command-line front end. Every run writes its artifacts and a
//! `manifest.json` into the output directory.
//!
//! A config file (`--config FILE`) holds `key = value` lines whose keys are
//! long flag names without the leading dashes (`_` may stand for `-`); `#`
//! starts a comment. `key = true` turns
//! a switch on, `key = false` leaves it off. File entries are expanded in
//! front of the command-line flags, so flags win.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::baseline::{
    bids_from_value, compare_mechanisms, retire_fleet, simulate_price_scenarios,
    value_function_from_scenarios, BidCurve, CompareOptions, DpOptions, PriceAveraging,
    TerminalValue, ValueFunction,
};
use crate::costs::StorageSpec;
use crate::dispatch::{expected_system_cost, solve_dispatch, solve_dispatch_with, SystemSpec, TerminalSoc};
use crate::distributions::{fit_versatile_mle, read_error_samples, RobustShape, UncertaintyModel};
use crate::error::{Error, Result};
use crate::scenarios::{
    empirical_violation_rate, load_system_csv, sample_errors, synth_test_system, CsvSystemOptions,
    NetLoadModel, SynthParams,
};
use crate::solver::{verify_kkt, DEFAULT_ITER_CAP, DEFAULT_TOL};
use crate::theory::{default_soc_grid, run_theory_suite, sigma_sweep, soc_sweep, JENSEN_MIN_SAMPLES};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_SOLVER: i32 = 2;
pub const EXIT_THEORY: i32 = 3;

pub const THREADS_ENV: &str = "STORAGE_PRICER_THREADS";

#[derive(Debug, Parser, Serialize)]
#[command(
    name = "storage-pricer",
    version,
    about = "Storage opportunity pricing in chance-constrained dispatch",
    args_override_self = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Solve the dispatch and export quantities, prices and a dual audit.
    Dispatch(DispatchArgs),
    /// Run the pricing-theory checks and write a pass/fail report.
    VerifyTheory(TheoryArgs),
    /// Simulate prices, build the storage value function and its bids.
    Baseline(BaselineArgs),
    /// Compare welfare-optimal pricing with bid-based clearing.
    Compare(CompareArgs),
    /// Sweep one input and record prices along it.
    Sweep(SweepArgs),
    /// Check chance-constraint violation rates by Monte Carlo.
    Violations(ViolationArgs),
    /// Fit a Versatile distribution to error samples.
    FitDist(FitArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct Common {
    /// Output directory.
    #[arg(long, default_value = "out", global = true)]
    pub out: PathBuf,
    /// Worker threads (default: the environment variable, then all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Key-value config file; command-line flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum Family {
    Gaussian,
    Versatile,
    Robust,
    Empirical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum Terminal {
    Periodic,
    Free,
    Fixed,
}

/// Where the system comes from and how it is parameterized.
#[derive(Debug, Args, Serialize)]
pub struct SystemArgs {
    /// Use the synthetic test system (the default when no CSV is given).
    #[arg(long)]
    pub synthetic: bool,
    /// Fleet CSV (`gen_id, capacity_mw, c0, c1, c2`).
    #[arg(long, requires_all = ["load", "errors"])]
    pub fleet: Option<PathBuf>,
    /// Load CSV (`t, d_mw`).
    #[arg(long)]
    pub load: Option<PathBuf>,
    /// Error-moment CSV (`t, mu_mw, sigma_mw`).
    #[arg(long)]
    pub errors: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    pub epsilon: f64,
    #[arg(long, value_enum, default_value_t = Family::Gaussian)]
    pub family: Family,
    #[arg(long, default_value_t = 1.0)]
    pub versatile_a: f64,
    #[arg(long, default_value_t = 1.0)]
    pub versatile_b: f64,
    #[arg(long, default_value_t = 0.0)]
    pub versatile_c: f64,
    /// Robust quantile shape: NA, S, U or SU.
    #[arg(long, default_value = "NA")]
    pub robust_shape: String,
    /// Raw historical errors for the empirical family (one column).
    #[arg(long)]
    pub error_samples: Option<PathBuf>,
    /// Seed of the synthetic fleet.
    #[arg(long, default_value_t = 1)]
    pub system_seed: u64,
    #[arg(long, default_value_t = 24)]
    pub horizon: usize,
    #[arg(long, default_value_t = 76)]
    pub n_gens: usize,
    #[arg(long, default_value_t = 23_100.0)]
    pub total_cap: f64,
    #[arg(long, default_value_t = 13_000.0)]
    pub avg_load: f64,
    #[arg(long, default_value_t = 0.3)]
    pub renewable_ratio: f64,
    #[arg(long, default_value_t = 0.2)]
    pub storage_ratio: f64,
    /// Storage duration, hours.
    #[arg(long, default_value_t = 4.0)]
    pub duration: f64,
    #[arg(long, default_value_t = 0.95)]
    pub eta: f64,
    /// Storage marginal cost, $/MWh.
    #[arg(long, default_value_t = 20.0)]
    pub marginal_cost: f64,
    #[arg(long, default_value_t = 0.5)]
    pub e_init_ratio: f64,
    /// Storage power for CSV systems, MW.
    #[arg(long, default_value_t = 0.0)]
    pub p_max: f64,
    #[arg(long, default_value_t = 3)]
    pub fit_degree: usize,
    #[arg(long, default_value_t = 0.1)]
    pub g_min_ratio: f64,
    #[arg(long, value_enum, default_value_t = Terminal::Periodic)]
    pub terminal: Terminal,
    /// Final SoC for `--terminal fixed`, MWh.
    #[arg(long)]
    pub terminal_soc: Option<f64>,
    /// Keep all reserve on generators.
    #[arg(long)]
    pub no_storage_reserve: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct DispatchArgs {
    #[command(flatten)]
    pub system: SystemArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Serialize)]
pub struct TheoryArgs {
    #[command(flatten)]
    pub system: SystemArgs,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 100_000)]
    pub jensen_samples: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum Averaging {
    Mean,
    PerScenario,
}

impl From<Averaging> for PriceAveraging {
    fn from(a: Averaging) -> Self {
        match a {
            Averaging::Mean => PriceAveraging::MeanPath,
            Averaging::PerScenario => PriceAveraging::PerScenario,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub system: SystemArgs,
    #[arg(long, default_value_t = 200)]
    pub scenarios: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 21)]
    pub grid_size: usize,
    #[arg(long, value_enum, default_value_t = Averaging::Mean)]
    pub averaging: Averaging,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Serialize)]
pub struct CompareArgs {
    #[command(flatten)]
    pub system: SystemArgs,
    #[arg(long, default_value_t = 200)]
    pub scenarios: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Share of the fleet to retire before comparing.
    #[arg(long, default_value_t = 0.0)]
    pub retire_frac: f64,
    #[arg(long, default_value_t = 21)]
    pub grid_size: usize,
    #[arg(long, value_enum, default_value_t = Averaging::Mean)]
    pub averaging: Averaging,
    #[arg(long, default_value_t = 10)]
    pub batch_size: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum Axis {
    /// Initial SoC.
    Soc,
    /// Multiplier on every error standard deviation.
    Sigma,
    /// Storage power as a share of average load.
    Capacity,
    /// Renewable output as a share of average load.
    Renewable,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub system: SystemArgs,
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Comma-separated axis values; defaults depend on the axis.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<f64>,
    /// Period whose opportunity price is tracked (from 0).
    #[arg(long, default_value_t = 0)]
    pub period: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Serialize)]
pub struct ViolationArgs {
    #[command(flatten)]
    pub system: SystemArgs,
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    /// One-column CSV of error samples.
    #[arg(long, conflicts_with = "truth")]
    pub samples_file: Option<PathBuf>,
    /// Draw from a Versatile law `a,b,c` instead of reading samples.
    #[arg(long, value_delimiter = ',')]
    pub truth: Vec<f64>,
    #[arg(long, default_value_t = 100_000)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[command(flatten)]
    pub common: Common,
}

/// Reads `key = value` lines into flag tokens.
pub fn config_tokens(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Schema {
            path: path.display().to_string(),
            line: i + 1,
            message: format!("expected 'key = value', found '{line}'"),
        })?;
        let (key, value) = (key.trim().replace('_', "-"), value.trim());
        if key.is_empty() || key == "config" {
            return Err(Error::Schema {
                path: path.display().to_string(),
                line: i + 1,
                message: format!("invalid key '{key}'"),
            });
        }
        match value {
            "true" => out.push(format!("--{key}")),
            "false" => {}
            v => {
                out.push(format!("--{key}"));
                out.push(v.to_string());
            }
        }
    }
    Ok(out)
}

/// Inserts config-file flags right after the subcommand name.
fn expand_config(argv: Vec<String>) -> Result<Vec<String>> {
    let mut path = None;
    for (i, a) in argv.iter().enumerate() {
        if let Some(p) = a.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        } else if a == "--config" {
            path = argv.get(i + 1).map(PathBuf::from);
        }
    }
    let Some(path) = path else { return Ok(argv) };
    let tokens = config_tokens(&path)?;
    let sub = argv.iter().skip(1).position(|a| !a.starts_with('-')).map_or(argv.len(), |i| i + 2);
    let mut out = argv[..sub.min(argv.len())].to_vec();
    out.extend(tokens);
    out.extend_from_slice(&argv[sub.min(argv.len())..]);
    Ok(out)
}

impl SystemArgs {
    fn model(&self) -> Result<UncertaintyModel> {
        match self.family {
            Family::Gaussian => Ok(UncertaintyModel::Gaussian),
            Family::Versatile => UncertaintyModel::versatile(self.versatile_a, self.versatile_b, self.versatile_c),
            Family::Robust => Ok(UncertaintyModel::Robust {
                shape: self.robust_shape.parse::<RobustShape>()?,
            }),
            Family::Empirical => {
                let path = self
                    .error_samples
                    .as_ref()
                    .ok_or_else(|| Error::Config("--family empirical needs --error-samples".into()))?;
                UncertaintyModel::empirical_from_errors(&read_error_samples(path)?)
            }
        }
    }

    fn terminal_soc(&self) -> Result<TerminalSoc> {
        Ok(match self.terminal {
            Terminal::Periodic => TerminalSoc::Periodic,
            Terminal::Free => TerminalSoc::Free,
            Terminal::Fixed => TerminalSoc::Fixed(
                self.terminal_soc
                    .ok_or_else(|| Error::Config("--terminal fixed needs --terminal-soc".into()))?,
            ),
        })
    }

    fn uses_csv(&self) -> bool {
        self.fleet.is_some() || self.load.is_some() || self.errors.is_some()
    }

    pub fn synth_params(&self) -> Result<SynthParams> {
        Ok(SynthParams {
            n_gens: self.n_gens,
            total_cap_mw: self.total_cap,
            avg_load_mw: self.avg_load,
            renewable_ratio: self.renewable_ratio,
            storage_ratio: self.storage_ratio,
            duration_h: self.duration,
            eta: self.eta,
            marginal_cost: self.marginal_cost,
            e_init_ratio: self.e_init_ratio,
            epsilon: self.epsilon,
            horizon: self.horizon,
            seed: self.system_seed,
            fit_degree: self.fit_degree,
            g_min_ratio: self.g_min_ratio,
            model: self.model()?,
            terminal: self.terminal_soc()?,
            storage_reserve: !self.no_storage_reserve,
            ..SynthParams::default()
        })
    }

    pub fn build(&self) -> Result<SystemSpec> {
        if self.synthetic && self.uses_csv() {
            return Err(Error::Config("choose either --synthetic or CSV inputs, not both".into()));
        }
        if !self.uses_csv() {
            return synth_test_system(&self.synth_params()?);
        }
        let (Some(fleet), Some(load), Some(errors)) = (&self.fleet, &self.load, &self.errors) else {
            return Err(Error::Config("CSV systems need --fleet, --load and --errors".into()));
        };
        let storage = if self.p_max > 0.0 {
            let e_max = self.p_max * self.duration;
            StorageSpec::new(self.p_max, e_max, self.eta, self.marginal_cost, self.e_init_ratio * e_max)?
        } else {
            StorageSpec::disabled()
        };
        load_system_csv(
            fleet,
            load,
            errors,
            &CsvSystemOptions {
                storage,
                epsilon: self.epsilon,
                model: self.model()?,
                fit_degree: self.fit_degree,
                g_min_ratio: self.g_min_ratio,
                terminal: self.terminal_soc()?,
                storage_reserve: !self.no_storage_reserve,
            },
        )
    }
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Dispatch(a) => &a.common,
            Command::VerifyTheory(a) => &a.common,
            Command::Baseline(a) => &a.common,
            Command::Compare(a) => &a.common,
            Command::Sweep(a) => &a.common,
            Command::Violations(a) => &a.common,
            Command::FitDist(a) => &a.common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Dispatch(_) => "dispatch",
            Command::VerifyTheory(_) => "verify-theory",
            Command::Baseline(_) => "baseline",
            Command::Compare(_) => "compare",
            Command::Sweep(_) => "sweep",
            Command::Violations(_) => "violations",
            Command::FitDist(_) => "fit-dist",
        }
    }
}

/// What a command produced, for the manifest and the exit code.
struct Outcome {
    files: Vec<String>,
    theory_failed: bool,
}

impl Outcome {
    fn files(files: &[&str]) -> Outcome {
        Outcome {
            files: files.iter().map(|s| s.to_string()).collect(),
            theory_failed: false,
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    argv: &'a [String],
    config: &'a Command,
    threads: usize,
    outputs: &'a [String],
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Solver { .. } => EXIT_SOLVER,
        _ => EXIT_DOMAIN,
    }
}

fn thread_count(flag: Option<usize>) -> Result<usize> {
    let from_env = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("{THREADS_ENV}='{v}' is not a thread count")))?,
        ),
        Err(_) => None,
    };
    let n = flag
        .or(from_env)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if n == 0 {
        return Err(Error::Config("thread count must be at least 1".into()));
    }
    Ok(n)
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<String> = argv
        .into_iter()
        .map(|a| a.into().to_string_lossy().into_owned())
        .collect();
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_DOMAIN;
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_DOMAIN } else { EXIT_OK };
        }
    };
    match execute(&cli, &argv) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cli: &Cli, argv: &[String]) -> Result<i32> {
    let common = cli.command.common();
    let threads = thread_count(common.threads)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} threads: {e}")))?;
    std::fs::create_dir_all(&common.out)?;
    let out = common.out.clone();
    let outcome = pool.install(|| match &cli.command {
        Command::Dispatch(a) => run_dispatch(a, &out),
        Command::VerifyTheory(a) => run_theory(a, &out),
        Command::Baseline(a) => run_baseline(a, &out),
        Command::Compare(a) => run_compare(a, &out),
        Command::Sweep(a) => run_sweep(a, &out),
        Command::Violations(a) => run_violations(a, &out),
        Command::FitDist(a) => run_fit(a, &out),
    })?;
    let mut files = outcome.files.clone();
    files.push("manifest.json".into());
    write_json(
        &out.join("manifest.json"),
        &Manifest {
            tool: "storage-pricer",
            version: env!("CARGO_PKG_VERSION"),
            command: cli.command.name(),
            argv: &argv[1..],
            config: &cli.command,
            threads,
            outputs: &files,
        },
    )?;
    Ok(if outcome.theory_failed { EXIT_THEORY } else { EXIT_OK })
}

#[derive(Serialize)]
struct DualAudit<'a> {
    status: crate::solver::SolveStatus,
    objective: f64,
    iterations: usize,
    degenerate: bool,
    solver_residuals: crate::solver::Residuals,
    audit_residuals: crate::solver::Residuals,
    dual_infeasibility: f64,
    scaling: crate::dispatch::Scaling,
    duals: &'a [crate::dispatch::DualEntry],
}

fn run_dispatch(a: &DispatchArgs, out: &Path) -> Result<Outcome> {
    let system = a.system.build()?;
    let (sol, built, result) = solve_dispatch_with(&system, DEFAULT_TOL, DEFAULT_ITER_CAP)?;
    let kkt = verify_kkt(&built.program, &result)?;
    sol.write_csv(&out.join("solution.csv"))?;
    write_json(
        &out.join("duals.json"),
        &DualAudit {
            status: sol.status,
            objective: sol.objective,
            iterations: sol.iterations,
            degenerate: sol.degenerate,
            solver_residuals: sol.residuals,
            audit_residuals: kkt.max,
            dual_infeasibility: kkt.dual_infeasibility,
            scaling: sol.scaling,
            duals: &sol.duals,
        },
    )?;
    println!(
        "optimal in {} iterations, cost {:.2}, KKT residual {:.2e}",
        sol.iterations,
        sol.objective,
        kkt.max.max()
    );
    Ok(Outcome::files(&["solution.csv", "duals.json"]))
}

fn run_theory(a: &TheoryArgs, out: &Path) -> Result<Outcome> {
    if a.jensen_samples < JENSEN_MIN_SAMPLES {
        return Err(Error::Config(format!(
            "--jensen-samples must be at least {JENSEN_MIN_SAMPLES}"
        )));
    }
    let system = a.system.build()?;
    let report = run_theory_suite(&system, a.seed, a.jensen_samples)?;
    write_json(&out.join("theory_report.json"), &report)?;
    for c in &report.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(Outcome {
        files: vec!["theory_report.json".into()],
        theory_failed: !report.passed,
    })
}

fn write_value_function(vf: &ValueFunction, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "soc_mwh", "value"])?;
    for (t, stage) in vf.values.iter().enumerate() {
        for (e, v) in vf.grid.iter().zip(stage) {
            w.write_record([(t + 1).to_string(), format!("{e}"), format!("{v}")])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_bids(bids: &BidCurve, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "side", "step", "quantity_mw", "price"])?;
    for (t, p) in bids.periods.iter().enumerate() {
        for (side, steps) in [("offer", &p.offer), ("bid", &p.bid)] {
            for (k, s) in steps.iter().enumerate() {
                w.write_record([
                    (t + 1).to_string(),
                    side.to_string(),
                    (k + 1).to_string(),
                    format!("{}", s.quantity),
                    format!("{}", s.price),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct BaselineSummary<'a> {
    scenarios: usize,
    seed: u64,
    source: &'a str,
    clipped: &'a [usize],
    terminal: TerminalValue,
    max_concavity_violation: f64,
    monotone: bool,
    mean_prices: Vec<f64>,
}

fn run_baseline(a: &BaselineArgs, out: &Path) -> Result<Outcome> {
    let mut system = a.system.build()?;
    system.storage_reserve = false;
    let set = simulate_price_scenarios(&system, a.scenarios, a.seed)?;
    let dp = crate::baseline::bidder_options(
        &system,
        &set,
        DpOptions {
            grid_size: a.grid_size,
            ..DpOptions::default()
        },
    );
    let vf = value_function_from_scenarios(&set, &system.storage, &dp, a.averaging.into())?;
    let bids = bids_from_value(&vf);
    set.write_csv(&out.join("price_scenarios.csv"))?;
    write_value_function(&vf, &out.join("value_function.csv"))?;
    write_bids(&bids, &out.join("bids.csv"))?;
    write_json(
        &out.join("baseline.json"),
        &BaselineSummary {
            scenarios: set.n_scenarios(),
            seed: set.seed,
            source: &set.source,
            clipped: &set.clipped,
            terminal: dp.terminal,
            max_concavity_violation: vf.max_concavity_violation,
            monotone: vf.monotone,
            mean_prices: set.mean_path(),
        },
    )?;
    println!(
        "{} scenarios ({} clipped), value function concavity violation {:.2e}",
        set.n_scenarios(),
        set.clipped.len(),
        vf.max_concavity_violation
    );
    Ok(Outcome::files(&["price_scenarios.csv", "value_function.csv", "bids.csv", "baseline.json"]))
}

#[derive(Serialize)]
struct CompareSummary<'a> {
    scenarios: usize,
    seed: u64,
    retire_frac: f64,
    welfare: crate::baseline::MetricMeans,
    bids: crate::baseline::MetricMeans,
    change_pct: crate::baseline::MetricMeans,
    payment_lower_share: f64,
    n_batches: usize,
    clipped: &'a [usize],
}

fn run_compare(a: &CompareArgs, out: &Path) -> Result<Outcome> {
    let mut system = a.system.build()?;
    if a.retire_frac > 0.0 {
        system = retire_fleet(&system, a.retire_frac)?;
    }
    let cmp = compare_mechanisms(
        &system,
        &CompareOptions {
            n_scenarios: a.scenarios,
            seed: a.seed,
            dp: DpOptions {
                grid_size: a.grid_size,
                ..DpOptions::default()
            },
            averaging: a.averaging.into(),
            batch_size: a.batch_size,
        },
    )?;
    cmp.write_csv(&out.join("metrics.csv"))?;
    write_json(
        &out.join("comparison.json"),
        &CompareSummary {
            scenarios: a.scenarios,
            seed: a.seed,
            retire_frac: a.retire_frac,
            welfare: cmp.welfare,
            bids: cmp.bids,
            change_pct: cmp.change_pct,
            payment_lower_share: cmp.payment_lower_share,
            n_batches: cmp.n_batches,
            clipped: &cmp.clipped,
        },
    )?;
    let c = &cmp.change_pct;
    println!(
        "welfare vs bids: storage profit {:+.2}%, generation cost {:+.2}%, system cost {:+.2}%, payment {:+.2}%",
        c.storage_profit, c.gen_cost, c.system_cost, c.payment
    );
    Ok(Outcome::files(&["metrics.csv", "comparison.json"]))
}

/// One system solved at one value of a capacity-type axis.
#[derive(Debug, Clone, Serialize)]
struct SystemPoint {
    axis_value: f64,
    mean_theta: f64,
    mean_lambda: f64,
    mean_pi: f64,
    storage_profit: f64,
    system_cost: f64,
    payment: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn system_point(system: &SystemSpec, axis_value: f64) -> Result<SystemPoint> {
    let sol = solve_dispatch(system)?;
    let m = system.storage.marginal_cost;
    let profit = (0..sol.horizon())
        .map(|t| sol.lambda[t] * (sol.p[t] - sol.b[t]) - m * sol.p[t] + sol.pi[t] * sol.psi[t])
        .sum::<f64>();
    Ok(SystemPoint {
        axis_value,
        mean_theta: mean(&sol.theta),
        mean_lambda: mean(&sol.lambda),
        mean_pi: mean(&sol.pi),
        storage_profit: profit,
        system_cost: expected_system_cost(&sol, system),
        payment: sol.lambda.iter().zip(&system.net_load.forecast).map(|(l, d)| l * d).sum(),
    })
}

fn run_sweep(a: &SweepArgs, out: &Path) -> Result<Outcome> {
    use rayon::prelude::*;
    let system = a.system.build()?;
    if a.period >= system.horizon {
        return Err(Error::Config(format!("--period {} outside horizon {}", a.period, system.horizon)));
    }
    let path = out.join("sweep.csv");
    match a.axis {
        Axis::Soc | Axis::Sigma => {
            let res = if a.axis == Axis::Soc {
                let grid = if a.values.is_empty() {
                    default_soc_grid(system.storage.e_max, 21)
                } else {
                    a.values.clone()
                };
                soc_sweep(&system, &grid, a.period)?
            } else {
                let scales = if a.values.is_empty() {
                    (0..7).map(|i| 0.5 + 0.25 * i as f64).collect()
                } else {
                    a.values.clone()
                };
                sigma_sweep(&system, &scales, a.period)?
            };
            res.write_csv(&path)?;
            write_json(&out.join("sweep.json"), &res)?;
            println!(
                "{} sweep, {:?}: {} (max violation {:.2e})",
                res.axis_name,
                res.trend,
                if res.holds { "holds" } else { "violated" },
                res.max_violation
            );
        }
        Axis::Capacity | Axis::Renewable => {
            if a.system.uses_csv() {
                return Err(Error::Config("capacity and renewable sweeps need the synthetic system".into()));
            }
            let base = a.system.synth_params()?;
            let values = if !a.values.is_empty() {
                a.values.clone()
            } else if a.axis == Axis::Capacity {
                vec![0.05, 0.1, 0.15, 0.2, 0.25, 0.3]
            } else {
                vec![0.1, 0.2, 0.3, 0.4, 0.5]
            };
            let rows = values
                .par_iter()
                .map(|&v| {
                    let mut p = base.clone();
                    if a.axis == Axis::Capacity {
                        p.storage_ratio = v;
                    } else {
                        p.renewable_ratio = v;
                    }
                    system_point(&synth_test_system(&p)?, v)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut w = csv::Writer::from_path(&path)?;
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
            write_json(&out.join("sweep.json"), &rows)?;
            println!("{} points written", rows.len());
        }
    }
    Ok(Outcome::files(&["sweep.csv", "sweep.json"]))
}

fn run_violations(a: &ViolationArgs, out: &Path) -> Result<Outcome> {
    let system = a.system.build()?;
    let sol = solve_dispatch(&system)?;
    let rep = empirical_violation_rate(&sol, &system, a.samples, a.seed)?;
    write_json(&out.join("violations.json"), &rep)?;
    println!(
        "max joint violation {:.4} against budget {:.4} + 2·{:.4}: {}",
        rep.max_joint,
        rep.epsilon,
        rep.binomial_se,
        if rep.within_budget() { "within" } else { "exceeded" }
    );
    Ok(Outcome::files(&["violations.json"]))
}

#[derive(Serialize)]
struct FitSummary {
    samples: usize,
    truth: Option<[f64; 3]>,
    fit: crate::distributions::VersatileFit,
    /// Relative error per parameter when the truth is known.
    rel_err: Option<[f64; 3]>,
}

fn run_fit(a: &FitArgs, out: &Path) -> Result<Outcome> {
    let (samples, truth) = match (&a.samples_file, a.truth.as_slice()) {
        (Some(path), _) => (read_error_samples(path)?, None),
        (None, [ta, tb, tc]) => {
            let model = NetLoadModel {
                forecast: vec![0.0],
                moments: vec![crate::distributions::ErrorMoments::new(0.0, 1.0)?],
                model: UncertaintyModel::versatile(*ta, *tb, *tc)?,
                renewable_ratio: 0.0,
                storage_ratio: 0.0,
            };
            let draws = sample_errors(&model, a.n, a.seed).into_iter().map(|r| r[0]).collect();
            (draws, Some([*ta, *tb, *tc]))
        }
        (None, []) => return Err(Error::Config("fit-dist needs --samples-file or --truth a,b,c".into())),
        (None, t) => return Err(Error::Config(format!("--truth takes 3 values, got {}", t.len()))),
    };
    let fit = fit_versatile_mle(&samples)?;
    let rel_err = truth.map(|t| {
        let f = [fit.a, fit.b, fit.c];
        let mut r = [0.0; 3];
        for i in 0..3 {
            r[i] = (f[i] - t[i]).abs() / t[i].abs().max(1e-12);
        }
        r
    });
    write_json(
        &out.join("fit.json"),
        &FitSummary {
            samples: samples.len(),
            truth,
            fit,
            rel_err,
        },
    )?;
    println!("a = {:.6}, b = {:.6}, c = {:.6}", fit.a, fit.b, fit.c);
    Ok(Outcome::files(&["fit.json"]))
}
