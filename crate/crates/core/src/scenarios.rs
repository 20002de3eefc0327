//! Test-system synthesis, CSV ingestion, net-load sampling and empirical
//! chance-constraint validation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costs::{
    fit_polynomial_to_merit_curve, read_fleet_csv, write_fleet_csv, FleetCurve, FleetSegment,
    StorageSpec,
};
use crate::dispatch::{DispatchSolution, SystemSpec, TerminalSoc};
use crate::distributions::{
    empirical_quantile, quantile_pair, versatile_quantile, ErrorMoments, UncertaintyModel,
};
use crate::error::{Error, Result};
use crate::reformulation::{GenBounds, RiskPolicy};

/// Net-load forecast with per-period error moments and a shared error model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetLoadModel {
    /// `D_t`, MW.
    pub forecast: Vec<f64>,
    pub moments: Vec<ErrorMoments>,
    pub model: UncertaintyModel,
    pub renewable_ratio: f64,
    pub storage_ratio: f64,
}

impl NetLoadModel {
    pub fn validate(&self) -> Result<()> {
        if self.forecast.len() != self.moments.len() {
            return Err(Error::domain(format!(
                "{} forecasts but {} error moments",
                self.forecast.len(),
                self.moments.len()
            )));
        }
        if self.forecast.iter().any(|d| !d.is_finite()) {
            return Err(Error::domain("net-load forecast must be finite"));
        }
        if self.renewable_ratio < 0.0 || self.storage_ratio < 0.0 {
            return Err(Error::domain("capacity ratios must be >= 0"));
        }
        self.model.validate()
    }
}

/// Normalized hourly load shape (mean 1): overnight trough, evening peak.
pub const LOAD_SHAPE: [f64; 24] = [
    0.78, 0.75, 0.74, 0.74, 0.76, 0.82, 0.92, 1.02, 1.08, 1.10, 1.11, 1.11, 1.10, 1.09, 1.09, 1.10,
    1.13, 1.20, 1.25, 1.22, 1.15, 1.05, 0.94, 0.85,
];

/// Normalized renewable output shape (mean 1): wind at night, solar midday.
pub const RENEWABLE_SHAPE: [f64; 24] = [
    0.92, 0.90, 0.88, 0.86, 0.84, 0.84, 0.88, 0.96, 1.06, 1.16, 1.24, 1.30, 1.30, 1.26, 1.18, 1.08,
    0.98, 0.90, 0.86, 0.86, 0.88, 0.90, 0.92, 0.94,
];

fn normalized(shape: &[f64; 24]) -> Vec<f64> {
    let mean = shape.iter().sum::<f64>() / 24.0;
    shape.iter().map(|v| v / mean).collect()
}

/// Parameters of the synthetic test system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub n_gens: usize,
    pub total_cap_mw: f64,
    pub avg_load_mw: f64,
    /// Average renewable output as a share of average load.
    pub renewable_ratio: f64,
    /// Storage power as a share of average load.
    pub storage_ratio: f64,
    pub duration_h: f64,
    pub eta: f64,
    pub marginal_cost: f64,
    pub e_init_ratio: f64,
    pub epsilon: f64,
    pub horizon: usize,
    pub seed: u64,
    /// Degree of the polynomial fitted to the merit curve.
    pub fit_degree: usize,
    /// Generator minimum output as a share of fleet capacity.
    pub g_min_ratio: f64,
    /// Load forecast-error standard deviation as a share of load.
    pub load_error_frac: f64,
    /// Renewable forecast-error standard deviation as a share of output.
    pub renewable_error_frac: f64,
    pub model: UncertaintyModel,
    pub terminal: TerminalSoc,
    pub storage_reserve: bool,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n_gens: 76,
            total_cap_mw: 23_100.0,
            avg_load_mw: 13_000.0,
            renewable_ratio: 0.3,
            storage_ratio: 0.2,
            duration_h: 4.0,
            eta: 0.95,
            marginal_cost: 20.0,
            e_init_ratio: 0.5,
            epsilon: 0.05,
            horizon: 24,
            seed: 1,
            fit_degree: 3,
            g_min_ratio: 0.1,
            load_error_frac: 0.02,
            renewable_error_frac: 0.15,
            model: UncertaintyModel::Gaussian,
            terminal: TerminalSoc::Periodic,
            storage_reserve: true,
        }
    }
}

/// Merit-ordered fleet with log-spaced marginal costs in `[10, 120]` $/MWh.
/// Each unit's quadratic term makes the stacked marginal cost continuous.
pub fn synth_fleet(n_gens: usize, total_cap_mw: f64, seed: u64) -> Result<FleetCurve> {
    if n_gens == 0 || !(total_cap_mw > 0.0) {
        return Err(Error::domain("fleet needs at least one unit and positive capacity"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..n_gens).map(|_| rng.gen_range(0.5..1.5)).collect();
    let sum: f64 = raw.iter().sum();
    let caps: Vec<f64> = raw.iter().map(|r| r / sum * total_cap_mw).collect();
    let (lo, hi) = (10.0_f64, 120.0_f64);
    let mc: Vec<f64> = (0..=n_gens)
        .map(|i| lo * (hi / lo).powf(i as f64 / n_gens as f64))
        .collect();
    let segs = (0..n_gens)
        .map(|i| FleetSegment {
            capacity_mw: caps[i],
            c0: 0.0,
            c1: mc[i],
            c2: (mc[i + 1] - mc[i]) / (2.0 * caps[i]),
        })
        .collect();
    FleetCurve::new(segs)
}

/// Builds the synthetic system: fleet, fitted cost polynomial, diurnal net
/// load, error moments and storage.
pub fn synth_test_system(params: &SynthParams) -> Result<SystemSpec> {
    let p = params;
    if p.horizon == 0 {
        return Err(Error::domain("horizon must be at least 1"));
    }
    if p.renewable_ratio < 0.0 || p.storage_ratio < 0.0 || p.avg_load_mw <= 0.0 {
        return Err(Error::domain("ratios must be >= 0 and average load positive"));
    }
    let fleet = synth_fleet(p.n_gens, p.total_cap_mw, p.seed)?;
    let fit = fit_polynomial_to_merit_curve(&fleet, p.fit_degree)?;
    let cap = fleet.total_capacity();
    let load_shape = normalized(&LOAD_SHAPE);
    let ren_shape = normalized(&RENEWABLE_SHAPE);
    let mut forecast = Vec::with_capacity(p.horizon);
    let mut moments = Vec::with_capacity(p.horizon);
    for t in 0..p.horizon {
        let load = p.avg_load_mw * load_shape[t % 24];
        let ren = p.renewable_ratio * p.avg_load_mw * ren_shape[t % 24];
        forecast.push(load - ren);
        let sigma = ((p.load_error_frac * load).powi(2) + (p.renewable_error_frac * ren).powi(2)).sqrt();
        moments.push(ErrorMoments::new(0.0, sigma)?);
    }
    let p_max = p.storage_ratio * p.avg_load_mw;
    let storage = if p_max > 0.0 {
        let e_max = p_max * p.duration_h;
        StorageSpec::new(p_max, e_max, p.eta, p.marginal_cost, p.e_init_ratio * e_max)?
    } else {
        StorageSpec::disabled()
    };
    let gen = GenBounds {
        g_min: p.g_min_ratio * cap,
        g_max: cap,
    };
    let system = SystemSpec {
        horizon: p.horizon,
        net_load: NetLoadModel {
            forecast,
            moments,
            model: p.model.clone(),
            renewable_ratio: p.renewable_ratio,
            storage_ratio: p.storage_ratio,
        },
        cost: fit.poly,
        fleet: Some(fleet),
        storage,
        gen,
        epsilon: p.epsilon,
        risk_policy: RiskPolicy::EqualSplit,
        terminal: p.terminal,
        storage_reserve: p.storage_reserve,
    };
    check_capacity(&system)?;
    Ok(system)
}

/// Rejects systems whose net-load band cannot be covered by the fleet alone.
pub fn check_capacity(system: &SystemSpec) -> Result<()> {
    let qs = system.quantiles()?;
    for (t, (d, q)) in system.net_load.forecast.iter().zip(&qs).enumerate() {
        if d + q.gen.upper > system.gen.g_max || d + q.gen.lower < system.gen.g_min {
            return Err(Error::domain(format!(
                "period {}: net load {d:.1} MW with band [{:.1}, {:.1}] does not fit generator range [{}, {}]",
                t + 1,
                q.gen.lower,
                q.gen.upper,
                system.gen.g_min,
                system.gen.g_max
            )));
        }
    }
    Ok(())
}

/// Settings for a system whose fleet, load and errors come from CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSystemOptions {
    pub storage: StorageSpec,
    pub epsilon: f64,
    pub model: UncertaintyModel,
    pub fit_degree: usize,
    pub g_min_ratio: f64,
    pub terminal: TerminalSoc,
    pub storage_reserve: bool,
}

fn schema(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn parse_num(path: &Path, line: usize, field: &str) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| schema(path, line, format!("'{field}' is not a number")))
}

fn read_table(path: &Path) -> Result<(Vec<String>, Vec<(usize, Vec<String>)>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| schema(path, i + 2, e.to_string()))?;
        rows.push((i + 2, rec.iter().map(|s| s.to_string()).collect()));
    }
    Ok((headers, rows))
}

fn check_period(path: &Path, line: usize, field: &str, expected: usize) -> Result<()> {
    let t: usize = field
        .trim()
        .parse()
        .map_err(|_| schema(path, line, format!("period '{field}' is not an integer")))?;
    if t != expected {
        return Err(schema(path, line, format!("expected period {expected}, found {t}")));
    }
    Ok(())
}

/// Reads a load CSV with columns `t, d_mw` (periods numbered from 1).
pub fn read_load_csv(path: &Path) -> Result<Vec<f64>> {
    let (headers, rows) = read_table(path)?;
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| schema(path, 1, format!("missing column '{name}'")))
    };
    let (ct, cd) = (col("t")?, col("d_mw")?);
    rows.iter()
        .enumerate()
        .map(|(k, (line, rec))| {
            check_period(path, *line, &rec[ct], k + 1)?;
            parse_num(path, *line, &rec[cd])
        })
        .collect()
}

/// Reads per-period error moments from `t, mu_mw, sigma_mw`, or estimates them
/// from raw sample columns (every column other than `t`) when `sigma_mw` is
/// absent.
pub fn read_errors_csv(path: &Path) -> Result<Vec<ErrorMoments>> {
    let (headers, rows) = read_table(path)?;
    let ct = headers
        .iter()
        .position(|h| h == "t")
        .ok_or_else(|| schema(path, 1, "missing column 't'"))?;
    let cs = headers.iter().position(|h| h == "sigma_mw");
    let cm = headers.iter().position(|h| h == "mu_mw");
    let sample_cols: Vec<usize> = (0..headers.len()).filter(|c| *c != ct).collect();
    if cs.is_none() && sample_cols.len() < 2 {
        return Err(schema(
            path,
            1,
            "need 'sigma_mw' or at least two raw sample columns",
        ));
    }
    rows.iter()
        .enumerate()
        .map(|(k, (line, rec))| {
            check_period(path, *line, &rec[ct], k + 1)?;
            let m = if let Some(cs) = cs {
                let mu = match cm {
                    Some(cm) => parse_num(path, *line, &rec[cm])?,
                    None => 0.0,
                };
                ErrorMoments::new(mu, parse_num(path, *line, &rec[cs])?)
            } else {
                let v: Vec<f64> = sample_cols
                    .iter()
                    .map(|c| parse_num(path, *line, &rec[*c]))
                    .collect::<Result<_>>()?;
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
                ErrorMoments::new(mean, sd)
            };
            m.map_err(|e| schema(path, *line, e.to_string()))
        })
        .collect()
}

/// Builds a system from a fleet CSV, a load CSV and an error CSV.
pub fn load_system_csv(
    fleet_path: &Path,
    load_path: &Path,
    errors_path: &Path,
    options: &CsvSystemOptions,
) -> Result<SystemSpec> {
    let fleet = read_fleet_csv(fleet_path)?;
    let forecast = read_load_csv(load_path)?;
    let moments = read_errors_csv(errors_path)?;
    if forecast.len() != moments.len() {
        return Err(Error::domain(format!(
            "horizon mismatch: {} has {} periods but {} has {}",
            load_path.display(),
            forecast.len(),
            errors_path.display(),
            moments.len()
        )));
    }
    if forecast.is_empty() {
        return Err(schema(load_path, 2, "no periods"));
    }
    let fit = fit_polynomial_to_merit_curve(&fleet, options.fit_degree)?;
    let cap = fleet.total_capacity();
    let system = SystemSpec {
        horizon: forecast.len(),
        net_load: NetLoadModel {
            forecast,
            moments,
            model: options.model.clone(),
            renewable_ratio: 0.0,
            storage_ratio: 0.0,
        },
        cost: fit.poly,
        fleet: Some(fleet),
        storage: options.storage,
        gen: GenBounds {
            g_min: options.g_min_ratio * cap,
            g_max: cap,
        },
        epsilon: options.epsilon,
        risk_policy: RiskPolicy::EqualSplit,
        terminal: options.terminal,
        storage_reserve: options.storage_reserve,
    };
    system.validate()?;
    Ok(system)
}

/// Writes `fleet.csv`, `load.csv` and `errors.csv` into `dir`.
pub fn write_system_csv(system: &SystemSpec, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let fleet = system
        .fleet
        .as_ref()
        .ok_or_else(|| Error::domain("system has no fleet curve to export"))?;
    write_fleet_csv(fleet, &dir.join("fleet.csv"))?;
    let mut w = csv::Writer::from_path(dir.join("load.csv"))?;
    w.write_record(["t", "d_mw"])?;
    for (t, d) in system.net_load.forecast.iter().enumerate() {
        w.write_record([(t + 1).to_string(), format!("{d}")])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("errors.csv"))?;
    w.write_record(["t", "mu_mw", "sigma_mw"])?;
    for (t, m) in system.net_load.moments.iter().enumerate() {
        w.write_record([(t + 1).to_string(), format!("{}", m.mu), format!("{}", m.sigma)])?;
    }
    w.flush()?;
    Ok(())
}

/// One standardized error draw from the model. Distribution-free classes are
/// sampled as standard normal.
fn standardized_draw(model: &UncertaintyModel, rng: &mut ChaCha8Rng) -> f64 {
    match model {
        UncertaintyModel::Gaussian | UncertaintyModel::Robust { .. } => rng.sample(StandardNormal),
        UncertaintyModel::Versatile { a, b, c } => {
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            versatile_quantile(*a, *b, *c, u)
        }
        UncertaintyModel::Empirical { samples } => samples[rng.gen_range(0..samples.len())],
    }
}

/// RNG stream for trajectory `index` under `seed`.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Forecast errors `d_t = μ_t + σ_t z_t`, one row per trajectory.
pub fn sample_errors(model: &NetLoadModel, n: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            model
                .moments
                .iter()
                .map(|m| {
                    let z = standardized_draw(&model.model, &mut rng);
                    if m.sigma == 0.0 {
                        m.mu
                    } else {
                        m.mu + m.sigma * z
                    }
                })
                .collect()
        })
        .collect()
}

/// Net-load trajectories `D_t + d_t`, one row per trajectory.
pub fn sample_net_load(model: &NetLoadModel, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::domain("need at least one trajectory"));
    }
    model.validate()?;
    let errs = sample_errors(model, n, seed);
    Ok(errs
        .into_iter()
        .map(|row| row.iter().zip(&model.forecast).map(|(d, f)| f + d).collect())
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstraintRate {
    pub name: String,
    pub period: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViolationReport {
    pub samples: usize,
    pub epsilon: f64,
    pub per_constraint: Vec<ConstraintRate>,
    /// Joint rate of each Bonferroni group (generator bounds, SoC bounds).
    pub joint: Vec<ConstraintRate>,
    pub max_joint: f64,
    /// `√(ε(1−ε)/n)`.
    pub binomial_se: f64,
}

impl ViolationReport {
    pub fn within_budget(&self) -> bool {
        self.max_joint <= self.epsilon + 2.0 * self.binomial_se
    }
}

/// Evaluates every original chance constraint at the fixed first-stage
/// decisions over `n` sampled error trajectories.
pub fn empirical_violation_rate(
    solution: &DispatchSolution,
    system: &SystemSpec,
    n: usize,
    seed: u64,
) -> Result<ViolationReport> {
    if n == 0 {
        return Err(Error::domain("need at least one sample"));
    }
    let errs = sample_errors(&system.net_load, n, seed);
    let st = &system.storage;
    let has_storage = st.is_enabled();
    let tol = |bound: f64| 1e-9 * bound.abs().max(1.0);
    let mut per_constraint = Vec::new();
    let mut joint = Vec::new();
    let rate = |count: usize| count as f64 / n as f64;
    for t in 0..system.horizon {
        let (g, phi, psi) = (solution.g[t], solution.phi[t], solution.psi[t]);
        let (p, b, e) = (solution.p[t], solution.b[t], solution.soc[t]);
        let mut c = [0usize; 8];
        for row in &errs {
            let d = row[t];
            let gen = g + phi * d;
            let lo = gen < system.gen.g_min - tol(system.gen.g_min);
            let hi = gen > system.gen.g_max + tol(system.gen.g_max);
            c[0] += lo as usize;
            c[1] += hi as usize;
            c[2] += (lo || hi) as usize;
            if has_storage {
                let dis = p + psi * d;
                let chg = b - psi * d;
                c[3] += (chg > st.p_max + tol(st.p_max)) as usize;
                c[4] += (dis > st.p_max + tol(st.p_max)) as usize;
                let s_lo = dis / st.eta > e + tol(st.e_max);
                let s_hi = e + chg * st.eta > st.e_max + tol(st.e_max);
                c[5] += s_lo as usize;
                c[6] += s_hi as usize;
                c[7] += (s_lo || s_hi) as usize;
            }
        }
        let mut push = |name: &str, k: usize| {
            per_constraint.push(ConstraintRate {
                name: name.into(),
                period: t,
                rate: rate(c[k]),
            })
        };
        push("gen_lower", 0);
        push("gen_upper", 1);
        if has_storage {
            push("charge_upper", 3);
            push("discharge_upper", 4);
            push("soc_lower", 5);
            push("soc_upper", 6);
        }
        joint.push(ConstraintRate {
            name: "generator".into(),
            period: t,
            rate: rate(c[2]),
        });
        if has_storage {
            joint.push(ConstraintRate {
                name: "soc".into(),
                period: t,
                rate: rate(c[7]),
            });
        }
    }
    let max_joint = joint.iter().fold(0.0_f64, |m, r| m.max(r.rate));
    let eps = system.epsilon;
    Ok(ViolationReport {
        samples: n,
        epsilon: eps,
        per_constraint,
        joint,
        max_joint,
        binomial_se: (eps * (1.0 - eps) / n as f64).sqrt(),
    })
}

/// Empirical quantile of the forecast-error band used by a system at `eps`,
/// in MW, for period `t`. Exposed for reporting.
pub fn error_band(system: &SystemSpec, t: usize, eps: f64) -> Result<(f64, f64)> {
    quantile_pair(system.net_load.moments[t], eps, &system.net_load.model)
}

/// Kolmogorov–Smirnov statistic of `samples` against a CDF.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter().enumerate().fold(0.0_f64, |m, (i, x)| {
        let f = cdf(*x);
        m.max((f - i as f64 / n).abs()).max(((i + 1) as f64 / n - f).abs())
    })
}

/// Empirical quantile helper used in reporting.
pub fn sample_quantile(samples: &[f64], q: f64) -> Result<f64> {
    empirical_quantile(samples, q)
}
