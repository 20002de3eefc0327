//! Closed-form storage pricing results and the numerical experiments that
//! check them against dispatch duals.
//!
//! Index convention: `θ_t` prices the stock carried out of period `t`, so the
//! coupling for period `t ≥ 1` expresses `θ_{t−1}` through `θ_t`, `λ_t`, `π_t`
//! and the period-`t` SoC quantiles `d̂_t < 0 < d̃_t`.

use rand_distr::StandardNormal;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costs::{marginal_expected_cost, CostPolynomial, StorageSpec};
use crate::dispatch::{solve_dispatch_with, DispatchSolution, SystemSpec, TerminalSoc};
use crate::distributions::ErrorMoments;
use crate::error::{Error, Result};
use crate::reformulation::{LayoutMode, RowKind};
use crate::scenarios::stream_rng;
use crate::solver::DEFAULT_ITER_CAP;

/// Solver tolerance for dispatches whose duals feed a theory check. Periods
/// where a flow and its nonnegativity dual both vanish stall the interior
/// point about `√tol` off the vertex, which the default tolerance leaves
/// visible at the coupling tolerance.
pub const THEORY_TOL: f64 = 1e-10;

/// Dispatch solved at [`THEORY_TOL`].
pub fn solve_for_theory(system: &SystemSpec) -> Result<DispatchSolution> {
    solve_dispatch_with(system, THEORY_TOL, DEFAULT_ITER_CAP).map(|(s, _, _)| s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StorageState {
    Charging,
    Discharging,
    Idle,
}

/// Inputs of the opportunity-price coupling for one period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingInputs {
    /// `θ_t`, $/MWh.
    pub theta: f64,
    /// `λ_t`, $/MWh.
    pub lambda: f64,
    /// `π_t`, $/h.
    pub pi: f64,
    pub marginal_cost: f64,
    pub eta: f64,
    /// `d̂_t`, lower SoC quantile, MW.
    pub d_lo: f64,
    /// `d̃_t`, upper SoC quantile, MW.
    pub d_hi: f64,
    /// Mean forecast error `μ_t`, MW.
    pub mu: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CouplingPrice {
    Point(f64),
    Interval { lo: f64, hi: f64 },
}

impl CouplingPrice {
    pub fn contains(&self, v: f64, tol: f64) -> bool {
        match *self {
            CouplingPrice::Point(x) => (v - x).abs() <= tol,
            CouplingPrice::Interval { lo, hi } => v >= lo - tol && v <= hi + tol,
        }
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::domain(format!("efficiency must lie in (0, 1], got {eta}")));
    }
    Ok(())
}

/// `θ_{t−1}` while charging:
/// `(η/d̃)(θ_t η d̂ + λ(d̃/η² − d̂) + π − Mμ)`.
/// Also the upper end of the idle interval.
pub fn charging_coupling(c: &CouplingInputs) -> Result<f64> {
    check_eta(c.eta)?;
    if c.d_hi == 0.0 {
        return Err(Error::DegenerateQuantile(
            "upper SoC quantile is zero; charging coupling undefined".into(),
        ));
    }
    let e = c.eta;
    Ok(e / c.d_hi
        * (c.theta * e * c.d_lo + c.lambda * (c.d_hi / (e * e) - c.d_lo) + c.pi
            - c.marginal_cost * c.mu))
}

/// `θ_{t−1}` while discharging:
/// `(1/(η d̂))(θ_t d̃/η + λ(η² d̂ − d̃) + π + M(d̃ − η² d̂ − μ))`.
/// Also the lower end of the idle interval.
pub fn discharging_coupling(c: &CouplingInputs) -> Result<f64> {
    check_eta(c.eta)?;
    if c.d_lo == 0.0 {
        return Err(Error::DegenerateQuantile(
            "lower SoC quantile is zero; discharging coupling undefined".into(),
        ));
    }
    let e = c.eta;
    let e2 = e * e;
    Ok((c.theta * c.d_hi / e
        + c.lambda * (e2 * c.d_lo - c.d_hi)
        + c.pi
        + c.marginal_cost * (c.d_hi - e2 * c.d_lo - c.mu))
        / (e * c.d_lo))
}

pub fn coupling_price(state: StorageState, c: &CouplingInputs) -> Result<CouplingPrice> {
    match state {
        StorageState::Charging => charging_coupling(c).map(CouplingPrice::Point),
        StorageState::Discharging => discharging_coupling(c).map(CouplingPrice::Point),
        StorageState::Idle => Ok(CouplingPrice::Interval {
            lo: discharging_coupling(c)?,
            hi: charging_coupling(c)?,
        }),
    }
}

/// Bounds on the opportunity price implied by price floors and caps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceBounds {
    pub charge: (f64, f64),
    pub discharge: (f64, f64),
}

/// Opportunity-price intervals for `λ ∈ [λ̲, λ̄]`, `π ∈ [π̲, π̄]`, with the
/// `θ_t` terms dropped:
///
/// ```text
/// charge     (η/d̃)(λ̲ a + π̲ − Mμ)           ≤ θ ≤ (−1/(η d̂))(λ̄ a + π̄ − Mμ)
/// discharge  (1/(η d̂))(λ̲ c + π̄ + M k)      ≤ θ ≤ (−η/d̃)(λ̄ c + π̲ + M k)
/// ```
///
/// with `a = d̃/η² − d̂`, `c = η² d̂ − d̃`, `k = d̃ − η² d̂ − μ`.
pub fn price_bounds(
    lambda: (f64, f64),
    pi: (f64, f64),
    storage: &StorageSpec,
    d_lo: f64,
    d_hi: f64,
    mu: f64,
) -> Result<PriceBounds> {
    let e = storage.eta;
    check_eta(e)?;
    if !(lambda.0 <= lambda.1) || !(pi.0 <= pi.1) {
        return Err(Error::domain(format!(
            "price bounds must be ordered, got λ {lambda:?} and π {pi:?}"
        )));
    }
    if d_lo == 0.0 || d_hi == 0.0 {
        return Err(Error::DegenerateQuantile(format!(
            "quantile pair ({d_lo}, {d_hi}) has a zero entry"
        )));
    }
    let m = storage.marginal_cost;
    let e2 = e * e;
    let a = d_hi / e2 - d_lo;
    let c = e2 * d_lo - d_hi;
    let k = d_hi - e2 * d_lo - mu;
    Ok(PriceBounds {
        charge: (
            e / d_hi * (lambda.0 * a + pi.0 - m * mu),
            -1.0 / (e * d_lo) * (lambda.1 * a + pi.1 - m * mu),
        ),
        discharge: (
            (lambda.0 * c + pi.1 + m * k) / (e * d_lo),
            -e / d_hi * (lambda.1 * c + pi.0 + m * k),
        ),
    })
}

/// Interior-charging opportunity price `θ = ∂E G(g + φ d)/∂g / η` under
/// Gaussian errors.
pub fn case1_theta(poly: &CostPolynomial, g: f64, phi: f64, moments: ErrorMoments, eta: f64) -> Result<f64> {
    check_eta(eta)?;
    Ok(marginal_expected_cost(poly, g, phi, moments)? / eta)
}

/// Closed-form `∂θ/∂σ` of [`case1_theta`] for cost degrees 2 to 4.
pub fn theta_sigma_derivative(
    poly: &CostPolynomial,
    g: f64,
    phi: f64,
    moments: ErrorMoments,
    eta: f64,
) -> Result<f64> {
    check_eta(eta)?;
    if !(0.0..=1.0).contains(&phi) {
        return Err(Error::domain(format!("phi must lie in [0, 1], got {phi}")));
    }
    let (mu, s) = (moments.mu, moments.sigma);
    let (c3, c4) = (poly.coeff(3), poly.coeff(4));
    let phi2 = phi * phi;
    match poly.degree() {
        2 => Ok(0.0),
        3 => Ok(6.0 * c3 * phi2 * s / eta),
        4 => Ok(s * (6.0 * c3 * phi2 + 24.0 * c4 * g * phi2 + 24.0 * c4 * phi2 * phi * mu) / eta),
        d => Err(Error::UnsupportedDegree {
            degree: d,
            supported: "2, 3 or 4",
        }),
    }
}

/// Operating point for the Jensen comparison: the generator sees
/// `D + φ d + (e_{t+1} − e_t)/η`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JensenPoint {
    pub net_load: f64,
    pub phi: f64,
    /// `e_{t+1} − e_t`, MWh.
    pub soc_delta: f64,
    pub eta: f64,
    pub moments: ErrorMoments,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JensenEstimate {
    /// `E[θ(d)] − θ(E[d])`, $/MWh.
    pub gap: f64,
    pub std_err: f64,
    pub theta_at_mean: f64,
    pub samples: usize,
}

impl JensenEstimate {
    /// Gap in units of its standard error; infinite for a nonzero gap with
    /// zero spread.
    pub fn z_score(&self) -> f64 {
        if self.std_err > 0.0 {
            self.gap / self.std_err
        } else if self.gap == 0.0 {
            0.0
        } else {
            self.gap.signum() * f64::INFINITY
        }
    }
}

pub const JENSEN_MIN_SAMPLES: usize = 10_000;

/// Monte Carlo estimate of the Jensen gap of the interior-charging price.
pub fn jensen_gap(poly: &CostPolynomial, point: &JensenPoint, samples: usize, seed: u64) -> Result<JensenEstimate> {
    check_eta(point.eta)?;
    if samples < JENSEN_MIN_SAMPLES {
        return Err(Error::domain(format!(
            "Jensen estimate needs at least {JENSEN_MIN_SAMPLES} samples, got {samples}"
        )));
    }
    let base = point.net_load + point.soc_delta / point.eta;
    let at = |d: f64| poly.derivative(base + point.phi * d) / point.eta;
    let theta_mean = at(point.moments.mu);
    // Differences to θ(E d) keep the σ = 0 case exactly zero.
    let mut rng = stream_rng(seed, 0);
    let (mut sum, mut sum2) = (0.0, 0.0);
    for _ in 0..samples {
        let z: f64 = rng.sample(StandardNormal);
        let diff = at(point.moments.mu + point.moments.sigma * z) - theta_mean;
        sum += diff;
        sum2 += diff * diff;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = ((sum2 - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(JensenEstimate {
        gap: mean,
        std_err: (var / n).sqrt(),
        theta_at_mean: theta_mean,
        samples,
    })
}

/// Binding pattern of a period's storage power.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PeriodCase {
    ChargeInterior,
    DischargeInterior,
    /// Discharge row (with its reserve share) binding.
    DischargeLimit,
    /// Charge row (with its reserve share) binding.
    ChargeLimit,
    Idle,
}

impl PeriodCase {
    pub fn state(self) -> StorageState {
        match self {
            PeriodCase::ChargeInterior | PeriodCase::ChargeLimit => StorageState::Charging,
            PeriodCase::DischargeInterior | PeriodCase::DischargeLimit => StorageState::Discharging,
            PeriodCase::Idle => StorageState::Idle,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            PeriodCase::ChargeInterior => "charge",
            PeriodCase::DischargeInterior => "discharge",
            PeriodCase::DischargeLimit => "discharge_limit",
            PeriodCase::ChargeLimit => "charge_limit",
            PeriodCase::Idle => "idle",
        }
    }
}

/// Flow threshold relative to `P̄` below which a power is treated as zero.
pub const FLOW_THRESHOLD: f64 = 1e-6;

/// Dual threshold relative to the solution's price scale.
pub const DUAL_REL_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub case: PeriodCase,
    /// Both flows above threshold: the relaxation of `b p = 0` is not tight.
    pub simultaneous: bool,
}

/// Duals of the four storage power rows of one period, $/MWh.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PowerDuals {
    pub charge_lower: f64,
    pub charge_upper: f64,
    pub discharge_lower: f64,
    pub discharge_upper: f64,
}

impl PowerDuals {
    pub fn at(sol: &DispatchSolution, t: usize) -> Self {
        PowerDuals {
            charge_lower: sol.dual(RowKind::ChargeLower, t),
            charge_upper: sol.dual(RowKind::ChargeUpper, t),
            discharge_lower: sol.dual(RowKind::DischargeLower, t),
            discharge_upper: sol.dual(RowKind::DischargeUpper, t),
        }
    }
}

/// Assigns one of the five cases from the flows and the power-row duals.
///
/// A flow counts as positive when it clears [`FLOW_THRESHOLD`] and, relative
/// to `P̄`, outweighs the dual of its own nonnegativity row relative to
/// `price_scale`. Interior-point solutions leave both members of such a pair
/// slightly positive; the larger one is the inactive side.
pub fn classify_period(b: f64, p: f64, p_max: f64, duals: PowerDuals, price_scale: f64) -> Classification {
    let thr = FLOW_THRESHOLD * p_max;
    let dual_tol = DUAL_REL_TOL * price_scale;
    let positive = |flow: f64, lower_dual: f64| flow > thr && flow / p_max > lower_dual / price_scale;
    let charging = positive(b, duals.charge_lower);
    let discharging = positive(p, duals.discharge_lower);
    let simultaneous = charging && discharging;
    let case = if charging && (!discharging || b >= p) {
        if duals.charge_upper > dual_tol {
            PeriodCase::ChargeLimit
        } else {
            PeriodCase::ChargeInterior
        }
    } else if discharging {
        if duals.discharge_upper > dual_tol {
            PeriodCase::DischargeLimit
        } else {
            PeriodCase::DischargeInterior
        }
    } else {
        PeriodCase::Idle
    };
    Classification { case, simultaneous }
}

/// What the coupling asserts about `θ_{t−1}` for one period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CouplingCheck {
    /// Equal to the charging expression.
    EqualsUpper,
    /// Equal to the discharging expression.
    EqualsLower,
    AtMostUpper,
    AtLeastLower,
    Between,
    /// Both power-limit rows bind; no closed-form statement.
    NotApplicable,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CouplingRow {
    pub period: usize,
    pub case: PeriodCase,
    pub simultaneous: bool,
    pub check: CouplingCheck,
    /// `θ_{t−1}` from the dispatch.
    pub theta_prev: f64,
    /// Charging expression (upper end).
    pub upper: f64,
    /// Discharging expression (lower end).
    pub lower: f64,
    pub holds: bool,
    /// Relative error of the asserted equality, zero for inequalities.
    pub rel_err: f64,
    /// Relative residual of the exact identity that keeps every dual.
    pub identity_residual: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CouplingReport {
    pub rows: Vec<CouplingRow>,
    pub holds: bool,
    pub max_rel_err: f64,
    pub max_identity_residual: f64,
}

/// Relative tolerance for the point couplings.
pub const COUPLING_REL_TOL: f64 = 1e-4;
/// Relative inflation of one-sided and interval checks.
pub const INTERVAL_REL_TOL: f64 = 1e-6;

fn price_scale(sol: &DispatchSolution) -> f64 {
    sol.lambda.iter().chain(&sol.theta).fold(1e-9_f64, |m, v| m.max(v.abs()))
}

pub(crate) fn coupling_inputs(sol: &DispatchSolution, system: &SystemSpec, t: usize) -> CouplingInputs {
    let q = &sol.quantiles[t].soc;
    CouplingInputs {
        theta: sol.theta[t],
        lambda: sol.lambda[t],
        pi: sol.pi[t],
        marginal_cost: system.storage.marginal_cost,
        eta: system.storage.eta,
        d_lo: q.lower,
        d_hi: q.upper,
        mu: system.net_load.moments[t].mu,
    }
}

/// Checks the opportunity-price coupling on every period `t ≥ 1` of a dispatch
/// solved with storage reserve.
pub fn verify_coupling(sol: &DispatchSolution, system: &SystemSpec) -> Result<CouplingReport> {
    if sol.mode != LayoutMode::Full {
        return Err(Error::domain(
            "the coupling needs storage in the reserve split (full layout)",
        ));
    }
    let scale = price_scale(sol);
    let dual_tol = DUAL_REL_TOL * scale;
    let eta = system.storage.eta;
    let mut rows = Vec::new();
    for t in 1..sol.horizon() {
        let c = coupling_inputs(sol, system, t);
        let upper = charging_coupling(&c)?;
        let lower = discharging_coupling(&c)?;
        let duals = PowerDuals::at(sol, t);
        let (a_up, a_lo, b_up) = (duals.charge_upper, duals.charge_lower, duals.discharge_upper);
        let cls = classify_period(sol.b[t], sol.p[t], system.storage.p_max, duals, scale);
        let (a_bind, b_bind) = (a_up > dual_tol, b_up > dual_tol);
        let check = match (cls.case, a_bind, b_bind) {
            (_, true, true) => CouplingCheck::NotApplicable,
            (PeriodCase::ChargeInterior, _, false) => CouplingCheck::EqualsUpper,
            (PeriodCase::DischargeInterior, false, _) => CouplingCheck::EqualsLower,
            (PeriodCase::Idle, false, false) => CouplingCheck::Between,
            (_, false, _) => CouplingCheck::AtMostUpper,
            (_, true, false) => CouplingCheck::AtLeastLower,
        };
        let th = sol.theta[t - 1];
        let denom = |x: f64| x.abs().max(th.abs()).max(1e-3 * scale);
        let slack = INTERVAL_REL_TOL * upper.abs().max(lower.abs()).max(scale);
        let (holds, rel_err) = match check {
            CouplingCheck::EqualsUpper => {
                let r = (th - upper).abs() / denom(upper);
                (r <= COUPLING_REL_TOL, r)
            }
            CouplingCheck::EqualsLower => {
                let r = (th - lower).abs() / denom(lower);
                (r <= COUPLING_REL_TOL, r)
            }
            CouplingCheck::AtMostUpper => (th <= upper + slack, 0.0),
            CouplingCheck::AtLeastLower => (th >= lower - slack, 0.0),
            CouplingCheck::Between => (th >= lower - slack && th <= upper + slack, 0.0),
            CouplingCheck::NotApplicable => (true, 0.0),
        };
        // θ_{t−1} = U + (η/d̃_s)(ᾱ d̂_p − β̄ d̃_p) − k(α̲ − ᾱ)/η, k = 1 − η² d̂_s/d̃_s.
        let qp = &sol.quantiles[t].power;
        let k = 1.0 - eta * eta * c.d_lo / c.d_hi;
        let exact = upper + eta / c.d_hi * (a_up * qp.lower - b_up * qp.upper) - k * (a_lo - a_up) / eta;
        rows.push(CouplingRow {
            period: t,
            case: cls.case,
            simultaneous: cls.simultaneous,
            check,
            theta_prev: th,
            upper,
            lower,
            holds,
            rel_err,
            identity_residual: (th - exact).abs() / denom(exact),
        });
    }
    Ok(CouplingReport {
        holds: rows.iter().all(|r| r.holds),
        max_rel_err: rows.iter().fold(0.0, |m, r| m.max(r.rel_err)),
        max_identity_residual: rows.iter().fold(0.0, |m, r| m.max(r.identity_residual)),
        rows,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundsRow {
    pub period: usize,
    pub state: StorageState,
    pub theta_prev: f64,
    pub lo: f64,
    pub hi: f64,
    pub inside: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundsReport {
    pub lambda_range: (f64, f64),
    pub pi_range: (f64, f64),
    pub rows: Vec<BoundsRow>,
    pub all_inside: bool,
}

/// Places each `θ_{t−1}` against the floor/cap intervals built from the
/// realized extremes of `λ` and `π`: the charge interval for charging periods,
/// the discharge interval for discharging periods and their hull when idle.
pub fn check_price_bounds(sol: &DispatchSolution, system: &SystemSpec) -> Result<BoundsReport> {
    let range = |v: &[f64]| {
        v.iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(*x), hi.max(*x)))
    };
    let lambda_range = range(&sol.lambda);
    let pi_range = range(&sol.pi);
    let scale = price_scale(sol);
    let mut rows = Vec::new();
    for t in 1..sol.horizon() {
        let q = &sol.quantiles[t].soc;
        let pb = price_bounds(
            lambda_range,
            pi_range,
            &system.storage,
            q.lower,
            q.upper,
            system.net_load.moments[t].mu,
        )?;
        let cls = classify_period(sol.b[t], sol.p[t], system.storage.p_max, PowerDuals::at(sol, t), scale);
        let state = cls.case.state();
        let (lo, hi) = match state {
            StorageState::Charging => pb.charge,
            StorageState::Discharging => pb.discharge,
            StorageState::Idle => (pb.charge.0.min(pb.discharge.0), pb.charge.1.max(pb.discharge.1)),
        };
        let th = sol.theta[t - 1];
        let slack = INTERVAL_REL_TOL * lo.abs().max(hi.abs()).max(scale);
        rows.push(BoundsRow {
            period: t,
            state,
            theta_prev: th,
            lo,
            hi,
            inside: th >= lo - slack && th <= hi + slack,
        });
    }
    Ok(BoundsReport {
        lambda_range,
        pi_range,
        all_inside: rows.iter().all(|r| r.inside),
        rows,
    })
}

/// Monotonicity asserted by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Trend {
    NonIncreasing,
    NonDecreasing,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub axis_value: f64,
    /// Recorded `θ` at the sweep's period, $/MWh.
    pub theta: f64,
    /// `λ/η`: the discharge-limit ceiling of `θ`.
    pub sup_theta: f64,
    /// `η(λ − M)`: the charge-limit floor of `θ`.
    pub inf_theta: f64,
    pub case: PeriodCase,
    /// Generator lower bound binding in the recorded period.
    pub gen_floor_binding: bool,
    /// Excluded from the verdict.
    pub excluded: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis_name: String,
    pub period: usize,
    pub points: Vec<SweepPoint>,
    pub trend: Trend,
    pub holds: bool,
    /// Largest move against the trend, $/MWh.
    pub max_violation: f64,
    pub tolerance: f64,
    pub note: Option<String>,
}

/// Relative tolerance of sweep verdicts, scaled by `max |θ|`.
pub const SWEEP_REL_TOL: f64 = 1e-6;

impl SweepResult {
    fn judge(&mut self) {
        let kept: Vec<f64> = self.points.iter().filter(|p| !p.excluded).map(|p| p.theta).collect();
        let max_abs = self.points.iter().fold(0.0_f64, |m, p| m.max(p.theta.abs()));
        self.tolerance = SWEEP_REL_TOL * max_abs.max(1e-12);
        self.max_violation = match self.trend {
            Trend::NonIncreasing => kept.windows(2).fold(0.0, |m, w| m.max(w[1] - w[0])),
            Trend::NonDecreasing => kept.windows(2).fold(0.0, |m, w| m.max(w[0] - w[1])),
            Trend::Constant => {
                let (lo, hi) = kept
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
                if kept.is_empty() { 0.0 } else { hi - lo }
            }
        };
        self.holds = self.max_violation <= self.tolerance;
    }

    pub fn thetas(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.theta).collect()
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["axis_value", "theta", "sup_theta", "inf_theta", "case_label", "verdict"])?;
        for p in &self.points {
            let verdict = if p.excluded {
                "excluded"
            } else if self.holds {
                "pass"
            } else {
                "fail"
            };
            w.write_record([
                p.axis_value.to_string(),
                p.theta.to_string(),
                p.sup_theta.to_string(),
                p.inf_theta.to_string(),
                p.case.label().to_string(),
                verdict.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_axis(axis: &[f64], name: &str) -> Result<()> {
    if axis.is_empty() {
        return Err(Error::domain(format!("{name} grid is empty")));
    }
    if axis.iter().any(|v| !v.is_finite()) || axis.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::domain(format!("{name} grid must be finite and strictly increasing")));
    }
    Ok(())
}

/// `n` evenly spaced initial stocks over `[0, Ē]`.
pub fn default_soc_grid(e_max: f64, n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![0.0; n.min(1)];
    }
    (0..n).map(|i| e_max * i as f64 / (n - 1) as f64).collect()
}

fn sweep_point(sol: &DispatchSolution, system: &SystemSpec, t: usize, axis_value: f64) -> SweepPoint {
    let eta = system.storage.eta;
    let scale = price_scale(sol);
    let cls = classify_period(sol.b[t], sol.p[t], system.storage.p_max, PowerDuals::at(sol, t), scale);
    SweepPoint {
        axis_value,
        theta: sol.theta[t],
        sup_theta: sol.lambda[t] / eta,
        inf_theta: eta * (sol.lambda[t] - system.storage.marginal_cost),
        case: cls.case,
        gen_floor_binding: sol.dual(RowKind::GenLower, t)
            > sol.scaling.price(crate::solver::DEFAULT_TOL.sqrt()),
        excluded: false,
    }
}

fn run_sweep(
    systems: Vec<(f64, SystemSpec)>,
    period: usize,
    axis_name: &str,
) -> Result<Vec<SweepPoint>> {
    systems
        .into_par_iter()
        .map(|(v, sys)| {
            if period >= sys.horizon {
                return Err(Error::domain(format!(
                    "sweep period {period} outside horizon {}",
                    sys.horizon
                )));
            }
            let sol = solve_for_theory(&sys).map_err(|e| match e {
                Error::Solver { status, .. } => Error::Solver {
                    stage: format!("{axis_name} sweep at {v}"),
                    status,
                },
                other => other,
            })?;
            Ok(sweep_point(&sol, &sys, period, v))
        })
        .collect()
}

/// Re-solves the dispatch for each initial stock with a free terminal stock
/// and records `θ` at `period`. Expected non-increasing.
pub fn soc_sweep(system: &SystemSpec, soc_grid: &[f64], period: usize) -> Result<SweepResult> {
    check_axis(soc_grid, "SoC")?;
    let e_max = system.storage.e_max;
    if soc_grid[0] < 0.0 || soc_grid[soc_grid.len() - 1] > e_max {
        return Err(Error::domain(format!("SoC grid must lie within [0, {e_max}]")));
    }
    let systems = soc_grid
        .iter()
        .map(|&e0| {
            let mut s = system.clone();
            s.storage.e_init = e0;
            s.terminal = TerminalSoc::Free;
            (e0, s)
        })
        .collect();
    let points = run_sweep(systems, period, "SoC")?;
    let mut res = SweepResult {
        axis_name: "e_init".into(),
        period,
        points,
        trend: Trend::NonIncreasing,
        holds: true,
        max_violation: 0.0,
        tolerance: 0.0,
        note: None,
    };
    res.judge();
    Ok(res)
}

/// Re-solves the dispatch with every `σ_t` scaled, storage kept out of the
/// reserve split, and records `θ` at `period`. Quadratic costs should give a
/// constant price, higher degrees a non-decreasing one. Points where the
/// generator floor binds are excluded from the verdict.
pub fn sigma_sweep(system: &SystemSpec, scales: &[f64], period: usize) -> Result<SweepResult> {
    check_axis(scales, "sigma scale")?;
    if scales[0] < 0.0 {
        return Err(Error::domain("sigma scales must be >= 0"));
    }
    let systems = scales
        .iter()
        .map(|&s| {
            let mut sys = system.with_sigma_scale(s);
            sys.storage_reserve = false;
            (s, sys)
        })
        .collect();
    let mut points = run_sweep(systems, period, "sigma")?;
    let trend = if system.cost.degree() <= 2 {
        Trend::Constant
    } else {
        Trend::NonDecreasing
    };
    let mut note = None;
    if trend == Trend::NonDecreasing {
        let mut n = 0;
        for p in &mut points {
            if p.gen_floor_binding {
                p.excluded = true;
                n += 1;
            }
        }
        if n > 0 {
            note = Some(format!("{n} point(s) excluded: generator lower bound binding"));
        }
    }
    let mut res = SweepResult {
        axis_name: "sigma_scale".into(),
        period,
        points,
        trend,
        holds: true,
        max_violation: 0.0,
        tolerance: 0.0,
        note,
    };
    res.judge();
    Ok(res)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlopeGapReport {
    /// Largest `|Δ sup θ − Δ inf θ| / Δe` over consecutive active points.
    pub gap: f64,
    pub pairs: usize,
    pub sweep: SweepResult,
}

/// Gap between the SoC slopes of the discharge ceiling `λ/η` and the charge
/// floor `η(λ − M)` along a SoC sweep. Pairs with an idle endpoint are
/// skipped; with no active pair the gap is 0.
pub fn slope_gap(system: &SystemSpec, soc_grid: &[f64], period: usize) -> Result<SlopeGapReport> {
    let sweep = soc_sweep(system, soc_grid, period)?;
    let mut gap = 0.0_f64;
    let mut pairs = 0;
    for w in sweep.points.windows(2) {
        if w[0].case == PeriodCase::Idle || w[1].case == PeriodCase::Idle {
            continue;
        }
        let de = w[1].axis_value - w[0].axis_value;
        let d_sup = (w[1].sup_theta - w[0].sup_theta) / de;
        let d_inf = (w[1].inf_theta - w[0].inf_theta) / de;
        gap = gap.max((d_sup - d_inf).abs());
        pairs += 1;
    }
    Ok(SlopeGapReport { gap, pairs, sweep })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoryCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TheoryReport {
    pub checks: Vec<TheoryCheck>,
    pub passed: bool,
}

fn check(name: &str, passed: bool, detail: String) -> TheoryCheck {
    TheoryCheck {
        name: name.into(),
        passed,
        detail,
    }
}

/// Number of random draws in the `∂θ/∂σ` finite-difference check.
pub const DERIVATIVE_DRAWS: usize = 1000;

/// Largest relative mismatch between the closed-form `∂θ/∂σ` and central
/// differences over random draws of degree 2 to 4 polynomials.
pub fn derivative_check(draws: usize, seed: u64) -> Result<f64> {
    let mut rng = stream_rng(seed, 1);
    let mut worst = 0.0_f64;
    for i in 0..draws {
        let degree = 2 + i % 3;
        let coeffs: Vec<f64> = (0..=degree).map(|_| rng.gen_range(0.1..2.0)).collect();
        let poly = CostPolynomial::from_coeffs(&coeffs)?;
        let (g, phi) = (rng.gen_range(0.0..2.0), rng.gen_range(0.2..1.0));
        let mu = rng.gen_range(-0.5..0.5);
        let sigma = rng.gen_range(0.1..2.0);
        let eta = rng.gen_range(0.5..1.0);
        let h = 1e-3;
        let th = |s: f64| case1_theta(&poly, g, phi, ErrorMoments { mu, sigma: s }, eta);
        let fd = (th(sigma + h)? - th(sigma - h)?) / (2.0 * h);
        let cf = theta_sigma_derivative(&poly, g, phi, ErrorMoments { mu, sigma }, eta)?;
        let scale = cf.abs().max(1e-9 * th(sigma)?.abs()).max(1e-12);
        worst = worst.max((fd - cf).abs() / scale);
    }
    Ok(worst)
}

/// Jensen point taken from a solved dispatch at period `t`.
pub fn jensen_point_from(sol: &DispatchSolution, system: &SystemSpec, t: usize) -> JensenPoint {
    JensenPoint {
        net_load: system.net_load.forecast[t],
        phi: sol.phi[t],
        soc_delta: sol.soc[t + 1] - sol.soc[t],
        eta: if system.storage.is_enabled() { system.storage.eta } else { 1.0 },
        moments: system.net_load.moments[t],
    }
}

/// Runs the pricing-theory battery on one system. `jensen_samples` must be
/// at least [`JENSEN_MIN_SAMPLES`].
pub fn run_theory_suite(system: &SystemSpec, seed: u64, jensen_samples: usize) -> Result<TheoryReport> {
    let mut checks = Vec::new();
    let t_rec = 0;
    if system.storage.is_enabled() {
        let grid = default_soc_grid(system.storage.e_max, 21);
        let soc = soc_sweep(system, &grid, t_rec)?;
        checks.push(check(
            "soc_monotonicity",
            soc.holds,
            format!("max rise {:.3e} (tolerance {:.3e})", soc.max_violation, soc.tolerance),
        ));
        let mut ideal = system.clone();
        ideal.storage.eta = 1.0;
        ideal.storage.marginal_cost = 0.0;
        let gap = slope_gap(&ideal, &grid, t_rec)?;
        checks.push(check(
            "ideal_storage_slope_gap",
            gap.gap <= 1e-6,
            format!("gap {:.3e} over {} active pairs", gap.gap, gap.pairs),
        ));
    }
    let scales: Vec<f64> = (0..7).map(|i| 0.5 + 0.25 * i as f64).collect();
    let sig = sigma_sweep(system, &scales, t_rec)?;
    checks.push(check(
        "sigma_monotonicity",
        sig.holds,
        format!(
            "{:?}: max violation {:.3e} (tolerance {:.3e}){}",
            sig.trend,
            sig.max_violation,
            sig.tolerance,
            sig.note.as_deref().map(|n| format!("; {n}")).unwrap_or_default()
        ),
    ));
    let worst = derivative_check(DERIVATIVE_DRAWS, seed)?;
    checks.push(check(
        "sigma_derivative_closed_form",
        worst <= 1e-6,
        format!("max relative error {worst:.3e} over {DERIVATIVE_DRAWS} draws"),
    ));

    // The generator's share of the error drives the gap, so take the point
    // from the dispatch where the generator carries all of it.
    let mut gen_only = system.clone();
    gen_only.storage_reserve = false;
    let jsol = solve_for_theory(&gen_only)?;
    let t_j = (0..jsol.horizon()).fold(0, |b, t| if jsol.phi[t] > jsol.phi[b] { t } else { b });
    let est = jensen_gap(&system.cost, &jensen_point_from(&jsol, system, t_j), jensen_samples, seed)?;
    let z = est.z_score();
    let (ok, expect) = if system.cost.degree() > 2 {
        (z >= 3.0, "gap > 3 SE")
    } else {
        (z.abs() <= 3.0, "|gap| <= 3 SE")
    };
    checks.push(check(
        "jensen_gap",
        ok,
        format!("period {t_j}: gap {:.4e} ± {:.2e} ({expect})", est.gap, est.std_err),
    ));
    let sol = solve_for_theory(system)?;
    if sol.mode == LayoutMode::Full {
        let rep = verify_coupling(&sol, system)?;
        checks.push(check(
            "opportunity_price_coupling",
            rep.holds,
            format!(
                "{} periods, max point error {:.3e}, identity residual {:.3e}",
                rep.rows.len(),
                rep.max_rel_err,
                rep.max_identity_residual
            ),
        ));
        let b = check_price_bounds(&sol, system)?;
        let outside = b.rows.iter().filter(|r| !r.inside).count();
        checks.push(check(
            "price_floor_cap_bounds",
            b.all_inside,
            format!("{outside} of {} periods outside", b.rows.len()),
        ));
    }
    Ok(TheoryReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dispatch::solve_dispatch;
    use crate::distributions::UncertaintyModel;
    use crate::reformulation::{GenBounds, RiskPolicy};
    use crate::scenarios::NetLoadModel;
    use nalgebra::{Matrix3, Vector3};
    use rand::SeedableRng;

    fn toy(forecast: Vec<f64>, sigma: f64, cost: &[f64], storage: StorageSpec) -> SystemSpec {
        let t = forecast.len();
        SystemSpec {
            horizon: t,
            net_load: NetLoadModel {
                forecast,
                moments: vec![ErrorMoments { mu: 0.0, sigma }; t],
                model: UncertaintyModel::Gaussian,
                renewable_ratio: 0.0,
                storage_ratio: 0.0,
            },
            cost: CostPolynomial::from_coeffs(cost).unwrap(),
            fleet: None,
            storage,
            gen: GenBounds { g_min: 0.0, g_max: 600.0 },
            epsilon: 0.05,
            risk_policy: RiskPolicy::EqualSplit,
            terminal: TerminalSoc::Periodic,
            storage_reserve: true,
        }
    }

    fn cubic_toy() -> SystemSpec {
        let st = StorageSpec::new(50.0, 200.0, 0.9, 5.0, 100.0).unwrap();
        toy(vec![150.0, 300.0, 250.0, 120.0, 200.0, 330.0], 15.0, &[0.0, 10.0, 0.02, 2e-5], st)
    }

    fn inputs(theta: f64, lambda: f64, pi: f64, m: f64, eta: f64, d_lo: f64, d_hi: f64, mu: f64) -> CouplingInputs {
        CouplingInputs { theta, lambda, pi, marginal_cost: m, eta, d_lo, d_hi, mu }
    }

    /// Solves the charge, reserve and stock stationarity rows for
    /// `(ῑ, ι̲, θ_{t−1})` with the power-limit duals at zero.
    fn kkt_oracle(c: &CouplingInputs, charging: bool) -> f64 {
        let e = c.eta;
        let (m, rhs0) = if charging {
            (Matrix3::new(e, 0.0, 0.0, -c.d_lo * e, c.d_hi / e, 0.0, 1.0, -1.0, 1.0), e * c.theta - c.lambda)
        } else {
            (Matrix3::new(0.0, 1.0 / e, 0.0, -c.d_lo * e, c.d_hi / e, 0.0, 1.0, -1.0, 1.0), c.lambda - c.marginal_cost - c.theta / e)
        };
        let rhs = Vector3::new(rhs0, c.pi - c.marginal_cost * c.mu, c.theta);
        m.lu().solve(&rhs).unwrap()[2]
    }

    #[test]
    fn symmetric_coupling_collapses() {
        let c = inputs(10.0, 20.0, 2.0, 0.0, 1.0, 1.0, 1.0, 1.0);
        assert!((charging_coupling(&c).unwrap() - 12.0).abs() < 1e-12);
        assert!((discharging_coupling(&c).unwrap() - 12.0).abs() < 1e-12);
        match coupling_price(StorageState::Idle, &c).unwrap() {
            CouplingPrice::Interval { lo, hi } => {
                assert!((lo - 12.0).abs() < 1e-12 && (hi - 12.0).abs() < 1e-12)
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn coupling_matches_kkt_solve() {
        let c = inputs(25.0, 30.0, 5.0, 20.0, 0.9, -16.449, 16.449, 0.0);
        assert!((charging_coupling(&c).unwrap() - kkt_oracle(&c, true)).abs() < 1e-9);
        assert!((discharging_coupling(&c).unwrap() - kkt_oracle(&c, false)).abs() < 1e-9);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let c = inputs(
                rng.gen_range(0.0..50.0),
                rng.gen_range(0.0..80.0),
                rng.gen_range(0.0..10.0),
                rng.gen_range(0.0..20.0),
                rng.gen_range(0.6..1.0),
                -rng.gen_range(1.0..30.0),
                rng.gen_range(1.0..30.0),
                rng.gen_range(-2.0..2.0),
            );
            let (u, l) = (charging_coupling(&c).unwrap(), discharging_coupling(&c).unwrap());
            assert!((u - kkt_oracle(&c, true)).abs() < 1e-8 * u.abs().max(1.0));
            assert!((l - kkt_oracle(&c, false)).abs() < 1e-8 * l.abs().max(1.0));
        }
    }

    #[test]
    fn zero_quantile_is_rejected() {
        let c = inputs(1.0, 1.0, 1.0, 0.0, 1.0, -1.0, 0.0, 0.0);
        assert!(matches!(charging_coupling(&c), Err(Error::DegenerateQuantile(_))));
        let c = inputs(1.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0);
        assert!(matches!(discharging_coupling(&c), Err(Error::DegenerateQuantile(_))));
        assert!(matches!(coupling_price(StorageState::Idle, &c), Err(Error::DegenerateQuantile(_))));
    }

    #[test]
    fn price_bounds_symmetric_ideal() {
        let st = StorageSpec::new(10.0, 40.0, 1.0, 0.0, 0.0).unwrap();
        let q = 3.0;
        let (lmax, pmax) = (50.0, 4.0);
        let pb = price_bounds((0.0, lmax), (0.0, pmax), &st, -q, q, 0.0).unwrap();
        assert!((pb.charge.1 - (2.0 * lmax + pmax / q)).abs() < 1e-12);
        // Maximizing the charging expression over the box, θ_t dropped.
        let mut best = f64::NEG_INFINITY;
        for i in 0..=20 {
            for j in 0..=20 {
                let c = inputs(0.0, lmax * i as f64 / 20.0, pmax * j as f64 / 20.0, 0.0, 1.0, -q, q, 0.0);
                best = best.max(charging_coupling(&c).unwrap());
            }
        }
        assert!((best - pb.charge.1).abs() < 1e-12);
        assert!(pb.charge.0 <= pb.charge.1 && pb.discharge.0 <= pb.discharge.1);
    }

    #[test]
    fn price_bounds_collapse_to_point_box() {
        let st = StorageSpec::new(10.0, 40.0, 0.9, 3.0, 0.0).unwrap();
        let pb = price_bounds((30.0, 30.0), (2.0, 2.0), &st, -5.0, 6.0, 0.5).unwrap();
        let c = inputs(0.0, 30.0, 2.0, 3.0, 0.9, -5.0, 6.0, 0.5);
        assert!((pb.charge.0 - charging_coupling(&c).unwrap()).abs() < 1e-12);
        assert!((pb.discharge.0 - discharging_coupling(&c).unwrap()).abs() < 1e-12);
        assert!(price_bounds((2.0, 1.0), (0.0, 0.0), &st, -1.0, 1.0, 0.0).is_err());
        assert!(matches!(
            price_bounds((0.0, 1.0), (0.0, 0.0), &st, 0.0, 1.0, 0.0),
            Err(Error::DegenerateQuantile(_))
        ));
    }

    #[test]
    fn price_bounds_nonempty_for_nonnegative_prices() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..500 {
            let st = StorageSpec::new(10.0, 40.0, rng.gen_range(0.5..1.0), 0.0, 0.0).unwrap();
            let q = rng.gen_range(0.5..20.0);
            let l0 = rng.gen_range(0.0..50.0);
            let p0 = rng.gen_range(0.0..5.0);
            let pb = price_bounds((l0, l0 + rng.gen_range(0.0..50.0)), (p0, p0 + 5.0), &st, -q, q, 0.0).unwrap();
            assert!(pb.charge.0 <= pb.charge.1 + 1e-9, "{pb:?}");
        }
    }

    #[test]
    fn sigma_derivative_closed_forms() {
        let quad = CostPolynomial::from_coeffs(&[1.0, 2.0, 3.0]).unwrap();
        let m = ErrorMoments { mu: 0.3, sigma: 1.7 };
        assert_eq!(theta_sigma_derivative(&quad, 5.0, 0.4, m, 0.9).unwrap(), 0.0);
        let cubic = CostPolynomial::from_coeffs(&[0.0, 0.0, 0.0, 1.0]).unwrap();
        let m = ErrorMoments { mu: 0.0, sigma: 2.0 };
        assert!((theta_sigma_derivative(&cubic, 3.0, 1.0, m, 1.0).unwrap() - 12.0).abs() < 1e-12);
        let lin = CostPolynomial::from_coeffs(&[0.0, 1.0]).unwrap();
        assert!(matches!(
            theta_sigma_derivative(&lin, 0.0, 1.0, m, 1.0),
            Err(Error::UnsupportedDegree { degree: 1, .. })
        ));
    }

    #[test]
    fn sigma_derivative_matches_central_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for i in 0..1000 {
            let degree = 2 + i % 3;
            let coeffs: Vec<f64> = (0..=degree).map(|_| rng.gen_range(0.1..2.0)).collect();
            let poly = CostPolynomial::from_coeffs(&coeffs).unwrap();
            let g = rng.gen_range(0.0..2.0);
            let phi = rng.gen_range(0.2..1.0);
            let mu = rng.gen_range(-0.5..0.5);
            let sigma = rng.gen_range(0.1..2.0);
            let eta = rng.gen_range(0.5..1.0);
            let h = 1e-3;
            let th = |s: f64| case1_theta(&poly, g, phi, ErrorMoments { mu, sigma: s }, eta).unwrap();
            let fd = (th(sigma + h) - th(sigma - h)) / (2.0 * h);
            let cf = theta_sigma_derivative(&poly, g, phi, ErrorMoments { mu, sigma }, eta).unwrap();
            let scale = cf.abs().max(1e-9 * th(sigma).abs());
            assert!((fd - cf).abs() <= 1e-6 * scale.max(1e-12), "deg {degree}: fd {fd} cf {cf}");
        }
    }

    fn jensen_point(sigma: f64) -> JensenPoint {
        JensenPoint {
            net_load: 250.0,
            phi: 0.8,
            soc_delta: 10.0,
            eta: 0.9,
            moments: ErrorMoments { mu: 0.0, sigma },
        }
    }

    #[test]
    fn jensen_gap_signs() {
        let quad = CostPolynomial::from_coeffs(&[0.0, 10.0, 0.02]).unwrap();
        let est = jensen_gap(&quad, &jensen_point(15.0), 100_000, 5).unwrap();
        assert!(est.z_score().abs() <= 3.0, "{est:?}");

        let cubic = CostPolynomial::from_coeffs(&[0.0, 10.0, 0.02, 2e-5]).unwrap();
        let pt = jensen_point(15.0);
        let est = jensen_gap(&cubic, &pt, 100_000, 5).unwrap();
        assert!(est.z_score() >= 3.0, "{est:?}");
        // E[3C₃(x + φd)²] − 3C₃x² = 3C₃φ²σ² for centred d.
        let exact = 3.0 * 2e-5 * 0.64 * 225.0 / 0.9;
        assert!((est.gap - exact).abs() <= 4.0 * est.std_err, "{est:?} vs {exact}");

        let flat = jensen_gap(&cubic, &jensen_point(0.0), 10_000, 5).unwrap();
        assert_eq!(flat.gap, 0.0);
        assert!(jensen_gap(&cubic, &pt, 100, 5).is_err());
    }

    #[test]
    fn classification_table() {
        let d = |au, bu| PowerDuals { charge_upper: au, discharge_upper: bu, ..PowerDuals::default() };
        let c = |b, p, au, bu| classify_period(b, p, 10.0, d(au, bu), 0.1).case;
        assert_eq!(c(5.0, 0.0, 0.0, 0.0), PeriodCase::ChargeInterior);
        assert_eq!(c(5.0, 0.0, 1.0, 0.0), PeriodCase::ChargeLimit);
        assert_eq!(c(0.0, 5.0, 0.0, 0.0), PeriodCase::DischargeInterior);
        assert_eq!(c(0.0, 5.0, 0.0, 1.0), PeriodCase::DischargeLimit);
        assert_eq!(c(1e-8, 1e-8, 1.0, 1.0), PeriodCase::Idle);
        let s = classify_period(3.0, 2.0, 10.0, PowerDuals::default(), 0.1);
        assert!(s.simultaneous);
        assert_eq!(s.case, PeriodCase::ChargeInterior);
        // A small flow facing a clearly positive nonnegativity dual is idle.
        let near = PowerDuals { charge_lower: 0.03, ..PowerDuals::default() };
        assert_eq!(classify_period(1e-4, 0.0, 10.0, near, 100.0).case, PeriodCase::Idle);
        assert_eq!(classify_period(1.0, 0.0, 10.0, near, 100.0).case, PeriodCase::ChargeInterior);
    }

    #[test]
    fn coupling_holds_on_solved_dispatch() {
        for sigma in [5.0, 15.0, 30.0] {
            let mut sys = cubic_toy();
            sys.net_load.moments = vec![ErrorMoments { mu: 0.0, sigma }; sys.horizon];
            let sol = solve_dispatch(&sys).unwrap();
            let rep = verify_coupling(&sol, &sys).unwrap();
            assert!(rep.holds, "{rep:#?}");
            assert!(rep.max_identity_residual < 1e-5, "{rep:#?}");
            let cases: Vec<_> = rep.rows.iter().map(|r| r.case).collect();
            assert!(cases.iter().any(|c| *c != PeriodCase::Idle), "{cases:?}");
        }
        let mut sys = cubic_toy();
        sys.storage_reserve = false;
        let sol = solve_dispatch(&sys).unwrap();
        assert!(verify_coupling(&sol, &sys).is_err());
    }

    #[test]
    fn soc_sweep_is_non_increasing() {
        let sys = cubic_toy();
        let grid = default_soc_grid(sys.storage.e_max, 11);
        let res = soc_sweep(&sys, &grid, 0).unwrap();
        assert!(res.holds, "{res:#?}");
        let th = res.thetas();
        assert!(th[0] > th[th.len() - 1]);
        assert!(soc_sweep(&sys, &[0.0, 500.0], 0).is_err());
        assert!(soc_sweep(&sys, &[10.0, 5.0], 0).is_err());
    }

    #[test]
    fn sigma_sweep_quadratic_flat_cubic_rising() {
        let st = StorageSpec::new(50.0, 200.0, 0.9, 5.0, 100.0).unwrap();
        let fc = vec![150.0, 300.0, 250.0, 120.0, 200.0, 330.0];
        let scales = [0.5, 1.0, 1.5, 2.0];
        let quad = toy(fc.clone(), 15.0, &[0.0, 10.0, 0.03], st.clone());
        let res = sigma_sweep(&quad, &scales, 0).unwrap();
        assert_eq!(res.trend, Trend::Constant);
        assert!(res.holds, "{res:#?}");
        let cubic = cubic_toy();
        let res = sigma_sweep(&cubic, &scales, 0).unwrap();
        assert_eq!(res.trend, Trend::NonDecreasing);
        assert!(res.holds, "{res:#?}");
        let th = res.thetas();
        assert!(th.windows(2).all(|w| w[1] > w[0]), "{th:?}");
    }

    #[test]
    fn zero_sigma_scale_matches_deterministic_dispatch() {
        let cubic = cubic_toy();
        let res = sigma_sweep(&cubic, &[0.0], 2).unwrap();
        let mut det = cubic.with_sigma_scale(0.0);
        det.storage_reserve = false;
        let sol = solve_for_theory(&det).unwrap();
        assert!((res.points[0].theta - sol.theta[2]).abs() <= 1e-9 * sol.theta[2].abs());
    }

    #[test]
    fn ideal_storage_has_no_slope_gap() {
        let st = StorageSpec::new(50.0, 200.0, 1.0, 0.0, 100.0).unwrap();
        let sys = toy(vec![150.0, 300.0, 250.0, 120.0, 200.0, 330.0], 15.0, &[0.0, 10.0, 0.02, 2e-5], st);
        let rep = slope_gap(&sys, &default_soc_grid(200.0, 11), 0).unwrap();
        assert!(rep.pairs > 0);
        assert!(rep.gap <= 1e-6, "{rep:#?}");
        let lossy = cubic_toy();
        let rep = slope_gap(&lossy, &default_soc_grid(200.0, 11), 0).unwrap();
        assert!(rep.pairs == 0 || rep.gap > 0.0);
    }

    #[test]
    fn sweep_csv_has_expected_columns() {
        let sys = cubic_toy();
        let res = soc_sweep(&sys, &[0.0, 100.0, 200.0], 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        res.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "axis_value,theta,sup_theta,inf_theta,case_label,verdict");
        assert_eq!(lines.count(), 3);
    }

    #[test]
    fn suite_on_toy_is_deterministic() {
        let sys = cubic_toy();
        let a = run_theory_suite(&sys, 7, 20_000).unwrap();
        let b = run_theory_suite(&sys, 7, 20_000).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(a.checks.iter().any(|c| c.name == "opportunity_price_coupling" && c.passed));
    }
}
