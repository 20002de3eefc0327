//! Two-stage chance-constrained economic dispatch with storage, and price
//! extraction from its duals.
//!
//! Prices follow these conventions (all in physical units):
//! - `λ_t` ($/MWh) is the marginal system cost of one more MWh of load.
//! - `θ_t` ($/MWh) is the dual of the SoC recursion of period `t`
//!   (`e_{t+1} = e_t − p_t/η + b_t η`), the marginal value of stored energy.
//! - `π_t` ($/h) is the dual of the reserve split `φ_t + ψ_t = 1`.
//!
//! Internally the program is solved in per-unit: power and energy are divided
//! by `base_mw` and cost by `cost_base`, so gradients are O(1).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::costs::{convexity_gate, CostPolynomial, GateBand, FleetCurve, MomentTable, StorageSpec};
use crate::distributions::{quantile_pair, ErrorMoments};
use crate::error::{Error, Result};
use crate::reformulation::{
    allocate_risk, build_deterministic_constraints, push_row, Expr, GenBounds, Layout,
    LayoutMode, LinearConstraintSet, PeriodQuantiles, QuantileSlot, RiskPolicy, RowKind, RowTag,
    Sense, VarKind,
};
use crate::scenarios::NetLoadModel;
use crate::solver::{
    solve_convex, ConvexProgram, Objective, Residuals, SolveResult, SolveStatus, DEFAULT_ITER_CAP,
    DEFAULT_TOL,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TerminalSoc {
    /// `e_{T+1} = e_1`.
    Periodic,
    Fixed(f64),
    /// Only `0 ≤ e_{T+1} ≤ Ē`.
    Free,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub horizon: usize,
    pub net_load: NetLoadModel,
    pub cost: CostPolynomial,
    /// Exact merit-order curve, used only for ex-post metrics.
    pub fleet: Option<FleetCurve>,
    pub storage: StorageSpec,
    pub gen: GenBounds,
    pub epsilon: f64,
    /// Split of each joint group's budget between its lower and upper side.
    pub risk_policy: RiskPolicy,
    pub terminal: TerminalSoc,
    /// When false, storage keeps no reserve (`φ = 1`, `ψ = 0`).
    pub storage_reserve: bool,
}

impl SystemSpec {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::domain("horizon must be at least 1"));
        }
        if self.net_load.forecast.len() != self.horizon || self.net_load.moments.len() != self.horizon {
            return Err(Error::domain(format!(
                "horizon {} but {} forecasts and {} error moments",
                self.horizon,
                self.net_load.forecast.len(),
                self.net_load.moments.len()
            )));
        }
        if !(self.gen.g_min <= self.gen.g_max) || !self.gen.g_min.is_finite() || !self.gen.g_max.is_finite() {
            return Err(Error::domain(format!(
                "generator bounds [{}, {}] are invalid",
                self.gen.g_min, self.gen.g_max
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::domain(format!("epsilon must lie in (0, 1), got {}", self.epsilon)));
        }
        self.storage.validate()?;
        if let TerminalSoc::Fixed(v) = self.terminal {
            if !(0.0..=self.storage.e_max).contains(&v) {
                return Err(Error::domain(format!("terminal SoC {v} outside [0, Ē]")));
            }
        }
        self.net_load.model.validate()?;
        Ok(())
    }

    pub fn mode(&self) -> LayoutMode {
        if !self.storage.is_enabled() {
            LayoutMode::NoStorage
        } else if !self.storage_reserve {
            LayoutMode::NoStorageReserve
        } else {
            LayoutMode::Full
        }
    }

    /// Same system with every `σ_t` multiplied by `scale`.
    pub fn with_sigma_scale(&self, scale: f64) -> SystemSpec {
        let mut s = self.clone();
        for m in &mut s.net_load.moments {
            *m = m.scaled(scale);
        }
        s
    }

    /// Physical net-load quantiles per period: generator and SoC slots at the
    /// Bonferroni-split risk, power slots at the full `ε`.
    pub fn quantiles(&self) -> Result<Vec<PeriodQuantiles>> {
        let split = allocate_risk(self.epsilon, 2, &self.risk_policy)?;
        let (e_lo, e_hi) = (split.epsilons[0], split.epsilons[1]);
        let model = &self.net_load.model;
        self.net_load
            .moments
            .iter()
            .map(|m| {
                let joint = QuantileSlot {
                    lower: quantile_pair(*m, e_lo, model)?.0,
                    upper: quantile_pair(*m, e_hi, model)?.1,
                    eps_lower: e_lo,
                    eps_upper: e_hi,
                };
                let (pl, pu) = quantile_pair(*m, self.epsilon.min(0.5), model)?;
                let power = QuantileSlot {
                    lower: pl,
                    upper: pu,
                    eps_lower: self.epsilon,
                    eps_upper: self.epsilon,
                };
                Ok(PeriodQuantiles {
                    gen: joint,
                    power,
                    soc: joint,
                })
            })
            .collect()
    }
}

/// Per-unit scaling of a dispatch program.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub base_mw: f64,
    pub cost_base: f64,
}

impl Scaling {
    fn for_system(s: &SystemSpec) -> Scaling {
        let base_mw = s.gen.g_max.abs().max(s.storage.p_max).max(1.0);
        let marginal = s.cost.derivative(s.gen.g_max).abs();
        Scaling {
            base_mw,
            cost_base: base_mw * marginal.max(1.0),
        }
    }

    /// Converts a dual of a MW-denominated row to $/MWh.
    pub fn price(&self, y: f64) -> f64 {
        y * self.cost_base / self.base_mw
    }
}

struct DispatchObjective {
    layout: Layout,
    poly: CostPolynomial,
    tables: Vec<MomentTable>,
    mu: Vec<f64>,
    m: f64,
}

impl DispatchObjective {
    fn gp(&self, x: &[f64], t: usize) -> (f64, f64) {
        (
            self.layout.value(x, VarKind::Gen, t),
            self.layout.value(x, VarKind::Phi, t),
        )
    }
}

impl Objective for DispatchObjective {
    fn value(&self, x: &[f64]) -> f64 {
        (0..self.layout.horizon)
            .map(|t| {
                let (g, phi) = self.gp(x, t);
                let p = self.layout.value(x, VarKind::Discharge, t);
                let psi = self.layout.value(x, VarKind::Psi, t);
                self.tables[t].value(&self.poly, g, phi) + self.m * (p + psi * self.mu[t])
            })
            .sum()
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let l = &self.layout;
        for t in 0..l.horizon {
            let (g, phi) = self.gp(x, t);
            let (dg, dphi) = self.tables[t].gradient(&self.poly, g, phi);
            if let Some(i) = l.index(VarKind::Gen, t) {
                out[i] += dg;
            }
            if let Some(i) = l.index(VarKind::Phi, t) {
                out[i] += dphi;
            }
            if let Some(i) = l.index(VarKind::Discharge, t) {
                out[i] += self.m;
            }
            if let Some(i) = l.index(VarKind::Psi, t) {
                out[i] += self.m * self.mu[t];
            }
        }
    }

    fn hessian(&self, x: &[f64], out: &mut DMatrix<f64>) {
        let l = &self.layout;
        for t in 0..l.horizon {
            let (g, phi) = self.gp(x, t);
            let (hgg, hgp, hpp) = self.tables[t].hessian(&self.poly, g, phi);
            let ig = l.index(VarKind::Gen, t);
            let ip = l.index(VarKind::Phi, t);
            if let Some(i) = ig {
                out[(i, i)] += hgg;
            }
            if let Some(j) = ip {
                out[(j, j)] += hpp;
            }
            if let (Some(i), Some(j)) = (ig, ip) {
                out[(i, j)] += hgp;
                out[(j, i)] += hgp;
            }
        }
    }

    fn max_degree(&self) -> usize {
        self.poly.degree()
    }
}

/// A built dispatch program with the bookkeeping needed to read prices back.
pub struct DispatchProgram {
    pub program: ConvexProgram,
    pub layout: Layout,
    pub scaling: Scaling,
    /// Physical quantiles per period.
    pub quantiles: Vec<PeriodQuantiles>,
}

/// Assembles the reformulated dispatch: expected generation and storage cost,
/// power balance, SoC recursion, reserve split, deterministic chance-constraint
/// rows and the terminal-SoC condition. The charge/discharge complementarity
/// is relaxed.
pub fn build_dispatch(system: &SystemSpec) -> Result<DispatchProgram> {
    system.validate()?;
    let quantiles = system.quantiles()?;
    let bands: Vec<GateBand> = system
        .net_load
        .moments
        .iter()
        .zip(&quantiles)
        .map(|(m, q)| GateBand { moments: *m, d_lo: q.gen.lower, d_hi: q.gen.upper })
        .collect();
    convexity_gate(
        &system.cost,
        system.gen.g_min,
        system.gen.g_max,
        &bands,
        system.mode() == LayoutMode::Full,
    )?;
    let sc = Scaling::for_system(system);
    let b = sc.base_mw;
    let st = &system.storage;
    let st_pu = StorageSpec {
        p_max: st.p_max / b,
        e_max: st.e_max / b,
        eta: st.eta,
        marginal_cost: st.marginal_cost * b / sc.cost_base,
        e_init: st.e_init / b,
    };
    let mode = system.mode();
    let t_max = system.horizon;
    let layout = Layout::new(t_max, mode, st_pu.e_init);
    let mut set = LinearConstraintSet::new(layout.n_vars);
    let l = &layout;
    let tag = |kind, t: Option<usize>| RowTag {
        kind,
        period: t,
        epsilon_i: None,
    };

    for t in 0..t_max {
        use VarKind::*;
        push_row(
            &mut set,
            Expr::new().add(l, Gen, t, 1.0).add(l, Discharge, t, 1.0).add(l, Charge, t, -1.0),
            Sense::Eq,
            system.net_load.forecast[t] / b,
            tag(RowKind::Balance, Some(t)),
        )?;
        push_row(
            &mut set,
            Expr::new()
                .add(l, SocEnd, t, 1.0)
                .add_soc_start(l, t, st_pu.e_init, -1.0)
                .add(l, Discharge, t, 1.0 / st.eta)
                .add(l, Charge, t, -st.eta),
            Sense::Eq,
            0.0,
            tag(RowKind::SocRecursion, Some(t)),
        )?;
        push_row(
            &mut set,
            Expr::new().add(l, Phi, t, 1.0).add(l, Psi, t, 1.0),
            Sense::Eq,
            1.0,
            tag(RowKind::ReserveSplit, Some(t)),
        )?;
    }
    let pu_quantiles: Vec<Option<PeriodQuantiles>> = quantiles
        .iter()
        .map(|q| {
            let s = |x: QuantileSlot| QuantileSlot {
                lower: x.lower / b,
                upper: x.upper / b,
                ..x
            };
            Some(PeriodQuantiles {
                gen: s(q.gen),
                power: s(q.power),
                soc: s(q.soc),
            })
        })
        .collect();
    build_deterministic_constraints(
        l,
        GenBounds {
            g_min: system.gen.g_min / b,
            g_max: system.gen.g_max / b,
        },
        &st_pu,
        &pu_quantiles,
        &mut set,
    )?;
    if mode != LayoutMode::NoStorage {
        let last = Expr::new().add(l, VarKind::SocEnd, t_max - 1, 1.0);
        match system.terminal {
            TerminalSoc::Periodic => push_row(
                &mut set,
                last,
                Sense::Eq,
                st_pu.e_init,
                tag(RowKind::TerminalSoc, None),
            )?,
            TerminalSoc::Fixed(v) => {
                push_row(&mut set, last, Sense::Eq, v / b, tag(RowKind::TerminalSoc, None))?
            }
            TerminalSoc::Free => {
                push_row(
                    &mut set,
                    Expr::new().add(l, VarKind::SocEnd, t_max - 1, -1.0),
                    Sense::Le,
                    0.0,
                    tag(RowKind::TerminalSocLower, None),
                )?;
                push_row(&mut set, last, Sense::Le, st_pu.e_max, tag(RowKind::TerminalSocUpper, None))?;
            }
        }
    }
    set.validate()?;

    let moments_pu: Vec<ErrorMoments> = system
        .net_load
        .moments
        .iter()
        .map(|m| ErrorMoments {
            mu: m.mu / b,
            sigma: m.sigma / b,
        })
        .collect();
    let objective = DispatchObjective {
        layout: layout.clone(),
        poly: system.cost.rescaled(b, sc.cost_base),
        tables: moments_pu.iter().map(|m| MomentTable::new(m.mu, m.sigma)).collect(),
        mu: moments_pu.iter().map(|m| m.mu).collect(),
        m: st_pu.marginal_cost,
    };

    // Start from "generators cover the forecast, storage idle".
    let mut x0 = vec![0.0; layout.n_vars];
    for t in 0..t_max {
        let set_var = |x0: &mut Vec<f64>, kind, v| {
            if let Some(i) = layout.index(kind, t) {
                x0[i] = v;
            }
        };
        let d = (system.net_load.forecast[t] / b).clamp(system.gen.g_min / b, system.gen.g_max / b);
        set_var(&mut x0, VarKind::Gen, d);
        set_var(&mut x0, VarKind::Phi, 0.5);
        set_var(&mut x0, VarKind::Psi, 0.5);
        set_var(&mut x0, VarKind::SocEnd, st_pu.e_init);
    }
    let mut program = ConvexProgram::new(Box::new(objective), set);
    program.x0 = Some(x0);
    Ok(DispatchProgram {
        program,
        layout,
        scaling: sc,
        quantiles,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualEntry {
    pub kind: RowKind,
    pub period: Option<usize>,
    pub symbol: String,
    /// Physical units: $/MWh for MW/MWh rows, $/h for the reserve rows.
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DispatchSolution {
    pub mode: LayoutMode,
    pub g: Vec<f64>,
    pub p: Vec<f64>,
    pub b: Vec<f64>,
    /// `e_1, …, e_{T+1}`: beginning-of-period stocks plus the terminal stock.
    pub soc: Vec<f64>,
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
    pub lambda: Vec<f64>,
    pub theta: Vec<f64>,
    pub pi: Vec<f64>,
    pub duals: Vec<DualEntry>,
    pub quantiles: Vec<PeriodQuantiles>,
    /// Optimal expected cost, $.
    pub objective: f64,
    pub status: SolveStatus,
    /// Solver residuals in per-unit.
    pub residuals: Residuals,
    pub iterations: usize,
    pub degenerate: bool,
    pub scaling: Scaling,
}

impl DispatchSolution {
    /// Dual of a per-period inequality row, zero if the row was not emitted.
    pub fn dual(&self, kind: RowKind, t: usize) -> f64 {
        self.duals
            .iter()
            .find(|d| d.kind == kind && d.period == Some(t))
            .map_or(0.0, |d| d.value)
    }

    pub fn terminal_dual(&self, kind: RowKind) -> f64 {
        self.duals
            .iter()
            .find(|d| d.kind == kind && d.period.is_none())
            .map_or(0.0, |d| d.value)
    }

    pub fn horizon(&self) -> usize {
        self.g.len()
    }

    /// Reserve cost paid in period `t` ($/h), the `π_t` of the split row.
    pub fn reserve_cost(&self) -> f64 {
        self.pi.iter().sum()
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "g", "p", "b", "e", "phi", "psi", "lambda", "theta", "pi"])?;
        for t in 0..self.horizon() {
            let row = [
                self.g[t],
                self.p[t],
                self.b[t],
                self.soc[t],
                self.phi[t],
                self.psi[t],
                self.lambda[t],
                self.theta[t],
                self.pi[t],
            ];
            let mut rec = vec![(t + 1).to_string()];
            rec.extend(row.iter().map(|v| format!("{v}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Solves a built program and converts the result to physical prices.
pub fn extract_solution(
    system: &SystemSpec,
    built: &DispatchProgram,
    result: &SolveResult,
) -> DispatchSolution {
    let l = &built.layout;
    let sc = built.scaling;
    let b = sc.base_mw;
    let t_max = system.horizon;
    let x = &result.x;
    let set = &built.program.constraints;
    let val = |k, t| l.value(x, k, t) * if k == VarKind::Phi || k == VarKind::Psi { 1.0 } else { b };
    let mut sol = DispatchSolution {
        mode: l.mode,
        g: (0..t_max).map(|t| val(VarKind::Gen, t)).collect(),
        p: (0..t_max).map(|t| val(VarKind::Discharge, t)).collect(),
        b: (0..t_max).map(|t| val(VarKind::Charge, t)).collect(),
        soc: std::iter::once(system.storage.e_init)
            .chain((0..t_max).map(|t| val(VarKind::SocEnd, t)))
            .collect(),
        phi: (0..t_max).map(|t| val(VarKind::Phi, t)).collect(),
        psi: (0..t_max).map(|t| val(VarKind::Psi, t)).collect(),
        lambda: vec![0.0; t_max],
        theta: vec![0.0; t_max],
        pi: vec![0.0; t_max],
        duals: Vec::with_capacity(set.rows.len()),
        quantiles: built.quantiles.clone(),
        objective: result.objective * sc.cost_base,
        status: result.status,
        residuals: result.residuals,
        iterations: result.iterations,
        degenerate: result.degenerate,
        scaling: sc,
    };
    if l.mode == LayoutMode::NoStorage {
        sol.soc = vec![system.storage.e_init; t_max + 1];
    }
    for (row, &y) in set.rows.iter().zip(&result.duals) {
        let value = match row.tag.kind {
            RowKind::Balance => -sc.price(y),
            RowKind::ReserveSplit => -y * sc.cost_base,
            RowKind::PhiLower | RowKind::PhiUpper => y * sc.cost_base,
            _ => sc.price(y),
        };
        if let Some(t) = row.tag.period {
            match row.tag.kind {
                RowKind::Balance => sol.lambda[t] = value,
                RowKind::SocRecursion => sol.theta[t] = value,
                RowKind::ReserveSplit => sol.pi[t] = value,
                _ => {}
            }
        }
        sol.duals.push(DualEntry {
            kind: row.tag.kind,
            period: row.tag.period,
            symbol: row.tag.kind.symbol().to_string(),
            value,
        });
    }
    if l.mode != LayoutMode::Full {
        // The split row is absent; report the generator's marginal reserve
        // cost from the φ-stationarity instead.
        for t in 0..t_max {
            let (_, dphi) = MomentTable::new(system.net_load.moments[t].mu, system.net_load.moments[t].sigma)
                .gradient(&system.cost, sol.g[t], sol.phi[t]);
            let q = &sol.quantiles[t].gen;
            sol.pi[t] = dphi - sol.dual(RowKind::GenLower, t) * q.lower
                + sol.dual(RowKind::GenUpper, t) * q.upper;
        }
    }
    sol
}

/// Builds, solves and prices the dispatch with default tolerances.
pub fn solve_dispatch(system: &SystemSpec) -> Result<DispatchSolution> {
    solve_dispatch_with(system, DEFAULT_TOL, DEFAULT_ITER_CAP).map(|(s, _, _)| s)
}

/// Like [`solve_dispatch`] but also returns the program and raw solver result.
/// Non-optimal statuses are reported as [`Error::Solver`].
pub fn solve_dispatch_with(
    system: &SystemSpec,
    tol: f64,
    iter_cap: usize,
) -> Result<(DispatchSolution, DispatchProgram, SolveResult)> {
    let built = build_dispatch(system)?;
    let result = solve_convex(&built.program, tol, iter_cap)?;
    if result.status != SolveStatus::Optimal {
        return Err(Error::Solver {
            stage: format!("dispatch (T={}, mode {:?})", system.horizon, built.layout.mode),
            status: result.status,
        });
    }
    let mut sol = extract_solution(system, &built, &result);
    sol.status = result.status;
    Ok((sol, built, result))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComplementarityReport {
    /// `(b_t/P̄)(p_t/P̄)` per period.
    pub products: Vec<f64>,
    pub flagged: Vec<usize>,
    pub max_product: f64,
}

/// Checks the relaxed `b_t p_t = 0`. Products are normalized by `P̄²` so the
/// tolerance is scale-free.
pub fn check_complementarity(solution: &DispatchSolution, p_max: f64, tol: f64) -> ComplementarityReport {
    let products: Vec<f64> = if p_max > 0.0 {
        solution
            .b
            .iter()
            .zip(&solution.p)
            .map(|(b, p)| (b / p_max) * (p / p_max))
            .collect()
    } else {
        vec![0.0; solution.horizon()]
    };
    let flagged = products
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > tol)
        .map(|(t, _)| t)
        .collect();
    let max_product = products.iter().fold(0.0_f64, |m, v| m.max(*v));
    ComplementarityReport {
        products,
        flagged,
        max_product,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquilibriumRow {
    pub name: String,
    pub period: Option<usize>,
    pub residual: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquilibriumReport {
    pub rows: Vec<EquilibriumRow>,
    pub tolerance: f64,
    pub all_pass: bool,
    pub max_residual: f64,
}

/// Re-derives the market-clearing identities and every participant's
/// stationarity condition from the priced solution, in physical units.
///
/// Rows: balance, SoC recursion, reserve split; generator
/// `H(g, φ) = λ + ν̲ − ν̄`; charge `λ − ηθ − α̲ + ᾱ + ηῑ = 0`; discharge
/// `M − λ + θ/η − β̲ + β̄ + ι̲/η = 0`; stock `θ_{t−1} − θ_t − ι̲_t + ῑ_t = 0`;
/// generator reserve `∂_φE[G] − π − ν̲ d̂ + ν̄ d̃ − κ̲ + κ̄ = 0`; storage reserve
/// `Mμ − π − ᾱ d̂ + β̄ d̃ + ι̲ d̃/η − ῑ d̂ η = 0`.
pub fn verify_equilibrium(solution: &DispatchSolution, system: &SystemSpec, tol: f64) -> EquilibriumReport {
    let s = solution;
    let st = &system.storage;
    let eta = st.eta;
    let m = st.marginal_cost;
    // Residual units: $/MWh for prices, MW for quantities; relative to scale.
    let price_tol = 10.0 * tol * s.scaling.cost_base / s.scaling.base_mw;
    let qty_tol = 10.0 * tol * s.scaling.base_mw;
    let reserve_tol = 10.0 * tol * s.scaling.cost_base;
    let mut rows = Vec::new();
    let mut push = |name: &str, t: Option<usize>, r: f64, tol: f64| {
        rows.push(EquilibriumRow {
            name: name.to_string(),
            period: t,
            residual: r.abs(),
            pass: r.abs() <= tol,
        })
    };
    let mode = s.mode;
    for t in 0..s.horizon() {
        let du = |k| s.dual(k, t);
        let mo = system.net_load.moments[t];
        let table = MomentTable::new(mo.mu, mo.sigma);
        let (h, dphi) = table.gradient(&system.cost, s.g[t], s.phi[t]);
        let qg = s.quantiles[t].gen;
        let qp = s.quantiles[t].power;
        let qs = s.quantiles[t].soc;
        push(
            "balance",
            Some(t),
            s.g[t] + s.p[t] - s.b[t] - system.net_load.forecast[t],
            qty_tol,
        );
        push(
            "generator",
            Some(t),
            h - s.lambda[t] - du(RowKind::GenLower) + du(RowKind::GenUpper),
            price_tol,
        );
        if mode == LayoutMode::NoStorage {
            continue;
        }
        push(
            "soc_recursion",
            Some(t),
            s.soc[t + 1] - s.soc[t] + s.p[t] / eta - s.b[t] * eta,
            qty_tol,
        );
        let th = s.theta[t];
        push(
            "charge",
            Some(t),
            s.lambda[t] - eta * th - du(RowKind::ChargeLower) + du(RowKind::ChargeUpper)
                + eta * du(RowKind::SocUpper),
            price_tol,
        );
        push(
            "discharge",
            Some(t),
            m - s.lambda[t] + th / eta - du(RowKind::DischargeLower)
                + du(RowKind::DischargeUpper)
                + du(RowKind::SocLower) / eta,
            price_tol,
        );
        if t >= 1 {
            push(
                "stock",
                Some(t),
                s.theta[t - 1] - th - du(RowKind::SocLower) + du(RowKind::SocUpper),
                price_tol,
            );
        }
        if mode == LayoutMode::Full {
            push("reserve_split", Some(t), s.phi[t] + s.psi[t] - 1.0, tol * 10.0);
            push(
                "generator_reserve",
                Some(t),
                dphi - s.pi[t] - du(RowKind::GenLower) * qg.lower + du(RowKind::GenUpper) * qg.upper
                    - du(RowKind::PhiLower)
                    + du(RowKind::PhiUpper),
                reserve_tol,
            );
            push(
                "storage_reserve",
                Some(t),
                m * mo.mu - s.pi[t] - du(RowKind::ChargeUpper) * qp.lower
                    + du(RowKind::DischargeUpper) * qp.upper
                    + du(RowKind::SocLower) * qs.upper / eta
                    - du(RowKind::SocUpper) * qs.lower * eta,
                reserve_tol,
            );
        }
    }
    if mode != LayoutMode::NoStorage {
        let t = s.horizon() - 1;
        let terminal = match system.terminal {
            TerminalSoc::Periodic | TerminalSoc::Fixed(_) => {
                s.theta[t] + s.terminal_dual(RowKind::TerminalSoc)
            }
            TerminalSoc::Free => {
                s.theta[t] - s.terminal_dual(RowKind::TerminalSocLower)
                    + s.terminal_dual(RowKind::TerminalSocUpper)
            }
        };
        push("terminal_stock", Some(t), terminal, price_tol);
    }
    let max_residual = rows.iter().fold(0.0_f64, |a, r| a.max(r.residual));
    let all_pass = rows.iter().all(|r| r.pass);
    EquilibriumReport {
        rows,
        tolerance: tol,
        all_pass,
        max_residual,
    }
}

/// Expected operating cost of a solution: `Σ_t E[G(g+φd)] + M(p + ψμ)`.
pub fn expected_system_cost(solution: &DispatchSolution, system: &SystemSpec) -> f64 {
    (0..solution.horizon())
        .map(|t| {
            let mo = system.net_load.moments[t];
            MomentTable::new(mo.mu, mo.sigma).value(&system.cost, solution.g[t], solution.phi[t])
                + system.storage.marginal_cost * (solution.p[t] + solution.psi[t] * mo.mu)
        })
        .sum()
}
