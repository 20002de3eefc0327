//! Profit-maximizing storage benchmark: Monte Carlo price simulation, an SoC
//! grid dynamic program, bids built from the value function, bid-based
//! clearing, and a side-by-side comparison with welfare-optimal dispatch.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costs::{fit_polynomial_to_merit_curve, merit_order_cost, StorageSpec};
use crate::dispatch::{build_dispatch, TerminalSoc, extract_solution, solve_dispatch, DispatchSolution, SystemSpec};
use crate::distributions::ErrorMoments;
use crate::error::{Error, Result};
use crate::reformulation::{Sense, VarKind};
use crate::scenarios::sample_net_load;
use crate::solver::{solve_convex, Objective, SolveStatus, DEFAULT_ITER_CAP, DEFAULT_TOL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceScenarioSet {
    /// `λ_t` per scenario (rows) and period (columns), $/MWh.
    pub prices: Vec<Vec<f64>>,
    /// Realized net load behind each row after clipping, MW.
    pub net_loads: Vec<Vec<f64>>,
    pub seed: u64,
    pub source: String,
    /// Scenarios whose draw fell outside the fleet range and was clipped.
    pub clipped: Vec<usize>,
}

impl PriceScenarioSet {
    pub fn n_scenarios(&self) -> usize {
        self.prices.len()
    }

    pub fn horizon(&self) -> usize {
        self.prices.first().map_or(0, Vec::len)
    }

    /// Per-period mean price.
    pub fn mean_path(&self) -> Vec<f64> {
        let n = self.n_scenarios() as f64;
        (0..self.horizon())
            .map(|t| self.prices.iter().map(|r| r[t]).sum::<f64>() / n)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.prices.is_empty() {
            return Err(Error::domain("price scenario set is empty"));
        }
        let t = self.horizon();
        if self.prices.iter().any(|r| r.len() != t || r.iter().any(|v| !v.is_finite())) {
            return Err(Error::domain("price scenarios must be finite and of equal length"));
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["scenario".to_string()];
        header.extend((1..=self.horizon()).map(|t| format!("t{t}")));
        w.write_record(&header)?;
        for (s, row) in self.prices.iter().enumerate() {
            let mut rec = vec![s.to_string()];
            rec.extend(row.iter().map(|v| format!("{v}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// The system with a known net load: forecast replaced, errors removed.
pub fn deterministic_system(system: &SystemSpec, load: &[f64]) -> Result<SystemSpec> {
    if load.len() != system.horizon {
        return Err(Error::domain(format!(
            "load path has {} periods, system has {}",
            load.len(),
            system.horizon
        )));
    }
    let mut s = system.clone();
    s.net_load.forecast = load.to_vec();
    s.net_load.moments = load
        .iter()
        .map(|_| ErrorMoments::new(0.0, 0.0))
        .collect::<Result<_>>()?;
    Ok(s)
}

/// Clips a load path to the generator range; true when anything moved.
fn clip_load(load: &mut [f64], lo: f64, hi: f64) -> bool {
    let mut moved = false;
    for d in load.iter_mut() {
        let c = d.clamp(lo, hi);
        moved |= c != *d;
        *d = c;
    }
    moved
}

/// Draws net-load paths and prices each with the deterministic multi-period
/// dispatch of the system as given. Disable the storage beforehand to get
/// generator-only prices.
pub fn simulate_price_scenarios(system: &SystemSpec, n_scenarios: usize, seed: u64) -> Result<PriceScenarioSet> {
    if n_scenarios == 0 {
        return Err(Error::domain("need at least one price scenario"));
    }
    system.validate()?;
    let mut loads = sample_net_load(&system.net_load, n_scenarios, seed)?;
    let mut clipped = Vec::new();
    for (s, row) in loads.iter_mut().enumerate() {
        if clip_load(row, system.gen.g_min, system.gen.g_max) {
            clipped.push(s);
        }
    }
    let prices = loads
        .par_iter()
        .map(|load| Ok(solve_dispatch(&deterministic_system(system, load)?)?.lambda))
        .collect::<Result<Vec<_>>>()?;
    Ok(PriceScenarioSet {
        prices,
        net_loads: loads,
        seed,
        source: format!("monte carlo, {:?} errors, deterministic dispatch", system.net_load.model),
        clipped,
    })
}

/// How scenario prices enter the dynamic program.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PriceAveraging {
    /// One recursion on the mean price path.
    MeanPath,
    /// One recursion per scenario, value functions averaged.
    PerScenario,
}

/// Value of the stock left after the last period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TerminalValue {
    /// `c · e`, $/MWh.
    Linear(f64),
    /// `−penalty · (target − e)⁺`: leftover energy above the target is worth
    /// nothing, each MWh short of it costs `penalty`.
    Return { target: f64, penalty: f64 },
}

impl TerminalValue {
    /// A return-to-`target` value whose penalty exceeds anything one MWh
    /// could earn over `prices`.
    pub fn return_to(target: f64, prices: &[f64], storage: &StorageSpec) -> TerminalValue {
        let top = prices.iter().fold(0.0_f64, |m, p| m.max(p.abs()));
        TerminalValue::Return {
            target,
            penalty: 2.0 * (top + storage.marginal_cost) / (storage.eta * storage.eta) + 1.0,
        }
    }

    fn at(&self, e: f64) -> f64 {
        match *self {
            TerminalValue::Linear(c) => c * e,
            TerminalValue::Return { target, penalty } => -penalty * (target - e).max(0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpOptions {
    /// Number of SoC knots on `[0, Ē]`, ends included.
    pub grid_size: usize,
    pub terminal: TerminalValue,
}

impl Default for DpOptions {
    fn default() -> Self {
        DpOptions {
            grid_size: 21,
            terminal: TerminalValue::Linear(0.0),
        }
    }
}

/// Storage value-to-go on a uniform SoC grid. `values[t][k]` is the value of
/// holding `grid[k]` at the start of period `t`; `values[T]` is terminal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueFunction {
    pub grid: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    /// Price path the recursion (or its reference path) used.
    pub prices: Vec<f64>,
    pub storage: StorageSpec,
    /// Largest increase between consecutive knot slopes over all stages.
    pub max_concavity_violation: f64,
    /// Every stage is non-decreasing in SoC.
    pub monotone: bool,
}

/// One-period reward of moving between grid knots, `None` if not allowed.
/// Moving up charges `b = Δe/η`, moving down discharges `p = −Δe·η`.
/// Discharging at a negative price is not allowed.
fn transition_reward(de: f64, price: f64, st: &StorageSpec) -> Option<f64> {
    let cap = st.p_max * (1.0 + 1e-9);
    if de > 0.0 {
        let b = de / st.eta;
        (b <= cap).then_some(-price * b)
    } else if de < 0.0 {
        let p = -de * st.eta;
        (price >= 0.0 && p <= cap).then_some((price - st.marginal_cost) * p)
    } else {
        Some(0.0)
    }
}

impl ValueFunction {
    pub fn horizon(&self) -> usize {
        self.values.len() - 1
    }

    pub fn step(&self) -> f64 {
        self.grid[1] - self.grid[0]
    }

    /// Knot slopes `v_t` of stage `t`, one per grid interval, $/MWh.
    pub fn slopes(&self, t: usize) -> Vec<f64> {
        let h = self.step();
        self.values[t].windows(2).map(|w| (w[1] - w[0]) / h).collect()
    }

    /// Linear interpolation of `V_t` at `e`.
    pub fn value_at(&self, t: usize, e: f64) -> f64 {
        let h = self.step();
        let k = ((e / h).floor().max(0.0) as usize).min(self.grid.len() - 2);
        let w = (e - self.grid[k]) / h;
        self.values[t][k] * (1.0 - w) + self.values[t][k + 1] * w
    }

    pub fn nearest_knot(&self, e: f64) -> usize {
        ((e / self.step()).round().max(0.0) as usize).min(self.grid.len() - 1)
    }

    /// Best knot to move to from knot `i` in period `t`.
    fn best_move(&self, t: usize, i: usize) -> Option<(usize, f64)> {
        let h = self.step();
        let price = self.prices[t];
        let next = &self.values[t + 1];
        let mut best: Option<(usize, f64)> = None;
        for (j, v) in next.iter().enumerate() {
            let de = (j as f64 - i as f64) * h;
            if let Some(r) = transition_reward(de, price, &self.storage) {
                let total = r + v;
                if best.map_or(true, |(_, b)| total > b) {
                    best = Some((j, total));
                }
            }
        }
        best
    }

    /// Start-of-period SoC along the optimal knot path from the knot nearest
    /// `e_init`; `T + 1` entries.
    pub fn reference_path(&self, e_init: f64) -> Vec<f64> {
        let mut i = self.nearest_knot(e_init);
        let mut path = vec![self.grid[i]];
        for t in 0..self.horizon() {
            i = self.best_move(t, i).map_or(i, |(j, _)| j);
            path.push(self.grid[i]);
        }
        path
    }

    fn audit(&mut self) {
        let mut worst = 0.0_f64;
        let mut monotone = true;
        for t in 0..self.values.len() {
            let s = self.slopes(t);
            for w in s.windows(2) {
                worst = worst.max(w[1] - w[0]);
            }
            let scale = self.values[t].iter().fold(1.0_f64, |m, v| m.max(v.abs()));
            if s.iter().any(|v| *v * self.step() < -1e-9 * scale) {
                monotone = false;
            }
        }
        self.max_concavity_violation = worst;
        self.monotone = monotone;
    }

    /// Concave at every stage up to `tol` ($/MWh of slope increase).
    pub fn is_concave(&self, tol: f64) -> bool {
        self.max_concavity_violation <= tol
    }
}

fn soc_grid(storage: &StorageSpec, opts: &DpOptions) -> Result<Vec<f64>> {
    if !storage.is_enabled() {
        return Err(Error::Config("dynamic program needs an enabled storage unit".into()));
    }
    if opts.grid_size < 2 {
        return Err(Error::Config(format!("SoC grid needs at least 2 knots, got {}", opts.grid_size)));
    }
    let n = opts.grid_size - 1;
    let h = storage.e_max / n as f64;
    if h > storage.p_max * storage.eta * (1.0 + 1e-9) {
        return Err(Error::Config(format!(
            "SoC grid step {h} MWh exceeds one period of charging ({} MWh); use at least {} knots",
            storage.p_max * storage.eta,
            (storage.e_max / (storage.p_max * storage.eta)).ceil() as usize + 1
        )));
    }
    Ok((0..=n).map(|k| k as f64 * h).collect())
}

/// Backward recursion over the SoC grid for one price path. Actions are moves
/// between knots, so the recursion is exact on the grid.
pub fn dp_value_function(prices: &[f64], storage: &StorageSpec, opts: &DpOptions) -> Result<ValueFunction> {
    if prices.is_empty() || prices.iter().any(|p| !p.is_finite()) {
        return Err(Error::domain("price path must be non-empty and finite"));
    }
    storage.validate()?;
    let grid = soc_grid(storage, opts)?;
    let t_max = prices.len();
    let mut vf = ValueFunction {
        values: vec![Vec::new(); t_max + 1],
        prices: prices.to_vec(),
        storage: *storage,
        max_concavity_violation: 0.0,
        monotone: true,
        grid,
    };
    vf.values[t_max] = vf.grid.iter().map(|e| opts.terminal.at(*e)).collect();
    for t in (0..t_max).rev() {
        let stage: Vec<f64> = (0..vf.grid.len())
            .into_par_iter()
            .map(|i| vf.best_move(t, i).map_or(f64::NEG_INFINITY, |(_, v)| v))
            .collect();
        vf.values[t] = stage;
    }
    vf.audit();
    Ok(vf)
}

/// Value function for a scenario set, either on the mean path or averaged
/// over per-scenario recursions.
pub fn value_function_from_scenarios(
    set: &PriceScenarioSet,
    storage: &StorageSpec,
    opts: &DpOptions,
    averaging: PriceAveraging,
) -> Result<ValueFunction> {
    set.validate()?;
    let mean = set.mean_path();
    match averaging {
        PriceAveraging::MeanPath => dp_value_function(&mean, storage, opts),
        PriceAveraging::PerScenario => {
            let all = set
                .prices
                .par_iter()
                .map(|p| dp_value_function(p, storage, opts))
                .collect::<Result<Vec<_>>>()?;
            let n = all.len() as f64;
            let mut vf = all[0].clone();
            for t in 0..vf.values.len() {
                for k in 0..vf.grid.len() {
                    vf.values[t][k] = all.iter().map(|v| v.values[t][k]).sum::<f64>() / n;
                }
            }
            vf.prices = mean;
            vf.audit();
            Ok(vf)
        }
    }
}

/// One step of a bid curve: `quantity` MW at `price` $/MWh.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BidStep {
    pub quantity: f64,
    pub price: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodBids {
    /// SoC the curves were built around, MWh.
    pub reference_soc: f64,
    /// Discharge offer, in order of increasing quantity.
    pub offer: Vec<BidStep>,
    /// Charge bid, in order of increasing quantity.
    pub bid: Vec<BidStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BidCurve {
    pub periods: Vec<PeriodBids>,
}

fn step_price(steps: &[BidStep], q: f64) -> Option<f64> {
    let mut left = q;
    for s in steps {
        if left <= s.quantity {
            return Some(s.price);
        }
        left -= s.quantity;
    }
    None
}

impl BidCurve {
    /// One flat step per period and direction.
    pub fn flat(offer_prices: &[f64], bid_prices: &[f64], quantity: f64) -> BidCurve {
        BidCurve {
            periods: offer_prices
                .iter()
                .zip(bid_prices)
                .map(|(o, b)| PeriodBids {
                    reference_soc: f64::NAN,
                    offer: vec![BidStep { quantity, price: *o }],
                    bid: vec![BidStep { quantity, price: *b }],
                })
                .collect(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.periods.len()
    }

    /// Offer price at cumulative quantity `q`; `None` past the last step.
    pub fn offer_price(&self, t: usize, q: f64) -> Option<f64> {
        step_price(&self.periods[t].offer, q)
    }

    pub fn bid_price(&self, t: usize, q: f64) -> Option<f64> {
        step_price(&self.periods[t].bid, q)
    }

    pub fn offered_quantity(&self, t: usize) -> f64 {
        self.periods[t].offer.iter().map(|s| s.quantity).sum()
    }

    /// Offers non-decreasing and bids non-increasing in quantity, all finite.
    pub fn is_monotone(&self, tol: f64) -> bool {
        self.periods.iter().all(|p| {
            p.offer.windows(2).all(|w| w[1].price >= w[0].price - tol)
                && p.bid.windows(2).all(|w| w[1].price <= w[0].price + tol)
        })
    }

    pub fn validate(&self) -> Result<()> {
        for (t, p) in self.periods.iter().enumerate() {
            if p.offer
                .iter()
                .chain(&p.bid)
                .any(|s| !s.price.is_finite() || !s.quantity.is_finite() || s.quantity < 0.0)
            {
                return Err(Error::domain(format!("period {t}: bid steps must be finite with quantity >= 0")));
            }
        }
        Ok(())
    }
}

/// Discharge offers `M + v/η` along the depletion path and charge bids `η v`
/// along the accumulation path, where `v` are the knot slopes of the
/// value-to-go after the period, around the value function's own optimal
/// SoC path. No discharge is offered where the forecast price is negative.
pub fn bids_from_value(vf: &ValueFunction) -> BidCurve {
    let st = &vf.storage;
    let h = vf.step();
    let path = vf.reference_path(st.e_init);
    let periods = (0..vf.horizon())
        .map(|t| {
            let slopes = vf.slopes(t + 1);
            let i = vf.nearest_knot(path[t]);
            let mut offer = Vec::new();
            if vf.prices[t] >= 0.0 {
                let mut left = st.p_max.min(st.eta * vf.grid[i]);
                for k in (0..i).rev() {
                    if left <= 0.0 {
                        break;
                    }
                    let q = (st.eta * h).min(left);
                    offer.push(BidStep {
                        quantity: q,
                        price: st.marginal_cost + slopes[k] / st.eta,
                    });
                    left -= q;
                }
            }
            let mut bid = Vec::new();
            let mut left = st.p_max.min((st.e_max - vf.grid[i]) / st.eta);
            for s in slopes.iter().skip(i) {
                if left <= 0.0 {
                    break;
                }
                let q = (h / st.eta).min(left);
                bid.push(BidStep {
                    quantity: q,
                    price: st.eta * s,
                });
                left -= q;
            }
            PeriodBids {
                reference_soc: vf.grid[i],
                offer,
                bid,
            }
        })
        .collect();
    BidCurve { periods }
}

/// Dispatch objective plus linear offer costs on the appended step variables.
struct BidObjective {
    inner: Box<dyn Objective>,
    n_inner: usize,
    linear: Vec<(usize, f64)>,
}

impl Objective for BidObjective {
    fn value(&self, x: &[f64]) -> f64 {
        self.inner.value(&x[..self.n_inner]) + self.linear.iter().map(|(j, c)| c * x[*j]).sum::<f64>()
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        self.inner.gradient(&x[..self.n_inner], &mut out[..self.n_inner]);
        out[self.n_inner..].fill(0.0);
        for (j, c) in &self.linear {
            out[*j] += c;
        }
    }

    fn hessian(&self, x: &[f64], out: &mut DMatrix<f64>) {
        self.inner.hessian(&x[..self.n_inner], out);
    }

    fn max_degree(&self) -> usize {
        self.inner.max_degree()
    }
}

/// Clears the market with storage represented only by its bids: generators
/// carry all reserve, and storage is paid its offer price instead of its
/// marginal cost (the offer already includes it). `λ` comes from the
/// balance dual as in the welfare dispatch.
pub fn clear_with_bids(system: &SystemSpec, bids: &BidCurve) -> Result<DispatchSolution> {
    if bids.horizon() != system.horizon {
        return Err(Error::domain(format!(
            "bids cover {} periods, system has {}",
            bids.horizon(),
            system.horizon
        )));
    }
    bids.validate()?;
    let mut sys = system.clone();
    sys.storage_reserve = false;
    sys.storage.marginal_cost = 0.0;
    let built = build_dispatch(&sys)?;
    let layout = built.layout.clone();
    let sc = built.scaling;
    let n_inner = layout.n_vars;
    let mut constraints = built.program.constraints;
    let to_pu = sc.base_mw / sc.cost_base;
    let mut linear = Vec::new();
    let mut n = n_inner;
    let mut widths = Vec::new();
    for (t, pb) in bids.periods.iter().enumerate() {
        for (kind, steps, sign) in [(VarKind::Discharge, &pb.offer, 1.0), (VarKind::Charge, &pb.bid, -1.0)] {
            let Some(main) = layout.index(kind, t) else { continue };
            let mut link = vec![(main, 1.0)];
            for s in steps {
                linear.push((n, sign * s.price * to_pu));
                link.push((n, -1.0));
                widths.push((n, s.quantity / sc.base_mw));
                n += 1;
            }
            constraints.n_vars = n;
            constraints.push_generic(link, Sense::Eq, 0.0);
        }
    }
    for (j, width) in widths {
        constraints.push_generic(vec![(j, -1.0)], Sense::Le, 0.0);
        constraints.push_generic(vec![(j, 1.0)], Sense::Le, width);
    }
    constraints.n_vars = n;
    constraints.validate()?;
    let mut x0 = built.program.x0.unwrap_or_else(|| vec![0.0; n_inner]);
    x0.resize(n, 0.0);
    let mut program = crate::solver::ConvexProgram::new(
        Box::new(BidObjective {
            inner: built.program.objective,
            n_inner,
            linear,
        }),
        constraints,
    );
    program.x0 = Some(x0);
    let result = solve_convex(&program, DEFAULT_TOL, DEFAULT_ITER_CAP)?;
    if result.status != SolveStatus::Optimal {
        return Err(Error::Solver {
            stage: format!("bid clearing (T={})", system.horizon),
            status: result.status,
        });
    }
    let rebuilt = crate::dispatch::DispatchProgram {
        program,
        layout,
        scaling: sc,
        quantiles: built.quantiles,
    };
    Ok(extract_solution(&sys, &rebuilt, &result))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mechanism {
    Welfare,
    Bids,
}

impl Mechanism {
    pub fn label(&self) -> &'static str {
        match self {
            Mechanism::Welfare => "welfare",
            Mechanism::Bids => "bids",
        }
    }
}

/// Outcome of one mechanism on one realized scenario, $.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    pub mechanism: Mechanism,
    pub scenario: usize,
    pub storage_profit: f64,
    pub gen_cost: f64,
    pub system_cost: f64,
    pub payment: f64,
    /// System cost with generation priced by the fitted polynomial the
    /// dispatch optimizes.
    pub fitted_system_cost: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub storage_profit: f64,
    pub gen_cost: f64,
    pub system_cost: f64,
    pub payment: f64,
    pub fitted_system_cost: f64,
}

impl MetricMeans {
    fn of<'a>(rows: impl Iterator<Item = &'a ScenarioMetrics>) -> MetricMeans {
        let mut m = MetricMeans::default();
        let mut n = 0.0;
        for r in rows {
            m.storage_profit += r.storage_profit;
            m.gen_cost += r.gen_cost;
            m.system_cost += r.system_cost;
            m.payment += r.payment;
            m.fitted_system_cost += r.fitted_system_cost;
            n += 1.0;
        }
        if n > 0.0 {
            m.storage_profit /= n;
            m.gen_cost /= n;
            m.system_cost /= n;
            m.payment /= n;
            m.fitted_system_cost /= n;
        }
        m
    }

    /// Percentage change from `base` to `self`.
    fn change_from(&self, base: &MetricMeans) -> MetricMeans {
        let pct = |a: f64, b: f64| if b == 0.0 { 0.0 } else { 100.0 * (a - b) / b.abs() };
        MetricMeans {
            storage_profit: pct(self.storage_profit, base.storage_profit),
            gen_cost: pct(self.gen_cost, base.gen_cost),
            system_cost: pct(self.system_cost, base.system_cost),
            payment: pct(self.payment, base.payment),
            fitted_system_cost: pct(self.fitted_system_cost, base.fitted_system_cost),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompareOptions {
    pub n_scenarios: usize,
    pub seed: u64,
    pub dp: DpOptions,
    pub averaging: PriceAveraging,
    /// Scenarios per batch for the batch-level payment comparison.
    pub batch_size: usize,
}

impl Default for CompareOptions {
    fn default() -> Self {
        CompareOptions {
            n_scenarios: 200,
            seed: 1,
            dp: DpOptions::default(),
            averaging: PriceAveraging::MeanPath,
            batch_size: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ScenarioMetrics>,
    pub welfare: MetricMeans,
    pub bids: MetricMeans,
    /// Change of the welfare means relative to the bid means, %.
    pub change_pct: MetricMeans,
    /// Share of batches whose mean payment is strictly lower under welfare.
    pub payment_lower_share: f64,
    pub n_batches: usize,
    pub clipped: Vec<usize>,
    pub bid_curve: BidCurve,
}

impl Comparison {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["mechanism", "scenario", "storage_profit", "gen_cost", "system_cost", "payment", "fitted_system_cost"])?;
        for r in &self.rows {
            w.write_record([
                r.mechanism.label().to_string(),
                r.scenario.to_string(),
                format!("{}", r.storage_profit),
                format!("{}", r.gen_cost),
                format!("{}", r.system_cost),
                format!("{}", r.payment),
                format!("{}", r.fitted_system_cost),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Generation cost at output `g`: the merit-order curve when known, the
/// fitted polynomial otherwise.
fn realized_gen_cost(system: &SystemSpec, g: f64) -> Result<f64> {
    match &system.fleet {
        Some(f) => merit_order_cost(f, g.clamp(0.0, f.total_capacity())),
        None => Ok(system.cost.eval(g)),
    }
}

pub fn scenario_metrics(
    system: &SystemSpec,
    sol: &DispatchSolution,
    load: &[f64],
    mechanism: Mechanism,
    scenario: usize,
) -> Result<ScenarioMetrics> {
    let m = system.storage.marginal_cost;
    let mut out = ScenarioMetrics {
        mechanism,
        scenario,
        storage_profit: 0.0,
        gen_cost: 0.0,
        system_cost: 0.0,
        payment: 0.0,
        fitted_system_cost: 0.0,
    };
    for t in 0..sol.horizon() {
        let (l, p, b) = (sol.lambda[t], sol.p[t], sol.b[t]);
        out.storage_profit += l * (p - b) - m * p;
        out.gen_cost += realized_gen_cost(system, sol.g[t])?;
        out.system_cost += m * p;
        out.payment += l * load[t];
        out.fitted_system_cost += system.cost.eval(sol.g[t]);
    }
    out.fitted_system_cost += out.system_cost;
    out.system_cost += out.gen_cost;
    Ok(out)
}

/// DP options for a bidder cleared under `system`: when the system pins the
/// final SoC, the terminal value penalizes ending below it; otherwise `base`
/// is kept.
pub fn bidder_options(system: &SystemSpec, set: &PriceScenarioSet, base: DpOptions) -> DpOptions {
    let target = match system.terminal {
        TerminalSoc::Periodic => system.storage.e_init,
        TerminalSoc::Fixed(v) => v,
        TerminalSoc::Free => return base,
    };
    let all: Vec<f64> = set.prices.iter().flatten().copied().collect();
    DpOptions {
        terminal: TerminalValue::return_to(target, &all, &system.storage),
        ..base
    }
}

/// Prices Monte Carlo scenarios, builds bids from a value function on those
/// prices, then clears every realized scenario twice: welfare-optimal
/// dispatch and bid-based clearing. Storage holds no reserve in either
/// mechanism. The bidder's terminal value follows [`bidder_options`].
pub fn compare_mechanisms(system: &SystemSpec, opts: &CompareOptions) -> Result<Comparison> {
    if opts.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut sys = system.clone();
    sys.storage_reserve = false;
    let set = simulate_price_scenarios(&sys, opts.n_scenarios, opts.seed)?;
    let dp = bidder_options(&sys, &set, opts.dp);
    let vf = value_function_from_scenarios(&set, &sys.storage, &dp, opts.averaging)?;
    let curve = bids_from_value(&vf);
    let pairs = set
        .net_loads
        .par_iter()
        .enumerate()
        .map(|(s, load)| {
            let det = deterministic_system(&sys, load)?;
            let w = solve_dispatch(&det)?;
            let c = clear_with_bids(&det, &curve)?;
            Ok((
                scenario_metrics(&sys, &w, load, Mechanism::Welfare, s)?,
                scenario_metrics(&sys, &c, load, Mechanism::Bids, s)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let welfare = MetricMeans::of(pairs.iter().map(|p| &p.0));
    let bids = MetricMeans::of(pairs.iter().map(|p| &p.1));
    let batches: Vec<bool> = pairs
        .chunks(opts.batch_size)
        .map(|c| {
            let w: f64 = c.iter().map(|p| p.0.payment).sum();
            let b: f64 = c.iter().map(|p| p.1.payment).sum();
            w < b
        })
        .collect();
    let lower = batches.iter().filter(|b| **b).count();
    Ok(Comparison {
        rows: pairs.iter().flat_map(|(w, b)| [*w, *b]).collect(),
        change_pct: welfare.change_from(&bids),
        welfare,
        bids,
        payment_lower_share: lower as f64 / batches.len() as f64,
        n_batches: batches.len(),
        clipped: set.clipped,
        bid_curve: curve,
    })
}

/// Retires `fraction` of the fleet and refits the cost polynomial at the same
/// degree. The generator range shrinks with the fleet.
pub fn retire_fleet(system: &SystemSpec, fraction: f64) -> Result<SystemSpec> {
    let fleet = system
        .fleet
        .as_ref()
        .ok_or_else(|| Error::Config("retirement needs a merit-order fleet".into()))?;
    let kept = fleet.retire(fraction)?;
    let fit = fit_polynomial_to_merit_curve(&kept, system.cost.degree())?;
    let old_cap = fleet.total_capacity();
    let cap = kept.total_capacity();
    let mut s = system.clone();
    s.gen.g_min = system.gen.g_min * cap / old_cap;
    s.gen.g_max = cap;
    s.cost = fit.poly;
    s.fleet = Some(kept);
    crate::scenarios::check_capacity(&s)?;
    Ok(s)
}
