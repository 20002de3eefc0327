//! Acceptance battery. Prints one PASS/FAIL line per criterion, then a
//! summary. Criterion verdicts do not change the exit code; an error inside
//! a check does.

use std::io::Write;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use storage_pricer::baseline::{
    bids_from_value, compare_mechanisms, dp_value_function, retire_fleet, CompareOptions, DpOptions,
    TerminalValue,
};
use storage_pricer::costs::{CostPolynomial, StorageSpec};
use storage_pricer::dispatch::{
    expected_system_cost, solve_dispatch_with, DispatchSolution, SystemSpec, TerminalSoc,
};
use storage_pricer::distributions::{
    fit_versatile_mle, robust_quantile, versatile_cdf, versatile_inverse_cdf, ErrorMoments, RobustShape,
    UncertaintyModel,
};
use storage_pricer::reformulation::{GenBounds, LayoutMode, RiskPolicy};
use storage_pricer::scenarios::{
    empirical_violation_rate, sample_errors, stream_rng, synth_test_system, NetLoadModel, SynthParams,
};
use storage_pricer::solver::{verify_kkt, Residuals, DEFAULT_ITER_CAP};
use storage_pricer::theory::{
    check_price_bounds, default_soc_grid, derivative_check, jensen_gap, jensen_point_from, sigma_sweep,
    slope_gap, soc_sweep, solve_for_theory, verify_coupling, THEORY_TOL,
};
use storage_pricer::Error;

struct Verdict {
    id: usize,
    pass: bool,
    detail: String,
}

fn report(v: &Verdict) {
    let mut out = std::io::stdout().lock();
    let tag = if v.pass { "PASS" } else { "FAIL" };
    writeln!(out, "[{tag}] criterion {:>2}: {}", v.id, v.detail).unwrap();
    out.flush().unwrap();
}

fn cubic_synth() -> SystemSpec {
    synth_test_system(&SynthParams::default()).unwrap()
}

fn quadratic_synth() -> SystemSpec {
    synth_test_system(&SynthParams { fit_degree: 2, ..SynthParams::default() }).unwrap()
}

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

/// A solved member of the random battery.
struct Solved {
    system: SystemSpec,
    solution: DispatchSolution,
}

fn agree(kkt: f64, solver: f64) -> bool {
    let floor = THEORY_TOL;
    kkt <= 10.0 * solver.max(floor) && solver <= 10.0 * kkt.max(floor)
}

fn residuals_agree(k: &Residuals, s: &Residuals) -> bool {
    agree(k.stationarity, s.stationarity) && agree(k.primal, s.primal) && agree(k.complementarity, s.complementarity)
}

fn kkt_battery() -> (Verdict, Vec<Solved>) {
    let start = Instant::now();
    let eps = [0.01, 0.05, 0.1];
    let params: Vec<SynthParams> = (0..50u64)
        .map(|i| {
            let mut rng = stream_rng(2024, i);
            SynthParams {
                seed: 1000 + i,
                epsilon: eps[i as usize % 3],
                renewable_ratio: rng.gen_range(0.1..0.4),
                storage_ratio: rng.gen_range(0.05..0.3),
                e_init_ratio: rng.gen_range(0.1..0.9),
                ..SynthParams::default()
            }
        })
        .collect();
    let outcomes: Vec<_> = params
        .par_iter()
        .map(|p| {
            let system = synth_test_system(p)?;
            match solve_dispatch_with(&system, THEORY_TOL, DEFAULT_ITER_CAP) {
                Ok((solution, built, res)) => {
                    let kkt = verify_kkt(&built.program, &res)?;
                    let ok = res.residuals.max() <= 1e-7 && residuals_agree(&kkt.max, &res.residuals);
                    Ok(Some(Ok((Solved { system, solution }, ok, res.residuals.max(), kkt.max.max()))))
                }
                Err(Error::Solver { .. }) => Ok(Some(Err(false))),
                Err(Error::Convexity(_)) => Ok(Some(Err(true))),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_, Error>>()
        .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let mut solved = Vec::new();
    let (mut bad, mut worst_solver, mut worst_kkt, mut skipped, mut nonconvex) = (0, 0.0_f64, 0.0_f64, 0, 0);
    for o in outcomes.into_iter().flatten() {
        match o {
            Ok((s, ok, r, k)) => {
                bad += !ok as usize;
                worst_solver = worst_solver.max(r);
                worst_kkt = worst_kkt.max(k);
                solved.push(s);
            }
            Err(true) => nonconvex += 1,
            Err(false) => skipped += 1,
        }
    }
    let pass = bad == 0 && !solved.is_empty() && secs <= 60.0;
    let detail = format!(
        "KKT certification: {} optimal of 50 ({skipped} non-optimal, {nonconvex} rejected as non-convex), {bad} failing; \
         max solver residual {worst_solver:.2e}, max verify_kkt residual {worst_kkt:.2e}; {secs:.1} s",
        solved.len()
    );
    (Verdict { id: 1, pass, detail }, solved)
}

/// Minimum deterministic cost over every stock path on a fine grid, for each
/// starting knot. Free terminal stock, no simultaneous charge and discharge.
fn brute_cost_to_go(sys: &SystemSpec, step: f64) -> Vec<f64> {
    let st = &sys.storage;
    let n = (st.e_max / step).round() as usize + 1;
    let mut next = vec![0.0; n];
    for t in (0..sys.horizon).rev() {
        let d = sys.net_load.forecast[t];
        let cur: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut best = f64::INFINITY;
                for (j, v) in next.iter().enumerate() {
                    let moved = (j as f64 - i as f64) * step;
                    let (p, b) = if moved >= 0.0 { (0.0, moved / st.eta) } else { (-moved * st.eta, 0.0) };
                    if p > st.p_max + 1e-9 || b > st.p_max + 1e-9 {
                        continue;
                    }
                    let g = d - p + b;
                    if g < sys.gen.g_min || g > sys.gen.g_max {
                        continue;
                    }
                    best = best.min(sys.cost.eval(g) + st.marginal_cost * p + v);
                }
                best
            })
            .collect();
        next = cur;
    }
    next
}

fn soc_monotonicity() -> Verdict {
    let sys = cubic_synth();
    let grid = default_soc_grid(sys.storage.e_max, 21);
    let sweep = soc_sweep(&sys, &grid, 0).unwrap();
    let th = sweep.thetas();
    let max_th = th.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let at_full = th[th.len() - 1];

    // Deterministic T = 3 toy: brute-force marginal value of the initial stock.
    let st = StorageSpec::new(100.0, 200.0, 0.9, 5.0, 0.0).unwrap();
    let mut small = toy(vec![150.0, 300.0, 250.0], 0.0, &[0.0, 10.0, 0.02, 2e-5], st);
    small.terminal = TerminalSoc::Free;
    small.storage_reserve = false;
    let step = 0.05;
    let v0 = brute_cost_to_go(&small, step);
    let starts: Vec<f64> = (0..10).map(|i| 10.0 + 20.0 * i as f64).collect();
    let h = 1.0;
    let knot = |e: f64| (e / step).round() as usize;
    let brute: Vec<f64> = starts.iter().map(|&e| -(v0[knot(e + h)] - v0[knot(e - h)]) / (2.0 * h)).collect();
    let dispatched: Vec<f64> = starts
        .iter()
        .map(|&e| {
            let mut s = small.clone();
            s.storage.e_init = e;
            solve_for_theory(&s).unwrap().theta[0]
        })
        .collect();
    let tie = 1e-3;
    let sign = |x: f64| if x > tie { 1 } else if x < -tie { -1 } else { 0 };
    let mut mismatched = 0;
    for i in 0..starts.len() {
        for j in i + 1..starts.len() {
            mismatched += (sign(brute[j] - brute[i]) != sign(dispatched[j] - dispatched[i])) as usize;
        }
    }
    let worst_gap = brute
        .iter()
        .zip(&dispatched)
        .fold(0.0_f64, |m, (b, d)| m.max((b - d).abs() / b.abs().max(1.0)));
    let pass = sweep.holds && mismatched == 0;
    Verdict {
        id: 2,
        pass,
        detail: format!(
            "SoC monotonicity: 21-point sweep max rise {:.2e} (tol {:.2e}), theta(E_max)/max theta = {:.3}; \
             T=3 brute force: {mismatched} ordering mismatches over {} starts, max relative theta gap {worst_gap:.1e}",
            sweep.max_violation,
            sweep.tolerance,
            at_full / max_th.max(1e-12),
            starts.len()
        ),
    }
}

fn sigma_monotonicity() -> Verdict {
    let scales: Vec<f64> = (0..7).map(|i| 0.5 + 0.25 * i as f64).collect();
    let quad = sigma_sweep(&quadratic_synth(), &scales, 0).unwrap();
    let cubic = sigma_sweep(&cubic_synth(), &scales, 0).unwrap();
    let kept: Vec<f64> = cubic.points.iter().filter(|p| !p.excluded).map(|p| p.theta).collect();
    let strict = kept.windows(2).all(|w| w[1] > w[0]);
    let worst = derivative_check(1000, 7).unwrap();
    let quad_ok = quad.max_violation <= 1e-6;
    let pass = quad_ok && cubic.holds && strict && kept.len() >= 2 && worst <= 1e-6;
    Verdict {
        id: 3,
        pass,
        detail: format!(
            "sigma monotonicity: quadratic theta spread {:.2e} $/MWh; cubic {} kept points, strictly increasing = {strict}{}; \
             closed-form derivative max relative error {worst:.2e} over 1000 draws",
            quad.max_violation,
            kept.len(),
            cubic.note.as_deref().map(|n| format!(" ({n})")).unwrap_or_default()
        ),
    }
}

fn jensen() -> Verdict {
    let z_of = |sys: &SystemSpec| {
        let mut gen_only = sys.clone();
        gen_only.storage_reserve = false;
        let sol = solve_for_theory(&gen_only).unwrap();
        let t = (0..sol.horizon()).fold(0, |b, t| if sol.phi[t] > sol.phi[b] { t } else { b });
        jensen_gap(&sys.cost, &jensen_point_from(&sol, sys, t), 100_000, 11).unwrap()
    };
    let c = z_of(&cubic_synth());
    let q = z_of(&quadratic_synth());
    let pass = c.z_score() >= 3.0 && q.z_score().abs() <= 3.0;
    Verdict {
        id: 4,
        pass,
        detail: format!(
            "Jensen gap at 1e5 samples: cubic {:.3e} ({:.1} SE), quadratic {:.3e} ({:.1} SE)",
            c.gap,
            c.z_score(),
            q.gap,
            q.z_score()
        ),
    }
}

fn coupling_and_bounds(battery: &[Solved]) -> Verdict {
    let (mut checked, mut coupling_bad, mut periods, mut outside, mut bound_systems) = (0, 0, 0, 0, 0);
    let mut worst = 0.0_f64;
    for s in battery.iter().filter(|s| s.solution.mode == LayoutMode::Full) {
        let rep = verify_coupling(&s.solution, &s.system).unwrap();
        checked += 1;
        coupling_bad += !rep.holds as usize;
        worst = worst.max(rep.max_rel_err);
        let b = check_price_bounds(&s.solution, &s.system).unwrap();
        let n_out = b.rows.iter().filter(|r| !r.inside).count();
        periods += b.rows.len();
        outside += n_out;
        bound_systems += (n_out > 0) as usize;
    }
    let pass = checked > 0 && coupling_bad == 0 && outside == 0;
    Verdict {
        id: 5,
        pass,
        detail: format!(
            "coupling: {} of {checked} dispatches hold (max point error {worst:.2e}); \
             floor/cap bounds: {outside} of {periods} periods outside in {bound_systems} dispatches",
            checked - coupling_bad
        ),
    }
}

fn ideal_slope_gap() -> Verdict {
    let idealize = |mut s: SystemSpec| {
        s.storage.eta = 1.0;
        s.storage.marginal_cost = 0.0;
        s
    };
    let synth = idealize(cubic_synth());
    let a = slope_gap(&synth, &default_soc_grid(synth.storage.e_max, 21), 0).unwrap();
    let st = StorageSpec::new(50.0, 200.0, 1.0, 0.0, 100.0).unwrap();
    let small = idealize(toy(vec![150.0, 300.0, 250.0, 120.0, 200.0, 330.0], 15.0, &[0.0, 10.0, 0.02, 2e-5], st));
    let b = slope_gap(&small, &default_soc_grid(200.0, 21), 0).unwrap();
    let gap = a.gap.max(b.gap);
    let pass = gap <= 1e-6 && a.pairs + b.pairs > 0;
    Verdict {
        id: 6,
        pass,
        detail: format!(
            "ideal-storage slope gap {gap:.2e} over {} active pairs (synthetic {}, toy {})",
            a.pairs + b.pairs,
            a.pairs,
            b.pairs
        ),
    }
}

fn chance_validity(battery: &[Solved]) -> Verdict {
    let at_05: Vec<&Solved> = battery.iter().filter(|s| (s.system.epsilon - 0.05).abs() < 1e-12).collect();
    let reports: Vec<_> = at_05
        .par_iter()
        .enumerate()
        .map(|(i, s)| empirical_violation_rate(&s.solution, &s.system, 10_000, 500 + i as u64).unwrap())
        .collect();
    let within = reports.iter().filter(|r| r.within_budget()).count();
    let worst = reports.iter().fold(0.0_f64, |m, r| m.max(r.max_joint));
    let published = [4.3589, 3.1623, 2.8087, 2.1082];
    let shapes = [RobustShape::NA, RobustShape::S, RobustShape::U, RobustShape::SU];
    let k: Vec<f64> = shapes.iter().map(|s| robust_quantile(*s, 0.05).unwrap()).collect();
    let table_ok = k.iter().zip(&published).all(|(a, b)| (a - b).abs() <= 5e-5) && k.windows(2).all(|w| w[0] >= w[1]);
    let pass = !reports.is_empty() && within == reports.len() && table_ok;
    Verdict {
        id: 7,
        pass,
        detail: format!(
            "violation rates: {within} of {} dispatches within 0.05 + 2 SE (worst joint rate {worst:.4}); \
             robust factors at 0.05 = {:.4} >= {:.4} >= {:.4} >= {:.4}",
            reports.len(),
            k[0],
            k[1],
            k[2],
            k[3]
        ),
    }
}

type RiskRow = (f64, f64, f64);

fn risk_rows(base: &SynthParams, eps: &[f64]) -> Vec<RiskRow> {
    eps.par_iter()
        .map(|&e| {
            let sys = synth_test_system(&SynthParams { epsilon: e, ..base.clone() }).unwrap();
            let sol = solve_for_theory(&sys).unwrap();
            let mean_lambda = sol.lambda.iter().sum::<f64>() / sol.horizon() as f64;
            (expected_system_cost(&sol, &sys), mean_lambda, sol.reserve_cost())
        })
        .collect()
}

fn risk_direction() -> Verdict {
    let eps = [0.1, 0.05, 0.02, 0.01];
    let mut detail = String::from("eps 0.1 -> 0.01");
    let mut pass = true;
    for (label, params) in [
        ("default storage", SynthParams::default()),
        ("scarce storage", SynthParams { storage_ratio: 0.05, ..SynthParams::default() }),
    ] {
        let rows = risk_rows(&params, &eps);
        let up = |f: fn(&RiskRow) -> f64| {
            rows.windows(2).all(|w| f(&w[1]) >= f(&w[0]) - 1e-6 * f(&w[0]).abs().max(1.0))
        };
        let fmt = |f: fn(&RiskRow) -> f64| rows.iter().map(|r| format!("{:.2}", f(r))).collect::<Vec<_>>().join(" -> ");
        let (cost, price, reserve) = (up(|r| r.0), up(|r| r.1), up(|r| r.2));
        pass &= cost && price && reserve;
        detail.push_str(&format!(
            "; {label}: system cost {} ({cost}), mean price {} ({price}), reserve cost {} ({reserve})",
            fmt(|r| r.0),
            fmt(|r| r.1),
            fmt(|r| r.2)
        ));
    }
    Verdict { id: 8, pass, detail }
}

/// Best storage payoff over every knot path from `start`.
fn enumerate_paths(prices: &[f64], st: &StorageSpec, grid: &[f64], t: usize, start: usize) -> f64 {
    if t == prices.len() {
        return 0.0;
    }
    let mut best = f64::NEG_INFINITY;
    for j in 0..grid.len() {
        let stored = grid[j] - grid[start];
        let (p, b) = if stored >= 0.0 { (0.0, stored / st.eta) } else { (-stored * st.eta, 0.0) };
        let limit = st.p_max * (1.0 + 1e-9);
        if p > limit || b > limit || (p > 0.0 && prices[t] < 0.0) {
            continue;
        }
        let r = prices[t] * (p - b) - st.marginal_cost * p;
        best = best.max(r + enumerate_paths(prices, st, grid, t + 1, j));
    }
    best
}

fn dp_baseline() -> Verdict {
    let mut rng = stream_rng(99, 0);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let t = rng.gen_range(1..=3);
        let k = rng.gen_range(2..=5);
        let e_max = rng.gen_range(5.0..20.0);
        let eta = rng.gen_range(0.8..=1.0);
        let p_max = e_max / (k - 1) as f64 / eta * rng.gen_range(1.0..3.0);
        let st = StorageSpec::new(p_max, e_max, eta, rng.gen_range(0.0..5.0), 0.0).unwrap();
        let prices: Vec<f64> = (0..t).map(|_| rng.gen_range(-20.0..80.0)).collect();
        let vf = dp_value_function(&prices, &st, &DpOptions { grid_size: k, terminal: TerminalValue::Linear(0.0) }).unwrap();
        for i in 0..k {
            let want = enumerate_paths(&prices, &st, &vf.grid, 0, i);
            worst = worst.max((vf.values[0][i] - want).abs() / want.abs().max(1.0));
        }
    }
    let st = StorageSpec::new(25.0, 100.0, 0.9, 3.0, 50.0).unwrap();
    let (mut concave, mut negative_discharge, mut negative_periods) = (0, 0, 0);
    for path in 0..100u64 {
        let mut rng = stream_rng(123, path);
        let prices: Vec<f64> = (0..24).map(|_| rng.gen_range(-30.0..150.0)).collect();
        let vf = dp_value_function(&prices, &st, &DpOptions::default()).unwrap();
        concave += vf.is_concave(1e-9) as usize;
        let refp = vf.reference_path(st.e_init);
        let bids = bids_from_value(&vf);
        for t in 0..prices.len() {
            if prices[t] < 0.0 {
                negative_periods += 1;
                negative_discharge += (refp[t + 1] < refp[t] || !bids.periods[t].offer.is_empty()) as usize;
            }
        }
    }
    let pass = worst <= 1e-12 && concave == 100 && negative_discharge == 0;
    Verdict {
        id: 9,
        pass,
        detail: format!(
            "DP: max mismatch to enumeration {worst:.1e} over 100 toys; concave on {concave} of 100 paths; \
             {negative_discharge} discharges or offers in {negative_periods} negative-price periods"
        ),
    }
}

fn welfare_dominance() -> Verdict {
    let start = Instant::now();
    let sys = retire_fleet(&cubic_synth(), 0.2).unwrap();
    let opts = CompareOptions { n_scenarios: 200, batch_size: 10, ..CompareOptions::default() };
    let c = compare_mechanisms(&sys, &opts).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let cost_ok = c.welfare.system_cost <= c.bids.system_cost;
    let pay_ok = c.payment_lower_share >= 0.8;
    Verdict {
        id: 10,
        pass: cost_ok && pay_ok && secs <= 600.0,
        detail: format!(
            "welfare vs bids over 200 scenarios: system cost {:+.3}% ({cost_ok}), fitted-cost system cost {:+.3}%, \
             payment {:+.3}%, payment lower in {:.0}% of {} batches; {secs:.0} s",
            c.change_pct.system_cost,
            c.change_pct.fitted_system_cost,
            c.change_pct.payment,
            100.0 * c.payment_lower_share,
            c.n_batches
        ),
    }
}

fn distribution_fit() -> Verdict {
    let mut worst = 0.0_f64;
    for i in 0..10u64 {
        let mut rng = stream_rng(77, i);
        let a = rng.gen_range(0.8..3.0);
        let b = rng.gen_range(0.5..3.0);
        let c = rng.gen_range(0.3..1.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let model = NetLoadModel {
            forecast: vec![0.0],
            moments: vec![ErrorMoments::new(0.0, 1.0).unwrap()],
            model: UncertaintyModel::versatile(a, b, c).unwrap(),
            renewable_ratio: 0.0,
            storage_ratio: 0.0,
        };
        let draws: Vec<f64> = sample_errors(&model, 100_000, 300 + i).into_iter().map(|r| r[0]).collect();
        let fit = fit_versatile_mle(&draws).unwrap();
        for (got, want) in [(fit.a, a), (fit.b, b), (fit.c, c)] {
            worst = worst.max((got - want).abs() / want.abs());
        }
    }
    let mut rng = stream_rng(78, 0);
    let mut round_trip = 0.0_f64;
    for _ in 0..1000 {
        let (a, b, c) = (rng.gen_range(0.2..5.0), rng.gen_range(0.2..5.0), rng.gen_range(-2.0..2.0));
        let eps = rng.gen_range(1e-4..0.9999);
        let x = versatile_inverse_cdf(a, b, c, eps).unwrap();
        round_trip = round_trip.max((versatile_cdf(a, b, c, x) - (1.0 - eps)).abs());
    }
    Verdict {
        id: 11,
        pass: worst <= 0.05 && round_trip <= 1e-9,
        detail: format!(
            "Versatile MLE max relative error {:.2}% over 10 truths; inverse-CDF round trip {round_trip:.1e}",
            100.0 * worst
        ),
    }
}

fn main() {
    let (v1, battery) = kkt_battery();
    let mut verdicts = vec![v1];
    report(&verdicts[0]);
    let checks: Vec<Box<dyn Fn() -> Verdict>> = vec![
        Box::new(soc_monotonicity),
        Box::new(sigma_monotonicity),
        Box::new(jensen),
        Box::new(|| coupling_and_bounds(&battery)),
        Box::new(ideal_slope_gap),
        Box::new(|| chance_validity(&battery)),
        Box::new(risk_direction),
        Box::new(dp_baseline),
        Box::new(welfare_dominance),
        Box::new(distribution_fit),
    ];
    for check in checks {
        let v = check();
        report(&v);
        verdicts.push(v);
    }
    let passed = verdicts.iter().filter(|v| v.pass).count();
    let mut out = std::io::stdout().lock();
    writeln!(out, "acceptance: {passed} of {} criteria passed", verdicts.len()).unwrap();
}
