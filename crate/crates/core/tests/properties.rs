use proptest::prelude::*;

use storage_pricer::baseline::{bids_from_value, dp_value_function, DpOptions, TerminalValue};
use storage_pricer::costs::{merit_order_cost, CostPolynomial, FleetCurve, FleetSegment, StorageSpec};
use storage_pricer::dispatch::{check_complementarity, solve_dispatch_with, SystemSpec, TerminalSoc};
use storage_pricer::distributions::{
    gaussian_quantile, quantile_pair, robust_quantile, versatile_cdf, versatile_inverse_cdf, ErrorMoments,
    RobustShape, UncertaintyModel,
};
use storage_pricer::reformulation::{allocate_risk, GenBounds, RiskPolicy};
use storage_pricer::scenarios::NetLoadModel;
use storage_pricer::solver::verify_kkt;
use storage_pricer::theory::{charging_coupling, discharging_coupling, CouplingInputs};

fn toy(forecast: Vec<f64>, sigma: f64, cost: &[f64], storage: StorageSpec, reserve: bool) -> SystemSpec {
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
        storage_reserve: reserve,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn risk_split_stays_within_budget(eps in 0.001f64..0.999, n in 1usize..8) {
        let a = allocate_risk(eps, n, &RiskPolicy::EqualSplit).unwrap();
        prop_assert!(a.epsilons.iter().sum::<f64>() <= eps * (1.0 + 1e-12));
        prop_assert!(a.epsilons.iter().all(|e| *e > 0.0));
    }

    #[test]
    fn quantile_band_widens_as_risk_shrinks(
        mu in -50.0f64..50.0,
        sigma in 0.1f64..100.0,
        eps in 0.001f64..0.4,
        shrink in 0.1f64..0.99,
    ) {
        let m = ErrorMoments::new(mu, sigma).unwrap();
        for model in [
            UncertaintyModel::Gaussian,
            UncertaintyModel::Robust { shape: RobustShape::NA },
            UncertaintyModel::versatile(1.3, 2.2, 0.1).unwrap(),
        ] {
            let (lo, hi) = quantile_pair(m, eps, &model).unwrap();
            let (lo2, hi2) = quantile_pair(m, eps * shrink, &model).unwrap();
            prop_assert!(lo <= hi);
            prop_assert!(lo2 <= lo + 1e-9 && hi2 >= hi - 1e-9);
        }
    }

    #[test]
    fn robust_quantiles_dominate_gaussian(eps in 0.001f64..0.3) {
        let z = gaussian_quantile(eps).unwrap();
        let na = robust_quantile(RobustShape::NA, eps).unwrap();
        let s = robust_quantile(RobustShape::S, eps).unwrap();
        prop_assert!(na >= s - 1e-12);
        prop_assert!(s >= z - 1e-12);
    }

    #[test]
    fn versatile_inverse_round_trips(a in 0.2f64..5.0, b in 0.2f64..5.0, c in -2.0f64..2.0, eps in 1e-4f64..0.9999) {
        let x = versatile_inverse_cdf(a, b, c, eps).unwrap();
        prop_assert!((versatile_cdf(a, b, c, x) - (1.0 - eps)).abs() <= 1e-9);
    }

    #[test]
    fn merit_order_cost_is_convex(
        caps in prop::collection::vec(10.0f64..200.0, 2..8),
        slope in 0.001f64..0.05,
        q1 in 0.0f64..1.0,
        q2 in 0.0f64..1.0,
    ) {
        let mut mc = 10.0;
        let segs: Vec<FleetSegment> = caps
            .iter()
            .map(|&cap| {
                let s = FleetSegment { capacity_mw: cap, c0: 0.0, c1: mc, c2: slope };
                mc += 2.0 * slope * cap;
                s
            })
            .collect();
        let fleet = FleetCurve::new(segs).unwrap();
        let total = fleet.total_capacity();
        let (x, y) = (q1.min(q2) * total, q1.max(q2) * total);
        let mid = 0.5 * (x + y);
        let f = |q: f64| merit_order_cost(&fleet, q).unwrap();
        prop_assert!(f(y) >= f(x) - 1e-9);
        prop_assert!(f(mid) <= 0.5 * (f(x) + f(y)) + 1e-6 * f(y).abs().max(1.0));
    }

    #[test]
    fn flat_prices_pass_through_lossless_coupling(
        lambda in -50.0f64..120.0,
        lo in 1.0f64..50.0,
        hi in 1.0f64..50.0,
    ) {
        let c = CouplingInputs { theta: lambda, lambda, pi: 0.0, marginal_cost: 0.0, eta: 1.0, d_lo: -lo, d_hi: hi, mu: 0.0 };
        let u = charging_coupling(&c).unwrap();
        let l = discharging_coupling(&c).unwrap();
        prop_assert!((u - lambda).abs() <= 1e-9 * lambda.abs().max(1.0));
        prop_assert!((l - lambda).abs() <= 1e-9 * lambda.abs().max(1.0));
    }

    #[test]
    fn value_functions_are_concave_and_bids_monotone(
        prices in prop::collection::vec(-20.0f64..150.0, 1..24),
        eta in 0.6f64..1.0,
        m in 0.0f64..10.0,
        terminal in 0.0f64..50.0,
    ) {
        let st = StorageSpec::new(25.0, 100.0, eta, m, 50.0).unwrap();
        let vf = dp_value_function(&prices, &st, &DpOptions { grid_size: 21, terminal: TerminalValue::Linear(terminal) }).unwrap();
        prop_assert!(vf.is_concave(1e-9), "{}", vf.max_concavity_violation);
        let bids = bids_from_value(&vf);
        prop_assert!(bids.is_monotone(1e-9));
        for (t, p) in bids.periods.iter().enumerate() {
            if prices[t] < 0.0 {
                prop_assert!(p.offer.is_empty());
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_dispatches_certify(
        loads in prop::collection::vec(100.0f64..400.0, 2..7),
        sigma in 0.0f64..25.0,
        c3 in 0.0f64..3e-5,
        reserve in any::<bool>(),
    ) {
        let st = StorageSpec::new(50.0, 200.0, 0.9, 5.0, 100.0).unwrap();
        let sys = toy(loads, sigma, &[0.0, 10.0, 0.02, c3], st, reserve);
        let (sol, built, res) = solve_dispatch_with(&sys, 1e-8, 200).unwrap();
        let kkt = verify_kkt(&built.program, &res).unwrap();
        prop_assert!(kkt.max.max() <= 1e-7, "{:?}", kkt.max);
        prop_assert!(res.residuals.max() <= 1e-7);
        for t in 0..sys.horizon {
            let bal = sol.g[t] + sol.p[t] - sol.b[t] - sys.net_load.forecast[t];
            prop_assert!(bal.abs() <= 1e-6 * sys.gen.g_max);
            prop_assert!((sol.phi[t] + sol.psi[t] - 1.0).abs() <= 1e-7);
            prop_assert!(sol.soc[t] >= -1e-6 && sol.soc[t] <= st.e_max + 1e-6);
        }
        let comp = check_complementarity(&sol, st.p_max, 1e-6);
        prop_assert!(comp.max_product <= 1e-3, "{:?}", comp.products);
    }
}
