//! Generator cost models, expected cost under Gaussian forecast error, and
//! merit-curve fitting.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::distributions::{binomial, raw_moment, ErrorMoments};
use crate::error::{Error, Result};

pub const MAX_DEGREE: usize = 4;

/// Aggregated generator cost `G(x) = Σ C_i x^i`, degree at most 4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostPolynomial {
    coeffs: Vec<f64>,
}

impl CostPolynomial {
    /// Accepts any finite coefficient list of degree ≤ 4 without a domain check.
    pub fn from_coeffs(coeffs: &[f64]) -> Result<Self> {
        let mut c = coeffs.to_vec();
        while c.len() > 1 && *c.last().unwrap() == 0.0 {
            c.pop();
        }
        if c.is_empty() {
            c.push(0.0);
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("cost coefficients must be finite"));
        }
        if c.len() - 1 > MAX_DEGREE {
            return Err(Error::UnsupportedDegree {
                degree: c.len() - 1,
                supported: "0..=4",
            });
        }
        Ok(CostPolynomial { coeffs: c })
    }

    /// Like [`CostPolynomial::from_coeffs`] but also requires a nonnegative
    /// marginal cost on `[g_min, g_max]`.
    pub fn new(coeffs: &[f64], g_min: f64, g_max: f64) -> Result<Self> {
        let p = Self::from_coeffs(coeffs)?;
        p.check_marginal_nonnegative(g_min, g_max)?;
        Ok(p)
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    /// Coefficient `C_i`, zero beyond the degree.
    pub fn coeff(&self, i: usize) -> f64 {
        self.coeffs.get(i).copied().unwrap_or(0.0)
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }

    pub fn derivative(&self, x: f64) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .skip(1)
            .rev()
            .fold(0.0, |acc, (i, c)| acc * x + i as f64 * c)
    }

    pub fn second_derivative(&self, x: f64) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .skip(2)
            .rev()
            .fold(0.0, |acc, (i, c)| acc * x + (i * (i - 1)) as f64 * c)
    }

    /// Rescales to `G̃(u) = G(s·u)/k`, used for per-unit formulations.
    pub fn rescaled(&self, s: f64, k: f64) -> CostPolynomial {
        let coeffs = self
            .coeffs
            .iter()
            .enumerate()
            .map(|(i, c)| c * s.powi(i as i32) / k)
            .collect();
        CostPolynomial { coeffs }
    }

    /// Minimum of the marginal cost on `[lo, hi]`.
    ///
    /// The marginal cost has degree ≤ 3, so its minimum sits at an endpoint or
    /// at a root of the second derivative (degree ≤ 2, solved in closed form).
    pub fn min_marginal(&self, lo: f64, hi: f64) -> f64 {
        let mut candidates = vec![lo, hi];
        let (c2, c3, c4) = (self.coeff(2), self.coeff(3), self.coeff(4));
        // G''(x) = 2 c2 + 6 c3 x + 12 c4 x²
        let (qa, qb, qc) = (12.0 * c4, 6.0 * c3, 2.0 * c2);
        if qa.abs() > 0.0 {
            let disc = qb * qb - 4.0 * qa * qc;
            if disc >= 0.0 {
                let r = disc.sqrt();
                candidates.push((-qb + r) / (2.0 * qa));
                candidates.push((-qb - r) / (2.0 * qa));
            }
        } else if qb.abs() > 0.0 {
            candidates.push(-qc / qb);
        }
        candidates
            .into_iter()
            .filter(|x| *x >= lo && *x <= hi)
            .map(|x| self.derivative(x))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn check_marginal_nonnegative(&self, lo: f64, hi: f64) -> Result<()> {
        if !(lo <= hi) {
            return Err(Error::domain(format!("empty operating domain [{lo}, {hi}]")));
        }
        let m = self.min_marginal(lo, hi);
        let scale = self.derivative(hi).abs().max(1.0);
        if m < -1e-12 * scale {
            return Err(Error::Convexity(format!(
                "marginal cost reaches {m:.6e} on [{lo}, {hi}]"
            )));
        }
        Ok(())
    }
}

/// Raw Gaussian moments of `d` up to order 8 with the `E[X^j d^r]` expansion
/// for `X = g + φ d`.
pub(crate) struct MomentTable {
    m: [f64; 9],
}

impl MomentTable {
    pub(crate) fn new(mu: f64, sigma: f64) -> Self {
        let mut m = [0.0; 9];
        for (k, slot) in m.iter_mut().enumerate() {
            *slot = raw_moment(mu, sigma, k);
        }
        MomentTable { m }
    }

    /// `E[(g + φ d)^j · d^r]`.
    pub(crate) fn mixed(&self, j: usize, r: usize, g: f64, phi: f64) -> f64 {
        (0..=j)
            .map(|k| {
                binomial(j, k) * g.powi((j - k) as i32) * phi.powi(k as i32) * self.m[k + r]
            })
            .sum()
    }

    pub(crate) fn value(&self, p: &CostPolynomial, g: f64, phi: f64) -> f64 {
        p.coeffs
            .iter()
            .enumerate()
            .map(|(i, c)| c * self.mixed(i, 0, g, phi))
            .sum()
    }

    /// Gradient in `(g, φ)`.
    pub(crate) fn gradient(&self, p: &CostPolynomial, g: f64, phi: f64) -> (f64, f64) {
        let mut dg = 0.0;
        let mut dphi = 0.0;
        for (i, c) in p.coeffs.iter().enumerate().skip(1) {
            let fi = i as f64;
            dg += c * fi * self.mixed(i - 1, 0, g, phi);
            dphi += c * fi * self.mixed(i - 1, 1, g, phi);
        }
        (dg, dphi)
    }

    /// Hessian entries `(gg, gφ, φφ)`.
    pub(crate) fn hessian(&self, p: &CostPolynomial, g: f64, phi: f64) -> (f64, f64, f64) {
        let (mut hgg, mut hgp, mut hpp) = (0.0, 0.0, 0.0);
        for (i, c) in p.coeffs.iter().enumerate().skip(2) {
            let w = c * (i * (i - 1)) as f64;
            hgg += w * self.mixed(i - 2, 0, g, phi);
            hgp += w * self.mixed(i - 2, 1, g, phi);
            hpp += w * self.mixed(i - 2, 2, g, phi);
        }
        (hgg, hgp, hpp)
    }
}

fn check_phi(phi: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&phi) {
        return Err(Error::domain(format!("phi must lie in [0, 1], got {phi}")));
    }
    Ok(())
}

/// `E[G(g + φ d)]` for `d ~ N(μ, σ²)`.
pub fn expected_gen_cost(
    poly: &CostPolynomial,
    g: f64,
    phi: f64,
    moments: ErrorMoments,
) -> Result<f64> {
    check_phi(phi)?;
    Ok(MomentTable::new(moments.mu, moments.sigma).value(poly, g, phi))
}

/// `∂/∂g E[G(g + φ d)]`.
pub fn marginal_expected_cost(
    poly: &CostPolynomial,
    g: f64,
    phi: f64,
    moments: ErrorMoments,
) -> Result<f64> {
    check_phi(phi)?;
    Ok(MomentTable::new(moments.mu, moments.sigma).gradient(poly, g, phi).0)
}

/// `M·(p + ψ μ)`.
pub fn expected_storage_cost(storage: &StorageSpec, p: f64, psi: f64, mu: f64) -> f64 {
    storage.marginal_cost * (p + psi * mu)
}

/// Error moments of one period with the quantile band the generator output
/// must cover, `g + φ d_lo ≥ g_min` and `g + φ d_hi ≤ g_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateBand {
    pub moments: ErrorMoments,
    pub d_lo: f64,
    pub d_hi: f64,
}

/// Checks that the expected cost is convex over the feasible operating points
/// of every band, and that the marginal cost is nonnegative on
/// `[g_min, g_max]`.
///
/// The grid runs over `φ ∈ [0, 1]` and, for each `φ`, over the generator
/// outputs the band leaves feasible. With `phi_free` false the share is
/// pinned at 1 and only the curvature in `g` is checked.
pub fn convexity_gate(
    poly: &CostPolynomial,
    g_min: f64,
    g_max: f64,
    bands: &[GateBand],
    phi_free: bool,
) -> Result<()> {
    poly.check_marginal_nonnegative(g_min, g_max)?;
    if poly.degree() <= 2 {
        return if poly.coeff(2) >= 0.0 {
            Ok(())
        } else {
            Err(Error::Convexity(format!(
                "negative quadratic coefficient {}",
                poly.coeff(2)
            )))
        };
    }
    const N: usize = 21;
    let mut seen: Vec<GateBand> = Vec::new();
    for band in bands {
        if seen.contains(band) {
            continue;
        }
        seen.push(*band);
        let m = band.moments;
        let table = MomentTable::new(m.mu, m.sigma);
        let phis: Vec<f64> = if phi_free {
            (0..N).map(|j| j as f64 / (N - 1) as f64).collect()
        } else {
            vec![1.0]
        };
        for phi in phis {
            let lo = g_min - phi * band.d_lo;
            let hi = g_max - phi * band.d_hi;
            if lo > hi {
                continue;
            }
            for i in 0..N {
                let g = lo + (hi - lo) * i as f64 / (N - 1) as f64;
                let (a, b, c) = table.hessian(poly, g, phi);
                let (b, c) = if phi_free { (b, c) } else { (0.0, a.abs()) };
                let scale = a.abs().max(c.abs()).max(1e-300);
                let det = a * c - b * b;
                if a < -1e-10 * scale || c < -1e-10 * scale || det < -1e-9 * scale * scale {
                    return Err(Error::Convexity(format!(
                        "expected-cost Hessian not PSD at g={g:.4}, phi={phi:.3} \
                         (mu={}, sigma={}): [[{a:.4e}, {b:.4e}], [{b:.4e}, {c:.4e}]]",
                        m.mu, m.sigma
                    )));
                }
            }
        }
    }
    Ok(())
}

/// One generator (or block) of the merit order with cost `c0 + c1 x + c2 x²`
/// for output `x ∈ [0, capacity]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FleetSegment {
    pub capacity_mw: f64,
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
}

impl FleetSegment {
    fn cost(&self, x: f64) -> f64 {
        self.c0 + self.c1 * x + self.c2 * x * x
    }
}

/// Piecewise cost curve obtained by stacking segments in merit order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetCurve {
    segments: Vec<FleetSegment>,
}

impl FleetCurve {
    /// Sorts segments by starting marginal cost `c1`.
    pub fn new(mut segments: Vec<FleetSegment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::domain("fleet has no segments"));
        }
        for (i, s) in segments.iter().enumerate() {
            if !(s.capacity_mw > 0.0 && s.capacity_mw.is_finite()) {
                return Err(Error::domain(format!(
                    "segment {i} has non-positive capacity {}",
                    s.capacity_mw
                )));
            }
            if ![s.c0, s.c1, s.c2].iter().all(|v| v.is_finite()) || s.c2 < 0.0 {
                return Err(Error::domain(format!(
                    "segment {i} needs finite coefficients with c2 >= 0"
                )));
            }
        }
        segments.sort_by(|a, b| a.c1.total_cmp(&b.c1));
        Ok(FleetCurve { segments })
    }

    pub fn segments(&self) -> &[FleetSegment] {
        &self.segments
    }

    pub fn total_capacity(&self) -> f64 {
        self.segments.iter().map(|s| s.capacity_mw).sum()
    }

    /// Removes `fraction` of the segments, spread evenly through the merit
    /// order.
    pub fn retire(&self, fraction: f64) -> Result<FleetCurve> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::domain(format!(
                "retire fraction must lie in [0, 1), got {fraction}"
            )));
        }
        let n = self.segments.len();
        let k = (fraction * n as f64).round() as usize;
        if k == 0 {
            return Ok(self.clone());
        }
        let step = n as f64 / k as f64;
        let drop: Vec<usize> = (0..k)
            .map(|j| (((j as f64 + 0.5) * step) as usize).min(n - 1))
            .collect();
        let kept = self
            .segments
            .iter()
            .enumerate()
            .filter(|(i, _)| !drop.contains(i))
            .map(|(_, s)| *s)
            .collect();
        FleetCurve::new(kept)
    }
}

/// Exact cost of serving `q` MW from the stacked fleet. Every segment's
/// constant term is always included so the curve is continuous.
pub fn merit_order_cost(fleet: &FleetCurve, q: f64) -> Result<f64> {
    let total = fleet.total_capacity();
    if !(q >= 0.0 && q <= total * (1.0 + 1e-12)) {
        return Err(Error::domain(format!(
            "output {q} MW outside fleet range [0, {total}]"
        )));
    }
    let mut left = q;
    let mut cost = 0.0;
    for s in &fleet.segments {
        let x = left.clamp(0.0, s.capacity_mw);
        cost += s.cost(x);
        left -= x;
    }
    Ok(cost)
}

/// Marginal cost of the stacked fleet at `q` (right derivative).
pub fn merit_order_marginal(fleet: &FleetCurve, q: f64) -> f64 {
    let mut offset = 0.0;
    for s in &fleet.segments {
        if q < offset + s.capacity_mw {
            return s.c1 + 2.0 * s.c2 * (q - offset).max(0.0);
        }
        offset += s.capacity_mw;
    }
    let last = fleet.segments.last().expect("non-empty fleet");
    last.c1 + 2.0 * last.c2 * last.capacity_mw
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolynomialFit {
    pub poly: CostPolynomial,
    pub rmse: f64,
}

const FIT_POINTS: usize = 200;

/// Least-squares polynomial fit of the cumulative fleet cost on a uniform
/// 200-point grid over `[0, total capacity]`.
pub fn fit_polynomial_to_merit_curve(fleet: &FleetCurve, degree: usize) -> Result<PolynomialFit> {
    if !(1..=MAX_DEGREE).contains(&degree) {
        return Err(Error::UnsupportedDegree {
            degree,
            supported: "1..=4",
        });
    }
    let q = fleet.total_capacity();
    if !(q > 0.0) {
        return Err(Error::domain("fleet has zero capacity"));
    }
    let mut a = DMatrix::zeros(FIT_POINTS, degree + 1);
    let mut y = DVector::zeros(FIT_POINTS);
    for k in 0..FIT_POINTS {
        let u = k as f64 / (FIT_POINTS - 1) as f64;
        for i in 0..=degree {
            a[(k, i)] = u.powi(i as i32);
        }
        y[k] = merit_order_cost(fleet, (u * q).min(q))?;
    }
    let svd = a.clone().svd(true, true);
    let sol = svd
        .solve(&y, 1e-14)
        .map_err(|e| Error::domain(format!("least-squares fit failed: {e}")))?;
    let resid = &a * &sol - &y;
    let rmse = (resid.norm_squared() / FIT_POINTS as f64).sqrt();
    let coeffs: Vec<f64> = sol
        .iter()
        .enumerate()
        .map(|(i, v)| v / q.powi(i as i32))
        .collect();
    Ok(PolynomialFit {
        poly: CostPolynomial::from_coeffs(&coeffs)?,
        rmse,
    })
}

/// Storage parameters: power cap `P̄`, energy cap `Ē`, efficiency `η`,
/// marginal cost `M` and initial state of charge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StorageSpec {
    pub p_max: f64,
    pub e_max: f64,
    pub eta: f64,
    pub marginal_cost: f64,
    pub e_init: f64,
}

impl StorageSpec {
    pub fn new(p_max: f64, e_max: f64, eta: f64, marginal_cost: f64, e_init: f64) -> Result<Self> {
        let s = StorageSpec {
            p_max,
            e_max,
            eta,
            marginal_cost,
            e_init,
        };
        s.validate()?;
        Ok(s)
    }

    /// A placeholder for systems without storage.
    pub fn disabled() -> Self {
        StorageSpec {
            p_max: 0.0,
            e_max: 0.0,
            eta: 1.0,
            marginal_cost: 0.0,
            e_init: 0.0,
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.p_max > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let s = self;
        let all_finite = [s.p_max, s.e_max, s.eta, s.marginal_cost, s.e_init]
            .iter()
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::domain("storage parameters must be finite"));
        }
        if !s.is_enabled() && s.p_max == 0.0 {
            return Ok(());
        }
        if !(s.eta > 0.0 && s.eta <= 1.0) {
            return Err(Error::domain(format!("eta must lie in (0, 1], got {}", s.eta)));
        }
        if !(s.p_max > 0.0 && s.e_max > 0.0) {
            return Err(Error::domain("storage needs p_max > 0 and e_max > 0"));
        }
        if s.marginal_cost < 0.0 {
            return Err(Error::domain("storage marginal cost must be >= 0"));
        }
        if !(0.0..=s.e_max).contains(&s.e_init) {
            return Err(Error::domain(format!(
                "initial SoC {} outside [0, {}]",
                s.e_init, s.e_max
            )));
        }
        Ok(())
    }
}

/// Reads a fleet CSV with columns `gen_id, capacity_mw, c0, c1, c2`.
pub fn read_fleet_csv(path: &std::path::Path) -> Result<FleetCurve> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Schema {
            path: path.display().to_string(),
            line: 1,
            message: format!("missing column '{name}'"),
        })
    };
    let cols = [
        find("gen_id")?,
        find("capacity_mw")?,
        find("c0")?,
        find("c1")?,
        find("c2")?,
    ];
    let mut segs = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let mut vals = [0.0; 4];
        for (slot, &c) in vals.iter_mut().zip(&cols[1..]) {
            let field = rec.get(c).unwrap_or("");
            *slot = field.parse().map_err(|_| Error::Schema {
                path: path.display().to_string(),
                line,
                message: format!("'{field}' is not a number"),
            })?;
        }
        segs.push(FleetSegment {
            capacity_mw: vals[0],
            c0: vals[1],
            c1: vals[2],
            c2: vals[3],
        });
    }
    FleetCurve::new(segs).map_err(|e| Error::Schema {
        path: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })
}

pub fn write_fleet_csv(fleet: &FleetCurve, path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["gen_id", "capacity_mw", "c0", "c1", "c2"])?;
    for (i, s) in fleet.segments.iter().enumerate() {
        w.write_record([
            format!("G{:03}", i + 1),
            format!("{}", s.capacity_mw),
            format!("{}", s.c0),
            format!("{}", s.c1),
            format!("{}", s.c2),
        ])?;
    }
    w.flush()?;
    Ok(())
}
