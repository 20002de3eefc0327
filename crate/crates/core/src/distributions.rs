//! Net-load forecast-error models.
//!
//! Every model exposes the normalized inverse CDF used to turn a one-sided
//! chance constraint into a deterministic bound:
//!
//! | family | lower quantile `d̂` | upper quantile `d̃` |
//! |---|---|---|
//! | Gaussian | `μ − Φ⁻¹(1−ε)·σ` | `μ + Φ⁻¹(1−ε)·σ` |
//! | Robust (NA/S/U/SU) | `μ − k(ε)·σ` | `μ + k(ε)·σ` |
//! | Versatile / Empirical | `μ + σ·F⁻¹(ε)` | `μ + σ·F⁻¹(1−ε)` |
//!
//! Versatile and Empirical models live in standardized units: they describe
//! `(d − μ)/σ`, so a single fitted shape can be shared by periods with
//! different moments.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Distribution shape assumption behind the distribution-free quantile bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RobustShape {
    /// No distributional assumption.
    NA,
    /// Symmetric.
    S,
    /// Unimodal.
    U,
    /// Symmetric and unimodal.
    SU,
}

impl std::str::FromStr for RobustShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "NA" => Ok(RobustShape::NA),
            "S" => Ok(RobustShape::S),
            "U" => Ok(RobustShape::U),
            "SU" => Ok(RobustShape::SU),
            other => Err(Error::domain(format!("unknown robust shape '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum UncertaintyModel {
    Gaussian,
    Versatile { a: f64, b: f64, c: f64 },
    /// Standardized historical errors, kept sorted.
    Empirical { samples: Vec<f64> },
    Robust { shape: RobustShape },
}

impl UncertaintyModel {
    pub fn versatile(a: f64, b: f64, c: f64) -> Result<Self> {
        check_versatile(a, b, c)?;
        Ok(UncertaintyModel::Versatile { a, b, c })
    }

    /// Builds an empirical model from samples that are already standardized.
    pub fn empirical(mut samples: Vec<f64>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::domain(format!(
                "empirical model needs at least 2 samples, got {}",
                samples.len()
            )));
        }
        if samples.iter().any(|x| !x.is_finite()) {
            return Err(Error::domain("empirical samples must be finite"));
        }
        samples.sort_by(f64::total_cmp);
        Ok(UncertaintyModel::Empirical { samples })
    }

    /// Standardizes raw errors (MW) and builds an empirical model from them.
    pub fn empirical_from_errors(errors: &[f64]) -> Result<Self> {
        let (z, _) = standardize(errors)?;
        Self::empirical(z)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            UncertaintyModel::Versatile { a, b, c } => check_versatile(*a, *b, *c),
            UncertaintyModel::Empirical { samples } if samples.len() < 2 => {
                Err(Error::domain("empirical model needs at least 2 samples"))
            }
            _ => Ok(()),
        }
    }

    /// Upper normalized quantile `F⁻¹(1−ε)` of the model.
    pub fn upper_factor(&self, epsilon: f64) -> Result<f64> {
        match self {
            UncertaintyModel::Gaussian => gaussian_quantile(epsilon),
            UncertaintyModel::Robust { shape } => robust_quantile(*shape, epsilon),
            UncertaintyModel::Versatile { a, b, c } => versatile_inverse_cdf(*a, *b, *c, epsilon),
            UncertaintyModel::Empirical { samples } => empirical_quantile(samples, 1.0 - epsilon),
        }
    }

    pub fn label(&self) -> String {
        match self {
            UncertaintyModel::Gaussian => "gaussian".into(),
            UncertaintyModel::Versatile { a, b, c } => format!("versatile({a},{b},{c})"),
            UncertaintyModel::Empirical { samples } => format!("empirical(n={})", samples.len()),
            UncertaintyModel::Robust { shape } => format!("robust({shape:?})"),
        }
    }
}

fn check_versatile(a: f64, b: f64, c: f64) -> Result<()> {
    if !(a > 0.0 && a.is_finite()) || !(b > 0.0 && b.is_finite()) || !c.is_finite() {
        return Err(Error::domain(format!(
            "versatile parameters need a > 0, b > 0, finite c; got a={a}, b={b}, c={c}"
        )));
    }
    Ok(())
}

/// Mean and standard deviation of a net-load forecast error, MW.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorMoments {
    pub mu: f64,
    pub sigma: f64,
}

impl ErrorMoments {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !mu.is_finite() || !sigma.is_finite() || sigma < 0.0 {
            return Err(Error::domain(format!(
                "error moments need finite mu and sigma >= 0, got mu={mu}, sigma={sigma}"
            )));
        }
        Ok(ErrorMoments { mu, sigma })
    }

    pub fn scaled(&self, sigma_scale: f64) -> Self {
        ErrorMoments {
            mu: self.mu,
            sigma: self.sigma * sigma_scale,
        }
    }
}

fn check_open_probability(p: f64, what: &str) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::domain(format!("{what} must lie in (0, 1), got {p}")));
    }
    Ok(())
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `Φ⁻¹(1 − ε)` by bisection on the erfc-based CDF.
pub fn gaussian_quantile(epsilon: f64) -> Result<f64> {
    check_open_probability(epsilon, "epsilon")?;
    // Compare the upper tail directly so small epsilons keep full precision.
    let upper_tail = |z: f64| 0.5 * erfc(z / std::f64::consts::SQRT_2);
    let (mut lo, mut hi) = (-40.0_f64, 40.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if upper_tail(mid) > epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * mid.abs().max(1.0) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Normalized distribution-free quantile factor for the given shape class.
///
/// Branch boundaries belong to the lower-ε branch.
pub fn robust_quantile(shape: RobustShape, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::domain(format!(
            "epsilon must lie in (0, 1], got {epsilon}"
        )));
    }
    let e = epsilon;
    let k = match shape {
        RobustShape::NA => ((1.0 - e) / e).sqrt(),
        RobustShape::S => {
            if e <= 0.5 {
                (1.0 / (2.0 * e)).sqrt()
            } else {
                0.0
            }
        }
        RobustShape::U => {
            if e <= 1.0 / 6.0 {
                ((4.0 - 9.0 * e) / (9.0 * e)).sqrt()
            } else {
                ((3.0 - 3.0 * e) / (1.0 + 3.0 * e)).sqrt()
            }
        }
        RobustShape::SU => {
            if e <= 1.0 / 6.0 {
                (2.0 / (9.0 * e)).sqrt()
            } else if e <= 0.5 {
                3.0_f64.sqrt() * (1.0 - 2.0 * e)
            } else {
                0.0
            }
        }
    };
    Ok(k)
}

/// CDF of the three-parameter Versatile distribution,
/// `F(x) = (1 + exp(−a(x − c)))^(−b)`.
pub fn versatile_cdf(a: f64, b: f64, c: f64, x: f64) -> f64 {
    let u = -a * (x - c);
    (-b * softplus(u)).exp()
}

pub fn versatile_pdf(a: f64, b: f64, c: f64, x: f64) -> f64 {
    let u = -a * (x - c);
    (a.ln() + b.ln() + u - (b + 1.0) * softplus(u)).exp()
}

/// Closed-form `F⁻¹(1 − ε | a, b, c)`.
pub fn versatile_inverse_cdf(a: f64, b: f64, c: f64, epsilon: f64) -> Result<f64> {
    check_versatile(a, b, c)?;
    check_open_probability(epsilon, "epsilon")?;
    Ok(versatile_quantile(a, b, c, 1.0 - epsilon))
}

/// `F⁻¹(q)`; callers guarantee parameter validity.
pub(crate) fn versatile_quantile(a: f64, b: f64, c: f64, q: f64) -> f64 {
    // q^(-1/b) - 1 computed as expm1 to keep precision near q = 1.
    let t = (-q.ln() / b).exp_m1();
    c - t.ln() / a
}

/// Mean of the Versatile distribution, `c + (ψ(b) − ψ(1))/a`.
pub fn versatile_mean(a: f64, b: f64, c: f64) -> f64 {
    use statrs::function::gamma::digamma;
    c + (digamma(b) - digamma(1.0)) / a
}

fn softplus(u: f64) -> f64 {
    if u > 30.0 {
        u + (-u).exp()
    } else {
        u.exp().ln_1p()
    }
}

fn logistic(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Result of a Versatile maximum-likelihood fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VersatileFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// Mean log-likelihood per sample at the optimum.
    pub mean_loglik: f64,
    /// Sup-norm of the mean log-likelihood gradient at the optimum.
    pub grad_norm: f64,
    pub iterations: usize,
}

const MLE_MIN_SAMPLES: usize = 50;
const MLE_GRAD_TOL: f64 = 1e-6;

/// Mean log-likelihood, its gradient and Hessian in `(a, b, c)`.
struct VersatileLik<'a> {
    x: &'a [f64],
}

impl VersatileLik<'_> {
    fn value(&self, a: f64, b: f64, c: f64) -> f64 {
        let n = self.x.len() as f64;
        let mut s = 0.0;
        for &x in self.x {
            let u = -a * (x - c);
            s += u - (b + 1.0) * softplus(u);
        }
        a.ln() + b.ln() + s / n
    }

    fn gradient_hessian(&self, a: f64, b: f64, c: f64) -> ([f64; 3], [[f64; 3]; 3]) {
        let n = self.x.len() as f64;
        let (mut s_xc, mut s_sig_xc, mut s_sp, mut s_sig) = (0.0, 0.0, 0.0, 0.0);
        let (mut s_w_xc2, mut s_w_xc, mut s_w) = (0.0, 0.0, 0.0);
        for &x in self.x {
            let xc = x - c;
            let u = -a * xc;
            let sig = logistic(u);
            let w = sig * (1.0 - sig);
            s_xc += xc;
            s_sig_xc += sig * xc;
            s_sp += softplus(u);
            s_sig += sig;
            s_w_xc2 += w * xc * xc;
            s_w_xc += w * xc;
            s_w += w;
        }
        let bp1 = b + 1.0;
        let ga = (n / a - s_xc + bp1 * s_sig_xc) / n;
        let gb = (n / b - s_sp) / n;
        let gc = a * (n - bp1 * s_sig) / n;
        let haa = (-n / (a * a) - bp1 * s_w_xc2) / n;
        let hab = s_sig_xc / n;
        let hac = (n + bp1 * (a * s_w_xc - s_sig)) / n;
        let hbb = -1.0 / (b * b);
        let hbc = -a * s_sig / n;
        let hcc = -bp1 * a * a * s_w / n;
        (
            [ga, gb, gc],
            [[haa, hab, hac], [hab, hbb, hbc], [hac, hbc, hcc]],
        )
    }
}

/// Maximum-likelihood fit of the Versatile distribution.
///
/// Runs BFGS on `(ln a, ln b, c)` from three starting shapes and polishes the
/// best candidate with Newton steps on the analytic Hessian.
pub fn fit_versatile_mle(samples: &[f64]) -> Result<VersatileFit> {
    if samples.len() < MLE_MIN_SAMPLES {
        return Err(Error::Fit {
            reason: format!(
                "need at least {MLE_MIN_SAMPLES} samples, got {}",
                samples.len()
            ),
            loglik: f64::NAN,
            grad_norm: f64::NAN,
            iterations: 0,
        });
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::domain("samples must be finite"));
    }
    let lik = VersatileLik { x: samples };
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = empirical_quantile(&sorted, 0.5)?;
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let sd = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if sd <= 0.0 {
        return Err(Error::domain("samples have zero spread"));
    }
    let a0 = std::f64::consts::PI / (sd * 3.0_f64.sqrt());

    let mut best: Option<([f64; 3], f64, usize)> = None;
    for b0 in [0.5, 1.0, 2.0] {
        // Place c so the start reproduces the sample median.
        let c0 = median + ((2.0_f64).powf(1.0 / b0) - 1.0).ln() / a0;
        let (theta, val, iters) = bfgs_versatile(&lik, [a0.ln(), b0.ln(), c0]);
        if best.as_ref().map_or(true, |(_, v, _)| val > *v) {
            best = Some((theta, val, iters));
        }
    }
    let (theta, _, mut iterations) = best.expect("three starts");
    let (mut a, mut b, mut c) = (theta[0].exp(), theta[1].exp(), theta[2]);

    // Newton polish in raw parameters.
    let mut grad_norm = f64::INFINITY;
    for _ in 0..100 {
        iterations += 1;
        let (g, h) = lik.gradient_hessian(a, b, c);
        grad_norm = g.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if grad_norm <= MLE_GRAD_TOL * 1e-3 {
            break;
        }
        let hm = nalgebra::Matrix3::from_fn(|i, j| h[i][j]);
        let gv = nalgebra::Vector3::new(g[0], g[1], g[2]);
        let step = match hm.lu().solve(&(-gv)) {
            Some(s) if gv.dot(&s) > 0.0 => s,
            _ => gv * 1e-2,
        };
        let f0 = lik.value(a, b, c);
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..50 {
            let (na, nb, nc) = (a + t * step[0], b + t * step[1], c + t * step[2]);
            if na > 0.0 && nb > 0.0 && lik.value(na, nb, nc) >= f0 - 1e-15 {
                a = na;
                b = nb;
                c = nc;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    let (g, _) = lik.gradient_hessian(a, b, c);
    grad_norm = grad_norm.min(g.iter().fold(0.0_f64, |m, v| m.max(v.abs())));
    let mean_loglik = lik.value(a, b, c);
    if !(grad_norm <= MLE_GRAD_TOL) || !mean_loglik.is_finite() {
        return Err(Error::Fit {
            reason: "did not reach gradient tolerance".into(),
            loglik: mean_loglik,
            grad_norm,
            iterations,
        });
    }
    Ok(VersatileFit {
        a,
        b,
        c,
        mean_loglik,
        grad_norm,
        iterations,
    })
}

fn bfgs_versatile(lik: &VersatileLik<'_>, start: [f64; 3]) -> ([f64; 3], f64, usize) {
    use nalgebra::{Matrix3, Vector3};
    // Minimize the negative mean log-likelihood in θ = (ln a, ln b, c).
    let f = |t: &Vector3<f64>| -lik.value(t[0].exp(), t[1].exp(), t[2]);
    let grad = |t: &Vector3<f64>| {
        let (a, b) = (t[0].exp(), t[1].exp());
        let (g, _) = lik.gradient_hessian(a, b, t[2]);
        Vector3::new(-g[0] * a, -g[1] * b, -g[2])
    };
    let mut x = Vector3::from(start);
    let mut fx = f(&x);
    let mut gx = grad(&x);
    let mut hinv = Matrix3::<f64>::identity();
    let mut iters = 0;
    for _ in 0..300 {
        iters += 1;
        if gx.amax() < 1e-5 {
            break;
        }
        let mut dir = -(hinv * gx);
        if dir.dot(&gx) >= 0.0 {
            hinv = Matrix3::identity();
            dir = -gx;
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn = x + dir * t;
            let fxn = f(&xn);
            if fxn.is_finite() && fxn <= fx + 1e-4 * t * gx.dot(&dir) {
                accepted = Some((xn, fxn));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fxn)) = accepted else { break };
        let gn = grad(&xn);
        let s = xn - x;
        let y = gn - gx;
        let sy = s.dot(&y);
        if sy > 1e-14 {
            let rho = 1.0 / sy;
            let i = Matrix3::identity();
            hinv = (i - s * y.transpose() * rho) * hinv * (i - y * s.transpose() * rho)
                + s * s.transpose() * rho;
        }
        x = xn;
        fx = fxn;
        gx = gn;
    }
    ([x[0], x[1], x[2]], -fx, iters)
}

/// Order-statistic quantile with linear interpolation between closest ranks:
/// position `h = (n − 1)·q` in the sorted sample.
///
/// `samples` need not be sorted.
pub fn empirical_quantile(samples: &[f64], q: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::domain("empirical quantile of an empty sample"));
    }
    check_open_probability(q, "quantile level")?;
    let sorted_owned;
    let sorted: &[f64] = if samples.windows(2).all(|w| w[0] <= w[1]) {
        samples
    } else {
        let mut v = samples.to_vec();
        v.sort_by(f64::total_cmp);
        sorted_owned = v;
        &sorted_owned
    };
    let n = sorted.len();
    if n == 1 {
        return Ok(sorted[0]);
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Lower and upper net-load quantiles `(d̂, d̃)` for a one-sided risk level.
pub fn quantile_pair(
    moments: ErrorMoments,
    epsilon_i: f64,
    model: &UncertaintyModel,
) -> Result<(f64, f64)> {
    check_open_probability(epsilon_i, "epsilon_i")?;
    if epsilon_i > 0.5 {
        return Err(Error::domain(format!(
            "per-constraint risk {epsilon_i} exceeds 1/2; lower and upper quantiles would cross"
        )));
    }
    model.validate()?;
    let ErrorMoments { mu, sigma } = moments;
    if sigma == 0.0 {
        return Ok((mu, mu));
    }
    let pair = match model {
        UncertaintyModel::Gaussian | UncertaintyModel::Robust { .. } => {
            let k = model.upper_factor(epsilon_i)?;
            (mu - k * sigma, mu + k * sigma)
        }
        UncertaintyModel::Versatile { a, b, c } => (
            mu + sigma * versatile_quantile(*a, *b, *c, epsilon_i),
            mu + sigma * versatile_quantile(*a, *b, *c, 1.0 - epsilon_i),
        ),
        UncertaintyModel::Empirical { samples } => (
            mu + sigma * empirical_quantile(samples, epsilon_i)?,
            mu + sigma * empirical_quantile(samples, 1.0 - epsilon_i)?,
        ),
    };
    Ok(pair)
}

fn double_factorial_odd(j: usize) -> f64 {
    // (j-1)!! for even j; (-1)!! = 1.
    let mut acc = 1.0;
    let mut m = j as i64 - 1;
    while m > 1 {
        acc *= m as f64;
        m -= 2;
    }
    acc
}

pub(crate) fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

/// `E[d^k]` for `d ~ N(μ, σ²)`; odd central moments vanish.
pub fn gaussian_raw_moment(moments: ErrorMoments, k: i32) -> Result<f64> {
    if k < 0 {
        return Err(Error::domain(format!("moment order must be >= 0, got {k}")));
    }
    Ok(raw_moment(moments.mu, moments.sigma, k as usize))
}

pub(crate) fn raw_moment(mu: f64, sigma: f64, k: usize) -> f64 {
    (0..=k)
        .step_by(2)
        .map(|j| {
            binomial(k, j) * mu.powi((k - j) as i32) * sigma.powi(j as i32) * double_factorial_odd(j)
        })
        .sum()
}

/// Standardizes raw errors; returns z-scores and the `(mean, sample sd)` moments.
pub fn standardize(errors: &[f64]) -> Result<(Vec<f64>, ErrorMoments)> {
    if errors.len() < 2 {
        return Err(Error::domain("need at least 2 samples to standardize"));
    }
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let sd = (errors.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if !(sd > 0.0) {
        return Err(Error::domain("errors have zero spread"));
    }
    let z = errors.iter().map(|x| (x - mean) / sd).collect();
    Ok((z, ErrorMoments::new(mean, sd)?))
}

/// Reads historical errors from a one-column CSV with header `error_mw`.
pub fn read_error_samples(path: &std::path::Path) -> Result<Vec<f64>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = headers
        .iter()
        .position(|h| h == "error_mw")
        .ok_or_else(|| Error::Schema {
            path: path.display().to_string(),
            line: 1,
            message: format!("missing column 'error_mw' (found: {:?})", headers),
        })?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let field = rec.get(col).unwrap_or("");
        let v: f64 = field.parse().map_err(|_| Error::Schema {
            path: path.display().to_string(),
            line,
            message: format!("'{field}' is not a number"),
        })?;
        out.push(v);
    }
    Ok(out)
}
