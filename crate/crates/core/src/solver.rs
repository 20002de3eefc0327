//! Dense primal-dual interior-point solver for smooth convex programs with
//! linear constraints.
//!
//! Problem form: minimize `f(x)` subject to `A x = b` and `C x ≤ d`.
//! Lagrangian `f(x) + yᵀ(A x − b) + zᵀ(C x − d)` with `z ≥ 0`, so
//! stationarity reads `∇f + Aᵀ y + Cᵀ z = 0`. Equality duals `y` are free in
//! sign; inequality duals `z` are nonnegative.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reformulation::{LinearConstraintSet, Sense};

pub trait Objective: Send + Sync {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64], out: &mut [f64]);
    /// Writes the (symmetric) Hessian into `out`, which arrives zeroed.
    fn hessian(&self, x: &[f64], out: &mut DMatrix<f64>);
    /// Polynomial degree; 2 or lower means the Hessian is constant.
    fn max_degree(&self) -> usize;
}

/// `½ xᵀ Q x + cᵀ x + c0`.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub c0: f64,
}

impl QuadraticObjective {
    pub fn linear(c: Vec<f64>) -> Self {
        let n = c.len();
        QuadraticObjective {
            q: DMatrix::zeros(n, n),
            c: DVector::from_vec(c),
            c0: 0.0,
        }
    }
}

impl Objective for QuadraticObjective {
    fn value(&self, x: &[f64]) -> f64 {
        let xv = DVector::from_column_slice(x);
        0.5 * xv.dot(&(&self.q * &xv)) + self.c.dot(&xv) + self.c0
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let xv = DVector::from_column_slice(x);
        let g = &self.q * &xv + &self.c;
        out.copy_from_slice(g.as_slice());
    }

    fn hessian(&self, _x: &[f64], out: &mut DMatrix<f64>) {
        out.copy_from(&self.q);
    }

    fn max_degree(&self) -> usize {
        if self.q.iter().any(|v| *v != 0.0) {
            2
        } else {
            1
        }
    }
}

pub struct ConvexProgram {
    pub n_vars: usize,
    pub objective: Box<dyn Objective>,
    pub constraints: LinearConstraintSet,
    /// Optional starting point; zeros otherwise.
    pub x0: Option<Vec<f64>>,
}

impl ConvexProgram {
    pub fn new(objective: Box<dyn Objective>, constraints: LinearConstraintSet) -> Self {
        ConvexProgram {
            n_vars: constraints.n_vars,
            objective,
            constraints,
            x0: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterLimit,
}

/// Sup-norm KKT residuals.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.complementarity)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveResult {
    pub x: Vec<f64>,
    /// One dual per constraint row, in row order.
    pub duals: Vec<f64>,
    pub status: SolveStatus,
    pub residuals: Residuals,
    pub iterations: usize,
    pub objective: f64,
    /// Some inequality has both slack and dual below `√tol`.
    pub degenerate: bool,
}

impl SolveResult {
    pub fn equality_duals<'a>(&'a self, set: &'a LinearConstraintSet) -> impl Iterator<Item = f64> + 'a {
        set.rows
            .iter()
            .zip(&self.duals)
            .filter(|(r, _)| r.sense == Sense::Eq)
            .map(|(_, y)| *y)
    }

    pub fn inequality_duals<'a>(&'a self, set: &'a LinearConstraintSet) -> impl Iterator<Item = f64> + 'a {
        set.rows
            .iter()
            .zip(&self.duals)
            .filter(|(r, _)| r.sense == Sense::Le)
            .map(|(_, z)| *z)
    }
}

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_ITER_CAP: usize = 200;

struct Split {
    a: DMatrix<f64>,
    b: DVector<f64>,
    c: DMatrix<f64>,
    d: DVector<f64>,
    eq_rows: Vec<usize>,
    in_rows: Vec<usize>,
}

fn split(set: &LinearConstraintSet) -> Split {
    let n = set.n_vars;
    let eq_rows: Vec<usize> = (0..set.rows.len()).filter(|i| set.rows[*i].sense == Sense::Eq).collect();
    let in_rows: Vec<usize> = (0..set.rows.len()).filter(|i| set.rows[*i].sense == Sense::Le).collect();
    let fill = |rows: &[usize]| {
        let mut m = DMatrix::zeros(rows.len(), n);
        let mut r = DVector::zeros(rows.len());
        for (k, &i) in rows.iter().enumerate() {
            for &(j, v) in &set.rows[i].coeffs {
                m[(k, j)] += v;
            }
            r[k] = set.rows[i].rhs;
        }
        (m, r)
    };
    let (a, b) = fill(&eq_rows);
    let (c, d) = fill(&in_rows);
    Split { a, b, c, d, eq_rows, in_rows }
}

struct Iterate {
    x: DVector<f64>,
    y: DVector<f64>,
    z: DVector<f64>,
    s: DVector<f64>,
}

struct Res {
    rd: DVector<f64>,
    rpe: DVector<f64>,
    rpi: DVector<f64>,
}

fn residual_vectors(p: &Split, obj: &dyn Objective, it: &Iterate) -> Res {
    let mut g = vec![0.0; it.x.len()];
    obj.gradient(it.x.as_slice(), &mut g);
    let rd = DVector::from_vec(g) + p.a.transpose() * &it.y + p.c.transpose() * &it.z;
    let rpe = &p.a * &it.x - &p.b;
    let rpi = &p.c * &it.x + &it.s - &p.d;
    Res { rd, rpe, rpi }
}

fn sup(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Residuals evaluated at the true slacks `d − Cx`.
fn true_residuals(p: &Split, obj: &dyn Objective, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>) -> Residuals {
    let mut g = vec![0.0; x.len()];
    obj.gradient(x.as_slice(), &mut g);
    let rd = DVector::from_vec(g) + p.a.transpose() * y + p.c.transpose() * z;
    let rpe = &p.a * x - &p.b;
    let slack = &p.d - &p.c * x;
    let primal = sup(&rpe).max(slack.iter().fold(0.0_f64, |m, s| m.max(-s)));
    let comp = slack
        .iter()
        .zip(z.iter())
        .fold(0.0_f64, |m, (s, zi)| m.max((s * zi).abs()));
    Residuals {
        stationarity: sup(&rd),
        primal,
        complementarity: comp,
    }
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, d)| **d < 0.0)
        .map(|(x, d)| -x / d)
        .fold(1.0_f64, f64::min)
}

/// Solves the program with a Mehrotra predictor-corrector interior-point
/// method. Polynomial objectives above degree 2 get a backtracking line
/// search on the KKT residual norm.
pub fn solve_convex(program: &ConvexProgram, tol: f64, iter_cap: usize) -> Result<SolveResult> {
    if !(tol > 0.0) {
        return Err(Error::domain(format!("tolerance must be positive, got {tol}")));
    }
    if program.n_vars != program.constraints.n_vars {
        return Err(Error::domain(format!(
            "program has {} variables but constraints declare {}",
            program.n_vars, program.constraints.n_vars
        )));
    }
    program.constraints.validate()?;
    let n = program.n_vars;
    let p = split(&program.constraints);
    let obj = program.objective.as_ref();
    let (me, mi) = (p.eq_rows.len(), p.in_rows.len());
    let nonlinear = obj.max_degree() > 2;

    let x0 = match &program.x0 {
        Some(v) if v.len() == n => DVector::from_column_slice(v),
        Some(v) => {
            return Err(Error::domain(format!(
                "starting point has {} entries, expected {n}",
                v.len()
            )))
        }
        None => DVector::zeros(n),
    };
    let s0 = (&p.d - &p.c * &x0).map(|v| v.max(1.0));
    let mut it = Iterate {
        x: x0,
        y: DVector::zeros(me),
        z: DVector::from_element(mi, 1.0),
        s: s0,
    };

    let mut hess = DMatrix::zeros(n, n);
    let mut best: Option<(f64, DVector<f64>, DVector<f64>, DVector<f64>)> = None;
    let mut status = SolveStatus::IterLimit;
    let mut iterations = 0;
    let mut stall = 0;

    for k in 0..iter_cap {
        iterations = k + 1;
        let r = residual_vectors(&p, obj, &it);
        let mu = if mi > 0 { it.s.dot(&it.z) / mi as f64 } else { 0.0 };
        let tr = true_residuals(&p, obj, &it.x, &it.y, &it.z);
        let score = tr.max();
        if best.as_ref().map_or(true, |b| score < b.0) {
            best = Some((score, it.x.clone(), it.y.clone(), it.z.clone()));
            stall = 0;
        } else {
            stall += 1;
        }
        if score <= tol {
            status = SolveStatus::Optimal;
            break;
        }
        let xnorm = it.x.amax();
        if xnorm > 1e12 {
            status = SolveStatus::Unbounded;
            break;
        }
        let dual_norm = it.y.amax().max(if mi > 0 { it.z.amax() } else { 0.0 });
        if dual_norm > 1e12 && tr.primal > tol {
            status = SolveStatus::Infeasible;
            break;
        }
        if stall > 40 {
            break;
        }

        // Reduced KKT matrix [[H + Cᵀ W C, Aᵀ], [A, −δI]].
        hess.fill(0.0);
        obj.hessian(it.x.as_slice(), &mut hess);
        let w = it.z.component_div(&it.s);
        let mut cw = p.c.clone();
        for (i, mut row) in cw.row_iter_mut().enumerate() {
            row *= w[i];
        }
        let mut k11 = &hess + p.c.transpose() * &cw;
        let diag_scale = (0..n).fold(1.0_f64, |m, i| m.max(hess[(i, i)].abs()));
        for i in 0..n {
            k11[(i, i)] += 1e-13 * diag_scale;
        }
        let dim = n + me;
        let mut kkt = DMatrix::zeros(dim, dim);
        kkt.view_mut((0, 0), (n, n)).copy_from(&k11);
        kkt.view_mut((0, n), (n, me)).copy_from(&p.a.transpose());
        kkt.view_mut((n, 0), (me, n)).copy_from(&p.a);
        for i in 0..me {
            kkt[(n + i, n + i)] = -1e-14 * diag_scale;
        }
        let lu = kkt.clone().lu();

        let solve_dir = |rc: &DVector<f64>| -> Option<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>)> {
            // rhs1 = −r_d + Cᵀ S⁻¹ (r_c − Z r_pi)
            let t = (rc - it.z.component_mul(&r.rpi)).component_div(&it.s);
            let rhs1 = -&r.rd + p.c.transpose() * t;
            let mut rhs = DVector::zeros(dim);
            rhs.rows_mut(0, n).copy_from(&rhs1);
            rhs.rows_mut(n, me).copy_from(&(-&r.rpe));
            let mut sol = lu.solve(&rhs)?;
            // One step of iterative refinement.
            let corr = lu.solve(&(&rhs - &kkt * &sol))?;
            sol += corr;
            if sol.iter().any(|v| !v.is_finite()) {
                return None;
            }
            let dx = sol.rows(0, n).into_owned();
            let dy = sol.rows(n, me).into_owned();
            let ds = -&r.rpi - &p.c * &dx;
            let dz = (-rc - it.z.component_mul(&ds)).component_div(&it.s);
            Some((dx, dy, dz, ds))
        };

        // Predictor.
        let rc_aff = it.s.component_mul(&it.z);
        let Some((_, _, dz_a, ds_a)) = solve_dir(&rc_aff) else {
            break;
        };
        let sigma = if mi > 0 {
            let a_aff = max_step(&it.s, &ds_a).min(max_step(&it.z, &dz_a));
            let mu_aff = (&it.s + &ds_a * a_aff).dot(&(&it.z + &dz_a * a_aff)) / mi as f64;
            (mu_aff / mu).powi(3).clamp(0.0, 1.0)
        } else {
            0.0
        };
        // Corrector.
        let rc = &rc_aff + ds_a.component_mul(&dz_a) - DVector::from_element(mi, sigma * mu);
        let Some((dx, dy, dz, ds)) = solve_dir(&rc) else {
            break;
        };
        let mut alpha = if mi > 0 {
            (0.995 * max_step(&it.s, &ds).min(max_step(&it.z, &dz))).min(1.0)
        } else {
            1.0
        };

        // Near the solution full Newton steps converge quadratically and the
        // merit comparison is dominated by rounding, so skip the search there.
        if nonlinear && score > 1e-4 {
            let alpha0 = alpha;
            let mut accepted = false;
            let target = sigma * mu;
            let merit = |x: &Iterate| {
                let r = residual_vectors(&p, obj, x);
                let comp = x.s.component_mul(&x.z).add_scalar(-target);
                r.rd.norm_squared() + r.rpe.norm_squared() + r.rpi.norm_squared() + comp.norm_squared()
            };
            let m0 = merit(&it);
            for _ in 0..30 {
                let trial = Iterate {
                    x: &it.x + &dx * alpha,
                    y: &it.y + &dy * alpha,
                    z: &it.z + &dz * alpha,
                    s: &it.s + &ds * alpha,
                };
                if merit(&trial) <= (1.0 - 1e-4 * alpha) * m0 {
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                alpha = alpha0;
            }
        }

        it.x += &dx * alpha;
        it.y += &dy * alpha;
        it.z += &dz * alpha;
        it.s += &ds * alpha;
    }

    let (_, x, y, z) = if status == SolveStatus::Optimal {
        (0.0, it.x.clone(), it.y.clone(), it.z.clone())
    } else {
        best.unwrap_or((f64::INFINITY, it.x.clone(), it.y.clone(), it.z.clone()))
    };
    let residuals = true_residuals(&p, obj, &x, &y, &z);
    if status == SolveStatus::IterLimit && residuals.primal > tol.sqrt() {
        let dual_norm = y.amax().max(if mi > 0 { z.amax() } else { 0.0 });
        if dual_norm > 1e6 {
            status = SolveStatus::Infeasible;
        }
    }
    let mut duals = vec![0.0; program.constraints.rows.len()];
    for (k, &i) in p.eq_rows.iter().enumerate() {
        duals[i] = y[k];
    }
    for (k, &i) in p.in_rows.iter().enumerate() {
        duals[i] = z[k];
    }
    let slack = &p.d - &p.c * &x;
    let rt = tol.sqrt();
    let degenerate = slack.iter().zip(z.iter()).any(|(s, zi)| s.abs() <= rt && *zi <= rt);
    Ok(SolveResult {
        objective: obj.value(x.as_slice()),
        x: x.as_slice().to_vec(),
        duals,
        status,
        residuals,
        iterations,
        degenerate,
    })
}

/// Independent KKT audit computed row by row from the constraint list.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KktReport {
    /// `|∂f/∂x_j + Σ_rows dual·a_rj|` per variable.
    pub stationarity: Vec<f64>,
    /// Per row: equality violation, or positive part of `a·x − rhs`.
    pub primal: Vec<f64>,
    /// Per inequality row `|dual · (rhs − a·x)|`, zero for equalities.
    pub complementarity: Vec<f64>,
    /// Most negative inequality dual (0 if none negative).
    pub dual_infeasibility: f64,
    pub max: Residuals,
}

pub fn verify_kkt(program: &ConvexProgram, result: &SolveResult) -> Result<KktReport> {
    let set = &program.constraints;
    if result.x.len() != program.n_vars || result.duals.len() != set.rows.len() {
        return Err(Error::domain(format!(
            "result has {} primal and {} dual entries; program has {} variables and {} rows",
            result.x.len(),
            result.duals.len(),
            program.n_vars,
            set.rows.len()
        )));
    }
    let x = &result.x;
    let mut stat = vec![0.0; program.n_vars];
    program.objective.gradient(x, &mut stat);
    let mut primal = Vec::with_capacity(set.rows.len());
    let mut comp = Vec::with_capacity(set.rows.len());
    let mut dual_inf = 0.0_f64;
    for (row, &dual) in set.rows.iter().zip(&result.duals) {
        for &(j, a) in &row.coeffs {
            stat[j] += dual * a;
        }
        let lhs = row.dot(x);
        match row.sense {
            Sense::Eq => {
                primal.push((lhs - row.rhs).abs());
                comp.push(0.0);
            }
            Sense::Le => {
                primal.push((lhs - row.rhs).max(0.0));
                comp.push((dual * (row.rhs - lhs)).abs());
                dual_inf = dual_inf.min(dual);
            }
        }
    }
    for v in &mut stat {
        *v = v.abs();
    }
    let m = |v: &[f64]| v.iter().fold(0.0_f64, |a, b| a.max(*b));
    let max = Residuals {
        stationarity: m(&stat),
        primal: m(&primal),
        complementarity: m(&comp),
    };
    Ok(KktReport {
        stationarity: stat,
        primal,
        complementarity: comp,
        dual_infeasibility: -dual_inf,
        max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_1d(q: f64, c: f64) -> Box<dyn Objective> {
        Box::new(QuadraticObjective {
            q: DMatrix::from_element(1, 1, q),
            c: DVector::from_element(1, c),
            c0: 0.0,
        })
    }

    #[test]
    fn bound_constrained_quadratic() {
        // min x² s.t. x ≥ 1, i.e. −x ≤ −1.
        let mut set = LinearConstraintSet::new(1);
        set.push_generic(vec![(0, -1.0)], Sense::Le, -1.0);
        let prog = ConvexProgram::new(quad_1d(2.0, 0.0), set);
        let r = solve_convex(&prog, DEFAULT_TOL, DEFAULT_ITER_CAP).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        assert!((r.x[0] - 1.0).abs() < 1e-8);
        assert!((r.duals[0] - 2.0).abs() < 1e-7);
        assert!(r.residuals.max() <= DEFAULT_TOL);
    }

    #[test]
    fn equality_dual_sign_convention() {
        // min (x−1)² s.t. x = 3: 2(x−1) + y = 0 ⇒ y = −4.
        let mut set = LinearConstraintSet::new(1);
        set.push_generic(vec![(0, 1.0)], Sense::Eq, 3.0);
        let prog = ConvexProgram::new(quad_1d(2.0, -2.0), set);
        let r = solve_convex(&prog, DEFAULT_TOL, DEFAULT_ITER_CAP).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        assert!((r.x[0] - 3.0).abs() < 1e-9);
        assert!((r.duals[0] + 4.0).abs() < 1e-7);
    }

    #[test]
    fn triangle_lp_matches_vertex_enumeration() {
        let vertices = [(0.0, 0.0), (4.0, 0.0), (1.0, 3.0)];
        // Edges as a·x ≤ b, oriented to contain the centroid.
        let mut set = LinearConstraintSet::new(2);
        let centroid = (5.0 / 3.0, 1.0);
        for i in 0..3 {
            let (p, q) = (vertices[i], vertices[(i + 1) % 3]);
            let (mut a0, mut a1) = (q.1 - p.1, p.0 - q.0);
            let mut b = a0 * p.0 + a1 * p.1;
            if a0 * centroid.0 + a1 * centroid.1 > b {
                a0 = -a0;
                a1 = -a1;
                b = -b;
            }
            set.push_generic(vec![(0, a0), (1, a1)], Sense::Le, b);
        }
        for c in [(1.0, 1.0), (-1.0, -2.0), (1.0, -3.0), (-2.0, 1.0)] {
            let prog = ConvexProgram::new(Box::new(QuadraticObjective::linear(vec![c.0, c.1])), set.clone());
            let r = solve_convex(&prog, DEFAULT_TOL, DEFAULT_ITER_CAP).unwrap();
            let best = vertices
                .iter()
                .map(|v| c.0 * v.0 + c.1 * v.1)
                .fold(f64::INFINITY, f64::min);
            assert_eq!(r.status, SolveStatus::Optimal);
            assert!((r.objective - best).abs() < 1e-6, "{c:?}: {} vs {best}", r.objective);
        }
    }

    #[test]
    fn infeasible_and_unbounded_are_reported() {
        let mut set = LinearConstraintSet::new(1);
        set.push_generic(vec![(0, 1.0)], Sense::Le, 1.0);
        set.push_generic(vec![(0, -1.0)], Sense::Le, -2.0);
        let prog = ConvexProgram::new(quad_1d(2.0, 0.0), set);
        let r = solve_convex(&prog, DEFAULT_TOL, DEFAULT_ITER_CAP).unwrap();
        assert_eq!(r.status, SolveStatus::Infeasible);

        let mut set = LinearConstraintSet::new(1);
        set.push_generic(vec![(0, 1.0)], Sense::Le, 1.0);
        let prog = ConvexProgram::new(Box::new(QuadraticObjective::linear(vec![1.0])), set);
        let r = solve_convex(&prog, DEFAULT_TOL, DEFAULT_ITER_CAP).unwrap();
        assert_eq!(r.status, SolveStatus::Unbounded);
    }

    struct Quartic;
    impl Objective for Quartic {
        fn value(&self, x: &[f64]) -> f64 {
            x[0].powi(4) + x[1].powi(4) + x[0] * x[0]
        }
        fn gradient(&self, x: &[f64], out: &mut [f64]) {
            out[0] = 4.0 * x[0].powi(3) + 2.0 * x[0];
            out[1] = 4.0 * x[1].powi(3);
        }
        fn hessian(&self, x: &[f64], out: &mut DMatrix<f64>) {
            out[(0, 0)] = 12.0 * x[0] * x[0] + 2.0;
            out[(1, 1)] = 12.0 * x[1] * x[1];
        }
        fn max_degree(&self) -> usize {
            4
        }
    }

    #[test]
    fn quartic_with_equality() {
        // min x⁴ + y⁴ + x² s.t. x + y = 2.
        let mut set = LinearConstraintSet::new(2);
        set.push_generic(vec![(0, 1.0), (1, 1.0)], Sense::Eq, 2.0);
        set.push_generic(vec![(0, -1.0)], Sense::Le, 0.0);
        let prog = ConvexProgram::new(Box::new(Quartic), set);
        let r = solve_convex(&prog, DEFAULT_TOL, DEFAULT_ITER_CAP).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        let (x, y) = (r.x[0], r.x[1]);
        assert!((4.0 * x.powi(3) + 2.0 * x - 4.0 * y.powi(3)).abs() < 1e-6);
        assert!((x + y - 2.0).abs() < 1e-9);
    }

    #[test]
    fn verify_kkt_agrees_and_detects_perturbation() {
        let mut set = LinearConstraintSet::new(2);
        set.push_generic(vec![(0, 1.0), (1, 1.0)], Sense::Eq, 1.0);
        set.push_generic(vec![(0, -1.0)], Sense::Le, -0.8);
        let obj = QuadraticObjective {
            q: DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 2.0])),
            c: DVector::zeros(2),
            c0: 0.0,
        };
        let prog = ConvexProgram::new(Box::new(obj), set);
        let mut r = solve_convex(&prog, DEFAULT_TOL, DEFAULT_ITER_CAP).unwrap();
        let rep = verify_kkt(&prog, &r).unwrap();
        assert!(rep.max.max() <= 10.0 * DEFAULT_TOL);
        r.duals[1] += 1.0;
        let rep = verify_kkt(&prog, &r).unwrap();
        assert!((rep.stationarity[0] - 1.0).abs() < 1e-6);
        assert!(rep.stationarity[1] < 1e-6);
        r.duals.pop();
        assert!(verify_kkt(&prog, &r).is_err());
    }

    #[test]
    fn interior_optimum_has_zero_duals() {
        let mut set = LinearConstraintSet::new(1);
        set.push_generic(vec![(0, 1.0)], Sense::Le, 10.0);
        let prog = ConvexProgram::new(quad_1d(2.0, -2.0), set);
        let mut r = solve_convex(&prog, DEFAULT_TOL, DEFAULT_ITER_CAP).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-8);
        r.duals[0] = 0.0;
        r.x[0] = 1.0;
        let rep = verify_kkt(&prog, &r).unwrap();
        assert_eq!(rep.max.max(), 0.0);
    }

    #[test]
    fn solves_are_reproducible() {
        let mut set = LinearConstraintSet::new(2);
        set.push_generic(vec![(0, 1.0), (1, 2.0)], Sense::Le, 4.0);
        set.push_generic(vec![(0, -1.0)], Sense::Le, 0.0);
        set.push_generic(vec![(1, -1.0)], Sense::Le, 0.0);
        let mk = || {
            ConvexProgram::new(
                Box::new(QuadraticObjective {
                    q: DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
                    c: DVector::from_vec(vec![-4.0, -6.0]),
                    c0: 0.0,
                }),
                set.clone(),
            )
        };
        let a = solve_convex(&mk(), DEFAULT_TOL, DEFAULT_ITER_CAP).unwrap();
        let b = solve_convex(&mk(), DEFAULT_TOL, DEFAULT_ITER_CAP).unwrap();
        assert_eq!(a.x, b.x);
        // Strong duality for a QP: f(x) − dual objective.
        let z: Vec<f64> = a.duals.clone();
        let x = &a.x;
        let qx = [2.0 * x[0] + 0.5 * x[1], 0.5 * x[0] + x[1]];
        let fx = 0.5 * (x[0] * qx[0] + x[1] * qx[1]) - 4.0 * x[0] - 6.0 * x[1];
        let dual_obj = fx + z[0] * (x[0] + 2.0 * x[1] - 4.0) + z[1] * (-x[0]) + z[2] * (-x[1]);
        assert!((fx - dual_obj).abs() <= 1e-7 * (1.0 + fx.abs()));
    }
}
