//! Deterministic linear constraints from chance constraints.
//!
//! Per period the joint generator-bound and SoC-bound chance constraints each
//! split into two one-sided constraints (Bonferroni with equal risk `ε/2`
//! by default); the storage power bounds are individual constraints at `ε`.
//!
//! Row forms, with `d̂, d̃` the lower/upper net-load quantiles of the slot and
//! `e_t` the beginning-of-period state of charge:
//!
//! ```text
//! GenLower        −g − φ d̂           ≤ −G̲
//! GenUpper         g + φ d̃           ≤  Ḡ
//! ChargeLower     −b                  ≤  0
//! ChargeUpper      b − ψ d̂           ≤  P̄
//! DischargeLower  −p                  ≤  0
//! DischargeUpper   p + ψ d̃           ≤  P̄
//! SocLower        (p + ψ d̃)/η − e_t  ≤  0
//! SocUpper        e_t + (b − ψ d̂) η  ≤  Ē
//! PhiLower        −φ                  ≤  0
//! PhiUpper         φ                  ≤  1
//! ```

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::costs::StorageSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RiskPolicy {
    EqualSplit,
    Custom(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskAllocation {
    pub epsilon_total: f64,
    pub epsilons: Vec<f64>,
    pub policy: RiskPolicy,
}

/// Splits a joint risk budget `epsilon` over `n` one-sided constraints.
pub fn allocate_risk(epsilon: f64, n: usize, policy: &RiskPolicy) -> Result<RiskAllocation> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::domain(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    if n == 0 {
        return Err(Error::domain("risk allocation needs at least one constraint"));
    }
    let epsilons = match policy {
        RiskPolicy::EqualSplit => vec![epsilon / n as f64; n],
        RiskPolicy::Custom(w) => {
            if w.len() != n {
                return Err(Error::domain(format!(
                    "{} weights for {n} constraints",
                    w.len()
                )));
            }
            if w.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::domain("risk weights must be positive"));
            }
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::domain(format!("risk weights sum to {sum}, not 1")));
            }
            // Normalizing keeps Σ ε_i ≤ ε despite rounding in the weights.
            w.iter().map(|v| v / sum * epsilon).collect()
        }
    };
    Ok(RiskAllocation {
        epsilon_total: epsilon,
        epsilons,
        policy: policy.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    Le,
    Eq,
}

/// Identity of a constraint row; doubles as the name of its dual variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RowKind {
    /// `g + p − b = D` (λ).
    Balance,
    /// `e_{t+1} − e_t + p/η − b η = 0` (θ).
    SocRecursion,
    /// `φ + ψ = 1` (π).
    ReserveSplit,
    /// Terminal SoC equality.
    TerminalSoc,
    TerminalSocLower,
    TerminalSocUpper,
    GenLower,
    GenUpper,
    ChargeLower,
    ChargeUpper,
    DischargeLower,
    DischargeUpper,
    SocLower,
    SocUpper,
    PhiLower,
    PhiUpper,
    /// Rows of hand-built programs; the period field carries a row number.
    Generic,
}

impl RowKind {
    pub fn symbol(&self) -> &'static str {
        match self {
            RowKind::Balance => "lambda",
            RowKind::SocRecursion => "theta",
            RowKind::ReserveSplit => "pi",
            RowKind::TerminalSoc => "terminal",
            RowKind::TerminalSocLower => "terminal_lower",
            RowKind::TerminalSocUpper => "terminal_upper",
            RowKind::GenLower => "nu_lower",
            RowKind::GenUpper => "nu_upper",
            RowKind::ChargeLower => "alpha_lower",
            RowKind::ChargeUpper => "alpha_upper",
            RowKind::DischargeLower => "beta_lower",
            RowKind::DischargeUpper => "beta_upper",
            RowKind::SocLower => "iota_lower",
            RowKind::SocUpper => "iota_upper",
            RowKind::PhiLower => "kappa_lower",
            RowKind::PhiUpper => "kappa_upper",
            RowKind::Generic => "generic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowTag {
    pub kind: RowKind,
    pub period: Option<usize>,
    /// Risk level of the quantile embedded in this row, if any.
    pub epsilon_i: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearRow {
    pub coeffs: Vec<(usize, f64)>,
    pub sense: Sense,
    pub rhs: f64,
    pub tag: RowTag,
}

impl LinearRow {
    pub fn dot(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().map(|(j, a)| a * x[*j]).sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinearConstraintSet {
    pub n_vars: usize,
    pub rows: Vec<LinearRow>,
}

impl LinearConstraintSet {
    pub fn new(n_vars: usize) -> Self {
        LinearConstraintSet {
            n_vars,
            rows: Vec::new(),
        }
    }

    /// Adds a hand-built row tagged [`RowKind::Generic`] with a running number.
    pub fn push_generic(&mut self, coeffs: Vec<(usize, f64)>, sense: Sense, rhs: f64) {
        let period = Some(self.rows.len());
        self.rows.push(LinearRow {
            coeffs,
            sense,
            rhs,
            tag: RowTag {
                kind: RowKind::Generic,
                period,
                epsilon_i: None,
            },
        });
    }

    pub fn find(&self, kind: RowKind, period: Option<usize>) -> Option<usize> {
        self.rows
            .iter()
            .position(|r| r.tag.kind == kind && r.tag.period == period)
    }

    pub fn validate(&self) -> Result<()> {
        let mut tags = HashSet::new();
        for (i, r) in self.rows.iter().enumerate() {
            if let Some((j, _)) = r.coeffs.iter().find(|(j, _)| *j >= self.n_vars) {
                return Err(Error::Build(format!(
                    "row {i} ({:?}) references variable {j} of {}",
                    r.tag.kind, self.n_vars
                )));
            }
            if r.coeffs.iter().chain(std::iter::once(&(0, r.rhs))).any(|(_, a)| !a.is_finite()) {
                return Err(Error::Build(format!("row {i} ({:?}) has non-finite data", r.tag.kind)));
            }
            if !tags.insert((r.tag.kind, r.tag.period)) {
                return Err(Error::Build(format!(
                    "duplicate row tag {:?} at period {:?}",
                    r.tag.kind, r.tag.period
                )));
            }
        }
        Ok(())
    }
}

/// Decision quantities of the dispatch, per period. `SocEnd(t)` is the stock
/// at the end of period `t`, i.e. `e_{t+1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VarKind {
    Gen,
    Discharge,
    Charge,
    Phi,
    Psi,
    SocEnd,
}

pub const VAR_KINDS: [VarKind; 6] = [
    VarKind::Gen,
    VarKind::Discharge,
    VarKind::Charge,
    VarKind::Phi,
    VarKind::Psi,
    VarKind::SocEnd,
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Slot {
    Var(usize),
    Fixed(f64),
}

/// Which quantities are decision variables and which are pinned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayoutMode {
    /// All six quantities free per period.
    Full,
    /// Storage may arbitrage but carries no reserve: `φ = 1`, `ψ = 0`.
    NoStorageReserve,
    /// Storage absent: only `g` is free, `φ = 1`.
    NoStorage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub horizon: usize,
    pub mode: LayoutMode,
    slots: Vec<[Slot; 6]>,
    pub n_vars: usize,
}

fn kind_index(kind: VarKind) -> usize {
    VAR_KINDS.iter().position(|k| *k == kind).unwrap()
}

impl Layout {
    pub fn new(horizon: usize, mode: LayoutMode, e_init: f64) -> Self {
        let mut n = 0;
        let mut next = || {
            n += 1;
            Slot::Var(n - 1)
        };
        let mut slots = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let row = match mode {
                LayoutMode::Full => [next(), next(), next(), next(), next(), next()],
                LayoutMode::NoStorageReserve => {
                    let g = next();
                    let p = next();
                    let b = next();
                    let e = next();
                    [g, p, b, Slot::Fixed(1.0), Slot::Fixed(0.0), e]
                }
                LayoutMode::NoStorage => [
                    next(),
                    Slot::Fixed(0.0),
                    Slot::Fixed(0.0),
                    Slot::Fixed(1.0),
                    Slot::Fixed(0.0),
                    Slot::Fixed(e_init),
                ],
            };
            slots.push(row);
        }
        Layout {
            horizon,
            mode,
            slots,
            n_vars: n,
        }
    }

    pub fn slot(&self, kind: VarKind, t: usize) -> Slot {
        self.slots[t][kind_index(kind)]
    }

    pub fn index(&self, kind: VarKind, t: usize) -> Option<usize> {
        match self.slot(kind, t) {
            Slot::Var(i) => Some(i),
            Slot::Fixed(_) => None,
        }
    }

    /// Value of a quantity under primal vector `x`.
    pub fn value(&self, x: &[f64], kind: VarKind, t: usize) -> f64 {
        match self.slot(kind, t) {
            Slot::Var(i) => x[i],
            Slot::Fixed(v) => v,
        }
    }

    /// Beginning-of-period stock `e_t` (period 0 uses the initial SoC).
    pub fn soc_start(&self, x: &[f64], t: usize, e_init: f64) -> f64 {
        if t == 0 {
            e_init
        } else {
            self.value(x, VarKind::SocEnd, t - 1)
        }
    }
}

/// Affine expression over layout quantities; pinned quantities fold into the
/// constant.
#[derive(Debug, Default, Clone)]
pub struct Expr {
    terms: Vec<(usize, f64)>,
    constant: f64,
}

impl Expr {
    pub fn new() -> Self {
        Expr::default()
    }

    pub fn add(mut self, layout: &Layout, kind: VarKind, t: usize, coef: f64) -> Self {
        match layout.slot(kind, t) {
            Slot::Var(i) => {
                if let Some(e) = self.terms.iter_mut().find(|(j, _)| *j == i) {
                    e.1 += coef;
                } else {
                    self.terms.push((i, coef));
                }
            }
            Slot::Fixed(v) => self.constant += coef * v,
        }
        self
    }

    /// Adds `coef · e_t` where `e_0` is the fixed initial stock.
    pub fn add_soc_start(self, layout: &Layout, t: usize, e_init: f64, coef: f64) -> Self {
        if t == 0 {
            self.constant_term(coef * e_init)
        } else {
            self.add(layout, VarKind::SocEnd, t - 1, coef)
        }
    }

    pub fn constant_term(mut self, c: f64) -> Self {
        self.constant += c;
        self
    }
}

/// Appends `expr (sense) rhs`. Rows without free variables are checked for
/// feasibility and dropped.
pub fn push_row(
    set: &mut LinearConstraintSet,
    expr: Expr,
    sense: Sense,
    rhs: f64,
    tag: RowTag,
) -> Result<()> {
    let terms: Vec<(usize, f64)> = expr.terms.into_iter().filter(|(_, a)| *a != 0.0).collect();
    let rhs = rhs - expr.constant;
    if terms.is_empty() {
        let tol = 1e-9 * rhs.abs().max(1.0);
        let ok = match sense {
            Sense::Le => 0.0 <= rhs + tol,
            Sense::Eq => rhs.abs() <= tol,
        };
        if !ok {
            return Err(Error::Build(format!(
                "infeasible box: constant row {:?} at period {:?} requires 0 {} {rhs}",
                tag.kind,
                tag.period,
                if sense == Sense::Le { "<=" } else { "=" }
            )));
        }
        return Ok(());
    }
    set.rows.push(LinearRow {
        coeffs: terms,
        sense,
        rhs,
        tag,
    });
    Ok(())
}

/// Lower/upper quantile pair together with the risk level it was computed at.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantileSlot {
    pub lower: f64,
    pub upper: f64,
    /// Risk level behind `lower`.
    pub eps_lower: f64,
    /// Risk level behind `upper`.
    pub eps_upper: f64,
}

/// Quantiles for the three constraint families of one period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeriodQuantiles {
    pub gen: QuantileSlot,
    pub power: QuantileSlot,
    pub soc: QuantileSlot,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenBounds {
    pub g_min: f64,
    pub g_max: f64,
}

/// Emits the deterministic generator, storage-power, SoC and reserve-box rows
/// for every period.
pub fn build_deterministic_constraints(
    layout: &Layout,
    gen: GenBounds,
    storage: &StorageSpec,
    quantiles: &[Option<PeriodQuantiles>],
    set: &mut LinearConstraintSet,
) -> Result<()> {
    let t_max = layout.horizon;
    for t in 0..t_max {
        let q = quantiles
            .get(t)
            .copied()
            .flatten()
            .ok_or_else(|| Error::Build(format!("missing quantiles for period {t}")))?;
        let tag = |kind, eps: Option<f64>| RowTag {
            kind,
            period: Some(t),
            epsilon_i: eps,
        };
        use VarKind::*;
        let l = layout;
        push_row(
            set,
            Expr::new().add(l, Gen, t, -1.0).add(l, Phi, t, -q.gen.lower),
            Sense::Le,
            -gen.g_min,
            tag(RowKind::GenLower, Some(q.gen.eps_lower)),
        )?;
        push_row(
            set,
            Expr::new().add(l, Gen, t, 1.0).add(l, Phi, t, q.gen.upper),
            Sense::Le,
            gen.g_max,
            tag(RowKind::GenUpper, Some(q.gen.eps_upper)),
        )?;
        if layout.mode == LayoutMode::NoStorage {
            continue;
        }
        let eta = storage.eta;
        push_row(
            set,
            Expr::new().add(l, Charge, t, -1.0),
            Sense::Le,
            0.0,
            tag(RowKind::ChargeLower, None),
        )?;
        push_row(
            set,
            Expr::new().add(l, Charge, t, 1.0).add(l, Psi, t, -q.power.lower),
            Sense::Le,
            storage.p_max,
            tag(RowKind::ChargeUpper, Some(q.power.eps_lower)),
        )?;
        push_row(
            set,
            Expr::new().add(l, Discharge, t, -1.0),
            Sense::Le,
            0.0,
            tag(RowKind::DischargeLower, None),
        )?;
        push_row(
            set,
            Expr::new().add(l, Discharge, t, 1.0).add(l, Psi, t, q.power.upper),
            Sense::Le,
            storage.p_max,
            tag(RowKind::DischargeUpper, Some(q.power.eps_upper)),
        )?;
        push_row(
            set,
            Expr::new()
                .add(l, Discharge, t, 1.0 / eta)
                .add(l, Psi, t, q.soc.upper / eta)
                .add_soc_start(l, t, storage.e_init, -1.0),
            Sense::Le,
            0.0,
            tag(RowKind::SocLower, Some(q.soc.eps_upper)),
        )?;
        push_row(
            set,
            Expr::new()
                .add_soc_start(l, t, storage.e_init, 1.0)
                .add(l, Charge, t, eta)
                .add(l, Psi, t, -q.soc.lower * eta),
            Sense::Le,
            storage.e_max,
            tag(RowKind::SocUpper, Some(q.soc.eps_lower)),
        )?;
        push_row(
            set,
            Expr::new().add(l, Phi, t, -1.0),
            Sense::Le,
            0.0,
            tag(RowKind::PhiLower, None),
        )?;
        push_row(
            set,
            Expr::new().add(l, Phi, t, 1.0),
            Sense::Le,
            1.0,
            tag(RowKind::PhiUpper, None),
        )?;
    }
    Ok(())
}
