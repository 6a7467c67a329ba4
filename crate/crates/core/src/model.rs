//! Periodic linear delay systems and their commensurate time grids.

use faer::Mat;
use thiserror::Error;

use crate::expr::{self, Expr, ExprError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("period must be positive and finite, got {0}")]
    InvalidPeriod(f64),
    #[error("delays must be positive, finite and strictly increasing: {0}")]
    InvalidDelays(String),
    #[error("mass matrix is singular")]
    SingularMass,
    #[error("parameter error: {0}")]
    Param(String),
    #[error("delays are not commensurate with the period (no common step with denominator <= {bound})")]
    NonCommensurate { bound: u64 },
    #[error("grid hint {hint} does not divide the period and all delays")]
    HintInvalid { hint: f64 },
    #[error(transparent)]
    Expr(#[from] ExprError),
}

/// One entry of a sparse coefficient matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub row: usize,
    pub col: usize,
    pub expr: Expr,
}

/// A square matrix of expressions, stored by nonzero entries.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffMatrix {
    dim: usize,
    entries: Vec<Entry>,
}

impl CoeffMatrix {
    /// Entries that are literal zeros are dropped; duplicates are summed
    /// at evaluation time.
    pub fn new(dim: usize, entries: Vec<Entry>) -> Result<Self, ModelError> {
        for e in &entries {
            if e.row >= dim || e.col >= dim {
                return Err(ModelError::DimensionMismatch(format!(
                    "entry ({}, {}) outside a {}x{} matrix",
                    e.row, e.col, dim, dim
                )));
            }
        }
        let entries = entries.into_iter().filter(|e| !e.expr.is_zero()).collect();
        Ok(CoeffMatrix { dim, entries })
    }

    pub fn zeros(dim: usize) -> Self {
        CoeffMatrix {
            dim,
            entries: Vec::new(),
        }
    }

    /// Builds from a dense row-major table of expressions.
    pub fn from_dense(rows: Vec<Vec<Expr>>) -> Result<Self, ModelError> {
        let dim = rows.len();
        let mut entries = Vec::new();
        for (r, row) in rows.into_iter().enumerate() {
            if row.len() != dim {
                return Err(ModelError::DimensionMismatch(format!(
                    "row {} has {} entries, expected {}",
                    r,
                    row.len(),
                    dim
                )));
            }
            for (c, expr) in row.into_iter().enumerate() {
                entries.push(Entry { row: r, col: c, expr });
            }
        }
        CoeffMatrix::new(dim, entries)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn transposed(&self) -> Self {
        CoeffMatrix {
            dim: self.dim,
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    row: e.col,
                    col: e.row,
                    expr: e.expr.clone(),
                })
                .collect(),
        }
    }

    pub fn depends_on_time(&self) -> bool {
        self.entries.iter().any(|e| e.expr.depends_on_time())
    }

    /// Entry values in storage order.
    pub fn eval_values(&self, t: f64, params: &[f64], out: &mut Vec<f64>) -> Result<(), ExprError> {
        out.clear();
        for e in &self.entries {
            out.push(e.expr.eval(t, params)?);
        }
        Ok(())
    }

    pub fn eval_dense(&self, t: f64, params: &[f64]) -> Result<Mat<f64>, ExprError> {
        let mut m = Mat::<f64>::zeros(self.dim, self.dim);
        for e in &self.entries {
            m[(e.row, e.col)] += e.expr.eval(t, params)?;
        }
        Ok(m)
    }

    fn diff_param(&self, index: usize) -> Result<CoeffMatrix, ExprError> {
        let mut entries = Vec::new();
        for e in &self.entries {
            let d = e.expr.diff_param(index)?;
            if !d.is_zero() {
                entries.push(Entry {
                    row: e.row,
                    col: e.col,
                    expr: d,
                });
            }
        }
        Ok(CoeffMatrix {
            dim: self.dim,
            entries,
        })
    }
}

/// Named real parameters with current values.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn new(names: Vec<String>, values: Vec<f64>) -> Result<Self, ModelError> {
        if names.len() != values.len() {
            return Err(ModelError::Param("names and values differ in length".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if expr::RESERVED.contains(&n.as_str()) {
                return Err(ModelError::Param(format!("`{}` is a reserved name", n)));
            }
            let valid = n.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
                && n.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
            if !valid {
                return Err(ModelError::Param(format!("`{}` is not a valid identifier", n)));
            }
            if names[..i].contains(n) {
                return Err(ModelError::Param(format!("duplicate parameter `{}`", n)));
            }
        }
        Ok(ParamVector { names, values })
    }

    pub fn empty() -> Self {
        ParamVector {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Real constant sparse matrix (the mass matrix).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseReal {
    pub dim: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseReal {
    pub fn to_dense(&self) -> Mat<f64> {
        let mut m = Mat::<f64>::zeros(self.dim, self.dim);
        for &(r, c, v) in &self.entries {
            m[(r, c)] += v;
        }
        m
    }

    pub fn transposed(&self) -> Self {
        SparseReal {
            dim: self.dim,
            entries: self.entries.iter().map(|&(r, c, v)| (c, r, v)).collect(),
        }
    }
}

/// `E x'(t) = sum_j A_j(t) x(t - tau_j)` with `T`-periodic coefficients and
/// `tau_0 = 0`.
#[derive(Debug, Clone)]
pub struct PeriodicDelaySystem {
    dim: usize,
    period: f64,
    /// Delays `tau_1 < ... < tau_h`.
    delays: Vec<f64>,
    coeffs: Vec<CoeffMatrix>,
    /// `dcoeffs[p][j]` is the derivative of `A_j` in parameter `p`.
    dcoeffs: Vec<Result<Vec<CoeffMatrix>, ExprError>>,
    mass: Option<SparseReal>,
    params: ParamVector,
    discontinuities: Vec<f64>,
    /// Dual system flag: coefficients are read as `A_j(tau_j - t)`.
    reversed: bool,
}

impl PeriodicDelaySystem {
    pub fn new(
        period: f64,
        delays: Vec<f64>,
        coeffs: Vec<CoeffMatrix>,
        mass: Option<SparseReal>,
        params: ParamVector,
    ) -> Result<Self, ModelError> {
        if !(period.is_finite() && period > 0.0) {
            return Err(ModelError::InvalidPeriod(period));
        }
        if coeffs.len() != delays.len() + 1 {
            return Err(ModelError::DimensionMismatch(format!(
                "{} coefficient matrices for {} delays",
                coeffs.len(),
                delays.len()
            )));
        }
        let dim = coeffs[0].dim();
        if dim == 0 {
            return Err(ModelError::DimensionMismatch("dimension must be positive".into()));
        }
        if let Some(j) = coeffs.iter().position(|c| c.dim() != dim) {
            return Err(ModelError::DimensionMismatch(format!(
                "A{} is {}x{}, expected {}x{}",
                j,
                coeffs[j].dim(),
                coeffs[j].dim(),
                dim,
                dim
            )));
        }
        let mut prev = 0.0;
        for &tau in &delays {
            if !(tau.is_finite() && tau > prev) {
                return Err(ModelError::InvalidDelays(format!("{:?}", delays)));
            }
            prev = tau;
        }
        if let Some(m) = &mass {
            if m.dim != dim {
                return Err(ModelError::DimensionMismatch(format!(
                    "mass matrix is {}x{}, expected {}x{}",
                    m.dim, m.dim, dim, dim
                )));
            }
            if m.entries.iter().any(|&(r, c, _)| r >= dim || c >= dim) {
                return Err(ModelError::DimensionMismatch("mass entry out of range".into()));
            }
            let sv = m
                .to_dense()
                .singular_values()
                .map_err(|_| ModelError::SingularMass)?;
            let (max, min) = (sv[0], sv[sv.len() - 1]);
            if !(min > 1e-13 * max) {
                return Err(ModelError::SingularMass);
            }
        }
        let dcoeffs = (0..params.len())
            .map(|p| coeffs.iter().map(|c| c.diff_param(p)).collect())
            .collect();
        Ok(PeriodicDelaySystem {
            dim,
            period,
            delays,
            coeffs,
            dcoeffs,
            mass,
            params,
            discontinuities: Vec::new(),
            reversed: false,
        })
    }

    pub fn with_discontinuities(mut self, mut points: Vec<f64>) -> Self {
        points.sort_by(f64::total_cmp);
        self.discontinuities = points;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    /// Number of delays `h`.
    pub fn num_delays(&self) -> usize {
        self.delays.len()
    }

    /// `tau_j` for `j = 0..=h`.
    pub fn delay(&self, j: usize) -> f64 {
        if j == 0 {
            0.0
        } else {
            self.delays[j - 1]
        }
    }

    pub fn delays(&self) -> &[f64] {
        &self.delays
    }

    pub fn coeff(&self, j: usize) -> &CoeffMatrix {
        &self.coeffs[j]
    }

    pub fn coeffs(&self) -> &[CoeffMatrix] {
        &self.coeffs
    }

    /// Derivatives of every `A_j` in parameter `p`.
    pub fn coeff_param_derivatives(&self, p: usize) -> Result<&[CoeffMatrix], ExprError> {
        self.dcoeffs[p].as_deref().map_err(|e| e.clone())
    }

    pub fn mass(&self) -> Option<&SparseReal> {
        self.mass.as_ref()
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn param_values(&self) -> &[f64] {
        &self.params.values
    }

    pub fn discontinuities(&self) -> &[f64] {
        &self.discontinuities
    }

    pub fn is_reversed(&self) -> bool {
        self.reversed
    }

    /// Same system with different parameter values.
    pub fn with_param_values(&self, values: &[f64]) -> Result<Self, ModelError> {
        if values.len() != self.params.len() {
            return Err(ModelError::Param(format!(
                "expected {} parameter values, got {}",
                self.params.len(),
                values.len()
            )));
        }
        let mut s = self.clone();
        s.params.values = values.to_vec();
        Ok(s)
    }

    /// Time at which `A_j` is actually read when the system is asked for
    /// `A_j(t)`, reduced into `[0, T)`.
    pub fn coeff_time(&self, j: usize, t: f64) -> f64 {
        let t = if self.reversed { self.delay(j) - t } else { t };
        t.rem_euclid(self.period)
    }

    /// `A_j(t)` as a dense matrix.
    pub fn eval_coeff(&self, j: usize, t: f64) -> Result<Mat<f64>, ExprError> {
        self.coeffs[j].eval_dense(self.coeff_time(j, t), &self.params.values)
    }

    /// The adjoint system `E^T y' = sum_j A_j(tau_j - t)^T y(t - tau_j)`.
    /// Applying it twice returns the original system.
    pub fn dual(&self) -> Self {
        PeriodicDelaySystem {
            dim: self.dim,
            period: self.period,
            delays: self.delays.clone(),
            coeffs: self.coeffs.iter().map(CoeffMatrix::transposed).collect(),
            dcoeffs: self
                .dcoeffs
                .iter()
                .map(|r| r.as_ref().map(|v| v.iter().map(CoeffMatrix::transposed).collect()).map_err(Clone::clone))
                .collect(),
            mass: self.mass.as_ref().map(SparseReal::transposed),
            params: self.params.clone(),
            discontinuities: self.discontinuities.clone(),
            reversed: !self.reversed,
        }
    }

    /// True when no coefficient depends on time.
    pub fn is_autonomous(&self) -> bool {
        !self.coeffs.iter().any(CoeffMatrix::depends_on_time)
    }
}

/// Structural equality, used to check that the dual is an involution.
impl PartialEq for PeriodicDelaySystem {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.period == other.period
            && self.delays == other.delays
            && self.coeffs == other.coeffs
            && self.mass == other.mass
            && self.params == other.params
            && self.reversed == other.reversed
    }
}

/// Uniform grid with step `delta` such that `T = N delta` and every delay is
/// a whole number of steps.
#[derive(Debug, Clone, PartialEq)]
pub struct CommensurateGrid {
    pub delta: f64,
    /// `N`.
    pub blocks: usize,
    /// `n_j` for `j = 0..=h` (`n_0 = 0`).
    pub delay_steps: Vec<usize>,
}

impl CommensurateGrid {
    /// `n_h`, the number of steps in the longest delay.
    pub fn history_blocks(&self) -> usize {
        self.delay_steps.iter().copied().max().unwrap_or(0)
    }

    pub fn period(&self) -> f64 {
        self.blocks as f64 * self.delta
    }

    pub fn delay(&self, j: usize) -> f64 {
        self.delay_steps[j] as f64 * self.delta
    }

    /// Number of delay terms including `j = 0`.
    pub fn num_terms(&self) -> usize {
        self.delay_steps.len()
    }
}

const SNAP_TOL: f64 = 1e-9;
const DENOM_BOUND: u64 = 1_000_000;

fn snap(x: f64) -> Option<usize> {
    let r = x.round();
    if r >= 0.0 && (x - r).abs() <= SNAP_TOL * x.abs().max(1.0) {
        Some(r as usize)
    } else {
        None
    }
}

/// Smallest denominator `q <= bound` with `x q` within tolerance of an
/// integer, found along the continued-fraction convergents of `x`.
fn rational_denominator(x: f64, bound: u64) -> Option<u64> {
    let (mut h0, mut h1) = (0.0f64, 1.0f64);
    let (mut k0, mut k1) = (1.0f64, 0.0f64);
    let mut rest = x;
    for _ in 0..64 {
        let a = rest.floor();
        let (h2, k2) = (a * h1 + h0, a * k1 + k0);
        if k2 > bound as f64 {
            return None;
        }
        if (x * k2 - h2).abs() <= SNAP_TOL * x.max(1.0) {
            return Some(k2 as u64);
        }
        (h0, h1, k0, k1) = (h1, h2, k1, k2);
        let frac = rest - a;
        if frac <= 0.0 {
            return None;
        }
        rest = 1.0 / frac;
    }
    None
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Chooses the grid step. With a hint, the hint must divide the period and
/// all delays; without one, the largest common step is found by
/// rationalising `tau_j / T`.
pub fn build_grid(system: &PeriodicDelaySystem, hint: Option<f64>) -> Result<CommensurateGrid, ModelError> {
    let period = system.period();
    let grid = match hint {
        Some(delta) => {
            if !(delta.is_finite() && delta > 0.0) {
                return Err(ModelError::HintInvalid { hint: delta });
            }
            let blocks = snap(period / delta).filter(|&n| n > 0).ok_or(ModelError::HintInvalid { hint: delta })?;
            let mut steps = vec![0];
            for &tau in system.delays() {
                steps.push(snap(tau / delta).filter(|&n| n > 0).ok_or(ModelError::HintInvalid { hint: delta })?);
            }
            CommensurateGrid {
                delta: period / blocks as f64,
                blocks,
                delay_steps: steps,
            }
        }
        None => {
            let mut blocks: u64 = 1;
            for &tau in system.delays() {
                let q = rational_denominator(tau / period, DENOM_BOUND)
                    .ok_or(ModelError::NonCommensurate { bound: DENOM_BOUND })?;
                blocks = blocks / gcd(blocks, q) * q;
                if blocks > DENOM_BOUND {
                    return Err(ModelError::NonCommensurate { bound: DENOM_BOUND });
                }
            }
            let delta = period / blocks as f64;
            let mut steps = vec![0];
            for &tau in system.delays() {
                steps.push(snap(tau / delta).ok_or(ModelError::NonCommensurate { bound: DENOM_BOUND })?);
            }
            CommensurateGrid {
                delta,
                blocks: blocks as usize,
                delay_steps: steps,
            }
        }
    };
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn constant_system(period: f64, delays: Vec<f64>) -> PeriodicDelaySystem {
        let coeffs = (0..=delays.len()).map(|_| CoeffMatrix::from_dense(vec![vec![Expr::num(1.0)]]).unwrap()).collect();
        PeriodicDelaySystem::new(period, delays, coeffs, None, ParamVector::empty()).unwrap()
    }

    #[test]
    fn gcd_of_pi_multiples() {
        let g = build_grid(&constant_system(PI, vec![PI, 2.0 * PI]), None).unwrap();
        assert_eq!(g.blocks, 1);
        assert_eq!(g.delay_steps, vec![0, 1, 2]);
        assert_eq!(g.delta, PI);
        let g = build_grid(&constant_system(PI, vec![0.75 * PI]), None).unwrap();
        assert_eq!(g.blocks, 4);
        assert_eq!(g.delay_steps, vec![0, 3]);
    }

    #[test]
    fn hint_is_snapped() {
        let g = build_grid(&constant_system(1.0, vec![1.0]), Some(1.0 / 26.0)).unwrap();
        assert_eq!(g.blocks, 26);
        assert_eq!(g.delay_steps, vec![0, 26]);
        assert!(matches!(
            build_grid(&constant_system(1.0, vec![1.0]), Some(0.3)),
            Err(ModelError::HintInvalid { .. })
        ));
    }

    #[test]
    fn irrational_ratio_is_rejected() {
        assert!(matches!(
            build_grid(&constant_system(1.0, vec![2f64.sqrt()]), None),
            Err(ModelError::NonCommensurate { .. })
        ));
    }

    #[test]
    fn decimal_noise_is_absorbed() {
        let g = build_grid(&constant_system(1.0, vec![0.3333333333]), None).unwrap();
        assert_eq!(g.blocks, 3);
        assert_eq!(g.delay_steps, vec![0, 1]);
    }

    #[test]
    fn no_delays_gives_single_block() {
        let g = build_grid(&constant_system(2.0, vec![]), None).unwrap();
        assert_eq!(g.blocks, 1);
        assert_eq!(g.history_blocks(), 0);
    }

    #[test]
    fn rejects_bad_delays() {
        let coeffs = vec![CoeffMatrix::zeros(1), CoeffMatrix::zeros(1)];
        assert!(matches!(
            PeriodicDelaySystem::new(1.0, vec![-1.0], coeffs.clone(), None, ParamVector::empty()),
            Err(ModelError::InvalidDelays(_))
        ));
        assert!(matches!(
            PeriodicDelaySystem::new(0.0, vec![1.0], coeffs, None, ParamVector::empty()),
            Err(ModelError::InvalidPeriod(_))
        ));
    }
}
