//! Parameter derivatives of simple Floquet multipliers.

use crate::charfun::CharEvalContext;
use crate::error::{FloquetError, Result};
use crate::linalg::{dotc, C64};
use crate::solve::{correct, left_eigenvector, CorrectorOptions, FloquetPair, Forward, LeftOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct GradientResult {
    pub mu: C64,
    /// `d mu / d K_p` for every parameter of the system.
    pub dmu_dk: Vec<C64>,
    /// `u^* q_mu(1) - u^* v_N`.
    pub denominator: C64,
    /// Set when the denominator is tiny relative to `u^* q_mu(1)`, i.e. the
    /// multiplier is close to defective.
    pub near_defective: bool,
    /// `||M(conj mu) u||` of the left vector used.
    pub left_residual: f64,
}

/// Gradient of `pair.mu` with respect to all parameters, using `pair.u`
/// when present and computing a left vector otherwise.
pub fn gradient(ctx: &CharEvalContext, pair: &FloquetPair, left: &LeftOptions) -> Result<GradientResult> {
    let (u, left_residual) = match (&pair.u, pair.residual_left) {
        (Some(u), Some(r)) => (u.clone(), r),
        _ => left_eigenvector(ctx, pair.mu, left)?,
    };
    gradient_with_left(ctx, pair.mu, &pair.v, &u, left_residual)
}

/// Gradient from explicit right and left vectors. The result does not depend
/// on their scaling.
pub fn gradient_with_left(
    ctx: &CharEvalContext,
    mu: C64,
    v: &[C64],
    u: &[C64],
    left_residual: f64,
) -> Result<GradientResult> {
    if u.len() != v.len() {
        return Err(FloquetError::InvalidInput("left and right vectors differ in length".into()));
    }
    let ing = ctx.param_ingredients(mu, v)?;
    let uq = dotc(u, &ing.q_mu);
    let denominator = uq - dotc(u, &ing.v_last);
    let near_defective = denominator.norm() < 1e-8 * uq.norm();
    let dmu_dk = ing.q_params.iter().map(|qk| -dotc(u, qk) / denominator).collect();
    Ok(GradientResult {
        mu,
        dmu_dk,
        denominator,
        near_defective,
        left_residual,
    })
}

/// Residual tolerance per unknown used for finite-difference roots, unless
/// the caller sets one.
pub const FD_TOLERANCE: f64 = 1e-14;

/// Central finite differences of `mu(K)`, each side re-converged by the corrector
/// from `pair`. Returns the per-parameter difference quotients.
pub fn finite_difference_gradient(
    ctx: &CharEvalContext,
    pair: &FloquetPair,
    h_rel: f64,
    corrector: &CorrectorOptions,
) -> Result<Vec<C64>> {
    let sys = ctx.system();
    let k0 = sys.param_values().to_vec();
    // the difference quotient amplifies root errors by 1/h
    let mut corrector = corrector.clone();
    if corrector.tol.is_none() {
        corrector.tol = Some(FD_TOLERANCE * ctx.size() as f64);
    }
    let corrector = &corrector;
    let mut out = Vec::with_capacity(k0.len());
    for p in 0..k0.len() {
        let h = h_rel * k0[p].abs().max(1.0);
        let side = |sign: f64| -> Result<C64> {
            let mut k = k0.clone();
            k[p] += sign * h;
            let s = sys.with_param_values(&k)?;
            let c = CharEvalContext::new(s, ctx.grid().clone(), ctx.scheme(), ctx.step_size())?;
            Ok(correct(&Forward(&c), pair.mu, &pair.v, corrector)?.pair.mu)
        };
        let plus = side(1.0)?;
        let minus = side(-1.0)?;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Largest deviation between `grad` and central finite differences:
/// relative where the derivative is nonzero, absolute otherwise.
pub fn gradient_fd_check(
    ctx: &CharEvalContext,
    pair: &FloquetPair,
    grad: &GradientResult,
    h_rel: f64,
    corrector: &CorrectorOptions,
) -> Result<f64> {
    let fd = finite_difference_gradient(ctx, pair, h_rel, corrector)?;
    Ok(fd
        .iter()
        .zip(&grad.dmu_dk)
        .map(|(f, g)| {
            let scale = g.norm();
            if scale > 1e-12 {
                (f - g).norm() / scale
            } else {
                (f - g).norm()
            }
        })
        .fold(0.0, f64::max))
}
