//! Left null vectors of the characteristic matrix.

use super::corrector::{correct, residual_norm, CorrectorOptions, Transposed};
use super::{arnoldi_stage, direct_stage, ArnoldiOptions, AUTO_DIRECT_LIMIT};
use crate::charfun::CharEvalContext;
use crate::colloc::CollocationSystem;
use crate::error::{FloquetError, Result};
use crate::linalg::{norm, C64};

/// Largest `N d` for which the left vector is taken from a dense SVD.
pub const SMALL_LEFT_LIMIT: usize = 2000;

#[derive(Debug, Clone, PartialEq)]
pub struct LeftOptions {
    /// Collocation degree for the dual system.
    pub degree: usize,
    pub krylov_dim: usize,
    pub num_wanted: usize,
    /// Relative distance within which a dual eigenvalue is paired with
    /// `conj(mu)`.
    pub match_tol: f64,
    pub corrector: CorrectorOptions,
}

impl Default for LeftOptions {
    fn default() -> Self {
        LeftOptions {
            degree: 15,
            krylov_dim: 60,
            num_wanted: 6,
            match_tol: 1e-2,
            corrector: CorrectorOptions::default(),
        }
    }
}

/// Left singular vector of the smallest singular value of the assembled
/// `N(mu)`.
pub fn left_eigenvector_small(ctx: &CharEvalContext, mu: C64) -> Result<Vec<C64>> {
    let n = ctx.assemble_n(mu)?;
    let svd = n.svd().map_err(|e| FloquetError::Linalg(format!("{:?}", e)))?;
    let u = svd.U();
    let last = u.ncols() - 1;
    let mut out: Vec<C64> = (0..u.nrows()).map(|r| u[(r, last)]).collect();
    let nrm = norm(&out);
    out.iter_mut().for_each(|x| *x /= nrm);
    Ok(out)
}

/// Left null vector obtained as a right null vector of `M(conj mu)`, seeded
/// from the collocation spectrum of the dual system.
pub fn left_eigenvector_large(ctx: &CharEvalContext, mu: C64, opts: &LeftOptions) -> Result<Vec<C64>> {
    let dual = ctx.system().dual();
    let cs = CollocationSystem::assemble(&dual, ctx.grid(), opts.degree)?;
    let target = mu.conj();
    let seeds = if cs.size() <= AUTO_DIRECT_LIMIT {
        direct_stage(&cs, 0.0, None)?
    } else {
        let aopts = ArnoldiOptions {
            krylov_dim: opts.krylov_dim.max(opts.num_wanted + 1),
            num_wanted: opts.num_wanted,
            ..Default::default()
        };
        arnoldi_stage(&cs, &aopts)?.0
    };
    let tol = opts.match_tol * mu.norm().max(1.0);
    let seed = seeds
        .iter()
        .filter(|s| (s.mu - target).norm() <= tol)
        .min_by(|a, b| (a.mu - target).norm().total_cmp(&(b.mu - target).norm()))
        .ok_or_else(|| FloquetError::PairingFailed {
            target: target.to_string(),
            tol,
        })?;
    let d = ctx.system().dim();
    let nb = ctx.grid().blocks;
    // the dual trajectory runs backwards over the period
    let mut u0 = vec![C64::new(0.0, 0.0); nb * d];
    for n in 0..nb {
        u0[n * d..(n + 1) * d].copy_from_slice(&seed.v[(nb - 1 - n) * d..(nb - n) * d]);
    }
    refine_left(ctx, mu, &u0, &opts.corrector)
}

/// Converges a left vector guess `u0` for the multiplier `mu` as a null
/// vector of `M(conj mu)`, rejecting a root other than `conj mu`.
pub fn refine_left(ctx: &CharEvalContext, mu: C64, u0: &[C64], corrector: &CorrectorOptions) -> Result<Vec<C64>> {
    let target = mu.conj();
    let c = correct(&Transposed(ctx), target, u0, corrector)?;
    let tol = 1e-6 * mu.norm().max(1.0);
    if (c.pair.mu - target).norm() > tol {
        return Err(FloquetError::PairingFailed {
            target: target.to_string(),
            tol,
        });
    }
    Ok(c.pair.v)
}

/// Left null vector by the path suited to the problem size, with its
/// residual `||M(conj mu) u||`.
pub fn left_eigenvector(ctx: &CharEvalContext, mu: C64, opts: &LeftOptions) -> Result<(Vec<C64>, f64)> {
    let u = if ctx.size() <= SMALL_LEFT_LIMIT {
        left_eigenvector_small(ctx, mu)?
    } else {
        left_eigenvector_large(ctx, mu, opts)?
    };
    let r = residual_norm(&Transposed(ctx), mu.conj(), &u)?;
    Ok((u, r))
}
