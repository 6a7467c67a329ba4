//! Spectral collocation of the monodromy operator.
//!
//! The solution on each `Delta`-interval is a Chebyshev series of degree
//! `M`. Coefficient blocks are numbered `n = -n_h + 1 ..= N`; the first `n_h`
//! hold the initial function and the last `n_h` its image after one period.

use faer::{Mat, MatRef};

use crate::charfun::block_split;
use crate::error::{FloquetError, Result};
use crate::linalg::{eig_real, eigvals_real, eigvals_real_deflated, scale_to_unit, SparsePattern, SquareSolver, C64, ZERO};
use crate::model::{CommensurateGrid, PeriodicDelaySystem};

/// Chebyshev polynomials on `[0, 1]` and the collocation nodes.
#[derive(Debug, Clone)]
pub struct ChebBasis {
    pub degree: usize,
    /// Nodes `xi_m = (alpha_m + 1) / 2` with `alpha_m = -cos((m - 1) pi / (M - 1))`,
    /// the `M` Chebyshev extreme points including both ends.
    pub nodes: Vec<f64>,
    /// `T_i(alpha_m)` indexed `[m][i]`.
    pub values: Vec<Vec<f64>>,
    /// Derivative in `s` of `T_i(2 s - 1)` at the nodes, `2 i U_{i-1}(alpha_m)`.
    pub derivs: Vec<Vec<f64>>,
}

impl ChebBasis {
    pub fn new(degree: usize) -> Self {
        let m = degree;
        let mut nodes = Vec::new();
        let mut values = Vec::new();
        let mut derivs = Vec::new();
        for k in 0..m {
            let alpha = -((k as f64) * std::f64::consts::PI / (m.max(2) - 1) as f64).cos();
            nodes.push(0.5 * (alpha + 1.0));
            values.push(cheb_t(alpha, m));
            let u = cheb_u(alpha, m);
            derivs.push((0..=m).map(|i| if i == 0 { 0.0 } else { 2.0 * i as f64 * u[i - 1] }).collect());
        }
        ChebBasis {
            degree,
            nodes,
            values,
            derivs,
        }
    }

    /// Evaluates `sum_i c_i T_i(2 s - 1)` for a scalar coefficient list.
    pub fn eval(coeffs: &[f64], s: f64) -> f64 {
        let t = cheb_t(2.0 * s - 1.0, coeffs.len().saturating_sub(1));
        coeffs.iter().zip(t).map(|(c, t)| c * t).sum()
    }
}

fn cheb_t(x: f64, m: usize) -> Vec<f64> {
    let mut t = vec![1.0; m + 1];
    if m >= 1 {
        t[1] = x;
    }
    for i in 2..=m {
        t[i] = 2.0 * x * t[i - 1] - t[i - 2];
    }
    t
}

fn cheb_u(x: f64, m: usize) -> Vec<f64> {
    let mut u = vec![1.0; m + 1];
    if m >= 1 {
        u[1] = 2.0 * x;
    }
    for i in 2..=m {
        u[i] = 2.0 * x * u[i - 1] - u[i - 2];
    }
    u
}

/// Diagonal blocks at or below this size are factorized densely.
const DENSE_BLOCK: usize = 300;

/// Relative singular value below which a direction counts as null.
const NULL_TOL: f64 = 1e-11;

/// Assembled collocation equations and their block-triangular solver.
pub struct CollocationSystem {
    dim: usize,
    degree: usize,
    blocks: usize,
    history: usize,
    delta: f64,
    /// Entries of block row `n` as `(local row, global column, value)`.
    rows: Vec<Vec<(usize, usize, f64)>>,
    diag: Vec<SquareSolver<f64>>,
}

impl std::fmt::Debug for CollocationSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CollocationSystem")
            .field("dim", &self.dim)
            .field("degree", &self.degree)
            .field("blocks", &self.blocks)
            .field("history", &self.history)
            .finish()
    }
}

impl CollocationSystem {
    /// Builds the collocation equations of degree `degree`. A system without
    /// delays is given one history block so the map is still defined.
    pub fn assemble(system: &PeriodicDelaySystem, grid: &CommensurateGrid, degree: usize) -> Result<Self> {
        if degree < 1 {
            return Err(FloquetError::InvalidInput("collocation degree must be at least 1".into()));
        }
        let d = system.dim();
        let nb = grid.blocks;
        let nh = grid.history_blocks().max(1);
        let basis = ChebBasis::new(degree);
        let bsize = (degree + 1) * d;
        let col = |n: i64, i: usize, p: usize| -> usize { (((n + nh as i64 - 1) as usize) * (degree + 1) + i) * d + p };
        let params = system.param_values();
        let mass = system.mass().map(|m| m.entries.clone());
        let mut rows = Vec::with_capacity(nb);
        for n in 1..=nb as i64 {
            let mut ent = Vec::new();
            // continuity x_n(0) = x_{n-1}(1)
            for p in 0..d {
                for i in 0..=degree {
                    let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                    ent.push((p, col(n, i, p), sign));
                    ent.push((p, col(n - 1, i, p), -1.0));
                }
            }
            for (m, &xi) in basis.nodes.iter().enumerate() {
                let ro = d + m * d;
                match &mass {
                    Some(e) => {
                        for &(r, c, v) in e {
                            for i in 1..=degree {
                                ent.push((ro + r, col(n, i, c), v * basis.derivs[m][i]));
                            }
                        }
                    }
                    None => {
                        for p in 0..d {
                            for i in 1..=degree {
                                ent.push((ro + p, col(n, i, p), basis.derivs[m][i]));
                            }
                        }
                    }
                }
                let t = (xi + n as f64 - 1.0) * grid.delta;
                for j in 0..grid.num_terms() {
                    let src = n - grid.delay_steps[j] as i64;
                    let coeff = system.coeff(j);
                    let tc = system.coeff_time(j, t);
                    for e in coeff.entries() {
                        let a = e.expr.eval(tc, params)?;
                        if a == 0.0 {
                            continue;
                        }
                        for i in 0..=degree {
                            ent.push((ro + e.row, col(src, i, e.col), -grid.delta * a * basis.values[m][i]));
                        }
                    }
                }
            }
            rows.push(ent);
        }

        // diagonal blocks
        let mut diag = Vec::with_capacity(nb);
        let mut pattern: Option<(Vec<(usize, usize)>, SparsePattern)> = None;
        for (bi, ent) in rows.iter().enumerate() {
            let lo = (bi + nh) * bsize;
            let local: Vec<(usize, usize, f64)> = ent
                .iter()
                .filter(|e| e.1 >= lo && e.1 < lo + bsize)
                .map(|&(r, c, v)| (r, c - lo, v))
                .collect();
            let solver = if bsize <= DENSE_BLOCK {
                let mut m = Mat::<f64>::zeros(bsize, bsize);
                for &(r, c, v) in &local {
                    m[(r, c)] += v;
                }
                SquareSolver::dense(m.as_ref())
            } else {
                let idx: Vec<(usize, usize)> = local.iter().map(|&(r, c, _)| (r, c)).collect();
                let vals: Vec<f64> = local.iter().map(|e| e.2).collect();
                let reuse = matches!(&pattern, Some((p, _)) if *p == idx);
                if !reuse {
                    pattern = Some((idx.clone(), SparsePattern::new(bsize, &idx)?));
                }
                pattern.as_ref().unwrap().1.factor(&vals)
            };
            diag.push(solver.map_err(|e| FloquetError::SingularMatrix(format!("collocation block {}: {}", bi + 1, e)))?);
        }
        Ok(CollocationSystem {
            dim: d,
            degree,
            blocks: nb,
            history: nh,
            delta: grid.delta,
            rows,
            diag,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Number of history blocks used (at least one).
    pub fn history_blocks(&self) -> usize {
        self.history
    }

    /// Length of one coefficient block, `(M + 1) d`.
    pub fn block_len(&self) -> usize {
        (self.degree + 1) * self.dim
    }

    /// Dimension of the discretised monodromy operator.
    pub fn size(&self) -> usize {
        self.history * self.block_len()
    }

    /// Total number of coefficient unknowns.
    pub fn total_len(&self) -> usize {
        (self.history + self.blocks) * self.block_len()
    }

    /// Solves the collocation equations for every column of initial
    /// coefficients, returning all coefficient blocks.
    pub fn solve_full(&self, c_hist: MatRef<'_, f64>) -> Mat<f64> {
        let bsize = self.block_len();
        let hist = self.size();
        let cols = c_hist.ncols();
        let mut c = Mat::<f64>::zeros(self.total_len(), cols);
        c.as_mut().subrows_mut(0, hist).copy_from(c_hist);
        for (bi, ent) in self.rows.iter().enumerate() {
            let lo = (bi + self.history) * bsize;
            let mut rhs = Mat::<f64>::zeros(bsize, cols);
            for &(r, cc, v) in ent {
                if cc < lo {
                    for k in 0..cols {
                        rhs[(r, k)] -= v * c[(cc, k)];
                    }
                }
            }
            self.diag[bi].solve_in_place(rhs.as_mut());
            c.as_mut().subrows_mut(lo, bsize).copy_from(&rhs);
        }
        c
    }

    /// `U_M x` for every column of `x`.
    pub fn apply_monodromy(&self, x: MatRef<'_, f64>) -> Mat<f64> {
        let full = self.solve_full(x);
        let hist = self.size();
        full.as_ref().subrows(self.total_len() - hist, hist).to_owned()
    }

    /// Dense `U_M`.
    pub fn monodromy_matrix(&self) -> Mat<f64> {
        self.apply_monodromy(Mat::<f64>::identity(self.size(), self.size()).as_ref())
    }

    /// Eigenvalues and eigenvectors of the dense `U_M`.
    pub fn eigen(&self) -> Result<(Vec<C64>, Mat<C64>)> {
        eig_real(self.monodromy_matrix().as_ref())
    }

    /// Nonzero-faithful spectrum of `U_M`: its numerical null space is
    /// deflated first, see [`eigvals_real_deflated`].
    pub fn nonzero_spectrum(&self) -> Result<Vec<C64>> {
        eigvals_real_deflated(self.monodromy_matrix().as_ref(), NULL_TOL)
    }

    /// Dense `S`, of size `N (M+1) d x (n_h + N)(M+1) d`.
    pub fn s_matrix(&self) -> Mat<f64> {
        let bsize = self.block_len();
        let mut s = Mat::<f64>::zeros(self.blocks * bsize, self.total_len());
        for (bi, ent) in self.rows.iter().enumerate() {
            for &(r, c, v) in ent {
                s[(bi * bsize + r, c)] += v;
            }
        }
        s
    }

    /// Eigenvalues of the pencil `(P, Q)` with `P = [S; I 0]`, `Q = [0; 0 I]`,
    /// computed as the spectrum of `P^{-1} Q`.
    pub fn pencil_eigenvalues(&self) -> Result<Vec<C64>> {
        eigvals_real(self.pencil_operator()?.as_ref())
    }

    /// [`pencil_eigenvalues`](Self::pencil_eigenvalues) with the numerical
    /// null space deflated.
    pub fn pencil_nonzero_spectrum(&self) -> Result<Vec<C64>> {
        eigvals_real_deflated(self.pencil_operator()?.as_ref(), NULL_TOL)
    }

    fn pencil_operator(&self) -> Result<Mat<f64>> {
        let total = self.total_len();
        let hist = self.size();
        let s = self.s_matrix();
        let mut p = Mat::<f64>::zeros(total, total);
        p.as_mut().subrows_mut(0, total - hist).copy_from(&s);
        for i in 0..hist {
            p[(total - hist + i, i)] = 1.0;
        }
        let mut x = Mat::<f64>::zeros(total, total);
        for i in 0..hist {
            x[(total - hist + i, total - hist + i)] = 1.0;
        }
        SquareSolver::dense(p.as_ref())?.solve_in_place(x.as_mut());
        Ok(x)
    }

    /// Complex coefficient blocks `n = 1..=N` for complex initial
    /// coefficients.
    pub fn period_coefficients(&self, c_hist: &[C64]) -> Vec<C64> {
        let hist = self.size();
        let x = Mat::<f64>::from_fn(hist, 2, |r, k| if k == 0 { c_hist[r].re } else { c_hist[r].im });
        let full = self.solve_full(x.as_ref());
        (hist..self.total_len()).map(|r| C64::new(full[(r, 0)], full[(r, 1)])).collect()
    }

    /// Block vector `v_n = x_n(0)` (unit norm) from coefficient blocks
    /// `n = 1..=N`.
    pub fn seed_from_coefficients(&self, c_period: &[C64]) -> Vec<C64> {
        let d = self.dim;
        let m = self.degree;
        let mut v = vec![ZERO; self.blocks * d];
        for n in 0..self.blocks {
            for i in 0..=m {
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                for p in 0..d {
                    v[n * d + p] += sign * c_period[(n * (m + 1) + i) * d + p];
                }
            }
        }
        scale_to_unit(&mut v);
        v
    }

    /// Seed for the characteristic matrix from an eigenvector of `U_M`.
    pub fn seed_from_eigenvector(&self, c_hist: &[C64]) -> Vec<C64> {
        self.seed_from_coefficients(&self.period_coefficients(c_hist))
    }

    /// Extends period coefficients to all blocks with the Floquet relation
    /// `c_n = mu^{a_n} c_{b_n}`.
    pub fn extend_periodic(&self, mu: C64, c_period: &[C64]) -> Vec<C64> {
        let bsize = self.block_len();
        let mut out = Vec::with_capacity(self.total_len());
        for n in (1 - self.history as i64)..=self.blocks as i64 {
            let (a, b) = block_split(n, self.blocks);
            let f = mu.powi(a as i32);
            out.extend(c_period[(b - 1) * bsize..b * bsize].iter().map(|x| f * x));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_matches_definitions() {
        let b = ChebBasis::new(6);
        assert_eq!(b.nodes[0], 0.0);
        for (m, &xi) in b.nodes.iter().enumerate() {
            let x = 2.0 * xi - 1.0;
            let th = x.acos();
            for i in 0..=6 {
                assert!((b.values[m][i] - (i as f64 * th).cos()).abs() < 1e-13);
            }
            // finite-difference check of the derivative
            let h = 1e-6;
            for i in 0..=6 {
                let mut c = vec![0.0; 7];
                c[i] = 1.0;
                let fd = (ChebBasis::eval(&c, xi + h) - ChebBasis::eval(&c, xi - h)) / (2.0 * h);
                if xi > h {
                    assert!((fd - b.derivs[m][i]).abs() < 1e-6, "m={} i={}", m, i);
                }
            }
        }
    }
}
