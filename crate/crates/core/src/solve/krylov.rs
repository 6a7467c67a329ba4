//! Restarted GMRES with right preconditioning.

use crate::error::Result;
use crate::linalg::{dotc, norm, C64};

#[derive(Debug, Clone, PartialEq)]
pub struct GmresOptions {
    pub restart: usize,
    pub max_iter: usize,
    /// Stop once `||b - A x|| <= atol`.
    pub atol: f64,
}

#[derive(Debug, Clone)]
pub struct GmresResult {
    pub x: Vec<C64>,
    pub residual: f64,
    pub iterations: usize,
}

/// Approximately solves `A x = b` as `A P z = b`, `x = P z`.
pub fn gmres(
    mut op: impl FnMut(&[C64]) -> Result<Vec<C64>>,
    precond: impl Fn(&[C64]) -> Vec<C64>,
    b: &[C64],
    opts: &GmresOptions,
) -> Result<GmresResult> {
    let n = b.len();
    let m = opts.restart.max(1);
    let mut x = vec![C64::new(0.0, 0.0); n];
    let mut r = b.to_vec();
    let mut beta = norm(&r);
    let mut iterations = 0;
    while beta > opts.atol && iterations < opts.max_iter {
        let mut v: Vec<Vec<C64>> = vec![r.iter().map(|c| c / beta).collect()];
        let mut h = vec![vec![C64::new(0.0, 0.0); m]; m + 1];
        let mut cs = vec![0.0f64; m];
        let mut sn = vec![C64::new(0.0, 0.0); m];
        let mut g = vec![C64::new(0.0, 0.0); m + 1];
        g[0] = C64::new(beta, 0.0);
        let mut k = 0;
        while k < m && iterations < opts.max_iter {
            let mut w = op(&precond(&v[k]))?;
            iterations += 1;
            for _ in 0..2 {
                for (i, vi) in v.iter().enumerate() {
                    let s = dotc(vi, &w);
                    h[i][k] += s;
                    w.iter_mut().zip(vi).for_each(|(a, b)| *a -= s * b);
                }
            }
            let wn = norm(&w);
            h[k + 1][k] = C64::new(wn, 0.0);
            for i in 0..k {
                let t = cs[i] * h[i][k] + sn[i] * h[i + 1][k];
                h[i + 1][k] = -sn[i].conj() * h[i][k] + cs[i] * h[i + 1][k];
                h[i][k] = t;
            }
            // rotation zeroing h[k+1][k]
            let (a, bb) = (h[k][k], h[k + 1][k]);
            let den = (a.norm_sqr() + bb.norm_sqr()).sqrt();
            if den == 0.0 {
                cs[k] = 1.0;
                sn[k] = C64::new(0.0, 0.0);
            } else if a.norm() == 0.0 {
                cs[k] = 0.0;
                sn[k] = bb.conj() / bb.norm();
            } else {
                cs[k] = a.norm() / den;
                sn[k] = (a / a.norm()) * bb.conj() / den;
            }
            h[k][k] = cs[k] * a + sn[k] * bb;
            h[k + 1][k] = C64::new(0.0, 0.0);
            g[k + 1] = -sn[k].conj() * g[k];
            g[k] *= cs[k];
            k += 1;
            let converged = g[k].norm() <= opts.atol;
            if converged || wn <= 1e-14 * beta {
                break;
            }
            v.push(w.iter().map(|c| c / wn).collect());
        }
        // back substitution for the k x k triangular system
        let mut y = vec![C64::new(0.0, 0.0); k];
        for i in (0..k).rev() {
            let mut s = g[i];
            for j in i + 1..k {
                s -= h[i][j] * y[j];
            }
            y[i] = if h[i][i].norm() > 0.0 { s / h[i][i] } else { C64::new(0.0, 0.0) };
        }
        let mut z = vec![C64::new(0.0, 0.0); n];
        for (yi, vi) in y.iter().zip(&v) {
            z.iter_mut().zip(vi).for_each(|(a, b)| *a += yi * b);
        }
        let dx = precond(&z);
        x.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
        let ax = op(&x)?;
        r = b.iter().zip(&ax).map(|(a, c)| a - c).collect();
        let prev = beta;
        beta = norm(&r);
        if beta >= prev {
            break;
        }
    }
    Ok(GmresResult {
        x,
        residual: beta,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_a_nonsymmetric_system() {
        let n = 40;
        let a = |i: usize, j: usize| -> C64 {
            if i == j {
                C64::new(3.0 + i as f64 * 0.1, 0.5)
            } else if j == i + 1 {
                C64::new(-1.0, 0.2)
            } else if i == j + 2 {
                C64::new(0.3, -0.4)
            } else {
                C64::new(0.0, 0.0)
            }
        };
        let apply = |x: &[C64]| -> Result<Vec<C64>> { Ok((0..n).map(|i| (0..n).map(|j| a(i, j) * x[j]).sum()).collect()) };
        let b: Vec<C64> = (0..n).map(|i| C64::new((i as f64).sin(), 1.0)).collect();
        let jacobi = |x: &[C64]| -> Vec<C64> { x.iter().enumerate().map(|(i, c)| c / a(i, i)).collect() };
        for restart in [7, 60] {
            let res = gmres(apply, jacobi, &b, &GmresOptions { restart, max_iter: 400, atol: 1e-12 }).unwrap();
            let ax = apply(&res.x).unwrap();
            let err = norm(&ax.iter().zip(&b).map(|(p, q)| p - q).collect::<Vec<_>>());
            assert!(err <= 1e-11, "restart {restart}: {err}");
        }
    }
}
