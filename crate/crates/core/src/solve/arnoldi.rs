//! Restarted Arnoldi iteration for the dominant eigenvalues of a real
//! operator available only through its action.

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FloquetError, Result};
use crate::linalg::{by_modulus_desc, eig_real, C64};

#[derive(Debug, Clone, PartialEq)]
pub struct ArnoldiOptions {
    pub krylov_dim: usize,
    pub num_wanted: usize,
    /// Ritz residual, relative to the largest Ritz value, regarded as converged.
    pub tol: f64,
    /// Looser residual still accepted once restarts are exhausted.
    pub accept_tol: f64,
    pub max_restarts: usize,
    pub seed: u64,
}

impl Default for ArnoldiOptions {
    fn default() -> Self {
        ArnoldiOptions {
            krylov_dim: 60,
            num_wanted: 6,
            tol: 1e-12,
            accept_tol: 1e-6,
            max_restarts: 20,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RitzPair {
    pub value: C64,
    pub vector: Vec<C64>,
    /// `||A z - theta z||` for unit `z`.
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct ArnoldiResult {
    pub pairs: Vec<RitzPair>,
    /// Total operator applications.
    pub iterations: usize,
    pub restarts: usize,
}

/// Dominant eigenpairs of the `n x n` real operator `op`, which maps a block
/// of columns to its image. Implicitly restarted with exact shifts.
pub fn arnoldi(n: usize, op: impl Fn(&Mat<f64>) -> Mat<f64>, opts: &ArnoldiOptions) -> Result<ArnoldiResult> {
    if opts.num_wanted == 0 || opts.krylov_dim < opts.num_wanted {
        return Err(FloquetError::InvalidInput(format!(
            "Krylov dimension {} must be at least the number of wanted pairs {}",
            opts.krylov_dim, opts.num_wanted
        )));
    }
    if n == 0 {
        return Err(FloquetError::InvalidInput("empty operator".into()));
    }
    let m = opts.krylov_dim.min(n);
    let wanted = opts.num_wanted.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let start: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
    let nrm = start.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut v = Mat::<f64>::zeros(n, m + 1);
    let mut h = Mat::<f64>::zeros(m + 1, m);
    for i in 0..n {
        v[(i, 0)] = start[i] / nrm;
    }
    let mut k = 0;
    let mut iterations = 0;
    let mut scale = 0.0f64;
    let mut last: Option<Small> = None;
    for restart in 0..=opts.max_restarts {
        for j in k..m {
            let x = Mat::<f64>::from_fn(n, 1, |i, _| v[(i, j)]);
            let mut w = op(&x);
            iterations += 1;
            let wn0 = (0..n).map(|i| w[(i, 0)] * w[(i, 0)]).sum::<f64>().sqrt();
            scale = scale.max(wn0);
            // modified Gram-Schmidt, twice
            for _ in 0..2 {
                for c in 0..=j {
                    let dot: f64 = (0..n).map(|i| v[(i, c)] * w[(i, 0)]).sum();
                    h[(c, j)] += dot;
                    for i in 0..n {
                        w[(i, 0)] -= dot * v[(i, c)];
                    }
                }
            }
            let beta = (0..n).map(|i| w[(i, 0)] * w[(i, 0)]).sum::<f64>().sqrt();
            h[(j + 1, j)] = beta;
            let breakdown = beta <= 1e-14 * scale.max(f64::MIN_POSITIVE);
            if !breakdown {
                for i in 0..n {
                    v[(i, j + 1)] = w[(i, 0)] / beta;
                }
            }
            let len = j + 1;
            if len < wanted && !breakdown && len < m {
                continue;
            }
            let small = ritz_small(&h, len, wanted, if breakdown { 0.0 } else { beta })?;
            let top = small.values.first().map_or(0.0, |x| x.norm()).max(f64::MIN_POSITIVE);
            let done = small.take >= wanted.min(len) && small.residuals.iter().all(|r| *r <= opts.tol * top);
            if done || breakdown {
                return Ok(ArnoldiResult {
                    pairs: lift(&v, &small),
                    iterations,
                    restarts: restart,
                });
            }
            last = Some(small);
        }
        if restart == opts.max_restarts {
            break;
        }
        k = implicit_restart(&mut v, &mut h, m, wanted)?;
        if k == 0 {
            break;
        }
    }
    let small = last.unwrap_or_else(Small::empty);
    let pairs: Vec<RitzPair> = lift(&v, &small)
        .into_iter()
        .filter(|p| p.residual <= opts.accept_tol * p.value.norm().max(f64::MIN_POSITIVE))
        .collect();
    if pairs.is_empty() {
        return Err(FloquetError::NoConvergence(format!(
            "Arnoldi residuals above {:e} after {} restarts",
            opts.accept_tol, opts.max_restarts
        )));
    }
    Ok(ArnoldiResult {
        pairs,
        iterations,
        restarts: opts.max_restarts,
    })
}

/// Wanted Ritz values of the leading `len x len` Hessenberg block with their
/// coordinate vectors and residual estimates, dominant first.
struct Small {
    len: usize,
    take: usize,
    values: Vec<C64>,
    coords: Vec<Vec<C64>>,
    residuals: Vec<f64>,
}

impl Small {
    fn empty() -> Small {
        Small {
            len: 0,
            take: 0,
            values: Vec::new(),
            coords: Vec::new(),
            residuals: Vec::new(),
        }
    }
}

/// Number of leading entries of `vals` (sorted) to keep so that `k` does
/// not split a complex-conjugate pair.
fn pair_safe(vals: &[C64], order: &[usize], k: usize) -> usize {
    if k == 0 || k >= order.len() {
        return k.min(order.len());
    }
    let a = vals[order[k - 1]];
    let b = vals[order[k]];
    if a.im.abs() > 0.0 && (a.conj() - b).norm() <= 1e-10 * a.norm().max(f64::MIN_POSITIVE) {
        k + 1
    } else {
        k
    }
}

fn ritz_small(h: &Mat<f64>, len: usize, wanted: usize, beta: f64) -> Result<Small> {
    let hk = h.as_ref().submatrix(0, 0, len, len).to_owned();
    let (vals, vecs) = eig_real(hk.as_ref())?;
    let mut order: Vec<usize> = (0..len).collect();
    order.sort_by(|&a, &b| by_modulus_desc(&vals[a], &vals[b]));
    let take = pair_safe(&vals, &order, wanted.min(len));
    let mut out = Small {
        len,
        take,
        values: Vec::with_capacity(take),
        coords: Vec::with_capacity(take),
        residuals: Vec::with_capacity(take),
    };
    for &c in &order[..take] {
        let y: Vec<C64> = (0..len).map(|r| vecs[(r, c)]).collect();
        let yn = y.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
        out.residuals.push(beta * y[len - 1].norm() / yn);
        out.values.push(vals[c]);
        out.coords.push(y);
    }
    Ok(out)
}

fn lift(v: &Mat<f64>, small: &Small) -> Vec<RitzPair> {
    let n = v.nrows();
    small
        .values
        .iter()
        .zip(&small.coords)
        .zip(&small.residuals)
        .map(|((&value, y), &residual)| {
            let mut z = vec![C64::new(0.0, 0.0); n];
            for (r, yr) in y.iter().enumerate().take(small.len) {
                for i in 0..n {
                    z[i] += v[(i, r)] * yr;
                }
            }
            let zn = z.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
            z.iter_mut().for_each(|x| *x /= zn);
            RitzPair {
                value,
                vector: z,
                residual,
            }
        })
        .collect()
}

/// Householder QR of a small square matrix; returns the orthogonal factor.
fn householder_q(a: &Mat<f64>) -> Mat<f64> {
    let n = a.nrows();
    let mut r = a.clone();
    let mut q = Mat::<f64>::identity(n, n);
    for c in 0..n.saturating_sub(1) {
        let alpha = (c..n).map(|i| r[(i, c)] * r[(i, c)]).sum::<f64>().sqrt();
        if alpha == 0.0 {
            continue;
        }
        let mut u: Vec<f64> = (c..n).map(|i| r[(i, c)]).collect();
        u[0] += if u[0] >= 0.0 { alpha } else { -alpha };
        let un = u.iter().map(|x| x * x).sum::<f64>();
        if un == 0.0 {
            continue;
        }
        for j in 0..n {
            let s: f64 = (c..n).map(|i| u[i - c] * r[(i, j)]).sum::<f64>() * 2.0 / un;
            for i in c..n {
                r[(i, j)] -= s * u[i - c];
            }
        }
        for i in 0..n {
            let s: f64 = (c..n).map(|j| q[(i, j)] * u[j - c]).sum::<f64>() * 2.0 / un;
            for j in c..n {
                q[(i, j)] -= s * u[j - c];
            }
        }
    }
    q
}

/// Applies the unwanted Ritz values of the full `m`-step factorization as
/// exact shifts and truncates it. Returns the new factorization length.
fn implicit_restart(v: &mut Mat<f64>, h: &mut Mat<f64>, m: usize, wanted: usize) -> Result<usize> {
    let n = v.nrows();
    let mut hm = h.as_ref().submatrix(0, 0, m, m).to_owned();
    let beta = h[(m, m - 1)];
    let (vals, _) = eig_real(hm.as_ref())?;
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| by_modulus_desc(&vals[a], &vals[b]));
    // keep a buffer beyond the wanted pairs
    let kk = pair_safe(&vals, &order, (wanted + (m - wanted) / 3).max(1));
    if kk >= m {
        return Ok(0);
    }
    let mut qacc = Mat::<f64>::identity(m, m);
    let mut i = kk;
    while i < m {
        let theta = vals[order[i]];
        let complex = theta.im.abs() > 0.0 && i + 1 < m;
        let shifted = if complex {
            let h2 = &hm * &hm;
            Mat::<f64>::from_fn(m, m, |r, c| {
                h2[(r, c)] - 2.0 * theta.re * hm[(r, c)] + if r == c { theta.norm_sqr() } else { 0.0 }
            })
        } else {
            Mat::<f64>::from_fn(m, m, |r, c| hm[(r, c)] - if r == c { theta.re } else { 0.0 })
        };
        let q = householder_q(&shifted);
        hm = q.transpose() * &hm * &q;
        qacc = &qacc * &q;
        i += if complex { 2 } else { 1 };
    }
    let vq = v.as_ref().submatrix(0, 0, n, m) * &qacc;
    let sigma = qacc[(m - 1, kk - 1)];
    let sub = hm[(kk, kk - 1)];
    let mut f: Vec<f64> = (0..n).map(|r| vq[(r, kk)] * sub + v[(r, m)] * beta * sigma).collect();
    // keep the basis orthogonal to working precision
    for c in 0..kk {
        let dot: f64 = (0..n).map(|r| vq[(r, c)] * f[r]).sum();
        for r in 0..n {
            f[r] -= dot * vq[(r, c)];
        }
    }
    let fn_ = f.iter().map(|x| x * x).sum::<f64>().sqrt();
    *h = Mat::<f64>::zeros(m + 1, m);
    for r in 0..kk {
        for c in 0..kk {
            if r <= c + 1 {
                h[(r, c)] = hm[(r, c)];
            }
        }
    }
    h[(kk, kk - 1)] = fn_;
    *v = Mat::<f64>::zeros(n, m + 1);
    for r in 0..n {
        for c in 0..kk {
            v[(r, c)] = vq[(r, c)];
        }
        if fn_ > 0.0 {
            v[(r, kk)] = f[r] / fn_;
        }
    }
    if !(fn_ > 0.0) {
        return Ok(0);
    }
    Ok(kk)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_dominant_eigenvalues_of_a_known_matrix() {
        let n = 40;
        // block-diagonal with a rotation block of modulus 2 and a decaying diagonal
        let mut a = Mat::<f64>::zeros(n, n);
        a[(0, 0)] = 1.2;
        a[(0, 1)] = -1.6;
        a[(1, 0)] = 1.6;
        a[(1, 1)] = 1.2;
        for i in 2..n {
            a[(i, i)] = 1.0 / i as f64;
        }
        let op = |x: &Mat<f64>| &a * x;
        let res = arnoldi(
            n,
            op,
            &ArnoldiOptions {
                krylov_dim: 20,
                num_wanted: 3,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((res.pairs[0].value - C64::new(1.2, 1.6)).norm() < 1e-10);
        assert!((res.pairs[1].value - C64::new(1.2, -1.6)).norm() < 1e-10);
        assert!((res.pairs[2].value - C64::new(0.5, 0.0)).norm() < 1e-8);
    }

    #[test]
    fn restarts_resolve_a_clustered_spectrum() {
        let n = 300;
        // slowly separating diagonal plus a rotation block
        let mut a = Mat::<f64>::zeros(n, n);
        a[(0, 0)] = 0.6;
        a[(0, 1)] = -0.7;
        a[(1, 0)] = 0.7;
        a[(1, 1)] = 0.6;
        for i in 2..n {
            a[(i, i)] = 0.9 - 0.5 * (i as f64 / n as f64).sqrt();
        }
        let op = |x: &Mat<f64>| &a * x;
        let res = arnoldi(
            n,
            op,
            &ArnoldiOptions {
                krylov_dim: 24,
                num_wanted: 4,
                max_restarts: 200,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(res.restarts > 0);
        let expect = [C64::new(0.9 - 0.5 * (2.0f64 / n as f64).sqrt(), 0.0), C64::new(0.6, 0.7), C64::new(0.6, -0.7)];
        for e in expect {
            assert!(res.pairs.iter().any(|p| (p.value - e).norm() < 1e-8), "{e} missing");
        }
    }

    #[test]
    fn rejects_small_krylov_space() {
        let op = |x: &Mat<f64>| x.clone();
        let err = arnoldi(
            5,
            op,
            &ArnoldiOptions {
                krylov_dim: 2,
                num_wanted: 3,
                ..Default::default()
            },
        );
        assert!(matches!(err, Err(FloquetError::InvalidInput(_))));
    }
}
