//! Independent reference computations used to validate the solvers.

use faer::linalg::solvers::Solve;
use faer::Mat;

use crate::error::{FloquetError, Result};
use crate::linalg::{eigvals_real, C64, ONE};
use crate::model::{CommensurateGrid, PeriodicDelaySystem};

/// Branch `k` of the Lambert W function, by Halley iteration.
pub fn lambert_w(k: i32, z: C64) -> C64 {
    if z == C64::new(0.0, 0.0) {
        return if k == 0 { z } else { C64::new(f64::NEG_INFINITY, 0.0) };
    }
    let e = std::f64::consts::E;
    let near_branch = (z + 1.0 / e).norm() < 0.3;
    let p = (2.0 * (e * z + 1.0)).sqrt();
    let mut w = if k == 0 && near_branch {
        -ONE + p - p * p / 3.0 + p * p * p * (11.0 / 72.0)
    } else if ((k == -1 && z.im >= 0.0) || (k == 1 && z.im < 0.0)) && near_branch {
        -ONE - p - p * p / 3.0 - p * p * p * (11.0 / 72.0)
    } else if k == 0 && z.norm() < 1.0 {
        z * (ONE - z)
    } else {
        let l1 = z.ln() + C64::new(0.0, 2.0 * std::f64::consts::PI * k as f64);
        let l2 = l1.ln();
        l1 - l2 + l2 / l1
    };
    for _ in 0..100 {
        let ew = w.exp();
        let f = w * ew - z;
        let wp1 = w + 1.0;
        if wp1.norm() < 1e-300 {
            break;
        }
        let step = f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1));
        w -= step;
        if step.norm() <= 1e-16 * w.norm().max(1e-300) {
            break;
        }
    }
    w
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            if n == 1 {
                p0 = 1.0;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
    }
    (x, w)
}

/// Composite Gauss-Legendre quadrature of `f` on `[a, b]`.
pub fn integrate(mut f: impl FnMut(f64) -> f64, a: f64, b: f64, panels: usize, order: usize) -> f64 {
    let (x, w) = gauss_legendre(order);
    let h = (b - a) / panels as f64;
    let mut sum = 0.0;
    for p in 0..panels {
        let lo = a + p as f64 * h;
        for (xi, wi) in x.iter().zip(&w) {
            sum += wi * f(lo + 0.5 * h * (xi + 1.0));
        }
    }
    0.5 * h * sum
}

/// Period averages `a_n = int_0^T A_j(t) dt` of a scalar system with a
/// single block, indexed by the delay step count `n`.
pub fn averaged_coefficients(system: &PeriodicDelaySystem, grid: &CommensurateGrid) -> Result<Vec<f64>> {
    if system.dim() != 1 || grid.blocks != 1 {
        return Err(FloquetError::InvalidInput(
            "averaged coefficients need a scalar system whose delays are multiples of the period".into(),
        ));
    }
    let mut a = vec![0.0; grid.history_blocks() + 1];
    for j in 0..grid.num_terms() {
        let mut err = None;
        let v = integrate(
            |t| match system.eval_coeff(j, t) {
                Ok(m) => m[(0, 0)],
                Err(e) => {
                    err = Some(e);
                    0.0
                }
            },
            0.0,
            system.period(),
            64,
            8,
        );
        if let Some(e) = err {
            return Err(e.into());
        }
        a[grid.delay_steps[j]] += v;
    }
    Ok(a)
}

/// Roots of `exp(sum_n a_n mu^{-n}) - mu`, the exact characteristic
/// equation of a scalar system whose delays are multiples of the period.
/// Newton iteration from each seed; converged roots are deduplicated.
pub fn scalar_characteristic_roots(a: &[f64], seeds: &[C64]) -> Vec<C64> {
    let f = |mu: C64| -> (C64, C64) {
        let mut s = C64::new(0.0, 0.0);
        let mut ds = C64::new(0.0, 0.0);
        for (n, &an) in a.iter().enumerate() {
            s += an * mu.powi(-(n as i32));
            ds += -(n as f64) * an * mu.powi(-(n as i32) - 1);
        }
        let e = s.exp();
        (e - mu, e * ds - 1.0)
    };
    let mut roots: Vec<C64> = Vec::new();
    for &seed in seeds {
        let mut mu = seed;
        let mut ok = false;
        for _ in 0..100 {
            let (v, dv) = f(mu);
            if !v.is_finite() || dv.norm() == 0.0 {
                break;
            }
            let step = v / dv;
            mu -= step;
            if step.norm() <= 1e-15 * mu.norm().max(1.0) {
                ok = f(mu).0.norm() <= 1e-12 * mu.norm().max(1.0);
                break;
            }
        }
        if ok && !roots.iter().any(|r| (r - mu).norm() <= 1e-8 * mu.norm().max(1.0)) {
            roots.push(mu);
        }
    }
    roots
}

/// Cubic Lagrange weights for `x` over samples at `0, 1, 2, 3`.
fn lagrange4(x: f64) -> [f64; 4] {
    [
        -(x - 1.0) * (x - 2.0) * (x - 3.0) / 6.0,
        x * (x - 2.0) * (x - 3.0) / 2.0,
        -x * (x - 1.0) * (x - 3.0) / 2.0,
        x * (x - 1.0) * (x - 2.0) / 6.0,
    ]
}

/// Method-of-steps approximation of the monodromy operator on a uniform
/// mesh of `mesh_n` intervals per `Delta`, with `substeps` RK4 steps per
/// mesh interval and cubic interpolation for delayed values. Rows and
/// columns are indexed `(mesh node, component)`.
pub fn brute_force_monodromy(
    system: &PeriodicDelaySystem,
    grid: &CommensurateGrid,
    mesh_n: usize,
    substeps: usize,
) -> Result<Mat<f64>> {
    if mesh_n < 2 || substeps < 1 {
        return Err(FloquetError::InvalidInput("mesh needs at least 2 intervals per step".into()));
    }
    let d = system.dim();
    let nh = grid.history_blocks();
    let nodes = nh * mesh_n + 1;
    let ncols = nodes * d;
    let per_mesh = substeps;
    let hf = grid.delta / (mesh_n * substeps) as f64;
    let hist_fine = nh * mesh_n * substeps;
    let total_fine = hist_fine + grid.blocks * mesh_n * substeps;
    let t_of = |f: usize| (f as f64 - hist_fine as f64) * hf;

    // fine samples of every state, each a d x ncols matrix
    let mut fine: Vec<Mat<f64>> = Vec::with_capacity(total_fine + 1);
    for f in 0..=hist_fine {
        let mut m = Mat::<f64>::zeros(d, ncols);
        let x = f as f64 / per_mesh as f64;
        let base = if nodes < 4 {
            0
        } else {
            (x.floor() as isize - 1).clamp(0, nodes as isize - 4) as usize
        };
        if nodes < 4 {
            // too few nodes for a cubic: use linear interpolation
            let i = (x.floor() as usize).min(nodes.saturating_sub(2));
            let frac = x - i as f64;
            for p in 0..d {
                m[(p, i * d + p)] += 1.0 - frac;
                if i + 1 < nodes {
                    m[(p, (i + 1) * d + p)] += frac;
                }
            }
        } else {
            let w = lagrange4(x - base as f64);
            for (k, wk) in w.iter().enumerate() {
                for p in 0..d {
                    m[(p, (base + k) * d + p)] += wk;
                }
            }
        }
        fine.push(m);
    }

    let delayed = |fine: &Vec<Mat<f64>>, f: usize, half: bool| -> Mat<f64> {
        if !half {
            return fine[f].clone();
        }
        let n = fine.len();
        let base = if f == 0 { 0 } else { (f - 1).min(n - 4) };
        let w = lagrange4(f as f64 + 0.5 - base as f64);
        let mut out = Mat::<f64>::zeros(d, ncols);
        for (k, wk) in w.iter().enumerate() {
            out += *wk * &fine[base + k];
        }
        out
    };

    let coeff = |j: usize, t: f64| system.eval_coeff(j, t);
    let mass_lu = system.mass().map(|m| m.to_dense().partial_piv_lu());
    let mut x = fine[hist_fine].clone();
    for f in hist_fine..total_fine {
        let t = t_of(f);
        // delayed terms at t, t + h/2, t + h
        let mut forcing = [Mat::<f64>::zeros(d, ncols), Mat::<f64>::zeros(d, ncols), Mat::<f64>::zeros(d, ncols)];
        for j in 1..grid.num_terms() {
            let off = grid.delay_steps[j] * mesh_n * substeps;
            let src = f - off;
            let samples = [delayed(&fine, src, false), delayed(&fine, src, true), fine[src + 1].clone()];
            for (k, dt) in [0.0, 0.5, 1.0].iter().enumerate() {
                let a = coeff(j, t + dt * hf)?;
                forcing[k] += &a * &samples[k];
            }
        }
        let a0 = [coeff(0, t)?, coeff(0, t + 0.5 * hf)?, coeff(0, t + hf)?];
        let rhs = |k: usize, y: &Mat<f64>| -> Mat<f64> {
            let mut r = &a0[k] * y + &forcing[k];
            if let Some(lu) = &mass_lu {
                lu.solve_in_place(r.as_mut());
            }
            r
        };
        let k1 = rhs(0, &x);
        let k2 = rhs(1, &(&x + (0.5 * hf) * &k1));
        let k3 = rhs(1, &(&x + (0.5 * hf) * &k2));
        let k4 = rhs(2, &(&x + hf * &k3));
        x = &x + (hf / 6.0) * (&k1 + 2.0 * &k2 + 2.0 * &k3 + &k4);
        fine.push(x.clone());
    }

    let mut out = Mat::<f64>::zeros(ncols, ncols);
    for i in 0..nodes {
        let f = total_fine + i * substeps - (nodes - 1) * substeps;
        for p in 0..d {
            for c in 0..ncols {
                out[(i * d + p, c)] = fine[f][(p, c)];
            }
        }
    }
    Ok(out)
}

/// Eigenvalues of the method-of-steps monodromy matrix, largest first.
pub fn brute_force_multipliers(
    system: &PeriodicDelaySystem,
    grid: &CommensurateGrid,
    mesh_n: usize,
    substeps: usize,
) -> Result<Vec<C64>> {
    let m = brute_force_monodromy(system, grid, mesh_n, substeps)?;
    let mut ev = eigvals_real(m.as_ref())?;
    ev.sort_by(crate::linalg::by_modulus_desc);
    Ok(ev)
}
