//! Local correction of eigenpairs of the characteristic matrix.

use faer::Mat;

use super::krylov::{gmres, GmresOptions};
use super::{FloquetPair, Stage};
use crate::charfun::CharEvalContext;
use crate::error::{FloquetError, Result};
use crate::linalg::{dotc, norm, SquareSolver, C64, ONE};

/// A matrix-valued function whose null vectors are sought.
pub trait CharMap: Sync {
    fn size(&self) -> usize;

    /// `F(mu) v`.
    fn apply(&self, mu: C64, v: &[C64]) -> Result<Vec<C64>>;

    /// Dense `F(mu)` together with `F'(mu) v`.
    fn jacobian_parts(&self, mu: C64, v: &[C64]) -> Result<(Mat<C64>, Vec<C64>)>;

    /// `F'(mu) v` without assembling `F`.
    fn derivative_action(&self, mu: C64, v: &[C64]) -> Result<Vec<C64>>;

    /// Block size `d` and whether the shift part of `F` is `B(mu)^T`
    /// rather than `B(mu)`.
    fn shift_layout(&self) -> (usize, bool);
}

/// Solves `S(mu) x = y` for `S = B` (or `B^T` when `transposed`).
fn shift_solve(d: usize, transposed: bool, mu: C64, y: &[C64]) -> Vec<C64> {
    let n = y.len();
    let mut x = vec![C64::new(0.0, 0.0); n];
    if transposed {
        x[..n - d].copy_from_slice(&y[d..]);
        for i in 0..d {
            x[n - d + i] = y[i] / mu;
        }
    } else {
        x[d..].copy_from_slice(&y[..n - d]);
        for i in 0..d {
            x[i] = y[n - d + i] / mu;
        }
    }
    x
}

/// `dS/dmu v`.
fn shift_derivative(d: usize, transposed: bool, v: &[C64]) -> Vec<C64> {
    let n = v.len();
    let mut out = vec![C64::new(0.0, 0.0); n];
    if transposed {
        out[..d].copy_from_slice(&v[n - d..]);
    } else {
        out[n - d..].copy_from_slice(&v[..d]);
    }
    out
}

/// `N(mu)`.
pub struct Forward<'a>(pub &'a CharEvalContext);

/// `M(mu) = N(mu)^T`, whose null vectors are left null vectors of `N(conj mu)`.
pub struct Transposed<'a>(pub &'a CharEvalContext);

impl CharMap for Forward<'_> {
    fn size(&self) -> usize {
        self.0.size()
    }

    fn apply(&self, mu: C64, v: &[C64]) -> Result<Vec<C64>> {
        self.0.n_action(mu, v)
    }

    fn jacobian_parts(&self, mu: C64, v: &[C64]) -> Result<(Mat<C64>, Vec<C64>)> {
        let n = self.0.assemble_n(mu)?;
        let (_, dv) = self.0.dn_dmu_action(mu, v)?;
        Ok((n, dv))
    }

    fn derivative_action(&self, mu: C64, v: &[C64]) -> Result<Vec<C64>> {
        Ok(self.0.dn_dmu_action(mu, v)?.1)
    }

    fn shift_layout(&self) -> (usize, bool) {
        (self.0.system().dim(), false)
    }
}

impl CharMap for Transposed<'_> {
    fn size(&self) -> usize {
        self.0.size()
    }

    fn apply(&self, mu: C64, v: &[C64]) -> Result<Vec<C64>> {
        self.0.m_action(mu, v)
    }

    fn jacobian_parts(&self, mu: C64, v: &[C64]) -> Result<(Mat<C64>, Vec<C64>)> {
        let (n, dn) = self.0.assemble_n_and_derivative(mu)?;
        let m = n.transpose().to_owned();
        let dm = dn.transpose();
        let dv = (0..v.len())
            .map(|r| (0..v.len()).map(|c| dm[(r, c)] * v[c]).sum())
            .collect();
        Ok((m, dv))
    }

    /// Central difference in `mu`; only used to build Jacobian actions.
    fn derivative_action(&self, mu: C64, v: &[C64]) -> Result<Vec<C64>> {
        let h = 1e-5 * mu.norm().max(1e-3);
        let p = self.0.m_action(mu + h, v)?;
        let m = self.0.m_action(mu - h, v)?;
        Ok(p.iter().zip(&m).map(|(a, b)| (a - b) / (2.0 * h)).collect())
    }

    fn shift_layout(&self) -> (usize, bool) {
        (self.0.system().dim(), true)
    }
}

/// Initial inverse Jacobian of the Broyden iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialInverse {
    /// `Exact` up to [`EXACT_JACOBIAN_LIMIT`], `Shift` above.
    Auto,
    Identity,
    /// Inverse of the assembled Jacobian (`N d` propagator solves).
    Exact,
    /// Inverse Jacobian of the model `F(mu) ~ -B(mu)`, exact when the
    /// propagator over one block is negligible. Costs no propagator solves.
    Shift,
}

/// Local iteration used by [`correct`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrectorMethod {
    /// Broyden up to [`EXACT_JACOBIAN_LIMIT`], Newton-Krylov above.
    Auto,
    Broyden,
    Newton,
    NewtonKrylov,
}

impl CorrectorMethod {
    pub fn parse(s: &str) -> Option<CorrectorMethod> {
        match s.to_ascii_lowercase().as_str() {
            "auto" => Some(CorrectorMethod::Auto),
            "broyden" => Some(CorrectorMethod::Broyden),
            "newton" => Some(CorrectorMethod::Newton),
            "newton-krylov" | "nk" => Some(CorrectorMethod::NewtonKrylov),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectorOptions {
    /// Absolute tolerance on the extended residual; `None` means `1e-12 N d`.
    pub tol: Option<f64>,
    pub max_iter: usize,
    pub init: InitialInverse,
    pub method: CorrectorMethod,
    /// Inner GMRES iterations per Newton-Krylov step.
    pub krylov_max: usize,
}

impl Default for CorrectorOptions {
    fn default() -> Self {
        CorrectorOptions {
            tol: None,
            max_iter: 60,
            init: InitialInverse::Auto,
            method: CorrectorMethod::Auto,
            krylov_max: 250,
        }
    }
}

/// Problems up to this size start Broyden from the exact Jacobian.
pub const EXACT_JACOBIAN_LIMIT: usize = 200;

impl CorrectorOptions {
    pub fn tolerance(&self, size: usize) -> f64 {
        self.tol.unwrap_or(1e-12 * size as f64)
    }

    fn resolved_init(&self, size: usize) -> InitialInverse {
        match self.init {
            InitialInverse::Auto if size <= EXACT_JACOBIAN_LIMIT => InitialInverse::Exact,
            InitialInverse::Auto => InitialInverse::Shift,
            other => other,
        }
    }
}

/// Converged pair plus the residual norm after each accepted step.
#[derive(Debug, Clone)]
pub struct Correction {
    pub pair: FloquetPair,
    pub history: Vec<f64>,
}

enum Base {
    Identity,
    Dense(Mat<C64>),
    /// Bordered inverse of `[[-S, -S' v0], [w^*, 0]]`, with `g = S^{-1} S' v0`
    /// and `sigma = w^* g`.
    Shift {
        d: usize,
        transposed: bool,
        mu: C64,
        w: Vec<C64>,
        g: Vec<C64>,
        sigma: C64,
    },
}

impl Base {
    fn shift(d: usize, transposed: bool, mu: C64, v0: &[C64], w: &[C64]) -> Base {
        let g = shift_solve(d, transposed, mu, &shift_derivative(d, transposed, v0));
        let sigma = dotc(w, &g);
        if !(sigma.norm() > 1e-300) || !sigma.is_finite() {
            return Base::Identity;
        }
        Base::Shift {
            d,
            transposed,
            mu,
            w: w.to_vec(),
            g,
            sigma,
        }
    }

    fn apply(&self, x: &[C64]) -> Vec<C64> {
        match self {
            Base::Identity => x.to_vec(),
            Base::Dense(h) => (0..x.len()).map(|r| (0..x.len()).map(|c| h[(r, c)] * x[c]).sum()).collect(),
            Base::Shift { d, transposed, mu, w, g, sigma } => {
                let n = g.len();
                let mut y: Vec<C64> = shift_solve(*d, *transposed, *mu, &x[..n]).into_iter().map(|c| -c).collect();
                let t = (dotc(w, &y) - x[n]) / sigma;
                for (yi, gi) in y.iter_mut().zip(g) {
                    *yi -= gi * t;
                }
                y.push(t);
                y
            }
        }
    }

    fn apply_adjoint(&self, x: &[C64]) -> Vec<C64> {
        match self {
            Base::Identity => x.to_vec(),
            Base::Dense(h) => (0..x.len())
                .map(|r| (0..x.len()).map(|c| h[(c, r)].conj() * x[c]).sum())
                .collect(),
            Base::Shift { d, transposed, mu, w, g, sigma } => {
                let n = g.len();
                let beta = (x[n] - dotc(g, &x[..n])) / sigma.conj();
                let z: Vec<C64> = x[..n].iter().zip(w).map(|(a, wi)| a + beta * wi).collect();
                // (S(mu)^{-1})^* is the inverse of the other shift at conj(mu)
                let mut y: Vec<C64> = shift_solve(*d, !*transposed, mu.conj(), &z).into_iter().map(|c| -c).collect();
                y.push(-beta);
                y
            }
        }
    }
}

/// `H = H_0 + sum_k a_k b_k^*`.
struct InverseJacobian {
    base: Base,
    a: Vec<Vec<C64>>,
    b: Vec<Vec<C64>>,
}

impl InverseJacobian {
    fn apply(&self, x: &[C64]) -> Vec<C64> {
        let mut y = self.base.apply(x);
        for (a, b) in self.a.iter().zip(&self.b) {
            let s = dotc(b, x);
            for (yi, ai) in y.iter_mut().zip(a) {
                *yi += s * ai;
            }
        }
        y
    }

    /// `H^* x`
    fn apply_adjoint(&self, x: &[C64]) -> Vec<C64> {
        let mut y = self.base.apply_adjoint(x);
        for (a, b) in self.a.iter().zip(&self.b) {
            let s = dotc(a, x);
            for (yi, bi) in y.iter_mut().zip(b) {
                *yi += s * bi;
            }
        }
        y
    }
}

struct Extended<'a, F: CharMap + ?Sized> {
    map: &'a F,
    w: Vec<C64>,
}

impl<F: CharMap + ?Sized> Extended<'_, F> {
    fn residual(&self, x: &[C64]) -> Result<Vec<C64>> {
        let n = self.w.len();
        let mu = x[n];
        if !(mu.norm() > 0.0) || !mu.is_finite() {
            return Err(FloquetError::NoConvergence(format!("iterate left the domain (mu = {})", mu)));
        }
        let mut f = self.map.apply(mu, &x[..n])?;
        f.push(dotc(&self.w, &x[..n]) - ONE);
        Ok(f)
    }

    fn jacobian(&self, x: &[C64]) -> Result<Mat<C64>> {
        let n = self.w.len();
        let (a, dv) = self.map.jacobian_parts(x[n], &x[..n])?;
        let mut j = Mat::<C64>::zeros(n + 1, n + 1);
        j.as_mut().submatrix_mut(0, 0, n, n).copy_from(&a);
        for r in 0..n {
            j[(r, n)] = dv[r];
            j[(n, r)] = self.w[r].conj();
        }
        Ok(j)
    }
}

fn start(v0: &[C64], mu0: C64) -> Result<(Vec<C64>, Vec<C64>)> {
    let nv = norm(v0);
    if !(nv > 0.0) || !(mu0.norm() > 0.0) {
        return Err(FloquetError::InvalidInput("corrector needs nonzero mu0 and v0".into()));
    }
    let w: Vec<C64> = v0.iter().map(|x| x / (nv * nv)).collect();
    let mut x = v0.to_vec();
    x.push(mu0);
    Ok((w, x))
}

fn finish(x: Vec<C64>, f: &[C64], seed: C64, iterations: usize, history: Vec<f64>) -> Correction {
    let n = x.len() - 1;
    let mu = x[n];
    let mut v = x;
    v.truncate(n);
    let nv = norm(&v);
    v.iter_mut().for_each(|c| *c /= nv);
    let residual_right = norm(&f[..n]) / nv;
    Correction {
        pair: FloquetPair {
            mu,
            v,
            u: None,
            residual_right,
            residual_left: None,
            stage: Stage::Corrected,
            converged: true,
            seed,
            iterations,
        },
        history,
    }
}

/// Evaluates the trial `x + gamma y`, treating evaluation failures as an
/// infinite residual.
fn trial<F: CharMap + ?Sized>(ext: &Extended<'_, F>, x: &[C64], y: &[C64], gamma: f64) -> (Vec<C64>, Option<Vec<C64>>, f64) {
    let xt: Vec<C64> = x.iter().zip(y).map(|(a, b)| a + gamma * b).collect();
    match ext.residual(&xt) {
        Ok(f) => {
            let r = norm(&f);
            (xt, Some(f), if r.is_finite() { r } else { f64::INFINITY })
        }
        Err(_) => (xt, None, f64::INFINITY),
    }
}

/// Damped step: `gamma = 1` first, halved up to four times while the
/// residual does not decrease; the best trial is accepted.
fn damped<F: CharMap + ?Sized>(
    ext: &Extended<'_, F>,
    x: &[C64],
    y: &[C64],
    r: f64,
) -> Option<(f64, Vec<C64>, Vec<C64>, f64)> {
    let mut best: Option<(f64, Vec<C64>, Vec<C64>, f64)> = None;
    let mut gamma = 1.0;
    for _ in 0..5 {
        let (xt, ft, rt) = trial(ext, x, y, gamma);
        if let Some(ft) = ft {
            if best.as_ref().is_none_or(|b| rt < b.3) {
                best = Some((gamma, xt, ft, rt));
            }
        }
        if rt < r {
            break;
        }
        gamma *= 0.5;
    }
    best
}

/// Damped good Broyden iteration on `(F(mu) v, w^* v - 1) = 0`.
pub fn broyden_correct<F: CharMap + ?Sized>(map: &F, mu0: C64, v0: &[C64], opts: &CorrectorOptions) -> Result<Correction> {
    let size = map.size();
    if v0.len() != size {
        return Err(FloquetError::InvalidInput(format!("seed has length {}, expected {}", v0.len(), size)));
    }
    let tol = opts.tolerance(size);
    let (w, mut x) = start(v0, mu0)?;
    let ext = Extended { map, w };
    let mut f = ext.residual(&x)?;
    let mut r = norm(&f);
    let mut history = vec![r];
    if r <= tol {
        return Ok(finish(x, &f, mu0, 0, history));
    }
    let base = match opts.resolved_init(size) {
        InitialInverse::Exact => {
            let j = ext.jacobian(&x)?;
            let lu = SquareSolver::dense(j.as_ref())?;
            let mut inv = Mat::<C64>::identity(size + 1, size + 1);
            lu.solve_in_place(inv.as_mut());
            Base::Dense(inv)
        }
        InitialInverse::Shift => {
            let (d, transposed) = map.shift_layout();
            Base::shift(d, transposed, mu0, &x[..size], &ext.w)
        }
        _ => Base::Identity,
    };
    let mut h = InverseJacobian {
        base,
        a: Vec::new(),
        b: Vec::new(),
    };
    let mut best = r;
    let mut stalls = 0;
    for it in 1..=opts.max_iter {
        let hf = h.apply(&f);
        let y: Vec<C64> = hf.iter().map(|c| -c).collect();
        let Some((gamma, xn, fn_, rn)) = damped(&ext, &x, &y, r) else {
            return Err(FloquetError::Diverged {
                iterations: it,
                residual: f64::INFINITY,
            });
        };
        // secant update along the undamped direction y
        let hfn = h.apply(&fn_);
        let num: Vec<C64> = hfn.iter().zip(&y).map(|(a, b)| a + (1.0 - gamma) * b).collect();
        let sum: Vec<C64> = hfn.iter().zip(&y).map(|(a, b)| a + b).collect();
        let denom = dotc(&y, &sum);
        if denom.norm() > 1e-300 {
            let bvec: Vec<C64> = h.apply_adjoint(&y);
            h.a.push(num.iter().map(|c| -c / denom).collect());
            h.b.push(bvec);
        }
        stalls = if rn < r { 0 } else { stalls + 1 };
        x = xn;
        f = fn_;
        r = rn;
        history.push(r);
        if r <= tol {
            return Ok(finish(x, &f, mu0, it, history));
        }
        best = best.min(r);
        if r > 10.0 * best {
            return Err(FloquetError::Diverged {
                iterations: it,
                residual: r,
            });
        }
        if stalls >= 3 {
            return Err(FloquetError::Stagnated {
                iterations: it,
                residual: r,
            });
        }
    }
    Err(FloquetError::NoConvergence(format!(
        "Broyden reached {} iterations with residual {:e}",
        opts.max_iter, r
    )))
}

/// Newton iteration with the exact Jacobian rebuilt at every step.
pub fn newton_correct<F: CharMap + ?Sized>(map: &F, mu0: C64, v0: &[C64], opts: &CorrectorOptions) -> Result<Correction> {
    let size = map.size();
    if v0.len() != size {
        return Err(FloquetError::InvalidInput(format!("seed has length {}, expected {}", v0.len(), size)));
    }
    let tol = opts.tolerance(size);
    let (w, mut x) = start(v0, mu0)?;
    let ext = Extended { map, w };
    let mut f = ext.residual(&x)?;
    let mut r = norm(&f);
    let mut history = vec![r];
    let mut best = r;
    let mut stalls = 0;
    for it in 1..=opts.max_iter {
        if r <= tol {
            return Ok(finish(x, &f, mu0, it - 1, history));
        }
        let j = ext.jacobian(&x)?;
        let lu = SquareSolver::dense(j.as_ref())?;
        let mut y: Vec<C64> = f.iter().map(|c| -c).collect();
        lu.solve_vec(&mut y);
        let Some((_, xn, fn_, rn)) = damped(&ext, &x, &y, r) else {
            return Err(FloquetError::Diverged {
                iterations: it,
                residual: f64::INFINITY,
            });
        };
        stalls = if rn < r { 0 } else { stalls + 1 };
        x = xn;
        f = fn_;
        r = rn;
        history.push(r);
        best = best.min(r);
        if r > 10.0 * best {
            return Err(FloquetError::Diverged {
                iterations: it,
                residual: r,
            });
        }
        if stalls >= 3 {
            return Err(FloquetError::Stagnated {
                iterations: it,
                residual: r,
            });
        }
    }
    if r <= tol {
        return Ok(finish(x, &f, mu0, opts.max_iter, history));
    }
    Err(FloquetError::NoConvergence(format!(
        "Newton reached {} iterations with residual {:e}",
        opts.max_iter, r
    )))
}

/// Inexact Newton: each step solves the extended Jacobian system by GMRES
/// preconditioned with the shift model, using one `F` action per inner
/// iteration.
pub fn newton_krylov_correct<F: CharMap + ?Sized>(
    map: &F,
    mu0: C64,
    v0: &[C64],
    opts: &CorrectorOptions,
) -> Result<Correction> {
    let size = map.size();
    if v0.len() != size {
        return Err(FloquetError::InvalidInput(format!("seed has length {}, expected {}", v0.len(), size)));
    }
    let tol = opts.tolerance(size);
    let (w, mut x) = start(v0, mu0)?;
    let ext = Extended { map, w };
    let mut f = ext.residual(&x)?;
    let mut r = norm(&f);
    let mut history = vec![r];
    let (d, transposed) = map.shift_layout();
    let mut stalls = 0;
    for it in 1..=opts.max_iter {
        if r <= tol {
            return Ok(finish(x, &f, mu0, it - 1, history));
        }
        let mu = x[size];
        let dv = map.derivative_action(mu, &x[..size])?;
        let base = Base::shift(d, transposed, mu, &x[..size], &ext.w);
        let op = |y: &[C64]| -> Result<Vec<C64>> {
            let mut out = map.apply(mu, &y[..size])?;
            out.iter_mut().zip(&dv).for_each(|(a, b)| *a += y[size] * b);
            out.push(dotc(&ext.w, &y[..size]));
            Ok(out)
        };
        let rhs: Vec<C64> = f.iter().map(|c| -c).collect();
        let gopts = GmresOptions {
            restart: 100,
            max_iter: opts.krylov_max,
            atol: (1e-4 * r).max(0.1 * tol),
        };
        let step = gmres(op, |y| base.apply(y), &rhs, &gopts)?;
        let Some((_, xn, fn_, rn)) = damped(&ext, &x, &step.x, r) else {
            return Err(FloquetError::Diverged {
                iterations: it,
                residual: f64::INFINITY,
            });
        };
        // a Newton step that does not halve the residual is far from home
        stalls = if rn < 0.5 * r { 0 } else { stalls + 1 };
        x = xn;
        f = fn_;
        r = rn;
        history.push(r);
        if stalls >= 2 {
            if r <= tol {
                break;
            }
            return Err(FloquetError::Stagnated {
                iterations: it,
                residual: r,
            });
        }
    }
    if r <= tol {
        let it = history.len() - 1;
        return Ok(finish(x, &f, mu0, it, history));
    }
    Err(FloquetError::NoConvergence(format!(
        "Newton-Krylov reached {} iterations with residual {:e}",
        opts.max_iter, r
    )))
}

/// Runs the corrector selected by `opts.method`.
pub fn correct<F: CharMap + ?Sized>(map: &F, mu0: C64, v0: &[C64], opts: &CorrectorOptions) -> Result<Correction> {
    match opts.method {
        CorrectorMethod::Broyden => broyden_correct(map, mu0, v0, opts),
        CorrectorMethod::Newton => newton_correct(map, mu0, v0, opts),
        CorrectorMethod::NewtonKrylov => newton_krylov_correct(map, mu0, v0, opts),
        CorrectorMethod::Auto if map.size() <= EXACT_JACOBIAN_LIMIT => broyden_correct(map, mu0, v0, opts),
        CorrectorMethod::Auto => newton_krylov_correct(map, mu0, v0, opts),
    }
}

/// Plain residual `||F(mu) v|| / ||v||`.
pub fn residual_norm<F: CharMap + ?Sized>(map: &F, mu: C64, v: &[C64]) -> Result<f64> {
    let f = map.apply(mu, v)?;
    Ok(norm(&f) / norm(v))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo(n: usize, seed: f64) -> Vec<C64> {
        (0..n)
            .map(|i| C64::new((seed + 1.3 * i as f64).sin(), (seed * 0.7 + 2.1 * i as f64).cos()))
            .collect()
    }

    #[test]
    fn shift_base_inverts_its_model() {
        let (d, nb) = (2, 3);
        let n = d * nb;
        let mu = C64::new(0.4, -0.9);
        let v0 = pseudo(n, 0.3);
        let w: Vec<C64> = v0.iter().map(|x| x / norm(&v0).powi(2)).collect();
        for transposed in [false, true] {
            let base = Base::shift(d, transposed, mu, &v0, &w);
            // columns of S(mu) by acting on unit vectors through its inverse
            let mut s = Mat::<C64>::zeros(n, n);
            for c in 0..n {
                let mut e = vec![C64::new(0.0, 0.0); n];
                e[c] = ONE;
                let col = shift_solve(d, transposed, mu, &e);
                for r in 0..n {
                    s[(r, c)] = col[r];
                }
            }
            let lu = SquareSolver::dense(s.as_ref()).unwrap();
            let mut sm = Mat::<C64>::identity(n, n);
            lu.solve_in_place(sm.as_mut());
            let ds = shift_derivative(d, transposed, &v0);
            let x = pseudo(n + 1, 1.7);
            // J0 x
            let mut jx: Vec<C64> = (0..n)
                .map(|r| -(0..n).map(|c| sm[(r, c)] * x[c]).sum::<C64>() - ds[r] * x[n])
                .collect();
            jx.push(dotc(&w, &x[..n]));
            let back = base.apply(&jx);
            let err: f64 = back.iter().zip(&x).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            assert!(err < 1e-12, "transposed {transposed}: {err}");
            let a = pseudo(n + 1, 4.2);
            let lhs = dotc(&a, &base.apply(&x));
            let rhs = dotc(&base.apply_adjoint(&a), &x);
            assert!((lhs - rhs).norm() < 1e-12);
        }
    }
}
