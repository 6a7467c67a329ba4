//! Minimisation of the squared spectral radius over system parameters.

use std::sync::Mutex;

use crate::charfun::CharEvalContext;
use crate::error::{FloquetError, Result};
use crate::linalg::C64;
use crate::model::{CommensurateGrid, PeriodicDelaySystem};
use crate::sensitivity::{gradient_with_left, GradientResult};
use crate::solve::{
    correct_seeds, left_eigenvector, merge_pairs, refine_left, residual_norm, stage_one, FloquetPair, LeftOptions,
    Seed, SpectrumOptions, Transposed, AUTO_DIRECT_LIMIT, SMALL_LEFT_LIMIT,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveOptions {
    pub spectrum: SpectrumOptions,
    pub left: LeftOptions,
    /// Reuse the previous pairs as seeds when the parameters moved less
    /// than this (Euclidean norm).
    pub warm_radius: f64,
    pub warm_start: WarmStart,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarmStart {
    /// Only when stage one would need Arnoldi; a dense stage one is cheap
    /// and cannot lose track of a branch that overtakes the tracked ones.
    Auto,
    Always,
    Never,
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        ObjectiveOptions {
            spectrum: SpectrumOptions::default(),
            left: LeftOptions::default(),
            warm_radius: 0.1,
            warm_start: WarmStart::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveEval {
    pub k: Vec<f64>,
    pub rho_sq: f64,
    /// `2 Re(conj(mu_D) d mu_D / dK)`.
    pub grad: Vec<f64>,
    pub dominant: FloquetPair,
    pub gradient: GradientResult,
    /// `|mu_D|` minus the largest modulus of the other multipliers.
    pub tie_gap: f64,
    pub warm_started: bool,
}

impl ObjectiveEval {
    pub fn rho(&self) -> f64 {
        self.rho_sq.sqrt()
    }
}

/// `K -> |mu_D(K)|^2` with discretisation settings held fixed.
pub struct Objective<'a> {
    system: &'a PeriodicDelaySystem,
    grid: &'a CommensurateGrid,
    opts: ObjectiveOptions,
    warm: Mutex<Option<(Vec<f64>, Vec<FloquetPair>)>>,
    /// Left vector of the last dominant multiplier.
    warm_left: Mutex<Option<Vec<C64>>>,
    evaluations: Mutex<usize>,
}

impl<'a> Objective<'a> {
    pub fn new(system: &'a PeriodicDelaySystem, grid: &'a CommensurateGrid, opts: ObjectiveOptions) -> Self {
        Objective {
            system,
            grid,
            opts,
            warm: Mutex::new(None),
            warm_left: Mutex::new(None),
            evaluations: Mutex::new(0),
        }
    }

    pub fn evaluations(&self) -> usize {
        *self.evaluations.lock().unwrap()
    }

    pub fn options(&self) -> &ObjectiveOptions {
        &self.opts
    }

    pub fn eval(&self, k: &[f64]) -> Result<ObjectiveEval> {
        *self.evaluations.lock().unwrap() += 1;
        let sys = self.system.with_param_values(k)?;
        let sopts = &self.opts.spectrum;
        let ctx = CharEvalContext::new(sys.clone(), self.grid.clone(), sopts.scheme, sopts.step)?;
        let previous = self.warm.lock().unwrap().clone();
        let mut warm_started = false;
        let mut pairs = Vec::new();
        let size = self.grid.history_blocks().max(1) * sys.dim() * (sopts.degree + 1);
        let allow = match self.opts.warm_start {
            WarmStart::Auto => size > AUTO_DIRECT_LIMIT,
            WarmStart::Always => true,
            WarmStart::Never => false,
        };
        if let (true, Some((k_prev, prev))) = (allow, previous) {
            let dist = k.iter().zip(&k_prev).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if dist < self.opts.warm_radius {
                let seeds: Vec<Seed> = prev
                    .iter()
                    .map(|p| Seed {
                        mu: p.mu,
                        v: p.v.clone(),
                        ritz_residual: None,
                    })
                    .collect();
                pairs = merge_pairs(correct_seeds(&ctx, &seeds, &sopts.corrector).0);
                warm_started = !pairs.is_empty();
            }
        }
        if !warm_started {
            let (seeds, _, _) = stage_one(&sys, self.grid, sopts)?;
            pairs = merge_pairs(correct_seeds(&ctx, &seeds, &sopts.corrector).0);
        }
        if pairs.is_empty() {
            return Err(FloquetError::NoCandidates);
        }
        *self.warm.lock().unwrap() = Some((k.to_vec(), pairs.clone()));
        let mut dominant = pairs[0].clone();
        if dominant.mu.im < 0.0 {
            dominant = dominant.conjugate();
        }
        let second = pairs
            .iter()
            .skip(1)
            .find(|p| (p.mu - dominant.mu).norm() > 1e-8 && (p.mu - dominant.mu.conj()).norm() > 1e-8 * dominant.mu.norm().max(1.0))
            .map_or(0.0, |p| p.mu.norm());
        let previous_left = if warm_started && ctx.size() > SMALL_LEFT_LIMIT {
            self.warm_left.lock().unwrap().clone()
        } else {
            None
        };
        let refined = previous_left.and_then(|u0| {
            let u = refine_left(&ctx, dominant.mu, &u0, &self.opts.left.corrector).ok()?;
            let r = residual_norm(&Transposed(&ctx), dominant.mu.conj(), &u).ok()?;
            Some((u, r))
        });
        let (u, lr) = match refined {
            Some(x) => x,
            None => left_eigenvector(&ctx, dominant.mu, &self.opts.left)?,
        };
        *self.warm_left.lock().unwrap() = Some(u.clone());
        let gradient = gradient_with_left(&ctx, dominant.mu, &dominant.v, &u, lr)?;
        dominant.u = Some(u);
        dominant.residual_left = Some(lr);
        let grad = gradient
            .dmu_dk
            .iter()
            .map(|d| 2.0 * (dominant.mu.conj() * d).re)
            .collect();
        Ok(ObjectiveEval {
            k: k.to_vec(),
            rho_sq: dominant.mu.norm_sqr(),
            grad,
            tie_gap: dominant.mu.norm() - second,
            dominant,
            gradient,
            warm_started,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinimizeOptions {
    pub c1: f64,
    pub c2: f64,
    pub max_bisections: usize,
    pub gtol: f64,
    pub step_tol: f64,
    pub max_iter: usize,
    pub max_restarts: usize,
    /// Length cap of the first trial step taken with an unscaled inverse
    /// Hessian.
    pub first_step: f64,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        MinimizeOptions {
            c1: 1e-4,
            c2: 0.5,
            max_bisections: 50,
            gtol: 1e-6,
            step_tol: 1e-12,
            max_iter: 200,
            max_restarts: 3,
            first_step: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GradientTolerance,
    StepTolerance,
    MaxIterations,
    LineSearchFailed,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::GradientTolerance => "gradient_tolerance",
            Termination::StepTolerance => "step_tolerance",
            Termination::MaxIterations => "max_iterations",
            Termination::LineSearchFailed => "line_search_failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub iteration: usize,
    pub k: Vec<f64>,
    pub rho_sq: f64,
    pub grad_norm: f64,
    /// Step length `t` along the search direction (0 for the start point).
    pub step: f64,
    pub line_search_evals: usize,
    pub restarted: bool,
    pub near_defective: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerTrace {
    pub entries: Vec<TraceEntry>,
    pub termination: Termination,
    pub options: MinimizeOptions,
    pub evaluations: usize,
}

#[derive(Debug, Clone)]
pub struct MinimizeResult {
    pub best: ObjectiveEval,
    pub trace: OptimizerTrace,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

enum Search {
    /// Both Wolfe conditions hold.
    Wolfe(ObjectiveEval, f64, usize),
    /// Only sufficient decrease was found.
    Decrease(ObjectiveEval, f64, usize),
    Failed,
}

/// Bisection-bracketing weak Wolfe search along `p`.
fn weak_wolfe(
    f: &mut dyn FnMut(&[f64]) -> Result<ObjectiveEval>,
    x: &ObjectiveEval,
    p: &[f64],
    t0: f64,
    opts: &MinimizeOptions,
) -> Search {
    let g0 = dot(&x.grad, p);
    let mut lo = 0.0;
    let mut hi = f64::INFINITY;
    let mut t = t0;
    let mut evals = 0;
    let mut best: Option<(ObjectiveEval, f64)> = None;
    let mut bisections = 0;
    let mut expansions = 0;
    loop {
        let trial: Vec<f64> = x.k.iter().zip(p).map(|(a, b)| a + t * b).collect();
        evals += 1;
        match f(&trial) {
            Ok(e) if e.rho_sq.is_finite() => {
                if e.rho_sq > x.rho_sq + opts.c1 * t * g0 {
                    hi = t;
                } else if dot(&e.grad, p) < opts.c2 * g0 {
                    lo = t;
                    best = Some((e, t));
                } else {
                    return Search::Wolfe(e, t, evals);
                }
            }
            _ => hi = t,
        }
        if hi.is_finite() {
            if bisections >= opts.max_bisections {
                break;
            }
            bisections += 1;
            t = 0.5 * (lo + hi);
        } else {
            if expansions >= 30 {
                break;
            }
            expansions += 1;
            t = 2.0 * lo;
        }
        if hi.is_finite() && hi - lo <= f64::EPSILON * hi.max(1.0) {
            break;
        }
    }
    match best {
        Some((e, t)) => Search::Decrease(e, t, evals),
        None => Search::Failed,
    }
}

/// BFGS with a weak Wolfe line search, suitable for objectives that are
/// smooth almost everywhere. The best iterate is always returned;
/// `LineSearchFailed` is reported through the trace.
pub fn minimize(objective: &Objective<'_>, k0: &[f64], opts: &MinimizeOptions) -> Result<MinimizeResult> {
    if k0.is_empty() {
        return Err(FloquetError::InvalidInput("no parameters to optimize".into()));
    }
    let mut f = |k: &[f64]| objective.eval(k);
    minimize_with(&mut f, k0, opts, || objective.evaluations())
}

/// [`minimize`] for an arbitrary objective.
pub fn minimize_with(
    f: &mut dyn FnMut(&[f64]) -> Result<ObjectiveEval>,
    k0: &[f64],
    opts: &MinimizeOptions,
    evaluations: impl Fn() -> usize,
) -> Result<MinimizeResult> {
    let n = k0.len();
    let mut x = f(k0)?;
    let identity = |scale: f64| -> Vec<Vec<f64>> {
        (0..n).map(|i| (0..n).map(|j| if i == j { scale } else { 0.0 }).collect()).collect()
    };
    let mut h = identity(1.0);
    let mut fresh = true;
    let mut restarts = 0;
    let mut entries = vec![TraceEntry {
        iteration: 0,
        k: x.k.clone(),
        rho_sq: x.rho_sq,
        grad_norm: norm(&x.grad),
        step: 0.0,
        line_search_evals: 0,
        restarted: false,
        near_defective: x.gradient.near_defective,
    }];
    let mut termination = Termination::MaxIterations;
    let mut restarted = false;
    for it in 1..=opts.max_iter {
        if norm(&x.grad) <= opts.gtol {
            termination = Termination::GradientTolerance;
            break;
        }
        let mut p: Vec<f64> = (0..n).map(|i| -dot(&h[i], &x.grad)).collect();
        if dot(&p, &x.grad) >= 0.0 {
            h = identity(1.0);
            fresh = true;
            p = x.grad.iter().map(|g| -g).collect();
        }
        let t0 = if fresh { (opts.first_step / norm(&p)).min(1.0) } else { 1.0 };
        let (next, t, evals, wolfe) = match weak_wolfe(f, &x, &p, t0, opts) {
            Search::Wolfe(e, t, ev) => (e, t, ev, true),
            Search::Decrease(e, t, ev) => (e, t, ev, false),
            Search::Failed => {
                if restarts < opts.max_restarts && !fresh {
                    restarts += 1;
                    h = identity(1.0);
                    fresh = true;
                    restarted = true;
                    continue;
                }
                termination = Termination::LineSearchFailed;
                break;
            }
        };
        let s: Vec<f64> = p.iter().map(|pi| t * pi).collect();
        let y: Vec<f64> = next.grad.iter().zip(&x.grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if wolfe && sy > 0.0 {
            if fresh {
                // scale the initial inverse Hessian before the first update
                h = identity(sy / dot(&y, &y));
                fresh = false;
            }
            let hy: Vec<f64> = (0..n).map(|i| dot(&h[i], &y)).collect();
            let yhy = dot(&y, &hy);
            let rho = 1.0 / sy;
            for i in 0..n {
                for j in 0..n {
                    h[i][j] += rho * ((1.0 + rho * yhy) * s[i] * s[j] - hy[i] * s[j] - s[i] * hy[j]);
                }
            }
        } else if !wolfe {
            if restarts >= opts.max_restarts {
                x = next;
                termination = Termination::LineSearchFailed;
                entries.push(entry(it, &x, t, evals, true));
                break;
            }
            restarts += 1;
            h = identity(1.0);
            fresh = true;
            restarted = true;
        }
        x = next;
        entries.push(entry(it, &x, t, evals, restarted));
        restarted = false;
        if norm(&s) <= opts.step_tol * norm(&x.k).max(1.0) {
            termination = Termination::StepTolerance;
            break;
        }
    }
    Ok(MinimizeResult {
        best: x,
        trace: OptimizerTrace {
            entries,
            termination,
            options: opts.clone(),
            evaluations: evaluations(),
        },
    })
}

fn entry(iteration: usize, x: &ObjectiveEval, step: f64, evals: usize, restarted: bool) -> TraceEntry {
    TraceEntry {
        iteration,
        k: x.k.clone(),
        rho_sq: x.rho_sq,
        grad_norm: norm(&x.grad),
        step,
        line_search_evals: evals,
        restarted,
        near_defective: x.gradient.near_defective,
    }
}
