//! Floquet multipliers from collocation estimates corrected on the
//! characteristic matrix.

mod arnoldi;
mod corrector;
mod krylov;
mod left;

use std::time::Instant;

use rayon::prelude::*;

pub use krylov::{gmres, GmresOptions, GmresResult};
pub use arnoldi::{arnoldi, ArnoldiOptions, ArnoldiResult, RitzPair};
pub use corrector::{
    broyden_correct, correct, newton_correct, newton_krylov_correct, residual_norm, CharMap, Correction,
    CorrectorMethod, CorrectorOptions, Forward, InitialInverse, Transposed, EXACT_JACOBIAN_LIMIT,
};
pub use left::{left_eigenvector, left_eigenvector_large, refine_left, left_eigenvector_small, LeftOptions, SMALL_LEFT_LIMIT};

use crate::charfun::{CharEvalContext, Scheme};
use crate::colloc::CollocationSystem;
use crate::error::{FloquetError, Result};
use crate::linalg::{by_modulus_desc, C64};
use crate::model::{CommensurateGrid, PeriodicDelaySystem};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Collocation,
    Corrected,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Collocation => "collocation",
            Stage::Corrected => "corrected",
        }
    }
}

/// A multiplier with its right (and possibly left) null vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FloquetPair {
    pub mu: C64,
    /// Unit-norm right null vector of `N(mu)`.
    pub v: Vec<C64>,
    /// Unit-norm left null vector, when computed.
    pub u: Option<Vec<C64>>,
    pub residual_right: f64,
    pub residual_left: Option<f64>,
    pub stage: Stage,
    pub converged: bool,
    /// Starting value of the correction (equal to `mu` when uncorrected).
    pub seed: C64,
    pub iterations: usize,
}

impl FloquetPair {
    /// The pair belonging to `conj(mu)` of a real system.
    pub fn conjugate(&self) -> FloquetPair {
        FloquetPair {
            mu: self.mu.conj(),
            v: self.v.iter().map(|x| x.conj()).collect(),
            u: self.u.as_ref().map(|u| u.iter().map(|x| x.conj()).collect()),
            residual_right: self.residual_right,
            residual_left: self.residual_left,
            stage: self.stage,
            converged: self.converged,
            seed: self.seed.conj(),
            iterations: self.iterations,
        }
    }
}

/// Stage-one estimate and the characteristic-matrix seed derived from it.
#[derive(Debug, Clone)]
pub struct Seed {
    pub mu: C64,
    pub v: Vec<C64>,
    /// Ritz residual when the estimate came from Arnoldi.
    pub ritz_residual: Option<f64>,
}

/// Largest problem handled by the dense eigensolver.
pub const DIRECT_LIMIT: usize = 4000;

/// Eigenvalues of the dense `U_M` above `floor` in modulus, dominant first,
/// at most `limit` of them, with their seeds.
pub fn direct_stage(cs: &CollocationSystem, floor: f64, limit: Option<usize>) -> Result<Vec<Seed>> {
    if cs.size() > DIRECT_LIMIT {
        return Err(FloquetError::TooLargeForDirect {
            size: cs.size(),
            limit: DIRECT_LIMIT,
        });
    }
    let (vals, vecs) = cs.eigen()?;
    let mut order: Vec<usize> = (0..vals.len()).filter(|&i| vals[i].norm() > floor).collect();
    order.sort_by(|&a, &b| by_modulus_desc(&vals[a], &vals[b]));
    if let Some(l) = limit {
        order.truncate(l);
    }
    let mut out = Vec::with_capacity(order.len());
    for i in order {
        let c: Vec<C64> = (0..vecs.nrows()).map(|r| vecs[(r, i)]).collect();
        let v = cs.seed_from_eigenvector(&c);
        if v.iter().all(|x| *x == C64::new(0.0, 0.0)) || v.iter().any(|x| !x.is_finite()) {
            continue;
        }
        out.push(Seed {
            mu: vals[i],
            v,
            ritz_residual: None,
        });
    }
    Ok(out)
}

/// Ritz estimates of the dominant eigenvalues of `U_M` with their seeds.
pub fn arnoldi_stage(cs: &CollocationSystem, opts: &ArnoldiOptions) -> Result<(Vec<Seed>, ArnoldiResult)> {
    let res = arnoldi(cs.size(), |x| cs.apply_monodromy(x.as_ref()), opts)?;
    let mut seeds = Vec::new();
    for p in &res.pairs {
        let v = cs.seed_from_eigenvector(&p.vector);
        if v.iter().all(|x| *x == C64::new(0.0, 0.0)) || v.iter().any(|x| !x.is_finite()) {
            continue;
        }
        seeds.push(Seed {
            mu: p.value,
            v,
            ritz_residual: Some(p.residual),
        });
    }
    Ok((seeds, res))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOneMethod {
    /// Dense below [`AUTO_DIRECT_LIMIT`], Arnoldi above.
    Auto,
    Direct,
    Arnoldi,
}

/// Size up to which `Auto` uses the dense eigensolver.
pub const AUTO_DIRECT_LIMIT: usize = 1500;

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumOptions {
    pub degree: usize,
    pub num_wanted: usize,
    pub method: StageOneMethod,
    pub correct: bool,
    pub scheme: Scheme,
    pub step: f64,
    pub krylov_dim: usize,
    pub floor: f64,
    pub corrector: CorrectorOptions,
}

impl Default for SpectrumOptions {
    fn default() -> Self {
        SpectrumOptions {
            degree: 15,
            num_wanted: 10,
            method: StageOneMethod::Auto,
            correct: true,
            scheme: Scheme::Rk4,
            step: 1e-3,
            krylov_dim: 60,
            floor: 1e-8,
            corrector: CorrectorOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportMeta {
    pub degree: usize,
    pub step: f64,
    pub scheme: Scheme,
    pub method: StageOneMethod,
    pub blocks: usize,
    pub history_blocks: usize,
    pub delta: f64,
    pub stage_one_secs: f64,
    pub stage_two_secs: f64,
    pub discarded: usize,
    pub arnoldi_iterations: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    /// Sorted by decreasing modulus, duplicates merged.
    pub pairs: Vec<FloquetPair>,
    pub meta: ReportMeta,
}

impl SpectrumReport {
    pub fn dominant(&self) -> Option<&FloquetPair> {
        self.pairs.first()
    }

    pub fn spectral_radius(&self) -> f64 {
        self.pairs.first().map_or(0.0, |p| p.mu.norm())
    }

    /// Modulus of the largest multiplier that is neither the dominant one
    /// nor its conjugate.
    pub fn second_modulus(&self) -> f64 {
        let Some(d) = self.pairs.first() else {
            return 0.0;
        };
        self.pairs
            .iter()
            .skip(1)
            .find(|p| !close(p.mu, d.mu.conj()))
            .map_or(0.0, |p| p.mu.norm())
    }
}

fn close(a: C64, b: C64) -> bool {
    (a - b).norm() <= 1e-8 * a.norm().max(1.0)
}

/// Corrects each seed; seeds whose correction fails or drifts by more than
/// half their modulus are dropped. For real systems only one member of each
/// conjugate seed pair is corrected; [`merge_pairs`] restores the other.
pub fn correct_seeds(
    ctx: &CharEvalContext,
    seeds: &[Seed],
    opts: &CorrectorOptions,
) -> (Vec<FloquetPair>, usize) {
    let mut work: Vec<&Seed> = Vec::new();
    for s in seeds {
        if s.mu.im < 0.0 && seeds.iter().any(|t| t.mu.im > 0.0 && (t.mu - s.mu.conj()).norm() <= 1e-8 * s.mu.norm()) {
            continue;
        }
        work.push(s);
    }
    let map = Forward(ctx);
    let results: Vec<Option<FloquetPair>> = work
        .par_iter()
        .map(|s| {
            let c = correct(&map, s.mu, &s.v, opts).ok()?;
            let drift = (c.pair.mu.norm() - s.mu.norm()).abs();
            (drift <= 0.5 * s.mu.norm()).then_some(c.pair)
        })
        .collect();
    let failed = results.iter().filter(|r| r.is_none()).count();
    let pairs: Vec<FloquetPair> = results.into_iter().flatten().collect();
    (pairs, failed)
}

/// Sorts, merges near-duplicates (keeping the smaller residual) and adds
/// missing conjugates.
pub fn merge_pairs(mut pairs: Vec<FloquetPair>) -> Vec<FloquetPair> {
    let mut extra = Vec::new();
    for p in &pairs {
        if p.mu.im.abs() > 1e-10 && !pairs.iter().any(|q| close(q.mu, p.mu.conj())) {
            extra.push(p.conjugate());
        }
    }
    pairs.extend(extra);
    pairs.sort_by(|a, b| by_modulus_desc(&a.mu, &b.mu));
    let mut out: Vec<FloquetPair> = Vec::with_capacity(pairs.len());
    for p in pairs {
        if let Some(q) = out.iter_mut().find(|q| close(q.mu, p.mu)) {
            if p.residual_right < q.residual_right {
                *q = p;
            }
        } else {
            out.push(p);
        }
    }
    out.sort_by(|a, b| by_modulus_desc(&a.mu, &b.mu));
    out
}

/// Stage-one estimates for `system`.
pub fn stage_one(
    system: &PeriodicDelaySystem,
    grid: &CommensurateGrid,
    opts: &SpectrumOptions,
) -> Result<(Vec<Seed>, StageOneMethod, Option<usize>)> {
    let cs = CollocationSystem::assemble(system, grid, opts.degree)?;
    let method = match opts.method {
        StageOneMethod::Auto if cs.size() <= AUTO_DIRECT_LIMIT => StageOneMethod::Direct,
        StageOneMethod::Auto => StageOneMethod::Arnoldi,
        m => m,
    };
    match method {
        StageOneMethod::Direct => Ok((direct_stage(&cs, opts.floor, Some(opts.num_wanted))?, method, None)),
        _ => {
            let aopts = ArnoldiOptions {
                krylov_dim: opts.krylov_dim.max(opts.num_wanted + 1),
                num_wanted: opts.num_wanted,
                ..Default::default()
            };
            let (seeds, res) = arnoldi_stage(&cs, &aopts)?;
            let seeds = seeds.into_iter().filter(|s| s.mu.norm() > opts.floor).collect();
            Ok((seeds, method, Some(res.iterations)))
        }
    }
}

/// Collocation estimates followed by local correction on the
/// characteristic matrix.
pub fn two_stage(
    system: &PeriodicDelaySystem,
    grid: &CommensurateGrid,
    opts: &SpectrumOptions,
) -> Result<SpectrumReport> {
    let t0 = Instant::now();
    let (seeds, method, arnoldi_iterations) = stage_one(system, grid, opts)?;
    let stage_one_secs = t0.elapsed().as_secs_f64();
    let mut meta = ReportMeta {
        degree: opts.degree,
        step: opts.step,
        scheme: opts.scheme,
        method,
        blocks: grid.blocks,
        history_blocks: grid.history_blocks(),
        delta: grid.delta,
        stage_one_secs,
        stage_two_secs: 0.0,
        discarded: 0,
        arnoldi_iterations,
    };
    if !opts.correct {
        let pairs = seeds
            .into_iter()
            .map(|s| FloquetPair {
                mu: s.mu,
                v: s.v,
                u: None,
                residual_right: f64::NAN,
                residual_left: None,
                stage: Stage::Collocation,
                converged: false,
                seed: s.mu,
                iterations: 0,
            })
            .collect();
        return Ok(SpectrumReport {
            pairs: merge_pairs(pairs),
            meta,
        });
    }
    let t1 = Instant::now();
    let ctx = CharEvalContext::new(system.clone(), grid.clone(), opts.scheme, opts.step)?;
    meta.step = ctx.step_size();
    let (pairs, discarded) = correct_seeds(&ctx, &seeds, &opts.corrector);
    meta.stage_two_secs = t1.elapsed().as_secs_f64();
    meta.discarded = discarded;
    if pairs.is_empty() && !seeds.is_empty() {
        return Err(FloquetError::NoCandidates);
    }
    Ok(SpectrumReport {
        pairs: merge_pairs(pairs),
        meta,
    })
}
