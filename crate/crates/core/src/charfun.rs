//! Finite-dimensional characteristic matrix `N(mu)` of the periodic delay
//! system and its discretisation by fixed-step time integration.
//!
//! A candidate multiplier `mu` and block vector `v = (v_1, .., v_N)` define
//! the boundary value problem `q' = A(s, mu) q` on `s in [0, 1]` with
//! `q(0) = v`; then `N(mu) v = q(1) - B(mu) v`. Multipliers are the values of
//! `mu` for which `N(mu)` is singular.

use std::sync::OnceLock;

use faer::Mat;

use crate::error::{FloquetError, Result};
use crate::linalg::{complexify, SparsePattern, SquareSolver, States, C64, ONE, ZERO};
use crate::model::{CoeffMatrix, CommensurateGrid, PeriodicDelaySystem, SparseReal};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Rk4,
    Trapezoidal,
}

impl Scheme {
    pub fn parse(s: &str) -> Option<Scheme> {
        match s.to_ascii_lowercase().as_str() {
            "rk4" => Some(Scheme::Rk4),
            "trap" | "trapezoidal" => Some(Scheme::Trapezoidal),
            _ => None,
        }
    }
}

/// Splits a global block index `k` into the period shift `a` and the local
/// block `b in 1..=N`, so that `k = a N + b`.
pub fn block_split(k: i64, blocks: usize) -> (i64, usize) {
    let n = blocks as i64;
    ((k - 1).div_euclid(n), ((k - 1).rem_euclid(n) + 1) as usize)
}

/// Number of integration steps on `[0, 1]` for a requested step size.
pub fn step_count(delta: f64) -> usize {
    ((1.0 / delta) - 1e-9).ceil().max(1.0) as usize
}

/// Block `row` of `A(s, mu) q` receives `Delta mu^power A_j(.) q_col`.
#[derive(Debug, Clone, Copy)]
struct Term {
    row: usize,
    col: usize,
    j: usize,
    power: i64,
}

/// Coefficient values at every integration point and block.
struct CoeffTable {
    pats: Vec<Vec<(usize, usize)>>,
    vals: Vec<Vec<f64>>,
    varying: Vec<bool>,
    blocks: usize,
}

impl CoeffTable {
    fn build(
        system: &PeriodicDelaySystem,
        mats: &[CoeffMatrix],
        grid: &CommensurateGrid,
        points: &[f64],
    ) -> Result<Self> {
        let params = system.param_values();
        let mut pats = Vec::new();
        let mut vals = Vec::new();
        let mut varying = Vec::new();
        let mut buf = Vec::new();
        for (j, m) in mats.iter().enumerate() {
            pats.push(m.entries().iter().map(|e| (e.row, e.col)).collect());
            let dep = m.depends_on_time();
            let mut v = Vec::new();
            if dep {
                for &s in points {
                    for n in 0..grid.blocks {
                        let t = system.coeff_time(j, (s + n as f64) * grid.delta);
                        m.eval_values(t, params, &mut buf)?;
                        v.extend_from_slice(&buf);
                    }
                }
            } else {
                m.eval_values(0.0, params, &mut buf)?;
                v.extend_from_slice(&buf);
            }
            vals.push(v);
            varying.push(dep);
        }
        Ok(CoeffTable {
            pats,
            vals,
            varying,
            blocks: grid.blocks,
        })
    }

    fn get(&self, j: usize, point: usize, block: usize) -> &[f64] {
        let nnz = self.pats[j].len();
        if self.varying[j] {
            let off = (point * self.blocks + block) * nnz;
            &self.vals[j][off..off + nnz]
        } else {
            &self.vals[j][..nnz]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    A,
    DMu,
}

/// Constant mass matrix, applied blockwise.
struct Mass {
    matrix: SparseReal,
    solver: SquareSolver,
}

/// A set of blocks closed under the coupling of `A(s, mu)`.
struct Component {
    blocks: Vec<usize>,
    dim: usize,
    sparse: Option<SparsePattern>,
}

/// Everything needed to evaluate the discretised characteristic matrix.
pub struct CharEvalContext {
    system: PeriodicDelaySystem,
    grid: CommensurateGrid,
    scheme: Scheme,
    steps: usize,
    dim: usize,
    terms: Vec<Term>,
    table: CoeffTable,
    dtables: OnceLock<std::result::Result<Vec<CoeffTable>, FloquetError>>,
    mass: Option<Mass>,
    comps: Vec<Component>,
    local: Vec<usize>,
}

impl std::fmt::Debug for CharEvalContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CharEvalContext")
            .field("grid", &self.grid)
            .field("scheme", &self.scheme)
            .field("steps", &self.steps)
            .finish()
    }
}

/// What the parameter sensitivity formula needs at a converged pair.
#[derive(Debug, Clone)]
pub struct ParamIngredients {
    /// `N(mu) v`.
    pub residual: Vec<C64>,
    /// `q_mu(1)`.
    pub q_mu: Vec<C64>,
    /// `q_{K_p}(1)` for every parameter.
    pub q_params: Vec<Vec<C64>>,
    /// `dB/dmu v = (0, .., 0, v_1)`.
    pub v_last: Vec<C64>,
}

impl CharEvalContext {
    pub fn new(system: PeriodicDelaySystem, grid: CommensurateGrid, scheme: Scheme, delta: f64) -> Result<Self> {
        if !(delta.is_finite() && delta > 0.0) {
            return Err(FloquetError::InvalidInput(format!("step size must be positive, got {}", delta)));
        }
        let steps = step_count(delta);
        let dim = system.dim();
        let nb = grid.blocks;
        let h = 1.0 / steps as f64;
        let points: Vec<f64> = match scheme {
            Scheme::Rk4 => (0..=2 * steps).map(|i| i as f64 * 0.5 * h).collect(),
            Scheme::Trapezoidal => (0..=steps).map(|i| i as f64 * h).collect(),
        };
        let mut terms = Vec::new();
        for n in 1..=nb {
            for j in 0..grid.num_terms() {
                if system.coeff(j).entries().is_empty() {
                    continue;
                }
                let (power, b) = block_split(n as i64 - grid.delay_steps[j] as i64, nb);
                terms.push(Term {
                    row: n - 1,
                    col: b - 1,
                    j,
                    power,
                });
            }
        }
        let table = CoeffTable::build(&system, system.coeffs(), &grid, &points)?;
        let mass = match system.mass() {
            Some(m) => {
                let dense = complexify(m.to_dense().as_ref());
                let solver = if dim <= 64 {
                    SquareSolver::dense(dense.as_ref())?
                } else {
                    let idx: Vec<(usize, usize)> = m.entries.iter().map(|&(r, c, _)| (r, c)).collect();
                    let v: Vec<C64> = m.entries.iter().map(|&(_, _, x)| C64::new(x, 0.0)).collect();
                    SparsePattern::new(dim, &idx)?.factor(&v)?
                };
                Some(Mass {
                    matrix: m.clone(),
                    solver,
                })
            }
            None => None,
        };

        // connected components of the block coupling graph
        let mut parent: Vec<usize> = (0..nb).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for t in &terms {
            let (a, b) = (find(&mut parent, t.row), find(&mut parent, t.col));
            if a != b {
                parent[a] = b;
            }
        }
        let mut comp_of = vec![usize::MAX; nb];
        let mut comps: Vec<Component> = Vec::new();
        let mut local = vec![0; nb];
        for n in 0..nb {
            let r = find(&mut parent, n);
            if comp_of[r] == usize::MAX {
                comp_of[r] = comps.len();
                comps.push(Component {
                    blocks: Vec::new(),
                    dim: 0,
                    sparse: None,
                });
            }
            let c = &mut comps[comp_of[r]];
            local[n] = c.blocks.len();
            c.blocks.push(n);
            c.dim += dim;
        }
        let mut ctx = CharEvalContext {
            system,
            grid,
            scheme,
            steps,
            dim,
            terms,
            table,
            dtables: OnceLock::new(),
            mass,
            comps,
            local,
        };
        if scheme == Scheme::Trapezoidal {
            for ci in 0..ctx.comps.len() {
                let idx = ctx.step_pattern(ci);
                let cd = ctx.comps[ci].dim;
                if cd > 64 && (idx.len() as f64) < 0.1 * (cd * cd) as f64 {
                    ctx.comps[ci].sparse = Some(SparsePattern::new(cd, &idx)?);
                }
            }
        }
        Ok(ctx)
    }

    pub fn system(&self) -> &PeriodicDelaySystem {
        &self.system
    }

    pub fn grid(&self) -> &CommensurateGrid {
        &self.grid
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// Number of integration steps on the unit interval.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Effective step size after snapping.
    pub fn step_size(&self) -> f64 {
        1.0 / self.steps as f64
    }

    /// Size `N d` of the characteristic matrix.
    pub fn size(&self) -> usize {
        self.grid.blocks * self.dim
    }

    fn point_stride(&self) -> usize {
        match self.scheme {
            Scheme::Rk4 => 2,
            Scheme::Trapezoidal => 1,
        }
    }

    fn scales(&self, kind: Kind, mu: C64) -> Vec<C64> {
        let delta = self.grid.delta;
        self.terms
            .iter()
            .map(|t| match kind {
                Kind::A => mu.powi(t.power as i32) * delta,
                Kind::DMu => {
                    if t.power == 0 {
                        ZERO
                    } else {
                        mu.powi(t.power as i32 - 1) * (delta * t.power as f64)
                    }
                }
            })
            .collect()
    }

    fn dtables(&self) -> Result<&[CoeffTable]> {
        let r = self.dtables.get_or_init(|| {
            let stride = self.point_stride();
            let h = self.step_size();
            let points: Vec<f64> = (0..=stride * self.steps).map(|i| i as f64 * h / stride as f64).collect();
            let mut out = Vec::new();
            for p in 0..self.system.params().len() {
                let mats = self.system.coeff_param_derivatives(p)?;
                out.push(CoeffTable::build(&self.system, mats, &self.grid, &points)?);
            }
            Ok(out)
        });
        r.as_deref().map_err(Clone::clone)
    }

    /// `y += sum_terms scale * A_j x` at integration point `point`.
    fn apply(&self, table: &CoeffTable, scales: &[C64], point: usize, x: &States, y: &mut States, transpose: bool) {
        let d = self.dim;
        for c in 0..x.cols {
            let xc = x.col(c);
            let yc = y.col_mut(c);
            for (t, &sc) in self.terms.iter().zip(scales) {
                if sc == ZERO {
                    continue;
                }
                let vals = table.get(t.j, point, t.row);
                let pat = &table.pats[t.j];
                let (ro, co) = (t.row * d, t.col * d);
                if !transpose {
                    for (&(r, cc), &v) in pat.iter().zip(vals) {
                        yc[ro + r] += sc * v * xc[co + cc];
                    }
                } else {
                    for (&(r, cc), &v) in pat.iter().zip(vals) {
                        yc[co + cc] += sc * v * xc[ro + r];
                    }
                }
            }
        }
    }

    fn mass_solve(&self, y: &mut States, transpose: bool) {
        if let Some(m) = &self.mass {
            let wide = y.as_wide_mut(self.dim);
            if transpose {
                m.solver.solve_transpose_in_place(wide);
            } else {
                m.solver.solve_in_place(wide);
            }
        }
    }

    /// `(I_N kron E) x`, or its transpose.
    fn mass_mul(&self, x: &States, transpose: bool) -> States {
        match &self.mass {
            None => x.clone(),
            Some(m) => {
                let d = self.dim;
                let mut y = States::zeros(x.rows, x.cols);
                let nblk = x.data.len() / d;
                for b in 0..nblk {
                    let xs = &x.data[b * d..(b + 1) * d];
                    let ys = &mut y.data[b * d..(b + 1) * d];
                    for &(r, c, v) in &m.matrix.entries {
                        if transpose {
                            ys[c] += v * xs[r];
                        } else {
                            ys[r] += v * xs[c];
                        }
                    }
                }
                y
            }
        }
    }

    /// Index pairs of the trapezoidal step matrix of component `ci` in the
    /// order `step_values` produces them.
    fn step_pattern(&self, ci: usize) -> Vec<(usize, usize)> {
        let comp = &self.comps[ci];
        let d = self.dim;
        let mut idx = Vec::new();
        for &b in &comp.blocks {
            let o = self.local[b] * d;
            match &self.mass {
                Some(m) => idx.extend(m.matrix.entries.iter().map(|&(r, c, _)| (o + r, o + c))),
                None => idx.extend((0..d).map(|i| (o + i, o + i))),
            }
        }
        for t in self.terms.iter().filter(|t| self.in_comp(ci, t.row)) {
            let (ro, co) = (self.local[t.row] * d, self.local[t.col] * d);
            idx.extend(self.table.pats[t.j].iter().map(|&(r, c)| (ro + r, co + c)));
        }
        idx
    }

    fn in_comp(&self, ci: usize, block: usize) -> bool {
        self.comps[ci].blocks.binary_search(&block).is_ok()
    }

    /// Values of `I kron E - h/2 A(s_point, mu)` restricted to a component.
    fn step_values(&self, ci: usize, point: usize, scales: &[C64], h: f64) -> Vec<C64> {
        let comp = &self.comps[ci];
        let d = self.dim;
        let mut vals = Vec::new();
        for _ in &comp.blocks {
            match &self.mass {
                Some(m) => vals.extend(m.matrix.entries.iter().map(|&(_, _, v)| C64::new(v, 0.0))),
                None => vals.extend((0..d).map(|_| ONE)),
            }
        }
        for (t, &sc) in self.terms.iter().zip(scales) {
            if !self.in_comp(ci, t.row) {
                continue;
            }
            let f = -0.5 * h * sc;
            vals.extend(self.table.get(t.j, point, t.row).iter().map(|&v| f * v));
        }
        vals
    }

    fn factor_step(&self, ci: usize, point: usize, scales: &[C64], h: f64) -> Result<SquareSolver> {
        let vals = self.step_values(ci, point, scales, h);
        let comp = &self.comps[ci];
        let s = point as f64 * h;
        let res = match &comp.sparse {
            Some(p) => p.factor(&vals),
            None => {
                let mut m = Mat::<C64>::zeros(comp.dim, comp.dim);
                for (&(r, c), v) in self.step_pattern(ci).iter().zip(&vals) {
                    m[(r, c)] += *v;
                }
                SquareSolver::dense(m.as_ref())
            }
        };
        res.map_err(|_| FloquetError::SingularStep { s })
    }

    /// Whether component `ci` has identical coefficients at two points.
    fn same_values(&self, ci: usize, p1: usize, p2: usize) -> bool {
        self.terms.iter().filter(|t| self.in_comp(ci, t.row)).all(|t| {
            !self.table.varying[t.j] || self.table.get(t.j, p1, t.row) == self.table.get(t.j, p2, t.row)
        })
    }

    /// Solves the step system for every component, reusing factors when
    /// the coefficients did not change since `cache` was filled.
    fn step_solve(
        &self,
        cache: &mut [Option<(usize, SquareSolver)>],
        point: usize,
        scales: &[C64],
        h: f64,
        rhs: &mut [&mut States],
        transpose: bool,
    ) -> Result<()> {
        let d = self.dim;
        for (ci, comp) in self.comps.iter().enumerate() {
            let reuse = matches!(&cache[ci], Some((p, _)) if self.same_values(ci, *p, point));
            if !reuse {
                cache[ci] = Some((point, self.factor_step(ci, point, scales, h)?));
            }
            let solver = &cache[ci].as_ref().unwrap().1;
            let total_cols: usize = rhs.iter().map(|r| r.cols).sum();
            let mut buf = Mat::<C64>::zeros(comp.dim, total_cols);
            let mut col = 0;
            for r in rhs.iter() {
                for c in 0..r.cols {
                    let src = r.col(c);
                    for (li, &b) in comp.blocks.iter().enumerate() {
                        for i in 0..d {
                            buf[(li * d + i, col)] = src[b * d + i];
                        }
                    }
                    col += 1;
                }
            }
            if transpose {
                solver.solve_transpose_in_place(buf.as_mut());
            } else {
                solver.solve_in_place(buf.as_mut());
            }
            let mut col = 0;
            for r in rhs.iter_mut() {
                for c in 0..r.cols {
                    let dst = r.col_mut(c);
                    for (li, &b) in comp.blocks.iter().enumerate() {
                        for i in 0..d {
                            dst[b * d + i] = buf[(li * d + i, col)];
                        }
                    }
                    col += 1;
                }
            }
        }
        Ok(())
    }

    /// Integrates `q' = A q` with `q(0) = x0` together with variational
    /// states `z_i' = A z_i + G_i q`, `z_i(0) = 0`. Each forcing is given by
    /// its coefficient table and term scales. `observe` sees every node.
    fn integrate(
        &self,
        mu: C64,
        x0: States,
        forcings: &[(&CoeffTable, Vec<C64>)],
        mut observe: Option<&mut dyn FnMut(usize, &States)>,
    ) -> Result<Vec<States>> {
        let h = self.step_size();
        let sa = self.scales(Kind::A, mu);
        let (rows, cols) = (x0.rows, x0.cols);
        let mut y: Vec<States> = std::iter::once(x0)
            .chain(forcings.iter().map(|_| States::zeros(rows, cols)))
            .collect();
        if let Some(f) = observe.as_mut() {
            f(0, &y[0]);
        }
        match self.scheme {
            Scheme::Rk4 => {
                let rhs = |point: usize, y: &[States], out: &mut [States]| {
                    for o in out.iter_mut() {
                        o.fill_zero();
                    }
                    for (yi, oi) in y.iter().zip(out.iter_mut()) {
                        self.apply(&self.table, &sa, point, yi, oi, false);
                    }
                    for (i, (tab, sc)) in forcings.iter().enumerate() {
                        self.apply(tab, sc, point, &y[0], &mut out[i + 1], false);
                    }
                    for o in out.iter_mut() {
                        self.mass_solve(o, false);
                    }
                };
                let shift = |dst: &mut [States], y: &[States], k: &[States], a: f64| {
                    for ((d, yi), ki) in dst.iter_mut().zip(y).zip(k) {
                        for ((dv, yv), kv) in d.data.iter_mut().zip(&yi.data).zip(&ki.data) {
                            *dv = yv + a * kv;
                        }
                    }
                };
                let mut k1 = y.clone();
                let mut k2 = y.clone();
                let mut k3 = y.clone();
                let mut k4 = y.clone();
                let mut tmp = y.clone();
                for k in 0..self.steps {
                    let (p0, pm, p1) = (2 * k, 2 * k + 1, 2 * k + 2);
                    rhs(p0, &y, &mut k1);
                    shift(&mut tmp, &y, &k1, 0.5 * h);
                    rhs(pm, &tmp, &mut k2);
                    shift(&mut tmp, &y, &k2, 0.5 * h);
                    rhs(pm, &tmp, &mut k3);
                    shift(&mut tmp, &y, &k3, h);
                    rhs(p1, &tmp, &mut k4);
                    for i in 0..y.len() {
                        for (j, yv) in y[i].data.iter_mut().enumerate() {
                            *yv += (h / 6.0) * (k1[i].data[j] + k4[i].data[j]) + (h / 3.0) * (k2[i].data[j] + k3[i].data[j]);
                        }
                    }
                    if let Some(f) = observe.as_mut() {
                        f(k + 1, &y[0]);
                    }
                }
            }
            Scheme::Trapezoidal => {
                let mut cache: Vec<Option<(usize, SquareSolver)>> = (0..self.comps.len()).map(|_| None).collect();
                let half = C64::new(0.5 * h, 0.0);
                for k in 0..self.steps {
                    let mut r0 = self.mass_mul(&y[0], false);
                    let mut tmp = States::zeros(rows, cols);
                    self.apply(&self.table, &sa, k, &y[0], &mut tmp, false);
                    r0.axpy(half, &tmp);
                    let mut rz = Vec::new();
                    for (i, (tab, sc)) in forcings.iter().enumerate() {
                        let mut r = self.mass_mul(&y[i + 1], false);
                        let mut tmp = States::zeros(rows, cols);
                        self.apply(&self.table, &sa, k, &y[i + 1], &mut tmp, false);
                        self.apply(tab, sc, k, &y[0], &mut tmp, false);
                        r.axpy(half, &tmp);
                        rz.push(r);
                    }
                    self.step_solve(&mut cache, k + 1, &sa, h, &mut [&mut r0], false)?;
                    for (i, (tab, sc)) in forcings.iter().enumerate() {
                        let mut tmp = States::zeros(rows, cols);
                        self.apply(tab, sc, k + 1, &r0, &mut tmp, false);
                        rz[i].axpy(half, &tmp);
                    }
                    if !rz.is_empty() {
                        let mut refs: Vec<&mut States> = rz.iter_mut().collect();
                        self.step_solve(&mut cache, k + 1, &sa, h, &mut refs, false)?;
                    }
                    y[0] = r0;
                    for (i, r) in rz.into_iter().enumerate() {
                        y[i + 1] = r;
                    }
                    if let Some(f) = observe.as_mut() {
                        f(k + 1, &y[0]);
                    }
                }
            }
        }
        Ok(y)
    }

    /// Transpose of the unit-interval propagator applied to `p`.
    fn integrate_transpose(&self, mu: C64, mut p: States) -> Result<States> {
        let h = self.step_size();
        let sa = self.scales(Kind::A, mu);
        let (rows, cols) = (p.rows, p.cols);
        // F^T y = A^T E^{-T} y
        let ft = |point: usize, y: &States, z: &mut States, out: &mut States| {
            z.data.copy_from_slice(&y.data);
            self.mass_solve(z, true);
            out.fill_zero();
            self.apply(&self.table, &sa, point, z, out, true);
        };
        match self.scheme {
            Scheme::Rk4 => {
                let mut z = p.clone();
                let mut kb = p.clone();
                let mut yb = p.clone();
                let mut acc = p.clone();
                // kb = a p + b yb
                let combine = |kb: &mut States, p: &States, a: f64, yb: &States, b: f64| {
                    for ((k, pv), yv) in kb.data.iter_mut().zip(&p.data).zip(&yb.data) {
                        *k = a * pv + b * yv;
                    }
                };
                for k in (0..self.steps).rev() {
                    let (p0, pm, p1) = (2 * k, 2 * k + 1, 2 * k + 2);
                    acc.data.copy_from_slice(&p.data);
                    combine(&mut kb, &p, h / 6.0, &yb, 0.0);
                    ft(p1, &kb, &mut z, &mut yb);
                    acc.axpy(ONE, &yb);
                    combine(&mut kb, &p, h / 3.0, &yb, h);
                    ft(pm, &kb, &mut z, &mut yb);
                    acc.axpy(ONE, &yb);
                    combine(&mut kb, &p, h / 3.0, &yb, 0.5 * h);
                    ft(pm, &kb, &mut z, &mut yb);
                    acc.axpy(ONE, &yb);
                    combine(&mut kb, &p, h / 6.0, &yb, 0.5 * h);
                    ft(p0, &kb, &mut z, &mut yb);
                    acc.axpy(ONE, &yb);
                    std::mem::swap(&mut p, &mut acc);
                }
            }
            Scheme::Trapezoidal => {
                let mut cache: Vec<Option<(usize, SquareSolver)>> = (0..self.comps.len()).map(|_| None).collect();
                for k in (0..self.steps).rev() {
                    self.step_solve(&mut cache, k + 1, &sa, h, &mut [&mut p], true)?;
                    let mut r = self.mass_mul(&p, true);
                    let mut tmp = States::zeros(rows, cols);
                    self.apply(&self.table, &sa, k, &p, &mut tmp, true);
                    r.axpy(C64::new(0.5 * h, 0.0), &tmp);
                    p = r;
                }
            }
        }
        Ok(p)
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.size() {
            return Err(FloquetError::InvalidInput(format!(
                "vector has length {}, expected {}",
                n,
                self.size()
            )));
        }
        Ok(())
    }

    /// `B(mu) v`: shift blocks up by one, last block becomes `mu v_1`.
    pub fn apply_b(&self, mu: C64, v: &[C64]) -> Vec<C64> {
        let d = self.dim;
        let n = v.len();
        let mut out = vec![ZERO; n];
        out[..n - d].copy_from_slice(&v[d..]);
        for i in 0..d {
            out[n - d + i] = mu * v[i];
        }
        out
    }

    /// `B(mu)^T u`.
    pub fn apply_b_transpose(&self, mu: C64, u: &[C64]) -> Vec<C64> {
        let d = self.dim;
        let n = u.len();
        let mut out = vec![ZERO; n];
        out[d..].copy_from_slice(&u[..n - d]);
        for i in 0..d {
            out[i] = mu * u[n - d + i];
        }
        out
    }

    /// `(0, .., 0, v_1)`.
    pub fn last_block_of(&self, v: &[C64]) -> Vec<C64> {
        let d = self.dim;
        let mut out = vec![ZERO; v.len()];
        let n = v.len();
        out[n - d..].copy_from_slice(&v[..d]);
        out
    }

    /// `A(s, mu) q` with coefficients evaluated directly at `s`.
    pub fn apply_a(&self, s: f64, mu: C64, q: &[C64]) -> Result<Vec<C64>> {
        self.check_len(q.len())?;
        let d = self.dim;
        let mut out = vec![ZERO; q.len()];
        let params = self.system.param_values();
        for t in &self.terms {
            let tm = self.system.coeff_time(t.j, (s + t.row as f64) * self.grid.delta);
            let a = self.system.coeff(t.j).eval_dense(tm, params)?;
            let sc = mu.powi(t.power as i32) * self.grid.delta;
            for r in 0..d {
                for c in 0..d {
                    out[t.row * d + r] += sc * a[(r, c)] * q[t.col * d + c];
                }
            }
        }
        Ok(out)
    }

    /// `N(mu) v` for every column of `vs`.
    pub fn n_action_multi(&self, mu: C64, vs: &States) -> Result<States> {
        self.check_len(vs.rows)?;
        let mut q = self.integrate(mu, vs.clone(), &[], None)?.swap_remove(0);
        for c in 0..vs.cols {
            let bv = self.apply_b(mu, vs.col(c));
            for (a, b) in q.col_mut(c).iter_mut().zip(bv) {
                *a -= b;
            }
        }
        Ok(q)
    }

    pub fn n_action(&self, mu: C64, v: &[C64]) -> Result<Vec<C64>> {
        Ok(self.n_action_multi(mu, &States::from_vec(v.to_vec()))?.into_vec())
    }

    /// `(N(mu) v, dN/dmu v)` from one co-integrated pass.
    pub fn dn_dmu_action(&self, mu: C64, v: &[C64]) -> Result<(Vec<C64>, Vec<C64>)> {
        let r = self.dn_dmu_multi(mu, &States::from_vec(v.to_vec()))?;
        Ok((r.0.into_vec(), r.1.into_vec()))
    }

    pub fn dn_dmu_multi(&self, mu: C64, vs: &States) -> Result<(States, States)> {
        self.check_len(vs.rows)?;
        let forcing = [(&self.table, self.scales(Kind::DMu, mu))];
        let mut out = self.integrate(mu, vs.clone(), &forcing, None)?;
        let mut dq = out.pop().unwrap();
        let mut q = out.pop().unwrap();
        for c in 0..vs.cols {
            let v = vs.col(c);
            let bv = self.apply_b(mu, v);
            let vl = self.last_block_of(v);
            for (a, b) in q.col_mut(c).iter_mut().zip(bv) {
                *a -= b;
            }
            for (a, b) in dq.col_mut(c).iter_mut().zip(vl) {
                *a -= b;
            }
        }
        Ok((q, dq))
    }

    /// `M(mu) u = N(mu)^T u`, the exact transpose of the discrete map.
    /// For real coefficients this equals `N(conj(mu))^* u`.
    pub fn m_action_multi(&self, mu: C64, us: &States) -> Result<States> {
        self.check_len(us.rows)?;
        let mut p = self.integrate_transpose(mu, us.clone())?;
        for c in 0..us.cols {
            let bt = self.apply_b_transpose(mu, us.col(c));
            for (a, b) in p.col_mut(c).iter_mut().zip(bt) {
                *a -= b;
            }
        }
        Ok(p)
    }

    pub fn m_action(&self, mu: C64, u: &[C64]) -> Result<Vec<C64>> {
        Ok(self.m_action_multi(mu, &States::from_vec(u.to_vec()))?.into_vec())
    }

    /// Dense `N(mu)`.
    pub fn assemble_n(&self, mu: C64) -> Result<Mat<C64>> {
        Ok(self.n_action_multi(mu, &States::identity(self.size()))?.to_mat())
    }

    /// Dense `N(mu)` and `dN/dmu`.
    pub fn assemble_n_and_derivative(&self, mu: C64) -> Result<(Mat<C64>, Mat<C64>)> {
        let (n, dn) = self.dn_dmu_multi(mu, &States::identity(self.size()))?;
        Ok((n.to_mat(), dn.to_mat()))
    }

    /// Co-integrates `q`, `q_mu` and every `q_{K_p}` in one pass.
    pub fn param_ingredients(&self, mu: C64, v: &[C64]) -> Result<ParamIngredients> {
        self.check_len(v.len())?;
        let dt = self.dtables()?;
        let sa = self.scales(Kind::A, mu);
        let mut forcings: Vec<(&CoeffTable, Vec<C64>)> = vec![(&self.table, self.scales(Kind::DMu, mu))];
        for t in dt {
            forcings.push((t, sa.clone()));
        }
        let out = self.integrate(mu, States::from_vec(v.to_vec()), &forcings, None)?;
        let mut it = out.into_iter();
        let mut residual = it.next().unwrap().into_vec();
        for (a, b) in residual.iter_mut().zip(self.apply_b(mu, v)) {
            *a -= b;
        }
        let q_mu = it.next().unwrap().into_vec();
        let q_params = it.map(States::into_vec).collect();
        Ok(ParamIngredients {
            residual,
            q_mu,
            q_params,
            v_last: self.last_block_of(v),
        })
    }

    /// Samples the eigenfunction on `[-tau_h, 0]` at the integration nodes.
    /// On `((n - 1) Delta, n Delta]` it is `mu^a q_b` at local time
    /// `t / Delta - (n - 1)`, with `(a, b)` the split of `n`.
    pub fn reconstruct_eigenfunction(&self, mu: C64, v: &[C64]) -> Result<Vec<(f64, Vec<C64>)>> {
        self.check_len(v.len())?;
        let d = self.dim;
        let nb = self.grid.blocks;
        let nh = self.grid.history_blocks();
        if nh == 0 {
            return Ok(vec![(0.0, v[..d].to_vec())]);
        }
        let mut nodes: Vec<Vec<C64>> = Vec::new();
        let mut obs = |_: usize, s: &States| nodes.push(s.data.clone());
        self.integrate(mu, States::from_vec(v.to_vec()), &[], Some(&mut obs))?;
        let h = self.step_size();
        let mut out = Vec::new();
        for n in (1 - nh as i64)..=0 {
            let (a, b) = block_split(n, nb);
            let f = mu.powi(a as i32);
            let first = if n == 1 - nh as i64 { 0 } else { 1 };
            for (k, q) in nodes.iter().enumerate().skip(first) {
                let t = (n as f64 - 1.0 + k as f64 * h) * self.grid.delta;
                let blk = &q[(b - 1) * d..b * d];
                out.push((t, blk.iter().map(|x| f * x).collect()));
            }
        }
        Ok(out)
    }
}

/// Convenience for building a block vector from a dense column.
pub fn column(m: &Mat<C64>, c: usize) -> Vec<C64> {
    (0..m.nrows()).map(|r| m[(r, c)]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtins;
    use crate::model::build_grid;

    #[test]
    fn block_split_examples() {
        assert_eq!(block_split(0, 1), (-1, 1));
        assert_eq!(block_split(-1, 1), (-2, 1));
        assert_eq!(block_split(1, 4), (0, 1));
        assert_eq!(block_split(-2, 4), (-1, 2));
        for n in 1..6usize {
            for k in -20i64..20 {
                let (a, b) = block_split(k, n);
                assert_eq!(a * n as i64 + b as i64, k);
                assert!(b >= 1 && b <= n);
            }
        }
    }

    #[test]
    fn step_snapping() {
        assert_eq!(step_count(2e-4), 5000);
        assert_eq!(step_count(1e-3), 1000);
        assert_eq!(step_count(0.3), 4);
        assert_eq!(step_count(2.0), 1);
    }

    #[test]
    fn b_operator_shifts_blocks() {
        let sys = builtins::mathieu_pid(4.0, 2.0, 0.75 * std::f64::consts::PI, builtins::Controller::Pd, &[0.1, 0.2]).unwrap();
        let grid = build_grid(&sys, None).unwrap();
        let ctx = CharEvalContext::new(sys, grid, Scheme::Rk4, 0.1).unwrap();
        let v: Vec<C64> = (0..8).map(|i| C64::new(i as f64, 0.0)).collect();
        let mu = C64::new(2.0, 1.0);
        let bv = ctx.apply_b(mu, &v);
        assert_eq!(bv[0], v[2]);
        assert_eq!(bv[5], v[7]);
        assert_eq!(bv[6], mu * v[0]);
        // transpose consistency
        let u: Vec<C64> = (0..8).map(|i| C64::new(1.0, i as f64)).collect();
        let lhs: C64 = u.iter().zip(&bv).map(|(a, b)| a * b).sum();
        let btu = ctx.apply_b_transpose(mu, &u);
        let rhs: C64 = btu.iter().zip(&v).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).norm() < 1e-12);
    }

    fn transpose_gap(ctx: &CharEvalContext, mu: C64) -> f64 {
        let n = ctx.assemble_n(mu).unwrap();
        let m = ctx.m_action_multi(mu, &States::identity(ctx.size())).unwrap().to_mat();
        let mut gap = 0.0f64;
        for r in 0..ctx.size() {
            for c in 0..ctx.size() {
                gap = gap.max((m[(r, c)] - n[(c, r)]).norm());
            }
        }
        gap / n.norm_max()
    }

    #[test]
    fn m_is_the_exact_transpose_of_n() {
        let mu = C64::new(0.7, -0.4);
        let sys = builtins::mathieu_pid(4.0, 2.0, 0.75 * std::f64::consts::PI, builtins::Controller::Pid, &[1.0, 0.5, 0.2]).unwrap();
        let grid = build_grid(&sys, None).unwrap();
        for scheme in [Scheme::Rk4, Scheme::Trapezoidal] {
            let ctx = CharEvalContext::new(sys.clone(), grid.clone(), scheme, 0.05).unwrap();
            assert!(transpose_gap(&ctx, mu) < 1e-13, "{:?}", scheme);
        }
        // with a mass matrix and a discontinuous weight
        let sys = builtins::milling(2, 0.3).unwrap();
        let grid = build_grid(&sys, Some(0.5)).unwrap();
        for scheme in [Scheme::Rk4, Scheme::Trapezoidal] {
            let ctx = CharEvalContext::new(sys.clone(), grid.clone(), scheme, 0.05).unwrap();
            assert!(transpose_gap(&ctx, mu) < 1e-13, "{:?}", scheme);
        }
    }

    #[test]
    fn mu_derivative_matches_difference_quotient() {
        let sys = builtins::mathieu_pid(4.0, 2.0, 0.75 * std::f64::consts::PI, builtins::Controller::Pd, &[0.7, 0.02]).unwrap();
        let grid = build_grid(&sys, None).unwrap();
        let ctx = CharEvalContext::new(sys, grid, Scheme::Rk4, 0.01).unwrap();
        let v: Vec<C64> = (0..ctx.size()).map(|i| C64::new(1.0 + i as f64, 0.5 - i as f64)).collect();
        let mu = C64::new(0.3, 0.2);
        let (nv, dv) = ctx.dn_dmu_action(mu, &v).unwrap();
        assert_eq!(nv, ctx.n_action(mu, &v).unwrap());
        let h = 1e-6;
        let p = ctx.n_action(mu + h, &v).unwrap();
        let m = ctx.n_action(mu - h, &v).unwrap();
        for i in 0..v.len() {
            let fd = (p[i] - m[i]) / (2.0 * h);
            assert!((fd - dv[i]).norm() < 1e-6 * (1.0 + dv[i].norm()), "{} {} {}", i, fd, dv[i]);
        }
    }
}
