use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use floquet_core::optimize::{minimize, MinimizeOptions, Objective, ObjectiveOptions, Termination};
use floquet_core::oracles::{brute_force_multipliers, lambert_w};
use floquet_core::sensitivity::{self, finite_difference_gradient};
use floquet_core::solve::{two_stage, FloquetPair, LeftOptions, SpectrumOptions, SpectrumReport, StageOneMethod};
use floquet_core::{build_grid, CharEvalContext, CommensurateGrid, PeriodicDelaySystem, Scheme, C64};
use serde_json::Value;

use crate::model_file::{self, Model};
use crate::output::{Cell, Report};
use crate::{Coded, Common, MethodArg, RefArg, SchemeArg};

struct Loaded {
    model: Model,
    system: PeriodicDelaySystem,
    grid: CommensurateGrid,
}

fn load(common: &Common) -> Result<Loaded> {
    load_path(&common.model, common.grid, &common.set)
}

fn load_path(path: &Path, grid: Option<f64>, set: &[String]) -> Result<Loaded> {
    let model = model_file::load(path)?;
    let system = model_file::apply_overrides(&model.system, set)?;
    let grid = build_grid(&system, grid.or(model.delta))?;
    Ok(Loaded { model, system, grid })
}

fn scheme(s: SchemeArg) -> Scheme {
    match s {
        SchemeArg::Rk4 => Scheme::Rk4,
        SchemeArg::Trap => Scheme::Trapezoidal,
    }
}

fn spectrum_options(c: &Common) -> SpectrumOptions {
    SpectrumOptions {
        degree: c.degree,
        num_wanted: c.num,
        method: match c.method {
            MethodArg::Auto => StageOneMethod::Auto,
            MethodArg::Direct => StageOneMethod::Direct,
            MethodArg::Arnoldi => StageOneMethod::Arnoldi,
        },
        scheme: scheme(c.scheme),
        step: c.delta,
        ..Default::default()
    }
}

fn left_options(c: &Common) -> LeftOptions {
    LeftOptions {
        degree: c.degree,
        ..Default::default()
    }
}

fn context(l: &Loaded, c: &Common) -> Result<CharEvalContext> {
    Ok(CharEvalContext::new(l.system.clone(), l.grid.clone(), scheme(c.scheme), c.delta)?)
}

fn params_meta(system: &PeriodicDelaySystem) -> Value {
    let mut m = serde_json::Map::new();
    for (n, v) in system.params().names.iter().zip(system.param_values()) {
        m.insert(n.clone(), Value::from(*v));
    }
    Value::Object(m)
}

fn spectrum_meta(r: &mut Report, l: &Loaded, rep: &SpectrumReport) {
    let m = &rep.meta;
    r.meta("model", l.model.builtin.clone().unwrap_or_else(|| "file".into()));
    r.meta("params", params_meta(&l.system));
    r.meta("dim", l.system.dim());
    r.meta("M", m.degree);
    r.meta("step", m.step);
    r.meta("scheme", format!("{:?}", m.scheme).to_lowercase());
    r.meta("method", format!("{:?}", m.method).to_lowercase());
    r.meta("N", m.blocks);
    r.meta("history_blocks", m.history_blocks);
    r.meta("grid_delta", m.delta);
    r.meta("stage_one_secs", m.stage_one_secs);
    r.meta("stage_two_secs", m.stage_two_secs);
    r.meta("discarded", m.discarded);
    if let Some(it) = m.arnoldi_iterations {
        r.meta("arnoldi_iterations", it);
    }
}

fn dominant(rep: &SpectrumReport) -> Result<FloquetPair> {
    let p = rep
        .dominant()
        .ok_or_else(|| Coded {
            code: 3,
            message: "no multipliers found".into(),
        })?
        .clone();
    Ok(if p.mu.im < 0.0 { p.conjugate() } else { p })
}

pub fn spectrum(c: &Common, no_correct: bool, left: bool) -> Result<()> {
    let l = load(c)?;
    let mut opts = spectrum_options(c);
    opts.correct = !no_correct;
    let rep = two_stage(&l.system, &l.grid, &opts)?;
    let mut cols = vec!["re", "im", "modulus", "residual", "stage"];
    if left {
        cols.push("left_residual");
    }
    let mut r = Report::new("spectrum", &cols);
    spectrum_meta(&mut r, &l, &rep);
    let ctx = if left && !no_correct { Some(context(&l, c)?) } else { None };
    for p in &rep.pairs {
        let mut row = vec![
            Cell::F(p.mu.re),
            Cell::F(p.mu.im),
            Cell::F(p.mu.norm()),
            Cell::F(p.residual_right),
            Cell::S(p.stage.as_str().into()),
        ];
        if left {
            let res = match &ctx {
                Some(ctx) => floquet_core::solve::left_eigenvector(ctx, p.mu, &left_options(c))
                    .map(|(_, r)| r)
                    .unwrap_or(f64::NAN),
                None => f64::NAN,
            };
            row.push(Cell::F(res));
        }
        r.push(row);
    }
    r.emit(c.format, c.out.as_deref())
}

enum Sweep {
    Degree(Vec<usize>),
    Step(Vec<f64>),
}

fn parse_sweep(s: &str) -> Result<Sweep> {
    let (key, range) = s.split_once('=').ok_or_else(|| anyhow!("sweep `{s}` is not KEY=RANGE"))?;
    let parts: Vec<&str> = range.split(':').collect();
    let bad = || Coded {
        code: 2,
        message: format!("bad sweep range `{range}`"),
    };
    match key.trim() {
        "M" => {
            let lo: usize = parts.first().and_then(|x| x.parse().ok()).ok_or_else(bad)?;
            let hi: usize = parts.get(1).and_then(|x| x.parse().ok()).ok_or_else(bad)?;
            let step: usize = match parts.get(2) {
                Some(x) => x.parse().map_err(|_| bad())?,
                None => 1,
            };
            if lo == 0 || hi < lo || step == 0 {
                return Err(bad().into());
            }
            Ok(Sweep::Degree((lo..=hi).step_by(step).collect()))
        }
        "delta" => {
            let hi: f64 = parts.first().and_then(|x| x.parse().ok()).ok_or_else(bad)?;
            let lo: f64 = parts.get(1).and_then(|x| x.parse().ok()).ok_or_else(bad)?;
            if !(hi > 0.0 && lo > 0.0 && lo <= hi) {
                return Err(bad().into());
            }
            let mut out = Vec::new();
            match parts.get(2).copied().unwrap_or("log") {
                "log" => {
                    let mut d = hi;
                    while d >= lo * (1.0 - 1e-12) {
                        out.push(d);
                        d /= 2.0;
                    }
                }
                n => {
                    let n: usize = n.parse().map_err(|_| bad())?;
                    if n < 2 {
                        return Err(bad().into());
                    }
                    let r = (lo / hi).powf(1.0 / (n - 1) as f64);
                    out.extend((0..n).map(|i| hi * r.powi(i as i32)));
                }
            }
            Ok(Sweep::Step(out))
        }
        other => Err(Coded {
            code: 2,
            message: format!("unknown sweep key `{other}` (use M or delta)"),
        }
        .into()),
    }
}

/// Analytic dominant multiplier where one is known, else a fine
/// method-of-steps estimate.
fn oracle_reference(l: &Loaded) -> Result<C64> {
    if l.model.builtin.as_deref() == Some("scalar_lambert") {
        let k = l.system.param_values()[0];
        let z = C64::new(k * PI, 0.0);
        return Ok(z / lambert_w(0, z));
    }
    let ev = brute_force_multipliers(&l.system, &l.grid, 64, 8)?;
    ev.first().copied().ok_or_else(|| anyhow!("oracle returned no multipliers"))
}

pub fn converge(c: &Common, sweep: &str, reference: RefArg) -> Result<()> {
    let l = load(c)?;
    let sweep = parse_sweep(sweep)?;
    let run = |opts: &SpectrumOptions| -> Result<C64> {
        let rep = two_stage(&l.system, &l.grid, opts)?;
        Ok(dominant(&rep)?.mu)
    };
    let mut values: Vec<(f64, C64)> = Vec::new();
    let kind = match &sweep {
        Sweep::Degree(ms) => {
            for &m in ms {
                let mut o = spectrum_options(c);
                o.degree = m;
                o.correct = false;
                values.push((m as f64, run(&o)?));
            }
            "M"
        }
        Sweep::Step(ds) => {
            for &d in ds {
                let mut o = spectrum_options(c);
                o.step = d;
                values.push((d, run(&o)?));
            }
            "delta"
        }
    };
    let mut reference_value = match reference {
        RefArg::Oracle => oracle_reference(&l)?,
        RefArg::SelfRef => values
            .last()
            .map(|v| v.1)
            .ok_or_else(|| anyhow!("empty sweep"))?,
    };
    // multipliers come in conjugate pairs; compare within the upper half plane
    if reference_value.im < 0.0 {
        reference_value = reference_value.conj();
    }
    let mut r = Report::new("converge", &[kind, "re", "im", "rel_error"]);
    r.meta("reference_re", reference_value.re);
    r.meta("reference_im", reference_value.im);
    r.meta(
        "reference",
        match reference {
            RefArg::Oracle => "oracle",
            RefArg::SelfRef => "self",
        },
    );
    r.meta("params", params_meta(&l.system));
    let n = values.len();
    for (i, (s, mu)) in values.into_iter().enumerate() {
        if reference == RefArg::SelfRef && i + 1 == n {
            break;
        }
        let err = (mu - reference_value).norm() / reference_value.norm();
        let setting = if kind == "M" { Cell::I(s as i64) } else { Cell::F(s) };
        r.push(vec![setting, Cell::F(mu.re), Cell::F(mu.im), Cell::F(err)]);
    }
    r.emit(c.format, c.out.as_deref())
}

pub fn gradient(c: &Common, fd_check: bool, fd_step: f64, allow_flagged: bool) -> Result<()> {
    let l = load(c)?;
    let opts = spectrum_options(c);
    let rep = two_stage(&l.system, &l.grid, &opts)?;
    let pair = dominant(&rep)?;
    let ctx = context(&l, c)?;
    let g = sensitivity::gradient(&ctx, &pair, &left_options(c))?;
    if g.near_defective && !allow_flagged {
        return Err(Coded {
            code: 3,
            message: format!(
                "dominant multiplier {} is close to defective (denominator {:e}); use --allow-flagged",
                pair.mu,
                g.denominator.norm()
            ),
        }
        .into());
    }
    let fd = if fd_check {
        Some(finite_difference_gradient(&ctx, &pair, fd_step, &opts.corrector)?)
    } else {
        None
    };
    let mut cols = vec!["param", "value", "dmu_re", "dmu_im", "drho"];
    if fd.is_some() {
        cols.extend(["fd_re", "fd_im", "fd_deviation"]);
    }
    let mut r = Report::new("gradient", &cols);
    spectrum_meta(&mut r, &l, &rep);
    r.meta("mu_re", pair.mu.re);
    r.meta("mu_im", pair.mu.im);
    r.meta("rho", pair.mu.norm());
    r.meta("near_defective", g.near_defective);
    r.meta("left_residual", g.left_residual);
    let mut worst = 0.0f64;
    let names = l.system.params().names.to_vec();
    for (i, name) in names.iter().enumerate() {
        let d = g.dmu_dk[i];
        let drho = (pair.mu.conj() * d).re / pair.mu.norm();
        let mut row = vec![
            Cell::S(name.clone()),
            Cell::F(l.system.param_values()[i]),
            Cell::F(d.re),
            Cell::F(d.im),
            Cell::F(drho),
        ];
        if let Some(fd) = &fd {
            let dev = if d.norm() > 1e-12 { (fd[i] - d).norm() / d.norm() } else { (fd[i] - d).norm() };
            worst = worst.max(dev);
            row.extend([Cell::F(fd[i].re), Cell::F(fd[i].im), Cell::F(dev)]);
        }
        r.push(row);
    }
    if fd.is_some() {
        r.meta("fd_max_deviation", worst);
    }
    r.emit(c.format, c.out.as_deref())
}

pub fn optimize(c: &Common, max_iter: usize, gtol: f64) -> Result<()> {
    let l = load(c)?;
    if l.system.params().is_empty() {
        bail!(Coded {
            code: 2,
            message: "model has no parameters to optimise".into(),
        });
    }
    let oopts = ObjectiveOptions {
        spectrum: spectrum_options(c),
        left: left_options(c),
        ..Default::default()
    };
    let objective = Objective::new(&l.system, &l.grid, oopts);
    let mopts = MinimizeOptions {
        max_iter,
        gtol,
        ..Default::default()
    };
    let t = Instant::now();
    let res = minimize(&objective, l.system.param_values(), &mopts)?;
    let names = l.system.params().names.to_vec();
    let mut cols: Vec<String> = vec!["iteration".into()];
    cols.extend(names.iter().cloned());
    cols.extend(
        ["rho", "grad_norm", "step", "line_search_evals", "restarted", "near_defective"]
            .iter()
            .map(|s| s.to_string()),
    );
    let col_refs: Vec<&str> = cols.iter().map(String::as_str).collect();
    let mut r = Report::new("optimize", &col_refs);
    r.meta("params_start", params_meta(&l.system));
    r.meta("termination", res.trace.termination.as_str());
    r.meta("evaluations", res.trace.evaluations);
    r.meta("seconds", t.elapsed().as_secs_f64());
    r.meta("rho_final", res.best.rho());
    let mut fin = serde_json::Map::new();
    for (n, v) in names.iter().zip(&res.best.k) {
        fin.insert(n.clone(), Value::from(*v));
    }
    r.meta("params_final", Value::Object(fin));
    for e in &res.trace.entries {
        let mut row = vec![Cell::I(e.iteration as i64)];
        row.extend(e.k.iter().map(|x| Cell::F(*x)));
        row.extend([
            Cell::F(e.rho_sq.sqrt()),
            Cell::F(e.grad_norm),
            Cell::F(e.step),
            Cell::I(e.line_search_evals as i64),
            Cell::B(e.restarted),
            Cell::B(e.near_defective),
        ]);
        r.push(row);
    }
    r.emit(c.format, c.out.as_deref())?;
    let summary: Vec<String> = names
        .iter()
        .zip(&res.best.k)
        .map(|(n, v)| format!("{n}={}", crate::output::fmt_f64(*v)))
        .collect();
    eprintln!(
        "final {} rho={} ({})",
        summary.join(" "),
        crate::output::fmt_f64(res.best.rho()),
        res.trace.termination.as_str()
    );
    if res.trace.termination == Termination::LineSearchFailed {
        bail!(Coded {
            code: 4,
            message: "line search failed; the best iterate is reported above".into(),
        });
    }
    Ok(())
}

/// Blocks below which non-smooth coefficients make collocation inefficient.
const SMOOTH_BLOCKS: usize = 10;

pub fn check(path: &Path, grid: Option<f64>) -> Result<()> {
    let l = load_path(path, grid, &[])?;
    let s = &l.system;
    let g = &l.grid;
    println!(
        "ok: dim {} period {} delays {:?} params {:?}",
        s.dim(),
        s.period(),
        s.delays(),
        s.params().names
    );
    println!(
        "ok: commensurate grid delta = {} (N = {}, n_h = {})",
        g.delta,
        g.blocks,
        g.history_blocks()
    );
    if s.mass().is_some() {
        println!("ok: mass matrix is invertible");
    }
    for &t in s.discontinuities() {
        let x = t.rem_euclid(s.period()) / g.delta;
        if (x - x.round()).abs() > 1e-9 * x.abs().max(1.0) {
            println!(
                "warning: coefficient discontinuity at t = {t} is not on the grid (delta = {}); collocation converges slowly across it",
                g.delta
            );
        }
    }
    if !s.discontinuities().is_empty() && g.blocks < SMOOTH_BLOCKS {
        println!(
            "warning: non-smooth coefficients with only N = {} blocks; a higher N is recommended (e.g. N = 26 with M = 20 instead of a high degree)",
            g.blocks
        );
    }
    Ok(())
}

pub fn verify(c: &Common, mesh: usize, substeps: usize, tol: Option<f64>) -> Result<()> {
    let l = load(c)?;
    let rep = two_stage(&l.system, &l.grid, &spectrum_options(c))?;
    let oracle = brute_force_multipliers(&l.system, &l.grid, mesh, substeps).context("method-of-steps oracle")?;
    let mut r = Report::new("verify", &["rank", "re", "im", "oracle_re", "oracle_im", "deviation"]);
    spectrum_meta(&mut r, &l, &rep);
    let mut worst = 0.0f64;
    for (i, p) in rep.pairs.iter().take(3).enumerate() {
        let nearest = oracle
            .iter()
            .copied()
            .min_by(|a, b| (a - p.mu).norm().total_cmp(&(b - p.mu).norm()))
            .ok_or_else(|| anyhow!("oracle returned no multipliers"))?;
        let dev = (nearest - p.mu).norm();
        worst = worst.max(dev);
        r.push(vec![
            Cell::I(i as i64 + 1),
            Cell::F(p.mu.re),
            Cell::F(p.mu.im),
            Cell::F(nearest.re),
            Cell::F(nearest.im),
            Cell::F(dev),
        ]);
    }
    r.meta("max_deviation", worst);
    r.emit(c.format, c.out.as_deref())?;
    if let Some(t) = tol {
        if !(worst <= t) {
            bail!(Coded {
                code: 3,
                message: format!("top-3 deviation {worst:e} exceeds {t:e}"),
            });
        }
    }
    Ok(())
}
