//! Ready-made systems used throughout the tests and the command line.

use std::f64::consts::PI;

use crate::expr::{parse, Expr};
use crate::model::{CoeffMatrix, Entry, ModelError, ParamVector, PeriodicDelaySystem, SparseReal};

fn p(src: &str, names: &[String]) -> Result<Expr, ModelError> {
    Ok(parse(src, names)?)
}

fn entry(row: usize, col: usize, expr: Expr) -> Entry {
    Entry { row, col, expr }
}

/// Scalar system with delays `pi` and `2 pi` whose multipliers are
/// `K pi / W_k(K pi)`.
pub fn scalar_lambert(k: f64) -> Result<PeriodicDelaySystem, ModelError> {
    let names = vec!["K".to_string()];
    let a0 = CoeffMatrix::new(1, vec![entry(0, 0, p("K*cos(2*t)", &names)?)])?;
    let a1 = CoeffMatrix::new(1, vec![entry(0, 0, p("sin(2*t) + K", &names)?)])?;
    let a2 = CoeffMatrix::new(1, vec![entry(0, 0, p("0.1*cos(2*t)*exp(sin(2*t))", &names)?)])?;
    PeriodicDelaySystem::new(
        PI,
        vec![PI, 2.0 * PI],
        vec![a0, a1, a2],
        None,
        ParamVector::new(names, vec![k])?,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Controller {
    Pi,
    Pd,
    Pid,
}

impl Controller {
    pub fn parse(s: &str) -> Option<Controller> {
        match s.to_ascii_lowercase().as_str() {
            "pi" => Some(Controller::Pi),
            "pd" => Some(Controller::Pd),
            "pid" => Some(Controller::Pid),
            _ => None,
        }
    }

    /// Exposed gain names in order.
    pub fn gain_names(self) -> &'static [&'static str] {
        match self {
            Controller::Pi => &["k_i", "k_p"],
            Controller::Pd => &["k_p", "k_d"],
            Controller::Pid => &["k_i", "k_p", "k_d"],
        }
    }
}

/// Undamped Mathieu oscillator `z'' + (nu + eps cos 2t) z = -u(t - tau)`
/// under delayed PI, PD or PID feedback. The PD loop has no integral state,
/// so it is posed on `(z, z')` only; the other two use `(int z, z, z')`.
pub fn mathieu_pid(
    nu: f64,
    eps: f64,
    tau: f64,
    controller: Controller,
    gains: &[f64],
) -> Result<PeriodicDelaySystem, ModelError> {
    let names: Vec<String> = controller.gain_names().iter().map(|s| s.to_string()).collect();
    if gains.len() != names.len() {
        return Err(ModelError::Param(format!(
            "{:?} controller takes {} gains, got {}",
            controller,
            names.len(),
            gains.len()
        )));
    }
    let stiffness = p(&format!("-({}) - ({})*cos(2*t)", nu, eps), &names)?;
    let neg = |g: &str| p(&format!("-{}", g), &names);
    let (a0, a1) = match controller {
        Controller::Pd => {
            let a0 = CoeffMatrix::new(2, vec![entry(0, 1, Expr::num(1.0)), entry(1, 0, stiffness)])?;
            let a1 = CoeffMatrix::new(2, vec![entry(1, 0, neg("k_p")?), entry(1, 1, neg("k_d")?)])?;
            (a0, a1)
        }
        Controller::Pi | Controller::Pid => {
            let a0 = CoeffMatrix::new(
                3,
                vec![entry(0, 1, Expr::num(1.0)), entry(1, 2, Expr::num(1.0)), entry(2, 1, stiffness)],
            )?;
            let mut row = vec![entry(2, 0, neg("k_i")?), entry(2, 1, neg("k_p")?)];
            if controller == Controller::Pid {
                row.push(entry(2, 2, neg("k_d")?));
            }
            (a0, CoeffMatrix::new(3, row)?)
        }
    };
    PeriodicDelaySystem::new(PI, vec![tau], vec![a0, a1], None, ParamVector::new(names, gains.to_vec())?)
}

/// Cutting force weight `w(t)` of the milling model (tool in cut for the
/// first half of each revolution).
pub const MILLING_WEIGHT: &str = "heaviside(0.5 - t)*(sin(2*pi*t)^2 + 0.5*sin(4*pi*t))";

/// Finite-element discretisation of a milling tool with `n` elements, a
/// delayed regenerative force, and feedback gain `K` on the workpiece.
/// State is `(U, q, U', q')` with `dim = 2(n + 1)`.
pub fn milling(n: usize, k: f64) -> Result<PeriodicDelaySystem, ModelError> {
    if n == 0 {
        return Err(ModelError::DimensionMismatch("milling needs at least one element".into()));
    }
    let names = vec!["K".to_string()];
    let dim = 2 * (n + 1);
    let (u, q, du, dq) = (0, n, n + 1, 2 * n + 1);
    let nf = n as f64;

    // mass: diag(I_n, 1, P_n, 1), P_n = tridiag(1, 4, 1)/(6n) with a 2 in the last slot
    let mut mass = Vec::new();
    for i in 0..=n {
        mass.push((u + i, u + i, 1.0));
    }
    for i in 0..n {
        let diag = if i + 1 == n { 2.0 } else { 4.0 };
        mass.push((du + i, du + i, diag / (6.0 * nf)));
        if i + 1 < n {
            mass.push((du + i, du + i + 1, 1.0 / (6.0 * nf)));
            mass.push((du + i + 1, du + i, 1.0 / (6.0 * nf)));
        }
    }
    mass.push((dq, dq, 1.0));

    // stiffness D_n = n tridiag(-1, 2, -1) with a 1 in the last slot
    let mut stiff = Vec::new();
    for i in 0..n {
        let diag = if i + 1 == n { 1.0 } else { 2.0 };
        stiff.push((i, i, nf * diag));
        if i + 1 < n {
            stiff.push((i, i + 1, -nf));
            stiff.push((i + 1, i, -nf));
        }
    }

    let w = p(MILLING_WEIGHT, &names)?;
    let minus_w = p(&format!("-({})", MILLING_WEIGHT), &names)?;
    let tip = u + n - 1;
    // force coupling F maps (U_n + q) into the tip and workpiece equations
    let force = [(du + n - 1, tip), (du + n - 1, q), (dq, tip), (dq, q)];

    let mut a0 = Vec::new();
    for i in 0..n {
        a0.push(entry(u + i, du + i, Expr::num(1.0)));
    }
    a0.push(entry(q, dq, Expr::num(1.0)));
    for &(r, c, v) in &stiff {
        a0.push(entry(du + r, u + c, Expr::num(-v)));
        a0.push(entry(du + r, du + c, Expr::num(-v)));
    }
    a0.push(entry(dq, q, Expr::num(-1.0)));
    a0.push(entry(dq, dq, p("-2*K", &names)?));
    let mut a1 = Vec::new();
    for &(r, c) in &force {
        a0.push(entry(r, c, minus_w.clone()));
        a1.push(entry(r, c, w.clone()));
    }
    let sys = PeriodicDelaySystem::new(
        1.0,
        vec![1.0],
        vec![CoeffMatrix::new(dim, a0)?, CoeffMatrix::new(dim, a1)?],
        Some(SparseReal { dim, entries: mass }),
        ParamVector::new(names, vec![k])?,
    )?;
    Ok(sys.with_discontinuities(vec![0.0, 0.5]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mathieu_coefficients_at_zero() {
        let s = mathieu_pid(4.0, 2.0, 0.75 * PI, Controller::Pid, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.dim(), 3);
        let a0 = s.eval_coeff(0, 0.0).unwrap();
        let want = [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, -6.0, 0.0]];
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(a0[(r, c)], want[r][c]);
            }
        }
        let a1 = s.eval_coeff(1, 0.3).unwrap();
        assert_eq!((a1[(2, 0)], a1[(2, 1)], a1[(2, 2)]), (-1.0, -2.0, -3.0));
    }

    #[test]
    fn milling_two_elements() {
        let s = milling(2, 0.0).unwrap();
        assert_eq!(s.dim(), 6);
        let e = s.mass().unwrap().to_dense();
        assert!((e[(3, 3)] - 4.0 / 12.0).abs() < 1e-15);
        assert!((e[(3, 4)] - 1.0 / 12.0).abs() < 1e-15);
        assert!((e[(4, 4)] - 2.0 / 12.0).abs() < 1e-15);
        assert_eq!(s.discontinuities(), &[0.0, 0.5]);
        // cutting phase: A0 + A1 restores A(K)
        let t = 0.2;
        let sum = s.eval_coeff(0, t).unwrap() + s.eval_coeff(1, t).unwrap();
        assert!((sum[(3, 0)] + 4.0).abs() < 1e-14);
        assert!((sum[(4, 1)] + 2.0).abs() < 1e-14);
        assert!(sum[(4, 2)].abs() < 1e-14);
        let a1 = s.eval_coeff(1, 0.7).unwrap();
        assert!(a1.norm_max() == 0.0);
    }

    #[test]
    fn milling_matrices_are_definite() {
        for n in 1..=10 {
            let s = milling(n, 0.3).unwrap();
            let e = s.mass().unwrap().to_dense();
            let ev = e.self_adjoint_eigenvalues(faer::Side::Lower).unwrap();
            assert!(ev[0] > 0.0);
            let a = s.eval_coeff(0, 0.7).unwrap();
            let mut d = faer::Mat::<f64>::zeros(n, n);
            for r in 0..n {
                for c in 0..n {
                    d[(r, c)] = -a[(n + 1 + r, c)];
                    assert_eq!(d[(r, c)], -a[(n + 1 + r, n + 1 + c)]);
                }
            }
            let ev = d.self_adjoint_eigenvalues(faer::Side::Lower).unwrap();
            assert!(ev[0] > -1e-12);
        }
    }
}
