use std::f64::consts::PI;

use faer::Mat;
use floquet_core::builtins::{mathieu_pid, milling, Controller};
use floquet_core::linalg::eigvals_real_deflated;
use floquet_core::solve::{
    correct, left_eigenvector_small, refine_left, residual_norm, stage_one, two_stage, CorrectorMethod,
    CorrectorOptions, Forward, SpectrumOptions, StageOneMethod, Transposed,
};
use floquet_core::{build_grid, CharEvalContext, Scheme, C64};

fn pid() -> (floquet_core::PeriodicDelaySystem, floquet_core::CommensurateGrid) {
    let s = mathieu_pid(4.0, 2.0, 0.75 * PI, Controller::Pid, &[1.4131, 0.9666, 0.3787]).unwrap();
    let g = build_grid(&s, None).unwrap();
    (s, g)
}

#[test]
fn arnoldi_and_dense_stage_one_agree() {
    let (s, g) = pid();
    let base = SpectrumOptions {
        degree: 10,
        num_wanted: 4,
        correct: false,
        ..Default::default()
    };
    let (dense, m, _) = stage_one(&s, &g, &with_method(StageOneMethod::Direct, &base)).unwrap();
    assert_eq!(m, StageOneMethod::Direct);
    let (kry, m, its) = stage_one(&s, &g, &with_method(StageOneMethod::Arnoldi, &base)).unwrap();
    assert_eq!(m, StageOneMethod::Arnoldi);
    assert!(its.is_some());
    for a in kry.iter().take(2) {
        let d = dense.iter().map(|b| (b.mu - a.mu).norm()).fold(f64::INFINITY, f64::min);
        assert!(d < 1e-10, "{} off by {d:e}", a.mu);
    }
}

fn with_method(method: StageOneMethod, base: &SpectrumOptions) -> SpectrumOptions {
    SpectrumOptions {
        method,
        ..base.clone()
    }
}

#[test]
fn correctors_converge_to_the_same_root() {
    let (s, g) = pid();
    let opts = SpectrumOptions {
        degree: 10,
        num_wanted: 4,
        correct: false,
        ..Default::default()
    };
    let (seeds, _, _) = stage_one(&s, &g, &opts).unwrap();
    let ctx = CharEvalContext::new(s, g, Scheme::Rk4, 1e-3).unwrap();
    let seed = &seeds[0];
    let mut roots = Vec::new();
    for method in [CorrectorMethod::Broyden, CorrectorMethod::Newton, CorrectorMethod::NewtonKrylov] {
        let c = correct(
            &Forward(&ctx),
            seed.mu,
            &seed.v,
            &CorrectorOptions {
                method,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(residual_norm(&Forward(&ctx), c.pair.mu, &c.pair.v).unwrap() < 1e-10, "{method:?}");
        roots.push(c.pair.mu);
    }
    for r in &roots[1..] {
        assert!((r - roots[0]).norm() < 1e-10, "{roots:?}");
    }
}

#[test]
fn refined_left_vector_matches_the_svd() {
    let (s, g) = pid();
    let rep = two_stage(
        &s,
        &g,
        &SpectrumOptions {
            degree: 10,
            num_wanted: 4,
            ..Default::default()
        },
    )
    .unwrap();
    let mu = rep.dominant().unwrap().mu;
    let ctx = CharEvalContext::new(s, g, Scheme::Rk4, 1e-3).unwrap();
    let u = left_eigenvector_small(&ctx, mu).unwrap();
    // a perturbed start still converges back to the same direction
    let start: Vec<C64> = u
        .iter()
        .enumerate()
        .map(|(i, x)| x + C64::new(1e-3 * (i as f64).sin(), 0.0))
        .collect();
    let r = refine_left(&ctx, mu, &start, &CorrectorOptions::default()).unwrap();
    assert!(residual_norm(&Transposed(&ctx), mu.conj(), &r).unwrap() < 1e-10);
    let overlap: C64 = u.iter().zip(&r).map(|(a, b)| a.conj() * b).sum();
    let nr: f64 = r.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
    assert!((overlap.norm() / nr - 1.0).abs() < 1e-8);
}

#[test]
fn milling_spectrum_is_stable_and_conjugate_symmetric() {
    let s = milling(2, 0.0).unwrap();
    let g = build_grid(&s, Some(0.5)).unwrap();
    let rep = two_stage(
        &s,
        &g,
        &SpectrumOptions {
            degree: 12,
            scheme: Scheme::Trapezoidal,
            step: 1e-3,
            num_wanted: 6,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(rep.spectral_radius() < 1.0);
    let d = rep.dominant().unwrap().mu;
    if d.im.abs() > 1e-10 {
        assert!(rep.pairs.iter().any(|p| (p.mu - d.conj()).norm() < 1e-8));
    }
}

#[test]
fn deflation_keeps_jordan_zeros_at_zero() {
    // nilpotent 4x4 Jordan block plus two simple eigenvalues, in a rotated basis
    let n = 6;
    let mut a = Mat::<f64>::zeros(n, n);
    for i in 0..3 {
        a[(i, i + 1)] = 1.0;
    }
    a[(4, 4)] = 0.5;
    a[(5, 5)] = -0.25;
    // Householder reflection, its own inverse
    let w: Vec<f64> = (0..n).map(|i| (i as f64 * 1.7 + 0.3).cos()).collect();
    let ww: f64 = w.iter().map(|x| x * x).sum();
    let q = Mat::<f64>::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } - 2.0 * w[i] * w[j] / ww);
    let b = &q * &a * &q;
    let plain = floquet_core::linalg::eigvals_real(b.as_ref()).unwrap();
    let spread = plain.iter().filter(|m| m.norm() < 0.1).map(|m| m.norm()).fold(0.0, f64::max);
    assert!(spread > 1e-6, "expected a rounding cloud, got {spread:e}");
    let vals = eigvals_real_deflated(b.as_ref(), 1e-11).unwrap();
    let zeros = vals.iter().filter(|m| m.norm() == 0.0).count();
    assert_eq!(zeros, 4, "{vals:?}");
    for target in [0.5, -0.25] {
        assert!(vals.iter().any(|m| (m - C64::new(target, 0.0)).norm() < 1e-12), "{vals:?}");
    }
}
