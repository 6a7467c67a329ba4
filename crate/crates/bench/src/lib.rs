//! Shared fixtures for the benchmarks.

use std::f64::consts::{E, PI};

use floquet_core::builtins::{mathieu_pid, milling, scalar_lambert, Controller};
use floquet_core::{build_grid, CommensurateGrid, PeriodicDelaySystem};

/// The scalar Lambert-W system at K = e/pi, dominant multiplier e.
pub fn scalar() -> (PeriodicDelaySystem, CommensurateGrid) {
    let s = scalar_lambert(E / PI).expect("builtin");
    let g = build_grid(&s, None).expect("grid");
    (s, g)
}

/// Delayed PID control of the Mathieu equation at the tabulated gains.
pub fn mathieu() -> (PeriodicDelaySystem, CommensurateGrid) {
    let s = mathieu_pid(4.0, 2.0, 0.75 * PI, Controller::Pid, &[1.4131, 0.9666, 0.3787]).expect("builtin");
    let g = build_grid(&s, None).expect("grid");
    (s, g)
}

/// A reduced milling model with `n` spatial modes on 26 blocks.
pub fn milling_model(n: usize) -> (PeriodicDelaySystem, CommensurateGrid) {
    let s = milling(n, 0.0).expect("builtin");
    let g = build_grid(&s, Some(1.0 / 26.0)).expect("grid");
    (s, g)
}
