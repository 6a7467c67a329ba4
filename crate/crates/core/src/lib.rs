//! Floquet multipliers of linear periodic delay differential equations.

pub mod builtins;
pub mod charfun;
pub mod colloc;
pub mod error;
pub mod expr;
pub mod linalg;
pub mod model;
pub mod optimize;
pub mod oracles;
pub mod sensitivity;
pub mod solve;

pub use charfun::{CharEvalContext, Scheme};
pub use error::{FloquetError, Result};
pub use linalg::C64;
pub use model::{build_grid, CommensurateGrid, ParamVector, PeriodicDelaySystem};
