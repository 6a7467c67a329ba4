mod commands;
mod model_file;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use floquet_core::expr::ExprError;
use floquet_core::model::ModelError;
use floquet_core::FloquetError;

use crate::model_file::ModelFileError;
use crate::output::Format;

#[derive(Parser, Debug)]
#[command(name = "floquet", version, about = "Floquet multipliers of periodic delay differential equations")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "FLOQUET_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Rk4,
    Trap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Auto,
    Direct,
    Arnoldi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RefArg {
    Oracle,
    #[value(name = "self")]
    SelfRef,
}

/// Discretisation and output settings shared by all subcommands.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Model file (TOML).
    pub model: PathBuf,
    /// Collocation degree.
    #[arg(long = "M", default_value_t = 15)]
    pub degree: usize,
    /// Integration step for the characteristic matrix.
    #[arg(long, default_value_t = 1e-3)]
    pub delta: f64,
    #[arg(long, value_enum, default_value_t = SchemeArg::Rk4)]
    pub scheme: SchemeArg,
    /// Number of dominant multipliers.
    #[arg(long, default_value_t = 10)]
    pub num: usize,
    #[arg(long, value_enum, default_value_t = MethodArg::Auto)]
    pub method: MethodArg,
    /// Grid step, overriding the model's `delta`.
    #[arg(long)]
    pub grid: Option<f64>,
    /// Parameter override `NAME=VALUE`; repeatable.
    #[arg(long = "set", value_name = "NAME=VALUE")]
    pub set: Vec<String>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Output file (standard output if absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Dominant Floquet multipliers by the two-stage method.
    Spectrum {
        #[command(flatten)]
        common: Common,
        /// Stop after the collocation stage.
        #[arg(long)]
        no_correct: bool,
        /// Also compute left vectors of the corrected pairs.
        #[arg(long)]
        left: bool,
    },
    /// Error of the dominant multiplier over a sweep of `M` or `delta`.
    Converge {
        #[command(flatten)]
        common: Common,
        /// `M=lo:hi[:step]`, `delta=hi:lo:log` (halving) or `delta=hi:lo:<count>`.
        #[arg(long)]
        sweep: String,
        #[arg(long = "ref", value_enum, default_value_t = RefArg::Oracle)]
        reference: RefArg,
    },
    /// Parameter gradient of the dominant multiplier.
    Gradient {
        #[command(flatten)]
        common: Common,
        /// Compare with central finite differences.
        #[arg(long)]
        fd_check: bool,
        /// Relative finite-difference step.
        #[arg(long, default_value_t = 1e-5)]
        fd_step: f64,
        /// Report a gradient at a nearly defective multiplier instead of failing.
        #[arg(long)]
        allow_flagged: bool,
    },
    /// Minimise the spectral radius over the model parameters.
    Optimize {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 200)]
        max_iter: usize,
        #[arg(long, default_value_t = 1e-6)]
        gtol: f64,
    },
    /// Validate a model and its grid.
    Check {
        /// Model file (TOML).
        model: PathBuf,
        #[arg(long)]
        grid: Option<f64>,
    },
    /// Cross-check the two-stage result against a method-of-steps oracle.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 40)]
        mesh: usize,
        #[arg(long, default_value_t = 4)]
        substeps: usize,
        /// Fail (exit 3) when the top-3 deviation exceeds this.
        #[arg(long)]
        tol: Option<f64>,
    },
}

/// An error carrying its exit code.
#[derive(Debug)]
pub struct Coded {
    pub code: u8,
    pub message: String,
}

impl std::fmt::Display for Coded {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Coded {}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(c) = cause.downcast_ref::<Coded>() {
            return c.code;
        }
        if cause.is::<ModelFileError>() || cause.is::<ModelError>() || cause.is::<ExprError>() {
            return 2;
        }
        if let Some(f) = cause.downcast_ref::<FloquetError>() {
            return match f {
                FloquetError::Model(_) | FloquetError::Expr(_) => 2,
                _ => 3,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("warning: could not configure {n} threads: {e}");
        }
    }
    let result = match cli.command {
        Command::Spectrum { common, no_correct, left } => commands::spectrum(&common, no_correct, left),
        Command::Converge {
            common,
            sweep,
            reference,
        } => commands::converge(&common, &sweep, reference),
        Command::Gradient {
            common,
            fd_check,
            fd_step,
            allow_flagged,
        } => commands::gradient(&common, fd_check, fd_step, allow_flagged),
        Command::Optimize { common, max_iter, gtol } => commands::optimize(&common, max_iter, gtol),
        Command::Check { model, grid } => commands::check(&model, grid),
        Command::Verify {
            common,
            mesh,
            substeps,
            tol,
        } => commands::verify(&common, mesh, substeps, tol),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
