//! TOML model files.
//!
//! ```toml
//! dim = 1
//! period = "pi"
//! delays = ["pi", "2*pi"]
//! params = { K = 0.865 }
//! delta = "pi"              # optional grid step
//! discontinuities = []      # optional
//! A0 = [["K*cos(2*t)"]]
//! A1 = [["sin(2*t) + K"]]
//! A2 = [["0.1*cos(2*t)*exp(sin(2*t))"]]
//! mass = [[1.0]]            # optional
//! ```
//!
//! A `[builtin]` table replaces all of the above.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use floquet_core::builtins::{self, Controller};
use floquet_core::expr::{self, Expr};
use floquet_core::model::{CoeffMatrix, ModelError, SparseReal};
use floquet_core::{ParamVector, PeriodicDelaySystem};
use serde::Deserialize;
use toml::Value;

#[derive(Debug)]
pub struct ModelFileError(pub String);

impl fmt::Display for ModelFileError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ModelFileError {}

impl From<ModelError> for ModelFileError {
    fn from(e: ModelError) -> Self {
        ModelFileError(e.to_string())
    }
}

impl From<expr::ExprError> for ModelFileError {
    fn from(e: expr::ExprError) -> Self {
        ModelFileError(e.to_string())
    }
}

fn err<T>(msg: impl Into<String>) -> Result<T, ModelFileError> {
    Err(ModelFileError(msg.into()))
}

/// A number or an expression string.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Num(f64),
    Int(i64),
    Text(String),
}

impl Scalar {
    fn source(&self) -> String {
        match self {
            Scalar::Num(x) => format!("{:e}", x),
            Scalar::Int(i) => i.to_string(),
            Scalar::Text(s) => s.clone(),
        }
    }

    /// Value of a constant expression (no `t`, no parameters).
    pub fn constant(&self, what: &str) -> Result<f64, ModelFileError> {
        match self {
            Scalar::Num(x) => Ok(*x),
            Scalar::Int(i) => Ok(*i as f64),
            Scalar::Text(s) => {
                let e = expr::parse(s, &[]).map_err(|e| ModelFileError(format!("{what}: {e}")))?;
                if e.depends_on_time() {
                    return err(format!("{what} must not depend on t"));
                }
                Ok(e.eval(0.0, &[])?)
            }
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Builtin {
    name: String,
    #[serde(rename = "K")]
    k: Option<f64>,
    n: Option<usize>,
    nu: Option<Scalar>,
    eps: Option<Scalar>,
    tau: Option<Scalar>,
    controller: Option<String>,
    gains: Option<Vec<f64>>,
    delta: Option<Scalar>,
}

#[derive(Debug, Deserialize)]
struct Raw {
    builtin: Option<Builtin>,
    dim: Option<usize>,
    period: Option<Scalar>,
    delays: Option<Vec<Scalar>>,
    params: Option<toml::Table>,
    delta: Option<Scalar>,
    discontinuities: Option<Vec<Scalar>>,
    mass: Option<Vec<Vec<f64>>>,
    #[serde(flatten)]
    rest: BTreeMap<String, Value>,
}

/// A loaded model: the system plus an optional grid step.
#[derive(Debug, Clone)]
pub struct Model {
    pub system: PeriodicDelaySystem,
    pub delta: Option<f64>,
    /// Builtin name if the file used one.
    pub builtin: Option<String>,
}

pub fn load(path: &Path) -> Result<Model, ModelFileError> {
    let text = std::fs::read_to_string(path).map_err(|e| ModelFileError(format!("{}: {e}", path.display())))?;
    parse_model(&text)
}

pub fn parse_model(text: &str) -> Result<Model, ModelFileError> {
    let raw: Raw = toml::from_str(text).map_err(|e| ModelFileError(format!("model file: {e}")))?;
    if let Some(b) = raw.builtin {
        return builtin(b);
    }
    let dim = raw.dim.ok_or_else(|| ModelFileError("missing `dim`".into()))?;
    let period = raw
        .period
        .ok_or_else(|| ModelFileError("missing `period`".into()))?
        .constant("period")?;
    let delays = raw
        .delays
        .unwrap_or_default()
        .iter()
        .enumerate()
        .map(|(j, d)| d.constant(&format!("delay {}", j + 1)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut names = Vec::new();
    let mut values = Vec::new();
    for (name, v) in raw.params.unwrap_or_default() {
        let x = match v {
            Value::Float(x) => x,
            Value::Integer(i) => i as f64,
            Value::String(s) => Scalar::Text(s).constant(&format!("parameter {name}"))?,
            _ => return err(format!("parameter {name} must be a number")),
        };
        names.push(name);
        values.push(x);
    }
    let mut coeffs = Vec::new();
    for j in 0..=delays.len() {
        let key = format!("A{j}");
        let m = match raw.rest.get(&key) {
            Some(v) => matrix(v, dim, &names, &key)?,
            None => CoeffMatrix::zeros(dim),
        };
        coeffs.push(m);
    }
    if let Some(extra) = raw.rest.keys().find(|k| !is_coeff_key(k, delays.len())) {
        return err(format!("unknown key `{extra}`"));
    }
    let mass = match raw.mass {
        Some(rows) => {
            if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                return err(format!("mass must be {dim}x{dim}"));
            }
            let mut entries = Vec::new();
            for (r, row) in rows.iter().enumerate() {
                for (c, &v) in row.iter().enumerate() {
                    if v != 0.0 {
                        entries.push((r, c, v));
                    }
                }
            }
            Some(SparseReal { dim, entries })
        }
        None => None,
    };
    let params = ParamVector::new(names, values)?;
    let mut system = PeriodicDelaySystem::new(period, delays, coeffs, mass, params)?;
    if let Some(d) = raw.discontinuities {
        let points = d
            .iter()
            .map(|x| x.constant("discontinuity"))
            .collect::<Result<Vec<_>, _>>()?;
        system = system.with_discontinuities(points);
    }
    let delta = raw.delta.map(|d| d.constant("delta")).transpose()?;
    Ok(Model {
        system,
        delta,
        builtin: None,
    })
}

fn is_coeff_key(k: &str, h: usize) -> bool {
    k.strip_prefix('A')
        .and_then(|s| s.parse::<usize>().ok())
        .is_some_and(|j| j <= h)
}

fn matrix(v: &Value, dim: usize, names: &[String], key: &str) -> Result<CoeffMatrix, ModelFileError> {
    let rows = v.as_array().ok_or_else(|| ModelFileError(format!("{key} must be an array of rows")))?;
    if rows.len() != dim {
        return err(format!("{key} has {} rows, expected {dim}", rows.len()));
    }
    let mut table = Vec::with_capacity(dim);
    for (r, row) in rows.iter().enumerate() {
        let row = row.as_array().ok_or_else(|| ModelFileError(format!("{key} row {r} is not an array")))?;
        if row.len() != dim {
            return err(format!("{key} row {r} has {} entries, expected {dim}", row.len()));
        }
        let mut out = Vec::with_capacity(dim);
        for (c, x) in row.iter().enumerate() {
            let s = match x {
                Value::Float(f) => Scalar::Num(*f),
                Value::Integer(i) => Scalar::Int(*i),
                Value::String(s) => Scalar::Text(s.clone()),
                _ => return err(format!("{key}[{r}][{c}] must be a number or an expression")),
            };
            let e: Expr =
                expr::parse(&s.source(), names).map_err(|e| ModelFileError(format!("{key}[{r}][{c}]: {e}")))?;
            out.push(e);
        }
        table.push(out);
    }
    Ok(CoeffMatrix::from_dense(table)?)
}

fn builtin(b: Builtin) -> Result<Model, ModelFileError> {
    let delta = b.delta.as_ref().map(|d| d.constant("delta")).transpose()?;
    let system = match b.name.as_str() {
        "scalar_lambert" => builtins::scalar_lambert(b.k.unwrap_or(std::f64::consts::E / std::f64::consts::PI))?,
        "mathieu_pid" => {
            let ctrl = b.controller.as_deref().unwrap_or("PID");
            let controller = Controller::parse(ctrl).ok_or_else(|| ModelFileError(format!("unknown controller {ctrl}")))?;
            let nu = b.nu.as_ref().map_or(Ok(4.0), |x| x.constant("nu"))?;
            let eps = b.eps.as_ref().map_or(Ok(2.0), |x| x.constant("eps"))?;
            let tau = b
                .tau
                .as_ref()
                .map_or(Ok(0.75 * std::f64::consts::PI), |x| x.constant("tau"))?;
            let gains = b.gains.unwrap_or_else(|| vec![0.0; controller.gain_names().len()]);
            builtins::mathieu_pid(nu, eps, tau, controller, &gains)?
        }
        "milling" => builtins::milling(b.n.unwrap_or(50), b.k.unwrap_or(0.0))?,
        other => return err(format!("unknown builtin `{other}`")),
    };
    Ok(Model {
        system,
        delta,
        builtin: Some(b.name),
    })
}

/// Applies `NAME=VALUE` overrides to the system parameters.
pub fn apply_overrides(system: &PeriodicDelaySystem, sets: &[String]) -> Result<PeriodicDelaySystem, ModelFileError> {
    if sets.is_empty() {
        return Ok(system.clone());
    }
    let mut values = system.param_values().to_vec();
    for s in sets {
        let (name, value) = s
            .split_once('=')
            .ok_or_else(|| ModelFileError(format!("override `{s}` is not NAME=VALUE")))?;
        let idx = system
            .params()
            .index_of(name.trim())
            .ok_or_else(|| ModelFileError(format!("unknown parameter `{}`", name.trim())))?;
        values[idx] = Scalar::Text(value.trim().to_string()).constant(name)?;
    }
    Ok(system.with_param_values(&values)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_the_scalar_example() {
        let m = parse_model(
            r#"
dim = 1
period = "pi"
delays = ["pi", "2*pi"]
params = { K = 0.5 }
A0 = [["K*cos(2*t)"]]
A1 = [["sin(2*t) + K"]]
A2 = [["0.1*cos(2*t)*exp(sin(2*t))"]]
"#,
        )
        .unwrap();
        let reference = builtins::scalar_lambert(0.5).unwrap();
        assert_eq!(m.system, reference);
    }

    #[test]
    fn rejects_bad_shapes_and_keys() {
        let base = "dim = 2\nperiod = 1\ndelays = [1]\n";
        assert!(parse_model(&format!("{base}A0 = [[\"1\"]]")).is_err());
        assert!(parse_model(&format!("{base}A3 = [[1, 0], [0, 1]]")).is_err());
        assert!(parse_model(&format!("{base}A0 = [[\"t +\", 0], [0, 1]]")).is_err());
        assert!(parse_model("period = 1").is_err());
    }

    #[test]
    fn overrides_parameters() {
        let m = parse_model("[builtin]\nname = \"mathieu_pid\"\ncontroller = \"PD\"\n").unwrap();
        let s = apply_overrides(&m.system, &["k_p=0.5".into(), "k_d = 1/4".into()]).unwrap();
        assert_eq!(s.param_values(), &[0.5, 0.25]);
        assert!(apply_overrides(&m.system, &["k_q=1".into()]).is_err());
    }
}
