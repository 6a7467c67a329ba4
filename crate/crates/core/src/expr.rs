//! Scalar expressions in `t` and named parameters.
//!
//! Expressions are parsed once and evaluated many times; parameter
//! derivatives are produced symbolically so coefficient sensitivities never
//! need finite differences.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { name: String, offset: usize },
    #[error("evaluation error at byte {offset}: {message}")]
    Eval { offset: usize, message: String },
    #[error("expression is not differentiable in `{param}` (parameter inside {func})")]
    NonDifferentiable { param: String, func: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Exp,
    Log,
    Sqrt,
    Abs,
    Heaviside,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tan" => Func::Tan,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "heaviside" => Func::Heaviside,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Heaviside => "heaviside",
        }
    }
}

/// Names that cannot be used as parameters.
pub const RESERVED: [&str; 11] = [
    "t", "pi", "e", "sin", "cos", "tan", "exp", "log", "sqrt", "abs", "heaviside",
];

#[derive(Debug, Clone)]
pub enum Expr {
    Num(f64),
    /// The time variable.
    Time,
    Param { index: usize, name: String },
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    /// Division keeps its source offset for error reporting.
    Div(Box<Expr>, Box<Expr>, usize),
    Pow(Box<Expr>, Box<Expr>, usize),
    Call(Func, Box<Expr>, usize),
}

/// Structural equality ignores source offsets.
impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        use Expr::*;
        match (self, other) {
            (Num(a), Num(b)) => a.to_bits() == b.to_bits(),
            (Time, Time) => true,
            (Param { index: a, .. }, Param { index: b, .. }) => a == b,
            (Neg(a), Neg(b)) => a == b,
            (Add(a, b), Add(c, d))
            | (Sub(a, b), Sub(c, d))
            | (Mul(a, b), Mul(c, d))
            | (Div(a, b, _), Div(c, d, _))
            | (Pow(a, b, _), Pow(c, d, _)) => a == c && b == d,
            (Call(f, a, _), Call(g, b, _)) => f == g && a == b,
            _ => false,
        }
    }
}

impl Expr {
    pub fn num(v: f64) -> Expr {
        Expr::Num(v)
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Num(v) if *v == 0.0)
    }

    pub fn is_one(&self) -> bool {
        matches!(self, Expr::Num(v) if *v == 1.0)
    }

    /// Value if the expression is a plain literal.
    pub fn as_const(&self) -> Option<f64> {
        match self {
            Expr::Num(v) => Some(*v),
            _ => None,
        }
    }

    pub fn depends_on_time(&self) -> bool {
        match self {
            Expr::Time => true,
            Expr::Num(_) | Expr::Param { .. } => false,
            Expr::Neg(a) | Expr::Call(_, a, _) => a.depends_on_time(),
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b, _)
            | Expr::Pow(a, b, _) => a.depends_on_time() || b.depends_on_time(),
        }
    }

    pub fn depends_on_param(&self, index: usize) -> bool {
        match self {
            Expr::Param { index: i, .. } => *i == index,
            Expr::Num(_) | Expr::Time => false,
            Expr::Neg(a) | Expr::Call(_, a, _) => a.depends_on_param(index),
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b, _)
            | Expr::Pow(a, b, _) => a.depends_on_param(index) || b.depends_on_param(index),
        }
    }

    /// Evaluates at time `t` with parameter values `params`.
    pub fn eval(&self, t: f64, params: &[f64]) -> Result<f64, ExprError> {
        Ok(match self {
            Expr::Num(v) => *v,
            Expr::Time => t,
            Expr::Param { index, .. } => params[*index],
            Expr::Neg(a) => -a.eval(t, params)?,
            Expr::Add(a, b) => a.eval(t, params)? + b.eval(t, params)?,
            Expr::Sub(a, b) => a.eval(t, params)? - b.eval(t, params)?,
            Expr::Mul(a, b) => a.eval(t, params)? * b.eval(t, params)?,
            Expr::Div(a, b, at) => {
                let den = b.eval(t, params)?;
                if den == 0.0 {
                    return Err(eval_err(*at, "division by zero"));
                }
                a.eval(t, params)? / den
            }
            Expr::Pow(a, b, at) => {
                let base = a.eval(t, params)?;
                let ex = b.eval(t, params)?;
                let v = base.powf(ex);
                if !v.is_finite() && base.is_finite() && ex.is_finite() {
                    return Err(eval_err(*at, "power is undefined"));
                }
                v
            }
            Expr::Call(f, a, at) => {
                let x = a.eval(t, params)?;
                match f {
                    Func::Sin => x.sin(),
                    Func::Cos => x.cos(),
                    Func::Tan => x.tan(),
                    Func::Exp => x.exp(),
                    Func::Log => {
                        if x <= 0.0 {
                            return Err(eval_err(*at, "log of a non-positive value"));
                        }
                        x.ln()
                    }
                    Func::Sqrt => {
                        if x < 0.0 {
                            return Err(eval_err(*at, "sqrt of a negative value"));
                        }
                        x.sqrt()
                    }
                    Func::Abs => x.abs(),
                    Func::Heaviside => {
                        if x >= 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                }
            }
        })
    }

    /// Symbolic derivative with respect to parameter `index`.
    pub fn diff_param(&self, index: usize) -> Result<Expr, ExprError> {
        if !self.depends_on_param(index) {
            return Ok(Expr::Num(0.0));
        }
        Ok(match self {
            Expr::Num(_) | Expr::Time => Expr::Num(0.0),
            Expr::Param { index: i, .. } => Expr::Num(if *i == index { 1.0 } else { 0.0 }),
            Expr::Neg(a) => neg(a.diff_param(index)?),
            Expr::Add(a, b) => add(a.diff_param(index)?, b.diff_param(index)?),
            Expr::Sub(a, b) => sub(a.diff_param(index)?, b.diff_param(index)?),
            Expr::Mul(a, b) => add(
                mul(a.diff_param(index)?, (**b).clone()),
                mul((**a).clone(), b.diff_param(index)?),
            ),
            Expr::Div(a, b, at) => {
                // (a'b - ab') / b^2
                let num = sub(
                    mul(a.diff_param(index)?, (**b).clone()),
                    mul((**a).clone(), b.diff_param(index)?),
                );
                div(num, pow((**b).clone(), Expr::Num(2.0), *at), *at)
            }
            Expr::Pow(a, b, at) => {
                if !b.depends_on_param(index) {
                    // b a^(b-1) a'
                    let ex = sub((**b).clone(), Expr::Num(1.0));
                    mul(
                        mul((**b).clone(), pow((**a).clone(), ex, *at)),
                        a.diff_param(index)?,
                    )
                } else {
                    // a^b (b' log a + b a'/a)
                    let inner = add(
                        mul(b.diff_param(index)?, call(Func::Log, (**a).clone(), *at)),
                        div(mul((**b).clone(), a.diff_param(index)?), (**a).clone(), *at),
                    );
                    mul(self.clone(), inner)
                }
            }
            Expr::Call(f, a, at) => {
                let da = a.diff_param(index)?;
                let x = (**a).clone();
                let outer = match f {
                    Func::Sin => call(Func::Cos, x, *at),
                    Func::Cos => neg(call(Func::Sin, x, *at)),
                    Func::Tan => div(
                        Expr::Num(1.0),
                        pow(call(Func::Cos, x, *at), Expr::Num(2.0), *at),
                        *at,
                    ),
                    Func::Exp => self.clone(),
                    Func::Log => div(Expr::Num(1.0), x, *at),
                    Func::Sqrt => div(Expr::Num(1.0), mul(Expr::Num(2.0), self.clone()), *at),
                    Func::Abs | Func::Heaviside => {
                        return Err(ExprError::NonDifferentiable {
                            param: param_name(a, index),
                            func: f.name().to_string(),
                        })
                    }
                };
                mul(outer, da)
            }
        })
    }
}

fn param_name(e: &Expr, index: usize) -> String {
    match e {
        Expr::Param { index: i, name } if *i == index => name.clone(),
        Expr::Neg(a) | Expr::Call(_, a, _) => param_name(a, index),
        Expr::Add(a, b)
        | Expr::Sub(a, b)
        | Expr::Mul(a, b)
        | Expr::Div(a, b, _)
        | Expr::Pow(a, b, _) => {
            let n = param_name(a, index);
            if n.is_empty() {
                param_name(b, index)
            } else {
                n
            }
        }
        _ => String::new(),
    }
}

fn eval_err(offset: usize, message: &str) -> ExprError {
    ExprError::Eval {
        offset,
        message: message.to_string(),
    }
}

fn neg(a: Expr) -> Expr {
    if a.is_zero() {
        return Expr::Num(0.0);
    }
    Expr::Neg(Box::new(a))
}

fn add(a: Expr, b: Expr) -> Expr {
    if a.is_zero() {
        return b;
    }
    if b.is_zero() {
        return a;
    }
    Expr::Add(Box::new(a), Box::new(b))
}

fn sub(a: Expr, b: Expr) -> Expr {
    if b.is_zero() {
        return a;
    }
    if a.is_zero() {
        return neg(b);
    }
    Expr::Sub(Box::new(a), Box::new(b))
}

fn mul(a: Expr, b: Expr) -> Expr {
    if a.is_zero() || b.is_zero() {
        return Expr::Num(0.0);
    }
    if a.is_one() {
        return b;
    }
    if b.is_one() {
        return a;
    }
    Expr::Mul(Box::new(a), Box::new(b))
}

fn div(a: Expr, b: Expr, at: usize) -> Expr {
    if a.is_zero() {
        return Expr::Num(0.0);
    }
    if b.is_one() {
        return a;
    }
    Expr::Div(Box::new(a), Box::new(b), at)
}

fn pow(a: Expr, b: Expr, at: usize) -> Expr {
    if b.is_one() {
        return a;
    }
    Expr::Pow(Box::new(a), Box::new(b), at)
}

fn call(f: Func, a: Expr, at: usize) -> Expr {
    Expr::Call(f, Box::new(a), at)
}

// ---------------------------------------------------------------------------
// printing

/// Binding strength used to decide where parentheses are needed.
fn level(e: &Expr) -> u8 {
    match e {
        Expr::Add(..) | Expr::Sub(..) => 1,
        Expr::Mul(..) | Expr::Div(..) => 2,
        Expr::Neg(_) => 3,
        Expr::Pow(..) => 4,
        _ => 5,
    }
}

fn write_num(f: &mut fmt::Formatter<'_>, v: f64) -> fmt::Result {
    if v.is_sign_negative() {
        write!(f, "(-{})", -v)
    } else {
        write!(f, "{}", v)
    }
}

fn wrap(f: &mut fmt::Formatter<'_>, e: &Expr, paren: bool) -> fmt::Result {
    if paren {
        write!(f, "({})", e)
    } else {
        write!(f, "{}", e)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Num(v) => write_num(f, *v),
            Expr::Time => write!(f, "t"),
            Expr::Param { name, .. } => write!(f, "{}", name),
            Expr::Neg(a) => {
                write!(f, "-")?;
                wrap(f, a, level(a) < 3)
            }
            Expr::Add(a, b) | Expr::Sub(a, b) => {
                let op = if matches!(self, Expr::Add(..)) { "+" } else { "-" };
                wrap(f, a, level(a) < 1)?;
                write!(f, "{}", op)?;
                wrap(f, b, level(b) <= 1)
            }
            Expr::Mul(a, b) | Expr::Div(a, b, _) => {
                let op = if matches!(self, Expr::Mul(..)) { "*" } else { "/" };
                wrap(f, a, level(a) < 2)?;
                write!(f, "{}", op)?;
                wrap(f, b, level(b) <= 2)
            }
            Expr::Pow(a, b, _) => {
                wrap(f, a, level(a) <= 4)?;
                write!(f, "^")?;
                wrap(f, b, level(b) < 3)
            }
            Expr::Call(func, a, _) => write!(f, "{}({})", func.name(), a),
        }
    }
}

// ---------------------------------------------------------------------------
// parsing

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    End,
}

struct Lexer<'a> {
    src: &'a str,
    toks: Vec<(Tok, usize)>,
}

impl<'a> Lexer<'a> {
    fn run(src: &'a str) -> Result<Vec<(Tok, usize)>, ExprError> {
        let mut lx = Lexer {
            src,
            toks: Vec::new(),
        };
        let bytes = src.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            let c = bytes[i];
            if c.is_ascii_whitespace() {
                i += 1;
            } else if c.is_ascii_digit() || c == b'.' {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        while j < bytes.len() && bytes[j].is_ascii_digit() {
                            j += 1;
                        }
                        i = j;
                    }
                }
                let text = &lx.src[start..i];
                let v: f64 = text.parse().map_err(|_| ExprError::Syntax {
                    offset: start,
                    message: format!("malformed number `{}`", text),
                })?;
                lx.toks.push((Tok::Num(v), start));
            } else if c.is_ascii_alphabetic() || c == b'_' {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                lx.toks.push((Tok::Ident(lx.src[start..i].to_string()), start));
            } else if b"+-*/^()".contains(&c) {
                lx.toks.push((Tok::Op(c as char), i));
                i += 1;
            } else {
                let ch = src[i..].chars().next().unwrap_or('?');
                return Err(ExprError::Syntax {
                    offset: i,
                    message: format!("unexpected character `{}`", ch),
                });
            }
        }
        lx.toks.push((Tok::End, src.len()));
        Ok(lx.toks)
    }
}

struct Parser<'p> {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    params: &'p [String],
}

impl Parser<'_> {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].0
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].1
    }

    fn bump(&mut self) -> (Tok, usize) {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn unexpected(&self) -> ExprError {
        let message = match self.peek() {
            Tok::End => "unexpected end of input".to_string(),
            Tok::Op(c) => format!("unexpected `{}`", c),
            Tok::Num(v) => format!("unexpected number `{}`", v),
            Tok::Ident(s) => format!("unexpected identifier `{}`", s),
        };
        ExprError::Syntax {
            offset: self.offset(),
            message,
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Tok::Op('+') => {
                    self.bump();
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Tok::Op('-') => {
                    self.bump();
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Tok::Op('*') => {
                    self.bump();
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Tok::Op('/') => {
                    let (_, at) = self.bump();
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?), at);
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if *self.peek() == Tok::Op('-') {
            self.bump();
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.base()?;
        if *self.peek() == Tok::Op('^') {
            let (_, at) = self.bump();
            let ex = self.unary()?;
            return Ok(Expr::Pow(Box::new(base), Box::new(ex), at));
        }
        Ok(base)
    }

    fn base(&mut self) -> Result<Expr, ExprError> {
        match self.peek().clone() {
            Tok::Num(v) => {
                self.bump();
                Ok(Expr::Num(v))
            }
            Tok::Op('(') => {
                self.bump();
                let e = self.expr()?;
                self.expect_close()?;
                Ok(e)
            }
            Tok::Ident(name) => {
                let (_, at) = self.bump();
                if *self.peek() == Tok::Op('(') {
                    let func = Func::from_name(&name).ok_or(ExprError::UnknownIdentifier {
                        name: name.clone(),
                        offset: at,
                    })?;
                    self.bump();
                    let arg = self.expr()?;
                    self.expect_close()?;
                    return Ok(Expr::Call(func, Box::new(arg), at));
                }
                match name.as_str() {
                    "t" => Ok(Expr::Time),
                    "pi" => Ok(Expr::Num(std::f64::consts::PI)),
                    "e" => Ok(Expr::Num(std::f64::consts::E)),
                    _ => match self.params.iter().position(|p| *p == name) {
                        Some(index) => Ok(Expr::Param { index, name }),
                        None => Err(ExprError::UnknownIdentifier { name, offset: at }),
                    },
                }
            }
            _ => Err(self.unexpected()),
        }
    }

    fn expect_close(&mut self) -> Result<(), ExprError> {
        if *self.peek() == Tok::Op(')') {
            self.bump();
            Ok(())
        } else {
            Err(self.unexpected())
        }
    }
}

/// Parses `src` with the given parameter names in scope.
pub fn parse(src: &str, params: &[String]) -> Result<Expr, ExprError> {
    let toks = Lexer::run(src)?;
    let mut p = Parser {
        toks,
        pos: 0,
        params,
    };
    let e = p.expr()?;
    if *p.peek() != Tok::End {
        return Err(p.unexpected());
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn evaluates_trig_product() {
        let e = parse("K*cos(2*t)", &names(&["K"])).unwrap();
        let v = e.eval(0.0, &[std::f64::consts::E / std::f64::consts::PI]).unwrap();
        assert!((v - 0.8652559794322651).abs() < 1e-15);
    }

    #[test]
    fn derivative_simplifies() {
        let ps = names(&["K"]);
        let e = parse("K*cos(2*t)", &ps).unwrap();
        assert_eq!(e.diff_param(0).unwrap().to_string(), "cos(2*t)");
        let ps = names(&["k_p"]);
        let e = parse("-k_p", &ps).unwrap();
        assert_eq!(e.diff_param(0).unwrap().to_string(), "-1");
    }

    #[test]
    fn rejects_double_star() {
        match parse("2**t", &[]) {
            Err(ExprError::Syntax { offset, .. }) => assert_eq!(offset, 2),
            other => panic!("{:?}", other),
        }
    }

    #[test]
    fn unknown_identifier() {
        assert!(matches!(
            parse("x + 1", &[]),
            Err(ExprError::UnknownIdentifier { offset: 0, .. })
        ));
        assert!(matches!(
            parse("foo(t)", &[]),
            Err(ExprError::UnknownIdentifier { .. })
        ));
    }

    #[test]
    fn heaviside_of_parameter_is_not_differentiable() {
        let e = parse("heaviside(K - t)", &names(&["K"])).unwrap();
        assert!(matches!(
            e.diff_param(0),
            Err(ExprError::NonDifferentiable { .. })
        ));
        let e = parse("K*heaviside(0.5 - t)", &names(&["K"])).unwrap();
        assert!(e.diff_param(0).is_ok());
    }

    #[test]
    fn precedence() {
        let ev = |s: &str| parse(s, &[]).unwrap().eval(0.0, &[]).unwrap();
        assert_eq!(ev("-2^2"), -4.0);
        assert_eq!(ev("2^3^2"), 512.0);
        assert_eq!(ev("2^-1"), 0.5);
        assert_eq!(ev("1-2-3"), -4.0);
        assert_eq!(ev("8/4/2"), 1.0);
        assert_eq!(ev("2*-3"), -6.0);
        assert_eq!(ev("1.5e2 + 1e-1"), 150.1);
        assert_eq!(ev("heaviside(0)"), 1.0);
    }

    #[test]
    fn eval_errors_carry_offsets() {
        let e = parse("1/(t-1)", &[]).unwrap();
        assert!(matches!(e.eval(1.0, &[]), Err(ExprError::Eval { offset: 1, .. })));
        let e = parse("log(t)", &[]).unwrap();
        assert!(matches!(e.eval(0.0, &[]), Err(ExprError::Eval { offset: 0, .. })));
    }
}
