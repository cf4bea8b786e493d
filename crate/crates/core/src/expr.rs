//! Expression language for profiles ψ(r) and nonlinearities φ(u).
//!
//! Grammar (lowest to highest precedence):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := primary ('^' unary)?        right-associative
//! primary := number | ident | ident '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! A single free variable is allowed; profiles use `r`, nonlinearities `u`.
//! Evaluation carries a second-order jet so ψ′ and ψ″ come from the tree itself.

use std::fmt;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("parse error at byte {offset}: expected {}", expected.join(" or "))]
pub struct ParseError {
    pub offset: usize,
    pub expected: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalDomainError {
    #[error("{func} is undefined at {arg}")]
    OutsideDomain { func: &'static str, arg: f64 },
    #[error("division by zero")]
    DivisionByZero,
    #[error("non-finite result")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Sin,
    Cos,
    Sinh,
    Cosh,
    Tanh,
    Exp,
    Log,
    Sqrt,
    Abs,
    Pospart,
    Min,
    Max,
}

impl Func {
    pub const ALL: [Func; 12] = [
        Func::Sin,
        Func::Cos,
        Func::Sinh,
        Func::Cosh,
        Func::Tanh,
        Func::Exp,
        Func::Log,
        Func::Sqrt,
        Func::Abs,
        Func::Pospart,
        Func::Min,
        Func::Max,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Sinh => "sinh",
            Func::Cosh => "cosh",
            Func::Tanh => "tanh",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Pospart => "pospart",
            Func::Min => "min",
            Func::Max => "max",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }

    fn from_name(s: &str) -> Option<Func> {
        Func::ALL.iter().copied().find(|f| f.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(String),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

/// Value with first and second derivative along the free variable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet {
    pub v: f64,
    pub d1: f64,
    pub d2: f64,
}

impl Jet {
    pub fn constant(v: f64) -> Jet {
        Jet { v, d1: 0.0, d2: 0.0 }
    }
    pub fn variable(v: f64) -> Jet {
        Jet { v, d1: 1.0, d2: 0.0 }
    }
    // chain rule for a scalar map with derivatives (g, g', g'')
    fn compose(self, g: f64, g1: f64, g2: f64) -> Jet {
        Jet { v: g, d1: g1 * self.d1, d2: g2 * self.d1 * self.d1 + g1 * self.d2 }
    }
    fn is_constant(&self) -> bool {
        self.d1 == 0.0 && self.d2 == 0.0
    }
}

fn add(a: Jet, b: Jet) -> Jet {
    Jet { v: a.v + b.v, d1: a.d1 + b.d1, d2: a.d2 + b.d2 }
}
fn sub(a: Jet, b: Jet) -> Jet {
    Jet { v: a.v - b.v, d1: a.d1 - b.d1, d2: a.d2 - b.d2 }
}
fn mul(a: Jet, b: Jet) -> Jet {
    Jet { v: a.v * b.v, d1: a.d1 * b.v + a.v * b.d1, d2: a.d2 * b.v + 2.0 * a.d1 * b.d1 + a.v * b.d2 }
}
fn div(a: Jet, b: Jet) -> Result<Jet, EvalDomainError> {
    if b.v == 0.0 {
        return Err(EvalDomainError::DivisionByZero);
    }
    let inv = b.compose(1.0 / b.v, -1.0 / (b.v * b.v), 2.0 / (b.v * b.v * b.v));
    Ok(mul(a, inv))
}

fn pow(a: Jet, b: Jet) -> Result<Jet, EvalDomainError> {
    if b.is_constant() {
        let c = b.v;
        if c == 0.0 {
            return Ok(Jet::constant(1.0));
        }
        if a.v < 0.0 && c.fract() != 0.0 {
            return Err(EvalDomainError::OutsideDomain { func: "pow", arg: a.v });
        }
        if a.v == 0.0 && c < 0.0 {
            return Err(EvalDomainError::DivisionByZero);
        }
        let g = a.v.powf(c);
        let g1 = if c == 1.0 { 1.0 } else { c * a.v.powf(c - 1.0) };
        let g2 = if c == 1.0 || c == 2.0 { c * (c - 1.0) } else { c * (c - 1.0) * a.v.powf(c - 2.0) };
        // at a = 0 the higher terms only matter when a moves
        let g2 = if a.d1 == 0.0 && !g2.is_finite() { 0.0 } else { g2 };
        return Ok(a.compose(g, g1, g2));
    }
    if a.v <= 0.0 {
        return Err(EvalDomainError::OutsideDomain { func: "pow", arg: a.v });
    }
    let ln = a.compose(a.v.ln(), 1.0 / a.v, -1.0 / (a.v * a.v));
    let e = mul(b, ln);
    let g = e.v.exp();
    Ok(e.compose(g, g, g))
}

fn call(func: Func, args: &[Jet]) -> Result<Jet, EvalDomainError> {
    let x = args[0];
    let j = match func {
        Func::Sin => x.compose(x.v.sin(), x.v.cos(), -x.v.sin()),
        Func::Cos => x.compose(x.v.cos(), -x.v.sin(), -x.v.cos()),
        Func::Sinh => x.compose(x.v.sinh(), x.v.cosh(), x.v.sinh()),
        Func::Cosh => x.compose(x.v.cosh(), x.v.sinh(), x.v.cosh()),
        Func::Tanh => {
            let t = x.v.tanh();
            let s = 1.0 - t * t;
            x.compose(t, s, -2.0 * t * s)
        }
        Func::Exp => {
            let e = x.v.exp();
            x.compose(e, e, e)
        }
        Func::Log => {
            if x.v <= 0.0 {
                return Err(EvalDomainError::OutsideDomain { func: "log", arg: x.v });
            }
            x.compose(x.v.ln(), 1.0 / x.v, -1.0 / (x.v * x.v))
        }
        Func::Sqrt => {
            if x.v < 0.0 {
                return Err(EvalDomainError::OutsideDomain { func: "sqrt", arg: x.v });
            }
            let s = x.v.sqrt();
            if s == 0.0 {
                if x.is_constant() {
                    Jet::constant(0.0)
                } else {
                    return Err(EvalDomainError::OutsideDomain { func: "sqrt'", arg: x.v });
                }
            } else {
                x.compose(s, 0.5 / s, -0.25 / (s * x.v))
            }
        }
        Func::Abs => {
            let sg = if x.v < 0.0 { -1.0 } else { 1.0 };
            x.compose(x.v.abs(), sg, 0.0)
        }
        Func::Pospart => {
            if x.v > 0.0 {
                x
            } else {
                Jet::constant(0.0)
            }
        }
        Func::Min => {
            if args[0].v <= args[1].v {
                args[0]
            } else {
                args[1]
            }
        }
        Func::Max => {
            if args[0].v >= args[1].v {
                args[0]
            } else {
                args[1]
            }
        }
    };
    Ok(j)
}

/// A function of r whose sign changes mark kinks of an expression.
type Switch<'a> = Box<dyn Fn(f64) -> Result<f64, EvalDomainError> + 'a>;

impl Expr {
    /// Evaluates the jet with the free variable set to `x`.
    pub fn jet(&self, x: f64) -> Result<Jet, EvalDomainError> {
        let j = self.jet_inner(x)?;
        if !j.v.is_finite() {
            return Err(EvalDomainError::NonFinite);
        }
        Ok(j)
    }

    pub fn eval(&self, x: f64) -> Result<f64, EvalDomainError> {
        self.jet(x).map(|j| j.v)
    }

    /// Points in (lo, hi) where an `abs`, `pospart`, `min` or `max` switches
    /// branch, located from sign changes on `samples` uniform points and refined
    /// by bisection. Sorted and deduplicated.
    pub fn breakpoints(&self, lo: f64, hi: f64, samples: usize) -> Vec<f64> {
        let mut switches = Vec::new();
        self.collect_switches(&mut switches);
        let samples = samples.max(2);
        let mut out = Vec::new();
        for g in switches {
            let at = |x: f64| g(x).unwrap_or(f64::NAN);
            let mut prev = (lo, at(lo));
            for i in 1..=samples {
                let x = lo + (hi - lo) * i as f64 / samples as f64;
                let gx = at(x);
                if gx == 0.0 && x < hi {
                    out.push(x);
                } else if prev.1 * gx < 0.0 {
                    let (mut a, mut b, ga) = (prev.0, x, prev.1);
                    loop {
                        let mid = 0.5 * (a + b);
                        if mid <= a || mid >= b {
                            break;
                        }
                        if at(mid) * ga > 0.0 {
                            a = mid;
                        } else {
                            b = mid;
                        }
                    }
                    out.push(0.5 * (a + b));
                }
                prev = (x, gx);
            }
        }
        out.retain(|&x| x > lo && x < hi);
        out.sort_by(f64::total_cmp);
        out.dedup();
        out
    }

    fn collect_switches<'a>(&'a self, out: &mut Vec<Switch<'a>>) {
        match self {
            Expr::Num(_) | Expr::Var(_) => {}
            Expr::Neg(a) => a.collect_switches(out),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) | Expr::Pow(a, b) => {
                a.collect_switches(out);
                b.collect_switches(out);
            }
            Expr::Call(func, args) => {
                args.iter().for_each(|a| a.collect_switches(out));
                match func {
                    Func::Abs | Func::Pospart => out.push(Box::new(move |x| args[0].eval(x))),
                    Func::Min | Func::Max => out.push(Box::new(move |x| Ok(args[0].eval(x)? - args[1].eval(x)?))),
                    _ => {}
                }
            }
        }
    }

    fn jet_inner(&self, x: f64) -> Result<Jet, EvalDomainError> {
        Ok(match self {
            Expr::Num(c) => Jet::constant(*c),
            Expr::Var(_) => Jet::variable(x),
            Expr::Neg(a) => {
                let a = a.jet_inner(x)?;
                Jet { v: -a.v, d1: -a.d1, d2: -a.d2 }
            }
            Expr::Add(a, b) => add(a.jet_inner(x)?, b.jet_inner(x)?),
            Expr::Sub(a, b) => sub(a.jet_inner(x)?, b.jet_inner(x)?),
            Expr::Mul(a, b) => mul(a.jet_inner(x)?, b.jet_inner(x)?),
            Expr::Div(a, b) => div(a.jet_inner(x)?, b.jet_inner(x)?)?,
            Expr::Pow(a, b) => pow(a.jet_inner(x)?, b.jet_inner(x)?)?,
            Expr::Call(f, args) => {
                let js = args.iter().map(|a| a.jet_inner(x)).collect::<Result<Vec<_>, _>>()?;
                call(*f, &js)?
            }
        })
    }

    /// Names of free variables occurring in the tree, deduplicated.
    pub fn variables(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut Vec<String>) {
        match self {
            Expr::Num(_) => {}
            Expr::Var(v) => {
                if !out.contains(v) {
                    out.push(v.clone());
                }
            }
            Expr::Neg(a) => a.collect_vars(out),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) | Expr::Pow(a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
            Expr::Call(_, args) => args.iter().for_each(|a| a.collect_vars(out)),
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(..) => 3,
            Expr::Pow(..) => 4,
            Expr::Num(..) | Expr::Var(..) | Expr::Call(..) => 5,
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn wrap(f: &mut fmt::Formatter<'_>, e: &Expr, paren: bool) -> fmt::Result {
            if paren {
                write!(f, "({e})")
            } else {
                write!(f, "{e}")
            }
        }
        let p = self.precedence();
        match self {
            Expr::Num(c) => write!(f, "{c}"),
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Neg(a) => {
                write!(f, "-")?;
                wrap(f, a, a.precedence() < 3)
            }
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                let op = match self {
                    Expr::Add(..) => "+",
                    Expr::Sub(..) => "-",
                    Expr::Mul(..) => "*",
                    _ => "/",
                };
                // the right operand of a unary minus binds as a unary, so it never needs parens here
                wrap(f, a, a.precedence() < p)?;
                write!(f, "{op}")?;
                wrap(f, b, b.precedence() <= p && b.precedence() != 3)
            }
            Expr::Pow(a, b) => {
                wrap(f, a, a.precedence() <= p)?;
                write!(f, "^")?;
                wrap(f, b, b.precedence() < 3)
            }
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{a}")?;
                }
                write!(f, ")")
            }
        }
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn error<T>(&self, expected: &[&str]) -> Result<T, ParseError> {
        Err(ParseError { offset: self.pos, expected: expected.iter().map(|s| s.to_string()).collect() })
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        while let Some(c @ (b'+' | b'-')) = self.peek() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = if c == b'+' { Expr::Add(lhs.into(), rhs.into()) } else { Expr::Sub(lhs.into(), rhs.into()) };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        while let Some(c @ (b'*' | b'/')) = self.peek() {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = if c == b'*' { Expr::Mul(lhs.into(), rhs.into()) } else { Expr::Div(lhs.into(), rhs.into()) };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            return Ok(Expr::Neg(self.unary()?.into()));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.primary()?;
        if self.peek() == Some(b'^') {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Expr::Pow(base.into(), exp.into()));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if self.peek() != Some(b')') {
                    return self.error(&["')'"]);
                }
                self.pos += 1;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => {
                let start = self.pos;
                while self.pos < self.src.len()
                    && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
                {
                    self.pos += 1;
                }
                let name = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or_default().to_string();
                if let Some(func) = Func::from_name(&name) {
                    if self.peek() != Some(b'(') {
                        return self.error(&["'('"]);
                    }
                    self.pos += 1;
                    let mut args = vec![self.expr()?];
                    while self.peek() == Some(b',') {
                        self.pos += 1;
                        args.push(self.expr()?);
                    }
                    if args.len() != func.arity() {
                        return self.error(&[if func.arity() == 1 {
                            "')' after 1 argument"
                        } else {
                            "',' and 2 arguments"
                        }]);
                    }
                    if self.peek() != Some(b')') {
                        return self.error(&["')'"]);
                    }
                    self.pos += 1;
                    Ok(Expr::Call(func, args))
                } else if name == "r" || name == "u" {
                    Ok(Expr::Var(name))
                } else {
                    self.pos = start;
                    self.error(&["variable 'r' or 'u'", "function name"])
                }
            }
            _ => self.error(&["number", "identifier", "'('", "'-'"]),
        }
    }

    fn number(&mut self) -> Result<Expr, ParseError> {
        let start = self.pos;
        let s = self.src;
        let digits = |p: &mut usize| {
            let b = *p;
            while *p < s.len() && s[*p].is_ascii_digit() {
                *p += 1;
            }
            *p - b
        };
        let mut p = self.pos;
        let mut n = digits(&mut p);
        if p < s.len() && s[p] == b'.' {
            p += 1;
            n += digits(&mut p);
        }
        if n == 0 {
            self.pos = p;
            return self.error(&["digit"]);
        }
        if p < s.len() && (s[p] == b'e' || s[p] == b'E') {
            let mut q = p + 1;
            if q < s.len() && (s[q] == b'+' || s[q] == b'-') {
                q += 1;
            }
            if digits(&mut q) > 0 {
                p = q;
            }
        }
        self.pos = p;
        let text = std::str::from_utf8(&s[start..p]).unwrap_or_default();
        match text.parse::<f64>() {
            Ok(v) => Ok(Expr::Num(v)),
            Err(_) => {
                self.pos = start;
                self.error(&["number"])
            }
        }
    }
}

/// Parses an expression; the whole input must be consumed.
pub fn parse_expression(src: &str) -> Result<Expr, ParseError> {
    let mut p = Parser { src: src.as_bytes(), pos: 0 };
    let e = p.expr()?;
    if p.peek().is_some() {
        return p.error(&["operator", "end of input"]);
    }
    Ok(e)
}
