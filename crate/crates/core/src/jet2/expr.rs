//! Expression grammar for test functions.
//!
//! CLI configs name functions with: identifiers `x0..x15`, numeric literals,
//! `+ - *`, the primitives `sin cos exp sq`, and parentheses, e.g.
//! `"sin(x0)*x1 + sq(x0)"`. The extra primitive `win(a, b, e)` is a C²
//! plateau window (identically 1 for `|e| <= a`, 0 for `|e| >= b`, quintic
//! smoothstep in between); it is what keeps polynomial-like battery members
//! bounded with bounded derivatives.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use super::Jet2;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(usize),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
    Sin(Box<Expr>),
    Cos(Box<Expr>),
    Exp(Box<Expr>),
    Sq(Box<Expr>),
    Win {
        plateau: f64,
        support: f64,
        arg: Box<Expr>,
    },
}

/// Quintic smoothstep `6t^5 - 15t^4 + 10t^3` with first two derivatives;
/// C² when clamped to [0,1].
fn smoothstep(t: f64) -> (f64, f64, f64) {
    let t2 = t * t;
    let t3 = t2 * t;
    (
        ((6.0 * t - 15.0) * t + 10.0) * t3,
        ((30.0 * t - 60.0) * t + 30.0) * t2,
        ((120.0 * t - 180.0) * t + 60.0) * t,
    )
}

/// Plateau window value and derivatives in the window argument.
fn window(u: f64, a: f64, b: f64) -> (f64, f64, f64) {
    let r = u.abs();
    if r <= a {
        (1.0, 0.0, 0.0)
    } else if r >= b {
        (0.0, 0.0, 0.0)
    } else {
        let scale = 1.0 / (b - a);
        let (s, s1, s2) = smoothstep((b - r) * scale);
        let sign = if u < 0.0 { -1.0 } else { 1.0 };
        (s, -sign * s1 * scale, s2 * scale * scale)
    }
}

impl Expr {
    /// Scalar evaluation; the hot path for Monte Carlo integrands.
    pub fn eval_value(&self, x: &[f64]) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(i) => x[*i],
            Expr::Add(a, b) => a.eval_value(x) + b.eval_value(x),
            Expr::Sub(a, b) => a.eval_value(x) - b.eval_value(x),
            Expr::Mul(a, b) => a.eval_value(x) * b.eval_value(x),
            Expr::Neg(a) => -a.eval_value(x),
            Expr::Sin(a) => a.eval_value(x).sin(),
            Expr::Cos(a) => a.eval_value(x).cos(),
            Expr::Exp(a) => a.eval_value(x).exp(),
            Expr::Sq(a) => {
                let v = a.eval_value(x);
                v * v
            }
            Expr::Win {
                plateau,
                support,
                arg,
            } => window(arg.eval_value(x), *plateau, *support).0,
        }
    }

    /// Full second-order jet at `x` (dimension `dim`).
    pub fn eval_jet(&self, x: &[f64], dim: usize) -> Jet2 {
        match self {
            Expr::Const(c) => Jet2::constant(*c, dim),
            Expr::Var(i) => Jet2::variable(x[*i], *i, dim),
            Expr::Add(a, b) => a
                .eval_jet(x, dim)
                .add(&b.eval_jet(x, dim))
                .expect("same dimension by construction"),
            Expr::Sub(a, b) => a
                .eval_jet(x, dim)
                .sub(&b.eval_jet(x, dim))
                .expect("same dimension by construction"),
            Expr::Mul(a, b) => a
                .eval_jet(x, dim)
                .mul(&b.eval_jet(x, dim))
                .expect("same dimension by construction"),
            Expr::Neg(a) => a.eval_jet(x, dim).neg(),
            Expr::Sin(a) => {
                let j = a.eval_jet(x, dim);
                let (s, c) = j.value().sin_cos();
                j.chain(s, c, -s)
            }
            Expr::Cos(a) => {
                let j = a.eval_jet(x, dim);
                let (s, c) = j.value().sin_cos();
                j.chain(c, -s, -c)
            }
            Expr::Exp(a) => {
                let j = a.eval_jet(x, dim);
                let e = j.value().exp();
                j.chain(e, e, e)
            }
            Expr::Sq(a) => {
                let j = a.eval_jet(x, dim);
                let v = j.value();
                j.chain(v * v, 2.0 * v, 2.0)
            }
            Expr::Win {
                plateau,
                support,
                arg,
            } => {
                let j = arg.eval_jet(x, dim);
                let (w, w1, w2) = window(j.value(), *plateau, *support);
                j.chain(w, w1, w2)
            }
        }
    }

    /// First-order evaluation (value and gradient, no Hessian): the `C¹`
    /// mode used where only Lipschitz test functions are required.
    pub fn eval_value_grad(&self, x: &[f64], dim: usize) -> (f64, DVector<f64>) {
        match self {
            Expr::Const(c) => (*c, DVector::zeros(dim)),
            Expr::Var(i) => {
                let mut g = DVector::zeros(dim);
                g[*i] = 1.0;
                (x[*i], g)
            }
            Expr::Add(a, b) => {
                let (va, ga) = a.eval_value_grad(x, dim);
                let (vb, gb) = b.eval_value_grad(x, dim);
                (va + vb, ga + gb)
            }
            Expr::Sub(a, b) => {
                let (va, ga) = a.eval_value_grad(x, dim);
                let (vb, gb) = b.eval_value_grad(x, dim);
                (va - vb, ga - gb)
            }
            Expr::Mul(a, b) => {
                let (va, ga) = a.eval_value_grad(x, dim);
                let (vb, gb) = b.eval_value_grad(x, dim);
                (va * vb, ga * vb + gb * va)
            }
            Expr::Neg(a) => {
                let (v, g) = a.eval_value_grad(x, dim);
                (-v, -g)
            }
            Expr::Sin(a) => {
                let (v, g) = a.eval_value_grad(x, dim);
                let (s, c) = v.sin_cos();
                (s, g * c)
            }
            Expr::Cos(a) => {
                let (v, g) = a.eval_value_grad(x, dim);
                let (s, c) = v.sin_cos();
                (c, g * -s)
            }
            Expr::Exp(a) => {
                let (v, g) = a.eval_value_grad(x, dim);
                let e = v.exp();
                (e, g * e)
            }
            Expr::Sq(a) => {
                let (v, g) = a.eval_value_grad(x, dim);
                (v * v, g * (2.0 * v))
            }
            Expr::Win {
                plateau,
                support,
                arg,
            } => {
                let (v, g) = arg.eval_value_grad(x, dim);
                let (w, w1, _) = window(v, *plateau, *support);
                (w, g * w1)
            }
        }
    }

    /// Replaces `x_i` by `subs[i]`; used to form compositions like `u ∘ Φ`.
    pub fn substitute(&self, subs: &[Expr]) -> Expr {
        match self {
            Expr::Const(c) => Expr::Const(*c),
            Expr::Var(i) => subs[*i].clone(),
            Expr::Add(a, b) => Expr::Add(a.substitute(subs).into(), b.substitute(subs).into()),
            Expr::Sub(a, b) => Expr::Sub(a.substitute(subs).into(), b.substitute(subs).into()),
            Expr::Mul(a, b) => Expr::Mul(a.substitute(subs).into(), b.substitute(subs).into()),
            Expr::Neg(a) => Expr::Neg(a.substitute(subs).into()),
            Expr::Sin(a) => Expr::Sin(a.substitute(subs).into()),
            Expr::Cos(a) => Expr::Cos(a.substitute(subs).into()),
            Expr::Exp(a) => Expr::Exp(a.substitute(subs).into()),
            Expr::Sq(a) => Expr::Sq(a.substitute(subs).into()),
            Expr::Win {
                plateau,
                support,
                arg,
            } => Expr::Win {
                plateau: *plateau,
                support: *support,
                arg: arg.substitute(subs).into(),
            },
        }
    }

    /// Symbolic derivative in `x_var`, or `None` where the AST has no
    /// closed-form derivative node (the plateau window).
    pub fn diff(&self, var: usize) -> Option<Expr> {
        Some(match self {
            Expr::Const(_) => Expr::Const(0.0),
            Expr::Var(i) => Expr::Const(if *i == var { 1.0 } else { 0.0 }),
            Expr::Add(a, b) => Expr::Add(a.diff(var)?.into(), b.diff(var)?.into()),
            Expr::Sub(a, b) => Expr::Sub(a.diff(var)?.into(), b.diff(var)?.into()),
            Expr::Mul(a, b) => Expr::Add(
                Expr::Mul(a.diff(var)?.into(), b.clone()).into(),
                Expr::Mul(a.clone(), b.diff(var)?.into()).into(),
            ),
            Expr::Neg(a) => Expr::Neg(a.diff(var)?.into()),
            Expr::Sin(a) => Expr::Mul(Expr::Cos(a.clone()).into(), a.diff(var)?.into()),
            Expr::Cos(a) => {
                Expr::Neg(Expr::Mul(Expr::Sin(a.clone()).into(), a.diff(var)?.into()).into())
            }
            Expr::Exp(a) => Expr::Mul(Expr::Exp(a.clone()).into(), a.diff(var)?.into()),
            Expr::Sq(a) => Expr::Mul(
                Expr::Mul(Expr::Const(2.0).into(), (**a).clone().into()).into(),
                a.diff(var)?.into(),
            ),
            Expr::Win { .. } => return None,
        })
    }

    /// Largest variable index mentioned, if any.
    pub fn max_var(&self) -> Option<usize> {
        match self {
            Expr::Const(_) => None,
            Expr::Var(i) => Some(*i),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) => a.max_var().max(b.max_var()),
            Expr::Neg(a) | Expr::Sin(a) | Expr::Cos(a) | Expr::Exp(a) | Expr::Sq(a) => a.max_var(),
            Expr::Win { arg, .. } => arg.max_var(),
        }
    }

    pub fn parse(src: &str) -> Result<Expr> {
        Parser::new(src).parse()
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Var(i) => write!(f, "x{i}"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Sin(a) => write!(f, "sin({a})"),
            Expr::Cos(a) => write!(f, "cos({a})"),
            Expr::Exp(a) => write!(f, "exp({a})"),
            Expr::Sq(a) => write!(f, "sq({a})"),
            Expr::Win {
                plateau,
                support,
                arg,
            } => write!(f, "win({plateau}, {support}, {arg})"),
        }
    }
}

struct Parser<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str) -> Self {
        Self {
            src,
            bytes: src.as_bytes(),
            pos: 0,
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            src: self.src.to_string(),
            msg: format!("{} (at byte {})", msg.into(), self.pos),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.bytes.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(format!("expected `{}`", c as char)))
        }
    }

    fn parse(mut self) -> Result<Expr> {
        let e = self.sum()?;
        if self.peek().is_some() {
            return Err(self.err("trailing input"));
        }
        Ok(e)
    }

    fn sum(&mut self) -> Result<Expr> {
        let mut acc = self.term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    acc = Expr::Add(acc.into(), self.term()?.into());
                }
                Some(b'-') => {
                    self.pos += 1;
                    acc = Expr::Sub(acc.into(), self.term()?.into());
                }
                _ => return Ok(acc),
            }
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut acc = self.factor()?;
        while self.peek() == Some(b'*') {
            self.pos += 1;
            acc = Expr::Mul(acc.into(), self.factor()?.into());
        }
        Ok(acc)
    }

    fn factor(&mut self) -> Result<Expr> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            return Ok(Expr::Neg(self.factor()?.into()));
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Expr> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.sum()?;
                self.expect(b')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.ident(),
            _ => Err(self.err("expected expression")),
        }
    }

    fn number(&mut self) -> Result<Expr> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.bytes.len()
            && (self.bytes[self.pos].is_ascii_digit() || self.bytes[self.pos] == b'.')
        {
            self.pos += 1;
        }
        if self.pos < self.bytes.len() && (self.bytes[self.pos] | 0x20) == b'e' {
            let mut p = self.pos + 1;
            if p < self.bytes.len() && (self.bytes[p] == b'+' || self.bytes[p] == b'-') {
                p += 1;
            }
            if p < self.bytes.len() && self.bytes[p].is_ascii_digit() {
                self.pos = p;
                while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            }
        }
        let text = &self.src[start..self.pos];
        text.parse::<f64>()
            .map(Expr::Const)
            .map_err(|_| self.err(format!("bad numeric literal `{text}`")))
    }

    fn ident(&mut self) -> Result<Expr> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.bytes.len()
            && (self.bytes[self.pos].is_ascii_alphanumeric() || self.bytes[self.pos] == b'_')
        {
            self.pos += 1;
        }
        let name = &self.src[start..self.pos];
        if let Some(idx) = name.strip_prefix('x') {
            if let Ok(i) = idx.parse::<usize>() {
                if i >= 16 {
                    return Err(self.err("variable index out of range (x0..x15)"));
                }
                return Ok(Expr::Var(i));
            }
        }
        match name {
            "sin" | "cos" | "exp" | "sq" => {
                self.expect(b'(')?;
                let arg = Box::new(self.sum()?);
                self.expect(b')')?;
                Ok(match name {
                    "sin" => Expr::Sin(arg),
                    "cos" => Expr::Cos(arg),
                    "exp" => Expr::Exp(arg),
                    _ => Expr::Sq(arg),
                })
            }
            "win" => {
                self.expect(b'(')?;
                let plateau = self.const_arg()?;
                self.expect(b',')?;
                let support = self.const_arg()?;
                self.expect(b',')?;
                let arg = Box::new(self.sum()?);
                self.expect(b')')?;
                if !(plateau >= 0.0 && support > plateau) {
                    return Err(self.err("win(a, b, e) requires 0 <= a < b"));
                }
                Ok(Expr::Win {
                    plateau,
                    support,
                    arg,
                })
            }
            _ => Err(self.err(format!("unknown identifier `{name}`"))),
        }
    }

    fn const_arg(&mut self) -> Result<f64> {
        let negative = self.peek() == Some(b'-');
        if negative {
            self.pos += 1;
        }
        match self.number()? {
            Expr::Const(c) => Ok(if negative { -c } else { c }),
            _ => unreachable!(),
        }
    }
}

/// Central finite differences of a scalar evaluation; the independent check
/// that jet gradients and Hessians are derivatives of the value path.
pub fn finite_difference_jet<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Jet2 {
    let d = x.len();
    let mut xp = x.to_vec();
    let value = f(x);
    let mut gradient = DVector::zeros(d);
    let mut hessian = DMatrix::zeros(d, d);
    for i in 0..d {
        xp.copy_from_slice(x);
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        gradient[i] = (fp - fm) / (2.0 * h);
        hessian[(i, i)] = (fp - 2.0 * value + fm) / (h * h);
    }
    for i in 0..d {
        for j in (i + 1)..d {
            xp.copy_from_slice(x);
            xp[i] = x[i] + h;
            xp[j] = x[j] + h;
            let fpp = f(&xp);
            xp[j] = x[j] - h;
            let fpm = f(&xp);
            xp[i] = x[i] - h;
            let fmm = f(&xp);
            xp[j] = x[j] + h;
            let fmp = f(&xp);
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h * h);
            hessian[(i, j)] = v;
            hessian[(j, i)] = v;
        }
    }
    Jet2::new(value, gradient, hessian).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn parses_the_documented_example() {
        let e = Expr::parse("sin(x0)*x1 + sq(x0)").unwrap();
        assert_eq!(e.max_var(), Some(1));
        let x = [0.3, 2.0];
        assert_relative_eq!(e.eval_value(&x), 0.3f64.sin() * 2.0 + 0.09, epsilon = 1e-15);
    }

    #[test]
    fn parses_literals_negation_and_parens() {
        let e = Expr::parse("-(2.5e-1 + x0) * 4").unwrap();
        assert_relative_eq!(e.eval_value(&[0.75]), -4.0);
    }

    #[test]
    fn rejects_malformed_input() {
        for bad in [
            "",
            "x16",
            "sin x0",
            "2 +",
            "foo(x0)",
            "(x0",
            "win(1,0.5,x0)",
        ] {
            assert!(Expr::parse(bad).is_err(), "accepted {bad:?}");
        }
    }

    #[test]
    fn display_round_trips() {
        let e = Expr::parse("sin(x0)*x1 + sq(x0) - 0.5").unwrap();
        let back = Expr::parse(&e.to_string()).unwrap();
        let x = [0.42, -1.3];
        assert_eq!(e.eval_value(&x), back.eval_value(&x));
    }

    #[test]
    fn jets_match_finite_differences() {
        let exprs = [
            "sin(x0)*x1 + sq(x0)",
            "exp(x0 - sq(x1)) * cos(x1)",
            "win(0.5, 2, x0) * x0 * x1",
        ];
        let mut rng = crate::mc::stream_rng(5, "fd-check");
        for src in exprs {
            let e = Expr::parse(src).unwrap();
            for _ in 0..20 {
                let x = [
                    rng.random::<f64>() * 2.0 - 1.0,
                    rng.random::<f64>() * 2.0 - 1.0,
                ];
                let jet = e.eval_jet(&x, 2);
                let fd = finite_difference_jet(|p| e.eval_value(p), &x, 1e-5);
                assert_relative_eq!(jet.value(), fd.value(), epsilon = 1e-12);
                for i in 0..2 {
                    assert_relative_eq!(
                        jet.gradient()[i],
                        fd.gradient()[i],
                        epsilon = 1e-6,
                        max_relative = 1e-6
                    );
                    for j in 0..2 {
                        assert_relative_eq!(
                            jet.hessian()[(i, j)],
                            fd.hessian()[(i, j)],
                            epsilon = 1e-4,
                            max_relative = 1e-4
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn value_grad_agrees_with_jet() {
        let e = Expr::parse("win(1, 2, x0) * sin(x1)").unwrap();
        let x = [1.4, 0.6];
        let (v, g) = e.eval_value_grad(&x, 2);
        let jet = e.eval_jet(&x, 2);
        assert_eq!(v, jet.value());
        assert_eq!(&g, jet.gradient());
    }

    #[test]
    fn window_is_c2_at_the_seams() {
        // Value, first and second derivatives all continue across |u| = a
        // and |u| = b.
        let e = Expr::parse("win(0.5, 1.5, x0)").unwrap();
        for seam in [0.5f64, 1.5, -0.5, -1.5] {
            let lo = e.eval_jet(&[seam - 1e-7], 1);
            let hi = e.eval_jet(&[seam + 1e-7], 1);
            assert_relative_eq!(lo.value(), hi.value(), epsilon = 1e-6);
            assert_relative_eq!(lo.gradient()[0], hi.gradient()[0], epsilon = 1e-5);
            assert_relative_eq!(lo.hessian()[(0, 0)], hi.hessian()[(0, 0)], epsilon = 1e-4);
        }
    }

    #[test]
    fn symbolic_derivative_matches_jet_gradient() {
        let e = Expr::parse("sin(x0) * exp(x1) + sq(x0) - cos(x1) * x0").unwrap();
        let d0 = e.diff(0).unwrap();
        let d1 = e.diff(1).unwrap();
        let x = [0.37, -0.9];
        let jet = e.eval_jet(&x, 2);
        assert_relative_eq!(d0.eval_value(&x), jet.gradient()[0], epsilon = 1e-13);
        assert_relative_eq!(d1.eval_value(&x), jet.gradient()[1], epsilon = 1e-13);
        assert!(Expr::parse("win(1, 2, x0)").unwrap().diff(0).is_none());
    }

    #[test]
    fn substitution_composes() {
        let u = Expr::parse("sin(x0)").unwrap();
        let phi = Expr::parse("sq(x0)").unwrap();
        let composed = u.substitute(std::slice::from_ref(&phi));
        let x = [0.8];
        assert_relative_eq!(composed.eval_value(&x), (0.64f64).sin(), epsilon = 1e-15);
    }
}
