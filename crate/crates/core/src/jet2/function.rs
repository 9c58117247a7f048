//! Test functions: expression-backed scalar functions with declared
//! sup-norm bounds.
//!
//! Membership in the test algebra (bounded value, gradient and Hessian) is a
//! precondition of the bias-operator estimators, so bounds are part of the
//! function, declared at construction rather than inferred. A function built
//! from an unbounded expression (e.g. a bare coordinate) carries no bounds
//! and is rejected by estimators, but remains usable for propagation, which
//! only needs jets.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Expr, Jet2};
use crate::{Error, Result};

/// Declared sup-norm bounds: `|f|`, `max_i |∂_i f|`, `max_ij |∂²_ij f|`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub value: f64,
    pub gradient: f64,
    pub hessian: f64,
}

impl Bounds {
    pub fn new(value: f64, gradient: f64, hessian: f64) -> Self {
        Self {
            value,
            gradient,
            hessian,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.gradient.is_finite() && self.hessian.is_finite()
    }

    /// Bounds of a product from the Leibniz rule.
    fn product(&self, other: &Bounds) -> Bounds {
        Bounds {
            value: self.value * other.value,
            gradient: self.gradient * other.value + self.value * other.gradient,
            hessian: self.hessian * other.value
                + 2.0 * self.gradient * other.gradient
                + self.value * other.hessian,
        }
    }
}

/// A scalar function of `d` variables, evaluable to a [`Jet2`] at any point.
///
/// Deterministic: the same point always yields the identical jet. Immutable
/// after construction.
#[derive(Clone, Debug)]
pub struct TestFunction {
    dim: usize,
    expr: Expr,
    bounds: Option<Bounds>,
}

impl TestFunction {
    /// Wraps an expression with explicitly declared bounds (`None` marks the
    /// function as not certified for the test algebra).
    pub fn from_expr(expr: Expr, dim: usize, bounds: Option<Bounds>) -> Result<Self> {
        if dim == 0 || dim > 16 {
            return Err(Error::Invalid(format!(
                "test function dimension {dim} outside supported range 1..=16"
            )));
        }
        if let Some(i) = expr.max_var() {
            if i >= dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: i + 1,
                });
            }
        }
        if let Some(b) = &bounds {
            if !b.is_finite() {
                return Err(Error::Invalid("declared bounds must be finite".into()));
            }
        }
        Ok(Self { dim, expr, bounds })
    }

    /// Parses a grammar expression; bounds are estimated by sampling a
    /// reference box (see [`TestFunction::estimate_bounds`]).
    pub fn parse(src: &str, dim: usize) -> Result<Self> {
        let expr = Expr::parse(src)?;
        let mut f = Self::from_expr(expr, dim, None)?;
        f.bounds = f.estimate_bounds(8.0, 4096);
        Ok(f)
    }

    pub fn constant(c: f64, dim: usize) -> Self {
        Self {
            dim,
            expr: Expr::Const(c),
            bounds: Some(Bounds::new(c.abs(), 0.0, 0.0)),
        }
    }

    /// The bare coordinate `x_i`: unbounded, so not in the test algebra.
    pub fn coordinate(i: usize, dim: usize) -> Result<Self> {
        Self::from_expr(Expr::Var(i), dim, None)
    }

    /// `x_i` flattened to zero outside `|x_i| >= support`; identical to the
    /// coordinate on `|x_i| <= plateau`.
    pub fn windowed_coordinate(i: usize, dim: usize, plateau: f64, support: f64) -> Result<Self> {
        let expr = Expr::Mul(
            Expr::Var(i).into(),
            Expr::Win {
                plateau,
                support,
                arg: Expr::Var(i).into(),
            }
            .into(),
        );
        // |x w| <= b; (x w)' = w + x w'; |w'| <= 1.875/(b-a); |w''| <= 5.7735/(b-a)^2.
        let wd = 1.875 / (support - plateau);
        let wdd = 5.7735 / ((support - plateau) * (support - plateau));
        let bounds = Bounds::new(support, 1.0 + support * wd, 2.0 * wd + support * wdd);
        Self::from_expr(expr, dim, Some(bounds))
    }

    /// `x_i^2` windowed the same way.
    pub fn windowed_square(i: usize, dim: usize, plateau: f64, support: f64) -> Result<Self> {
        let expr = Expr::Mul(
            Expr::Sq(Expr::Var(i).into()).into(),
            Expr::Win {
                plateau,
                support,
                arg: Expr::Var(i).into(),
            }
            .into(),
        );
        let wd = 1.875 / (support - plateau);
        let wdd = 5.7735 / ((support - plateau) * (support - plateau));
        let b2 = support * support;
        let bounds = Bounds::new(
            b2,
            2.0 * support + b2 * wd,
            2.0 + 4.0 * support * wd + b2 * wdd,
        );
        Self::from_expr(expr, dim, Some(bounds))
    }

    pub fn sin_coordinate(i: usize, dim: usize) -> Result<Self> {
        Self::from_expr(
            Expr::Sin(Expr::Var(i).into()),
            dim,
            Some(Bounds::new(1.0, 1.0, 1.0)),
        )
    }

    pub fn cos_coordinate(i: usize, dim: usize) -> Result<Self> {
        Self::from_expr(
            Expr::Cos(Expr::Var(i).into()),
            dim,
            Some(Bounds::new(1.0, 1.0, 1.0)),
        )
    }

    /// Pointwise product; bounds combine by the Leibniz rule.
    pub fn product(&self, other: &TestFunction) -> Result<TestFunction> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        let bounds = match (&self.bounds, &other.bounds) {
            (Some(a), Some(b)) => Some(a.product(b)),
            _ => None,
        };
        Ok(TestFunction {
            dim: self.dim,
            expr: Expr::Mul(self.expr.clone().into(), other.expr.clone().into()),
            bounds,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    pub fn bounds(&self) -> Option<&Bounds> {
        self.bounds.as_ref()
    }

    pub fn is_bounded(&self) -> bool {
        self.bounds.is_some()
    }

    /// Value, gradient and Hessian at `x`.
    pub fn eval(&self, x: &[f64]) -> Result<Jet2> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(self.expr.eval_jet(x, self.dim))
    }

    /// Scalar value only; the Monte Carlo hot path. The dimension contract
    /// is the caller's (checked in debug builds).
    pub fn value(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        self.expr.eval_value(x)
    }

    /// First-order (`C¹`) evaluation: value and gradient, Hessian absent.
    pub fn eval_c1(&self, x: &[f64]) -> Result<(f64, nalgebra::DVector<f64>)> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(self.expr.eval_value_grad(x, self.dim))
    }

    /// Sampled sup norms over `[-radius, radius]^d`, inflated by 1.5; `None`
    /// when a non-finite or clearly diverging evaluation shows up.
    pub fn estimate_bounds(&self, radius: f64, trials: usize) -> Option<Bounds> {
        let mut rng = crate::mc::stream_rng(0x0b0d, "bounds-estimate");
        let mut b = Bounds::new(0.0, 0.0, 0.0);
        let mut x = vec![0.0; self.dim];
        for _ in 0..trials {
            for xi in x.iter_mut() {
                *xi = (rng.random::<f64>() * 2.0 - 1.0) * radius;
            }
            let jet = self.expr.eval_jet(&x, self.dim);
            if !jet.value().is_finite() {
                return None;
            }
            b.value = b.value.max(jet.value().abs());
            for g in jet.gradient().iter() {
                b.gradient = b.gradient.max(g.abs());
            }
            for h in jet.hessian().iter() {
                b.hessian = b.hessian.max(h.abs());
            }
        }
        b.value *= 1.5;
        b.gradient *= 1.5;
        b.hessian *= 1.5;
        b.is_finite().then_some(b)
    }

    /// Spot check that the declared bounds dominate sampled evaluations.
    pub fn check_bounds(&self, radius: f64, trials: usize, seed: u64) -> Result<()> {
        let Some(bounds) = &self.bounds else {
            return Err(Error::Unbounded);
        };
        let mut rng = crate::mc::stream_rng(seed, "bounds-check");
        let mut x = vec![0.0; self.dim];
        for _ in 0..trials {
            for xi in x.iter_mut() {
                *xi = (rng.random::<f64>() * 2.0 - 1.0) * radius;
            }
            let jet = self.expr.eval_jet(&x, self.dim);
            let ok = jet.value().abs() <= bounds.value
                && jet.gradient().iter().all(|g| g.abs() <= bounds.gradient)
                && jet.hessian().iter().all(|h| h.abs() <= bounds.hessian);
            if !ok {
                return Err(Error::Invalid(format!(
                    "declared bounds violated by `{}` at {x:?}",
                    self.expr
                )));
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for TestFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.expr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn eval_matches_hand_jets() {
        // f(x, y) = x y at (1, 2) -> (2, [2, 1], [[0, 1], [1, 0]])
        let f = TestFunction::parse("x0 * x1", 2).unwrap();
        let jet = f.eval(&[1.0, 2.0]).unwrap();
        assert_eq!(jet.value(), 2.0);
        assert_eq!(jet.gradient().as_slice(), &[2.0, 1.0]);
        assert_eq!(jet.hessian()[(0, 0)], 0.0);
        assert_eq!(jet.hessian()[(0, 1)], 1.0);
        assert_eq!(jet.hessian()[(1, 0)], 1.0);

        // f(x) = sin x at 0 -> (0, [1], [[0]])
        let s = TestFunction::sin_coordinate(0, 1).unwrap();
        let jet = s.eval(&[0.0]).unwrap();
        assert_eq!(jet.value(), 0.0);
        assert_eq!(jet.gradient()[0], 1.0);
        assert_eq!(jet.hessian()[(0, 0)], 0.0);
    }

    #[test]
    fn eval_rejects_wrong_dimension() {
        let f = TestFunction::parse("sq(x0)", 1).unwrap();
        assert!(matches!(
            f.eval(&[1.0, 2.0]),
            Err(Error::DimensionMismatch {
                expected: 1,
                got: 2
            })
        ));
    }

    #[test]
    fn variable_outside_dimension_is_rejected() {
        assert!(TestFunction::parse("x3", 2).is_err());
    }

    #[test]
    fn battery_bounds_dominate_samples() {
        for f in [
            TestFunction::windowed_coordinate(0, 2, 1.0, 2.0).unwrap(),
            TestFunction::windowed_square(1, 2, 1.5, 3.0).unwrap(),
            TestFunction::sin_coordinate(0, 2).unwrap(),
            TestFunction::cos_coordinate(1, 2).unwrap(),
        ] {
            f.check_bounds(5.0, 2000, 9).unwrap();
        }
    }

    #[test]
    fn product_bounds_dominate_samples() {
        let a = TestFunction::sin_coordinate(0, 1).unwrap();
        let b = TestFunction::windowed_coordinate(0, 1, 1.0, 2.0).unwrap();
        let p = a.product(&b).unwrap();
        p.check_bounds(4.0, 2000, 10).unwrap();
        assert_relative_eq!(p.value(&[0.5]), 0.5f64.sin() * 0.5, epsilon = 1e-15);
    }

    #[test]
    fn bare_coordinate_is_not_certified() {
        let f = TestFunction::coordinate(0, 1).unwrap();
        assert!(!f.is_bounded());
    }

    #[test]
    fn windowed_coordinate_is_exact_on_plateau() {
        let f = TestFunction::windowed_coordinate(0, 1, 2.0, 4.0).unwrap();
        for x in [-2.0, -0.7, 0.0, 1.3, 2.0] {
            assert_eq!(f.value(&[x]), x);
        }
        assert_eq!(f.value(&[5.0]), 0.0);
    }
}
