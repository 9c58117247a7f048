//! Second-order jets and the test-function algebra.
//!
//! A [`Jet2`] is the truncated Taylor data `(value, gradient, Hessian)` of a
//! smooth function at a point; every operator formula in this crate needs at
//! most two derivatives, so jets are computed by forward truncated-Taylor
//! arithmetic over a fixed primitive library instead of a symbolic engine.
//! Hessians are stored dense and symmetric; the supported regime is small
//! dimension (`d <= 16`).

mod expr;
mod function;

pub use expr::{finite_difference_jet, Expr};
pub use function::{Bounds, TestFunction};

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Value, gradient and symmetric Hessian of a scalar function at one point.
///
/// Immutable after construction; safe to share across workers.
#[derive(Clone, Debug, PartialEq)]
pub struct Jet2 {
    value: f64,
    gradient: DVector<f64>,
    hessian: DMatrix<f64>,
}

impl Jet2 {
    /// Builds a jet, symmetrizing the Hessian so that `H[i][j] == H[j][i]`
    /// holds exactly in storage.
    pub fn new(value: f64, gradient: DVector<f64>, hessian: DMatrix<f64>) -> Result<Self> {
        let d = gradient.len();
        if d == 0 {
            return Err(Error::Invalid("jet dimension must be >= 1".into()));
        }
        if hessian.nrows() != d || hessian.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: hessian.nrows(),
            });
        }
        let mut h = hessian;
        for i in 0..d {
            for j in (i + 1)..d {
                let s = 0.5 * (h[(i, j)] + h[(j, i)]);
                h[(i, j)] = s;
                h[(j, i)] = s;
            }
        }
        Ok(Self {
            value,
            gradient,
            hessian: h,
        })
    }

    /// Jet of the constant `c` in dimension `d`.
    pub fn constant(c: f64, d: usize) -> Self {
        Self {
            value: c,
            gradient: DVector::zeros(d),
            hessian: DMatrix::zeros(d, d),
        }
    }

    /// Jet of the coordinate `x_i` at value `x`, in dimension `d`.
    pub fn variable(x: f64, i: usize, d: usize) -> Self {
        let mut g = DVector::zeros(d);
        g[i] = 1.0;
        Self {
            value: x,
            gradient: g,
            hessian: DMatrix::zeros(d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.gradient.len()
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn gradient(&self) -> &DVector<f64> {
        &self.gradient
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    fn check_dim(&self, other: &Jet2) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(())
    }

    /// Sum of two jets.
    pub fn add(&self, other: &Jet2) -> Result<Jet2> {
        self.check_dim(other)?;
        Ok(Jet2 {
            value: self.value + other.value,
            gradient: &self.gradient + &other.gradient,
            hessian: &self.hessian + &other.hessian,
        })
    }

    /// Difference of two jets.
    pub fn sub(&self, other: &Jet2) -> Result<Jet2> {
        self.check_dim(other)?;
        Ok(Jet2 {
            value: self.value - other.value,
            gradient: &self.gradient - &other.gradient,
            hessian: &self.hessian - &other.hessian,
        })
    }

    /// Product of two jets by the second-order Leibniz rule:
    /// `(ab)'' = a''b + a'⊗b' + b'⊗a' + ab''`.
    pub fn mul(&self, other: &Jet2) -> Result<Jet2> {
        self.check_dim(other)?;
        // Grouped so the result is bitwise symmetric in the two arguments.
        let cross = &self.gradient * other.gradient.transpose();
        let hessian = (&self.hessian * other.value + &other.hessian * self.value)
            + (&cross + cross.transpose());
        Ok(Jet2 {
            value: self.value * other.value,
            gradient: &self.gradient * other.value + &other.gradient * self.value,
            hessian,
        })
    }

    pub fn neg(&self) -> Jet2 {
        Jet2 {
            value: -self.value,
            gradient: -&self.gradient,
            hessian: -&self.hessian,
        }
    }

    pub fn scale(&self, c: f64) -> Jet2 {
        Jet2 {
            value: c * self.value,
            gradient: &self.gradient * c,
            hessian: &self.hessian * c,
        }
    }

    /// Post-composition with a scalar map given by its value and first two
    /// derivatives at `self.value`.
    pub fn chain(&self, value: f64, d1: f64, d2: f64) -> Jet2 {
        let outer = &self.gradient * self.gradient.transpose();
        Jet2 {
            value,
            gradient: &self.gradient * d1,
            hessian: &self.hessian * d1 + outer * d2,
        }
    }
}

/// Checked sum; see [`Jet2::add`].
pub fn jet_add(a: &Jet2, b: &Jet2) -> Result<Jet2> {
    a.add(b)
}

/// Checked product; see [`Jet2::mul`].
pub fn jet_mul(a: &Jet2, b: &Jet2) -> Result<Jet2> {
    a.mul(b)
}

/// Second-order chain rule: the jet of `F(f_1, ..., f_p)` from the jet of
/// `F` at the inner values and the jets of the `f_k` at a common point.
///
/// With `J` the stacked inner gradients and `H_k` the inner Hessians,
/// `grad = J^t ∇F` and `hess = J^t (∇²F) J + Σ_k (∂_k F) H_k`.
pub fn compose(outer: &TestFunction, inner: &[Jet2]) -> Result<Jet2> {
    let p = outer.dim();
    if inner.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: inner.len(),
        });
    }
    let d = inner[0].dim();
    for jet in inner {
        if jet.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: jet.dim(),
            });
        }
    }
    let values: Vec<f64> = inner.iter().map(Jet2::value).collect();
    let f = outer.eval(&values)?;

    let mut gradient = DVector::zeros(d);
    let mut hessian = DMatrix::zeros(d, d);
    for (jet, weight) in inner.iter().zip(f.gradient().iter()) {
        gradient += jet.gradient() * *weight;
        hessian += jet.hessian() * *weight;
    }
    for k in 0..p {
        for l in 0..p {
            let w = f.hessian()[(k, l)];
            if w != 0.0 {
                hessian += inner[k].gradient() * inner[l].gradient().transpose() * w;
            }
        }
    }
    Jet2::new(f.value(), gradient, hessian)
}
