//! The propagation calculus.
//!
//! An [`ErrorQuantity`] carries a value together with the asymptotic bias
//! vector and square-field (variance) matrix of its approximation error at a
//! common scale. First-order propagation transports the bias alone;
//! second-order propagation transports bias and variance jointly, with the
//! half-trace Hessian correction coupling them.

mod structure;

pub use structure::{
    image_structure, scheme_operators, square_field_from_generator, DirichletStructure,
    ImageOptions, MatrixField, OperatorValues, ScalarField, VectorField,
};

use nalgebra::{DMatrix, DVector};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::jet2::TestFunction;
use crate::{Error, Result};

/// Relative eigenvalue floor for the PSD check on variance matrices.
pub const PSD_TOL: f64 = 1e-12;

/// A value with the bias vector and square-field matrix of its error at a
/// fixed scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorQuantity {
    value: DVector<f64>,
    bias: DVector<f64>,
    gamma: DMatrix<f64>,
    scale: f64,
}

impl ErrorQuantity {
    /// Validates dimensions, symmetry (stored canonically), positive
    /// semidefiniteness of `gamma` and positivity of `scale`.
    pub fn new(
        value: DVector<f64>,
        bias: DVector<f64>,
        gamma: DMatrix<f64>,
        scale: f64,
    ) -> Result<Self> {
        let d = value.len();
        if d == 0 {
            return Err(Error::Invalid(
                "error quantity dimension must be >= 1".into(),
            ));
        }
        if bias.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: bias.len(),
            });
        }
        if gamma.nrows() != d || gamma.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: gamma.nrows(),
            });
        }
        if !scale.is_finite() || scale <= 0.0 {
            return Err(Error::Invalid(format!(
                "scale must be positive, got {scale}"
            )));
        }
        let mut g = gamma;
        for i in 0..d {
            for j in (i + 1)..d {
                let s = 0.5 * (g[(i, j)] + g[(j, i)]);
                g[(i, j)] = s;
                g[(j, i)] = s;
            }
        }
        check_psd(&g)?;
        Ok(Self {
            value,
            bias,
            gamma: g,
            scale,
        })
    }

    /// Scalar (d = 1) convenience.
    pub fn scalar(value: f64, bias: f64, gamma: f64, scale: f64) -> Result<Self> {
        Self::new(
            DVector::from_vec(vec![value]),
            DVector::from_vec(vec![bias]),
            DMatrix::from_vec(1, 1, vec![gamma]),
            scale,
        )
    }

    pub fn dim(&self) -> usize {
        self.value.len()
    }

    pub fn value(&self) -> &DVector<f64> {
        &self.value
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.bias
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

/// Symmetric PSD check: eigenvalues at least `-PSD_TOL * trace`.
pub(crate) fn check_psd(m: &DMatrix<f64>) -> Result<()> {
    let trace = m.trace();
    let tol = PSD_TOL * trace.abs();
    let eigs = m.clone().symmetric_eigenvalues();
    let min_eig = eigs.iter().copied().fold(f64::INFINITY, f64::min);
    if min_eig < -tol {
        return Err(Error::NotPsd { min_eig, tol });
    }
    Ok(())
}

fn eval_jets(e: &ErrorQuantity, fs: &[TestFunction]) -> Result<Vec<crate::jet2::Jet2>> {
    if fs.is_empty() {
        return Err(Error::Invalid("need at least one output function".into()));
    }
    let point: Vec<f64> = e.value.iter().copied().collect();
    fs.iter()
        .map(|f| {
            if f.dim() != e.dim() {
                return Err(Error::DimensionMismatch {
                    expected: e.dim(),
                    got: f.dim(),
                });
            }
            f.eval(&point)
        })
        .collect()
}

/// First-order (weak) propagation: only the bias survives, transported by
/// the Jacobian; the output variance matrix is zero. Scale is preserved.
pub fn propagate_weak(e: &ErrorQuantity, fs: &[TestFunction]) -> Result<ErrorQuantity> {
    let jets = eval_jets(e, fs)?;
    let q = jets.len();
    let value = DVector::from_iterator(q, jets.iter().map(|j| j.value()));
    let bias = DVector::from_iterator(q, jets.iter().map(|j| j.gradient().dot(&e.bias)));
    ErrorQuantity::new(value, bias, DMatrix::zeros(q, q), e.scale)
}

/// Scalar-output weak propagation.
pub fn propagate_weak_scalar(e: &ErrorQuantity, f: &TestFunction) -> Result<ErrorQuantity> {
    propagate_weak(e, std::slice::from_ref(f))
}

/// Second-order (strong) propagation:
/// `bias'_i = ∇f_i · bias + (1/2) tr(Hess f_i · gamma)` and
/// `gamma'_ij = ∇f_i^t gamma ∇f_j` (cross terms included). Scale preserved.
pub fn propagate_strong(e: &ErrorQuantity, fs: &[TestFunction]) -> Result<ErrorQuantity> {
    let jets = eval_jets(e, fs)?;
    let q = jets.len();
    let value = DVector::from_iterator(q, jets.iter().map(|j| j.value()));
    let bias = DVector::from_iterator(
        q,
        jets.iter()
            .map(|j| j.gradient().dot(&e.bias) + 0.5 * (j.hessian() * &e.gamma).trace()),
    );
    let mut gamma = DMatrix::zeros(q, q);
    for i in 0..q {
        for j in i..q {
            let v = (jets[i].gradient().transpose() * &e.gamma * jets[j].gradient())[(0, 0)];
            gamma[(i, j)] = v;
            gamma[(j, i)] = v;
        }
    }
    ErrorQuantity::new(value, bias, gamma, e.scale)
}

/// Scalar-output strong propagation.
pub fn propagate_strong_scalar(e: &ErrorQuantity, f: &TestFunction) -> Result<ErrorQuantity> {
    propagate_strong(e, std::slice::from_ref(f))
}

#[derive(Serialize, Deserialize)]
struct ErrorQuantityRepr {
    d: usize,
    value: Vec<f64>,
    bias: Vec<f64>,
    gamma: Vec<Vec<f64>>,
    scale: f64,
}

impl Serialize for ErrorQuantity {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let d = self.dim();
        ErrorQuantityRepr {
            d,
            value: self.value.iter().copied().collect(),
            bias: self.bias.iter().copied().collect(),
            gamma: (0..d)
                .map(|i| (0..d).map(|j| self.gamma[(i, j)]).collect())
                .collect(),
            scale: self.scale,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ErrorQuantity {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = ErrorQuantityRepr::deserialize(deserializer)?;
        let d = repr.d;
        if repr.value.len() != d || repr.bias.len() != d || repr.gamma.len() != d {
            return Err(D::Error::custom("inconsistent dimensions"));
        }
        let mut gamma = DMatrix::zeros(d, d);
        for (i, row) in repr.gamma.iter().enumerate() {
            if row.len() != d {
                return Err(D::Error::custom("gamma is not square"));
            }
            for (j, v) in row.iter().enumerate() {
                gamma[(i, j)] = *v;
            }
        }
        ErrorQuantity::new(
            DVector::from_vec(repr.value),
            DVector::from_vec(repr.bias),
            gamma,
            repr.scale,
        )
        .map_err(D::Error::custom)
    }
}
