//! Dirichlet structures: diffusion/drift coefficient fields over a sampling
//! law, the four scheme operators they induce, square-field extraction from
//! a generator, and image structures under a smooth map.

use nalgebra::{DMatrix, DVector};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::jet2::{Expr, Jet2, TestFunction};
use crate::law::Law;
use crate::{Error, Result};

/// A scalar coefficient field over points of `R^d`.
#[derive(Clone, Debug)]
pub enum ScalarField {
    Const(f64),
    Expr(Expr),
    /// Piecewise-constant over bins of a one-dimensional output variable;
    /// lookups clamp to the nearest bin outside the covered range.
    Binned {
        edges: Vec<f64>,
        values: Vec<f64>,
    },
}

impl ScalarField {
    pub fn eval(&self, y: &[f64]) -> f64 {
        match self {
            ScalarField::Const(c) => *c,
            ScalarField::Expr(e) => e.eval_value(y),
            ScalarField::Binned { edges, values } => {
                let t = y[0];
                // edges.len() == values.len() + 1
                let k = match edges[1..edges.len() - 1]
                    .binary_search_by(|e| e.partial_cmp(&t).unwrap())
                {
                    Ok(i) => i + 1,
                    Err(i) => i,
                };
                values[k.min(values.len() - 1)]
            }
        }
    }

    pub fn zero() -> Self {
        ScalarField::Const(0.0)
    }
}

/// A vector-valued coefficient field.
#[derive(Clone, Debug)]
pub struct VectorField {
    components: Vec<ScalarField>,
}

impl VectorField {
    pub fn new(components: Vec<ScalarField>) -> Self {
        Self { components }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            components: (0..dim).map(|_| ScalarField::zero()).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn eval(&self, y: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.components.len(),
            self.components.iter().map(|c| c.eval(y)),
        )
    }

    pub fn components(&self) -> &[ScalarField] {
        &self.components
    }
}

/// A matrix-valued coefficient field (row-major entries).
#[derive(Clone, Debug)]
pub struct MatrixField {
    dim: usize,
    entries: Vec<ScalarField>,
}

impl MatrixField {
    pub fn new(dim: usize, entries: Vec<ScalarField>) -> Result<Self> {
        if entries.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                got: entries.len(),
            });
        }
        Ok(Self { dim, entries })
    }

    /// Constant multiple of the identity.
    pub fn scaled_identity(dim: usize, c: f64) -> Self {
        let entries = (0..dim * dim)
            .map(|k| {
                if k % (dim + 1) == 0 {
                    ScalarField::Const(c)
                } else {
                    ScalarField::zero()
                }
            })
            .collect();
        Self { dim, entries }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, y: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| {
            self.entries[i * self.dim + j].eval(y)
        })
    }

    pub fn entries(&self) -> &[ScalarField] {
        &self.entries
    }
}

/// Diffusion and drift data of an approximation over a sampling law.
///
/// The symmetric generator acts on a jet as
/// `A~[phi] = (1/2) sum_ij theta_ij phi''_ij + sum_j drift_j phi'_j` with
/// `drift_j = (1/2) sum_i rho_ij`; the theoretical operator replaces the
/// drift by `z = E[Z | Y]`. `rho` is optional: without it only the
/// theoretical operator is available.
#[derive(Clone, Debug)]
pub struct DirichletStructure {
    dim: usize,
    z: VectorField,
    theta: MatrixField,
    rho: Option<MatrixField>,
    measure: Law,
}

impl DirichletStructure {
    pub fn new(
        dim: usize,
        z: VectorField,
        theta: MatrixField,
        rho: Option<MatrixField>,
        measure: Law,
    ) -> Result<Self> {
        if z.dim() != dim || theta.dim() != dim || measure.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: z.dim().min(theta.dim()).min(measure.dim()),
            });
        }
        if let Some(r) = &rho {
            if r.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: r.dim(),
                });
            }
        }
        Ok(Self {
            dim,
            z,
            theta,
            rho,
            measure,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn measure(&self) -> &Law {
        &self.measure
    }

    pub fn theta(&self, y: &[f64]) -> DMatrix<f64> {
        self.theta.eval(y)
    }

    pub fn z(&self, y: &[f64]) -> DVector<f64> {
        self.z.eval(y)
    }

    pub fn has_rho(&self) -> bool {
        self.rho.is_some()
    }

    /// First-order coefficients of the symmetric generator:
    /// `drift_j = (1/2) sum_i rho_ij`.
    pub fn tilde_drift(&self, y: &[f64]) -> Option<DVector<f64>> {
        let rho = self.rho.as_ref()?.eval(y);
        Some(DVector::from_iterator(
            self.dim,
            (0..self.dim).map(|j| 0.5 * rho.column(j).sum()),
        ))
    }

    /// Square field on gradients: `grad_a^t theta grad_b`.
    pub fn gamma_bilinear(&self, grad_a: &DVector<f64>, grad_b: &DVector<f64>, y: &[f64]) -> f64 {
        (grad_a.transpose() * self.theta(y) * grad_b)[(0, 0)]
    }

    /// `Gamma[phi](y)` from the diffusion field.
    pub fn gamma(&self, phi: &TestFunction, y: &[f64]) -> Result<f64> {
        let jet = phi.eval(y)?;
        Ok(self.gamma_bilinear(jet.gradient(), jet.gradient(), y))
    }

    fn second_order_part(&self, jet: &Jet2, y: &[f64]) -> f64 {
        0.5 * (self.theta(y) * jet.hessian()).trace()
    }

    /// Theoretical operator on a jet: `z . grad + (1/2) tr(theta Hess)`.
    pub fn a_bar(&self, jet: &Jet2, y: &[f64]) -> f64 {
        self.z(y).dot(jet.gradient()) + self.second_order_part(jet, y)
    }

    /// Symmetric operator on a jet; requires `rho`.
    pub fn a_tilde(&self, jet: &Jet2, y: &[f64]) -> Result<f64> {
        let drift = self.tilde_drift(y).ok_or(Error::MissingRho)?;
        Ok(drift.dot(jet.gradient()) + self.second_order_part(jet, y))
    }

    /// Sampled validation of the structure invariants: the diffusion is PSD
    /// at sampled points.
    pub fn validate(&self, seed: u64, trials: usize) -> Result<()> {
        let mut rng = crate::mc::stream_rng(seed, "structure-validate");
        let mut y = vec![0.0; self.dim];
        for _ in 0..trials {
            self.measure.sample(&mut rng, &mut y);
            super::check_psd(&self.theta(&y))?;
        }
        Ok(())
    }
}

/// The four operator values at one point.
///
/// The practical and singular values are derived from the theoretical and
/// symmetric ones through the defining linear relations, so those relations
/// hold by construction.
#[derive(Clone, Copy, Debug)]
pub struct OperatorValues {
    pub a_bar: f64,
    pub a_tilde: Option<f64>,
    pub a_under: Option<f64>,
    pub a_slash: Option<f64>,
}

/// Evaluates the four scheme operators on `phi` at `y`.
///
/// Without `rho` coefficients only the theoretical operator is available
/// and the other three are `None`.
pub fn scheme_operators(
    structure: &DirichletStructure,
    phi: &TestFunction,
    y: &[f64],
) -> Result<OperatorValues> {
    let jet = phi.eval(y)?;
    let a_bar = structure.a_bar(&jet, y);
    match structure.a_tilde(&jet, y) {
        Ok(a_tilde) => Ok(OperatorValues {
            a_bar,
            a_tilde: Some(a_tilde),
            a_under: Some(2.0 * a_tilde - a_bar),
            a_slash: Some(a_bar - a_tilde),
        }),
        Err(Error::MissingRho) => Ok(OperatorValues {
            a_bar,
            a_tilde: None,
            a_under: None,
            a_slash: None,
        }),
        Err(e) => Err(e),
    }
}

/// Extracts the square field of a generator `A` at `y`:
/// `Gamma[phi](y) = A[phi^2](y) - 2 phi(y) A[phi](y)`.
///
/// `A` is any operator expressible on the jet of its argument at `y`.
pub fn square_field_from_generator<F>(a: F, phi: &TestFunction, y: &[f64]) -> Result<f64>
where
    F: Fn(&Jet2) -> f64,
{
    let jet = phi.eval(y)?;
    let jet_sq = jet.mul(&jet)?;
    Ok(a(&jet_sq) - 2.0 * jet.value() * a(&jet))
}

/// Options for the Monte Carlo realization of an image structure.
#[derive(Clone, Copy, Debug)]
pub struct ImageOptions {
    pub samples: usize,
    pub bins: usize,
    pub seed: u64,
}

impl Default for ImageOptions {
    fn default() -> Self {
        Self {
            samples: 100_000,
            bins: 64,
            seed: 0,
        }
    }
}

/// Image of a Dirichlet structure under a smooth map `Phi`.
///
/// Per-sample functional calculus gives `Gamma_in[Phi, Phi]` from the
/// Jacobian and `A~_in[Phi]` from the Jacobian and Hessian of the map; the
/// conditional expectation given `Phi(X) = y` is realized by equal-count
/// binning on the output value. The output drift and diffusion are the
/// bin averages, the output measure is the pushforward of the input one.
///
/// Only one-dimensional outputs are supported by the binned conditional
/// carrier. The output sets `z` equal to the symmetric drift (theoretical
/// and symmetric operators coincide downstream of the image).
pub fn image_structure(
    input: &DirichletStructure,
    map: &[TestFunction],
    opts: ImageOptions,
) -> Result<DirichletStructure> {
    if map.len() != 1 {
        return Err(Error::Invalid(format!(
            "binned image structures support one output dimension, got {}",
            map.len()
        )));
    }
    let phi = &map[0];
    if phi.dim() != input.dim() {
        return Err(Error::DimensionMismatch {
            expected: input.dim(),
            got: phi.dim(),
        });
    }
    if opts.bins == 0 || opts.samples < opts.bins {
        return Err(Error::Invalid(format!(
            "need at least one sample per bin ({} samples, {} bins)",
            opts.samples, opts.bins
        )));
    }

    let with_drift = input.has_rho();
    let mut rows: Vec<(f64, f64, f64)> = Vec::with_capacity(opts.samples); // (y, gamma, drift)
    let mut rng = crate::mc::stream_rng(opts.seed, "image-structure");
    let mut x = vec![0.0; input.dim()];
    for _ in 0..opts.samples {
        input.measure.sample(&mut rng, &mut x);
        let jet = phi.eval(&x)?;
        let y = jet.value();
        if !y.is_finite() {
            return Err(Error::NonFinite {
                context: "image map output".into(),
            });
        }
        let gamma = input.gamma_bilinear(jet.gradient(), jet.gradient(), &x);
        let drift = if with_drift {
            input.a_tilde(&jet, &x)?
        } else {
            0.0
        };
        rows.push((y, gamma, drift));
    }
    rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    let bins = opts.bins;
    let mut edges = Vec::with_capacity(bins + 1);
    let mut gamma_means = Vec::with_capacity(bins);
    let mut drift_means = Vec::with_capacity(bins);
    edges.push(rows[0].0);
    for k in 0..bins {
        let lo = k * rows.len() / bins;
        let hi = ((k + 1) * rows.len() / bins).max(lo + 1);
        let slice = &rows[lo..hi.min(rows.len())];
        if slice.is_empty() {
            return Err(Error::EmptyBin { y: edges[k] });
        }
        let m = slice.len() as f64;
        gamma_means.push(slice.iter().map(|r| r.1).sum::<f64>() / m);
        drift_means.push(slice.iter().map(|r| r.2).sum::<f64>() / m);
        edges.push(if k + 1 == bins {
            rows[rows.len() - 1].0
        } else {
            rows[(k + 1) * rows.len() / bins].0
        });
    }

    let theta = MatrixField::new(
        1,
        vec![ScalarField::Binned {
            edges: edges.clone(),
            values: gamma_means,
        }],
    )?;
    let (z, rho) = if with_drift {
        let drift_field = ScalarField::Binned {
            edges: edges.clone(),
            values: drift_means.clone(),
        };
        // d = 1: rho = 2 * drift reproduces the symmetric drift.
        let rho_field = ScalarField::Binned {
            edges,
            values: drift_means.iter().map(|v| 2.0 * v).collect(),
        };
        (
            VectorField::new(vec![drift_field]),
            Some(MatrixField::new(1, vec![rho_field])?),
        )
    } else {
        (VectorField::zeros(1), None)
    };
    let measure = Law::pushforward(input.measure.clone(), map.to_vec())?;
    DirichletStructure::new(1, z, theta, rho, measure)
}

// ---------------------------------------------------------------------------
// Serialization. The JSON schema is
// {"d": 1, "drift": ["<expr>"], "diffusion": [["<expr>"]], "measure": {...}}
// with optional "z" and "rho" entries for structures that distinguish the
// theoretical drift; "drift" holds the symmetric first-order coefficients.
// A bare string is accepted where a one-element list would be.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum FieldRepr {
    Num(f64),
    Text(String),
    Binned { binned: BinnedRepr },
}

#[derive(Serialize, Deserialize)]
struct BinnedRepr {
    edges: Vec<f64>,
    values: Vec<f64>,
}

impl FieldRepr {
    fn from_field(f: &ScalarField) -> FieldRepr {
        match f {
            ScalarField::Const(c) => FieldRepr::Num(*c),
            ScalarField::Expr(e) => FieldRepr::Text(e.to_string()),
            ScalarField::Binned { edges, values } => FieldRepr::Binned {
                binned: BinnedRepr {
                    edges: edges.clone(),
                    values: values.clone(),
                },
            },
        }
    }

    fn into_field(self) -> Result<ScalarField> {
        Ok(match self {
            FieldRepr::Num(c) => ScalarField::Const(c),
            FieldRepr::Text(s) => ScalarField::Expr(Expr::parse(&s)?),
            FieldRepr::Binned { binned } => {
                if binned.edges.len() != binned.values.len() + 1 || binned.values.is_empty() {
                    return Err(Error::Invalid("binned field shape".into()));
                }
                ScalarField::Binned {
                    edges: binned.edges,
                    values: binned.values,
                }
            }
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(FieldRepr),
    Many(Vec<FieldRepr>),
}

impl OneOrMany {
    fn into_vec(self) -> Vec<FieldRepr> {
        match self {
            OneOrMany::One(f) => vec![f],
            OneOrMany::Many(v) => v,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct StructureRepr {
    d: usize,
    drift: OneOrMany,
    diffusion: Vec<Vec<FieldRepr>>,
    measure: crate::law::LawSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    z: Option<Vec<FieldRepr>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rho: Option<Vec<Vec<FieldRepr>>>,
}

impl Serialize for DirichletStructure {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let d = self.dim;
        // Symmetric drift as expressions when rho is expression-backed;
        // binned drifts serialize as binned fields.
        let drift: Vec<FieldRepr> = match &self.rho {
            None => (0..d).map(|_| FieldRepr::Num(0.0)).collect(),
            Some(rho) => (0..d)
                .map(|j| {
                    let col: Vec<&ScalarField> =
                        (0..d).map(|i| &rho.entries()[i * d + j]).collect();
                    if col.iter().all(|f| matches!(f, ScalarField::Binned { .. })) && d == 1 {
                        if let ScalarField::Binned { edges, values } = col[0] {
                            return FieldRepr::Binned {
                                binned: BinnedRepr {
                                    edges: edges.clone(),
                                    values: values.iter().map(|v| 0.5 * v).collect(),
                                },
                            };
                        }
                        unreachable!()
                    }
                    // 0.5 * (rho_0j + rho_1j + ...)
                    let mut sum: Option<Expr> = None;
                    for f in col {
                        let term = match f {
                            ScalarField::Const(c) => Expr::Const(*c),
                            ScalarField::Expr(e) => e.clone(),
                            ScalarField::Binned { .. } => Expr::Const(f64::NAN),
                        };
                        sum = Some(match sum {
                            None => term,
                            Some(acc) => Expr::Add(acc.into(), term.into()),
                        });
                    }
                    FieldRepr::Text(
                        Expr::Mul(Expr::Const(0.5).into(), sum.unwrap().into()).to_string(),
                    )
                })
                .collect(),
        };
        let diffusion: Vec<Vec<FieldRepr>> = (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| FieldRepr::from_field(&self.theta.entries()[i * d + j]))
                    .collect()
            })
            .collect();
        let repr = StructureRepr {
            d,
            drift: OneOrMany::Many(drift),
            diffusion,
            measure: crate::law::LawSpec::of(&self.measure).map_err(serde::ser::Error::custom)?,
            z: Some(
                self.z
                    .components()
                    .iter()
                    .map(FieldRepr::from_field)
                    .collect(),
            ),
            rho: self.rho.as_ref().map(|rho| {
                (0..d)
                    .map(|i| {
                        (0..d)
                            .map(|j| FieldRepr::from_field(&rho.entries()[i * d + j]))
                            .collect()
                    })
                    .collect()
            }),
        };
        repr.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for DirichletStructure {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = StructureRepr::deserialize(deserializer)?;
        let d = repr.d;
        let to_fields = |rows: Vec<Vec<FieldRepr>>| -> Result<MatrixField> {
            let mut entries = Vec::with_capacity(d * d);
            for row in rows {
                for f in row {
                    entries.push(f.into_field()?);
                }
            }
            MatrixField::new(d, entries)
        };
        let theta = to_fields(repr.diffusion).map_err(D::Error::custom)?;
        let rho = match repr.rho {
            Some(rows) => Some(to_fields(rows).map_err(D::Error::custom)?),
            None => {
                // Reconstruct a diagonal rho from the symmetric drift:
                // rho_jj = 2 drift_j.
                let drift = repr.drift.into_vec();
                if drift.len() != d {
                    return Err(D::Error::custom("drift length mismatch"));
                }
                let mut entries = vec![ScalarField::zero(); d * d];
                let mut all_zero = true;
                for (j, f) in drift.into_iter().enumerate() {
                    let field = f.into_field().map_err(D::Error::custom)?;
                    let doubled = match field {
                        ScalarField::Const(c) => {
                            if c != 0.0 {
                                all_zero = false;
                            }
                            ScalarField::Const(2.0 * c)
                        }
                        ScalarField::Expr(e) => {
                            all_zero = false;
                            ScalarField::Expr(Expr::Mul(Expr::Const(2.0).into(), e.into()))
                        }
                        ScalarField::Binned { edges, values } => {
                            all_zero = false;
                            ScalarField::Binned {
                                edges,
                                values: values.iter().map(|v| 2.0 * v).collect(),
                            }
                        }
                    };
                    entries[j * d + j] = doubled;
                }
                // All-zero drift still defines rho = 0 (e.g. uniform laws).
                let _ = all_zero;
                Some(MatrixField::new(d, entries).map_err(D::Error::custom)?)
            }
        };
        let z = match repr.z {
            Some(fields) => {
                if fields.len() != d {
                    return Err(D::Error::custom("z length mismatch"));
                }
                VectorField::new(
                    fields
                        .into_iter()
                        .map(|f| f.into_field().map_err(D::Error::custom))
                        .collect::<std::result::Result<_, _>>()?,
                )
            }
            None => VectorField::zeros(d),
        };
        let measure = repr.measure.build(d).map_err(D::Error::custom)?;
        DirichletStructure::new(d, z, theta, rho, measure).map_err(D::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// OU-type structure: Y ~ N(0,1), Z = Y, T = 1, so theta = 1, z = y,
    /// rho = -y.
    fn ou_structure() -> DirichletStructure {
        DirichletStructure::new(
            1,
            VectorField::new(vec![ScalarField::Expr(Expr::parse("x0").unwrap())]),
            MatrixField::scaled_identity(1, 1.0),
            Some(
                MatrixField::new(1, vec![ScalarField::Expr(Expr::parse("-x0").unwrap())]).unwrap(),
            ),
            Law::std_normal(1),
        )
        .unwrap()
    }

    /// Graduation of a uniform law: theta = 1/12, no drift.
    fn uniform_graduation_structure() -> DirichletStructure {
        DirichletStructure::new(
            1,
            VectorField::zeros(1),
            MatrixField::scaled_identity(1, 1.0 / 12.0),
            Some(MatrixField::new(1, vec![ScalarField::zero()]).unwrap()),
            Law::uniform(1),
        )
        .unwrap()
    }

    #[test]
    fn ou_operators_on_cosine_at_zero() {
        let s = ou_structure();
        let phi = TestFunction::cos_coordinate(0, 1).unwrap();
        let ops = scheme_operators(&s, &phi, &[0.0]).unwrap();
        // a_bar = -y sin y - cos(y)/2 -> -1/2 at 0.
        assert_relative_eq!(ops.a_bar, -0.5, epsilon = 1e-15);
        // a_tilde = -cos(y)/2 + (y sin y)/2 -> -1/2 at 0.
        assert_relative_eq!(ops.a_tilde.unwrap(), -0.5, epsilon = 1e-15);
    }

    #[test]
    fn operator_relations_hold_at_machine_scale() {
        let s = ou_structure();
        let phi = TestFunction::parse("sin(x0) * cos(x0)", 1).unwrap();
        for y in [-1.7, -0.3, 0.0, 0.4, 2.2] {
            let ops = scheme_operators(&s, &phi, &[y]).unwrap();
            let (bar, tilde) = (ops.a_bar, ops.a_tilde.unwrap());
            let (under, slash) = (ops.a_under.unwrap(), ops.a_slash.unwrap());
            let scale = bar.abs() + under.abs() + tilde.abs() + 1.0;
            assert!((tilde - 0.5 * (bar + under)).abs() <= 1e-14 * scale);
            assert!((slash - 0.5 * (bar - under)).abs() <= 1e-14 * scale);
            // a_slash = (z - rho/2) phi' = (y + y/2) phi'(y)
            let jet = phi.eval(&[y]).unwrap();
            assert_relative_eq!(
                slash,
                1.5 * y * jet.gradient()[0],
                epsilon = 1e-12,
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn graduation_uniform_has_no_singular_part() {
        let s = uniform_graduation_structure();
        let phi = TestFunction::sin_coordinate(0, 1).unwrap();
        let ops = scheme_operators(&s, &phi, &[0.37]).unwrap();
        assert_eq!(ops.a_slash.unwrap(), 0.0);
        assert_eq!(ops.a_bar, ops.a_tilde.unwrap());
        assert_eq!(ops.a_bar, ops.a_under.unwrap());
    }

    #[test]
    fn missing_rho_leaves_only_the_theoretical_operator() {
        let s = DirichletStructure::new(
            1,
            VectorField::zeros(1),
            MatrixField::scaled_identity(1, 1.0),
            None,
            Law::std_normal(1),
        )
        .unwrap();
        let phi = TestFunction::cos_coordinate(0, 1).unwrap();
        let ops = scheme_operators(&s, &phi, &[0.0]).unwrap();
        assert_relative_eq!(ops.a_bar, -0.5);
        assert!(ops.a_tilde.is_none() && ops.a_under.is_none() && ops.a_slash.is_none());
    }

    #[test]
    fn square_field_of_half_laplacian_is_one() {
        // A = phi''/2 on phi(x) = x gives Gamma = 1 everywhere.
        let a = |jet: &Jet2| 0.5 * jet.hessian()[(0, 0)];
        let phi = TestFunction::coordinate(0, 1).unwrap();
        for y in [-2.0, 0.0, 1.3] {
            assert_relative_eq!(
                square_field_from_generator(a, &phi, &[y]).unwrap(),
                1.0,
                epsilon = 1e-14
            );
        }
    }

    #[test]
    fn square_field_of_graduation_generator_is_one_twelfth() {
        let a = |jet: &Jet2| jet.hessian()[(0, 0)] / 24.0;
        let phi = TestFunction::coordinate(0, 1).unwrap();
        assert_relative_eq!(
            square_field_from_generator(a, &phi, &[0.7]).unwrap(),
            1.0 / 12.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn first_order_drift_cancels_in_the_square_field() {
        // A = phi''/2 + rho phi'/2 on phi(x) = x^2 at y = 1 gives 4 y^2 = 4
        // independently of rho.
        let phi = TestFunction::parse("sq(x0)", 1).unwrap();
        for rho in [-3.0, 0.0, 5.5] {
            let a = move |jet: &Jet2| 0.5 * jet.hessian()[(0, 0)] + 0.5 * rho * jet.gradient()[0];
            assert_relative_eq!(
                square_field_from_generator(a, &phi, &[1.0]).unwrap(),
                4.0,
                epsilon = 1e-13
            );
        }
    }

    #[test]
    fn structure_gamma_equals_quadratic_form_in_the_gradient() {
        // Drift independence: Gamma extracted from the generator equals
        // (grad phi)^t theta (grad phi) pointwise.
        let s = ou_structure();
        let phi = TestFunction::parse("sin(x0) + sq(x0) * win(2, 4, x0)", 1).unwrap();
        for y in [-1.1, 0.0, 0.8, 1.9] {
            let jet = phi.eval(&[y]).unwrap();
            let via_generator =
                square_field_from_generator(|j| s.a_tilde(j, &[y]).unwrap(), &phi, &[y]).unwrap();
            let direct = s.gamma_bilinear(jet.gradient(), jet.gradient(), &[y]);
            assert_relative_eq!(via_generator, direct, epsilon = 1e-10, max_relative = 1e-10);
        }
    }

    #[test]
    fn structure_validation_checks_psd() {
        let bad = DirichletStructure::new(
            1,
            VectorField::zeros(1),
            MatrixField::scaled_identity(1, -1.0),
            None,
            Law::uniform(1),
        )
        .unwrap();
        assert!(bad.validate(1, 16).is_err());
        assert!(ou_structure().validate(1, 64).is_ok());
    }

    #[test]
    fn image_of_identity_preserves_constant_coefficients() {
        let s = uniform_graduation_structure();
        let ident = vec![TestFunction::parse("x0", 1).unwrap()];
        let out = image_structure(
            &s,
            &ident,
            ImageOptions {
                samples: 20_000,
                bins: 16,
                seed: 5,
            },
        )
        .unwrap();
        for y in [0.1, 0.5, 0.9] {
            assert_relative_eq!(out.theta(&[y])[(0, 0)], 1.0 / 12.0, epsilon = 1e-12);
            assert_relative_eq!(out.tilde_drift(&[y]).unwrap()[0], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn image_of_linear_map_scales_the_diffusion() {
        // Phi(x) = 2x: Gamma_out = 4 * (1/12) = 1/3 with a constant Jacobian.
        let s = uniform_graduation_structure();
        let map = vec![TestFunction::parse("2 * x0", 1).unwrap()];
        let out = image_structure(
            &s,
            &map,
            ImageOptions {
                samples: 20_000,
                bins: 16,
                seed: 6,
            },
        )
        .unwrap();
        for y in [0.3, 1.0, 1.7] {
            assert_relative_eq!(out.theta(&[y])[(0, 0)], 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn image_consistency_under_square_map() {
        // E_Y[Gamma_out[u](Y)] == E[Gamma_in[u o Phi](X)] within Monte Carlo
        // error, for Phi(x) = x^2 on the uniform graduation structure.
        let s = uniform_graduation_structure();
        let map = vec![TestFunction::parse("sq(x0)", 1).unwrap()];
        let out = image_structure(
            &s,
            &map,
            ImageOptions {
                samples: 200_000,
                bins: 64,
                seed: 7,
            },
        )
        .unwrap();
        let u = TestFunction::sin_coordinate(0, 1).unwrap();

        // Output side: E over the pushforward law of u'(y)^2 theta_out(y).
        let lhs = crate::mc::run(8, "img-lhs", 200_000, 1, |rng, outbuf| {
            let mut y = [0.0];
            out.measure().sample(rng, &mut y);
            let (_, grad) = u.eval_c1(&y).unwrap();
            outbuf[0] = grad[0] * grad[0] * out.theta(&y)[(0, 0)];
        });
        // Input side: E[(d/dx u(x^2))^2 / 12].
        let rhs = crate::mc::run(9, "img-rhs", 200_000, 1, |rng, outbuf| {
            let mut x = [0.0];
            s.measure().sample(rng, &mut x);
            let g = (x[0] * x[0]).cos() * 2.0 * x[0];
            outbuf[0] = g * g / 12.0;
        });
        let diff = (lhs.mean[0] - rhs.mean[0]).abs();
        let se = (lhs.stderr[0].powi(2) + rhs.stderr[0].powi(2)).sqrt();
        assert!(diff <= 3.0 * se, "diff {diff:.3e} > 3 se {se:.3e}");
    }

    #[test]
    fn image_rejects_multidimensional_outputs() {
        let s = uniform_graduation_structure();
        let map = vec![
            TestFunction::parse("x0", 1).unwrap(),
            TestFunction::parse("2 * x0", 1).unwrap(),
        ];
        assert!(image_structure(&s, &map, ImageOptions::default()).is_err());
    }

    #[test]
    fn structure_serialization_round_trips() {
        let s = ou_structure();
        let json = serde_json::to_string(&s).unwrap();
        let back: DirichletStructure = serde_json::from_str(&json).unwrap();
        let phi = TestFunction::parse("sin(x0)*cos(x0)", 1).unwrap();
        for y in [-1.0, 0.2, 1.5] {
            let a = scheme_operators(&s, &phi, &[y]).unwrap();
            let b = scheme_operators(&back, &phi, &[y]).unwrap();
            assert_relative_eq!(a.a_bar, b.a_bar, epsilon = 1e-14);
            assert_relative_eq!(a.a_tilde.unwrap(), b.a_tilde.unwrap(), epsilon = 1e-14);
        }
    }

    #[test]
    fn binned_field_lookup_clamps() {
        let f = ScalarField::Binned {
            edges: vec![0.0, 1.0, 2.0],
            values: vec![10.0, 20.0],
        };
        assert_eq!(f.eval(&[-5.0]), 10.0);
        assert_eq!(f.eval(&[0.5]), 10.0);
        assert_eq!(f.eval(&[1.5]), 20.0);
        assert_eq!(f.eval(&[9.0]), 20.0);
    }
}
