//! Empirical bias-operator estimation.
//!
//! For a scheme `(Y, Y_n, alpha_n)` and test functions `phi, chi`, the four
//! operators are estimated from the rescaled pairings
//!
//! - theoretical: `alpha_n E[(phi(Y_n) - phi(Y)) chi(Y)]`
//! - practical:   `alpha_n E[(phi(Y) - phi(Y_n)) chi(Y_n)]`
//! - symmetric:   `-1/2 alpha_n E[(phi(Y_n) - phi(Y)) (chi(Y_n) - chi(Y))]`
//! - singular:    `+1/2 alpha_n E[(phi(Y_n) - phi(Y)) (chi(Y_n) + chi(Y))]`
//!
//! each converging to `E_Y[A[phi] chi]` for its operator. Under common
//! random numbers the four per-sample integrands are linearly dependent, so
//! the symmetric and singular estimates are computed as the exact half-sum
//! and half-difference of the other two; their standard errors still come
//! from their own per-sample streams. Independent-stream mode estimates
//! each pairing on its own substream from its defining integrand.

use crate::jet2::TestFunction;
use crate::schemes::{ApproximationScheme, PairBuffer};
use crate::stats::rate_fit;
use crate::{Error, Result};

/// Which of the four bias operators an estimate targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BiasKind {
    Theoretical,
    Practical,
    Symmetric,
    Singular,
}

impl BiasKind {
    pub const ALL: [BiasKind; 4] = [
        BiasKind::Theoretical,
        BiasKind::Practical,
        BiasKind::Symmetric,
        BiasKind::Singular,
    ];

    pub fn label(self) -> &'static str {
        match self {
            BiasKind::Theoretical => "theoretical",
            BiasKind::Practical => "practical",
            BiasKind::Symmetric => "symmetric",
            BiasKind::Singular => "singular",
        }
    }
}

/// How the four kinds share randomness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Pairing {
    /// One sample stream for all kinds; the operator relations hold exactly.
    #[default]
    CommonRandomNumbers,
    /// A fresh substream per kind; the relations hold statistically.
    IndependentStreams,
}

/// Sampling budget and stream naming for one estimation call.
#[derive(Clone, Debug)]
pub struct EstimatorConfig {
    pub samples: usize,
    pub seed: u64,
    /// Substream name; calls that must not share randomness use different
    /// names.
    pub stream: String,
    pub pairing: Pairing,
}

impl EstimatorConfig {
    pub fn new(samples: usize, seed: u64, stream: impl Into<String>) -> Self {
        Self {
            samples,
            seed,
            stream: stream.into(),
            pairing: Pairing::CommonRandomNumbers,
        }
    }

    pub fn independent(mut self) -> Self {
        self.pairing = Pairing::IndependentStreams;
        self
    }

    fn sub(&self, suffix: &str) -> String {
        format!("{}/{suffix}", self.stream)
    }
}

/// One empirical operator value `E_Y[A[phi] chi]` with its Monte Carlo
/// standard error.
#[derive(Clone, Debug)]
pub struct BiasEstimate {
    pub kind: BiasKind,
    pub phi: String,
    pub chi: String,
    pub level: u32,
    pub value: f64,
    pub stderr: f64,
    pub samples: u64,
}

/// The four estimates for one `(phi, chi, n)` triple under one budget.
#[derive(Clone, Debug)]
pub struct FourEstimates {
    pub theoretical: BiasEstimate,
    pub practical: BiasEstimate,
    pub symmetric: BiasEstimate,
    pub singular: BiasEstimate,
    pub pairing: Pairing,
}

impl FourEstimates {
    pub fn get(&self, kind: BiasKind) -> &BiasEstimate {
        match kind {
            BiasKind::Theoretical => &self.theoretical,
            BiasKind::Practical => &self.practical,
            BiasKind::Symmetric => &self.symmetric,
            BiasKind::Singular => &self.singular,
        }
    }
}

fn require_in_algebra(f: &TestFunction, scheme_dim: usize) -> Result<()> {
    if f.dim() != scheme_dim {
        return Err(Error::DimensionMismatch {
            expected: scheme_dim,
            got: f.dim(),
        });
    }
    if !f.is_bounded() {
        return Err(Error::Unbounded);
    }
    Ok(())
}

fn check_budget(samples: usize) -> Result<()> {
    if samples < 1000 {
        return Err(Error::Invalid(format!(
            "sample budget must be at least 1000, got {samples}"
        )));
    }
    Ok(())
}

/// Mirror-averaged evaluation of a pathwise integrand `g(exact, approx)`:
/// the plain value when the scheme offers no mirror, otherwise the exactly
/// unbiased reweighted pair average.
#[inline]
fn paired<G: Fn(&[f64], &[f64]) -> f64>(buf: &PairBuffer, g: G) -> f64 {
    let base = g(&buf.exact, &buf.approx);
    match buf.mirror_weight {
        None => base,
        Some(w) => 0.5 * (base + w * g(&buf.mirror_exact, &buf.mirror_approx)),
    }
}

fn finite_or_err(value: f64, context: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite {
            context: context.into(),
        })
    }
}

/// Estimates one operator pairing from its defining integrand.
pub fn estimate_bias(
    scheme: &dyn ApproximationScheme,
    kind: BiasKind,
    phi: &TestFunction,
    chi: &TestFunction,
    n: u32,
    cfg: &EstimatorConfig,
) -> Result<BiasEstimate> {
    require_in_algebra(phi, scheme.dim())?;
    require_in_algebra(chi, scheme.dim())?;
    check_budget(cfg.samples)?;
    scheme.check_level(n)?;
    let alpha = scheme.alpha(n);
    let dim = scheme.dim();
    let stats = crate::mc::run_with(
        cfg.seed,
        &cfg.stream,
        cfg.samples,
        1,
        || PairBuffer::new(dim),
        |buf, rng, out| {
            scheme.sample_pair(n, rng, buf);
            out[0] = paired(buf, |exact, approx| {
                let dphi = phi.value(approx) - phi.value(exact);
                match kind {
                    BiasKind::Theoretical => dphi * chi.value(exact),
                    BiasKind::Practical => -dphi * chi.value(approx),
                    BiasKind::Symmetric => -0.5 * dphi * (chi.value(approx) - chi.value(exact)),
                    BiasKind::Singular => 0.5 * dphi * (chi.value(approx) + chi.value(exact)),
                }
            });
        },
    );
    Ok(BiasEstimate {
        kind,
        phi: phi.to_string(),
        chi: chi.to_string(),
        level: n,
        value: finite_or_err(alpha * stats.mean[0], "bias estimate")?,
        stderr: alpha * stats.stderr[0],
        samples: stats.samples,
    })
}

/// Estimates all four kinds for one `(phi, chi, n)`.
pub fn estimate_all(
    scheme: &dyn ApproximationScheme,
    phi: &TestFunction,
    chi: &TestFunction,
    n: u32,
    cfg: &EstimatorConfig,
) -> Result<FourEstimates> {
    match cfg.pairing {
        Pairing::IndependentStreams => {
            let one = |kind: BiasKind, stream: &str| {
                let sub = EstimatorConfig {
                    stream: cfg.sub(stream),
                    ..cfg.clone()
                };
                estimate_bias(scheme, kind, phi, chi, n, &sub)
            };
            Ok(FourEstimates {
                theoretical: one(BiasKind::Theoretical, "h1")?,
                practical: one(BiasKind::Practical, "h2")?,
                symmetric: one(BiasKind::Symmetric, "h3")?,
                singular: one(BiasKind::Singular, "h4")?,
                pairing: cfg.pairing,
            })
        }
        Pairing::CommonRandomNumbers => {
            require_in_algebra(phi, scheme.dim())?;
            require_in_algebra(chi, scheme.dim())?;
            check_budget(cfg.samples)?;
            scheme.check_level(n)?;
            let alpha = scheme.alpha(n);
            let dim = scheme.dim();
            let stats = crate::mc::run_with(
                cfg.seed,
                &cfg.stream,
                cfg.samples,
                4,
                || PairBuffer::new(dim),
                |buf, rng, out| {
                    scheme.sample_pair(n, rng, buf);
                    let u = paired(buf, |exact, approx| {
                        (phi.value(approx) - phi.value(exact)) * chi.value(exact)
                    });
                    let w = paired(buf, |exact, approx| {
                        (phi.value(approx) - phi.value(exact)) * chi.value(approx)
                    });
                    out[0] = u;
                    out[1] = -w;
                    out[2] = 0.5 * (u - w);
                    out[3] = 0.5 * (u + w);
                },
            );
            let theoretical = alpha * stats.mean[0];
            let practical = alpha * stats.mean[1];
            finite_or_err(theoretical, "bias estimate")?;
            finite_or_err(practical, "bias estimate")?;
            let make = |kind: BiasKind, value: f64, idx: usize| BiasEstimate {
                kind,
                phi: phi.to_string(),
                chi: chi.to_string(),
                level: n,
                value,
                stderr: alpha * stats.stderr[idx],
                samples: stats.samples,
            };
            Ok(FourEstimates {
                theoretical: make(BiasKind::Theoretical, theoretical, 0),
                practical: make(BiasKind::Practical, practical, 1),
                // Pathwise the symmetric and singular integrands are exactly
                // the half-sum and half-difference of the other two; writing
                // the estimates that way keeps the operator relations exact.
                symmetric: make(BiasKind::Symmetric, 0.5 * (theoretical + practical), 2),
                singular: make(BiasKind::Singular, 0.5 * (theoretical - practical), 3),
                pairing: cfg.pairing,
            })
        }
    }
}

/// Residuals of the two linear operator relations.
#[derive(Clone, Copy, Debug)]
pub struct RelationResiduals {
    /// `symmetric - (theoretical + practical)/2`
    pub symmetric_residual: f64,
    pub symmetric_stderr: f64,
    /// `singular - (theoretical - practical)/2`
    pub singular_residual: f64,
    pub singular_stderr: f64,
}

/// Checks the linear relations among the four estimates. Exactly zero under
/// common random numbers; within noise for independent streams, with a
/// combined standard error reported.
pub fn check_relations(estimates: &FourEstimates) -> RelationResiduals {
    let (t, p) = (&estimates.theoretical, &estimates.practical);
    let combined = |own: &BiasEstimate| {
        (own.stderr.powi(2) + 0.25 * t.stderr.powi(2) + 0.25 * p.stderr.powi(2)).sqrt()
    };
    RelationResiduals {
        symmetric_residual: estimates.symmetric.value - 0.5 * (t.value + p.value),
        symmetric_stderr: combined(&estimates.symmetric),
        singular_residual: estimates.singular.value - 0.5 * (t.value - p.value),
        singular_stderr: combined(&estimates.singular),
    }
}

/// One level of the locality diagnostic.
#[derive(Clone, Copy, Debug)]
pub struct LocalityPoint {
    pub level: u32,
    pub value: f64,
    pub stderr: f64,
}

/// Fourth-moment locality diagnostic across levels.
#[derive(Clone, Debug)]
pub struct LocalityReport {
    pub points: Vec<LocalityPoint>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Slope at most -1 and values decreasing.
    pub accepted: bool,
}

/// Estimates `alpha_n E[(phi(Y_n) - phi(Y))^4]` on each level and fits the
/// log-log decay rate. A local form needs this to vanish, so acceptance is
/// a negative enough slope with decreasing values.
pub fn locality_test(
    scheme: &dyn ApproximationScheme,
    phi: &TestFunction,
    levels: &[u32],
    cfg: &EstimatorConfig,
) -> Result<LocalityReport> {
    if levels.len() < 3 {
        return Err(Error::Invalid(format!(
            "locality test needs at least 3 levels, got {}",
            levels.len()
        )));
    }
    if levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invalid("levels must be strictly increasing".into()));
    }
    require_in_algebra(phi, scheme.dim())?;
    check_budget(cfg.samples)?;
    let dim = scheme.dim();
    let mut points = Vec::with_capacity(levels.len());
    for &n in levels {
        scheme.check_level(n)?;
        let alpha = scheme.alpha(n);
        let stats = crate::mc::run_with(
            cfg.seed,
            &cfg.sub(&format!("n{n}")),
            cfg.samples,
            1,
            || PairBuffer::new(dim),
            |buf, rng, out| {
                scheme.sample_pair(n, rng, buf);
                out[0] = paired(buf, |exact, approx| {
                    let d = phi.value(approx) - phi.value(exact);
                    let d2 = d * d;
                    d2 * d2
                });
            },
        );
        points.push(LocalityPoint {
            level: n,
            value: finite_or_err(alpha * stats.mean[0], "locality moment")?,
            stderr: alpha * stats.stderr[0],
        });
    }
    if points.iter().all(|p| p.value == 0.0) {
        // Identically vanishing moments (constant test functions): trivially
        // local, no rate to fit.
        return Ok(LocalityReport {
            points,
            slope: f64::NEG_INFINITY,
            intercept: f64::NEG_INFINITY,
            r_squared: 1.0,
            accepted: true,
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.level as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.value).collect();
    let fit = rate_fit(&xs, &ys)?;
    let decreasing = points.windows(2).all(|w| w[1].value < w[0].value);
    Ok(LocalityReport {
        points,
        slope: fit.slope,
        intercept: fit.intercept,
        r_squared: fit.r_squared,
        accepted: fit.slope <= -1.0 && decreasing,
    })
}

/// Weak-form Leibniz residual of one operator.
#[derive(Clone, Copy, Debug)]
pub struct FirstOrderResidual {
    pub residual: f64,
    pub stderr: f64,
}

/// Tests whether the `kind` operator is first order by estimating
/// `E_Y[(A[phi chi] - A[phi] chi - phi A[chi]) psi]` from the defining
/// pairings under common random numbers: the three weak values are
/// `A`-estimates for `(phi chi, psi)`, `(phi, chi psi)` and `(chi, phi psi)`
/// and the residual is their per-sample difference.
pub fn first_order_test(
    scheme: &dyn ApproximationScheme,
    kind: BiasKind,
    phi: &TestFunction,
    chi: &TestFunction,
    psi: &TestFunction,
    n: u32,
    cfg: &EstimatorConfig,
) -> Result<FirstOrderResidual> {
    let phi_chi = phi.product(chi)?;
    let chi_psi = chi.product(psi)?;
    let phi_psi = phi.product(psi)?;
    for f in [phi, chi, psi, &phi_chi] {
        require_in_algebra(f, scheme.dim())?;
    }
    check_budget(cfg.samples)?;
    scheme.check_level(n)?;
    let alpha = scheme.alpha(n);
    let dim = scheme.dim();
    let integrand = move |f: &TestFunction, g: &TestFunction, exact: &[f64], approx: &[f64]| {
        let df = f.value(approx) - f.value(exact);
        match kind {
            BiasKind::Theoretical => df * g.value(exact),
            BiasKind::Practical => -df * g.value(approx),
            BiasKind::Symmetric => -0.5 * df * (g.value(approx) - g.value(exact)),
            BiasKind::Singular => 0.5 * df * (g.value(approx) + g.value(exact)),
        }
    };
    let stats = crate::mc::run_with(
        cfg.seed,
        &cfg.stream,
        cfg.samples,
        1,
        || PairBuffer::new(dim),
        |buf, rng, out| {
            scheme.sample_pair(n, rng, buf);
            out[0] = paired(buf, |exact, approx| {
                integrand(&phi_chi, psi, exact, approx)
                    - integrand(phi, &chi_psi, exact, approx)
                    - integrand(chi, &phi_psi, exact, approx)
            });
        },
    );
    Ok(FirstOrderResidual {
        residual: finite_or_err(alpha * stats.mean[0], "first-order residual")?,
        stderr: alpha * stats.stderr[0],
    })
}

/// Sample-side and operator-side variance forms.
#[derive(Clone, Debug)]
pub struct VarianceForms {
    /// `alpha_n E[dphi dchi psi(Y)]`
    pub theoretical: f64,
    pub theoretical_stderr: f64,
    /// `alpha_n E[dphi dchi psi(Y_n)]`
    pub practical: f64,
    pub practical_stderr: f64,
    /// Per-sample difference of the two (mean and stderr); the coincidence
    /// diagnostic.
    pub difference: f64,
    pub difference_stderr: f64,
    /// `E_Y[-A_pr[phi psi] chi + A_pr[psi] phi chi - A_th[phi] chi psi]`
    /// from the scheme reference operators, when available.
    pub operator_theoretical: Option<f64>,
    /// The swapped twin.
    pub operator_practical: Option<f64>,
    /// `E_Y[Gamma[phi, chi] psi]` from the reference diffusion.
    pub gamma_weighted: Option<f64>,
}

/// Estimates the theoretical and practical variance forms
/// `alpha_n E[(phi(Y_n)-phi(Y)) (chi(Y_n)-chi(Y)) psi(.)]` with the weight
/// read at `Y` and at `Y_n`, plus the operator-side expressions assembled
/// from the scheme's reference operators when it has them.
pub fn variance_forms(
    scheme: &dyn ApproximationScheme,
    phi: &TestFunction,
    chi: &TestFunction,
    psi: &TestFunction,
    n: u32,
    cfg: &EstimatorConfig,
) -> Result<VarianceForms> {
    for f in [phi, chi, psi] {
        require_in_algebra(f, scheme.dim())?;
    }
    check_budget(cfg.samples)?;
    scheme.check_level(n)?;
    let alpha = scheme.alpha(n);
    let dim = scheme.dim();
    let stats = crate::mc::run_with(
        cfg.seed,
        &cfg.stream,
        cfg.samples,
        3,
        || PairBuffer::new(dim),
        |buf, rng, out| {
            scheme.sample_pair(n, rng, buf);
            let th = paired(buf, |exact, approx| {
                (phi.value(approx) - phi.value(exact))
                    * (chi.value(approx) - chi.value(exact))
                    * psi.value(exact)
            });
            let pr = paired(buf, |exact, approx| {
                (phi.value(approx) - phi.value(exact))
                    * (chi.value(approx) - chi.value(exact))
                    * psi.value(approx)
            });
            out[0] = th;
            out[1] = pr;
            out[2] = th - pr;
        },
    );

    let mut out = VarianceForms {
        theoretical: finite_or_err(alpha * stats.mean[0], "variance form")?,
        theoretical_stderr: alpha * stats.stderr[0],
        practical: finite_or_err(alpha * stats.mean[1], "variance form")?,
        practical_stderr: alpha * stats.stderr[1],
        difference: alpha * stats.mean[2],
        difference_stderr: alpha * stats.stderr[2],
        operator_theoretical: None,
        operator_practical: None,
        gamma_weighted: None,
    };

    if let Some(reference) = scheme.reference() {
        let phi_psi = phi.product(psi)?;
        let m = cfg.samples.min(200_000);
        let ops = crate::mc::run(cfg.seed, &cfg.sub("operator-side"), m, 3, |rng, row| {
            let mut y = vec![0.0; dim];
            reference.measure().sample(rng, &mut y);
            let jet_phi = phi.eval(&y).unwrap();
            let jet_chi = chi.eval(&y).unwrap();
            let jet_psi = psi.eval(&y).unwrap();
            let jet_phi_psi = phi_psi.eval(&y).unwrap();
            let (vphi, vchi, vpsi) = (jet_phi.value(), jet_chi.value(), jet_psi.value());
            row[2] = reference.gamma_bilinear(jet_phi.gradient(), jet_chi.gradient(), &y) * vpsi;
            let bar_phi = reference.a_bar(&jet_phi, &y);
            let bar_psi = reference.a_bar(&jet_psi, &y);
            let bar_phi_psi = reference.a_bar(&jet_phi_psi, &y);
            match (
                reference.a_tilde(&jet_phi, &y),
                reference.a_tilde(&jet_psi, &y),
                reference.a_tilde(&jet_phi_psi, &y),
            ) {
                (Ok(tilde_phi), Ok(tilde_psi), Ok(tilde_phi_psi)) => {
                    let under_phi = 2.0 * tilde_phi - bar_phi;
                    let under_psi = 2.0 * tilde_psi - bar_psi;
                    let under_phi_psi = 2.0 * tilde_phi_psi - bar_phi_psi;
                    row[0] =
                        -under_phi_psi * vchi + under_psi * vphi * vchi - bar_phi * vchi * vpsi;
                    row[1] = -bar_phi_psi * vchi + bar_psi * vphi * vchi - under_phi * vchi * vpsi;
                }
                _ => {
                    row[0] = f64::NAN;
                    row[1] = f64::NAN;
                }
            }
        });
        out.gamma_weighted = Some(ops.mean[2]);
        if ops.mean[0].is_finite() && ops.mean[1].is_finite() {
            out.operator_theoretical = Some(ops.mean[0]);
            out.operator_practical = Some(ops.mean[1]);
        }
    }
    Ok(out)
}

/// Reference weak value `E_Y[A_kind[phi] chi]` by Monte Carlo over the
/// scheme's reference measure, when reference operators exist.
pub fn reference_weak_value(
    scheme: &dyn ApproximationScheme,
    kind: BiasKind,
    phi: &TestFunction,
    chi: &TestFunction,
    samples: usize,
    seed: u64,
) -> Option<(f64, f64)> {
    let reference = scheme.reference()?;
    if kind != BiasKind::Theoretical && !reference.has_rho() {
        return None;
    }
    let dim = scheme.dim();
    let stats = crate::mc::run(seed, "reference-weak", samples, 1, |rng, row| {
        let mut y = vec![0.0; dim];
        reference.measure().sample(rng, &mut y);
        let jet = phi.eval(&y).unwrap();
        let bar = reference.a_bar(&jet, &y);
        let value = match kind {
            BiasKind::Theoretical => bar,
            _ => {
                let tilde = reference.a_tilde(&jet, &y).unwrap();
                match kind {
                    BiasKind::Symmetric => tilde,
                    BiasKind::Practical => 2.0 * tilde - bar,
                    BiasKind::Singular => bar - tilde,
                    BiasKind::Theoretical => unreachable!(),
                }
            }
        };
        row[0] = value * chi.value(&y);
    });
    Some((stats.mean[0], stats.stderr[0]))
}

#[cfg(test)]
mod tests;
