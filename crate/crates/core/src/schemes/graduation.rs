//! Graduation (quantization) errors: reading a quantity to the nearest mark
//! of an equispaced scale, `Y_n = (floor(n Y) + 1/2) / n` componentwise,
//! with scale `alpha_n = n^2`.
//!
//! For laws with a density the rescaled error `n (Y_n - Y)` becomes uniform
//! on `(-1/2, 1/2)` independent of `Y`; the reference operators are
//! `(1/24) Laplacian` plus a first-order part fed by the score of the law.

use rand_chacha::ChaCha8Rng;

use super::{ApproximationScheme, PairBuffer};
use crate::error_core::{DirichletStructure, MatrixField, ScalarField, VectorField};
use crate::jet2::{Expr, TestFunction};
use crate::law::Law;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct GraduationScheme {
    law: Law,
    reference: Option<DirichletStructure>,
}

pub fn graduation_scheme(law: Law) -> Result<GraduationScheme> {
    let d = law.dim();
    let reference = match law.score_exprs() {
        Some(scores) => {
            // theta = I/12; rho_jj = score_j / 12 so the symmetric drift is
            // score_j / 24.
            let mut rho_entries = vec![ScalarField::zero(); d * d];
            for (j, score) in scores.into_iter().enumerate() {
                rho_entries[j * d + j] =
                    ScalarField::Expr(Expr::Mul(Expr::Const(1.0 / 12.0).into(), score.into()));
            }
            Some(DirichletStructure::new(
                d,
                VectorField::zeros(d),
                MatrixField::scaled_identity(d, 1.0 / 12.0),
                Some(MatrixField::new(d, rho_entries)?),
                law.clone(),
            )?)
        }
        None => Some(DirichletStructure::new(
            d,
            VectorField::zeros(d),
            MatrixField::scaled_identity(d, 1.0 / 12.0),
            None,
            law.clone(),
        )?),
    };
    Ok(GraduationScheme { law, reference })
}

impl GraduationScheme {
    /// Nearest-graduation reading at fineness `n`: the midpoint of the cell
    /// containing `y`, exactly `(floor(n y) + 1/2) / n`.
    pub fn quantize(y: f64, n: u32) -> f64 {
        let nf = n as f64;
        ((nf * y).floor() + 0.5) / nf
    }

    /// Reflection of `y` through its cell midpoint.
    fn reflect(y: f64, n: u32) -> f64 {
        let nf = n as f64;
        (2.0 * (nf * y).floor() + 1.0) / nf - y
    }

    pub fn law(&self) -> &Law {
        &self.law
    }
}

impl ApproximationScheme for GraduationScheme {
    fn name(&self) -> &'static str {
        "graduation"
    }

    fn dim(&self) -> usize {
        self.law.dim()
    }

    fn alpha(&self, n: u32) -> f64 {
        let nf = n as f64;
        nf * nf
    }

    fn sample_pair(&self, n: u32, rng: &mut ChaCha8Rng, buf: &mut PairBuffer) {
        self.law.sample(rng, &mut buf.exact);
        for i in 0..buf.exact.len() {
            buf.approx[i] = Self::quantize(buf.exact[i], n);
        }
        buf.mirror_weight = None;
        // Cell reflection is a measure-preserving involution; reweighting by
        // the density ratio keeps the paired average exactly unbiased.
        for i in 0..buf.exact.len() {
            buf.mirror_exact[i] = Self::reflect(buf.exact[i], n);
            buf.mirror_approx[i] = Self::quantize(buf.mirror_exact[i], n);
        }
        buf.mirror_weight = self.law.density_ratio(&buf.mirror_exact, &buf.exact);
    }

    fn reference(&self) -> Option<&DirichletStructure> {
        self.reference.as_ref()
    }

    fn reference_variance(&self, n: u32) -> Option<f64> {
        // E[(Y_n - Y)^2] -> 1/(12 n^2) coordinatewise for smooth laws.
        Some(1.0 / (12.0 * self.alpha(n)))
    }
}

/// A weight for the conditional bias profile: an integrable function with an
/// explicit compact support interval.
#[derive(Clone, Debug)]
pub struct Weight {
    lo: f64,
    hi: f64,
    kind: WeightKind,
}

#[derive(Clone, Debug)]
enum WeightKind {
    /// Constant `1/(hi-lo)` on the support.
    Uniform,
    /// Smooth bump `exp(-1/(1-t^2))`, normalized to unit mass.
    Bump { norm: f64 },
}

impl Weight {
    pub fn uniform(lo: f64, hi: f64) -> Result<Weight> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Invalid(format!(
                "weight support must be a finite interval, got ({lo}, {hi})"
            )));
        }
        Ok(Weight {
            lo,
            hi,
            kind: WeightKind::Uniform,
        })
    }

    pub fn bump(center: f64, radius: f64) -> Result<Weight> {
        if !(center.is_finite() && radius.is_finite() && radius > 0.0) {
            return Err(Error::Invalid(format!(
                "bump weight needs a finite center and positive radius, got ({center}, {radius})"
            )));
        }
        let raw = composite_gauss8(
            |t| {
                let s = 1.0 - t * t;
                if s <= 0.0 {
                    0.0
                } else {
                    (-1.0 / s).exp()
                }
            },
            -1.0,
            1.0,
            256,
        );
        Ok(Weight {
            lo: center - radius,
            hi: center + radius,
            kind: WeightKind::Bump {
                norm: 1.0 / (raw * radius),
            },
        })
    }

    pub fn support(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn eval(&self, y: f64) -> f64 {
        if y <= self.lo || y >= self.hi {
            return 0.0;
        }
        match &self.kind {
            WeightKind::Uniform => 1.0 / (self.hi - self.lo),
            WeightKind::Bump { norm } => {
                let c = 0.5 * (self.lo + self.hi);
                let r = 0.5 * (self.hi - self.lo);
                let t = (y - c) / r;
                let s = 1.0 - t * t;
                if s <= 0.0 {
                    0.0
                } else {
                    norm * (-1.0 / s).exp()
                }
            }
        }
    }
}

const GAUSS8_NODES: [f64; 4] = [
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const GAUSS8_WEIGHTS: [f64; 4] = [
    0.362_683_783_378_362,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_5,
    0.101_228_536_290_376_3,
];

fn gauss8<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut acc = 0.0;
    for (x, w) in GAUSS8_NODES.iter().zip(GAUSS8_WEIGHTS) {
        acc += w * (f(mid - half * x) + f(mid + half * x));
    }
    acc * half
}

fn composite_gauss8<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, pieces: usize) -> f64 {
    let h = (b - a) / pieces as f64;
    (0..pieces)
        .map(|k| gauss8(&f, a + k as f64 * h, a + (k + 1) as f64 * h))
        .sum()
}

/// Deterministic quadrature of the rescaled conditional bias against a
/// weight: `∫ n^2 (phi(q_n(y)) - phi(y)) w(y) dy`, integrating cell by cell
/// so that each piece is smooth. Converges to the weighted second-order
/// limit `∫ (1/24) phi'' w dy` for smooth compactly supported weights.
pub fn conditional_bias_profile(
    _scheme: &GraduationScheme,
    phi: &TestFunction,
    n: u32,
    weight: &Weight,
) -> Result<f64> {
    if phi.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: phi.dim(),
        });
    }
    if n == 0 {
        return Err(Error::Invalid("level n must be >= 1".into()));
    }
    let (lo, hi) = weight.support();
    let nf = n as f64;
    let alpha = nf * nf;
    let integrand = |y: f64| {
        let q = GraduationScheme::quantize(y, n);
        alpha * (phi.value(&[q]) - phi.value(&[y])) * weight.eval(y)
    };
    let k_lo = (lo * nf).floor() as i64;
    let k_hi = (hi * nf).floor() as i64;
    let mut total = 0.0;
    for k in k_lo..=k_hi {
        let a = (k as f64 / nf).max(lo);
        let b = ((k + 1) as f64 / nf).min(hi);
        if b > a {
            total += gauss8(&integrand, a, b);
        }
    }
    Ok(total)
}

/// The weighted limit `∫ (1/24) phi''(y) w(y) dy` by the same quadrature.
pub fn conditional_bias_limit(phi: &TestFunction, weight: &Weight) -> Result<f64> {
    if phi.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: phi.dim(),
        });
    }
    let (lo, hi) = weight.support();
    Ok(composite_gauss8(
        |y| phi.eval(&[y]).unwrap().hessian()[(0, 0)] / 24.0 * weight.eval(y),
        lo,
        hi,
        512,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn quantizes_to_cell_midpoints() {
        // 0.237 at n = 10 reads 0.25.
        assert_eq!(GraduationScheme::quantize(0.237, 10), 0.25);
        // Exact grid points still map to the midpoint of their cell.
        assert_eq!(GraduationScheme::quantize(0.3, 10), 0.35);
        assert_eq!(GraduationScheme::quantize(-0.04, 10), -0.05);
    }

    #[test]
    fn rescaled_error_is_within_half_and_on_grid() {
        let s = graduation_scheme(Law::std_normal(2)).unwrap();
        let mut rng = crate::mc::stream_rng(3, "grad-range");
        let mut buf = PairBuffer::new(2);
        for _ in 0..2000 {
            let n = rng.random_range(1..=200u32);
            s.sample_pair(n, &mut rng, &mut buf);
            for i in 0..2 {
                let v = n as f64 * (buf.approx[i] - buf.exact[i]);
                assert!((-0.5..=0.5).contains(&v), "n={n}, v={v}");
                // Y_n == (k + 1/2)/n bitwise, with k the cell index.
                let k = (n as f64 * buf.exact[i]).floor();
                assert_eq!(buf.approx[i], (k + 0.5) / n as f64);
            }
        }
    }

    #[test]
    fn mirror_reflects_within_the_cell() {
        let s = graduation_scheme(Law::uniform(1)).unwrap();
        let mut rng = crate::mc::stream_rng(4, "grad-mirror");
        let mut buf = PairBuffer::new(1);
        for _ in 0..500 {
            s.sample_pair(16, &mut rng, &mut buf);
            assert_eq!(buf.mirror_weight, Some(1.0));
            assert_eq!(buf.mirror_approx[0], buf.approx[0]);
            // Midpoint of (y, y') is the cell midpoint.
            assert_relative_eq!(
                0.5 * (buf.exact[0] + buf.mirror_exact[0]),
                buf.approx[0],
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn reference_square_field_of_square_function() {
        // Gamma[phi](y) = (1/12) phi'(y)^2; phi = x^2 at y = 1 gives 1/3.
        let s = graduation_scheme(Law::uniform(1)).unwrap();
        let phi = TestFunction::parse("sq(x0)", 1).unwrap();
        let g = s.reference().unwrap().gamma(&phi, &[1.0]).unwrap();
        assert_relative_eq!(g, 1.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn reference_drift_follows_the_score() {
        let s = graduation_scheme(Law::std_normal(1)).unwrap();
        let drift = s.reference().unwrap().tilde_drift(&[0.8]).unwrap();
        assert_relative_eq!(drift[0], -0.8 / 24.0, epsilon = 1e-15);

        let u = graduation_scheme(Law::uniform(1)).unwrap();
        let drift = u.reference().unwrap().tilde_drift(&[0.3]).unwrap();
        assert_eq!(drift[0], 0.0);

        let c =
            graduation_scheme(Law::custom(vec![Expr::parse("sq(x0)").unwrap()]).unwrap()).unwrap();
        assert!(c.reference().unwrap().tilde_drift(&[0.3]).is_none());
    }

    #[test]
    fn profile_of_square_converges_to_one_twelfth() {
        // phi = x^2: the weighted limit is (1/24) * 2 = 1/12 for any unit-
        // mass weight.
        let s = graduation_scheme(Law::uniform(1)).unwrap();
        let phi = TestFunction::parse("sq(x0)", 1).unwrap();
        let w = Weight::bump(0.5, 0.35).unwrap();
        let coarse = conditional_bias_profile(&s, &phi, 16, &w).unwrap();
        let fine = conditional_bias_profile(&s, &phi, 256, &w).unwrap();
        let target = 1.0 / 12.0;
        assert!((fine - target).abs() < (coarse - target).abs());
        assert!((fine - target).abs() < 5e-4, "fine = {fine}");
    }

    #[test]
    fn profile_of_linear_function_vanishes_over_whole_periods() {
        // phi = x with a uniform weight aligned to the grid: the sawtooth
        // integrates to zero on every cell, at every level.
        let s = graduation_scheme(Law::uniform(1)).unwrap();
        let phi = TestFunction::coordinate(0, 1).unwrap();
        let w = Weight::uniform(0.0, 1.0).unwrap();
        for n in [4u32, 16, 64] {
            let v = conditional_bias_profile(&s, &phi, n, &w).unwrap();
            assert!(v.abs() < 1e-10 * n as f64, "n={n}: {v}");
        }
    }

    #[test]
    fn profile_of_cosine_matches_the_quadrature_limit() {
        let s = graduation_scheme(Law::uniform(1)).unwrap();
        let phi = TestFunction::cos_coordinate(0, 1).unwrap();
        let w = Weight::bump(0.0, 1.0).unwrap();
        let limit = conditional_bias_limit(&phi, &w).unwrap();
        // (1/24) ∫ (-cos) w: negative, order 1/24.
        assert!(limit < 0.0 && limit > -1.0 / 24.0);
        let profile = conditional_bias_profile(&s, &phi, 256, &w).unwrap();
        assert_relative_eq!(profile, limit, epsilon = 2e-5);
    }

    #[test]
    fn weight_constructors_reject_bad_supports() {
        assert!(Weight::uniform(0.0, 0.0).is_err());
        assert!(Weight::uniform(f64::NEG_INFINITY, 1.0).is_err());
        assert!(Weight::bump(0.0, -1.0).is_err());
    }

    #[test]
    fn bump_weight_has_unit_mass() {
        let w = Weight::bump(0.3, 0.7).unwrap();
        let mass = composite_gauss8(|y| w.eval(y), -0.4, 1.0, 256);
        assert_relative_eq!(mass, 1.0, epsilon = 1e-10);
    }
}
