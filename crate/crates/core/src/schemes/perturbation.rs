//! Small-perturbation model: `Y_eps = Y + eps Z + sqrt(eps) T G` with `G`
//! centered, unit covariance, independent of `(Y, Z, T)`. Levels are indexed
//! by `k` with `eps_k = 2^-k` and `alpha_k = 2^k`.
//!
//! `Z = z(Y)` and `T = t(Y)` are smooth maps, so the reference operators are
//! available in closed form: the theoretical drift is `z`, the diffusion is
//! `theta = t t^t`, and the first-order coefficients
//! `rho_ij = d_j theta_ij + theta_ij * score_j` exist whenever the law of
//! `Y` has a known score and `theta` is window-free.

use rand_chacha::ChaCha8Rng;

use super::{ApproximationScheme, PairBuffer};
use crate::error_core::{DirichletStructure, MatrixField, ScalarField, VectorField};
use crate::jet2::{Expr, TestFunction};
use crate::law::{Law, NoiseLaw};
use crate::{Error, Result};

pub struct PerturbationScheme {
    y_law: Law,
    z_map: Vec<TestFunction>,
    t_map: Vec<Vec<TestFunction>>,
    noise: NoiseLaw,
    noise_dim: usize,
    eps: std::sync::Arc<dyn Fn(u32) -> f64 + Send + Sync>,
    reference: DirichletStructure,
}

/// Builds the scheme and validates the noise: sample mean within 3 standard
/// errors of zero and sample covariance within 3 standard errors of the
/// identity, over a validation draw seeded from `seed`.
pub fn perturbation_scheme(
    y_law: Law,
    z_map: Vec<TestFunction>,
    t_map: Vec<Vec<TestFunction>>,
    noise: NoiseLaw,
    seed: u64,
) -> Result<PerturbationScheme> {
    perturbation_scheme_with_epsilon(y_law, z_map, t_map, noise, seed, |k| (-(k as f64)).exp2())
}

/// Like [`perturbation_scheme`] with a caller-chosen epsilon sequence; the
/// scale is its reciprocal. The sequence must be positive and decreasing.
pub fn perturbation_scheme_with_epsilon(
    y_law: Law,
    z_map: Vec<TestFunction>,
    t_map: Vec<Vec<TestFunction>>,
    noise: NoiseLaw,
    seed: u64,
    eps: impl Fn(u32) -> f64 + Send + Sync + 'static,
) -> Result<PerturbationScheme> {
    let p = y_law.dim();
    if z_map.len() != p || t_map.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: z_map.len().min(t_map.len()),
        });
    }
    let noise_dim = t_map[0].len();
    if noise_dim == 0 || t_map.iter().any(|row| row.len() != noise_dim) {
        return Err(Error::Invalid("t map must be a rectangular matrix".into()));
    }
    for f in z_map.iter().chain(t_map.iter().flatten()) {
        if f.dim() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: f.dim(),
            });
        }
    }
    validate_noise(&noise, noise_dim, seed)?;
    let reference = build_reference(&y_law, &z_map, &t_map)?;
    Ok(PerturbationScheme {
        y_law,
        z_map,
        t_map,
        noise,
        noise_dim,
        eps: std::sync::Arc::new(eps),
        reference,
    })
}

fn validate_noise(noise: &NoiseLaw, dim: usize, seed: u64) -> Result<()> {
    const TRIALS: usize = 8192;
    let mut rng = crate::mc::stream_rng(seed, "noise-validate");
    let mut g = vec![0.0; dim];
    let mut mean = vec![0.0; dim];
    let mut cov = vec![0.0; dim * dim];
    let mut cov_sq = vec![0.0; dim * dim];
    for _ in 0..TRIALS {
        noise.sample(&mut rng, &mut g);
        for i in 0..dim {
            mean[i] += g[i];
            for j in 0..dim {
                let prod = g[i] * g[j];
                cov[i * dim + j] += prod;
                cov_sq[i * dim + j] += prod * prod;
            }
        }
    }
    let m = TRIALS as f64;
    for i in 0..dim {
        let se = ((cov[i * dim + i] / m).max(1e-12) / m).sqrt();
        if (mean[i] / m).abs() > 3.0 * se {
            return Err(Error::Invalid(format!(
                "noise component {i} is not centered (mean {:.3e}, 3se {:.3e})",
                mean[i] / m,
                3.0 * se
            )));
        }
        for j in 0..dim {
            let c = cov[i * dim + j] / m;
            let var = (cov_sq[i * dim + j] / m - c * c).max(1e-12);
            let se = (var / m).sqrt();
            let target = if i == j { 1.0 } else { 0.0 };
            if (c - target).abs() > 3.0 * se {
                return Err(Error::Invalid(format!(
                    "noise covariance ({i},{j}) = {c:.4} deviates from {target} by more than 3se"
                )));
            }
        }
    }
    Ok(())
}

fn build_reference(
    y_law: &Law,
    z_map: &[TestFunction],
    t_map: &[Vec<TestFunction>],
) -> Result<DirichletStructure> {
    let p = y_law.dim();
    let z_fields = VectorField::new(
        z_map
            .iter()
            .map(|f| ScalarField::Expr(f.expr().clone()))
            .collect(),
    );
    // theta_ij = sum_k t_ik t_jk
    let mut theta_exprs = Vec::with_capacity(p * p);
    for i in 0..p {
        for j in 0..p {
            let mut acc: Option<Expr> = None;
            for (ti, tj) in t_map[i].iter().zip(&t_map[j]) {
                let prod = Expr::Mul(ti.expr().clone().into(), tj.expr().clone().into());
                acc = Some(match acc {
                    None => prod,
                    Some(sum) => Expr::Add(sum.into(), prod.into()),
                });
            }
            theta_exprs.push(acc.expect("q >= 1"));
        }
    }
    let theta = MatrixField::new(
        p,
        theta_exprs.iter().cloned().map(ScalarField::Expr).collect(),
    )?;
    // rho_ij = d_j theta_ij + theta_ij score_j when both parts exist.
    let rho = y_law.score_exprs().and_then(|scores| {
        let mut entries = Vec::with_capacity(p * p);
        for i in 0..p {
            for j in 0..p {
                let theta_ij = &theta_exprs[i * p + j];
                let d_theta = theta_ij.diff(j)?;
                entries.push(ScalarField::Expr(Expr::Add(
                    d_theta.into(),
                    Expr::Mul(theta_ij.clone().into(), scores[j].clone().into()).into(),
                )));
            }
        }
        MatrixField::new(p, entries).ok()
    });
    DirichletStructure::new(p, z_fields, theta, rho, y_law.clone())
}

impl PerturbationScheme {
    pub fn epsilon(&self, k: u32) -> f64 {
        (self.eps)(k)
    }

    fn fill_pair(&self, eps: f64, y: &[f64], g: &[f64], out: &mut [f64]) {
        let sqrt_eps = eps.sqrt();
        for i in 0..y.len() {
            let mut diffusion = 0.0;
            for (k, gk) in g.iter().enumerate() {
                diffusion += self.t_map[i][k].value(y) * gk;
            }
            out[i] = y[i] + eps * self.z_map[i].value(y) + sqrt_eps * diffusion;
        }
    }
}

impl ApproximationScheme for PerturbationScheme {
    fn name(&self) -> &'static str {
        "perturbation"
    }

    fn dim(&self) -> usize {
        self.y_law.dim()
    }

    fn alpha(&self, k: u32) -> f64 {
        1.0 / self.epsilon(k)
    }

    fn check_level(&self, n: u32) -> Result<()> {
        if n == 0 {
            return Err(Error::Invalid("level n must be >= 1".into()));
        }
        let eps = self.epsilon(n);
        if !(eps.is_finite() && eps > 0.0 && eps <= 1.0) {
            return Err(Error::Invalid(format!(
                "epsilon sequence must stay in (0, 1], got {eps} at level {n}"
            )));
        }
        Ok(())
    }

    fn sample_pair(&self, k: u32, rng: &mut ChaCha8Rng, buf: &mut PairBuffer) {
        let eps = self.epsilon(k);
        self.y_law.sample(rng, &mut buf.exact);
        let mut g = [0.0f64; 16];
        let g = &mut g[..self.noise_dim];
        self.noise.sample(rng, g);
        self.fill_pair(eps, &buf.exact, g, &mut buf.approx);
        if self.noise.is_symmetric() {
            // Sign-flipped noise shares the law of G exactly; weight 1.
            buf.mirror_exact.copy_from_slice(&buf.exact);
            for gk in g.iter_mut() {
                *gk = -*gk;
            }
            self.fill_pair(eps, &buf.exact, g, &mut buf.mirror_approx);
            buf.mirror_weight = Some(1.0);
        } else {
            buf.mirror_weight = None;
        }
    }

    fn reference(&self) -> Option<&DirichletStructure> {
        Some(&self.reference)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error_core::scheme_operators;
    use approx::assert_relative_eq;

    fn ou_scheme() -> PerturbationScheme {
        // Y ~ N(0,1), Z = Y, T = 1.
        perturbation_scheme(
            Law::std_normal(1),
            vec![TestFunction::parse("x0", 1).unwrap()],
            vec![vec![TestFunction::constant(1.0, 1)]],
            NoiseLaw::StdNormal,
            7,
        )
        .unwrap()
    }

    #[test]
    fn zero_maps_leave_y_unchanged() {
        let s = perturbation_scheme(
            Law::std_normal(1),
            vec![TestFunction::constant(0.0, 1)],
            vec![vec![TestFunction::constant(0.0, 1)]],
            NoiseLaw::StdNormal,
            3,
        )
        .unwrap();
        let mut rng = crate::mc::stream_rng(1, "pert-zero");
        let mut buf = PairBuffer::new(1);
        for _ in 0..100 {
            s.sample_pair(6, &mut rng, &mut buf);
            assert_eq!(buf.exact, buf.approx);
        }
        // All operators vanish on any test function.
        let phi = TestFunction::cos_coordinate(0, 1).unwrap();
        let ops = scheme_operators(s.reference().unwrap(), &phi, &[0.4]).unwrap();
        assert_eq!(ops.a_bar, 0.0);
        assert_eq!(ops.a_tilde.unwrap(), 0.0);
    }

    #[test]
    fn theoretical_operator_matches_the_closed_form() {
        // a_bar[phi](y) = y phi'(y) + phi''(y)/2 for Z = Y, T = 1.
        let s = ou_scheme();
        let phi = TestFunction::cos_coordinate(0, 1).unwrap();
        for y in [-1.4, 0.0, 0.9] {
            let ops = scheme_operators(s.reference().unwrap(), &phi, &[y]).unwrap();
            let expect = -y * y.sin() - 0.5 * y.cos();
            assert_relative_eq!(ops.a_bar, expect, epsilon = 1e-13);
            // rho = -y: symmetric drift -y/2, the Ornstein-Uhlenbeck form.
            let tilde = -0.5 * y.cos() + 0.5 * y * y.sin();
            assert_relative_eq!(ops.a_tilde.unwrap(), tilde, epsilon = 1e-13);
        }
    }

    #[test]
    fn quadrature_oracle_for_the_mean_theoretical_bias() {
        // E_Y[a_bar[cos]] under N(0,1) equals -(3/2) e^{-1/2}: the Stein
        // identity E[Y sin Y] = E[cos Y] = e^{-1/2} collapses the quadrature.
        let quad: f64 = {
            let m = 400_000;
            let (lo, hi) = (-10.0f64, 10.0f64);
            let h = (hi - lo) / m as f64;
            let mut acc = 0.0;
            for i in 0..=m {
                let y = lo + i as f64 * h;
                let density = (-0.5 * y * y).exp() / (2.0 * std::f64::consts::PI).sqrt();
                let v = (-y * y.sin() - 0.5 * y.cos()) * density;
                let w = if i == 0 || i == m { 0.5 } else { 1.0 };
                acc += w * v;
            }
            acc * h
        };
        let closed = -1.5 * (-0.5f64).exp();
        assert_relative_eq!(quad, closed, epsilon = 1e-10);
    }

    #[test]
    fn noise_mirror_flips_the_diffusion_part() {
        let s = ou_scheme();
        let mut rng = crate::mc::stream_rng(2, "pert-mirror");
        let mut buf = PairBuffer::new(1);
        for _ in 0..200 {
            s.sample_pair(8, &mut rng, &mut buf);
            assert_eq!(buf.mirror_weight, Some(1.0));
            let eps = s.epsilon(8);
            // (Y_eps + Y_eps^mirror)/2 = Y + eps Z.
            let mid = 0.5 * (buf.approx[0] + buf.mirror_approx[0]);
            assert_relative_eq!(mid, buf.exact[0] * (1.0 + eps), epsilon = 1e-12);
        }
    }

    #[test]
    fn custom_epsilon_sequence_drives_the_scale() {
        let s = perturbation_scheme_with_epsilon(
            Law::std_normal(1),
            vec![TestFunction::constant(0.0, 1)],
            vec![vec![TestFunction::constant(1.0, 1)]],
            NoiseLaw::StdNormal,
            13,
            |k| 4.0f64.powi(-(k as i32)),
        )
        .unwrap();
        assert_eq!(s.epsilon(3), 4.0f64.powi(-3));
        assert_eq!(s.alpha(3), 64.0);
        let mut rng = crate::mc::stream_rng(6, "pert-eps");
        let mut buf = PairBuffer::new(1);
        s.sample_pair(3, &mut rng, &mut buf);
        // Pure diffusion at eps = 4^-3: |Y_eps - Y| = sqrt(eps) |G|.
        let jump = (buf.approx[0] - buf.exact[0]).abs();
        assert!(jump < 8.0 * s.epsilon(3).sqrt());
        assert!(s.check_level(0).is_err());
    }

    #[test]
    fn non_centered_noise_is_rejected() {
        // G = U + 1/2 has mean 1: rejected by the construction check.
        let shifted = NoiseLaw::CustomExpr {
            maps: vec![Expr::parse("x0 + 0.5").unwrap()],
        };
        let r = perturbation_scheme(
            Law::std_normal(1),
            vec![TestFunction::constant(0.0, 1)],
            vec![vec![TestFunction::constant(1.0, 1)]],
            shifted,
            5,
        );
        assert!(matches!(r, Err(Error::Invalid(_))));
    }

    #[test]
    fn wrong_covariance_is_rejected() {
        // G uniform on (0,1) shifted to mean zero has variance 1/12, not 1.
        let narrow = NoiseLaw::CustomExpr {
            maps: vec![Expr::parse("x0 - 0.5").unwrap()],
        };
        let r = perturbation_scheme(
            Law::std_normal(1),
            vec![TestFunction::constant(0.0, 1)],
            vec![vec![TestFunction::constant(1.0, 1)]],
            narrow,
            5,
        );
        assert!(r.is_err());
    }

    #[test]
    fn state_dependent_diffusion_gets_symbolic_rho() {
        // T = cos(Y) under N(0,1): theta = cos^2, rho = d(theta) - y theta.
        let s = perturbation_scheme(
            Law::std_normal(1),
            vec![TestFunction::constant(0.0, 1)],
            vec![vec![TestFunction::cos_coordinate(0, 1).unwrap()]],
            NoiseLaw::UniformSym,
            11,
        )
        .unwrap();
        let y = 0.6f64;
        let drift = s.reference().unwrap().tilde_drift(&[y]).unwrap();
        let theta = y.cos() * y.cos();
        let d_theta = -2.0 * y.cos() * y.sin();
        assert_relative_eq!(drift[0], 0.5 * (d_theta - y * theta), epsilon = 1e-13);
    }
}
