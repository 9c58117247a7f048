//! Sampling laws for the exact quantity `Y` and the perturbation noise `G`.
//!
//! A [`Law`] knows how to sample, and — when the density is known in closed
//! form — exposes its componentwise score `∂_i log p` and pointwise density
//! ratios. Scores feed the first-order coefficients of reference operators;
//! density ratios enable the cell-reflection variance reduction of the
//! graduation scheme. Laws without a usable density (custom transforms,
//! pushforwards) simply return `None` and the consumers degrade gracefully.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::jet2::{Expr, TestFunction};
use crate::{Error, Result};

/// One standard normal pair by the Box-Muller transform. Exactly two
/// uniforms per call, which keeps draw counts deterministic.
pub fn normal_pair(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let u1: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
    let u2: f64 = rng.random();
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
    (r * c, r * s)
}

/// Fills `out` with independent standard normals.
pub fn fill_std_normal(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    let mut i = 0;
    while i + 1 < out.len() {
        let (a, b) = normal_pair(rng);
        out[i] = a;
        out[i + 1] = b;
        i += 2;
    }
    if i < out.len() {
        out[i] = normal_pair(rng).0;
    }
}

/// A probability law on `R^d`.
#[derive(Clone, Debug)]
pub enum Law {
    /// Independent `U(0,1)` coordinates.
    Uniform01 { dim: usize },
    /// Independent standard normal coordinates.
    StdNormal { dim: usize },
    /// Componentwise transform of independent `U(0,1)` inputs; no density
    /// metadata.
    CustomExpr { dim: usize, maps: Vec<Expr> },
    /// Law of `map(X)` for `X ~ base`; sampling only.
    Pushforward {
        base: Box<Law>,
        map: Vec<TestFunction>,
    },
}

impl Law {
    pub fn uniform(dim: usize) -> Self {
        Law::Uniform01 { dim }
    }

    pub fn std_normal(dim: usize) -> Self {
        Law::StdNormal { dim }
    }

    pub fn custom(maps: Vec<Expr>) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::Invalid("custom law needs at least one map".into()));
        }
        Ok(Law::CustomExpr {
            dim: maps.len(),
            maps,
        })
    }

    pub fn pushforward(base: Law, map: Vec<TestFunction>) -> Result<Self> {
        let p = base.dim();
        if map.is_empty() {
            return Err(Error::Invalid("pushforward needs at least one map".into()));
        }
        for f in &map {
            if f.dim() != p {
                return Err(Error::DimensionMismatch {
                    expected: p,
                    got: f.dim(),
                });
            }
        }
        Ok(Law::Pushforward {
            base: Box::new(base),
            map,
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            Law::Uniform01 { dim } | Law::StdNormal { dim } | Law::CustomExpr { dim, .. } => *dim,
            Law::Pushforward { map, .. } => map.len(),
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim());
        match self {
            Law::Uniform01 { .. } => {
                for y in out.iter_mut() {
                    *y = rng.random();
                }
            }
            Law::StdNormal { .. } => fill_std_normal(rng, out),
            Law::CustomExpr { maps, .. } => {
                let mut u = [0.0f64; 16];
                let u = &mut u[..maps.len()];
                for ui in u.iter_mut() {
                    *ui = rng.random();
                }
                for (y, m) in out.iter_mut().zip(maps) {
                    *y = m.eval_value(u);
                }
            }
            Law::Pushforward { base, map } => {
                let mut x = vec![0.0; base.dim()];
                base.sample(rng, &mut x);
                for (y, f) in out.iter_mut().zip(map) {
                    *y = f.value(&x);
                }
            }
        }
    }

    /// Componentwise score `∂_i log p(y)` when the density is known and
    /// smooth at `y`.
    pub fn score(&self, y: &[f64]) -> Option<Vec<f64>> {
        match self {
            // Constant density in the interior; the boundary has measure zero.
            Law::Uniform01 { dim } => Some(vec![0.0; *dim]),
            Law::StdNormal { .. } => Some(y.iter().map(|v| -v).collect()),
            _ => None,
        }
    }

    /// The score as expressions in `x0..x{d-1}`, when the density is known.
    pub fn score_exprs(&self) -> Option<Vec<Expr>> {
        match self {
            Law::Uniform01 { dim } => Some(vec![Expr::Const(0.0); *dim]),
            Law::StdNormal { dim } => {
                Some((0..*dim).map(|j| Expr::Neg(Expr::Var(j).into())).collect())
            }
            _ => None,
        }
    }

    /// `p(a) / p(b)` when the density is known.
    pub fn density_ratio(&self, a: &[f64], b: &[f64]) -> Option<f64> {
        match self {
            Law::Uniform01 { .. } => {
                let inside = |p: &[f64]| p.iter().all(|v| (0.0..=1.0).contains(v));
                Some(if inside(a) == inside(b) {
                    1.0
                } else if inside(a) {
                    f64::INFINITY
                } else {
                    0.0
                })
            }
            Law::StdNormal { .. } => {
                let qa: f64 = a.iter().map(|v| v * v).sum();
                let qb: f64 = b.iter().map(|v| v * v).sum();
                Some((0.5 * (qb - qa)).exp())
            }
            _ => None,
        }
    }
}

/// Law of the centered unit-covariance noise `G` in the perturbation scheme.
#[derive(Clone, Debug, PartialEq)]
pub enum NoiseLaw {
    StdNormal,
    /// Signs `±1` with equal probability.
    Rademacher,
    /// Uniform on `[-sqrt(3), sqrt(3)]`.
    UniformSym,
    /// Componentwise transform of `U(0,1)` inputs. Centering and unit
    /// covariance are the constructor's problem, not guaranteed here.
    CustomExpr {
        maps: Vec<Expr>,
    },
}

impl NoiseLaw {
    pub fn sample(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        match self {
            NoiseLaw::StdNormal => fill_std_normal(rng, out),
            NoiseLaw::Rademacher => {
                for g in out.iter_mut() {
                    *g = if rng.random::<bool>() { 1.0 } else { -1.0 };
                }
            }
            NoiseLaw::UniformSym => {
                let w = 3.0f64.sqrt();
                for g in out.iter_mut() {
                    *g = (rng.random::<f64>() * 2.0 - 1.0) * w;
                }
            }
            NoiseLaw::CustomExpr { maps } => {
                let mut u = [0.0f64; 16];
                let u = &mut u[..maps.len()];
                for ui in u.iter_mut() {
                    *ui = rng.random();
                }
                for (g, m) in out.iter_mut().zip(maps) {
                    *g = m.eval_value(u);
                }
            }
        }
    }

    /// Whether the law is known symmetric under `G -> -G`; this is what
    /// licenses the sign-flip pairing in the perturbation scheme.
    pub fn is_symmetric(&self) -> bool {
        !matches!(self, NoiseLaw::CustomExpr { .. })
    }
}

/// JSON form of a law: `{"kind": "normal" | "uniform" | "custom-expr", ...}`.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct LawSpec {
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub maps: Option<Vec<String>>,
}

impl LawSpec {
    pub fn build(&self, dim: usize) -> Result<Law> {
        match self.kind.as_str() {
            "uniform" => Ok(Law::uniform(dim)),
            "normal" => Ok(Law::std_normal(dim)),
            "custom-expr" => {
                let maps = self
                    .maps
                    .as_ref()
                    .ok_or_else(|| Error::Invalid("custom-expr law needs `maps`".into()))?
                    .iter()
                    .map(|s| Expr::parse(s))
                    .collect::<Result<Vec<_>>>()?;
                if maps.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: maps.len(),
                    });
                }
                Law::custom(maps)
            }
            other => Err(Error::Invalid(format!("unknown law kind `{other}`"))),
        }
    }

    pub fn of(law: &Law) -> Result<LawSpec> {
        Ok(match law {
            Law::Uniform01 { .. } => LawSpec {
                kind: "uniform".into(),
                maps: None,
            },
            Law::StdNormal { .. } => LawSpec {
                kind: "normal".into(),
                maps: None,
            },
            Law::CustomExpr { maps, .. } => LawSpec {
                kind: "custom-expr".into(),
                maps: Some(maps.iter().map(|m| m.to_string()).collect()),
            },
            Law::Pushforward { .. } => {
                return Err(Error::Invalid(
                    "pushforward measures are not serializable".into(),
                ))
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_moments() {
        let mut rng = crate::mc::stream_rng(21, "law-normal");
        let n = 200_000;
        let (mut s1, mut s2, mut s4) = (0.0, 0.0, 0.0);
        let mut z = [0.0];
        for _ in 0..n {
            fill_std_normal(&mut rng, &mut z);
            s1 += z[0];
            s2 += z[0] * z[0];
            s4 += z[0].powi(4);
        }
        let nf = n as f64;
        assert!((s1 / nf).abs() < 0.01);
        assert!((s2 / nf - 1.0).abs() < 0.02);
        assert!((s4 / nf - 3.0).abs() < 0.1);
    }

    #[test]
    fn scores_and_ratios() {
        let normal = Law::std_normal(2);
        assert_eq!(normal.score(&[0.5, -2.0]), Some(vec![-0.5, 2.0]));
        let r = normal.density_ratio(&[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((r - (-0.5f64).exp()).abs() < 1e-15);

        let unif = Law::uniform(1);
        assert_eq!(unif.score(&[0.3]), Some(vec![0.0]));
        assert_eq!(unif.density_ratio(&[0.3], &[0.9]), Some(1.0));

        let custom = Law::custom(vec![Expr::parse("sq(x0)").unwrap()]).unwrap();
        assert_eq!(custom.score(&[0.3]), None);
    }

    #[test]
    fn pushforward_samples_through_the_map() {
        let base = Law::uniform(1);
        let map = vec![TestFunction::parse("sq(x0)", 1).unwrap()];
        let law = Law::pushforward(base, map).unwrap();
        let mut rng = crate::mc::stream_rng(3, "law-push");
        let mut y = [0.0];
        for _ in 0..100 {
            law.sample(&mut rng, &mut y);
            assert!((0.0..=1.0).contains(&y[0]));
        }
    }

    #[test]
    fn noise_laws_are_centered_with_unit_variance() {
        for law in [
            NoiseLaw::StdNormal,
            NoiseLaw::Rademacher,
            NoiseLaw::UniformSym,
        ] {
            let mut rng = crate::mc::stream_rng(4, "law-noise");
            let n = 100_000;
            let (mut s1, mut s2) = (0.0, 0.0);
            let mut g = [0.0];
            for _ in 0..n {
                law.sample(&mut rng, &mut g);
                s1 += g[0];
                s2 += g[0] * g[0];
            }
            let nf = n as f64;
            assert!((s1 / nf).abs() < 0.02, "{law:?} not centered");
            assert!((s2 / nf - 1.0).abs() < 0.02, "{law:?} variance off");
        }
    }
}
