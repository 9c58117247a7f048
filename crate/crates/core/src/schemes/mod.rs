//! The approximation-scheme zoo: paired samplers `(Y, Y_n)` with their scale
//! sequence and, where available in closed form, reference operators and
//! bias/variance formulas.
//!
//! Schemes are stateless over an injected RNG; concurrent sampling derives
//! per-block counter substreams from a root seed (see [`crate::mc`]).

mod binary;
mod graduation;
mod perturbation;
mod polya;

pub use binary::{binary_digit_scheme, BinaryDigitScheme};
pub use graduation::{
    conditional_bias_limit, conditional_bias_profile, graduation_scheme, GraduationScheme, Weight,
};
pub use perturbation::{perturbation_scheme, perturbation_scheme_with_epsilon, PerturbationScheme};
pub use polya::{polya_prefix_distribution, polya_scheme, polya_variance_enumerated, PolyaScheme};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error_core::DirichletStructure;
use crate::law::{LawSpec, NoiseLaw};
use crate::{Error, Result};

/// Reusable buffer for one `(Y, Y_n)` draw, plus the optional paired mirror
/// draw used for variance reduction.
///
/// A mirror is a second, reweighted sample with the same law, produced from
/// the same underlying randomness by a measure-preserving involution (cell
/// reflection for graduation, a noise sign flip for perturbation). Averaging
/// an integrand over the pair is exactly unbiased and cancels the dominant
/// antisymmetric fluctuation.
#[derive(Clone, Debug)]
pub struct PairBuffer {
    pub exact: Vec<f64>,
    pub approx: Vec<f64>,
    pub mirror_exact: Vec<f64>,
    pub mirror_approx: Vec<f64>,
    /// Density ratio weight of the mirror draw; `None` when the scheme has
    /// no mirror.
    pub mirror_weight: Option<f64>,
}

impl PairBuffer {
    pub fn new(dim: usize) -> Self {
        Self {
            exact: vec![0.0; dim],
            approx: vec![0.0; dim],
            mirror_exact: vec![0.0; dim],
            mirror_approx: vec![0.0; dim],
            mirror_weight: None,
        }
    }
}

/// A paired sampler `n -> (Y, Y_n)` with scale sequence `alpha_n`.
pub trait ApproximationScheme: Send + Sync {
    fn name(&self) -> &'static str;

    fn dim(&self) -> usize;

    /// The scale at level `n`; strictly increasing for the built-in schemes.
    fn alpha(&self, n: u32) -> f64;

    /// Validates a level before sampling begins (e.g. against a horizon).
    fn check_level(&self, n: u32) -> Result<()> {
        if n == 0 {
            return Err(Error::Invalid("level n must be >= 1".into()));
        }
        Ok(())
    }

    /// Draws one exact/approximate pair at level `n` into `buf`. Repeated
    /// calls on the same RNG stream reproduce identical pairs.
    fn sample_pair(&self, n: u32, rng: &mut ChaCha8Rng, buf: &mut PairBuffer);

    /// Reference drift/diffusion data, when the scheme has closed-form
    /// operators.
    fn reference(&self) -> Option<&DirichletStructure> {
        None
    }

    /// Closed-form conditional bias `b_n`, when known.
    fn reference_bias(&self, _n: u32) -> Option<f64> {
        None
    }

    /// Closed-form expected conditional variance `E[v_n]`, when known.
    fn reference_variance(&self, _n: u32) -> Option<f64> {
        None
    }
}

/// JSON form of a scheme:
/// `{"scheme": "graduation", "law": {"kind": "normal"}, "d": 1}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SchemeSpec {
    pub scheme: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub law: Option<LawSpec>,
    #[serde(default = "default_dim")]
    pub d: usize,
    /// Polya horizon standing in for the limit object.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<u32>,
    /// Perturbation drift map `z` (expressions in the coordinates of `Y`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<Vec<String>>,
    /// Perturbation diffusion map `t` (matrix of expressions).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<Vec<Vec<String>>>,
    /// Perturbation noise kind: "normal" | "rademacher" | "uniform".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<String>,
}

fn default_dim() -> usize {
    1
}

impl SchemeSpec {
    pub fn build(&self, seed: u64) -> Result<Box<dyn ApproximationScheme>> {
        match self.scheme.as_str() {
            "binary-digit" => Ok(Box::new(binary_digit_scheme())),
            "polya" => Ok(Box::new(polya_scheme(self.horizon.unwrap_or(100_000))?)),
            "graduation" => {
                let law_spec = self.law.clone().unwrap_or(LawSpec {
                    kind: "uniform".into(),
                    maps: None,
                });
                Ok(Box::new(graduation_scheme(law_spec.build(self.d)?)?))
            }
            "perturbation" => {
                let law_spec = self.law.clone().unwrap_or(LawSpec {
                    kind: "normal".into(),
                    maps: None,
                });
                let law = law_spec.build(self.d)?;
                let parse_all = |items: &[String]| -> Result<Vec<crate::jet2::TestFunction>> {
                    items
                        .iter()
                        .map(|s| crate::jet2::TestFunction::parse(s, self.d))
                        .collect()
                };
                let z = match &self.z {
                    Some(items) => parse_all(items)?,
                    None => (0..self.d)
                        .map(|_| Ok(crate::jet2::TestFunction::constant(0.0, self.d)))
                        .collect::<Result<Vec<_>>>()?,
                };
                let t = match &self.t {
                    Some(rows) => rows
                        .iter()
                        .map(|row| parse_all(row))
                        .collect::<Result<Vec<_>>>()?,
                    None => (0..self.d)
                        .map(|i| {
                            (0..self.d)
                                .map(|j| {
                                    Ok(crate::jet2::TestFunction::constant(
                                        if i == j { 1.0 } else { 0.0 },
                                        self.d,
                                    ))
                                })
                                .collect::<Result<Vec<_>>>()
                        })
                        .collect::<Result<Vec<_>>>()?,
                };
                let noise = match self.noise.as_deref() {
                    None | Some("normal") => NoiseLaw::StdNormal,
                    Some("rademacher") => NoiseLaw::Rademacher,
                    Some("uniform") => NoiseLaw::UniformSym,
                    Some(other) => {
                        return Err(Error::Invalid(format!("unknown noise kind `{other}`")))
                    }
                };
                Ok(Box::new(perturbation_scheme(law, z, t, noise, seed)?))
            }
            other => Err(Error::Invalid(format!("unknown scheme `{other}`"))),
        }
    }
}
