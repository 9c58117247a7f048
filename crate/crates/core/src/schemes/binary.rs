//! Binary-digit truncation: `Y` uniform on `[0,1]` built from i.i.d. fair
//! bits, `Y_n` the first `n` digits. The conditional bias `2^-(n+1)`
//! dominates the conditional standard deviation `2^-n/sqrt(12)`, so this is
//! the weakly stochastic prototype: first-order error calculus suffices.

use rand::RngCore;
use rand_chacha::ChaCha8Rng;

use super::{ApproximationScheme, PairBuffer};
use crate::{Error, Result};

/// Digits carried by one sample of `Y`.
const DIGITS: u32 = 53;

#[derive(Clone, Copy, Debug, Default)]
pub struct BinaryDigitScheme;

/// Scale `alpha_n = 2^n`, matched to the bias order.
pub fn binary_digit_scheme() -> BinaryDigitScheme {
    BinaryDigitScheme
}

impl BinaryDigitScheme {
    /// Truncation of an explicit digit word: `Y_n` from the top `n` of the
    /// 53 carried digits.
    pub fn truncate(word: u64, n: u32) -> f64 {
        (word >> (DIGITS - n)) as f64 / (1u64 << n) as f64
    }
}

impl ApproximationScheme for BinaryDigitScheme {
    fn name(&self) -> &'static str {
        "binary-digit"
    }

    fn dim(&self) -> usize {
        1
    }

    fn alpha(&self, n: u32) -> f64 {
        (n as f64).exp2()
    }

    fn check_level(&self, n: u32) -> Result<()> {
        if n == 0 || n > DIGITS {
            return Err(Error::Invalid(format!(
                "binary-digit level must be in 1..={DIGITS}, got {n}"
            )));
        }
        Ok(())
    }

    fn sample_pair(&self, n: u32, rng: &mut ChaCha8Rng, buf: &mut PairBuffer) {
        let word = rng.next_u64() >> (64 - DIGITS);
        buf.exact[0] = word as f64 / (1u64 << DIGITS) as f64;
        buf.approx[0] = Self::truncate(word, n);
        buf.mirror_weight = None;
    }

    fn reference_bias(&self, n: u32) -> Option<f64> {
        Some(0.5f64.powi(n as i32 + 1))
    }

    fn reference_variance(&self, n: u32) -> Option<f64> {
        Some(0.25f64.powi(n as i32) / 12.0)
    }
}
