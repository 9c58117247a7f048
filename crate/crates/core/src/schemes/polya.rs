//! Polya urn: one white and one black ball to start; each draw is returned
//! together with a new ball of the same colour. The proportion of white
//! balls is a bounded martingale converging to a uniform limit; `Y` is
//! approximated by the proportion at a large horizon. Zero bias, variance
//! of order `1/(6n)`: the strongly stochastic prototype.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ApproximationScheme, PairBuffer};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct PolyaScheme {
    horizon: u32,
    /// inv[k] = 1/(k+2); hoisted out of the per-path loop.
    inv: Vec<f64>,
}

/// `horizon` is the number of drawings standing in for the limit; the
/// additional `L^2` error is of order `1/horizon`.
pub fn polya_scheme(horizon: u32) -> Result<PolyaScheme> {
    if horizon == 0 {
        return Err(Error::Invalid("polya horizon must be >= 1".into()));
    }
    let inv = (0..=horizon as usize)
        .map(|k| 1.0 / (k as f64 + 2.0))
        .collect();
    Ok(PolyaScheme { horizon, inv })
}

impl PolyaScheme {
    pub fn horizon(&self) -> u32 {
        self.horizon
    }

    /// Simulates one path, returning `(X_n, X_horizon)`.
    fn path(&self, n: u32, rng: &mut ChaCha8Rng) -> (f64, f64) {
        let mut x = 0.5; // one white, one black
        let step = |x: &mut f64, k: usize, rng: &mut ChaCha8Rng| {
            let u: f64 = rng.random();
            let draw_white = (u <= *x) as u32 as f64;
            *x += (draw_white - *x) * self.inv[k];
        };
        for k in 1..=n as usize {
            step(&mut x, k, rng);
        }
        let at_n = x;
        for k in (n as usize + 1)..=self.horizon as usize {
            step(&mut x, k, rng);
        }
        (at_n, x)
    }
}

impl ApproximationScheme for PolyaScheme {
    fn name(&self) -> &'static str {
        "polya"
    }

    fn dim(&self) -> usize {
        1
    }

    fn alpha(&self, n: u32) -> f64 {
        n as f64
    }

    fn check_level(&self, n: u32) -> Result<()> {
        if n == 0 {
            return Err(Error::Invalid("level n must be >= 1".into()));
        }
        if n > self.horizon {
            return Err(Error::BeyondHorizon {
                n,
                horizon: self.horizon,
            });
        }
        Ok(())
    }

    fn sample_pair(&self, n: u32, rng: &mut ChaCha8Rng, buf: &mut PairBuffer) {
        let (at_n, limit) = self.path(n, rng);
        buf.exact[0] = limit;
        buf.approx[0] = at_n;
        buf.mirror_weight = None;
    }

    fn reference_bias(&self, _n: u32) -> Option<f64> {
        Some(0.0)
    }

    fn reference_variance(&self, n: u32) -> Option<f64> {
        Some(1.0 / (6.0 * (n as f64 + 2.0)))
    }
}

/// Exact `E[v_n]` with `v_n = X_n (1 - X_n) / (n + 3)` by full enumeration
/// of the `2^n` draw sequences; feasible for small `n`.
pub fn polya_variance_enumerated(n: u32) -> Result<f64> {
    if n == 0 || n > 20 {
        return Err(Error::Invalid(format!(
            "enumeration supports 1 <= n <= 20, got {n}"
        )));
    }
    let mut total = 0.0f64;
    // Path = bit pattern of white/black draws, most significant draw first.
    for path in 0u32..(1 << n) {
        let mut whites = 1u32;
        let mut prob = 1.0f64;
        for k in 1..=n {
            let balls = (k + 1) as f64;
            let p_white = whites as f64 / balls;
            if path >> (n - k) & 1 == 1 {
                prob *= p_white;
                whites += 1;
            } else {
                prob *= 1.0 - p_white;
            }
        }
        let x = whites as f64 / (n as f64 + 2.0);
        total += prob * x * (1.0 - x) / (n as f64 + 3.0);
    }
    Ok(total)
}

/// Exact distribution of the white count after `n` drawings, by the same
/// enumeration; index `w - 1` holds `P(W_n = w)` for `w` in `1..=n+1`.
pub fn polya_prefix_distribution(n: u32) -> Result<Vec<f64>> {
    if n == 0 || n > 20 {
        return Err(Error::Invalid(format!(
            "enumeration supports 1 <= n <= 20, got {n}"
        )));
    }
    let mut dist = vec![0.0f64; n as usize + 1];
    for path in 0u32..(1 << n) {
        let mut whites = 1u32;
        let mut prob = 1.0f64;
        for k in 1..=n {
            let balls = (k + 1) as f64;
            let p_white = whites as f64 / balls;
            if path >> (n - k) & 1 == 1 {
                prob *= p_white;
                whites += 1;
            } else {
                prob *= 1.0 - p_white;
            }
        }
        dist[whites as usize - 1] += prob;
    }
    Ok(dist)
}
