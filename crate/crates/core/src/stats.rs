//! Distributional diagnostics: Kolmogorov-Smirnov against the uniform law,
//! two-sample KS, Pearson chi-square independence over equal-probability
//! bins, and least-squares rate fitting on log-log scales.

use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::schemes::{GraduationScheme, PairBuffer};
use crate::{Error, Result};

/// A sorted sample vector.
#[derive(Clone, Debug)]
pub struct EmpiricalDistribution {
    samples: Vec<f64>,
}

impl EmpiricalDistribution {
    pub fn new(mut samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Invalid("empty sample".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "empirical distribution".into(),
            });
        }
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sorted(&self) -> &[f64] {
        &self.samples
    }
}

/// Asymptotic Kolmogorov tail probability
/// `Q(lambda) = 2 sum_{k>=1} (-1)^{k-1} exp(-2 k^2 lambda^2)`, truncated at
/// 100 terms.
pub fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100u32 {
        let k2 = (k * k) as f64;
        let term = (-2.0 * k2 * lambda * lambda).exp();
        if k % 2 == 1 {
            sum += term;
        } else {
            sum -= term;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// `lambda` with `Q(lambda) = alpha`, by bisection on the asymptotic series.
pub fn kolmogorov_critical(alpha: f64) -> f64 {
    let (mut lo, mut hi) = (1e-3, 4.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if kolmogorov_tail(mid) > alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// One-sample KS statistic and asymptotic p-value.
#[derive(Clone, Copy, Debug)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub samples: usize,
}

/// Exact one-sample KS statistic of `samples` against the uniform CDF on
/// `[0, 1]`, with the asymptotic p-value.
pub fn ks_uniform(samples: &EmpiricalDistribution) -> KsResult {
    let n = samples.len() as f64;
    let mut d = 0.0f64;
    for (i, x) in samples.sorted().iter().enumerate() {
        let x = x.clamp(0.0, 1.0);
        let hi = (i as f64 + 1.0) / n - x;
        let lo = x - i as f64 / n;
        d = d.max(hi).max(lo);
    }
    KsResult {
        statistic: d,
        p_value: kolmogorov_tail(n.sqrt() * d),
        samples: samples.len(),
    }
}

/// Two-sample KS statistic with the asymptotic p-value at the effective
/// sample size `nm/(n+m)`.
pub fn ks_two_sample(a: &EmpiricalDistribution, b: &EmpiricalDistribution) -> KsResult {
    let (xs, ys) = (a.sorted(), b.sorted());
    let (n, m) = (xs.len(), ys.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < n && j < m {
        let v = if xs[i] <= ys[j] { xs[i] } else { ys[j] };
        while i < n && xs[i] <= v {
            i += 1;
        }
        while j < m && ys[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let eff = (n * m) as f64 / (n + m) as f64;
    KsResult {
        statistic: d,
        p_value: kolmogorov_tail(eff.sqrt() * d),
        samples: n.min(m),
    }
}

/// Pearson chi-square independence statistic over a two-way table.
#[derive(Clone, Copy, Debug)]
pub struct Chi2Result {
    pub statistic: f64,
    pub dof: usize,
}

impl Chi2Result {
    /// Upper quantile of the chi-square law with this result's dof.
    pub fn critical(&self, alpha: f64) -> f64 {
        if self.dof == 0 {
            return 0.0;
        }
        ChiSquared::new(self.dof as f64)
            .expect("dof >= 1")
            .inverse_cdf(1.0 - alpha)
    }
}

/// Equal-probability bin edges (interior edges only) from empirical
/// quantiles, deduplicated.
fn quantile_edges(values: &[f64], bins: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut edges = Vec::with_capacity(bins.saturating_sub(1));
    for k in 1..bins {
        let e = sorted[k * sorted.len() / bins];
        if edges.last().is_none_or(|last| *last < e) {
            edges.push(e);
        }
    }
    edges
}

fn bin_index(edges: &[f64], v: f64) -> usize {
    edges.partition_point(|e| *e <= v)
}

/// Pearson chi-square test of independence between the coordinates of
/// `pairs`, over `bins_v x bins_y` equal-probability bins (built from the
/// marginal quantiles, merged when degenerate). Expected counts come from
/// the margins; `dof = (effective_bins_v - 1)(effective_bins_y - 1)`.
pub fn independence_chi2(pairs: &[(f64, f64)], bins_v: usize, bins_y: usize) -> Result<Chi2Result> {
    if pairs.is_empty() {
        return Err(Error::Invalid("empty sample".into()));
    }
    if bins_v == 0 || bins_y == 0 {
        return Err(Error::Invalid("bin counts must be >= 1".into()));
    }
    let vs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let v_edges = quantile_edges(&vs, bins_v);
    let y_edges = quantile_edges(&ys, bins_y);
    let (nv, ny) = (v_edges.len() + 1, y_edges.len() + 1);
    let mut counts = vec![0u64; nv * ny];
    for (v, y) in pairs {
        counts[bin_index(&v_edges, *v) * ny + bin_index(&y_edges, *y)] += 1;
    }
    let row: Vec<f64> = (0..nv)
        .map(|i| (0..ny).map(|j| counts[i * ny + j] as f64).sum())
        .collect();
    let col: Vec<f64> = (0..ny)
        .map(|j| (0..nv).map(|i| counts[i * ny + j] as f64).sum())
        .collect();
    let total = pairs.len() as f64;
    let mut statistic = 0.0;
    for i in 0..nv {
        for j in 0..ny {
            let expected = row[i] * col[j] / total;
            if expected > 0.0 {
                let diff = counts[i * ny + j] as f64 - expected;
                statistic += diff * diff / expected;
            }
        }
    }
    Ok(Chi2Result {
        statistic,
        dof: nv.saturating_sub(1) * ny.saturating_sub(1),
    })
}

/// Diagnostics of the composed-error law: compares `psi` applied to the
/// shifted rescaled error against `psi` of a simulated uniform variable.
#[derive(Clone, Debug)]
pub struct PsiCompositionReport {
    /// Two-sample KS between `psi(n(Y_n - Y) + 1/2)` and `psi(V)`.
    pub ks: KsResult,
    /// Independence of the composed value from the first coordinate of `Y`.
    pub chi2: Chi2Result,
}

/// A pointwise-evaluable, possibly discontinuous composition function on
/// `[0, 1]^d`.
#[derive(Clone, Debug)]
pub enum PsiFunction {
    /// Expression in `x0..x{d-1}`.
    Expr(crate::jet2::Expr),
    /// Indicator of the box `prod_i [lo_i, hi_i]`.
    IndicatorBox { lo: Vec<f64>, hi: Vec<f64> },
}

impl PsiFunction {
    pub fn eval(&self, v: &[f64]) -> f64 {
        match self {
            PsiFunction::Expr(e) => e.eval_value(v),
            PsiFunction::IndicatorBox { lo, hi } => {
                let inside = v
                    .iter()
                    .zip(lo.iter().zip(hi))
                    .all(|(x, (l, h))| *x >= *l && *x <= *h);
                if inside {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Sampled law comparison for `psi` of the shifted rescaled graduation
/// error, per the weak-convergence claim for integrable compositions: the
/// composed values converge jointly with `Y` to `psi` of an independent
/// uniform.
pub fn psi_composition_test(
    scheme: &GraduationScheme,
    psi: &PsiFunction,
    n: u32,
    samples: usize,
    seed: u64,
) -> Result<PsiCompositionReport> {
    if samples == 0 {
        return Err(Error::Invalid("empty sample".into()));
    }
    use crate::schemes::ApproximationScheme as _;
    scheme.check_level(n)?;
    let dim = scheme.dim();
    let mut rng = crate::mc::stream_rng(seed, "psi-composition/error");
    let mut buf = PairBuffer::new(dim);
    let mut shifted = vec![0.0; dim];
    let mut composed = Vec::with_capacity(samples);
    let mut against_y = Vec::with_capacity(samples);
    for _ in 0..samples {
        scheme.sample_pair(n, &mut rng, &mut buf);
        for ((s, a), e) in shifted.iter_mut().zip(&buf.approx).zip(&buf.exact) {
            *s = n as f64 * (a - e) + 0.5;
        }
        let value = psi.eval(&shifted);
        composed.push(value);
        against_y.push((value, buf.exact[0]));
    }
    let mut rng = crate::mc::stream_rng(seed, "psi-composition/uniform");
    let mut v = vec![0.0; dim];
    let reference: Vec<f64> = (0..samples)
        .map(|_| {
            for vi in v.iter_mut() {
                *vi = rand::Rng::random(&mut rng);
            }
            psi.eval(&v)
        })
        .collect();
    let ks = ks_two_sample(
        &EmpiricalDistribution::new(composed)?,
        &EmpiricalDistribution::new(reference)?,
    );
    let chi2 = independence_chi2(&against_y, 20, 20)?;
    Ok(PsiCompositionReport { ks, chi2 })
}

/// Least-squares fit on `(log x, log y)`.
#[derive(Clone, Copy, Debug)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Fits `log y = slope log x + intercept`; rejects non-positive data.
pub fn rate_fit(xs: &[f64], ys: &[f64]) -> Result<RateFit> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.len(),
            got: ys.len(),
        });
    }
    if xs.len() < 3 {
        return Err(Error::Invalid(format!(
            "rate fit needs at least 3 points, got {}",
            xs.len()
        )));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::Invalid(
            "rate fit needs strictly positive finite values".into(),
        ));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Invalid("degenerate abscissae".into()));
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        sxy * sxy / (sxx * syy)
    };
    Ok(RateFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
    })
}
