//! Deterministic Monte Carlo driver: named counter-based substreams and a
//! fixed-shape block reduction.
//!
//! Reproducibility contract: one root seed fans out to named substreams, a
//! substream fans out to fixed-size sample blocks, and block partials are
//! merged by pairwise (tree) summation in block order. The reduction shape
//! depends only on the sample count, so results are bit-identical for a
//! fixed seed regardless of worker count, and identical between the rayon
//! path and the sequential fallback.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Samples per block. Blocks are the unit of parallelism and of RNG
/// assignment; changing this constant changes the streams.
pub const BLOCK_SIZE: usize = 4096;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a64(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seed for a named substream of a root seed. Adding new substream names
/// never perturbs existing streams.
pub fn substream_seed(root: u64, name: &str) -> u64 {
    splitmix64(splitmix64(root) ^ fnv1a64(name))
}

/// RNG for block `block` of the named substream.
pub fn block_rng(root: u64, name: &str, block: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(root, name));
    rng.set_stream(block);
    rng
}

/// RNG for a named substream (single-stream use, e.g. validation draws).
pub fn stream_rng(root: u64, name: &str) -> ChaCha8Rng {
    block_rng(root, name, 0)
}

/// Running sums for a vector-valued integrand.
#[derive(Clone, Debug)]
pub struct Accumulator {
    pub count: u64,
    pub sum: Vec<f64>,
    pub sum_sq: Vec<f64>,
}

impl Accumulator {
    fn zero(outputs: usize) -> Self {
        Self {
            count: 0,
            sum: vec![0.0; outputs],
            sum_sq: vec![0.0; outputs],
        }
    }

    fn add_sample(&mut self, values: &[f64]) {
        self.count += 1;
        for (j, v) in values.iter().enumerate() {
            self.sum[j] += v;
            self.sum_sq[j] += v * v;
        }
    }

    fn merge(mut self, other: Accumulator) -> Accumulator {
        self.count += other.count;
        for j in 0..self.sum.len() {
            self.sum[j] += other.sum[j];
            self.sum_sq[j] += other.sum_sq[j];
        }
        self
    }
}

/// Mean and standard error of each output of a Monte Carlo run.
#[derive(Clone, Debug)]
pub struct McStats {
    pub samples: u64,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
}

impl McStats {
    fn from_accumulator(acc: Accumulator) -> Self {
        let n = acc.count as f64;
        let mean: Vec<f64> = acc.sum.iter().map(|s| s / n).collect();
        let stderr = acc
            .sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| {
                if acc.count < 2 {
                    return 0.0;
                }
                let var = (sq / n - m * m).max(0.0) * n / (n - 1.0);
                (var / n).sqrt()
            })
            .collect();
        Self {
            samples: acc.count,
            mean,
            stderr,
        }
    }
}

/// Pairwise merge in block order; the tree shape depends only on the length.
fn tree_merge(mut parts: Vec<Accumulator>, outputs: usize) -> Accumulator {
    if parts.is_empty() {
        return Accumulator::zero(outputs);
    }
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(a.merge(b)),
                None => next.push(a),
            }
        }
        parts = next;
    }
    parts.pop().unwrap()
}

fn run_block<S, I, F>(
    root: u64,
    name: &str,
    block: u64,
    len: usize,
    outputs: usize,
    init: &I,
    per_sample: &F,
) -> Accumulator
where
    I: Fn() -> S,
    F: Fn(&mut S, &mut ChaCha8Rng, &mut [f64]),
{
    let mut rng = block_rng(root, name, block);
    let mut acc = Accumulator::zero(outputs);
    let mut buf = vec![0.0; outputs];
    let mut state = init();
    for _ in 0..len {
        per_sample(&mut state, &mut rng, &mut buf);
        acc.add_sample(&buf);
    }
    acc
}

fn block_lengths(samples: usize) -> impl Iterator<Item = (u64, usize)> {
    let full = samples / BLOCK_SIZE;
    let rem = samples % BLOCK_SIZE;
    (0..full as u64)
        .map(|b| (b, BLOCK_SIZE))
        .chain((rem > 0).then_some((full as u64, rem)))
}

/// Like [`run`], with a per-block scratch state built by `init`; lets hot
/// loops reuse buffers without per-sample allocation.
pub fn run_with<S, I, F>(
    root: u64,
    name: &str,
    samples: usize,
    outputs: usize,
    init: I,
    per_sample: F,
) -> McStats
where
    I: Fn() -> S + Sync,
    F: Fn(&mut S, &mut ChaCha8Rng, &mut [f64]) + Sync,
{
    #[cfg(feature = "parallel")]
    let parts: Vec<Accumulator> = block_lengths(samples)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(b, len)| run_block(root, name, b, len, outputs, &init, &per_sample))
        .collect();
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Accumulator> = block_lengths(samples)
        .map(|(b, len)| run_block(root, name, b, len, outputs, &init, &per_sample))
        .collect();
    McStats::from_accumulator(tree_merge(parts, outputs))
}

/// Run `per_sample` for `samples` draws on the named substream and reduce.
///
/// `per_sample` fills one row of integrand outputs from the block RNG.
pub fn run<F>(root: u64, name: &str, samples: usize, outputs: usize, per_sample: F) -> McStats
where
    F: Fn(&mut ChaCha8Rng, &mut [f64]) + Sync,
{
    run_with(
        root,
        name,
        samples,
        outputs,
        || (),
        |(), rng, out| per_sample(rng, out),
    )
}

/// Sequential reference path; always compiled, used by the benchmarks to
/// compare against the rayon path.
pub fn run_serial_with<S, I, F>(
    root: u64,
    name: &str,
    samples: usize,
    outputs: usize,
    init: I,
    per_sample: F,
) -> McStats
where
    I: Fn() -> S,
    F: Fn(&mut S, &mut ChaCha8Rng, &mut [f64]),
{
    let parts: Vec<Accumulator> = block_lengths(samples)
        .map(|(b, len)| run_block(root, name, b, len, outputs, &init, &per_sample))
        .collect();
    McStats::from_accumulator(tree_merge(parts, outputs))
}

/// Sequential variant of [`run`].
pub fn run_serial<F>(
    root: u64,
    name: &str,
    samples: usize,
    outputs: usize,
    per_sample: F,
) -> McStats
where
    F: Fn(&mut ChaCha8Rng, &mut [f64]),
{
    run_serial_with(
        root,
        name,
        samples,
        outputs,
        || (),
        |(), rng, out| per_sample(rng, out),
    )
}
