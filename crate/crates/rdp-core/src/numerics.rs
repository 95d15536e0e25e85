//! Log-space numeric kernels shared by every dynamic program in this crate.
//!
//! Conventions:
//!
//! * Weights live in log space as plain `f64`. `f64::NEG_INFINITY` encodes an
//!   exactly-zero weight and is a legal value everywhere; `NaN` is never a
//!   legal weight and constructors reject it at the boundary.
//! * Proposal distributions live in linear space (nonnegative, summing to 1).
//! * All randomness flows through [`RdpRng`], a splittable deterministic
//!   generator: the same master seed yields the same stream on every platform,
//!   and children derived via [`RdpRng::split`] depend only on the parent's
//!   lineage and the label — not on how many draws happened in between — so
//!   per-node selections are independent of evaluation order.

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Errors raised by the numeric kernels.
#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    /// A reduction (logsumexp) was asked for over zero elements.
    #[error("empty reduction: logsumexp over zero elements is undefined")]
    EmptyReduction,
    /// Requested more top indices than there are weights.
    #[error("top-k selection of {k1} indices from {len} weights")]
    TopKTooLarge { k1: usize, len: usize },
    /// A weight vector contained NaN.
    #[error("weight vector contains NaN at position {index}")]
    NanWeight { index: usize },
    /// A weight vector contained a negative entry where a probability was required.
    #[error("negative weight {value} at position {index}")]
    NegativeWeight { index: usize, value: f64 },
    /// Tail sampling was requested but every index is already in the head.
    #[error("empty tail: all {len} indices are in the top-k head")]
    EmptyTail { len: usize },
    /// Tail sampling was requested but the tail carries zero probability mass.
    /// Callers should fall back to a pure top-k selection (K2 = 0).
    #[error("degenerate tail: tail probability mass is zero")]
    DegenerateTail,
}

/// log(sum(exp(xs))) with the usual max-shift for stability.
///
/// The result is always `>= max(xs)` and is `-inf` (never NaN) when every
/// input is `-inf`. An empty slice is an error.
pub fn logsumexp(xs: &[f64]) -> Result<f64, NumericsError> {
    if xs.is_empty() {
        return Err(NumericsError::EmptyReduction);
    }
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Indices of the `k1` largest weights, ordered by decreasing weight with
/// ties broken by ascending index. `k1 > weights.len()` is an error.
pub fn topk_indices(weights: &[f64], k1: usize) -> Result<Vec<usize>, NumericsError> {
    if k1 > weights.len() {
        return Err(NumericsError::TopKTooLarge { k1, len: weights.len() });
    }
    if let Some(index) = weights.iter().position(|w| w.is_nan()) {
        return Err(NumericsError::NanWeight { index });
    }
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        weights[b].total_cmp(&weights[a]).then_with(|| a.cmp(&b))
    });
    order.truncate(k1);
    Ok(order)
}

/// Draw `k2` i.i.d. indices from the tail of a proposal distribution.
///
/// `weights` is a linear-space distribution over all indices and `head` the
/// already-selected top-k indices. Each draw comes from the tail distribution
/// renormalized to sum to one, and is returned together with its renormalized
/// probability (the quantity importance weights divide by). Duplicates are
/// retained. With `k2 == 0` the result is empty; otherwise an empty tail or a
/// tail of zero mass is an error so callers can fall back to `k2 = 0`.
pub fn sample_tail(
    weights: &[f64],
    head: &[usize],
    k2: usize,
    rng: &mut RdpRng,
) -> Result<Vec<(usize, f64)>, NumericsError> {
    if let Some(index) = weights.iter().position(|w| w.is_nan()) {
        return Err(NumericsError::NanWeight { index });
    }
    if let Some(index) = weights.iter().position(|w| *w < 0.0) {
        return Err(NumericsError::NegativeWeight { index, value: weights[index] });
    }
    if k2 == 0 {
        return Ok(Vec::new());
    }
    let mut in_head = vec![false; weights.len()];
    for &i in head {
        in_head[i] = true;
    }
    let tail: Vec<usize> = (0..weights.len()).filter(|&i| !in_head[i]).collect();
    if tail.is_empty() {
        return Err(NumericsError::EmptyTail { len: weights.len() });
    }
    let mut cumulative = Vec::with_capacity(tail.len());
    let mut mass = 0.0;
    for &i in &tail {
        mass += weights[i];
        cumulative.push(mass);
    }
    if mass <= 0.0 {
        return Err(NumericsError::DegenerateTail);
    }
    let mut draws = Vec::with_capacity(k2);
    for _ in 0..k2 {
        let u = rng.uniform() * mass;
        // First strictly-greater cumulative weight; zero-weight tail entries
        // share their predecessor's cumulative value and can never be hit.
        let pos = cumulative.partition_point(|&c| c <= u).min(tail.len() - 1);
        let index = tail[pos];
        draws.push((index, weights[index] / mass));
    }
    Ok(draws)
}

/// `n` independent standard Gumbel draws: `-ln(-ln(u))` with `u ~ U(0, 1)`.
pub fn gumbel_noise(rng: &mut RdpRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gumbel()).collect()
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic, splittable random generator.
///
/// A `RdpRng` is a ChaCha8 stream identified by a 64-bit lineage value.
/// [`RdpRng::split`] derives a child lineage from `(parent lineage, label)`
/// alone, so a node labelled `t` receives the same stream no matter when or
/// on which worker it is expanded.
#[derive(Debug, Clone)]
pub struct RdpRng {
    lineage: u64,
    stream: ChaCha8Rng,
}

impl RdpRng {
    /// Root generator for a master seed.
    pub fn from_seed(seed: u64) -> Self {
        let lineage = splitmix64(seed);
        RdpRng { lineage, stream: ChaCha8Rng::seed_from_u64(lineage) }
    }

    /// Child generator for `label`, independent of this generator's draw
    /// position and of children with other labels.
    pub fn split(&self, label: u64) -> Self {
        let lineage = splitmix64(self.lineage ^ splitmix64(label.wrapping_add(0x2545_F491_4F6C_DD1D)));
        RdpRng { lineage, stream: ChaCha8Rng::seed_from_u64(lineage) }
    }

    /// Uniform draw in the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        loop {
            let u = (self.stream.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            if u > 0.0 {
                return u;
            }
        }
    }

    /// Standard normal draw.
    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.stream)
    }

    /// Standard Gumbel draw.
    pub fn gumbel(&mut self) -> f64 {
        -(-self.uniform().ln()).ln()
    }

    /// Raw 64-bit draw.
    pub fn next_u64(&mut self) -> u64 {
        self.stream.next_u64()
    }
}

/// The scalar number type the dynamic programs are written against.
///
/// Implemented by `f64` (plain evaluation, used for Monte-Carlo replication)
/// and by the tape variable in [`crate::autodiff`] (reverse-mode
/// differentiation). Writing each algorithm once against this trait keeps the
/// evaluated and differentiated paths identical by construction.
pub trait Scalar: Copy {
    /// Current primal value.
    fn value(self) -> f64;
    fn add(self, other: Self) -> Self;
    fn sub(self, other: Self) -> Self;
    fn mul(self, other: Self) -> Self;
    fn div(self, other: Self) -> Self;
    fn neg(self) -> Self;
    fn ln(self) -> Self;
    fn exp(self) -> Self;
    fn add_const(self, c: f64) -> Self;
    fn mul_const(self, c: f64) -> Self;
    /// Fused `self + other + c` — a single tape node, so weighted and
    /// unweighted log-space accumulations cost the same.
    fn add_offset(self, other: Self, c: f64) -> Self;
    /// Clamp into `[lo, hi]`; the gradient passes through unchanged strictly
    /// inside the interval and is zero on the clamped branches.
    fn clamp_to(self, lo: f64, hi: f64) -> Self;
    /// A constant with value `c` living in the same world as `self` (plain
    /// value, or fresh leaf on `self`'s tape).
    fn constant_like(self, c: f64) -> Self;
    /// log-sum-exp over a nonempty slice.
    ///
    /// # Panics
    /// Panics on an empty slice; dynamic programs guarantee nonempty active
    /// sets before reducing.
    fn logsumexp_slice(xs: &[Self]) -> Self;
}

impl Scalar for f64 {
    fn value(self) -> f64 {
        self
    }
    fn add(self, other: Self) -> Self {
        self + other
    }
    fn sub(self, other: Self) -> Self {
        self - other
    }
    fn mul(self, other: Self) -> Self {
        self * other
    }
    fn div(self, other: Self) -> Self {
        self / other
    }
    fn neg(self) -> Self {
        -self
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn add_const(self, c: f64) -> Self {
        self + c
    }
    fn mul_const(self, c: f64) -> Self {
        self * c
    }
    fn add_offset(self, other: Self, c: f64) -> Self {
        self + other + c
    }
    fn clamp_to(self, lo: f64, hi: f64) -> Self {
        self.clamp(lo, hi)
    }
    fn constant_like(self, c: f64) -> Self {
        c
    }
    fn logsumexp_slice(xs: &[Self]) -> Self {
        logsumexp(xs).expect("logsumexp over an empty active set")
    }
}
