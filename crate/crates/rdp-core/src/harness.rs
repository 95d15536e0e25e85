//! Evaluation harness: simulated instances with controlled tail behavior,
//! replicated estimator evaluation (bias / variance / MSE against exact
//! references), and the standalone sum-and-sample estimator with its
//! closed-form variance.
//!
//! Instances are simulated by drawing standard-normal logits and dividing
//! them by a per-instance temperature; the temperature is calibrated at
//! construction so the mean conditional distribution hits a target
//! normalized entropy (0.9 dense, 0.6 intermediate, 0.3 long-tail), and the
//! calibrated value is carried on the instance for reporting. Lower
//! temperature concentrates mass; longer tails mean the head of the
//! distribution misses more.

use rayon::prelude::*;
use thiserror::Error;

use crate::chain::{
    exact_entropy, exact_forward, randomized_entropy, randomized_forward, ChainError,
    ChainPotentials, IndexSelection,
};
use crate::hypertree::{
    exact_inside, num_spans, randomized_inside, HypertreePotentials, InsideBlocks, SpanSelection,
    TreeError,
};
use crate::numerics::{NumericsError, RdpRng};
use crate::proposals::ProposalError;
use crate::proposals::Proposal;

/// Exact chain references are refused above this state count.
pub const CHAIN_EXACT_STATE_CAP: usize = 5000;
/// Exact tree references are refused above this state count (the inside
/// pass is cubic in states).
pub const TREE_EXACT_STATE_CAP: usize = 300;

/// Rows subsampled per calibration objective evaluation.
const CALIBRATION_ROW_CAP: usize = 256;
/// Bisection iterations for temperature calibration.
const CALIBRATION_ITERS: usize = 80;
const CALIBRATION_TEMP_LO: f64 = 1e-4;
const CALIBRATION_TEMP_HI: f64 = 1e4;

/// Errors from harness simulation and evaluation.
#[derive(Debug, Error, PartialEq)]
pub enum HarnessError {
    #[error("summands must be sorted descending (violated at index {index})")]
    NotSorted { index: usize },
    #[error("summand {index} is not positive: {value}")]
    NonPositiveSummand { index: usize, value: f64 },
    #[error("head size {k1} exceeds the {len} summands")]
    HeadTooLarge { k1: usize, len: usize },
    #[error("cannot draw tail samples from an empty tail")]
    EmptyTailWithSamples,
    #[error("tail proposal holds {got} weights, tail holds {expected}")]
    TailProposalLength { expected: usize, got: usize },
    #[error("tail proposal sums to {sum}, expected 1")]
    TailProposalNotNormalized { sum: f64 },
    #[error("tail proposal weight {index} is invalid: {value}")]
    TailProposalWeight { index: usize, value: f64 },
    #[error("evaluation needs at least one run")]
    EmptyRuns,
    #[error("exact reference refused at {states} states (cap {cap}); use a smaller instance")]
    ExactReferenceTooLarge { states: usize, cap: usize },
    #[error("worker pool: {0}")]
    WorkerPool(String),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Proposal(#[from] ProposalError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Tail-heaviness regimes for simulated instances, defined by target
/// normalized entropy of the mean conditional distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TailProfile {
    Dense,
    Intermediate,
    LongTail,
}

impl TailProfile {
    pub const ALL: [TailProfile; 3] =
        [TailProfile::Dense, TailProfile::Intermediate, TailProfile::LongTail];

    pub fn name(self) -> &'static str {
        match self {
            TailProfile::Dense => "dense",
            TailProfile::Intermediate => "intermediate",
            TailProfile::LongTail => "long_tail",
        }
    }

    /// Target normalized entropy of the mean conditional distribution.
    pub fn target_normalized_entropy(self) -> f64 {
        match self {
            TailProfile::Dense => 0.9,
            TailProfile::Intermediate => 0.6,
            TailProfile::LongTail => 0.3,
        }
    }

    /// Parse a profile name as it appears in configs and CSV.
    pub fn parse(name: &str) -> Option<TailProfile> {
        TailProfile::ALL.into_iter().find(|p| p.name() == name)
    }
}

/// Normalized entropy of `softmax(logits / temperature)`, averaged over the
/// given rows; rows beyond [`CALIBRATION_ROW_CAP`] are subsampled at a fixed
/// stride so calibration stays cheap and deterministic.
fn mean_normalized_entropy(rows: &[&[f64]], temperature: f64) -> f64 {
    let stride = rows.len().div_ceil(CALIBRATION_ROW_CAP);
    let mut total = 0.0;
    let mut count = 0usize;
    for row in rows.iter().step_by(stride) {
        let n = row.len();
        if n < 2 {
            continue;
        }
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / temperature));
        let mut sum = 0.0;
        let mut weighted = 0.0;
        for &z in *row {
            let e = (z / temperature - max).exp();
            sum += e;
            weighted += e * (z / temperature - max);
        }
        // H = log sum - (1/sum) * sum_i e_i * shifted_logit_i.
        let entropy = sum.ln() - weighted / sum;
        total += entropy / (n as f64).ln();
        count += 1;
    }
    if count == 0 {
        // Single-state rows only: entropy is identically zero and any
        // temperature is acceptable; report the target-neutral value 1.
        return 1.0;
    }
    total / count as f64
}

/// Bisect for the temperature whose mean normalized entropy hits `target`.
/// The objective is increasing in temperature, so plain bisection converges.
fn calibrate_temperature(rows: &[&[f64]], target: f64) -> f64 {
    let (mut lo, mut hi) = (CALIBRATION_TEMP_LO, CALIBRATION_TEMP_HI);
    for _ in 0..CALIBRATION_ITERS {
        let mid = (lo * hi).sqrt();
        if mean_normalized_entropy(rows, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo * hi).sqrt()
}

/// A simulated chain instance with its calibration metadata.
#[derive(Debug, Clone)]
pub struct SimulatedChain {
    pub potentials: ChainPotentials<f64>,
    pub profile: TailProfile,
    pub temperature: f64,
    pub seed: u64,
}

/// Simulate a chain whose conditional distributions match `profile`:
/// standard-normal logits divided by a calibrated temperature.
pub fn simulate_chain(
    n: usize,
    t: usize,
    profile: TailProfile,
    seed: u64,
) -> Result<SimulatedChain, HarnessError> {
    let mut rng = RdpRng::from_seed(seed);
    let init: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
    let pairwise: Vec<Vec<f64>> = (0..t.saturating_sub(1))
        .map(|_| (0..n * n).map(|_| rng.standard_normal()).collect())
        .collect();
    let mut rows: Vec<&[f64]> = vec![&init];
    for matrix in &pairwise {
        rows.extend(matrix.chunks(n));
    }
    let temperature = if n < 2 {
        1.0
    } else {
        calibrate_temperature(&rows, profile.target_normalized_entropy())
    };
    let potentials = ChainPotentials::new(
        init.iter().map(|z| z / temperature).collect(),
        pairwise
            .iter()
            .map(|m| m.iter().map(|z| z / temperature).collect())
            .collect(),
    )?;
    Ok(SimulatedChain { potentials, profile, temperature, seed })
}

/// A simulated hypertree instance with its calibration metadata.
#[derive(Debug, Clone)]
pub struct SimulatedTree {
    pub potentials: HypertreePotentials<f64>,
    pub profile: TailProfile,
    pub temperature: f64,
    pub seed: u64,
}

/// Simulate a hypertree whose per-span label distributions match `profile`.
pub fn simulate_tree(
    n: usize,
    t: usize,
    profile: TailProfile,
    seed: u64,
) -> Result<SimulatedTree, HarnessError> {
    let mut rng = RdpRng::from_seed(seed);
    let spans: Vec<Vec<f64>> = (0..num_spans(t))
        .map(|_| (0..n).map(|_| rng.standard_normal()).collect())
        .collect();
    let rows: Vec<&[f64]> = spans.iter().map(|c| c.as_slice()).collect();
    let temperature = if n < 2 {
        1.0
    } else {
        calibrate_temperature(&rows, profile.target_normalized_entropy())
    };
    let potentials = HypertreePotentials::new(
        t,
        n,
        spans
            .iter()
            .map(|c| c.iter().map(|z| z / temperature).collect())
            .collect(),
    )?;
    Ok(SimulatedTree { potentials, profile, temperature, seed })
}

/// Chain whose outgoing log-potentials factor as `f_t(j) + g_t(i)`. Under
/// such potentials the per-state summand measure is the same for every
/// target state, so the oracle proposal is exact per target and the
/// randomized forward pass has zero variance.
pub fn simulate_rank1_chain(
    n: usize,
    t: usize,
    seed: u64,
) -> Result<ChainPotentials<f64>, HarnessError> {
    let mut rng = RdpRng::from_seed(seed);
    let init: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
    let mut pairwise = Vec::with_capacity(t.saturating_sub(1));
    for _ in 0..t.saturating_sub(1) {
        let f: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
        let g: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
        let mut matrix = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                matrix.push(f[j] + g[i]);
            }
        }
        pairwise.push(matrix);
    }
    Ok(ChainPotentials::new(init, pairwise)?)
}

/// Per-node local proposal signal for a chain: each state's incoming
/// potential mass (for the first node, its initial mass). Scale per node is
/// irrelevant — proposal construction renormalizes.
pub fn chain_local_signal(potentials: &ChainPotentials<f64>) -> Vec<Vec<f64>> {
    let n = potentials.num_states();
    let t_len = potentials.seq_len();
    let mut nodes = Vec::with_capacity(t_len);
    let init_max =
        (0..n).map(|i| potentials.init_at(i)).fold(f64::NEG_INFINITY, f64::max);
    nodes.push((0..n).map(|i| (potentials.init_at(i) - init_max).exp()).collect());
    for t in 1..t_len {
        let max = (0..n * n)
            .map(|e| potentials.pairwise_at(t - 1, e / n, e % n))
            .fold(f64::NEG_INFINITY, f64::max);
        let column: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| (potentials.pairwise_at(t - 1, j, i) - max).exp()).sum())
            .collect();
        nodes.push(column);
    }
    nodes
}

/// Per-span local proposal signal for a hypertree: each label's own span
/// potential mass.
pub fn tree_local_signal(potentials: &HypertreePotentials<f64>) -> Vec<Vec<f64>> {
    let n = potentials.num_states();
    let t_len = potentials.seq_len();
    let mut nodes = Vec::with_capacity(num_spans(t_len));
    for i in 0..t_len {
        for j in i..t_len {
            let max =
                (0..n).map(|k| potentials.span_at(i, j, k)).fold(f64::NEG_INFINITY, f64::max);
            nodes.push((0..n).map(|k| (potentials.span_at(i, j, k) - max).exp()).collect());
        }
    }
    nodes
}

/// Global proposal signal: the average of the per-node normalized local
/// signals, one weight per state.
pub fn global_signal(local: &[Vec<f64>]) -> Vec<f64> {
    let n = local.first().map_or(0, Vec::len);
    let mut global = vec![0.0; n];
    for node in local {
        let mass: f64 = node.iter().sum();
        for (g, &w) in global.iter_mut().zip(node) {
            *g += w / mass;
        }
    }
    for g in &mut global {
        *g /= local.len() as f64;
    }
    global
}

/// Sum-and-sample estimate of `sum(a)` for a descending positive list:
/// the head `a[..k1]` enters exactly; `k2` i.i.d. draws from the tail
/// proposal `q` estimate the rest, each weighted by `1 / (k2 * q)`.
pub fn tail_sum_estimate(
    a: &[f64],
    k1: usize,
    k2: usize,
    q: &[f64],
    rng: &mut RdpRng,
) -> Result<f64, HarnessError> {
    validate_summands(a, k1)?;
    let tail = &a[k1..];
    validate_tail_proposal(tail, q)?;
    let head: f64 = a[..k1].iter().sum();
    if k2 == 0 {
        return Ok(head);
    }
    if tail.is_empty() {
        return Err(HarnessError::EmptyTailWithSamples);
    }
    let mut cumulative = Vec::with_capacity(q.len());
    let mut acc = 0.0;
    for &w in q {
        acc += w;
        cumulative.push(acc);
    }
    let mut tail_estimate = 0.0;
    for _ in 0..k2 {
        let u = rng.uniform() * acc;
        let idx = cumulative.partition_point(|&c| c <= u).min(q.len() - 1);
        tail_estimate += tail[idx] / q[idx];
    }
    Ok(head + tail_estimate / k2 as f64)
}

/// Closed-form variance of the single-sample (`k2 = 1`) tail estimator:
/// `sum_i a_i^2 / q_i - (sum_i a_i)^2` over the tail. Divide by `k2` for
/// `k2` i.i.d. draws. A zero-probability tail entry with positive mass
/// yields infinity.
pub fn analytic_tail_variance(a: &[f64], k1: usize, q: &[f64]) -> Result<f64, HarnessError> {
    validate_summands(a, k1)?;
    let tail = &a[k1..];
    validate_tail_proposal(tail, q)?;
    let second: f64 = tail.iter().zip(q).map(|(&ai, &qi)| ai * ai / qi).sum();
    let first: f64 = tail.iter().sum();
    Ok(second - first * first)
}

fn validate_summands(a: &[f64], k1: usize) -> Result<(), HarnessError> {
    if k1 > a.len() {
        return Err(HarnessError::HeadTooLarge { k1, len: a.len() });
    }
    for (index, &v) in a.iter().enumerate() {
        if !(v > 0.0) {
            return Err(HarnessError::NonPositiveSummand { index, value: v });
        }
        if index > 0 && v > a[index - 1] {
            return Err(HarnessError::NotSorted { index });
        }
    }
    Ok(())
}

fn validate_tail_proposal(tail: &[f64], q: &[f64]) -> Result<(), HarnessError> {
    if q.len() != tail.len() {
        return Err(HarnessError::TailProposalLength { expected: tail.len(), got: q.len() });
    }
    let mut sum = 0.0;
    for (index, &w) in q.iter().enumerate() {
        if w.is_nan() || w < 0.0 {
            return Err(HarnessError::TailProposalWeight { index, value: w });
        }
        sum += w;
    }
    if !tail.is_empty() && (sum - 1.0).abs() > 1e-9 {
        return Err(HarnessError::TailProposalNotNormalized { sum });
    }
    Ok(())
}

/// Which scalar summary a chain evaluation estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantity {
    LogPartition,
    Entropy,
}

impl Quantity {
    pub fn name(self) -> &'static str {
        match self {
            Quantity::LogPartition => "log_partition",
            Quantity::Entropy => "entropy",
        }
    }
}

/// Replication settings shared by all evaluations.
#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub k1: usize,
    pub k2: usize,
    pub runs: usize,
    pub seed: u64,
    /// Worker threads; `None` uses the global pool. Results are identical
    /// for every value — replicate streams are split by index.
    pub jobs: Option<usize>,
}

/// Bias / variance / MSE of a replicated estimator against its exact
/// reference. `mse = bias^2 + variance` up to floating-point rounding
/// (population statistics over the replicates).
#[derive(Debug, Clone)]
pub struct EstimateReport {
    pub exact: f64,
    pub replicates: Vec<f64>,
    pub bias: f64,
    pub variance: f64,
    pub mse: f64,
    pub k1: usize,
    pub k2: usize,
    pub proposal: String,
    pub seed: u64,
}

impl EstimateReport {
    fn from_replicates(
        exact: f64,
        replicates: Vec<f64>,
        proposal: &str,
        config: &EvalConfig,
    ) -> Self {
        let runs = replicates.len() as f64;
        let mean = replicates.iter().sum::<f64>() / runs;
        let variance = replicates.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / runs;
        let mse = replicates.iter().map(|e| (e - exact) * (e - exact)).sum::<f64>() / runs;
        EstimateReport {
            exact,
            replicates,
            bias: mean - exact,
            variance,
            mse,
            k1: config.k1,
            k2: config.k2,
            proposal: proposal.to_string(),
            seed: config.seed,
        }
    }
}

/// Run `runs` independent replicates of `body`, optionally on a dedicated
/// worker pool. Replicate `r` always receives the stream split at `r`, so
/// the result vector is independent of worker count and scheduling.
fn run_replicates<F>(
    runs: usize,
    seed: u64,
    jobs: Option<usize>,
    body: F,
) -> Result<Vec<f64>, HarnessError>
where
    F: Fn(RdpRng) -> Result<f64, HarnessError> + Sync,
{
    if runs == 0 {
        return Err(HarnessError::EmptyRuns);
    }
    let master = RdpRng::from_seed(seed);
    let work = || {
        (0..runs)
            .into_par_iter()
            .map(|r| body(master.split(r as u64)))
            .collect::<Result<Vec<f64>, HarnessError>>()
    };
    match jobs {
        None => work(),
        Some(threads) => rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| HarnessError::WorkerPool(e.to_string()))?
            .install(work),
    }
}

/// Replicated evaluation of a chain quantity against its exact reference.
pub fn evaluate_chain(
    potentials: &ChainPotentials<f64>,
    quantity: Quantity,
    proposal: &Proposal,
    proposal_name: &str,
    config: &EvalConfig,
) -> Result<EstimateReport, HarnessError> {
    if potentials.num_states() > CHAIN_EXACT_STATE_CAP {
        return Err(HarnessError::ExactReferenceTooLarge {
            states: potentials.num_states(),
            cap: CHAIN_EXACT_STATE_CAP,
        });
    }
    let exact = match quantity {
        Quantity::LogPartition => exact_forward(potentials)?.log_z,
        Quantity::Entropy => exact_entropy(potentials)?,
    };
    let replicates = run_replicates(config.runs, config.seed, config.jobs, |rng| {
        let selection = IndexSelection::from_proposal(proposal, config.k1, config.k2, &rng)?;
        let forward = randomized_forward(potentials, &selection)?;
        Ok(match quantity {
            Quantity::LogPartition => forward.log_z,
            Quantity::Entropy => randomized_entropy(potentials, &selection, &forward)?,
        })
    })?;
    Ok(EstimateReport::from_replicates(exact, replicates, proposal_name, config))
}

/// Replicated evaluation of a hypertree log-partition against its exact
/// reference.
pub fn evaluate_tree(
    potentials: &HypertreePotentials<f64>,
    proposal: &Proposal,
    proposal_name: &str,
    blocks: InsideBlocks,
    config: &EvalConfig,
) -> Result<EstimateReport, HarnessError> {
    if potentials.num_states() > TREE_EXACT_STATE_CAP {
        return Err(HarnessError::ExactReferenceTooLarge {
            states: potentials.num_states(),
            cap: TREE_EXACT_STATE_CAP,
        });
    }
    let exact = exact_inside(potentials)?.log_z;
    let seq_len = potentials.seq_len();
    let replicates = run_replicates(config.runs, config.seed, config.jobs, |rng| {
        let selection =
            SpanSelection::from_proposal(proposal, seq_len, config.k1, config.k2, &rng)?;
        Ok(randomized_inside(potentials, &selection, blocks)?.log_z)
    })?;
    Ok(EstimateReport::from_replicates(exact, replicates, proposal_name, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proposals::{local_global_proposal, oracle_proposal, uniform_proposal};
    use approx::assert_relative_eq;

    #[test]
    fn oracle_tail_proposal_makes_the_sum_estimate_exact() {
        // a = [4, 3, 2, 1], head 2: with q proportional to the tail, each
        // draw contributes the full tail sum, so the estimate is exactly 10.
        let a = [4.0, 3.0, 2.0, 1.0];
        let q = [2.0 / 3.0, 1.0 / 3.0];
        for seed in 0..20 {
            let mut rng = RdpRng::from_seed(seed);
            let estimate = tail_sum_estimate(&a, 2, 1, &q, &mut rng).unwrap();
            assert_relative_eq!(estimate, 10.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn uniform_tail_estimate_hits_both_outcomes_and_the_right_mean() {
        let a = [2.0, 1.0];
        let q = [0.5, 0.5];
        let mut rng = RdpRng::from_seed(7);
        let mut sum = 0.0;
        let runs = 4000;
        for _ in 0..runs {
            let estimate = tail_sum_estimate(&a, 0, 1, &q, &mut rng).unwrap();
            assert!(
                (estimate - 4.0).abs() < 1e-12 || (estimate - 2.0).abs() < 1e-12,
                "unexpected estimate {estimate}"
            );
            sum += estimate;
        }
        // Mean 3 with per-draw variance 1: 3 standard errors.
        let se = (1.0 / runs as f64).sqrt();
        assert!((sum / runs as f64 - 3.0).abs() < 3.0 * se);
    }

    #[test]
    fn full_head_is_the_exact_sum() {
        let a = [4.0, 3.0, 2.0, 1.0];
        let mut rng = RdpRng::from_seed(1);
        assert_relative_eq!(
            tail_sum_estimate(&a, 4, 0, &[], &mut rng).unwrap(),
            10.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn estimator_input_validation() {
        let mut rng = RdpRng::from_seed(1);
        assert_eq!(
            tail_sum_estimate(&[1.0, 2.0], 0, 1, &[0.5, 0.5], &mut rng).unwrap_err(),
            HarnessError::NotSorted { index: 1 }
        );
        assert_eq!(
            tail_sum_estimate(&[2.0, 0.0], 0, 1, &[0.5, 0.5], &mut rng).unwrap_err(),
            HarnessError::NonPositiveSummand { index: 1, value: 0.0 }
        );
        assert_eq!(
            tail_sum_estimate(&[2.0, 1.0], 3, 0, &[], &mut rng).unwrap_err(),
            HarnessError::HeadTooLarge { k1: 3, len: 2 }
        );
        assert_eq!(
            tail_sum_estimate(&[2.0, 1.0], 2, 1, &[], &mut rng).unwrap_err(),
            HarnessError::EmptyTailWithSamples
        );
        assert!(matches!(
            tail_sum_estimate(&[2.0, 1.0], 0, 1, &[0.9, 0.2], &mut rng).unwrap_err(),
            HarnessError::TailProposalNotNormalized { .. }
        ));
    }

    #[test]
    fn analytic_variance_of_the_uniform_proposal() {
        // sum a_i^2 / q_i - (sum a_i)^2 = (8 + 2) - 9 = 1.
        let v = analytic_tail_variance(&[2.0, 1.0], 0, &[0.5, 0.5]).unwrap();
        assert_relative_eq!(v, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn analytic_variance_vanishes_for_the_oracle_proposal() {
        let v = analytic_tail_variance(&[2.0, 1.0], 0, &[2.0 / 3.0, 1.0 / 3.0]).unwrap();
        assert_relative_eq!(v, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn analytic_variance_matches_simulation() {
        // Random 20-element descending list, random tail proposal, head 5:
        // empirical variance at 2e5 replicates within 5%.
        let mut rng = RdpRng::from_seed(42);
        let mut a: Vec<f64> = (0..20).map(|_| rng.uniform() + 0.1).collect();
        a.sort_by(|x, y| y.total_cmp(x));
        let raw: Vec<f64> = (0..15).map(|_| rng.uniform() + 0.05).collect();
        let mass: f64 = raw.iter().sum();
        let q: Vec<f64> = raw.iter().map(|w| w / mass).collect();
        let analytic = analytic_tail_variance(&a, 5, &q).unwrap();
        let replicates = 200_000;
        let mut estimates = Vec::with_capacity(replicates);
        for _ in 0..replicates {
            estimates.push(tail_sum_estimate(&a, 5, 1, &q, &mut rng).unwrap());
        }
        let mean = estimates.iter().sum::<f64>() / replicates as f64;
        let empirical =
            estimates.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / replicates as f64;
        assert!(
            (empirical - analytic).abs() / analytic < 0.05,
            "empirical {empirical} vs analytic {analytic}"
        );
    }

    #[test]
    fn simulation_is_deterministic_in_the_seed() {
        let a = simulate_chain(12, 4, TailProfile::LongTail, 9).unwrap();
        let b = simulate_chain(12, 4, TailProfile::LongTail, 9).unwrap();
        assert_eq!(a.temperature, b.temperature);
        for i in 0..12 {
            assert_eq!(a.potentials.init_at(i), b.potentials.init_at(i));
        }
        for t in 0..3 {
            for j in 0..12 {
                for i in 0..12 {
                    assert_eq!(a.potentials.pairwise_at(t, j, i), b.potentials.pairwise_at(t, j, i));
                }
            }
        }
    }

    #[test]
    fn profiles_land_in_their_entropy_bands() {
        for profile in TailProfile::ALL {
            let sim = simulate_chain(2000, 3, profile, 5).unwrap();
            let n = 2000;
            // Re-measure the mean normalized conditional entropy of the
            // calibrated potentials directly.
            let mut rows: Vec<Vec<f64>> =
                vec![(0..n).map(|i| sim.potentials.init_at(i)).collect()];
            for t in 0..2 {
                for j in 0..n {
                    rows.push((0..n).map(|i| sim.potentials.pairwise_at(t, j, i)).collect());
                }
            }
            let views: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            let measured = mean_normalized_entropy(&views, 1.0);
            let target = profile.target_normalized_entropy();
            assert!(
                (measured - target).abs() < 0.05,
                "{}: measured {measured} vs target {target}",
                profile.name()
            );
        }
        let dense = simulate_chain(2000, 3, TailProfile::Dense, 5).unwrap();
        let long = simulate_chain(2000, 3, TailProfile::LongTail, 5).unwrap();
        assert!(dense.temperature > long.temperature);
    }

    #[test]
    fn tree_profiles_land_in_their_entropy_bands() {
        for profile in TailProfile::ALL {
            let sim = simulate_tree(500, 4, profile, 6).unwrap();
            let n = 500;
            let mut rows = Vec::new();
            for i in 0..4 {
                for j in i..4 {
                    rows.push((0..n).map(|k| sim.potentials.span_at(i, j, k)).collect::<Vec<_>>());
                }
            }
            let views: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            let measured = mean_normalized_entropy(&views, 1.0);
            let target = profile.target_normalized_entropy();
            assert!(
                (measured - target).abs() < 0.05,
                "{}: measured {measured} vs target {target}",
                profile.name()
            );
        }
    }

    #[test]
    fn single_state_instances_are_accepted() {
        let sim = simulate_chain(1, 4, TailProfile::Dense, 2).unwrap();
        assert_eq!(sim.temperature, 1.0);
        let tree = simulate_tree(1, 3, TailProfile::LongTail, 2).unwrap();
        assert_eq!(tree.temperature, 1.0);
    }

    #[test]
    fn full_coverage_evaluation_has_zero_error() {
        let sim = simulate_chain(10, 4, TailProfile::Intermediate, 3).unwrap();
        let proposal = uniform_proposal(10, 4).unwrap();
        let config = EvalConfig { k1: 10, k2: 0, runs: 5, seed: 1, jobs: None };
        for quantity in [Quantity::LogPartition, Quantity::Entropy] {
            let report =
                evaluate_chain(&sim.potentials, quantity, &proposal, "uniform", &config).unwrap();
            assert!(report.mse < 1e-20, "{}: mse {}", quantity.name(), report.mse);
        }
        let tree = simulate_tree(6, 4, TailProfile::Intermediate, 3).unwrap();
        let tree_proposal = uniform_proposal(6, num_spans(4)).unwrap();
        let config = EvalConfig { k1: 6, k2: 0, runs: 5, seed: 1, jobs: None };
        let report = evaluate_tree(
            &tree.potentials,
            &tree_proposal,
            "uniform",
            InsideBlocks::FullCross,
            &config,
        )
        .unwrap();
        assert!(report.mse < 1e-20, "tree mse {}", report.mse);
    }

    #[test]
    fn mse_decomposes_into_bias_and_variance() {
        let sim = simulate_chain(40, 5, TailProfile::LongTail, 8).unwrap();
        let proposal = uniform_proposal(40, 5).unwrap();
        let config = EvalConfig { k1: 7, k2: 1, runs: 200, seed: 4, jobs: None };
        let report = evaluate_chain(
            &sim.potentials,
            Quantity::LogPartition,
            &proposal,
            "uniform",
            &config,
        )
        .unwrap();
        assert_relative_eq!(
            report.mse,
            report.bias * report.bias + report.variance,
            epsilon = 1e-9
        );
        assert_eq!(report.replicates.len(), 200);
    }

    #[test]
    fn reports_are_independent_of_worker_count() {
        let sim = simulate_chain(30, 4, TailProfile::Intermediate, 11).unwrap();
        let proposal = uniform_proposal(30, 4).unwrap();
        let base = EvalConfig { k1: 5, k2: 2, runs: 64, seed: 9, jobs: Some(1) };
        let wide = EvalConfig { jobs: Some(4), ..base.clone() };
        let a = evaluate_chain(&sim.potentials, Quantity::Entropy, &proposal, "uniform", &base)
            .unwrap();
        let b = evaluate_chain(&sim.potentials, Quantity::Entropy, &proposal, "uniform", &wide)
            .unwrap();
        assert_eq!(a.replicates, b.replicates);
    }

    #[test]
    fn pure_head_truncation_underestimates_pathwise() {
        // TopK (k2 = 0) restricts every sum to a subset of nonnegative
        // summands: each replicate sits at or below the exact value, so the
        // bias is nonpositive for both quantities on every profile.
        for profile in TailProfile::ALL {
            let sim = simulate_chain(60, 5, profile, 13).unwrap();
            let proposal = uniform_proposal(60, 5).unwrap();
            let config = EvalConfig { k1: 12, k2: 0, runs: 20, seed: 2, jobs: None };
            let logz = evaluate_chain(
                &sim.potentials,
                Quantity::LogPartition,
                &proposal,
                "uniform",
                &config,
            )
            .unwrap();
            for &r in &logz.replicates {
                assert!(r <= logz.exact + 1e-12);
            }
            assert!(logz.bias <= 0.0);
            let entropy =
                evaluate_chain(&sim.potentials, Quantity::Entropy, &proposal, "uniform", &config)
                    .unwrap();
            assert!(entropy.bias <= 0.0, "{}: entropy bias {}", profile.name(), entropy.bias);
        }
    }

    #[test]
    fn oracle_proposal_has_zero_variance_on_factored_chains() {
        let potentials = simulate_rank1_chain(50, 5, 21).unwrap();
        let forward = exact_forward(&potentials).unwrap();
        let proposal = oracle_proposal(&potentials, &forward).unwrap();
        let config = EvalConfig { k1: 3, k2: 2, runs: 20, seed: 6, jobs: None };
        let report = evaluate_chain(
            &potentials,
            Quantity::LogPartition,
            &proposal,
            "oracle",
            &config,
        )
        .unwrap();
        for &r in &report.replicates {
            assert!(
                (r - report.exact).abs() < 1e-8,
                "replicate {r} vs exact {}",
                report.exact
            );
        }
    }

    #[test]
    fn local_global_signals_build_valid_proposals() {
        let sim = simulate_chain(25, 4, TailProfile::LongTail, 17).unwrap();
        let local = chain_local_signal(&sim.potentials);
        assert_eq!(local.len(), 4);
        let global = global_signal(&local);
        assert_eq!(global.len(), 25);
        let proposal = local_global_proposal(&local, &global, 0.5).unwrap();
        assert_eq!(proposal.num_nodes(), 4);

        let tree = simulate_tree(10, 4, TailProfile::LongTail, 17).unwrap();
        let local = tree_local_signal(&tree.potentials);
        assert_eq!(local.len(), num_spans(4));
        let proposal = local_global_proposal(&local, &global_signal(&local), 0.5).unwrap();
        assert_eq!(proposal.num_nodes(), num_spans(4));
    }

    #[test]
    fn oversized_exact_references_are_refused() {
        let big_chain = ChainPotentials::uniform(CHAIN_EXACT_STATE_CAP + 1, 2).unwrap();
        let proposal = uniform_proposal(CHAIN_EXACT_STATE_CAP + 1, 2).unwrap();
        let config = EvalConfig { k1: 4, k2: 1, runs: 2, seed: 1, jobs: None };
        let err = evaluate_chain(
            &big_chain,
            Quantity::LogPartition,
            &proposal,
            "uniform",
            &config,
        )
        .unwrap_err();
        assert_eq!(
            err,
            HarnessError::ExactReferenceTooLarge {
                states: CHAIN_EXACT_STATE_CAP + 1,
                cap: CHAIN_EXACT_STATE_CAP
            }
        );

        let big_tree = HypertreePotentials::uniform(2, TREE_EXACT_STATE_CAP + 1).unwrap();
        let proposal = uniform_proposal(TREE_EXACT_STATE_CAP + 1, num_spans(2)).unwrap();
        let config = EvalConfig { k1: 4, k2: 1, runs: 2, seed: 1, jobs: None };
        let err = evaluate_tree(&big_tree, &proposal, "uniform", InsideBlocks::FullCross, &config)
            .unwrap_err();
        assert_eq!(
            err,
            HarnessError::ExactReferenceTooLarge {
                states: TREE_EXACT_STATE_CAP + 1,
                cap: TREE_EXACT_STATE_CAP
            }
        );
    }

    #[test]
    fn zero_runs_is_an_error() {
        let sim = simulate_chain(5, 3, TailProfile::Dense, 1).unwrap();
        let proposal = uniform_proposal(5, 3).unwrap();
        let config = EvalConfig { k1: 2, k2: 1, runs: 0, seed: 1, jobs: None };
        assert_eq!(
            evaluate_chain(&sim.potentials, Quantity::LogPartition, &proposal, "u", &config)
                .unwrap_err(),
            HarnessError::EmptyRuns
        );
    }
}
