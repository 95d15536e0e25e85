//! Chain-structured dynamic programs: exact and randomized forward passes,
//! entropy recursions, and reparameterized backward sampling.
//!
//! A chain over `T` positions and `N` states is scored by log-potentials
//! `init(i)` for the first position and `pairwise[t][j][i]` for moving from
//! state `j` at position `t` to state `i` at position `t + 1`. The exact
//! forward recursion accumulates prefix sums
//! `alpha_t(i) = logsumexp_j(alpha_{t-1}(j) + pairwise[t-1][j][i])`
//! and the partition function is the log-sum over the last column.
//!
//! The randomized variants replace every sum over `N` source states with a
//! sum over a per-step [`IndexSelection`]: the top `K1` states of a proposal
//! distribution, kept exactly, plus `K2` i.i.d. draws from the proposal's
//! renormalized tail. Each sampled term is importance-weighted by
//! `1 / (K2 * qtail(state))`, which makes the linear-space estimate of `Z` an
//! unbiased sum-and-sample estimator at every step; by Jensen the log-space
//! estimate is a lower bound of `log Z` in expectation. Selections are drawn
//! once, outside any tape, and enter the recorded computation only as index
//! lists and constant weights — so a differentiated estimate records
//! `O(T * K^2)` tape nodes instead of the exact pass's `O(T * N^2)`.
//!
//! The entropy recursion and the Gumbel backward sampler both consume the
//! alpha table of a randomized forward pass and must be given the *same*
//! selection that produced it; a fingerprint carried by
//! [`RandomizedForward`] enforces this at run time.

use std::hash::{DefaultHasher, Hash, Hasher};

use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::numerics::{sample_tail, topk_indices, NumericsError, RdpRng, Scalar};
use crate::proposals::Proposal;

/// Smallest probability fed to a logarithm inside the entropy recursion.
/// Estimated conditionals are ratios of noisy estimates and can reach zero or
/// overshoot one; clamping the log argument into `[1e-300, 1]` keeps every
/// entropy term finite.
const LOG_PROB_FLOOR: f64 = -690.77552789821368; // ln(1e-300)

/// Exhaustive enumeration guard for [`brute_force_chain`].
const BRUTE_FORCE_PATH_LIMIT: f64 = 1e6;

/// Errors from chain construction and the chain dynamic programs.
#[derive(Debug, Error, PartialEq)]
pub enum ChainError {
    #[error("chain needs at least one state")]
    EmptyStateSpace,
    #[error("init column is empty")]
    EmptyInit,
    #[error("pairwise matrix {step} holds {got} entries, expected {expected}")]
    PairwiseShape { step: usize, expected: usize, got: usize },
    #[error("NaN potential at {location}")]
    NanPotential { location: String },
    #[error("unreachable step {step}: every state has zero weight")]
    UnreachableStep { step: usize },
    #[error("selection covers {selection_steps} steps of {selection_states} states, potentials have {steps} steps of {states} states")]
    SelectionShape { selection_steps: usize, selection_states: usize, steps: usize, states: usize },
    #[error("selection does not match the one that produced the forward pass")]
    SelectionMismatch,
    #[error("k1 = {k1} exceeds the {n} available states")]
    SelectionTooLarge { k1: usize, n: usize },
    #[error("selection needs k1 + k2 >= 1")]
    EmptySelection,
    #[error(transparent)]
    Sampling(#[from] NumericsError),
    #[error("proposal covers {proposal_nodes} nodes of {proposal_states} states, expected {nodes} nodes of {states} states")]
    ProposalShape { proposal_nodes: usize, proposal_states: usize, nodes: usize, states: usize },
    #[error("noise for step {step} holds {got} values, active set holds {expected}")]
    NoiseShape { step: usize, expected: usize, got: usize },
    #[error("temperature {temperature} must be positive")]
    NonPositiveTemperature { temperature: f64 },
    #[error("state space too large to enumerate: {states}^{steps} exceeds {limit} paths")]
    StateSpaceTooLarge { states: usize, steps: usize, limit: f64 },
}

/// Log-potentials of a chain, generic over the scalar type so the same
/// structure carries plain values (`f64`) or tape variables.
#[derive(Debug, Clone)]
pub struct ChainPotentials<S = f64> {
    n: usize,
    init: Vec<S>,
    /// One row-major `N x N` matrix per transition; entry `[j * N + i]` scores
    /// moving from state `j` to state `i`.
    pairwise: Vec<Vec<S>>,
}

impl<S: Scalar> ChainPotentials<S> {
    /// Validate shapes and finiteness. `init` has one entry per state;
    /// `pairwise` holds `T - 1` row-major `N x N` matrices.
    pub fn new(init: Vec<S>, pairwise: Vec<Vec<S>>) -> Result<Self, ChainError> {
        if init.is_empty() {
            return Err(ChainError::EmptyInit);
        }
        let n = init.len();
        for (i, v) in init.iter().enumerate() {
            if v.value().is_nan() {
                return Err(ChainError::NanPotential { location: format!("init[{i}]") });
            }
        }
        for (step, matrix) in pairwise.iter().enumerate() {
            if matrix.len() != n * n {
                return Err(ChainError::PairwiseShape { step, expected: n * n, got: matrix.len() });
            }
            for (entry, v) in matrix.iter().enumerate() {
                if v.value().is_nan() {
                    let (j, i) = (entry / n, entry % n);
                    return Err(ChainError::NanPotential {
                        location: format!("pairwise[{step}][{j}][{i}]"),
                    });
                }
            }
        }
        Ok(ChainPotentials { n, init, pairwise })
    }

    /// Number of states `N`.
    pub fn num_states(&self) -> usize {
        self.n
    }

    /// Number of positions `T`.
    pub fn seq_len(&self) -> usize {
        self.pairwise.len() + 1
    }

    /// Initial log-potential of state `i`.
    pub fn init_at(&self, i: usize) -> S {
        self.init[i]
    }

    /// Log-potential for the transition from state `j` at position `t` to
    /// state `i` at position `t + 1`.
    pub fn pairwise_at(&self, t: usize, j: usize, i: usize) -> S {
        self.pairwise[t][j * self.n + i]
    }

    /// Plain-valued copy (primal extraction when `S` is a tape variable).
    pub fn to_values(&self) -> ChainPotentials<f64> {
        ChainPotentials {
            n: self.n,
            init: self.init.iter().map(|v| v.value()).collect(),
            pairwise: self
                .pairwise
                .iter()
                .map(|m| m.iter().map(|v| v.value()).collect())
                .collect(),
        }
    }
}

impl ChainPotentials<f64> {
    /// All-zero log-potentials: every path has weight one, `Z = N^T`.
    pub fn uniform(n: usize, t: usize) -> Result<Self, ChainError> {
        if n == 0 {
            return Err(ChainError::EmptyStateSpace);
        }
        if t == 0 {
            return Err(ChainError::EmptyInit);
        }
        ChainPotentials::new(vec![0.0; n], vec![vec![0.0; n * n]; t - 1])
    }

    /// Record every potential as a leaf on `tape`, yielding a differentiable
    /// twin of this chain.
    pub fn record_on<'t>(&self, tape: &'t Tape) -> ChainPotentials<Var<'t>> {
        ChainPotentials {
            n: self.n,
            init: self.init.iter().map(|&v| tape.leaf(v)).collect(),
            pairwise: self
                .pairwise
                .iter()
                .map(|m| m.iter().map(|&v| tape.leaf(v)).collect())
                .collect(),
        }
    }
}

/// One step of an [`IndexSelection`].
#[derive(Debug, Clone)]
pub struct StepSelection {
    /// Indices kept exactly, ordered by decreasing proposal weight.
    pub topk: Vec<usize>,
    /// Tail draws as `(state, renormalized tail probability)`; duplicates are
    /// legal and each carries full weight.
    pub sampled: Vec<(usize, f64)>,
    /// Sorted deduplicated union of `topk` and `sampled` states.
    active: Vec<usize>,
}

impl StepSelection {
    fn assemble(topk: Vec<usize>, sampled: Vec<(usize, f64)>) -> Self {
        let mut active: Vec<usize> =
            topk.iter().copied().chain(sampled.iter().map(|&(i, _)| i)).collect();
        active.sort_unstable();
        active.dedup();
        StepSelection { topk, sampled, active }
    }

    /// Sorted unique states this step keeps alive.
    pub fn active_states(&self) -> &[usize] {
        &self.active
    }

    /// Log of the importance weight `1 / (K2 * qtail)` for one tail draw,
    /// where `K2` is the number of draws actually taken at this step.
    pub(crate) fn log_weight(&self, tail_prob: f64) -> f64 {
        -((self.sampled.len() as f64).ln() + tail_prob.ln())
    }
}

/// Per-step index selection restricting a randomized chain pass.
#[derive(Debug, Clone)]
pub struct IndexSelection {
    n: usize,
    k1: usize,
    k2: usize,
    steps: Vec<StepSelection>,
    fingerprint: u64,
}

impl IndexSelection {
    /// Draw a selection from a proposal: per step, the proposal's top `k1`
    /// states plus `k2` i.i.d. renormalized-tail draws. Steps whose tail is
    /// empty (`k1 = N`) or carries zero mass fall back to a pure top-k step.
    /// Randomness is split per step, so a step's draws do not depend on
    /// evaluation order.
    pub fn from_proposal(
        proposal: &Proposal,
        k1: usize,
        k2: usize,
        rng: &RdpRng,
    ) -> Result<Self, ChainError> {
        let n = proposal.num_states();
        if k1 > n {
            return Err(ChainError::SelectionTooLarge { k1, n });
        }
        if k1 + k2 == 0 {
            return Err(ChainError::EmptySelection);
        }
        let mut steps = Vec::with_capacity(proposal.num_nodes());
        for node in 0..proposal.num_nodes() {
            let weights = proposal.node(node);
            let topk = topk_indices(weights, k1)?;
            let mut node_rng = rng.split(node as u64);
            let sampled = match sample_tail(weights, &topk, k2, &mut node_rng) {
                Ok(draws) => draws,
                Err(NumericsError::EmptyTail { .. }) | Err(NumericsError::DegenerateTail) => {
                    Vec::new()
                }
                Err(other) => return Err(ChainError::Sampling(other)),
            };
            if topk.is_empty() && sampled.is_empty() {
                // k1 = 0 and the tail was degenerate: nothing to keep alive.
                return Err(ChainError::EmptySelection);
            }
            steps.push(StepSelection::assemble(topk, sampled));
        }
        Ok(IndexSelection::assemble(n, k1, k2, steps))
    }

    /// The full-index selection: every state is in the exact head, nothing is
    /// sampled. Randomized passes restricted by it reproduce the exact ones.
    pub fn full(n: usize, t: usize) -> Self {
        let steps = (0..t)
            .map(|_| StepSelection::assemble((0..n).collect(), Vec::new()))
            .collect();
        IndexSelection::assemble(n, n, 0, steps)
    }

    fn assemble(n: usize, k1: usize, k2: usize, steps: Vec<StepSelection>) -> Self {
        let mut hasher = DefaultHasher::new();
        n.hash(&mut hasher);
        k1.hash(&mut hasher);
        k2.hash(&mut hasher);
        steps.len().hash(&mut hasher);
        for step in &steps {
            step.topk.hash(&mut hasher);
            for &(state, prob) in &step.sampled {
                state.hash(&mut hasher);
                prob.to_bits().hash(&mut hasher);
            }
        }
        let fingerprint = hasher.finish();
        IndexSelection { n, k1, k2, steps, fingerprint }
    }

    pub fn num_states(&self) -> usize {
        self.n
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn k1(&self) -> usize {
        self.k1
    }

    pub fn k2(&self) -> usize {
        self.k2
    }

    /// Selection at one step.
    pub fn step(&self, t: usize) -> &StepSelection {
        &self.steps[t]
    }

    fn check_shape<S: Scalar>(&self, potentials: &ChainPotentials<S>) -> Result<(), ChainError> {
        if self.n != potentials.num_states() || self.steps.len() != potentials.seq_len() {
            return Err(ChainError::SelectionShape {
                selection_steps: self.steps.len(),
                selection_states: self.n,
                steps: potentials.seq_len(),
                states: potentials.num_states(),
            });
        }
        Ok(())
    }
}

/// One column of an alpha table: values for the states that are alive at a
/// given position, in ascending state order.
#[derive(Debug, Clone)]
pub struct AlphaColumn<S> {
    states: Vec<usize>,
    values: Vec<S>,
}

impl<S: Scalar> AlphaColumn<S> {
    /// Column over ascending `states` with aligned `values`.
    pub(crate) fn new(states: Vec<usize>, values: Vec<S>) -> Self {
        debug_assert_eq!(states.len(), values.len());
        debug_assert!(states.windows(2).all(|w| w[0] < w[1]));
        AlphaColumn { states, values }
    }

    /// Alive states, ascending.
    pub fn states(&self) -> &[usize] {
        &self.states
    }

    /// Values aligned with [`AlphaColumn::states`].
    pub fn values(&self) -> &[S] {
        &self.values
    }

    /// Value for `state`, if alive.
    pub fn get(&self, state: usize) -> Option<S> {
        self.states.binary_search(&state).ok().map(|pos| self.values[pos])
    }

    fn all_zero(&self) -> bool {
        self.values.iter().all(|v| v.value() == f64::NEG_INFINITY)
    }
}

/// Prefix sums per position, defined exactly on each position's alive states.
#[derive(Debug, Clone)]
pub struct AlphaTable<S> {
    columns: Vec<AlphaColumn<S>>,
}

impl<S: Scalar> AlphaTable<S> {
    pub fn num_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, t: usize) -> &AlphaColumn<S> {
        &self.columns[t]
    }
}

/// Result of [`exact_forward`].
#[derive(Debug, Clone)]
pub struct ExactForward<S> {
    pub log_z: S,
    pub alphas: AlphaTable<S>,
}

/// Result of [`randomized_forward`]; remembers which selection produced it.
#[derive(Debug, Clone)]
pub struct RandomizedForward<S> {
    pub log_z: S,
    pub alphas: AlphaTable<S>,
    fingerprint: u64,
}

impl<S> RandomizedForward<S> {
    fn check_selection(&self, selection: &IndexSelection) -> Result<(), ChainError> {
        if self.fingerprint != selection.fingerprint {
            return Err(ChainError::SelectionMismatch);
        }
        Ok(())
    }
}

/// Exact forward pass: full alpha table and `log Z`.
pub fn exact_forward<S: Scalar>(
    potentials: &ChainPotentials<S>,
) -> Result<ExactForward<S>, ChainError> {
    let n = potentials.num_states();
    let t_len = potentials.seq_len();
    let mut columns: Vec<AlphaColumn<S>> = Vec::with_capacity(t_len);
    columns.push(AlphaColumn { states: (0..n).collect(), values: potentials.init.clone() });
    if columns[0].all_zero() {
        return Err(ChainError::UnreachableStep { step: 0 });
    }
    let mut terms: Vec<S> = Vec::with_capacity(n);
    for t in 1..t_len {
        let mut values = Vec::with_capacity(n);
        for i in 0..n {
            terms.clear();
            for j in 0..n {
                terms.push(columns[t - 1].values[j].add(potentials.pairwise_at(t - 1, j, i)));
            }
            values.push(S::logsumexp_slice(&terms));
        }
        let column = AlphaColumn { states: (0..n).collect(), values };
        if column.all_zero() {
            return Err(ChainError::UnreachableStep { step: t });
        }
        columns.push(column);
    }
    let log_z = S::logsumexp_slice(&columns[t_len - 1].values);
    Ok(ExactForward { log_z, alphas: AlphaTable { columns } })
}

/// Randomized forward pass restricted by `selection`.
///
/// Per step, the recursion consumes the previous position's alpha values at
/// the selected states only: top-k terms enter plainly, sampled terms enter
/// with their log importance weight `-ln(K2 * qtail)` folded in. The final
/// estimate applies the same rule to the last column. Alpha values are stored
/// unweighted; importance weights attach where a sampled state is consumed.
pub fn randomized_forward<S: Scalar>(
    potentials: &ChainPotentials<S>,
    selection: &IndexSelection,
) -> Result<RandomizedForward<S>, ChainError> {
    selection.check_shape(potentials)?;
    let t_len = potentials.seq_len();
    let mut columns: Vec<AlphaColumn<S>> = Vec::with_capacity(t_len);
    let first_active = selection.step(0).active_states().to_vec();
    columns.push(AlphaColumn {
        values: first_active.iter().map(|&i| potentials.init_at(i)).collect(),
        states: first_active,
    });
    if columns[0].all_zero() {
        return Err(ChainError::UnreachableStep { step: 0 });
    }
    let mut terms: Vec<S> = Vec::new();
    for t in 1..t_len {
        let step = selection.step(t - 1);
        let mut values = Vec::with_capacity(selection.step(t).active_states().len());
        for &i in selection.step(t).active_states() {
            terms.clear();
            for &sigma in &step.topk {
                let alpha = columns[t - 1].get(sigma).expect("top-k state is alive");
                terms.push(alpha.add(potentials.pairwise_at(t - 1, sigma, i)));
            }
            for &(delta, tail_prob) in &step.sampled {
                let alpha = columns[t - 1].get(delta).expect("sampled state is alive");
                terms.push(alpha.add_offset(
                    potentials.pairwise_at(t - 1, delta, i),
                    step.log_weight(tail_prob),
                ));
            }
            values.push(S::logsumexp_slice(&terms));
        }
        let column = AlphaColumn { states: selection.step(t).active_states().to_vec(), values };
        if column.all_zero() {
            return Err(ChainError::UnreachableStep { step: t });
        }
        columns.push(column);
    }
    let last = selection.step(t_len - 1);
    terms.clear();
    for &sigma in &last.topk {
        terms.push(columns[t_len - 1].get(sigma).expect("top-k state is alive"));
    }
    for &(delta, tail_prob) in &last.sampled {
        let alpha = columns[t_len - 1].get(delta).expect("sampled state is alive");
        terms.push(alpha.add_const(last.log_weight(tail_prob)));
    }
    let log_z = S::logsumexp_slice(&terms);
    Ok(RandomizedForward { log_z, alphas: AlphaTable { columns }, fingerprint: selection.fingerprint })
}

/// Backward conditional `log p(x_t = i | x_{t+1} = j)` under the prefix
/// weights: `pairwise[t][i][j] + alpha_t(i) - alpha_{t+1}(j)`.
fn log_backward_conditional<S: Scalar>(
    potentials: &ChainPotentials<S>,
    alphas: &AlphaTable<S>,
    t: usize,
    i: usize,
    j: usize,
) -> S {
    let alpha_i = alphas.column(t).get(i).expect("source state is alive");
    let alpha_j = alphas.column(t + 1).get(j).expect("target state is alive");
    potentials.pairwise_at(t, i, j).add(alpha_i).sub(alpha_j)
}

/// Exact Shannon entropy of the chain's normalized distribution, by the
/// backward-conditional recursion over the full index.
pub fn exact_entropy<S: Scalar>(potentials: &ChainPotentials<S>) -> Result<S, ChainError> {
    let forward = exact_forward(potentials)?;
    let n = potentials.num_states();
    let t_len = potentials.seq_len();
    let zero = forward.log_z.constant_like(0.0);
    let mut entropies = vec![zero; n];
    for t in 0..t_len - 1 {
        let mut next = Vec::with_capacity(n);
        for j in 0..n {
            let mut acc = zero;
            for i in 0..n {
                let lp = log_backward_conditional(potentials, &forward.alphas, t, i, j);
                if lp.value() == f64::NEG_INFINITY {
                    continue; // zero-probability branch contributes nothing
                }
                let p = lp.exp();
                acc = acc.add(p.mul(entropies[i].sub(lp)));
            }
            next.push(acc);
        }
        entropies = next;
    }
    let mut total = zero;
    for i in 0..n {
        let lp = forward.alphas.column(t_len - 1).values[i].sub(forward.log_z);
        if lp.value() == f64::NEG_INFINITY {
            continue;
        }
        let p = lp.exp();
        total = total.add(p.mul(entropies[i].sub(lp)));
    }
    Ok(total)
}

/// Entropy estimate over a randomized forward pass, reusing its alpha table,
/// partition estimate, and selection.
///
/// The recursion mirrors the forward one: top-k terms enter plainly, sampled
/// terms are importance-weighted, and conditionals are estimated as
/// `phat = exp(pairwise + alpha_t - alpha_{t+1})` with the logarithm's
/// argument clamped into `[1e-300, 1]`. The clamp floor is a documented bias
/// source: a noisy conditional outside `(0, 1]` contributes a finite,
/// slightly-off term instead of poisoning the estimate with NaN.
pub fn randomized_entropy<S: Scalar>(
    potentials: &ChainPotentials<S>,
    selection: &IndexSelection,
    forward: &RandomizedForward<S>,
) -> Result<S, ChainError> {
    selection.check_shape(potentials)?;
    forward.check_selection(selection)?;
    let t_len = potentials.seq_len();
    let zero = forward.log_z.constant_like(0.0);
    let mut entropies: Vec<S> = vec![zero; selection.step(0).active_states().len()];
    for t in 0..t_len - 1 {
        let step = selection.step(t);
        let next_active = selection.step(t + 1).active_states();
        let mut next = Vec::with_capacity(next_active.len());
        for &j in next_active {
            let mut acc = zero;
            for &sigma in &step.topk {
                let pos = step.active_states().binary_search(&sigma).expect("alive");
                let lp = log_backward_conditional(potentials, &forward.alphas, t, sigma, j);
                let lp_clamped = lp.clamp_to(LOG_PROB_FLOOR, 0.0);
                let p = lp.exp();
                acc = acc.add(p.mul(entropies[pos].sub(lp_clamped)));
            }
            for &(delta, tail_prob) in &step.sampled {
                let pos = step.active_states().binary_search(&delta).expect("alive");
                let lp = log_backward_conditional(potentials, &forward.alphas, t, delta, j);
                let lp_clamped = lp.clamp_to(LOG_PROB_FLOOR, 0.0);
                let p = lp.exp();
                let weight = step.log_weight(tail_prob).exp();
                acc = acc.add(p.mul(entropies[pos].sub(lp_clamped)).mul_const(weight));
            }
            next.push(acc);
        }
        entropies = next;
    }
    let last = selection.step(t_len - 1);
    let mut total = zero;
    for &sigma in &last.topk {
        let pos = last.active_states().binary_search(&sigma).expect("alive");
        let alpha = forward.alphas.column(t_len - 1).get(sigma).expect("alive");
        let lp = alpha.sub(forward.log_z);
        let lp_clamped = lp.clamp_to(LOG_PROB_FLOOR, 0.0);
        let p = lp.exp();
        total = total.add(p.mul(entropies[pos].sub(lp_clamped)));
    }
    for &(delta, tail_prob) in &last.sampled {
        let pos = last.active_states().binary_search(&delta).expect("alive");
        let alpha = forward.alphas.column(t_len - 1).get(delta).expect("alive");
        let lp = alpha.sub(forward.log_z);
        let lp_clamped = lp.clamp_to(LOG_PROB_FLOOR, 0.0);
        let p = lp.exp();
        let weight = last.log_weight(tail_prob).exp();
        total = total.add(p.mul(entropies[pos].sub(lp_clamped)).mul_const(weight));
    }
    Ok(total)
}

/// One reparameterized draw from the (restricted) chain posterior.
#[derive(Debug, Clone)]
pub struct GumbelSample<S> {
    /// Alive states per position, ascending; rows align with `soft`.
    pub active_states: Vec<Vec<usize>>,
    /// Relaxed one-hot sample per position over the alive states.
    pub soft: Vec<Vec<S>>,
    /// Hard sample per position, as original state indices. Each hard index
    /// is the argmax of the corresponding soft row.
    pub hard: Vec<usize>,
}

/// Reparameterized backward sampling over the restricted posterior.
///
/// Walking backward from the last position, each step perturbs the restricted
/// log-posteriors with the provided Gumbel noise: the soft sample is the
/// temperature-`tau` softmax of `(log phat + g) / tau` over the step's active
/// states and the hard sample is its argmax (temperature-invariant). Noise is
/// a plain constant: gradients flow through the soft samples into the
/// potentials only.
pub fn gumbel_backward_sample<S: Scalar>(
    potentials: &ChainPotentials<S>,
    selection: &IndexSelection,
    forward: &RandomizedForward<S>,
    noise: &[Vec<f64>],
    temperature: f64,
) -> Result<GumbelSample<S>, ChainError> {
    selection.check_shape(potentials)?;
    forward.check_selection(selection)?;
    if !(temperature > 0.0) {
        return Err(ChainError::NonPositiveTemperature { temperature });
    }
    let t_len = potentials.seq_len();
    if noise.len() != t_len {
        return Err(ChainError::NoiseShape { step: 0, expected: t_len, got: noise.len() });
    }
    for (t, row) in noise.iter().enumerate() {
        let expected = selection.step(t).active_states().len();
        if row.len() != expected {
            return Err(ChainError::NoiseShape { step: t, expected, got: row.len() });
        }
    }
    let mut active_states = vec![Vec::new(); t_len];
    let mut soft = vec![Vec::new(); t_len];
    let mut hard = vec![0usize; t_len];
    for t in (0..t_len).rev() {
        let active = selection.step(t).active_states();
        // Perturbed restricted log-posterior logits for position t.
        let logits: Vec<S> = active
            .iter()
            .zip(&noise[t])
            .map(|(&i, &g)| {
                let lp = if t + 1 == t_len {
                    let alpha = forward.alphas.column(t).get(i).expect("alive");
                    alpha.sub(forward.log_z)
                } else {
                    log_backward_conditional(potentials, &forward.alphas, t, i, hard[t + 1])
                };
                lp.add_const(g)
            })
            .collect();
        let scaled: Vec<S> = logits.iter().map(|l| l.mul_const(1.0 / temperature)).collect();
        let lse = S::logsumexp_slice(&scaled);
        let row: Vec<S> = scaled.iter().map(|s| s.sub(lse).exp()).collect();
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.value().total_cmp(&b.1.value()))
            .map(|(pos, _)| pos)
            .expect("active set is nonempty");
        hard[t] = active[argmax];
        soft[t] = row;
        active_states[t] = active.to_vec();
    }
    Ok(GumbelSample { active_states, soft, hard })
}

/// Exhaustively enumerated chain: reference partition function, entropy, and
/// posterior.
#[derive(Debug, Clone)]
pub struct BruteForceChain {
    pub log_z: f64,
    pub entropy: f64,
    /// Log posterior probability per path; see [`BruteForceChain::path_index`].
    pub path_log_probs: Vec<f64>,
    n: usize,
    t: usize,
}

impl BruteForceChain {
    /// Index of a path in [`BruteForceChain::path_log_probs`]: position `t`
    /// contributes `states[t] * N^t`.
    pub fn path_index(&self, states: &[usize]) -> usize {
        assert_eq!(states.len(), self.t, "path length mismatch");
        states.iter().rev().fold(0, |acc, &s| acc * self.n + s)
    }

    /// Decode a path index back into per-position states.
    pub fn path_states(&self, mut index: usize) -> Vec<usize> {
        let mut states = Vec::with_capacity(self.t);
        for _ in 0..self.t {
            states.push(index % self.n);
            index /= self.n;
        }
        states
    }
}

/// Enumerate every path of the chain. Guarded to `N^T <= 1e6` paths.
pub fn brute_force_chain(potentials: &ChainPotentials<f64>) -> Result<BruteForceChain, ChainError> {
    let n = potentials.num_states();
    let t = potentials.seq_len();
    if (n as f64).powi(t as i32) > BRUTE_FORCE_PATH_LIMIT {
        return Err(ChainError::StateSpaceTooLarge {
            states: n,
            steps: t,
            limit: BRUTE_FORCE_PATH_LIMIT,
        });
    }
    let num_paths = n.pow(t as u32);
    let mut log_weights = Vec::with_capacity(num_paths);
    let mut states = vec![0usize; t];
    for index in 0..num_paths {
        let mut rest = index;
        for slot in states.iter_mut() {
            *slot = rest % n;
            rest /= n;
        }
        let mut lw = potentials.init_at(states[0]);
        for step in 0..t - 1 {
            lw += potentials.pairwise_at(step, states[step], states[step + 1]);
        }
        log_weights.push(lw);
    }
    let log_z = crate::numerics::logsumexp(&log_weights).expect("at least one path");
    if log_z == f64::NEG_INFINITY {
        return Err(ChainError::UnreachableStep { step: t - 1 });
    }
    let path_log_probs: Vec<f64> = log_weights.iter().map(|lw| lw - log_z).collect();
    let entropy = path_log_probs
        .iter()
        .filter(|lp| **lp > f64::NEG_INFINITY)
        .map(|&lp| -lp.exp() * lp)
        .sum();
    Ok(BruteForceChain { log_z, entropy, path_log_probs, n, t })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gumbel_noise;
    use crate::proposals::{oracle_proposal, uniform_proposal};
    use approx::assert_relative_eq;

    /// Random log-potentials with standard-normal entries scaled by `spread`.
    fn random_chain(n: usize, t: usize, spread: f64, seed: u64) -> ChainPotentials<f64> {
        let mut rng = RdpRng::from_seed(seed);
        let init = (0..n).map(|_| spread * rng.standard_normal()).collect();
        let pairwise = (0..t - 1)
            .map(|_| (0..n * n).map(|_| spread * rng.standard_normal()).collect())
            .collect();
        ChainPotentials::new(init, pairwise).unwrap()
    }

    /// Gumbel noise rows matching each step's active-set size.
    fn noise_for(selection: &IndexSelection, rng: &mut RdpRng) -> Vec<Vec<f64>> {
        (0..selection.num_steps())
            .map(|t| gumbel_noise(rng, selection.step(t).active_states().len()))
            .collect()
    }

    #[test]
    fn uniform_two_by_two_partition() {
        // Four unit-weight paths.
        let p = ChainPotentials::uniform(2, 2).unwrap();
        let fwd = exact_forward(&p).unwrap();
        assert_relative_eq!(fwd.log_z, 4.0_f64.ln(), max_relative = 1e-14);
    }

    #[test]
    fn single_position_chain_sums_the_init_column() {
        let p = ChainPotentials::new(vec![2.0_f64.ln(), 3.0_f64.ln()], vec![]).unwrap();
        let fwd = exact_forward(&p).unwrap();
        assert_relative_eq!(fwd.log_z, 5.0_f64.ln(), max_relative = 1e-14);
    }

    #[test]
    fn exact_forward_matches_brute_force_on_random_instances() {
        for seed in 0..20 {
            let p = random_chain(4, 5, 1.5, seed);
            let fwd = exact_forward(&p).unwrap();
            let bf = brute_force_chain(&p).unwrap();
            assert_relative_eq!(fwd.log_z, bf.log_z, epsilon = 1e-10);
        }
    }

    #[test]
    fn disconnected_chain_reports_the_unreachable_step() {
        let neg = f64::NEG_INFINITY;
        let p = ChainPotentials::new(vec![0.0, 0.0], vec![vec![neg, neg, neg, neg]]).unwrap();
        assert_eq!(exact_forward(&p).unwrap_err(), ChainError::UnreachableStep { step: 1 });
    }

    #[test]
    fn full_index_selection_reproduces_the_exact_pass() {
        for seed in 40..60 {
            let p = random_chain(5, 4, 1.0, seed);
            let exact = exact_forward(&p).unwrap();
            let selection = IndexSelection::full(5, 4);
            let randomized = randomized_forward(&p, &selection).unwrap();
            assert_relative_eq!(randomized.log_z, exact.log_z, epsilon = 1e-10);
            for t in 0..4 {
                for i in 0..5 {
                    assert_relative_eq!(
                        randomized.alphas.column(t).get(i).unwrap(),
                        exact.alphas.column(t).get(i).unwrap(),
                        epsilon = 1e-10
                    );
                }
            }
        }
    }

    #[test]
    fn single_state_chain_is_exact_for_any_selection() {
        let p = random_chain(1, 5, 1.0, 3);
        let exact = exact_forward(&p).unwrap();
        let proposal = uniform_proposal(1, 5).unwrap();
        let rng = RdpRng::from_seed(9);
        let selection = IndexSelection::from_proposal(&proposal, 1, 3, &rng).unwrap();
        let randomized = randomized_forward(&p, &selection).unwrap();
        assert_relative_eq!(randomized.log_z, exact.log_z, epsilon = 1e-12);
    }

    #[test]
    fn linear_space_estimate_is_unbiased_under_the_oracle_proposal() {
        // Mean of exp(log Zhat) over 20k selections stays within 3 standard
        // errors of Z.
        let p = random_chain(6, 4, 1.0, 77);
        let exact = exact_forward(&p).unwrap();
        let proposal = oracle_proposal(&p, &exact).unwrap();
        let z = exact.log_z.exp();
        let master = RdpRng::from_seed(2024);
        let replicates = 20_000;
        let mut estimates = Vec::with_capacity(replicates);
        for r in 0..replicates {
            let rng = master.split(r as u64);
            let selection = IndexSelection::from_proposal(&proposal, 2, 2, &rng).unwrap();
            let fwd = randomized_forward(&p, &selection).unwrap();
            estimates.push(fwd.log_z.exp());
        }
        let mean = estimates.iter().sum::<f64>() / replicates as f64;
        let var = estimates.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>()
            / replicates as f64;
        let se = (var / replicates as f64).sqrt();
        assert!(
            (mean - z).abs() <= 3.0 * se,
            "mean {mean} vs Z {z}, se {se}"
        );
    }

    #[test]
    fn selections_are_deterministic_and_order_independent() {
        let proposal = uniform_proposal(8, 5).unwrap();
        let rng = RdpRng::from_seed(5);
        let a = IndexSelection::from_proposal(&proposal, 2, 2, &rng).unwrap();
        let b = IndexSelection::from_proposal(&proposal, 2, 2, &rng).unwrap();
        assert_eq!(a.fingerprint, b.fingerprint);
        for t in 0..5 {
            assert_eq!(a.step(t).topk, b.step(t).topk);
            assert_eq!(a.step(t).sampled, b.step(t).sampled);
        }
    }

    #[test]
    fn selection_with_full_head_falls_back_to_pure_topk() {
        let proposal = uniform_proposal(3, 2).unwrap();
        let rng = RdpRng::from_seed(5);
        let selection = IndexSelection::from_proposal(&proposal, 3, 2, &rng).unwrap();
        for t in 0..2 {
            assert_eq!(selection.step(t).topk, vec![0, 1, 2]);
            assert!(selection.step(t).sampled.is_empty());
        }
    }

    #[test]
    fn selection_shape_mismatch_is_rejected() {
        let p = random_chain(4, 3, 1.0, 1);
        let selection = IndexSelection::full(4, 2);
        assert!(matches!(
            randomized_forward(&p, &selection),
            Err(ChainError::SelectionShape { .. })
        ));
    }

    #[test]
    fn exact_entropy_of_uniform_chain_is_log_num_paths() {
        let p = ChainPotentials::uniform(2, 2).unwrap();
        assert_relative_eq!(exact_entropy(&p).unwrap(), 4.0_f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn exact_entropy_of_a_point_mass_is_zero() {
        let neg = f64::NEG_INFINITY;
        // Only the path 0 -> 1 survives.
        let p = ChainPotentials::new(vec![0.0, neg], vec![vec![neg, 0.0, neg, neg]]).unwrap();
        assert_relative_eq!(exact_entropy(&p).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn exact_entropy_matches_brute_force_on_random_instances() {
        for seed in 100..110 {
            let p = random_chain(4, 4, 1.2, seed);
            let bf = brute_force_chain(&p).unwrap();
            assert_relative_eq!(exact_entropy(&p).unwrap(), bf.entropy, epsilon = 1e-8);
        }
    }

    #[test]
    fn full_index_entropy_reduces_to_exact() {
        for seed in 200..210 {
            let p = random_chain(5, 4, 1.0, seed);
            let selection = IndexSelection::full(5, 4);
            let fwd = randomized_forward(&p, &selection).unwrap();
            let h = randomized_entropy(&p, &selection, &fwd).unwrap();
            assert_relative_eq!(h, exact_entropy(&p).unwrap(), epsilon = 1e-8);
        }
    }

    #[test]
    fn single_state_entropy_is_zero() {
        let p = random_chain(1, 4, 1.0, 8);
        let selection = IndexSelection::full(1, 4);
        let fwd = randomized_forward(&p, &selection).unwrap();
        assert_relative_eq!(
            randomized_entropy(&p, &selection, &fwd).unwrap(),
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn entropy_refuses_a_foreign_selection() {
        let p = random_chain(12, 4, 1.0, 33);
        let proposal = uniform_proposal(12, 4).unwrap();
        let rng = RdpRng::from_seed(1);
        let sel_a = IndexSelection::from_proposal(&proposal, 2, 2, &rng).unwrap();
        let sel_b = IndexSelection::from_proposal(&proposal, 2, 2, &rng.split(99)).unwrap();
        assert_ne!(sel_a.fingerprint, sel_b.fingerprint, "distinct draws expected");
        let fwd = randomized_forward(&p, &sel_a).unwrap();
        assert_eq!(
            randomized_entropy(&p, &sel_b, &fwd).unwrap_err(),
            ChainError::SelectionMismatch
        );
    }

    #[test]
    fn sampled_tail_recovers_mass_the_pure_head_misses() {
        // With a shared exact head, adding tail draws only ever adds
        // nonnegative mass, so every realization dominates the pure top-k
        // estimate; on a long-tailed chain the recovered mass also shrinks
        // the average log-partition error.
        let n = 100;
        let t_len = 5;
        let p = random_chain(n, t_len, 2.0, 4242);
        let log_z = exact_forward(&p).unwrap().log_z;
        let proposal = uniform_proposal(n, t_len).unwrap();
        let k1 = 10;
        let sel_topk = {
            let rng = RdpRng::from_seed(0);
            IndexSelection::from_proposal(&proposal, k1, 0, &rng).unwrap()
        };
        let topk_estimate = randomized_forward(&p, &sel_topk).unwrap().log_z;
        assert!(topk_estimate < log_z, "head-only pass cannot reach the full mass");
        let master = RdpRng::from_seed(31);
        let runs = 50;
        let mut err_rdp = 0.0;
        for r in 0..runs {
            let rng = master.split(r as u64);
            let sel = IndexSelection::from_proposal(&proposal, k1, 5, &rng).unwrap();
            let estimate = randomized_forward(&p, &sel).unwrap().log_z;
            assert!(
                estimate >= topk_estimate - 1e-12,
                "run {r}: tail draws lost mass ({estimate} < {topk_estimate})"
            );
            err_rdp += (estimate - log_z).abs();
        }
        let mean_rdp = err_rdp / runs as f64;
        let err_topk = (topk_estimate - log_z).abs();
        assert!(mean_rdp < err_topk, "rdp {mean_rdp} vs topk {err_topk}");
    }

    #[test]
    fn gumbel_sampling_recovers_the_posterior_with_full_index() {
        // Hard-sample frequencies over the 8 paths of a random 3-state,
        // 3-position chain against the enumerated posterior, 4-sigma bands.
        let p = random_chain(2, 3, 1.0, 55);
        let bf = brute_force_chain(&p).unwrap();
        let selection = IndexSelection::full(2, 3);
        let fwd = randomized_forward(&p, &selection).unwrap();
        let mut rng = RdpRng::from_seed(7);
        let draws = 40_000;
        let mut counts = vec![0usize; bf.path_log_probs.len()];
        for _ in 0..draws {
            let noise = noise_for(&selection, &mut rng);
            let sample = gumbel_backward_sample(&p, &selection, &fwd, &noise, 1.0).unwrap();
            counts[bf.path_index(&sample.hard)] += 1;
        }
        for (index, &count) in counts.iter().enumerate() {
            let expected = bf.path_log_probs[index].exp();
            let freq = count as f64 / draws as f64;
            let sigma = (expected * (1.0 - expected) / draws as f64).sqrt();
            assert!(
                (freq - expected).abs() < 4.0 * sigma + 1e-4,
                "path {index}: freq {freq} vs posterior {expected}"
            );
        }
    }

    #[test]
    fn hard_sample_is_argmax_of_soft_sample() {
        let p = random_chain(6, 5, 1.0, 66);
        let proposal = uniform_proposal(6, 5).unwrap();
        let rng = RdpRng::from_seed(3);
        let selection = IndexSelection::from_proposal(&proposal, 3, 2, &rng).unwrap();
        let fwd = randomized_forward(&p, &selection).unwrap();
        let mut noise_rng = RdpRng::from_seed(4);
        let noise = noise_for(&selection, &mut noise_rng);
        let sample = gumbel_backward_sample(&p, &selection, &fwd, &noise, 1.0).unwrap();
        for t in 0..5 {
            let row = &sample.soft[t];
            let sum: f64 = row.iter().sum();
            assert_relative_eq!(sum, 1.0, epsilon = 1e-12);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(sample.hard[t], sample.active_states[t][argmax]);
        }
    }

    #[test]
    fn low_temperature_concentrates_the_soft_sample() {
        let p = random_chain(5, 4, 1.0, 67);
        let selection = IndexSelection::full(5, 4);
        let fwd = randomized_forward(&p, &selection).unwrap();
        let mut noise_rng = RdpRng::from_seed(5);
        let noise = noise_for(&selection, &mut noise_rng);
        let sample = gumbel_backward_sample(&p, &selection, &fwd, &noise, 0.01).unwrap();
        for t in 0..4 {
            let max = sample.soft[t].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(max > 0.99, "temperature 0.01 left mass spread at step {t}");
        }
    }

    #[test]
    fn nonpositive_temperature_is_rejected() {
        let p = random_chain(3, 3, 1.0, 68);
        let selection = IndexSelection::full(3, 3);
        let fwd = randomized_forward(&p, &selection).unwrap();
        let noise = vec![vec![0.0; 3]; 3];
        assert_eq!(
            gumbel_backward_sample(&p, &selection, &fwd, &noise, 0.0).unwrap_err(),
            ChainError::NonPositiveTemperature { temperature: 0.0 }
        );
    }

    #[test]
    fn noise_shape_is_checked() {
        let p = random_chain(3, 3, 1.0, 69);
        let selection = IndexSelection::full(3, 3);
        let fwd = randomized_forward(&p, &selection).unwrap();
        let noise = vec![vec![0.0; 3], vec![0.0; 2], vec![0.0; 3]];
        assert_eq!(
            gumbel_backward_sample(&p, &selection, &fwd, &noise, 1.0).unwrap_err(),
            ChainError::NoiseShape { step: 1, expected: 3, got: 2 }
        );
    }

    #[test]
    fn sampling_refuses_a_foreign_selection() {
        let p = random_chain(12, 3, 1.0, 70);
        let proposal = uniform_proposal(12, 3).unwrap();
        let rng = RdpRng::from_seed(11);
        let sel_a = IndexSelection::from_proposal(&proposal, 2, 2, &rng).unwrap();
        let sel_b = IndexSelection::from_proposal(&proposal, 2, 2, &rng.split(1)).unwrap();
        assert_ne!(sel_a.fingerprint, sel_b.fingerprint, "distinct draws expected");
        let fwd = randomized_forward(&p, &sel_a).unwrap();
        let noise: Vec<Vec<f64>> =
            (0..3).map(|t| vec![0.0; sel_b.step(t).active_states().len()]).collect();
        assert_eq!(
            gumbel_backward_sample(&p, &sel_b, &fwd, &noise, 1.0).unwrap_err(),
            ChainError::SelectionMismatch
        );
    }

    #[test]
    fn brute_force_respects_the_enumeration_guard() {
        let p = ChainPotentials::uniform(10, 7).unwrap();
        assert!(matches!(
            brute_force_chain(&p),
            Err(ChainError::StateSpaceTooLarge { .. })
        ));
    }

    #[test]
    fn brute_force_uniform_chain() {
        let p = ChainPotentials::uniform(2, 2).unwrap();
        let bf = brute_force_chain(&p).unwrap();
        assert_relative_eq!(bf.log_z, 4.0_f64.ln(), max_relative = 1e-14);
        assert_relative_eq!(bf.entropy, 4.0_f64.ln(), max_relative = 1e-14);
        for &lp in &bf.path_log_probs {
            assert_relative_eq!(lp, (0.25_f64).ln(), max_relative = 1e-14);
        }
    }

    #[test]
    fn variance_is_monotone_in_the_head_size() {
        // Rao-Blackwellization: growing the exact head while keeping one tail
        // draw never hurts, on shared replicate seeds.
        let n = 40;
        let p = random_chain(n, 5, 2.0, 321);
        let proposal = uniform_proposal(n, 5).unwrap();
        let master = RdpRng::from_seed(99);
        let runs = 2000;
        let mut variances = Vec::new();
        for k1 in [0usize, 10, 20] {
            let mut estimates = Vec::with_capacity(runs);
            for r in 0..runs {
                let rng = master.split(r as u64);
                let sel = IndexSelection::from_proposal(&proposal, k1, 1, &rng).unwrap();
                estimates.push(randomized_forward(&p, &sel).unwrap().log_z);
            }
            let mean = estimates.iter().sum::<f64>() / runs as f64;
            variances
                .push(estimates.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / runs as f64);
        }
        assert!(
            variances[0] >= variances[1] && variances[1] >= variances[2],
            "variances not monotone: {variances:?}"
        );
    }

    #[test]
    fn tape_node_counts_witness_the_restricted_memory_footprint() {
        let n = 30;
        let t_len = 4;
        let p = random_chain(n, t_len, 1.0, 404);
        let tape = Tape::new();
        let recorded = p.record_on(&tape);
        let before_exact = tape.len();
        exact_forward(&recorded).unwrap();
        let exact_nodes = tape.len() - before_exact;
        let proposal = uniform_proposal(n, t_len).unwrap();
        let rng = RdpRng::from_seed(12);
        let selection = IndexSelection::from_proposal(&proposal, 5, 1, &rng).unwrap();
        let before_rand = tape.len();
        randomized_forward(&recorded, &selection).unwrap();
        let rand_nodes = tape.len() - before_rand;
        // Exact records (T-1)(N^2 + N) + 1 nodes; the randomized pass was
        // restricted to K = 6 alive states.
        assert_eq!(exact_nodes, (t_len - 1) * (n * n + n) + 1);
        let k = 6;
        assert!(rand_nodes <= (t_len - 1) * k * (k + 1) + k + 1);
    }

    #[test]
    fn forward_gradients_match_finite_differences() {
        // Both the exact and a fixed-selection randomized log-partition are
        // smooth in the potentials.
        let n = 5;
        let t_len = 4;
        let p = random_chain(n, t_len, 1.0, 500);
        let point: Vec<f64> = {
            let mut flat = Vec::new();
            for i in 0..n {
                flat.push(p.init_at(i));
            }
            for t in 0..t_len - 1 {
                for j in 0..n {
                    for i in 0..n {
                        flat.push(p.pairwise_at(t, j, i));
                    }
                }
            }
            flat
        };
        fn rebuild<'t>(xs: &[Var<'t>], n: usize, t_len: usize) -> ChainPotentials<Var<'t>> {
            let init = xs[..n].to_vec();
            let pairwise = (0..t_len - 1)
                .map(|t| xs[n + t * n * n..n + (t + 1) * n * n].to_vec())
                .collect();
            ChainPotentials::new(init, pairwise).unwrap()
        }
        let err_exact = crate::autodiff::gradcheck(
            |_tape, xs| exact_forward(&rebuild(xs, n, t_len)).unwrap().log_z,
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err_exact < 1e-5, "exact forward gradient error {err_exact}");

        let proposal = uniform_proposal(n, t_len).unwrap();
        let rng = RdpRng::from_seed(17);
        let selection = IndexSelection::from_proposal(&proposal, 2, 2, &rng).unwrap();
        let err_rand = crate::autodiff::gradcheck(
            |_tape, xs| randomized_forward(&rebuild(xs, n, t_len), &selection).unwrap().log_z,
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err_rand < 1e-5, "randomized forward gradient error {err_rand}");
    }

    #[test]
    fn exact_forward_adjoints_are_edge_marginals() {
        // d log Z / d pairwise[t][j][i] is the posterior probability of using
        // that edge; d log Z / d init[i] the posterior of starting at i.
        let n = 3;
        let t_len = 3;
        let p = random_chain(n, t_len, 1.0, 501);
        let bf = brute_force_chain(&p).unwrap();
        let tape = Tape::new();
        let recorded = p.record_on(&tape);
        let fwd = exact_forward(&recorded).unwrap();
        tape.backward(fwd.log_z).unwrap();
        for i in 0..n {
            let marginal: f64 = (0..bf.path_log_probs.len())
                .filter(|&idx| bf.path_states(idx)[0] == i)
                .map(|idx| bf.path_log_probs[idx].exp())
                .sum();
            assert_relative_eq!(recorded.init_at(i).adjoint(), marginal, epsilon = 1e-10);
        }
        for t in 0..t_len - 1 {
            for j in 0..n {
                for i in 0..n {
                    let marginal: f64 = (0..bf.path_log_probs.len())
                        .filter(|&idx| {
                            let states = bf.path_states(idx);
                            states[t] == j && states[t + 1] == i
                        })
                        .map(|idx| bf.path_log_probs[idx].exp())
                        .sum();
                    assert_relative_eq!(
                        recorded.pairwise_at(t, j, i).adjoint(),
                        marginal,
                        epsilon = 1e-10
                    );
                }
            }
        }
    }

    #[test]
    fn adjoints_outside_the_active_sets_are_exactly_zero() {
        let n = 6;
        let t_len = 4;
        let p = random_chain(n, t_len, 1.0, 502);
        let proposal = uniform_proposal(n, t_len).unwrap();
        let rng = RdpRng::from_seed(23);
        let selection = IndexSelection::from_proposal(&proposal, 2, 1, &rng).unwrap();
        let tape = Tape::new();
        let recorded = p.record_on(&tape);
        let fwd = randomized_forward(&recorded, &selection).unwrap();
        tape.backward(fwd.log_z).unwrap();
        for t in 0..t_len - 1 {
            let alive_src = selection.step(t).active_states();
            let alive_dst = selection.step(t + 1).active_states();
            for j in 0..n {
                for i in 0..n {
                    if !alive_src.contains(&j) || !alive_dst.contains(&i) {
                        assert_eq!(
                            recorded.pairwise_at(t, j, i).adjoint(),
                            0.0,
                            "untouched edge ({t}, {j}, {i}) received gradient"
                        );
                    }
                }
            }
        }
        for i in 0..n {
            if !selection.step(0).active_states().contains(&i) {
                assert_eq!(recorded.init_at(i).adjoint(), 0.0);
            }
        }
    }
}
