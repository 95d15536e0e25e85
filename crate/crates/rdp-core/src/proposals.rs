//! Proposal distributions that drive index selection.
//!
//! A [`Proposal`] assigns every DP node (a chain step, or a hypertree span)
//! a linear-space probability distribution over the `N` states. Selections
//! take the top-`K1` states of the node's distribution deterministically and
//! draw `K2` i.i.d. tail states from its renormalized remainder; estimator
//! variance vanishes exactly when a node's proposal is proportional to the
//! node's true summand masses, so the constructors here trade knowledge for
//! cost:
//!
//! * [`uniform_proposal`] — no knowledge, the baseline.
//! * [`local_global_proposal`] — a convex mix of per-node local evidence and
//!   a global per-state weight, both cheap side products of the model.
//! * [`oracle_proposal`] — proportional to the true per-step summand mass,
//!   computed from an exact forward pass; a variance yardstick rather than a
//!   practical choice.

use thiserror::Error;

use crate::chain::{ChainPotentials, ExactForward};
use crate::numerics::logsumexp;

/// Errors from proposal construction.
#[derive(Debug, Error, PartialEq)]
pub enum ProposalError {
    #[error("proposal needs at least one state")]
    EmptyStateSpace,
    #[error("proposal needs at least one node")]
    EmptyNodes,
    #[error("node {node} has {got} weights, expected {expected}")]
    ShapeMismatch { node: usize, expected: usize, got: usize },
    #[error("mix {mix} outside [0, 1]")]
    MixOutOfRange { mix: f64 },
    #[error("weights at node {node} do not form a distribution (sum {sum})")]
    NotNormalized { node: usize, sum: f64 },
    #[error("negative weight {value} at node {node}, state {state}")]
    NegativeWeight { node: usize, state: usize, value: f64 },
    #[error("NaN weight at node {node}, state {state}")]
    NanWeight { node: usize, state: usize },
    #[error("local weights at node {node} sum to zero")]
    ZeroLocalMass { node: usize },
    #[error("global weights sum to zero")]
    ZeroGlobalMass,
}

/// Per-node probability distributions over states, in linear space.
#[derive(Debug, Clone)]
pub struct Proposal {
    n: usize,
    nodes: Vec<Vec<f64>>,
}

impl Proposal {
    /// Validate and take ownership of per-node distributions. Each node must
    /// hold the same number of nonnegative, non-NaN weights summing to 1
    /// within 1e-9; weights are renormalized exactly on ingestion.
    pub fn new(nodes: Vec<Vec<f64>>) -> Result<Self, ProposalError> {
        if nodes.is_empty() {
            return Err(ProposalError::EmptyNodes);
        }
        let n = nodes[0].len();
        if n == 0 {
            return Err(ProposalError::EmptyStateSpace);
        }
        let mut nodes = nodes;
        for (node, weights) in nodes.iter_mut().enumerate() {
            if weights.len() != n {
                return Err(ProposalError::ShapeMismatch { node, expected: n, got: weights.len() });
            }
            for (state, &w) in weights.iter().enumerate() {
                if w.is_nan() {
                    return Err(ProposalError::NanWeight { node, state });
                }
                if w < 0.0 {
                    return Err(ProposalError::NegativeWeight { node, state, value: w });
                }
            }
            let sum: f64 = weights.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(ProposalError::NotNormalized { node, sum });
            }
            for w in weights.iter_mut() {
                *w /= sum;
            }
        }
        Ok(Proposal { n, nodes })
    }

    /// Number of states per node.
    pub fn num_states(&self) -> usize {
        self.n
    }

    /// Number of DP nodes covered.
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Distribution at one node.
    pub fn node(&self, index: usize) -> &[f64] {
        &self.nodes[index]
    }
}

/// The uniform proposal: every state gets 1/N at every node.
pub fn uniform_proposal(n: usize, nodes: usize) -> Result<Proposal, ProposalError> {
    if n == 0 {
        return Err(ProposalError::EmptyStateSpace);
    }
    if nodes == 0 {
        return Err(ProposalError::EmptyNodes);
    }
    Proposal::new(vec![vec![1.0 / n as f64; n]; nodes])
}

/// Mix per-node local evidence with a global per-state weight:
/// `q_node(i) = mix * local_node(i)/sum_j local_node(j) + (1 - mix) * global(i)/sum_j global(j)`.
///
/// `mix = 1` keeps only the local term, `mix = 0` only the global one, and
/// `mix = 0.5` gives both halves equal say. Inputs are nonnegative linear
/// weights; a node whose local weights sum to zero cannot be normalized and
/// is an error, as is a zero global vector.
pub fn local_global_proposal(
    local: &[Vec<f64>],
    global: &[f64],
    mix: f64,
) -> Result<Proposal, ProposalError> {
    if !(0.0..=1.0).contains(&mix) {
        return Err(ProposalError::MixOutOfRange { mix });
    }
    if local.is_empty() {
        return Err(ProposalError::EmptyNodes);
    }
    let n = global.len();
    if n == 0 {
        return Err(ProposalError::EmptyStateSpace);
    }
    for (node, weights) in local.iter().enumerate() {
        if weights.len() != n {
            return Err(ProposalError::ShapeMismatch { node, expected: n, got: weights.len() });
        }
        for (state, &w) in weights.iter().enumerate() {
            if w.is_nan() {
                return Err(ProposalError::NanWeight { node, state });
            }
            if w < 0.0 {
                return Err(ProposalError::NegativeWeight { node, state, value: w });
            }
        }
    }
    let global_sum: f64 = global.iter().sum();
    if global_sum <= 0.0 {
        return Err(ProposalError::ZeroGlobalMass);
    }
    let mut nodes = Vec::with_capacity(local.len());
    for (node, weights) in local.iter().enumerate() {
        let local_sum: f64 = weights.iter().sum();
        if local_sum <= 0.0 {
            return Err(ProposalError::ZeroLocalMass { node });
        }
        let mixed: Vec<f64> = (0..n)
            .map(|i| mix * weights[i] / local_sum + (1.0 - mix) * global[i] / global_sum)
            .collect();
        nodes.push(mixed);
    }
    Proposal::new(nodes)
}

/// The per-step oracle for chains: state `j` at step `t` is weighted by its
/// true outgoing summand mass `alpha_t(j) * sum_i phi_t(j, i)` (just
/// `alpha_T(j)` at the last step, whose column is consumed directly by the
/// partition sum). On instances whose outgoing potentials factor as
/// `phi_t(j, i) = f_t(j) * g_t(i)` this proposal is exact for every target
/// state and the randomized estimate collapses onto the truth.
pub fn oracle_proposal(
    potentials: &ChainPotentials<f64>,
    forward: &ExactForward<f64>,
) -> Result<Proposal, ProposalError> {
    let n = potentials.num_states();
    let t_len = potentials.seq_len();
    let mut nodes = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let alphas = forward.alphas.column(t);
        let mut log_mass = Vec::with_capacity(n);
        for j in 0..n {
            let alpha = alphas.values()[j];
            let outgoing = if t + 1 < t_len {
                let row: Vec<f64> = (0..n).map(|i| potentials.pairwise_at(t, j, i)).collect();
                logsumexp(&row).expect("state space is nonempty")
            } else {
                0.0
            };
            log_mass.push(alpha + outgoing);
        }
        let total = logsumexp(&log_mass).expect("state space is nonempty");
        let weights: Vec<f64> = log_mass.iter().map(|&lm| (lm - total).exp()).collect();
        nodes.push(weights);
    }
    Proposal::new(nodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::exact_forward;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn uniform_is_flat() {
        let p = uniform_proposal(4, 3).unwrap();
        assert_eq!(p.num_nodes(), 3);
        for node in 0..3 {
            for &w in p.node(node) {
                assert_relative_eq!(w, 0.25, max_relative = 1e-15);
            }
        }
    }

    #[test]
    fn uniform_single_state() {
        let p = uniform_proposal(1, 2).unwrap();
        assert_eq!(p.node(0), &[1.0]);
    }

    #[test]
    fn uniform_rejects_empty() {
        assert_eq!(uniform_proposal(0, 2).unwrap_err(), ProposalError::EmptyStateSpace);
        assert_eq!(uniform_proposal(2, 0).unwrap_err(), ProposalError::EmptyNodes);
    }

    #[test]
    fn local_only_mix_normalizes_local_weights() {
        let p = local_global_proposal(&[vec![2.0, 1.0, 1.0]], &[1.0, 1.0, 1.0], 1.0).unwrap();
        assert_eq!(p.node(0), &[0.5, 0.25, 0.25]);
    }

    #[test]
    fn even_mix_of_disjoint_signals() {
        // Local mass on state 0, global mass on state 1: an even mix puts
        // half the proposal on each.
        let p = local_global_proposal(&[vec![1.0, 0.0]], &[0.0, 1.0], 0.5).unwrap();
        assert_eq!(p.node(0), &[0.5, 0.5]);
    }

    #[test]
    fn uniform_inputs_stay_uniform_under_any_mix() {
        for mix in [0.0, 0.3, 1.0] {
            let local = vec![vec![1.0; 4]; 2];
            let p = local_global_proposal(&local, &[1.0; 4], mix).unwrap();
            for node in 0..2 {
                for &w in p.node(node) {
                    assert_relative_eq!(w, 0.25, max_relative = 1e-12);
                }
            }
        }
    }

    #[test]
    fn degenerate_masses_are_errors() {
        assert_eq!(
            local_global_proposal(&[vec![0.0, 0.0]], &[1.0, 1.0], 0.5).unwrap_err(),
            ProposalError::ZeroLocalMass { node: 0 }
        );
        assert_eq!(
            local_global_proposal(&[vec![1.0, 1.0]], &[0.0, 0.0], 0.5).unwrap_err(),
            ProposalError::ZeroGlobalMass
        );
        assert_eq!(
            local_global_proposal(&[vec![1.0, 1.0]], &[1.0, 1.0], 1.5).unwrap_err(),
            ProposalError::MixOutOfRange { mix: 1.5 }
        );
    }

    #[test]
    fn oracle_on_uniform_potentials_is_uniform() {
        let potentials = ChainPotentials::uniform(3, 4).unwrap();
        let forward = exact_forward(&potentials).unwrap();
        let p = oracle_proposal(&potentials, &forward).unwrap();
        for t in 0..4 {
            for &w in p.node(t) {
                assert_relative_eq!(w, 1.0 / 3.0, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn oracle_single_state_is_point_mass() {
        let potentials = ChainPotentials::uniform(1, 3).unwrap();
        let forward = exact_forward(&potentials).unwrap();
        let p = oracle_proposal(&potentials, &forward).unwrap();
        for t in 0..3 {
            assert_eq!(p.node(t), &[1.0]);
        }
    }

    proptest! {
        #[test]
        fn mixed_proposals_are_distributions(
            local in proptest::collection::vec(
                proptest::collection::vec(0.0..10.0f64, 5),
                1..6,
            ),
            global in proptest::collection::vec(0.0..10.0f64, 5),
            mix in 0.0..=1.0f64,
        ) {
            prop_assume!(local.iter().all(|w| w.iter().sum::<f64>() > 0.0));
            prop_assume!(global.iter().sum::<f64>() > 0.0);
            let p = local_global_proposal(&local, &global, mix).unwrap();
            for node in 0..p.num_nodes() {
                let weights = p.node(node);
                prop_assert!(weights.iter().all(|&w| w >= 0.0));
                prop_assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
