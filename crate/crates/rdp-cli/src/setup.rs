//! Shared instance simulation and proposal construction for the
//! estimation-style commands.

use rdp_core::chain::{exact_forward, ChainPotentials};
use rdp_core::harness::{
    chain_local_signal, global_signal, simulate_chain, simulate_tree, tree_local_signal,
    SimulatedChain, SimulatedTree, TailProfile,
};
use rdp_core::hypertree::HypertreePotentials;
use rdp_core::proposals::{local_global_proposal, oracle_proposal, uniform_proposal, Proposal};

use crate::config::{CliError, ProposalKind};

/// Mixing weight between local and global signals; fixed so that the two
/// cues contribute evenly.
const LOCAL_GLOBAL_MIX: f64 = 0.5;

pub fn simulated_chain(
    n: usize,
    t: usize,
    profile: TailProfile,
    seed: u64,
) -> Result<SimulatedChain, CliError> {
    simulate_chain(n, t, profile, seed).map_err(CliError::from)
}

pub fn simulated_tree(
    n: usize,
    t: usize,
    profile: TailProfile,
    seed: u64,
) -> Result<SimulatedTree, CliError> {
    simulate_tree(n, t, profile, seed).map_err(CliError::from)
}

pub fn chain_proposal(
    kind: ProposalKind,
    potentials: &ChainPotentials<f64>,
) -> Result<Proposal, CliError> {
    match kind {
        ProposalKind::Uniform => {
            Ok(uniform_proposal(potentials.num_states(), potentials.seq_len())?)
        }
        ProposalKind::LocalGlobal => {
            let local = chain_local_signal(potentials);
            let global = global_signal(&local);
            Ok(local_global_proposal(&local, &global, LOCAL_GLOBAL_MIX)?)
        }
        ProposalKind::Oracle => {
            let forward = exact_forward(potentials)?;
            Ok(oracle_proposal(potentials, &forward)?)
        }
    }
}

pub fn tree_proposal(
    kind: ProposalKind,
    potentials: &HypertreePotentials<f64>,
) -> Result<Proposal, CliError> {
    match kind {
        ProposalKind::Uniform => {
            let spans = rdp_core::hypertree::num_spans(potentials.seq_len());
            Ok(uniform_proposal(potentials.num_states(), spans)?)
        }
        ProposalKind::LocalGlobal => {
            let local = tree_local_signal(potentials);
            let global = global_signal(&local);
            Ok(local_global_proposal(&local, &global, LOCAL_GLOBAL_MIX)?)
        }
        ProposalKind::Oracle => {
            Err(CliError::Config("the oracle proposal is chain-only".into()))
        }
    }
}
