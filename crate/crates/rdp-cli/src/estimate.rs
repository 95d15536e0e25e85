//! `rdp estimate`: evaluate one estimator on one simulated instance and
//! report every replicate against the exact reference.

use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use rdp_core::harness::{evaluate_chain, evaluate_tree, EvalConfig, Quantity, TailProfile};
use rdp_core::hypertree::InsideBlocks;
use serde_json::json;

use crate::config::{
    parse_model, parse_profile, parse_proposal, parse_quantity, resolve, resolve_opt,
    resolve_path, validate_counts, CliError, FileConfig, Model, ProposalKind, QuantityArg,
};
use crate::report;
use crate::setup;

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Model structure: chain | tree.
    #[arg(long, value_parser = parse_model)]
    model: Option<Model>,
    /// Quantity to estimate: logz | entropy (entropy is chain-only).
    #[arg(long, value_parser = parse_quantity)]
    quantity: Option<QuantityArg>,
    /// Number of states per node.
    #[arg(long)]
    n: Option<usize>,
    /// Sequence length.
    #[arg(long)]
    t: Option<usize>,
    /// Exact head size.
    #[arg(long)]
    k1: Option<usize>,
    /// Tail sample count.
    #[arg(long)]
    k2: Option<usize>,
    /// Proposal: uniform | local-global | oracle (oracle is chain-only).
    #[arg(long, value_parser = parse_proposal)]
    proposal: Option<ProposalKind>,
    /// Tail profile of the simulated instance: dense | intermediate | long-tail.
    #[arg(long, value_parser = parse_profile)]
    profile: Option<TailProfile>,
    /// Number of replicates.
    #[arg(long)]
    runs: Option<usize>,
    /// Master seed; fixes the instance and every replicate.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for replicates (results are identical for any value).
    #[arg(long)]
    jobs: Option<usize>,
    /// Write the per-replicate CSV here instead of standard output.
    #[arg(long, value_name = "PATH")]
    csv: Option<PathBuf>,
    /// Also write a JSON report (replicates plus metadata) here.
    #[arg(long, value_name = "PATH")]
    json: Option<PathBuf>,
}

struct EstimateConfig {
    model: Model,
    quantity: QuantityArg,
    n: usize,
    t: usize,
    k1: usize,
    k2: usize,
    proposal: ProposalKind,
    profile: TailProfile,
    runs: usize,
    seed: u64,
    jobs: Option<usize>,
    csv: Option<PathBuf>,
    json: Option<PathBuf>,
}

impl EstimateArgs {
    fn resolve(&self, file: &FileConfig) -> Result<EstimateConfig, CliError> {
        use crate::config::resolve_with;
        let config = EstimateConfig {
            model: resolve_with(&self.model, file, "model", Model::Chain, parse_model)?,
            quantity: resolve_with(&self.quantity, file, "quantity", QuantityArg::LogZ, parse_quantity)?,
            n: resolve(&self.n, file, "n", 50)?,
            t: resolve(&self.t, file, "t", 8)?,
            k1: resolve(&self.k1, file, "k1", 5)?,
            k2: resolve(&self.k2, file, "k2", 5)?,
            proposal: resolve_with(
                &self.proposal,
                file,
                "proposal",
                ProposalKind::LocalGlobal,
                parse_proposal,
            )?,
            profile: resolve_with(
                &self.profile,
                file,
                "profile",
                TailProfile::LongTail,
                parse_profile,
            )?,
            runs: resolve(&self.runs, file, "runs", 100)?,
            seed: resolve(&self.seed, file, "seed", 0)?,
            jobs: resolve_opt(&self.jobs, file, "jobs")?,
            csv: resolve_path(&self.csv, file, "csv"),
            json: resolve_path(&self.json, file, "json"),
        };
        validate_counts(config.n, config.t, config.k1, config.k2, config.runs)?;
        if config.model == Model::Tree && config.quantity == QuantityArg::Entropy {
            return Err(CliError::Config(
                "entropy estimation is chain-only; trees support logz".into(),
            ));
        }
        Ok(config)
    }
}

pub fn run(args: &EstimateArgs, file: &FileConfig) -> Result<(), CliError> {
    let config = args.resolve(file)?;
    let started = Instant::now();
    let eval = EvalConfig {
        k1: config.k1,
        k2: config.k2,
        runs: config.runs,
        seed: config.seed,
        jobs: config.jobs,
    };
    let (report, temperature) = match config.model {
        Model::Chain => {
            let sim = setup::simulated_chain(config.n, config.t, config.profile, config.seed)?;
            let proposal = setup::chain_proposal(config.proposal, &sim.potentials)?;
            let quantity = match config.quantity {
                QuantityArg::LogZ => Quantity::LogPartition,
                QuantityArg::Entropy => Quantity::Entropy,
            };
            let report = evaluate_chain(
                &sim.potentials,
                quantity,
                &proposal,
                config.proposal.name(),
                &eval,
            )?;
            (report, sim.temperature)
        }
        Model::Tree => {
            let sim = setup::simulated_tree(config.n, config.t, config.profile, config.seed)?;
            let proposal = setup::tree_proposal(config.proposal, &sim.potentials)?;
            let report = evaluate_tree(
                &sim.potentials,
                &proposal,
                config.proposal.name(),
                InsideBlocks::FullCross,
                &eval,
            )?;
            (report, sim.temperature)
        }
    };

    let rows: Vec<String> = report
        .replicates
        .iter()
        .enumerate()
        .map(|(run, &estimate)| {
            format!(
                "{run},{},{},{}",
                report::sig(estimate),
                report::sig(report.exact),
                report::sig(estimate - report.exact)
            )
        })
        .collect();
    let csv = report::csv_document("run,estimate,exact,error", &rows);
    report::emit(config.csv.as_deref(), &csv)?;

    if let Some(path) = &config.json {
        let doc = json!({
            "schema": report::SCHEMA_LINE.trim_start_matches("# "),
            "command": "estimate",
            "model": config.model.name(),
            "quantity": config.quantity.name(),
            "num_states": config.n,
            "seq_len": config.t,
            "k1": config.k1,
            "k2": config.k2,
            "proposal": config.proposal.name(),
            "profile": config.profile.name(),
            "runs": config.runs,
            "seed": config.seed,
            "jobs": config.jobs,
            "temperature": temperature,
            "exact": report.exact,
            "bias": report.bias,
            "variance": report.variance,
            "mse": report.mse,
            "replicates": report.replicates,
            "wall_clock_seconds": started.elapsed().as_secs_f64(),
        });
        report::write_json(path, &doc)?;
    }
    Ok(())
}
