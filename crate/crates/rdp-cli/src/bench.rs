//! `rdp bench`: sweep truncation and randomization budgets across tail
//! profiles, one table row per (method, budget, profile) cell plus an exact
//! reference row per profile.

use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use rdp_core::harness::{
    evaluate_chain, evaluate_tree, EstimateReport, EvalConfig, Quantity, TailProfile,
};
use rdp_core::hypertree::InsideBlocks;
use serde_json::json;

use crate::config::{
    parse_model, parse_proposal, parse_quantity, resolve, resolve_opt, resolve_path,
    resolve_with, validate_counts, CliError, FileConfig, Model, ProposalKind, QuantityArg,
};
use crate::report;
use crate::setup;

/// Coverage levels swept by the bench, as percentages of `N`.
const K_PERCENTS: [usize; 3] = [1, 10, 20];

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Model structure: chain | tree.
    #[arg(long, value_parser = parse_model)]
    model: Option<Model>,
    /// Quantity to benchmark: logz | entropy (entropy is chain-only).
    #[arg(long, value_parser = parse_quantity)]
    quantity: Option<QuantityArg>,
    /// Number of states per node.
    #[arg(long)]
    n: Option<usize>,
    /// Sequence length.
    #[arg(long)]
    t: Option<usize>,
    /// Proposal shared by every cell: uniform | local-global | oracle.
    #[arg(long, value_parser = parse_proposal)]
    proposal: Option<ProposalKind>,
    /// Replicates per cell.
    #[arg(long)]
    runs: Option<usize>,
    /// Master seed; instances and replicate streams derive from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for replicates.
    #[arg(long)]
    jobs: Option<usize>,
    /// Write the bench table CSV here instead of standard output.
    #[arg(long, value_name = "PATH")]
    csv: Option<PathBuf>,
    /// Also write a JSON report here.
    #[arg(long, value_name = "PATH")]
    json: Option<PathBuf>,
}

struct BenchConfig {
    model: Model,
    quantity: QuantityArg,
    n: usize,
    t: usize,
    proposal: ProposalKind,
    runs: usize,
    seed: u64,
    jobs: Option<usize>,
    csv: Option<PathBuf>,
    json: Option<PathBuf>,
}

impl BenchArgs {
    fn resolve(&self, file: &FileConfig) -> Result<BenchConfig, CliError> {
        let config = BenchConfig {
            model: resolve_with(&self.model, file, "model", Model::Chain, parse_model)?,
            quantity: resolve_with(&self.quantity, file, "quantity", QuantityArg::LogZ, parse_quantity)?,
            n: resolve(&self.n, file, "n", 500)?,
            t: resolve(&self.t, file, "t", 20)?,
            proposal: resolve_with(
                &self.proposal,
                file,
                "proposal",
                ProposalKind::LocalGlobal,
                parse_proposal,
            )?,
            runs: resolve(&self.runs, file, "runs", 100)?,
            seed: resolve(&self.seed, file, "seed", 0)?,
            jobs: resolve_opt(&self.jobs, file, "jobs")?,
            csv: resolve_path(&self.csv, file, "csv"),
            json: resolve_path(&self.json, file, "json"),
        };
        validate_counts(config.n, config.t, 0, 0, config.runs)?;
        if config.model == Model::Tree && config.quantity == QuantityArg::Entropy {
            return Err(CliError::Config(
                "entropy estimation is chain-only; trees support logz".into(),
            ));
        }
        Ok(config)
    }
}

struct BenchRow {
    method: &'static str,
    k_percent: usize,
    k1: usize,
    k2: usize,
    profile: TailProfile,
    report: EstimateReport,
}

/// Budget split for the randomized method: the whole budget goes to the
/// exact head except for a single importance-weighted tail draw, the
/// default split used throughout the harness.
fn rdp_split(k: usize) -> (usize, usize) {
    (k.saturating_sub(1), 1)
}

pub fn run(args: &BenchArgs, file: &FileConfig) -> Result<(), CliError> {
    let config = args.resolve(file)?;
    let started = Instant::now();
    let mut rows: Vec<BenchRow> = Vec::new();
    let mut temperatures = serde_json::Map::new();

    for (index, profile) in TailProfile::ALL.into_iter().enumerate() {
        let instance_seed = config.seed.wrapping_add(index as u64);
        // One instance and one proposal per profile, shared by every cell.
        enum Instance {
            Chain(rdp_core::harness::SimulatedChain, rdp_core::proposals::Proposal, Quantity),
            Tree(rdp_core::harness::SimulatedTree, rdp_core::proposals::Proposal),
        }
        let instance = match config.model {
            Model::Chain => {
                let sim = setup::simulated_chain(config.n, config.t, profile, instance_seed)?;
                let proposal = setup::chain_proposal(config.proposal, &sim.potentials)?;
                let quantity = match config.quantity {
                    QuantityArg::LogZ => Quantity::LogPartition,
                    QuantityArg::Entropy => Quantity::Entropy,
                };
                Instance::Chain(sim, proposal, quantity)
            }
            Model::Tree => {
                let sim = setup::simulated_tree(config.n, config.t, profile, instance_seed)?;
                let proposal = setup::tree_proposal(config.proposal, &sim.potentials)?;
                Instance::Tree(sim, proposal)
            }
        };
        let evaluate = |k1: usize, k2: usize, runs: usize| -> Result<EstimateReport, CliError> {
            let eval = EvalConfig { k1, k2, runs, seed: config.seed, jobs: config.jobs };
            match &instance {
                Instance::Chain(sim, proposal, quantity) => Ok(evaluate_chain(
                    &sim.potentials,
                    *quantity,
                    proposal,
                    config.proposal.name(),
                    &eval,
                )?),
                Instance::Tree(sim, proposal) => Ok(evaluate_tree(
                    &sim.potentials,
                    proposal,
                    config.proposal.name(),
                    InsideBlocks::FullCross,
                    &eval,
                )?),
            }
        };

        let temperature = match &instance {
            Instance::Chain(sim, ..) => sim.temperature,
            Instance::Tree(sim, ..) => sim.temperature,
        };
        temperatures.insert(profile.name().to_string(), json!(temperature));

        rows.push(BenchRow {
            method: "exact",
            k_percent: 100,
            k1: config.n,
            k2: 0,
            profile,
            report: evaluate(config.n, 0, 1)?,
        });
        for percent in K_PERCENTS {
            let k = ((percent * config.n) / 100).max(1);
            rows.push(BenchRow {
                method: "topk",
                k_percent: percent,
                k1: k,
                k2: 0,
                profile,
                report: evaluate(k, 0, config.runs)?,
            });
            let (k1, k2) = rdp_split(k);
            rows.push(BenchRow {
                method: "rdp",
                k_percent: percent,
                k1,
                k2,
                profile,
                report: evaluate(k1, k2, config.runs)?,
            });
        }
    }

    let csv_rows: Vec<String> = rows
        .iter()
        .map(|row| {
            format!(
                "{},{},{},{},{},{},{},{},{}",
                row.method,
                row.k_percent,
                row.k1,
                row.k2,
                row.profile.name(),
                report::sig(row.report.exact),
                report::sig(row.report.bias),
                report::sig(row.report.variance),
                report::sig(row.report.mse)
            )
        })
        .collect();
    let csv = report::csv_document(
        "method,k_percent,k1,k2,profile,exact,bias,variance,mse",
        &csv_rows,
    );
    report::emit(config.csv.as_deref(), &csv)?;

    if let Some(path) = &config.json {
        let json_rows: Vec<serde_json::Value> = rows
            .iter()
            .map(|row| {
                json!({
                    "method": row.method,
                    "k_percent": row.k_percent,
                    "k1": row.k1,
                    "k2": row.k2,
                    "profile": row.profile.name(),
                    "exact": row.report.exact,
                    "bias": row.report.bias,
                    "variance": row.report.variance,
                    "mse": row.report.mse,
                })
            })
            .collect();
        let doc = json!({
            "schema": report::SCHEMA_LINE.trim_start_matches("# "),
            "command": "bench",
            "model": config.model.name(),
            "quantity": config.quantity.name(),
            "num_states": config.n,
            "seq_len": config.t,
            "proposal": config.proposal.name(),
            "runs": config.runs,
            "seed": config.seed,
            "jobs": config.jobs,
            "temperatures": temperatures,
            "rows": json_rows,
            "wall_clock_seconds": started.elapsed().as_secs_f64(),
        });
        report::write_json(path, &doc)?;
    }
    Ok(())
}
