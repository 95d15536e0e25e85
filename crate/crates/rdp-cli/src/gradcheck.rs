//! `rdp gradcheck`: compare tape gradients of the randomized estimators
//! (log-partition, entropy, and relaxed samples) against central finite
//! differences on a batch of small simulated chains. Exit 0 exactly when
//! the worst relative error stays below the tolerance.

use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use rdp_core::autodiff::{gradcheck, Tape, Var};
use rdp_core::chain::{
    exact_forward, gumbel_backward_sample, randomized_entropy, randomized_forward,
    ChainPotentials, IndexSelection,
};
use rdp_core::harness::TailProfile;
use rdp_core::numerics::{gumbel_noise, RdpRng, Scalar};
use rdp_core::proposals::uniform_proposal;
use serde_json::json;

use crate::config::{resolve, resolve_path, validate_counts, CliError, FileConfig};
use crate::report;
use crate::setup;

/// Largest acceptable `|finite difference - gradient| / max(1, |gradient|)`.
const TOLERANCE: f64 = 1e-4;
/// Central-difference step.
const FD_STEP: f64 = 1e-5;

#[derive(Debug, Args)]
pub struct GradcheckArgs {
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
    /// Number of random instances to check.
    #[arg(long)]
    instances: Option<usize>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write a JSON report here.
    #[arg(long, value_name = "PATH")]
    json: Option<PathBuf>,
}

struct GradcheckConfig {
    n: usize,
    t: usize,
    k1: usize,
    k2: usize,
    instances: usize,
    seed: u64,
    json: Option<PathBuf>,
}

impl GradcheckArgs {
    fn resolve(&self, file: &FileConfig) -> Result<GradcheckConfig, CliError> {
        let config = GradcheckConfig {
            n: resolve(&self.n, file, "n", 8)?,
            t: resolve(&self.t, file, "t", 5)?,
            k1: resolve(&self.k1, file, "k1", 3)?,
            k2: resolve(&self.k2, file, "k2", 2)?,
            instances: resolve(&self.instances, file, "instances", 20)?,
            seed: resolve(&self.seed, file, "seed", 0)?,
            json: resolve_path(&self.json, file, "json"),
        };
        validate_counts(config.n, config.t, config.k1, config.k2, 1)?;
        if config.instances == 0 {
            return Err(CliError::Config("instances must be at least 1".into()));
        }
        Ok(config)
    }
}

/// Reassemble chain potentials from the flat leaf vector handed to the
/// finite-difference driver: `n` initial scores then `t-1` row-major
/// transition matrices.
fn rebuild<'t>(xs: &[Var<'t>], n: usize, t_len: usize) -> ChainPotentials<Var<'t>> {
    let init = xs[..n].to_vec();
    let pairwise = (0..t_len - 1)
        .map(|s| xs[n + s * n * n..n + (s + 1) * n * n].to_vec())
        .collect();
    ChainPotentials::new(init, pairwise).expect("dimensions are fixed by construction")
}

fn flatten(potentials: &ChainPotentials<f64>) -> Vec<f64> {
    let n = potentials.num_states();
    let t_len = potentials.seq_len();
    let mut point = Vec::with_capacity(n + (t_len - 1) * n * n);
    for i in 0..n {
        point.push(potentials.init_at(i));
    }
    for s in 0..t_len - 1 {
        for j in 0..n {
            for i in 0..n {
                point.push(potentials.pairwise_at(s, j, i));
            }
        }
    }
    point
}

/// Nodes recorded by one exact and one randomized forward pass at the
/// configured sizes (memory-footprint witness for the report).
fn tape_node_counts(
    potentials: &ChainPotentials<f64>,
    selection: &IndexSelection,
) -> Result<(usize, usize), CliError> {
    let point = flatten(potentials);
    let n = potentials.num_states();
    let t_len = potentials.seq_len();
    let exact = {
        let tape = Tape::new();
        let xs: Vec<Var<'_>> = point.iter().map(|&v| tape.leaf(v)).collect();
        exact_forward(&rebuild(&xs, n, t_len))?;
        tape.len()
    };
    let randomized = {
        let tape = Tape::new();
        let xs: Vec<Var<'_>> = point.iter().map(|&v| tape.leaf(v)).collect();
        randomized_forward(&rebuild(&xs, n, t_len), selection)?;
        tape.len()
    };
    Ok((exact, randomized))
}

pub fn run(args: &GradcheckArgs, file: &FileConfig) -> Result<(), CliError> {
    let config = args.resolve(file)?;
    let started = Instant::now();
    let master = RdpRng::from_seed(config.seed);
    let proposal = uniform_proposal(config.n, config.t)?;

    let mut worst = [0.0_f64; 3];
    let mut instance_rows = Vec::with_capacity(config.instances);
    let mut node_counts = None;

    for index in 0..config.instances {
        let profile = TailProfile::ALL[index % TailProfile::ALL.len()];
        let sim = setup::simulated_chain(
            config.n,
            config.t,
            profile,
            config.seed.wrapping_add(index as u64),
        )?;
        let point = flatten(&sim.potentials);
        let rng = master.split(index as u64);
        let selection = IndexSelection::from_proposal(&proposal, config.k1, config.k2, &rng)?;
        if node_counts.is_none() {
            node_counts = Some(tape_node_counts(&sim.potentials, &selection)?);
        }

        let mut noise_rng = rng.split(1);
        let noise: Vec<Vec<f64>> = (0..config.t)
            .map(|s| gumbel_noise(&mut noise_rng, selection.step(s).active_states().len()))
            .collect();
        // Fixed linear functional over the soft rows, so the relaxed sample
        // reduces to a scalar for the finite-difference driver.
        let mut coeff_rng = rng.split(2);
        let coefficients: Vec<Vec<f64>> = (0..config.t)
            .map(|s| {
                (0..selection.step(s).active_states().len())
                    .map(|_| coeff_rng.standard_normal())
                    .collect()
            })
            .collect();

        let n = config.n;
        let t_len = config.t;
        let errors = [
            gradcheck(
                |_tape, xs| {
                    let potentials = rebuild(xs, n, t_len);
                    randomized_forward(&potentials, &selection).expect("selection fits").log_z
                },
                &point,
                FD_STEP,
            )?,
            gradcheck(
                |_tape, xs| {
                    let potentials = rebuild(xs, n, t_len);
                    let forward =
                        randomized_forward(&potentials, &selection).expect("selection fits");
                    randomized_entropy(&potentials, &selection, &forward)
                        .expect("forward matches selection")
                },
                &point,
                FD_STEP,
            )?,
            gradcheck(
                |_tape, xs| {
                    let potentials = rebuild(xs, n, t_len);
                    let forward =
                        randomized_forward(&potentials, &selection).expect("selection fits");
                    let sample =
                        gumbel_backward_sample(&potentials, &selection, &forward, &noise, 0.7)
                            .expect("noise shaped by selection");
                    let mut total: Option<Var<'_>> = None;
                    for (s, row) in sample.soft.iter().enumerate() {
                        for (pos, &value) in row.iter().enumerate() {
                            let term = value.mul_const(coefficients[s][pos]);
                            total = Some(match total {
                                None => term,
                                Some(acc) => acc.add(term),
                            });
                        }
                    }
                    total.expect("at least one position")
                },
                &point,
                FD_STEP,
            )?,
        ];
        for (slot, err) in worst.iter_mut().zip(errors) {
            *slot = slot.max(err);
        }
        instance_rows.push(json!({
            "instance": index,
            "profile": profile.name(),
            "logz_rel_err": errors[0],
            "entropy_rel_err": errors[1],
            "soft_sample_rel_err": errors[2],
        }));
    }

    let (nodes_exact, nodes_randomized) = node_counts.expect("at least one instance");
    let max_err = worst.iter().fold(0.0_f64, |a, &b| a.max(b));
    println!("logz_max_rel_err {}", report::sig(worst[0]));
    println!("entropy_max_rel_err {}", report::sig(worst[1]));
    println!("soft_sample_max_rel_err {}", report::sig(worst[2]));
    println!("max_rel_err {}", report::sig(max_err));
    println!("tape_nodes_exact {nodes_exact}");
    println!("tape_nodes_randomized {nodes_randomized}");

    if let Some(path) = &config.json {
        let doc = json!({
            "schema": report::SCHEMA_LINE.trim_start_matches("# "),
            "command": "gradcheck",
            "num_states": config.n,
            "seq_len": config.t,
            "k1": config.k1,
            "k2": config.k2,
            "instances": config.instances,
            "seed": config.seed,
            "tolerance": TOLERANCE,
            "fd_step": FD_STEP,
            "logz_max_rel_err": worst[0],
            "entropy_max_rel_err": worst[1],
            "soft_sample_max_rel_err": worst[2],
            "max_rel_err": max_err,
            "tape_nodes_exact": nodes_exact,
            "tape_nodes_randomized": nodes_randomized,
            "per_instance": instance_rows,
            "wall_clock_seconds": started.elapsed().as_secs_f64(),
        });
        report::write_json(path, &doc)?;
    }

    if max_err < TOLERANCE {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "gradient check failed: max relative error {max_err:e} >= {TOLERANCE:e}"
        )))
    }
}
