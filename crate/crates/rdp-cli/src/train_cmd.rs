//! `rdp train`: run the training demos and write loss curves (and, for the
//! autoencoder, aggregated-posterior histograms) into an output directory.

use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use rdp_core::train::{
    fit_marginal_likelihood, fit_toy_autoencoder, never_used_states, sample_dataset, tail_mass,
    EmbeddingParams, EstimatorArm, TrainConfig,
};
use serde_json::json;

use crate::config::{resolve, resolve_path, CliError, FileConfig};
use crate::report;

/// Embedding scale of the ground-truth model; large enough that emissions
/// and transitions are long-tailed rather than uniform.
const DEFAULT_TRUTH_SCALE: f64 = 1.3;
/// Embedding scale at initialization.
const INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Demo {
    Likelihood,
    Autoencoder,
}

impl Demo {
    fn name(self) -> &'static str {
        match self {
            Demo::Likelihood => "likelihood",
            Demo::Autoencoder => "autoencoder",
        }
    }
}

fn parse_demo(s: &str) -> Result<Demo, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "likelihood" => Ok(Demo::Likelihood),
        "autoencoder" => Ok(Demo::Autoencoder),
        other => Err(format!("unknown demo {other:?} (expected likelihood|autoencoder)")),
    }
}

fn parse_arms(s: &str) -> Result<Vec<EstimatorArm>, String> {
    let arms: Result<Vec<EstimatorArm>, String> = s
        .split(',')
        .map(|part| {
            let part = part.trim().to_ascii_lowercase();
            EstimatorArm::parse(&part)
                .ok_or_else(|| format!("unknown arm {part:?} (expected exact|rdp|topk)"))
        })
        .collect();
    let arms = arms?;
    if arms.is_empty() {
        return Err("at least one arm is required".into());
    }
    Ok(arms)
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Which demo to run: likelihood | autoencoder.
    #[arg(long, value_parser = parse_demo)]
    demo: Option<Demo>,
    /// Comma-separated training arms: exact, rdp, topk.
    #[arg(long)]
    arms: Option<String>,
    /// Number of latent states.
    #[arg(long)]
    n: Option<usize>,
    /// Vocabulary size of the observed symbols.
    #[arg(long)]
    vocab: Option<usize>,
    /// Embedding dimension.
    #[arg(long)]
    dim: Option<usize>,
    /// Sequence length.
    #[arg(long)]
    t: Option<usize>,
    /// Number of training sequences to synthesize.
    #[arg(long)]
    seqs: Option<usize>,
    /// Gradient-ascent steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Exact head size for the restricted arms.
    #[arg(long)]
    k1: Option<usize>,
    /// Tail sample count for the rdp arm.
    #[arg(long)]
    k2: Option<usize>,
    /// Master seed (ground truth, data, initialization, training draws).
    #[arg(long)]
    seed: Option<u64>,
    /// Softmax temperature for relaxed posterior samples.
    #[arg(long)]
    temperature: Option<f64>,
    /// Decode hard samples, routing gradients through the relaxed ones.
    #[arg(long)]
    straight_through: bool,
    /// Embedding scale of the synthetic ground-truth model.
    #[arg(long)]
    truth_scale: Option<f64>,
    /// Directory for loss curves and histograms (created if missing).
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

struct TrainRunConfig {
    demo: Demo,
    arms: Vec<EstimatorArm>,
    n: usize,
    vocab: usize,
    dim: usize,
    t: usize,
    seqs: usize,
    steps: usize,
    lr: f64,
    k1: usize,
    k2: usize,
    seed: u64,
    temperature: f64,
    straight_through: bool,
    truth_scale: f64,
    out_dir: PathBuf,
}

impl TrainArgs {
    fn resolve(&self, file: &FileConfig) -> Result<TrainRunConfig, CliError> {
        use crate::config::resolve_with;
        let arms_raw: Option<String> = self.arms.clone();
        let arms = match resolve_opt_string(&arms_raw, file, "arms") {
            Some(raw) => parse_arms(&raw).map_err(CliError::Config)?,
            None => vec![EstimatorArm::Rdp, EstimatorArm::TopK],
        };
        let config = TrainRunConfig {
            demo: resolve_with(&self.demo, file, "demo", Demo::Likelihood, parse_demo)?,
            arms,
            n: resolve(&self.n, file, "n", 16)?,
            vocab: resolve(&self.vocab, file, "vocab", 8)?,
            dim: resolve(&self.dim, file, "dim", 4)?,
            t: resolve(&self.t, file, "t", 6)?,
            seqs: resolve(&self.seqs, file, "seqs", 12)?,
            steps: resolve(&self.steps, file, "steps", 60)?,
            lr: resolve(&self.lr, file, "lr", 0.05)?,
            k1: resolve(&self.k1, file, "k1", 3)?,
            k2: resolve(&self.k2, file, "k2", 3)?,
            seed: resolve(&self.seed, file, "seed", 0)?,
            temperature: resolve(&self.temperature, file, "temperature", 1.0)?,
            straight_through: self.straight_through
                || matches!(file_bool(file, "straight-through"), Some(true)),
            truth_scale: resolve(&self.truth_scale, file, "truth-scale", DEFAULT_TRUTH_SCALE)?,
            out_dir: resolve_path(&self.out_dir, file, "out-dir")
                .unwrap_or_else(|| PathBuf::from("rdp-train")),
        };
        if config.n == 0 || config.vocab == 0 || config.dim == 0 {
            return Err(CliError::Config("n, vocab, and dim must be at least 1".into()));
        }
        if config.t == 0 || config.seqs == 0 || config.steps == 0 {
            return Err(CliError::Config("t, seqs, and steps must be at least 1".into()));
        }
        if config.k1 + config.k2 > config.n {
            return Err(CliError::Config(format!(
                "K exceeds N: K1 + K2 = {} > N = {}",
                config.k1 + config.k2,
                config.n
            )));
        }
        if !(config.lr.is_finite() && config.lr > 0.0) {
            return Err(CliError::Config(format!("learning rate {} must be positive", config.lr)));
        }
        if !(config.temperature.is_finite() && config.temperature > 0.0) {
            return Err(CliError::Config(format!(
                "temperature {} must be positive",
                config.temperature
            )));
        }
        Ok(config)
    }
}

fn resolve_opt_string(flag: &Option<String>, file: &FileConfig, key: &str) -> Option<String> {
    match crate::config::resolve_opt::<String>(flag, file, key) {
        Ok(value) => value,
        Err(_) => None,
    }
}

fn file_bool(file: &FileConfig, key: &str) -> Option<bool> {
    resolve_opt_string(&None, file, key).map(|raw| matches!(raw.as_str(), "true" | "1" | "yes"))
}

pub fn run(args: &TrainArgs, file: &FileConfig) -> Result<(), CliError> {
    let config = args.resolve(file)?;
    let started = Instant::now();
    std::fs::create_dir_all(&config.out_dir)?;

    let truth =
        EmbeddingParams::random(config.n, config.vocab, config.dim, config.truth_scale, config.seed)?;
    let data = sample_dataset(&truth, config.seqs, config.t, config.seed.wrapping_add(1))?;
    let init = EmbeddingParams::random(
        config.n,
        config.vocab,
        config.dim,
        INIT_SCALE,
        config.seed.wrapping_add(2),
    )?;

    let mut arm_summaries = Vec::with_capacity(config.arms.len());
    for &arm in &config.arms {
        let train_config = TrainConfig {
            arm,
            k1: config.k1,
            k2: config.k2,
            steps: config.steps,
            learning_rate: config.lr,
            seed: config.seed.wrapping_add(3),
            temperature: config.temperature,
            straight_through: config.straight_through,
        };
        match config.demo {
            Demo::Likelihood => {
                let curve = fit_marginal_likelihood(&data, init.clone(), &train_config)?;
                let rows: Vec<String> = curve
                    .nll
                    .iter()
                    .enumerate()
                    .map(|(step, &nll)| format!("{step},{}", report::sig(nll)))
                    .collect();
                let path = config.out_dir.join(format!("loss_{}.csv", arm.name()));
                report::write_text(&path, &report::csv_document("step,nll", &rows))?;
                let final_nll = *curve.nll.last().expect("curve has the initial point");
                println!("{} final_nll {}", arm.name(), report::sig(final_nll));
                arm_summaries.push(json!({
                    "arm": arm.name(),
                    "loss_csv": path.to_string_lossy(),
                    "initial_nll": curve.nll[0],
                    "final_nll": final_nll,
                }));
            }
            Demo::Autoencoder => {
                let report_ae = fit_toy_autoencoder(&data, init.clone(), &train_config)?;
                let elbo_rows: Vec<String> = report_ae
                    .elbo
                    .iter()
                    .enumerate()
                    .map(|(step, &elbo)| format!("{step},{}", report::sig(elbo)))
                    .collect();
                let elbo_path = config.out_dir.join(format!("elbo_{}.csv", arm.name()));
                report::write_text(&elbo_path, &report::csv_document("step,elbo", &elbo_rows))?;
                let hist_rows: Vec<String> = report_ae
                    .histogram
                    .iter()
                    .enumerate()
                    .map(|(state, &frequency)| format!("{state},{}", report::sig(frequency)))
                    .collect();
                let hist_path = config.out_dir.join(format!("histogram_{}.csv", arm.name()));
                report::write_text(
                    &hist_path,
                    &report::csv_document("state,frequency", &hist_rows),
                )?;
                let unused = never_used_states(&report_ae.histogram);
                let tail = tail_mass(&report_ae.histogram, config.k1);
                println!(
                    "{} never_used {unused} tail_mass {}",
                    arm.name(),
                    report::sig(tail)
                );
                arm_summaries.push(json!({
                    "arm": arm.name(),
                    "elbo_csv": elbo_path.to_string_lossy(),
                    "histogram_csv": hist_path.to_string_lossy(),
                    "final_elbo": report_ae.elbo.last(),
                    "never_used_states": unused,
                    "tail_mass": tail,
                }));
            }
        }
    }

    let summary = json!({
        "schema": report::SCHEMA_LINE.trim_start_matches("# "),
        "command": "train",
        "demo": config.demo.name(),
        "arms": config.arms.iter().map(|a| a.name()).collect::<Vec<_>>(),
        "num_states": config.n,
        "vocab": config.vocab,
        "dim": config.dim,
        "seq_len": config.t,
        "num_seqs": config.seqs,
        "steps": config.steps,
        "learning_rate": config.lr,
        "k1": config.k1,
        "k2": config.k2,
        "seed": config.seed,
        "temperature": config.temperature,
        "straight_through": config.straight_through,
        "truth_scale": config.truth_scale,
        "results": arm_summaries,
        "wall_clock_seconds": started.elapsed().as_secs_f64(),
    });
    report::write_json(&config.out_dir.join("summary.json"), &summary)?;
    Ok(())
}
