//! Desk-scale gradient-based training through the randomized estimators:
//! maximum-marginal-likelihood fitting of an embedding-factored chain model,
//! and a toy structured autoencoder trained with relaxed posterior samples
//! plus an entropy bonus.
//!
//! The model family scores a latent chain `x` against an observed symbol
//! sequence `y` with embedding-factored potentials: transitions are inner
//! products of state embeddings, emissions are inner products of a state
//! embedding with a fixed random feature vector looked up by the observed
//! symbol (a frozen stand-in for a learned encoder):
//!
//! ```text
//! transition(j, i) = e_j . e_i        emission(i, y_t) = e_i . r[y_t]
//! ```
//!
//! Marginal-likelihood training maximizes
//! `log p(y) = log Z_clamped(y) - log Z_marginal`, where the clamped chain
//! fixes the observed symbols and the marginal chain sums emissions over the
//! vocabulary. The training arms differ only in how the two partition
//! functions (and their gradients) are computed — exactly, by the randomized
//! estimator, or by pure head truncation; evaluation always reports the
//! exact negative log-likelihood.
//!
//! The autoencoder keeps the same encoder chain as a recognition model,
//! decodes relaxed posterior samples through a learned per-state symbol
//! table, and ascends the evidence bound
//! `E_q[log p(y | x)] + H(q) - T log N`. Gradients reach only the states a
//! selection keeps alive, which is exactly the mechanism that starves tail
//! states under pure head truncation.

use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::chain::{
    exact_forward, gumbel_backward_sample, randomized_entropy, randomized_forward, ChainError,
    ChainPotentials, IndexSelection,
};
use crate::numerics::{gumbel_noise, RdpRng, Scalar};
use crate::proposals::{local_global_proposal, Proposal, ProposalError};

/// Errors from model construction and training.
#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("model needs at least one state")]
    EmptyStates,
    #[error("model needs at least one vocabulary symbol")]
    EmptyVocab,
    #[error("embedding dimension must be at least 1")]
    EmptyDim,
    #[error("row {row} has dimension {got}, expected {expected}")]
    DimMismatch { row: usize, expected: usize, got: usize },
    #[error("non-finite parameter at row {row}, column {column}")]
    NonFiniteParam { row: usize, column: usize },
    #[error("symbol {symbol} outside vocabulary of {vocab}")]
    SymbolOutOfRange { symbol: usize, vocab: usize },
    #[error("observation sequences must be nonempty")]
    EmptySequence,
    #[error("training needs at least one sequence")]
    EmptyDataset,
    #[error("sequence {index} has length {got}, expected {expected}")]
    RaggedDataset { index: usize, expected: usize, got: usize },
    #[error("training diverged at step {step}: objective {value}")]
    Diverged { step: usize, value: f64 },
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Proposal(#[from] ProposalError),
}

/// Learned state embeddings plus the frozen per-symbol context features.
#[derive(Debug, Clone)]
pub struct EmbeddingParams {
    /// One learned embedding per latent state (`N x d`).
    pub state_embeddings: Vec<Vec<f64>>,
    /// One fixed random unit feature vector per vocabulary symbol (`V x d`);
    /// the demo's stand-in for an encoder's contextual representations.
    pub context_features: Vec<Vec<f64>>,
}

impl EmbeddingParams {
    pub fn new(
        state_embeddings: Vec<Vec<f64>>,
        context_features: Vec<Vec<f64>>,
    ) -> Result<Self, TrainError> {
        if state_embeddings.is_empty() {
            return Err(TrainError::EmptyStates);
        }
        if context_features.is_empty() {
            return Err(TrainError::EmptyVocab);
        }
        let dim = state_embeddings[0].len();
        if dim == 0 {
            return Err(TrainError::EmptyDim);
        }
        for (row, e) in state_embeddings.iter().chain(context_features.iter()).enumerate() {
            if e.len() != dim {
                return Err(TrainError::DimMismatch { row, expected: dim, got: e.len() });
            }
            for (column, v) in e.iter().enumerate() {
                if !v.is_finite() {
                    return Err(TrainError::NonFiniteParam { row, column });
                }
            }
        }
        Ok(EmbeddingParams { state_embeddings, context_features })
    }

    /// Random initialization: state embeddings are normal with the given
    /// scale, context features are random unit vectors.
    pub fn random(
        num_states: usize,
        vocab: usize,
        dim: usize,
        scale: f64,
        seed: u64,
    ) -> Result<Self, TrainError> {
        let mut rng = RdpRng::from_seed(seed);
        let state_embeddings = (0..num_states)
            .map(|_| (0..dim).map(|_| scale * rng.standard_normal()).collect())
            .collect();
        let context_features = (0..vocab)
            .map(|_| {
                let raw: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
                let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                raw.iter().map(|v| v / norm).collect()
            })
            .collect();
        EmbeddingParams::new(state_embeddings, context_features)
    }

    pub fn num_states(&self) -> usize {
        self.state_embeddings.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.context_features.len()
    }

    pub fn dim(&self) -> usize {
        self.state_embeddings[0].len()
    }
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = a[0].mul(b[0]);
    for k in 1..a.len() {
        acc = acc.add(a[k].mul(b[k]));
    }
    acc
}

fn dot_const<S: Scalar>(a: &[S], b: &[f64]) -> S {
    let mut acc = a[0].mul_const(b[0]);
    for k in 1..a.len() {
        acc = acc.add(a[k].mul_const(b[k]));
    }
    acc
}

/// Shared potential factors: everything the chains of one batch reuse.
/// Building these once per tape keeps per-sequence recording costs at the
/// dynamic program itself.
struct PotentialFactors<S> {
    /// `emissions[v][i] = e_i . r_v`.
    emissions: Vec<Vec<S>>,
    /// Per-symbol transition-plus-emission matrix, row-major `N x N`:
    /// `symbol_pairwise[v][j * N + i] = e_j . e_i + emissions[v][i]`.
    symbol_pairwise: Vec<Vec<S>>,
    /// `marginal_emission[i] = logsumexp_v emissions[v][i]`.
    marginal_emission: Vec<S>,
    /// `marginal_pairwise[j * N + i] = e_j . e_i + marginal_emission[i]`.
    marginal_pairwise: Vec<S>,
}

impl<S: Scalar> PotentialFactors<S> {
    fn compute(embeddings: &[Vec<S>], context_features: &[Vec<f64>]) -> Self {
        let n = embeddings.len();
        let vocab = context_features.len();
        let mut gram = vec![Vec::with_capacity(n); n];
        for j in 0..n {
            for i in 0..=j {
                let g = dot(&embeddings[j], &embeddings[i]);
                gram[j].push(g);
            }
        }
        let gram_at = |j: usize, i: usize| if i <= j { gram[j][i] } else { gram[i][j] };
        let emissions: Vec<Vec<S>> = (0..vocab)
            .map(|v| (0..n).map(|i| dot_const(&embeddings[i], &context_features[v])).collect())
            .collect();
        let symbol_pairwise: Vec<Vec<S>> = (0..vocab)
            .map(|v| {
                let mut matrix = Vec::with_capacity(n * n);
                for j in 0..n {
                    for i in 0..n {
                        matrix.push(gram_at(j, i).add(emissions[v][i]));
                    }
                }
                matrix
            })
            .collect();
        let marginal_emission: Vec<S> = (0..n)
            .map(|i| {
                let column: Vec<S> = (0..vocab).map(|v| emissions[v][i]).collect();
                S::logsumexp_slice(&column)
            })
            .collect();
        let mut marginal_pairwise = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                marginal_pairwise.push(gram_at(j, i).add(marginal_emission[i]));
            }
        }
        PotentialFactors { emissions, symbol_pairwise, marginal_emission, marginal_pairwise }
    }

    /// Chain clamped to the observed symbols: shares the per-symbol
    /// matrices, so assembling it records no new nodes.
    fn clamped_chain(&self, observation: &[usize]) -> Result<ChainPotentials<S>, TrainError> {
        let vocab = self.emissions.len();
        if observation.is_empty() {
            return Err(TrainError::EmptySequence);
        }
        for &y in observation {
            if y >= vocab {
                return Err(TrainError::SymbolOutOfRange { symbol: y, vocab });
            }
        }
        let init = self.emissions[observation[0]].clone();
        let pairwise = observation[1..]
            .iter()
            .map(|&y| self.symbol_pairwise[y].clone())
            .collect();
        Ok(ChainPotentials::new(init, pairwise)?)
    }

    /// Chain whose emissions are summed over the vocabulary.
    fn marginal_chain(&self, t: usize) -> Result<ChainPotentials<S>, TrainError> {
        if t == 0 {
            return Err(TrainError::EmptySequence);
        }
        Ok(ChainPotentials::new(
            self.marginal_emission.clone(),
            vec![self.marginal_pairwise.clone(); t - 1],
        )?)
    }

    /// Proposal signals per Eq.-of-the-model: local weight is the
    /// exponentiated emission of the observed symbol, global weight the
    /// embedding's L1 norm; mixed evenly.
    fn clamped_proposal(
        &self,
        embeddings: &[Vec<S>],
        observation: &[usize],
    ) -> Result<Proposal, ProposalError> {
        let local: Vec<Vec<f64>> = observation
            .iter()
            .map(|&y| normalized_exp(&self.emissions[y]))
            .collect();
        local_global_proposal(&local, &l1_norms(embeddings), 0.5)
    }

    fn marginal_proposal(
        &self,
        embeddings: &[Vec<S>],
        t: usize,
    ) -> Result<Proposal, ProposalError> {
        let local = vec![normalized_exp(&self.marginal_emission); t];
        local_global_proposal(&local, &l1_norms(embeddings), 0.5)
    }
}

fn normalized_exp<S: Scalar>(logits: &[S]) -> Vec<f64> {
    let max = logits.iter().map(|l| l.value()).fold(f64::NEG_INFINITY, f64::max);
    logits.iter().map(|l| (l.value() - max).exp()).collect()
}

fn l1_norms<S: Scalar>(embeddings: &[Vec<S>]) -> Vec<f64> {
    embeddings
        .iter()
        .map(|e| e.iter().map(|v| v.value().abs()).sum())
        .collect()
}

/// Chain potentials for one observation sequence under the embedding
/// factorization: `init(i) = e_i . r[y_0]`,
/// `pairwise[t][j][i] = e_j . e_i + e_i . r[y_{t+1}]`.
pub fn build_potentials<S: Scalar>(
    state_embeddings: &[Vec<S>],
    context_features: &[Vec<f64>],
    observation: &[usize],
) -> Result<ChainPotentials<S>, TrainError> {
    if state_embeddings.is_empty() {
        return Err(TrainError::EmptyStates);
    }
    if context_features.is_empty() {
        return Err(TrainError::EmptyVocab);
    }
    let dim = state_embeddings[0].len();
    if dim == 0 {
        return Err(TrainError::EmptyDim);
    }
    for (row, e) in state_embeddings.iter().enumerate() {
        if e.len() != dim {
            return Err(TrainError::DimMismatch { row, expected: dim, got: e.len() });
        }
    }
    for (row, r) in context_features.iter().enumerate() {
        if r.len() != dim {
            return Err(TrainError::DimMismatch { row, expected: dim, got: r.len() });
        }
    }
    let factors = PotentialFactors::compute(state_embeddings, context_features);
    factors.clamped_chain(observation)
}

/// How a training arm computes the partition functions it differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorArm {
    /// Full dynamic programs; the reference arm.
    Exact,
    /// Randomized head-plus-tail estimates (`k1` exact, `k2` sampled).
    Rdp,
    /// Pure head truncation (`k1` exact, no tail samples).
    TopK,
}

impl EstimatorArm {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorArm::Exact => "exact",
            EstimatorArm::Rdp => "rdp",
            EstimatorArm::TopK => "topk",
        }
    }

    pub fn parse(name: &str) -> Option<EstimatorArm> {
        [EstimatorArm::Exact, EstimatorArm::Rdp, EstimatorArm::TopK]
            .into_iter()
            .find(|a| a.name() == name)
    }
}

/// Settings for one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub arm: EstimatorArm,
    pub k1: usize,
    pub k2: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Softmax temperature for relaxed posterior samples.
    pub temperature: f64,
    /// Decode the hard sample but route gradients through the relaxed one
    /// (straight-through) instead of decoding the relaxed sample itself.
    pub straight_through: bool,
}

impl TrainConfig {
    /// The selection an arm uses for one restricted pass, or `None` when the
    /// arm runs the exact dynamic program.
    fn selection(
        &self,
        n: usize,
        t: usize,
        proposal: &Proposal,
        rng: &RdpRng,
    ) -> Result<Option<IndexSelection>, TrainError> {
        match self.arm {
            EstimatorArm::Exact => Ok(None),
            EstimatorArm::Rdp => {
                Ok(Some(IndexSelection::from_proposal(proposal, self.k1, self.k2, rng)?))
            }
            EstimatorArm::TopK => {
                Ok(Some(IndexSelection::from_proposal(proposal, self.k1 + self.k2, 0, rng)?))
            }
        }
        .map(|sel| {
            debug_assert!(sel.as_ref().map_or(true, |s| s.num_steps() == t && s.num_states() == n));
            sel
        })
    }
}

/// Per-step exact negative log-likelihood of a parameter snapshot.
pub fn exact_nll(params: &EmbeddingParams, data: &[Vec<usize>]) -> Result<f64, TrainError> {
    let factors = PotentialFactors::compute(&params.state_embeddings, &params.context_features);
    let t = data.first().map_or(0, Vec::len);
    let marginal = exact_forward(&factors.marginal_chain(t)?)?.log_z;
    let mut total = 0.0;
    for observation in data {
        let clamped = exact_forward(&factors.clamped_chain(observation)?)?.log_z;
        total += clamped - marginal;
    }
    Ok(-total / (data.len() as f64 * t as f64))
}

/// Loss trajectory and final parameters of a training run.
#[derive(Debug, Clone)]
pub struct TrainCurve {
    /// Exact NLL before training and after every step (`steps + 1` values).
    pub nll: Vec<f64>,
    pub params: EmbeddingParams,
}

fn validate_dataset(data: &[Vec<usize>]) -> Result<usize, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let t = data[0].len();
    if t == 0 {
        return Err(TrainError::EmptySequence);
    }
    for (index, seq) in data.iter().enumerate() {
        if seq.len() != t {
            return Err(TrainError::RaggedDataset { index, expected: t, got: seq.len() });
        }
    }
    Ok(t)
}

/// Fit state embeddings by gradient ascent on the marginal log-likelihood,
/// with the arm's estimator standing in for both partition functions during
/// the gradient step. The returned curve holds the exact NLL after every
/// step regardless of arm.
pub fn fit_marginal_likelihood(
    data: &[Vec<usize>],
    params: EmbeddingParams,
    config: &TrainConfig,
) -> Result<TrainCurve, TrainError> {
    let t = validate_dataset(data)?;
    let mut params = params;
    let n = params.num_states();
    let master = RdpRng::from_seed(config.seed);
    let scale = 1.0 / (data.len() as f64 * t as f64);
    let mut nll = vec![exact_nll(&params, data)?];
    // Log-space recursions are overflow-safe, so a runaway step size shows up
    // as an exploding loss long before anything turns non-finite; both count
    // as divergence.
    let runaway = 1e3 * nll[0].abs().max(1.0);
    for step in 0..config.steps {
        let step_rng = master.split(step as u64);
        let tape = Tape::new();
        let embeddings: Vec<Vec<Var<'_>>> = params
            .state_embeddings
            .iter()
            .map(|e| e.iter().map(|&v| tape.leaf(v)).collect())
            .collect();
        let factors = PotentialFactors::compute(&embeddings, &params.context_features);

        let marginal_chain = factors.marginal_chain(t)?;
        let marginal_log_z = match config.selection(
            n,
            t,
            &factors.marginal_proposal(&embeddings, t)?,
            &step_rng.split(u64::MAX),
        )? {
            None => exact_forward(&marginal_chain)?.log_z,
            Some(selection) => randomized_forward(&marginal_chain, &selection)?.log_z,
        };

        let mut objective = marginal_log_z.mul_const(-(data.len() as f64) * scale);
        for (index, observation) in data.iter().enumerate() {
            let clamped_chain = factors.clamped_chain(observation)?;
            let clamped_log_z = match config.selection(
                n,
                t,
                &factors.clamped_proposal(&embeddings, observation)?,
                &step_rng.split(index as u64),
            )? {
                None => exact_forward(&clamped_chain)?.log_z,
                Some(selection) => randomized_forward(&clamped_chain, &selection)?.log_z,
            };
            objective = objective.add(clamped_log_z.mul_const(scale));
        }
        if !objective.value().is_finite() {
            return Err(TrainError::Diverged { step, value: objective.value() });
        }
        tape.backward(objective).expect("single backward per tape");
        for (i, row) in params.state_embeddings.iter_mut().enumerate() {
            for (k, value) in row.iter_mut().enumerate() {
                *value += config.learning_rate * embeddings[i][k].adjoint();
            }
        }
        let current = exact_nll(&params, data)?;
        if !current.is_finite() || current > runaway {
            return Err(TrainError::Diverged { step, value: current });
        }
        nll.push(current);
    }
    Ok(TrainCurve { nll, params })
}

/// Sample observation sequences from a ground-truth model: latent chains by
/// exact backward sampling of the marginal chain, then one symbol per
/// position from the state's emission distribution.
pub fn sample_dataset(
    truth: &EmbeddingParams,
    num_seqs: usize,
    t: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>, TrainError> {
    if num_seqs == 0 {
        return Err(TrainError::EmptyDataset);
    }
    let factors = PotentialFactors::compute(&truth.state_embeddings, &truth.context_features);
    let chain = factors.marginal_chain(t)?;
    let selection = IndexSelection::full(truth.num_states(), t);
    let forward = randomized_forward(&chain, &selection)?;
    let vocab = truth.vocab_size();
    let mut rng = RdpRng::from_seed(seed).split(0x5eed);
    let mut data = Vec::with_capacity(num_seqs);
    for _ in 0..num_seqs {
        let noise: Vec<Vec<f64>> = (0..t)
            .map(|step| gumbel_noise(&mut rng, selection.step(step).active_states().len()))
            .collect();
        let sample = gumbel_backward_sample(&chain, &selection, &forward, &noise, 1.0)?;
        let mut observation = Vec::with_capacity(t);
        for &state in &sample.hard {
            let logits: Vec<f64> = (0..vocab).map(|v| factors.emissions[v][state]).collect();
            let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let mass: f64 = weights.iter().sum();
            let u = rng.uniform() * mass;
            let mut acc = 0.0;
            let mut symbol = vocab - 1;
            for (v, &w) in weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    symbol = v;
                    break;
                }
            }
            observation.push(symbol);
        }
        data.push(observation);
    }
    Ok(data)
}

/// One autoencoder training run's outputs.
#[derive(Debug, Clone)]
pub struct AutoencoderReport {
    /// Stochastic evidence-bound estimate per step.
    pub elbo: Vec<f64>,
    /// Aggregated posterior: state frequencies over arm-sampled latents for
    /// the whole dataset, normalized to sum 1.
    pub histogram: Vec<f64>,
    pub encoder: EmbeddingParams,
    /// Learned decoder logits, `N x V`.
    pub decoder: Vec<Vec<f64>>,
}

/// States the aggregated posterior never visits.
pub fn never_used_states(histogram: &[f64]) -> usize {
    histogram.iter().filter(|&&f| f == 0.0).count()
}

/// Frequency mass outside the `head` most-visited states.
pub fn tail_mass(histogram: &[f64], head: usize) -> f64 {
    let mut sorted = histogram.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted.iter().skip(head).sum()
}

/// Train the toy structured autoencoder: encoder chain potentials from the
/// embedding factorization, decoder a learned per-state symbol-logit table,
/// objective `E_q[log p(y | x)] + H(q) - T log N` with the expectation
/// replaced by one relaxed posterior sample per sequence.
pub fn fit_toy_autoencoder(
    data: &[Vec<usize>],
    params: EmbeddingParams,
    config: &TrainConfig,
) -> Result<AutoencoderReport, TrainError> {
    let t = validate_dataset(data)?;
    let mut encoder = params;
    let n = encoder.num_states();
    let vocab = encoder.vocab_size();
    let mut decoder = vec![vec![0.0_f64; vocab]; n];
    let master = RdpRng::from_seed(config.seed);
    let scale = 1.0 / (data.len() as f64 * t as f64);
    let uniform_prior = -(t as f64) * (n as f64).ln();
    let mut elbo_curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let step_rng = master.split(step as u64);
        let tape = Tape::new();
        let embeddings: Vec<Vec<Var<'_>>> = encoder
            .state_embeddings
            .iter()
            .map(|e| e.iter().map(|&v| tape.leaf(v)).collect())
            .collect();
        let decoder_vars: Vec<Vec<Var<'_>>> = decoder
            .iter()
            .map(|row| row.iter().map(|&v| tape.leaf(v)).collect())
            .collect();
        let factors = PotentialFactors::compute(&embeddings, &encoder.context_features);
        let mut objective: Option<Var<'_>> = None;
        for (index, observation) in data.iter().enumerate() {
            let seq_rng = step_rng.split(index as u64);
            let chain = factors.clamped_chain(observation)?;
            let selection = config
                .selection(n, t, &factors.clamped_proposal(&embeddings, observation)?, &seq_rng)?
                .unwrap_or_else(|| IndexSelection::full(n, t));
            let forward = randomized_forward(&chain, &selection)?;
            let entropy = randomized_entropy(&chain, &selection, &forward)?;
            let mut noise_rng = seq_rng.split(1);
            let noise: Vec<Vec<f64>> = (0..t)
                .map(|s| gumbel_noise(&mut noise_rng, selection.step(s).active_states().len()))
                .collect();
            let sample =
                gumbel_backward_sample(&chain, &selection, &forward, &noise, config.temperature)?;
            let mut reconstruction: Option<Var<'_>> = None;
            for (position, &symbol) in observation.iter().enumerate() {
                let active = &sample.active_states[position];
                let soft = &sample.soft[position];
                let mixed: Vec<Var<'_>> = (0..vocab)
                    .map(|v| {
                        let mut acc = soft[0].mul(decoder_vars[active[0]][v]);
                        for (pos, &state) in active.iter().enumerate().skip(1) {
                            acc = acc.add(soft[pos].mul(decoder_vars[state][v]));
                        }
                        acc
                    })
                    .collect();
                let logits: Vec<Var<'_>> = if config.straight_through {
                    let hard = sample.hard[position];
                    (0..vocab)
                        .map(|v| {
                            let detached = mixed[v].constant_like(mixed[v].value());
                            decoder_vars[hard][v].add(mixed[v].sub(detached))
                        })
                        .collect()
                } else {
                    mixed
                };
                let lse = Var::logsumexp_slice(&logits);
                let log_prob = logits[symbol].sub(lse);
                reconstruction = Some(match reconstruction {
                    None => log_prob,
                    Some(acc) => acc.add(log_prob),
                });
            }
            let seq_bound = reconstruction
                .expect("nonempty sequence")
                .add(entropy)
                .add_const(uniform_prior);
            objective = Some(match objective {
                None => seq_bound,
                Some(acc) => acc.add(seq_bound),
            });
        }
        let objective = objective.expect("nonempty dataset").mul_const(scale);
        let value = objective.value();
        let runaway = elbo_curve.first().map_or(f64::INFINITY, |e: &f64| 1e3 * e.abs().max(1.0));
        if !value.is_finite() || value < -runaway {
            return Err(TrainError::Diverged { step, value });
        }
        elbo_curve.push(value);
        tape.backward(objective).expect("single backward per tape");
        for (i, row) in encoder.state_embeddings.iter_mut().enumerate() {
            for (k, value) in row.iter_mut().enumerate() {
                *value += config.learning_rate * embeddings[i][k].adjoint();
            }
        }
        for (i, row) in decoder.iter_mut().enumerate() {
            for (v, value) in row.iter_mut().enumerate() {
                *value += config.learning_rate * decoder_vars[i][v].adjoint();
            }
        }
    }
    let histogram = aggregated_posterior(&encoder, data, config, master.split(u64::MAX - 1))?;
    Ok(AutoencoderReport { elbo: elbo_curve, histogram, encoder, decoder })
}

/// Sample latent states for every sequence with the arm's own restricted
/// inference and count state visits.
fn aggregated_posterior(
    encoder: &EmbeddingParams,
    data: &[Vec<usize>],
    config: &TrainConfig,
    rng: RdpRng,
) -> Result<Vec<f64>, TrainError> {
    const DRAWS_PER_SEQUENCE: usize = 4;
    let t = data[0].len();
    let n = encoder.num_states();
    let factors = PotentialFactors::compute(&encoder.state_embeddings, &encoder.context_features);
    let mut counts = vec![0usize; n];
    for (index, observation) in data.iter().enumerate() {
        let seq_rng = rng.split(index as u64);
        let chain = factors.clamped_chain(observation)?;
        let selection = config
            .selection(n, t, &factors.clamped_proposal(&encoder.state_embeddings, observation)?, &seq_rng)?
            .unwrap_or_else(|| IndexSelection::full(n, t));
        let forward = randomized_forward(&chain, &selection)?;
        let mut noise_rng = seq_rng.split(1);
        for _ in 0..DRAWS_PER_SEQUENCE {
            let noise: Vec<Vec<f64>> = (0..t)
                .map(|s| gumbel_noise(&mut noise_rng, selection.step(s).active_states().len()))
                .collect();
            let sample = gumbel_backward_sample(&chain, &selection, &forward, &noise, 1.0)?;
            for &state in &sample.hard {
                counts[state] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    Ok(counts.into_iter().map(|c| c as f64 / total as f64).collect())
}
