//! Tree-structured dynamic programs over contiguous spans: exact and
//! randomized inside passes, plus an exhaustive bracketing oracle.
//!
//! A hypertree over a sequence of length `T` assigns a log-potential
//! `phi(i, j, k)` to every contiguous span `i..=j` labeled with state `k`.
//! A full parse is a binary bracketing of `0..=T-1` with one label per span;
//! its weight is the product of the potentials of all `2T - 1` spans it
//! contains. The inside recursion sums over parses bottom-up:
//!
//! ```text
//! alpha(i, i, k) = phi(i, i, k)
//! alpha(i, j, k) = phi(i, j, k) * sum_{m=i}^{j-1} sum_{k1, k2}
//!                  alpha(i, m, k1) * alpha(m+1, j, k2)
//! Z = sum_k alpha(0, T-1, k)
//! ```
//!
//! The randomized variant keeps the split sum over `m` exhaustive and
//! restricts only the label sums: each child span contributes its top `K1`
//! labels exactly plus `K2` importance-weighted tail draws, and the product
//! of the two child estimates expands into four blocks (top x top,
//! top x sampled, sampled x top, sampled x sampled). The two mixed blocks
//! are what make the product of two unbiased child estimates unbiased; a
//! [`InsideBlocks::HeadAndTailOnly`] mode drops them to expose the gap they
//! close. Complexity falls from `O(T^2 N^3)` to `O(T^2 K^3)`.

use thiserror::Error;

use crate::chain::{AlphaColumn, ChainError, IndexSelection, StepSelection};
use crate::numerics::{NumericsError, RdpRng, Scalar};
use crate::proposals::Proposal;

/// Exhaustive enumeration guard for [`brute_force_trees`]:
/// `Catalan(T - 1) * N^(2T - 1)` weighted parses at most.
const BRUTE_FORCE_PARSE_LIMIT: f64 = 1e6;

/// Errors from hypertree construction and the inside passes.
#[derive(Debug, Error, PartialEq)]
pub enum TreeError {
    #[error("hypertree needs at least one state")]
    EmptyStateSpace,
    #[error("hypertree needs at least one position")]
    EmptySequence,
    #[error("span table holds {got} columns, expected {expected}")]
    SpanTableShape { expected: usize, got: usize },
    #[error("span ({i}, {j}) holds {got} labels, expected {expected}")]
    SpanShape { i: usize, j: usize, expected: usize, got: usize },
    #[error("NaN potential at span ({i}, {j}) label {k}")]
    NanPotential { i: usize, j: usize, k: usize },
    #[error("no parse has finite weight")]
    UnreachableRoot,
    #[error("selection covers {selection_spans} spans of {selection_states} states, potentials have {spans} spans of {states} states")]
    SelectionShape { selection_spans: usize, selection_states: usize, spans: usize, states: usize },
    #[error("proposal covers {got} nodes, expected one per span ({expected})")]
    ProposalShape { expected: usize, got: usize },
    #[error(transparent)]
    Selection(#[from] ChainError),
    #[error(transparent)]
    Sampling(#[from] NumericsError),
    #[error("parse space too large to enumerate: {parses:.3e} parses exceed {limit:.0e}")]
    ParseSpaceTooLarge { parses: f64, limit: f64 },
}

/// Number of contiguous spans over a length-`seq_len` sequence.
pub fn num_spans(seq_len: usize) -> usize {
    seq_len * (seq_len + 1) / 2
}

/// Dense index of span `(i, j)`, `0 <= i <= j < seq_len`: spans are laid out
/// row by row by their left endpoint.
pub fn span_index(seq_len: usize, i: usize, j: usize) -> usize {
    debug_assert!(i <= j && j < seq_len);
    i * (2 * seq_len - i + 1) / 2 + (j - i)
}

/// Log-potentials of a hypertree, generic over the scalar type.
#[derive(Debug, Clone)]
pub struct HypertreePotentials<S = f64> {
    n: usize,
    seq_len: usize,
    /// Per-span label columns, indexed by [`span_index`].
    spans: Vec<Vec<S>>,
}

impl<S: Scalar> HypertreePotentials<S> {
    /// Validate shapes and finiteness. `spans[span_index(i, j)][k]` scores
    /// span `(i, j)` with label `k`.
    pub fn new(seq_len: usize, n: usize, spans: Vec<Vec<S>>) -> Result<Self, TreeError> {
        if n == 0 {
            return Err(TreeError::EmptyStateSpace);
        }
        if seq_len == 0 {
            return Err(TreeError::EmptySequence);
        }
        if spans.len() != num_spans(seq_len) {
            return Err(TreeError::SpanTableShape {
                expected: num_spans(seq_len),
                got: spans.len(),
            });
        }
        for i in 0..seq_len {
            for j in i..seq_len {
                let column = &spans[span_index(seq_len, i, j)];
                if column.len() != n {
                    return Err(TreeError::SpanShape { i, j, expected: n, got: column.len() });
                }
                for (k, v) in column.iter().enumerate() {
                    if v.value().is_nan() {
                        return Err(TreeError::NanPotential { i, j, k });
                    }
                }
            }
        }
        Ok(HypertreePotentials { n, seq_len, spans })
    }

    pub fn num_states(&self) -> usize {
        self.n
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Log-potential of span `(i, j)` with label `k`.
    pub fn span_at(&self, i: usize, j: usize, k: usize) -> S {
        self.spans[span_index(self.seq_len, i, j)][k]
    }

    /// Plain-valued copy (primal extraction when `S` is a tape variable).
    pub fn to_values(&self) -> HypertreePotentials<f64> {
        HypertreePotentials {
            n: self.n,
            seq_len: self.seq_len,
            spans: self
                .spans
                .iter()
                .map(|column| column.iter().map(|v| v.value()).collect())
                .collect(),
        }
    }
}

impl HypertreePotentials<f64> {
    /// All-zero log-potentials: every parse has weight one.
    pub fn uniform(seq_len: usize, n: usize) -> Result<Self, TreeError> {
        HypertreePotentials::new(seq_len, n, vec![vec![0.0; n]; num_spans(seq_len)])
    }

    /// Record every potential as a leaf on `tape`.
    pub fn record_on<'t>(&self, tape: &'t crate::autodiff::Tape) -> HypertreePotentials<crate::autodiff::Var<'t>> {
        HypertreePotentials {
            n: self.n,
            seq_len: self.seq_len,
            spans: self
                .spans
                .iter()
                .map(|column| column.iter().map(|&v| tape.leaf(v)).collect())
                .collect(),
        }
    }
}

/// Which blocks of the child-product expansion a randomized inside pass sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InsideBlocks {
    /// All four blocks: exact head terms, both head x tail cross blocks, and
    /// the tail x tail block. This is the unbiased estimator.
    #[default]
    FullCross,
    /// Head x head and tail x tail only. The missing cross blocks make this
    /// variant underestimate: it is kept for measuring that gap.
    HeadAndTailOnly,
}

/// Per-span index selection restricting a randomized inside pass. Spans are
/// keyed by [`span_index`]; the selection machinery is shared with chains.
#[derive(Debug, Clone)]
pub struct SpanSelection {
    seq_len: usize,
    inner: IndexSelection,
}

impl SpanSelection {
    /// Draw a selection from a proposal holding one node per span, in
    /// [`span_index`] order.
    pub fn from_proposal(
        proposal: &Proposal,
        seq_len: usize,
        k1: usize,
        k2: usize,
        rng: &RdpRng,
    ) -> Result<Self, TreeError> {
        if proposal.num_nodes() != num_spans(seq_len) {
            return Err(TreeError::ProposalShape {
                expected: num_spans(seq_len),
                got: proposal.num_nodes(),
            });
        }
        let inner = IndexSelection::from_proposal(proposal, k1, k2, rng)?;
        Ok(SpanSelection { seq_len, inner })
    }

    /// The full-index selection over every span: reproduces the exact pass.
    pub fn full(n: usize, seq_len: usize) -> Self {
        SpanSelection { seq_len, inner: IndexSelection::full(n, num_spans(seq_len)) }
    }

    pub fn num_states(&self) -> usize {
        self.inner.num_states()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn k1(&self) -> usize {
        self.inner.k1()
    }

    pub fn k2(&self) -> usize {
        self.inner.k2()
    }

    /// Selection for span `(i, j)`.
    pub fn span(&self, i: usize, j: usize) -> &StepSelection {
        self.inner.step(span_index(self.seq_len, i, j))
    }

    fn check_shape<S: Scalar>(
        &self,
        potentials: &HypertreePotentials<S>,
    ) -> Result<(), TreeError> {
        if self.num_states() != potentials.num_states() || self.seq_len != potentials.seq_len() {
            return Err(TreeError::SelectionShape {
                selection_spans: num_spans(self.seq_len),
                selection_states: self.num_states(),
                spans: num_spans(potentials.seq_len()),
                states: potentials.num_states(),
            });
        }
        Ok(())
    }
}

/// Inside values per span, defined on each span's alive labels.
#[derive(Debug, Clone)]
pub struct InsideTable<S> {
    seq_len: usize,
    spans: Vec<AlphaColumn<S>>,
}

impl<S: Scalar> InsideTable<S> {
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Inside column for span `(i, j)`.
    pub fn span(&self, i: usize, j: usize) -> &AlphaColumn<S> {
        &self.spans[span_index(self.seq_len, i, j)]
    }
}

/// Result of [`exact_inside`].
#[derive(Debug, Clone)]
pub struct ExactInside<S> {
    pub log_z: S,
    pub inside: InsideTable<S>,
}

/// Result of [`randomized_inside`].
#[derive(Debug, Clone)]
pub struct RandomizedInside<S> {
    pub log_z: S,
    pub inside: InsideTable<S>,
}

/// Exact inside pass: full table and `log Z`.
pub fn exact_inside<S: Scalar>(
    potentials: &HypertreePotentials<S>,
) -> Result<ExactInside<S>, TreeError> {
    let n = potentials.num_states();
    let t_len = potentials.seq_len();
    let all_states: Vec<usize> = (0..n).collect();
    let mut spans: Vec<Option<AlphaColumn<S>>> = vec![None; num_spans(t_len)];
    for i in 0..t_len {
        spans[span_index(t_len, i, i)] = Some(AlphaColumn::new(
            all_states.clone(),
            (0..n).map(|k| potentials.span_at(i, i, k)).collect(),
        ));
    }
    let mut terms: Vec<S> = Vec::new();
    for l in 1..t_len {
        for i in 0..t_len - l {
            let j = i + l;
            let mut values = Vec::with_capacity(n);
            for k in 0..n {
                terms.clear();
                for m in i..j {
                    let left = spans[span_index(t_len, i, m)].as_ref().expect("filled");
                    let right = spans[span_index(t_len, m + 1, j)].as_ref().expect("filled");
                    for &a in left.values() {
                        for &b in right.values() {
                            terms.push(a.add(b));
                        }
                    }
                }
                values.push(potentials.span_at(i, j, k).add(S::logsumexp_slice(&terms)));
            }
            spans[span_index(t_len, i, j)] = Some(AlphaColumn::new(all_states.clone(), values));
        }
    }
    let spans: Vec<AlphaColumn<S>> = spans.into_iter().map(|c| c.expect("filled")).collect();
    let root = &spans[span_index(t_len, 0, t_len - 1)];
    let log_z = S::logsumexp_slice(root.values());
    if log_z.value() == f64::NEG_INFINITY {
        return Err(TreeError::UnreachableRoot);
    }
    Ok(ExactInside { log_z, inside: InsideTable { seq_len: t_len, spans } })
}

/// Randomized inside pass restricted by `selection`.
///
/// Every split point `m` is summed exhaustively; only label sums are
/// restricted. For each split, the product of the two child estimates
/// expands into head and tail contributions per child; `blocks` selects
/// whether the mixed head x tail products are included (the unbiased
/// default) or dropped. Each tail factor carries its own importance weight
/// `1 / (K2 * qtail)`, and weights of the two children multiply.
pub fn randomized_inside<S: Scalar>(
    potentials: &HypertreePotentials<S>,
    selection: &SpanSelection,
    blocks: InsideBlocks,
) -> Result<RandomizedInside<S>, TreeError> {
    selection.check_shape(potentials)?;
    let t_len = potentials.seq_len();
    let mut spans: Vec<Option<AlphaColumn<S>>> = vec![None; num_spans(t_len)];
    for i in 0..t_len {
        let active = selection.span(i, i).active_states().to_vec();
        let values = active.iter().map(|&k| potentials.span_at(i, i, k)).collect();
        spans[span_index(t_len, i, i)] = Some(AlphaColumn::new(active, values));
    }
    let mut terms: Vec<S> = Vec::new();
    for l in 1..t_len {
        for i in 0..t_len - l {
            let j = i + l;
            let active = selection.span(i, j).active_states();
            let mut values = Vec::with_capacity(active.len());
            for &k in active {
                terms.clear();
                for m in i..j {
                    let left_sel = selection.span(i, m);
                    let right_sel = selection.span(m + 1, j);
                    let left = spans[span_index(t_len, i, m)].as_ref().expect("filled");
                    let right = spans[span_index(t_len, m + 1, j)].as_ref().expect("filled");
                    for &s1 in &left_sel.topk {
                        let a = left.get(s1).expect("top-k label is alive");
                        for &s2 in &right_sel.topk {
                            let b = right.get(s2).expect("top-k label is alive");
                            terms.push(a.add(b));
                        }
                        if blocks == InsideBlocks::FullCross {
                            for &(d2, q2) in &right_sel.sampled {
                                let b = right.get(d2).expect("sampled label is alive");
                                terms.push(a.add_offset(b, right_sel.log_weight(q2)));
                            }
                        }
                    }
                    for &(d1, q1) in &left_sel.sampled {
                        let a = left.get(d1).expect("sampled label is alive");
                        let w1 = left_sel.log_weight(q1);
                        if blocks == InsideBlocks::FullCross {
                            for &s2 in &right_sel.topk {
                                let b = right.get(s2).expect("top-k label is alive");
                                terms.push(a.add_offset(b, w1));
                            }
                        }
                        for &(d2, q2) in &right_sel.sampled {
                            let b = right.get(d2).expect("sampled label is alive");
                            terms.push(a.add_offset(b, w1 + right_sel.log_weight(q2)));
                        }
                    }
                }
                values.push(potentials.span_at(i, j, k).add(S::logsumexp_slice(&terms)));
            }
            spans[span_index(t_len, i, j)] =
                Some(AlphaColumn::new(active.to_vec(), values));
        }
    }
    let spans: Vec<AlphaColumn<S>> = spans.into_iter().map(|c| c.expect("filled")).collect();
    let root_sel = selection.span(0, t_len - 1);
    let root = &spans[span_index(t_len, 0, t_len - 1)];
    terms.clear();
    for &s in &root_sel.topk {
        terms.push(root.get(s).expect("top-k label is alive"));
    }
    for &(d, q) in &root_sel.sampled {
        let a = root.get(d).expect("sampled label is alive");
        terms.push(a.add_const(root_sel.log_weight(q)));
    }
    let log_z = S::logsumexp_slice(&terms);
    if log_z.value() == f64::NEG_INFINITY {
        return Err(TreeError::UnreachableRoot);
    }
    Ok(RandomizedInside { log_z, inside: InsideTable { seq_len: t_len, spans } })
}

/// Exhaustively enumerated hypertree: reference partition function and the
/// posterior over binary bracketings (labels marginalized out).
#[derive(Debug, Clone)]
pub struct BruteForceTrees {
    pub log_z: f64,
    /// Log posterior probability per bracketing, aligned with `shapes`.
    pub shape_log_probs: Vec<f64>,
    /// Each bracketing as the list of spans it contains, `(i, j)` pairs.
    pub shapes: Vec<Vec<(usize, usize)>>,
}

/// Number of binary bracketings of a length-`t` sequence (Catalan number),
/// as f64 to feed the enumeration guard.
fn num_bracketings(t: usize) -> f64 {
    // Catalan(t - 1) via the recurrence C_0 = 1, C_{n+1} = sum C_i C_{n-i}.
    let mut catalan = vec![0.0_f64; t];
    catalan[0] = 1.0;
    for n in 1..t {
        for s in 0..n {
            catalan[n] += catalan[s] * catalan[n - 1 - s];
        }
    }
    catalan[t - 1]
}

/// All binary bracketings of span `(i, j)`, each as its list of spans.
fn enumerate_shapes(i: usize, j: usize) -> Vec<Vec<(usize, usize)>> {
    if i == j {
        return vec![vec![(i, i)]];
    }
    let mut shapes = Vec::new();
    for m in i..j {
        for left in enumerate_shapes(i, m) {
            for right in enumerate_shapes(m + 1, j) {
                let mut spans = left.clone();
                spans.extend_from_slice(&right);
                spans.push((i, j));
                shapes.push(spans);
            }
        }
    }
    shapes
}

/// Enumerate every labeled parse. Guarded to
/// `Catalan(T - 1) * N^(2T - 1) <= 1e6` parses.
pub fn brute_force_trees(
    potentials: &HypertreePotentials<f64>,
) -> Result<BruteForceTrees, TreeError> {
    let n = potentials.num_states();
    let t_len = potentials.seq_len();
    let parses = num_bracketings(t_len) * (n as f64).powi(2 * t_len as i32 - 1);
    if parses > BRUTE_FORCE_PARSE_LIMIT {
        return Err(TreeError::ParseSpaceTooLarge { parses, limit: BRUTE_FORCE_PARSE_LIMIT });
    }
    let shapes = enumerate_shapes(0, t_len - 1);
    let mut shape_log_weights = Vec::with_capacity(shapes.len());
    let mut all_log_weights = Vec::new();
    for shape in &shapes {
        // Sum over label assignments for this bracketing. Labels of distinct
        // spans are independent given the shape, so the sum factorizes into
        // per-span label sums; the flat enumeration below stays faithful to
        // "enumerate every parse" while the factorized value cross-checks it
        // in tests via the recursion itself.
        let num_assignments = n.pow(shape.len() as u32);
        let mut assignment_log_weights = Vec::with_capacity(num_assignments);
        for assignment in 0..num_assignments {
            let mut rest = assignment;
            let mut lw = 0.0;
            for &(i, j) in shape {
                let k = rest % n;
                rest /= n;
                lw += potentials.span_at(i, j, k);
            }
            assignment_log_weights.push(lw);
        }
        all_log_weights.extend_from_slice(&assignment_log_weights);
        shape_log_weights
            .push(crate::numerics::logsumexp(&assignment_log_weights).expect("nonempty"));
    }
    let log_z = crate::numerics::logsumexp(&all_log_weights).expect("nonempty");
    if log_z == f64::NEG_INFINITY {
        return Err(TreeError::UnreachableRoot);
    }
    let shape_log_probs = shape_log_weights.iter().map(|lw| lw - log_z).collect();
    Ok(BruteForceTrees { log_z, shape_log_probs, shapes })
}
