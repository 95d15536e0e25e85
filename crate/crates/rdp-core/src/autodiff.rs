//! Scalar reverse-mode automatic differentiation on an append-only tape.
//!
//! Every operation pushes one node holding its primal value and the local
//! partials with respect to its parents (a Wengert list). [`Tape::backward`]
//! seeds the output adjoint with 1 and sweeps the list once in reverse,
//! accumulating `adjoint * partial` into each parent. Leaves created for
//! values that the surrounding computation never touches keep an adjoint of
//! exactly `0.0` — restricted dynamic programs rely on this to show that
//! unselected states receive no gradient.
//!
//! Structural decisions follow from how the dynamic programs use the tape:
//!
//! * `logsumexp` is a fused n-ary node whose backward pass is the softmax of
//!   its inputs, so log-space accumulations cost one node regardless of
//!   fan-in.
//! * `add_offset(a, b, c) = a + b + c` with constant `c` is a single node, so
//!   importance-weighted and plain accumulations record identical node
//!   counts.
//! * Index selection is performed outside the tape; selections enter the
//!   recorded computation only as constants.
//!
//! Domain preconditions (`ln` of a nonpositive primal, division by a zero
//! primal, mixing variables from two tapes) are programming errors and panic;
//! running [`Tape::backward`] twice without [`Tape::reset_adjoints`] is a
//! recoverable [`AutodiffError`].

use std::cell::{Cell, RefCell};

use thiserror::Error;

use crate::numerics::Scalar;

/// Errors from tape-level operations.
#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    /// `backward` was called twice without resetting adjoints in between.
    #[error("backward already run on this tape; call reset_adjoints first")]
    BackwardAlreadyRun,
    /// Finite-difference step outside the supported range.
    #[error("finite-difference step {eps} outside [1e-7, 1e-4]")]
    StepOutOfRange { eps: f64 },
}

#[derive(Clone, Copy)]
enum Parents {
    Leaf,
    Unary { parent: usize, partial: f64 },
    Binary { parents: [usize; 2], partials: [f64; 2] },
    /// Parent/partial pairs live in the tape's spill buffer.
    Nary { start: usize, len: usize },
}

struct Node {
    adjoint: f64,
    parents: Parents,
}

/// Append-only tape of scalar operations.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    spill: RefCell<Vec<(usize, f64)>>,
    swept: Cell<bool>,
}

/// A scalar value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: usize,
    primal: f64,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record an input value.
    pub fn leaf(&self, value: f64) -> Var<'_> {
        let index = self.push(value, Parents::Leaf);
        Var { tape: self, index, primal: value }
    }

    fn push(&self, primal: f64, parents: Parents) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { adjoint: 0.0, parents });
        let _ = primal;
        nodes.len() - 1
    }

    /// Reverse sweep from `output`: seeds its adjoint with 1 and accumulates
    /// local partials into every ancestor. A second sweep without
    /// [`Tape::reset_adjoints`] would silently double adjoints, so it is an
    /// error instead.
    pub fn backward(&self, output: Var<'_>) -> Result<(), AutodiffError> {
        assert!(
            std::ptr::eq(output.tape, self),
            "backward called with a variable from another tape"
        );
        if self.swept.get() {
            return Err(AutodiffError::BackwardAlreadyRun);
        }
        self.swept.set(true);
        let mut nodes = self.nodes.borrow_mut();
        let spill = self.spill.borrow();
        nodes[output.index].adjoint = 1.0;
        for index in (0..=output.index).rev() {
            let adjoint = nodes[index].adjoint;
            if adjoint == 0.0 {
                continue;
            }
            match nodes[index].parents {
                Parents::Leaf => {}
                Parents::Unary { parent, partial } => {
                    nodes[parent].adjoint += adjoint * partial;
                }
                Parents::Binary { parents, partials } => {
                    nodes[parents[0]].adjoint += adjoint * partials[0];
                    nodes[parents[1]].adjoint += adjoint * partials[1];
                }
                Parents::Nary { start, len } => {
                    for &(parent, partial) in &spill[start..start + len] {
                        nodes[parent].adjoint += adjoint * partial;
                    }
                }
            }
        }
        Ok(())
    }

    /// Zero every adjoint and allow another backward sweep.
    pub fn reset_adjoints(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.adjoint = 0.0;
        }
        self.swept.set(false);
    }

    /// Adjoint accumulated for `var` by the last backward sweep.
    pub fn adjoint(&self, var: Var<'_>) -> f64 {
        assert!(std::ptr::eq(var.tape, self), "adjoint queried on another tape");
        self.nodes.borrow()[var.index].adjoint
    }
}

impl<'t> Var<'t> {
    /// Adjoint accumulated for this variable by the last backward sweep.
    pub fn adjoint(self) -> f64 {
        self.tape.adjoint(self)
    }

    fn unary(self, primal: f64, partial: f64) -> Var<'t> {
        let index = self.tape.push(primal, Parents::Unary { parent: self.index, partial });
        Var { tape: self.tape, index, primal }
    }

    fn binary(self, other: Var<'t>, primal: f64, partials: [f64; 2]) -> Var<'t> {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "binary operation on variables from two different tapes"
        );
        let index = self.tape.push(
            primal,
            Parents::Binary { parents: [self.index, other.index], partials },
        );
        Var { tape: self.tape, index, primal }
    }
}

impl<'t> Scalar for Var<'t> {
    fn value(self) -> f64 {
        self.primal
    }

    fn add(self, other: Self) -> Self {
        self.binary(other, self.primal + other.primal, [1.0, 1.0])
    }

    fn sub(self, other: Self) -> Self {
        self.binary(other, self.primal - other.primal, [1.0, -1.0])
    }

    fn mul(self, other: Self) -> Self {
        self.binary(other, self.primal * other.primal, [other.primal, self.primal])
    }

    fn div(self, other: Self) -> Self {
        assert!(other.primal != 0.0, "division by a zero tape value");
        let inv = 1.0 / other.primal;
        self.binary(other, self.primal * inv, [inv, -self.primal * inv * inv])
    }

    fn neg(self) -> Self {
        self.unary(-self.primal, -1.0)
    }

    fn ln(self) -> Self {
        assert!(
            self.primal > 0.0,
            "logarithm of a nonpositive tape value: {}",
            self.primal
        );
        self.unary(self.primal.ln(), 1.0 / self.primal)
    }

    fn exp(self) -> Self {
        let primal = self.primal.exp();
        self.unary(primal, primal)
    }

    fn add_const(self, c: f64) -> Self {
        self.unary(self.primal + c, 1.0)
    }

    fn mul_const(self, c: f64) -> Self {
        self.unary(self.primal * c, c)
    }

    fn add_offset(self, other: Self, c: f64) -> Self {
        self.binary(other, self.primal + other.primal + c, [1.0, 1.0])
    }

    fn clamp_to(self, lo: f64, hi: f64) -> Self {
        if self.primal < lo {
            self.tape.leaf(lo)
        } else if self.primal > hi {
            self.tape.leaf(hi)
        } else {
            self.unary(self.primal, 1.0)
        }
    }

    fn constant_like(self, c: f64) -> Self {
        self.tape.leaf(c)
    }

    fn logsumexp_slice(xs: &[Self]) -> Self {
        let first = *xs.first().expect("logsumexp over an empty active set");
        let tape = first.tape;
        let max = xs.iter().map(|x| x.primal).fold(f64::NEG_INFINITY, f64::max);
        let (primal, inv_sum) = if max == f64::NEG_INFINITY {
            (f64::NEG_INFINITY, 0.0)
        } else {
            let sum: f64 = xs.iter().map(|x| (x.primal - max).exp()).sum();
            (max + sum.ln(), 1.0 / sum)
        };
        let start = {
            let mut spill = tape.spill.borrow_mut();
            let start = spill.len();
            for x in xs {
                assert!(
                    std::ptr::eq(x.tape, tape),
                    "logsumexp over variables from two different tapes"
                );
                // Softmax weight of this input; exactly 0 for -inf inputs and
                // for every input when the whole reduction is -inf.
                let weight = if max == f64::NEG_INFINITY {
                    0.0
                } else {
                    (x.primal - max).exp() * inv_sum
                };
                spill.push((x.index, weight));
            }
            start
        };
        let index = tape.push(primal, Parents::Nary { start, len: xs.len() });
        Var { tape, index, primal }
    }
}

/// Compare reverse-mode gradients against central finite differences.
///
/// `f` builds a scalar function of the leaves it is handed. It is evaluated
/// on fresh tapes: once for the reverse sweep and twice per coordinate for
/// the central difference with step `eps` (accepted range `[1e-7, 1e-4]`).
/// Returns the maximum over coordinates of `|fd - grad| / max(1, |grad|)`.
pub fn gradcheck<F>(f: F, point: &[f64], eps: f64) -> Result<f64, AutodiffError>
where
    F: for<'t> Fn(&'t Tape, &'t [Var<'t>]) -> Var<'t>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(AutodiffError::StepOutOfRange { eps });
    }
    let grad = {
        let tape = Tape::new();
        let xs: Vec<Var<'_>> = point.iter().map(|&v| tape.leaf(v)).collect();
        let out = f(&tape, &xs);
        tape.backward(out)?;
        xs.iter().map(|x| x.adjoint()).collect::<Vec<f64>>()
    };
    let eval = |shifted: &[f64]| {
        let tape = Tape::new();
        let xs: Vec<Var<'_>> = shifted.iter().map(|&v| tape.leaf(v)).collect();
        f(&tape, &xs).value()
    };
    let mut worst = 0.0_f64;
    let mut shifted = point.to_vec();
    for i in 0..point.len() {
        shifted[i] = point[i] + eps;
        let hi = eval(&shifted);
        shifted[i] = point[i] - eps;
        let lo = eval(&shifted);
        shifted[i] = point[i];
        let fd = (hi - lo) / (2.0 * eps);
        let err = (fd - grad[i]).abs() / grad[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn derivative_of_log_exp_is_identity() {
        let tape = Tape::new();
        let x = tape.leaf(3.0);
        let y = x.exp().ln();
        tape.backward(y).unwrap();
        assert_relative_eq!(y.value(), 3.0, max_relative = 1e-14);
        assert_relative_eq!(x.adjoint(), 1.0, max_relative = 1e-14);
    }

    #[test]
    fn product_rule_partials() {
        let tape = Tape::new();
        let x = tape.leaf(2.0);
        let y = tape.leaf(5.0);
        let z = x.mul(y);
        tape.backward(z).unwrap();
        assert_eq!(x.adjoint(), 5.0);
        assert_eq!(y.adjoint(), 2.0);
    }

    #[test]
    fn quotient_rule_partials() {
        let tape = Tape::new();
        let x = tape.leaf(3.0);
        let y = tape.leaf(4.0);
        let z = x.div(y);
        tape.backward(z).unwrap();
        assert_relative_eq!(x.adjoint(), 0.25, max_relative = 1e-15);
        assert_relative_eq!(y.adjoint(), -3.0 / 16.0, max_relative = 1e-15);
    }

    #[test]
    fn sum_of_leaves_has_unit_adjoints() {
        let tape = Tape::new();
        let xs = [tape.leaf(1.0), tape.leaf(2.0), tape.leaf(3.0)];
        let sum = xs[0].add(xs[1]).add(xs[2]);
        tape.backward(sum).unwrap();
        for x in xs {
            assert_eq!(x.adjoint(), 1.0);
        }
    }

    #[test]
    fn logsumexp_gradient_is_the_softmax() {
        let values = [0.3, -1.2, 2.0, 0.0];
        let tape = Tape::new();
        let xs: Vec<Var<'_>> = values.iter().map(|&v| tape.leaf(v)).collect();
        let lse = Var::logsumexp_slice(&xs);
        tape.backward(lse).unwrap();
        let z: f64 = values.iter().map(|v| v.exp()).sum();
        for (x, v) in xs.iter().zip(values) {
            assert_relative_eq!(x.adjoint(), v.exp() / z, max_relative = 1e-12);
        }
    }

    #[test]
    fn logsumexp_ignores_zero_weight_inputs() {
        let tape = Tape::new();
        let a = tape.leaf(1.0);
        let b = tape.leaf(f64::NEG_INFINITY);
        let lse = Var::logsumexp_slice(&[a, b]);
        tape.backward(lse).unwrap();
        assert_relative_eq!(lse.value(), 1.0, max_relative = 1e-15);
        assert_eq!(a.adjoint(), 1.0);
        assert_eq!(b.adjoint(), 0.0);
    }

    #[test]
    fn unused_leaf_keeps_adjoint_exactly_zero() {
        let tape = Tape::new();
        let x = tape.leaf(1.0);
        let unused = tape.leaf(9.0);
        let y = x.mul_const(2.0);
        tape.backward(y).unwrap();
        assert_eq!(unused.adjoint(), 0.0);
    }

    #[test]
    fn second_backward_without_reset_is_an_error() {
        let tape = Tape::new();
        let x = tape.leaf(2.0);
        let y = x.exp();
        tape.backward(y).unwrap();
        assert_eq!(tape.backward(y), Err(AutodiffError::BackwardAlreadyRun));
        tape.reset_adjoints();
        assert_eq!(x.adjoint(), 0.0);
        tape.backward(y).unwrap();
        assert_relative_eq!(x.adjoint(), 2.0_f64.exp(), max_relative = 1e-15);
    }

    #[test]
    fn clamp_passes_gradient_inside_and_blocks_it_outside() {
        let tape = Tape::new();
        let x = tape.leaf(0.5);
        let y = tape.leaf(3.0);
        let out = x.clamp_to(0.0, 1.0).add(y.clamp_to(0.0, 1.0));
        tape.backward(out).unwrap();
        assert_eq!(out.value(), 1.5);
        assert_eq!(x.adjoint(), 1.0);
        assert_eq!(y.adjoint(), 0.0);
    }

    #[test]
    fn fused_offset_add_is_one_node() {
        let tape = Tape::new();
        let x = tape.leaf(1.0);
        let y = tape.leaf(2.0);
        let before = tape.len();
        let z = x.add_offset(y, -0.5);
        assert_eq!(tape.len(), before + 1);
        tape.backward(z).unwrap();
        assert_eq!(z.value(), 2.5);
        assert_eq!(x.adjoint(), 1.0);
        assert_eq!(y.adjoint(), 1.0);
    }

    #[test]
    #[should_panic(expected = "logarithm of a nonpositive tape value")]
    fn log_of_nonpositive_panics() {
        let tape = Tape::new();
        let x = tape.leaf(-1.0);
        let _ = x.ln();
    }

    #[test]
    #[should_panic(expected = "division by a zero tape value")]
    fn division_by_zero_panics() {
        let tape = Tape::new();
        let x = tape.leaf(1.0);
        let zero = tape.leaf(0.0);
        let _ = x.div(zero);
    }

    #[test]
    fn gradcheck_accepts_a_smooth_composite() {
        // f(a, b, c) = a * exp(b) + logsumexp(a, b, c) - c / b
        let err = gradcheck(
            |_tape, xs| {
                let prod = xs[0].mul(xs[1].exp());
                let lse = Var::logsumexp_slice(xs);
                prod.add(lse).sub(xs[2].div(xs[1]))
            },
            &[0.7, -0.3, 1.1],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn gradcheck_rejects_out_of_range_step() {
        assert_eq!(
            gradcheck(|_tape, xs| xs[0].exp(), &[1.0], 1e-2),
            Err(AutodiffError::StepOutOfRange { eps: 1e-2 })
        );
    }
}
