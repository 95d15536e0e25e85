//! Randomized dynamic programming for chain- and hypertree-structured
//! models.
//!
//! Exact sum-product recursions over `N` states per node cost `O(T·N²)`
//! time, and differentiating through them records an `O(T·N²)` tape. The
//! estimators here restrict every DP step to a small index set — the top
//! `K1` states of a proposal plus `K2` importance-weighted draws from the
//! remainder — cutting both costs to `O(T·K²)` with `K = K1 + K2` while the
//! linear-space partition estimate stays unbiased. Setting `K2 = 0` recovers
//! plain top-K truncation; selecting every index recovers the exact
//! recursion.
//!
//! The crate is organized as:
//!
//! - [`chain`]: exact and randomized forward passes, entropy recursions, and
//!   reparameterized (Gumbel) backward sampling for linear chains, plus a
//!   brute-force enumeration oracle.
//! - [`hypertree`]: exact and randomized inside passes over contiguous-span
//!   trees, with their own enumeration oracle.
//! - [`proposals`]: uniform, local, global, mixed, and oracle proposal
//!   constructors driving the index selections.
//! - [`autodiff`]: a scalar reverse-mode tape, so every estimate above is
//!   differentiable end to end.
//! - [`numerics`]: log-space kernels and the splittable deterministic RNG.
//! - [`harness`]: simulated instances with controlled tail profiles and
//!   replicated bias/variance/MSE evaluation against exact references.
//! - [`train`]: desk-scale training demos driven by the estimators.

pub mod autodiff;
pub mod chain;
pub mod harness;
pub mod hypertree;
pub mod numerics;
pub mod proposals;
pub mod train;
