//! Numerical laboratory for slow-fast jump diffusions on foliated spaces.
//!
//! The crate has three layers. The bottom layer simulates: compound-Poisson
//! drivers ([`levy`]), canonical (Marcus) SDE integration with jump-adapted
//! RK4 ([`marcus`]), and a small family of foliated test systems
//! ([`systems`]). The middle layer estimates: leafwise ergodic averages, their
//! mixing rate, and the pathwise error between a perturbed system and its
//! averaged equation under a shared transversal driver ([`averaging`]), plus
//! the block decomposition of the averaging error ([`rate`]). The top layer
//! quantifies: convergence-rate fits over an epsilon grid ([`rate`]) and the
//! nonlinear integral-inequality bounds that control the error growth
//! ([`bihari`]).
//!
//! Everything stochastic draws from counter-based streams ([`rng`]) keyed by
//! `(seed, path index, process tag)`, so every result is a pure function of
//! its configuration and runs bit-identically at any thread count.

pub mod averaging;
pub mod bihari;
pub mod levy;
pub mod marcus;
pub mod rate;
pub mod rng;
pub mod systems;
