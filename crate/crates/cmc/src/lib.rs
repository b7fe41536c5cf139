//! Compressed Monte Carlo (C-MC).
//!
//! This crate compresses a set of `N` weighted Monte Carlo samples into
//! `M < N` weighted summary particles by stratifying the state space,
//! quantifies the compression loss, and applies the compressed
//! approximations in three settings:
//!
//! * **Distributed inference** — local nodes transmit compressed particle
//!   sets (optionally as Gaussian mixtures) to a central node that pools
//!   them, ranks candidate models, or multiplies sub-posteriors
//!   ([`fusion`]).
//! * **Particle filtering** — a Gaussian particle filter whose single
//!   moment-matched Gaussian is replaced by an `M`-component compressed
//!   mixture (I-GPF), and a filter that compresses the propagated cloud
//!   *before* likelihood evaluation so each step costs `M` instead of `N`
//!   likelihood calls (C-PF) ([`filters`]).
//! * **Adaptive importance sampling** — a layered sampler whose
//!   `T`-component temporal mixture denominator is replaced by an
//!   `M`-component compressed kernel density estimate (CLAIS)
//!   ([`samplers`]).
//!
//! The basic pipeline is: build a [`sample::WeightedSampleSet`], choose a
//! [`partition::Partition`] of the space, [`partition::assign`] samples to
//! regions, and [`compress::compress`] into a [`compress::CompressedSet`].
//! Losses and per-region costs live in [`loss`].
//!
//! Runnable walkthroughs for each capability are under `examples/`; the
//! `cmc` binary drives the batch experiment harness in [`experiments`].

pub mod compress;
pub mod error;
pub mod experiments;
pub mod filters;
pub mod fusion;
pub mod loss;
pub mod partition;
pub mod quad;
pub mod rng;
pub mod sample;
pub mod samplers;

pub use error::{Error, Result};
pub use sample::{MomentFamily, WeightedSampleSet};
