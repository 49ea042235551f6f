// SPDX-License-Identifier: MIT OR Apache-2.0

//! Geometry-adaptive explainers.
//!
//! Dictionary explainers (sparse autoencoders and transcoders) are trained on
//! in-distribution activations. Under distribution shift the subspace the model
//! actually uses rotates away from the explainer's decoder subspace. This crate
//! measures that misalignment (the *faithfulness gap*), decomposes the
//! resulting projection loss, checks the perturbation bounds that tie the gap
//! to the second-moment shift, and repairs the decoder in closed form:
//!
//! 1. an orthogonal Procrustes rotation of the decoder onto the top-`r`
//!    eigenspace of the shifted second moment, then
//! 2. a ridge refit of the decoder against the frozen encoder's codes that
//!    shrinks mass leaving that subspace harder than mass inside it.
//!
//! The [`toylab`] module reproduces the controlled toy experiment, and
//! [`metrics`] provides ablation-based faithfulness scores.
//!
//! Module map:
//!
//! - [`spectral`]: second moments, subspaces, projector geometry
//! - [`explainer`]: dictionaries, sparsifiers, activation batches
//! - [`io`]: binary activation files and dictionary checkpoints
//! - [`diagnostics`]: projection loss, decomposition, bound checkers
//! - [`gae`]: Procrustes rotation, constrained refit, `adapt`
//! - [`toylab`]: toy MLP, severity family, explainer training, sweeps
//! - [`metrics`]: nComp, nAOPC, delta-CE, direct logit attribution
//! - [`verify`]: randomized property suites with seeded reproducers

pub mod diagnostics;
pub mod error;
pub mod explainer;
pub mod gae;
pub mod io;
pub mod metrics;
pub mod rng;
pub mod spectral;
pub mod stats;
pub mod toylab;
pub mod verify;

pub use error::{GaeError, Result};

/// Library version stamped into emitted reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
