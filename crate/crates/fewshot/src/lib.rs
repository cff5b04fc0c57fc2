//! Few-shot classification and detection on procedurally generated images.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: reverse-mode autodiff on dense tensors, with support for
//!   gradients-of-gradients (`create_graph`) as needed by MAML-style training.
//! - [`optim`]: SGD and Adam on flat parameter lists.
//! - [`datasets`] / [`episodes`]: synthetic image corpora, class splits, and
//!   N-way K-shot episode sampling with an optional label-noise protocol.
//! - [`nn`] / [`methods`]: the shared conv backbone and the few-shot methods
//!   (baseline, baseline++, matching, proto, relation, maml).
//! - [`detection`]: a toy anchor-grid detector, its loss decomposition, and an
//!   episodic (inner/outer loop) trainer for few-shot detection.
//! - [`harness`]: config parsing, deterministic seeding, experiment runs,
//!   grouped sweeps, and plot-ready exports.

pub mod datasets;
pub mod detection;
pub mod episodes;
pub mod harness;
pub mod methods;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
