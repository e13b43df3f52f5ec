//! Fault-injection toolkit for convolutional network inference.
//!
//! The pieces, bottom up:
//!
//! - [`tensor`], [`ops`], [`graph`], [`model`]: a small deterministic
//!   binary32 inference engine whose graphs can be spliced at any node.
//! - [`analyzer`], [`corpus`]: classify golden/corrupted tensor pairs and
//!   mine per-operator error models from dump corpora.
//! - [`error_model`], [`saboteur`]: the error-model database and the
//!   generators that sample and apply corruptions.
//! - [`campaign`], [`classify`], [`report`]: injection campaigns, outcome
//!   classification and aggregation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analyzer;
pub mod campaign;
pub mod classify;
pub mod corpus;
pub mod error;
pub mod error_model;
pub mod graph;
pub mod model;
pub mod ops;
pub mod par;
pub mod pattern;
pub mod report;
pub mod rng;
pub mod saboteur;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};
pub use graph::{Graph, Inputs, Node, Trace};
pub use tensor::{Loc, MapShape, Tensor};
