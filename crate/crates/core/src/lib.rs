// SPDX-License-Identifier: Apache-2.0
#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Op-amp topology representation, simulation and latent-space search.

pub mod acsim;
pub mod basis;
pub mod circuit;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod generator;
pub mod graphlize;
pub mod netlist;
pub mod nn;
pub mod search;
pub mod stage;
pub mod svg;

pub use error::{CktError, Result};

/// Version string embedded in every output file.
pub const TOOL_VERSION: &str = concat!("cktgnn ", env!("CARGO_PKG_VERSION"));
