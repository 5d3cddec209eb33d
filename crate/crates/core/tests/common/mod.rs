// SPDX-License-Identifier: Apache-2.0
#![allow(dead_code)]

pub mod gradcheck;

use cktgnn::basis::SubgraphBasis;
use cktgnn::circuit::DeviceDag;
use cktgnn::dataset::{attempt_rng, sample_params, sample_topology, SamplerConfig};

/// Random valid circuit with random values.
pub fn sample_circuit(seed: u64, b: &SubgraphBasis) -> DeviceDag {
    let cfg = SamplerConfig::default();
    let mut rng = attempt_rng(seed, 0);
    let g = sample_topology(&mut rng, &cfg, b).expect("sampler");
    sample_params(&mut rng, &g, &cfg)
}
