//! One seeded draw of training data, client shards and a held-out test set.

use crate::data::{generate_dataset, partition, Sample, SynthSpec};
use crate::error::Result;
use crate::federation::mix_seed;
use crate::nn::{Activation, NetworkSpec};

const STREAM_TRAIN: u64 = 0xDA7A;
const STREAM_TEST: u64 = 0x7E57;
const STREAM_PARTITION: u64 = 0x9A27;
const STREAM_AUX: u64 = 0xA0C5;

#[derive(Debug, Clone)]
pub struct Scenario {
    pub network: NetworkSpec,
    pub train: Vec<Sample>,
    pub shards: Vec<Vec<Sample>>,
    pub test: Vec<Sample>,
}

pub fn network_for(spec: &SynthSpec, hidden_dims: &[usize], activation: Activation) -> NetworkSpec {
    NetworkSpec {
        input_dim: spec.input_dim,
        hidden_dims: hidden_dims.to_vec(),
        num_classes: spec.num_classes,
        num_groups: spec.num_groups,
        activation,
    }
}

impl Scenario {
    /// Training and test sets are independent draws from `spec`; the training
    /// set is split over `num_clients` with `Dirichlet(beta)` group shares.
    pub fn generate(
        spec: &SynthSpec,
        hidden_dims: &[usize],
        activation: Activation,
        num_clients: usize,
        beta: f64,
        seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        let network = network_for(spec, hidden_dims, activation);
        network.validate()?;
        let train = generate_dataset(spec, mix_seed(&[seed, STREAM_TRAIN]))?;
        let test = generate_dataset(spec, mix_seed(&[seed, STREAM_TEST]))?;
        let shards = partition(&train, num_clients, beta, mix_seed(&[seed, STREAM_PARTITION]))?;
        Ok(Self {
            network,
            train,
            shards,
            test,
        })
    }
}

/// A further independent draw from `spec`, for attacker-side data.
pub fn auxiliary_dataset(spec: &SynthSpec, seed: u64) -> Result<Vec<Sample>> {
    generate_dataset(spec, mix_seed(&[seed, STREAM_AUX]))
}
