//! Settings and helpers shared by every trainer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{sample_four_balls, sample_unit_ball, SampleBatch};
use crate::nn::{
    init_constant, init_identity_map, init_zero_potential, Activation, Mlp, OptimizerConfig,
};
use crate::rng::{seeded, stream, RunRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            hidden: vec![64, 64],
            activation: Activation::Tanh,
        }
    }
}

impl NetworkConfig {
    pub fn identity_map(&self, rng: &mut RunRng) -> Result<Mlp> {
        init_identity_map(2, 2, &self.hidden, self.activation, rng)
    }

    pub fn zero_potential(&self, input_dim: usize, rng: &mut RunRng) -> Result<Mlp> {
        init_zero_potential(input_dim, &self.hidden, self.activation, rng)
    }

    pub fn constant(&self, input_dim: usize, value: f64, rng: &mut RunRng) -> Result<Mlp> {
        init_constant(input_dim, &self.hidden, self.activation, value, rng)
    }
}

/// Iteration count, batch sizes and the map network shared by all strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    /// Training steps `T` of the stage that updates the map.
    pub iterations: usize,
    pub batch_source: usize,
    pub batch_target: usize,
    pub map_network: NetworkConfig,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            iterations: 1000,
            batch_source: 256,
            batch_target: 256,
            map_network: NetworkConfig::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_source == 0 || self.batch_target == 0 {
            return Err(Error::InvalidParameter(
                "batch sizes must be positive".into(),
            ));
        }
        if self.map_network.hidden.contains(&0) {
            return Err(Error::InvalidParameter(
                "hidden widths must be positive".into(),
            ));
        }
        self.optimizer.validate()
    }
}

/// Fresh i.i.d. batches from the source and target measures.
pub struct BatchSampler {
    rng: RunRng,
    source: usize,
    target: usize,
}

impl BatchSampler {
    pub fn new(seed: u64, stream: u64, source: usize, target: usize) -> Self {
        BatchSampler {
            rng: seeded(seed, stream),
            source,
            target,
        }
    }

    pub fn for_training(cfg: &TrainingConfig, seed: u64) -> Self {
        BatchSampler::new(seed, stream::DATA, cfg.batch_source, cfg.batch_target)
    }

    pub fn source(&mut self) -> SampleBatch {
        sample_unit_ball(self.source, &mut self.rng)
    }

    pub fn target(&mut self) -> SampleBatch {
        sample_four_balls(self.target, &mut self.rng)
    }

    pub fn pair(&mut self) -> (SampleBatch, SampleBatch) {
        let x = self.source();
        let y = self.target();
        (x, y)
    }
}

/// What a trainer hands back besides its report.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub map: Mlp,
    /// Named event counts (skipped batches, empty density rows, ...).
    pub counters: BTreeMap<String, u64>,
}

impl TrainOutcome {
    pub fn new(map: Mlp) -> Self {
        TrainOutcome {
            map,
            counters: BTreeMap::new(),
        }
    }
}

pub(crate) fn check_finite(value: f64, loss: &str, step: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite {
            loss: loss.to_string(),
            step,
        })
    }
}
