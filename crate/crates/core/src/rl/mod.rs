//! Policy optimization: pre-training on the task reward and KL-anchored
//! fine-tuning with an injected energy term.

mod ppo;
mod rollout;
mod train;

pub use ppo::{ppo_update, PpoConfig, PpoState, SurrogateObjective, UpdateStats, ValueNet};
pub use rollout::{gae, measure_anchor_kl, Advantages, EnergySource, RolloutBatch, RolloutCollector};
pub use train::{finetune, pretrain, tracking_occupancy, worst_occupancy, FinetuneOutcome, PretrainConfig};

use serde::{Deserialize, Serialize};

use crate::envsim::SimRewardTerms;
use crate::error::{Error, Result};

/// Weights of the simulator's task reward terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimWeights {
    pub tracking: f64,
    pub action_smoothness: f64,
    pub torque_magnitude: f64,
}

impl Default for SimWeights {
    fn default() -> Self {
        Self {
            tracking: 1.0,
            action_smoothness: 0.02,
            torque_magnitude: 0.02,
        }
    }
}

impl SimWeights {
    pub fn weighted_sum(&self, t: &SimRewardTerms) -> f64 {
        self.tracking * t.tracking + self.action_smoothness * t.action_smoothness + self.torque_magnitude * t.torque_magnitude
    }
}

/// Reward scalarization and its running-mean centering state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub sim_weights: SimWeights,
    /// λ, the weight of the energy term.
    pub real_weight: f64,
    pub centering_rate: f64,
    /// Running mean of the scalarized reward.
    #[serde(default)]
    pub center: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            sim_weights: SimWeights::default(),
            real_weight: 0.0,
            centering_rate: 0.005,
            center: 0.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.sim_weights;
        if ![w.tracking, w.action_smoothness, w.torque_magnitude, self.real_weight, self.center]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::Config("reward weights must be finite".into()));
        }
        if !(self.centering_rate > 0.0 && self.centering_rate <= 1.0) {
            return Err(Error::Config("reward.centering_rate must be in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self {
            real_weight: lambda,
            center: 0.0,
            ..self.clone()
        }
    }
}

/// Raw scalarized reward `Σ wᵢ·termᵢ + λ·(−î)`, or the sim sum alone when no
/// current prediction is supplied.
pub fn scalarize(config: &RewardConfig, sim_terms: &SimRewardTerms, predicted_current: Option<f64>) -> f64 {
    let sim = config.sim_weights.weighted_sum(sim_terms);
    match predicted_current {
        Some(i) => sim - config.real_weight * i,
        None => sim,
    }
}

/// Update the running mean with `raw` and return the centered reward.
pub fn center_reward(config: &mut RewardConfig, raw: f64) -> f64 {
    config.center += config.centering_rate * (raw - config.center);
    raw - config.center
}
