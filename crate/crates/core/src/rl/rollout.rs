use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{center_reward, RewardConfig, ValueNet};
use crate::envsim::{self, EnvParams, EnvState, SimRewardTerms, Torques, MOTORS, OBS_DIM};
use crate::error::{Error, Result};
use crate::measurement::{CurrentPredictor, MeasurementModel, FEATURES};
use crate::metrics::analytical_proxy_reward;
use crate::policy::{gaussian_log_prob, kl_mean_flat, PolicyCheckpoint};

/// Where the energy term of the reward comes from.
#[derive(Debug, Clone, Copy)]
pub enum EnergySource<'a> {
    None,
    /// Learned current model; energy reward is `−î`.
    Model(&'a MeasurementModel),
    /// Hand-designed proxy with nominal per-motor `r/k²`.
    AnalyticalProxy([f64; MOTORS]),
}

/// Steps from `envs` parallel instances, laid out time-major: index `t * envs + e`.
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub envs: usize,
    pub steps: usize,
    pub obs: Vec<f64>,
    pub actions: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub sim_terms: Vec<SimRewardTerms>,
    /// Weighted task reward per step, before the energy term.
    pub sim_rewards: Vec<f64>,
    /// Model-predicted current per step; `None` unless the model is the energy source.
    pub predicted_current: Option<Vec<f64>>,
    /// λ-free energy reward per step (`−î` or the analytical proxy).
    pub energy_rewards: Option<Vec<f64>>,
    /// Scalarized and centered reward.
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    /// Value of the state following the last step of each instance.
    pub bootstrap: Vec<f64>,
    pub commands: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.envs * self.steps
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn obs_row(&self, i: usize) -> &[f64] {
        &self.obs[i * OBS_DIM..(i + 1) * OBS_DIM]
    }
}

/// Persistent set of simulator instances. Episodes continue across
/// `collect` calls; each new episode draws its command uniformly from the
/// command set and starts the current predictor from a zero state.
pub struct RolloutCollector<'a> {
    env: EnvParams,
    commands: Vec<f64>,
    energy: EnergySource<'a>,
    predictor: Option<CurrentPredictor<'a>>,
    states: Vec<EnvState>,
    rng: ChaCha8Rng,
}

impl<'a> RolloutCollector<'a> {
    pub fn new(env: &EnvParams, commands: &[f64], energy: EnergySource<'a>, envs: usize, seed: u64) -> Result<Self> {
        env.validate()?;
        if envs == 0 || commands.is_empty() {
            return Err(Error::rejected("need at least one instance and one command"));
        }
        let predictor = match energy {
            EnergySource::Model(m) => {
                if m.spec.input_dim != FEATURES || m.spec.output_dim != 1 {
                    return Err(Error::rejected(format!(
                        "current model takes {} inputs, the simulator provides {FEATURES}",
                        m.spec.input_dim
                    )));
                }
                Some(m.predictor(envs))
            }
            _ => None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let states = (0..envs)
            .map(|_| envsim::reset(env, commands[rng.random_range(0..commands.len())], 0))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            env: env.clone(),
            commands: commands.to_vec(),
            energy,
            predictor,
            states,
            rng,
        })
    }

    pub fn envs(&self) -> usize {
        self.states.len()
    }

    /// Run every instance for `steps` steps. With `stochastic` false the
    /// policy mean is applied (log-probs are still of the Gaussian).
    pub fn collect(
        &mut self,
        policy: &PolicyCheckpoint,
        value: Option<&ValueNet>,
        reward: &mut RewardConfig,
        steps: usize,
        stochastic: bool,
    ) -> Result<RolloutBatch> {
        if policy.obs_dim() != OBS_DIM || policy.action_dim() != MOTORS {
            return Err(Error::rejected("policy does not match the simulator's dimensions"));
        }
        let n = self.envs();
        let total = n * steps;
        let with_energy = !matches!(self.energy, EnergySource::None);
        let mut b = RolloutBatch {
            envs: n,
            steps,
            obs: Vec::with_capacity(total * OBS_DIM),
            actions: Vec::with_capacity(total * MOTORS),
            log_probs: Vec::with_capacity(total),
            sim_terms: Vec::with_capacity(total),
            sim_rewards: Vec::with_capacity(total),
            predicted_current: self.predictor.as_ref().map(|_| Vec::with_capacity(total)),
            energy_rewards: with_energy.then(|| Vec::with_capacity(total)),
            rewards: Vec::with_capacity(total),
            values: Vec::with_capacity(total),
            dones: Vec::with_capacity(total),
            bootstrap: Vec::new(),
            commands: Vec::with_capacity(total),
        };
        let mut obs = vec![0.0; n * OBS_DIM];
        for _ in 0..steps {
            for (row, s) in obs.chunks_exact_mut(OBS_DIM).zip(&self.states) {
                row.copy_from_slice(&envsim::observe(s));
            }
            let trace = policy.mean_batch(&obs, n);
            let means = trace.output();
            match value {
                Some(v) => b.values.extend(v.predict_batch(&obs, n)),
                None => b.values.extend(std::iter::repeat_n(0.0, n)),
            }
            b.obs.extend_from_slice(&obs);
            for e in 0..n {
                let mean = &means[e * MOTORS..(e + 1) * MOTORS];
                let action: Torques = if stochastic {
                    std::array::from_fn(|k| {
                        let xi: f64 = self.rng.sample(StandardNormal);
                        mean[k] + policy.log_std[k].exp() * xi
                    })
                } else {
                    std::array::from_fn(|k| mean[k])
                };
                b.log_probs.push(gaussian_log_prob(mean, &policy.log_std, &action));
                b.actions.extend_from_slice(&action);
                b.commands.push(self.states[e].command);

                let (next, terms) = envsim::step(&self.env, &self.states[e], &action)?;
                let sim = reward.sim_weights.weighted_sum(&terms);
                let energy = match self.energy {
                    EnergySource::None => None,
                    EnergySource::Model(_) => {
                        let p = self.predictor.as_mut().expect("model source has a predictor");
                        let i_hat = p.predict(e, &next.last_action, &next.motor_velocities);
                        b.predicted_current.as_mut().expect("allocated").push(i_hat);
                        Some(-i_hat)
                    }
                    EnergySource::AnalyticalProxy(rk2) => {
                        Some(analytical_proxy_reward(&next.last_action, &next.motor_velocities, &rk2))
                    }
                };
                let raw = sim + energy.map_or(0.0, |er| reward.real_weight * er);
                if let (Some(er), Some(list)) = (energy, b.energy_rewards.as_mut()) {
                    list.push(er);
                }
                b.sim_terms.push(terms);
                b.sim_rewards.push(sim);
                b.rewards.push(center_reward(reward, raw));

                let done = next.step_index >= self.env.episode_len;
                b.dones.push(done);
                self.states[e] = if done {
                    if let Some(p) = self.predictor.as_mut() {
                        p.reset(e);
                    }
                    let c = self.commands[self.rng.random_range(0..self.commands.len())];
                    envsim::reset(&self.env, c, 0)?
                } else {
                    next
                };
            }
        }
        for (row, s) in obs.chunks_exact_mut(OBS_DIM).zip(&self.states) {
            row.copy_from_slice(&envsim::observe(s));
        }
        b.bootstrap = match value {
            Some(v) => v.predict_batch(&obs, n),
            None => vec![0.0; n],
        };
        Ok(b)
    }
}

/// Generalized advantage estimates for a batch.
#[derive(Debug, Clone)]
pub struct Advantages {
    /// Normalized to zero mean and unit standard deviation.
    pub advantages: Vec<f64>,
    pub raw: Vec<f64>,
    /// `raw + value`, the value-function targets.
    pub returns: Vec<f64>,
}

/// Standard GAE recursion per instance; episode ends are terminal and the
/// rollout cut is bootstrapped from `batch.bootstrap`.
pub fn gae(batch: &RolloutBatch, gamma: f64, gae_lambda: f64) -> Advantages {
    let n = batch.envs;
    let total = batch.len();
    let mut raw = vec![0.0; total];
    for e in 0..n {
        let mut acc = 0.0;
        let mut next_value = batch.bootstrap[e];
        for t in (0..batch.steps).rev() {
            let i = t * n + e;
            let live = if batch.dones[i] { 0.0 } else { 1.0 };
            let delta = batch.rewards[i] + gamma * next_value * live - batch.values[i];
            acc = delta + gamma * gae_lambda * live * acc;
            raw[i] = acc;
            next_value = batch.values[i];
        }
    }
    let returns: Vec<f64> = raw.iter().zip(&batch.values).map(|(a, v)| a + v).collect();
    let mean = raw.iter().sum::<f64>() / total.max(1) as f64;
    let sd = (raw.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / total.max(1) as f64).sqrt();
    let advantages = raw
        .iter()
        .map(|a| if sd > 1e-12 { (a - mean) / sd } else { a - mean })
        .collect();
    Advantages { advantages, raw, returns }
}

/// Mean KL(candidate ‖ anchor) over the states of a fresh stochastic rollout
/// of the candidate.
pub fn measure_anchor_kl(
    env: &EnvParams,
    commands: &[f64],
    candidate: &PolicyCheckpoint,
    anchor: &PolicyCheckpoint,
    envs: usize,
    steps: usize,
    seed: u64,
) -> Result<f64> {
    let mut collector = RolloutCollector::new(env, commands, EnergySource::None, envs, seed)?;
    let mut reward = RewardConfig::default();
    let batch = collector.collect(candidate, None, &mut reward, steps, true)?;
    kl_mean_flat(candidate, anchor, &batch.obs, batch.len())
}
