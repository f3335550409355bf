use serde::{Deserialize, Serialize};

use super::ppo::PpoConfig;
use super::{gae, measure_anchor_kl, ppo_update, EnergySource, PpoState, RewardConfig, RolloutCollector, UpdateStats, ValueNet};
use crate::envsim::{self, EnvParams, EVAL_COMMANDS};
use crate::error::{Error, Result};
use crate::policy::{Lineage, PolicyCheckpoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub ppo: PpoConfig,
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
    pub reward: RewardConfig,
    pub commands: Vec<f64>,
    /// Updates between tracking evaluations.
    pub eval_every: usize,
    /// Required band occupancy at every command.
    pub min_occupancy: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            ppo: PpoConfig {
                total_steps: 400_000,
                ..PpoConfig::default()
            },
            hidden: vec![64, 64],
            init_log_std: -1.0,
            reward: RewardConfig::default(),
            commands: EVAL_COMMANDS.to_vec(),
            eval_every: 25,
            min_occupancy: 0.8,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.ppo.validate()?;
        self.reward.validate()?;
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("pretrain.hidden must list positive widths".into()));
        }
        if self.commands.is_empty() || self.eval_every == 0 {
            return Err(Error::Config("pretrain.commands must be nonempty and eval_every >= 1".into()));
        }
        Ok(())
    }
}

/// Fraction of steps of one deterministic (mean-action) simulator episode
/// whose velocity lies within the command band.
pub fn tracking_occupancy(env: &EnvParams, policy: &PolicyCheckpoint, command: f64) -> Result<f64> {
    let mut s = envsim::reset(env, command, 0)?;
    let mut inside = 0usize;
    for _ in 0..env.episode_len {
        let a = policy.mean_action(&envsim::observe(&s))?;
        s = envsim::step(env, &s, &a)?.0;
        if envsim::in_band(s.cart_velocity, command) {
            inside += 1;
        }
    }
    Ok(inside as f64 / env.episode_len as f64)
}

/// Lowest [`tracking_occupancy`] over `commands`.
pub fn worst_occupancy(env: &EnvParams, policy: &PolicyCheckpoint, commands: &[f64]) -> Result<f64> {
    commands
        .iter()
        .map(|c| tracking_occupancy(env, policy, *c))
        .try_fold(f64::INFINITY, |m, o| o.map(|o| m.min(o)))
}

fn value_scale(gamma: f64) -> f64 {
    0.1 / (1.0 - gamma)
}

/// Train a policy from scratch on the task reward alone.
///
/// Tracking is checked every `eval_every` updates and at the end; the
/// checkpoint with the best worst-command band occupancy is kept. Fails when
/// that occupancy stays below `min_occupancy`.
pub fn pretrain(env: &EnvParams, config: &PretrainConfig, seed: u64) -> Result<(PolicyCheckpoint, Vec<UpdateStats>)> {
    config.validate()?;
    let ppo = &config.ppo;
    let mut policy = PolicyCheckpoint::fresh("pretrained", &config.hidden, config.init_log_std, seed)?;
    let mut value = ValueNet::new(&ppo.value_hidden, value_scale(ppo.gamma), seed.wrapping_add(1));
    let mut state = PpoState::new(&policy, &value, ppo, None, seed.wrapping_add(2));
    let mut collector = RolloutCollector::new(env, &config.commands, EnergySource::None, ppo.envs, seed.wrapping_add(3))?;
    let mut reward = config.reward.with_lambda(0.0);
    let mut history = Vec::new();
    let mut best: Option<(f64, PolicyCheckpoint)> = None;
    let updates = ppo.updates();
    for u in 0..updates {
        let batch = collector.collect(&policy, Some(&value), &mut reward, ppo.rollout_len, true)?;
        let adv = gae(&batch, ppo.gamma, ppo.gae_lambda);
        let mut stats = ppo_update(&mut policy, &mut value, &batch, &adv, None, None, ppo, &mut state)?;
        stats.update = u;
        stats.steps = (u + 1) * ppo.batch_steps();
        history.push(stats);
        if (u + 1) % config.eval_every == 0 || u + 1 == updates {
            let occ = worst_occupancy(env, &policy, &config.commands)?;
            if best.as_ref().is_none_or(|(b, _)| occ >= *b) {
                best = Some((occ, policy.clone()));
            }
        }
    }
    let (occ, mut policy) = best.expect("at least one evaluation");
    if occ < config.min_occupancy {
        return Err(Error::TrainingFailure(format!(
            "pre-training reached band occupancy {occ:.3} < {}",
            config.min_occupancy
        )));
    }
    policy.lineage = Lineage::PreTrained;
    Ok((policy, history))
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub policy: PolicyCheckpoint,
    pub stats: Vec<UpdateStats>,
    /// KL(candidate ‖ anchor) on a fresh rollout after projection.
    pub anchor_kl: Option<f64>,
    /// Interpolation weight kept toward the optimized parameters (1 = untouched).
    pub projection: f64,
}

fn blend(anchor: &PolicyCheckpoint, target: &PolicyCheckpoint, alpha: f64) -> PolicyCheckpoint {
    let mut p = target.clone();
    for (v, (a, t)) in p.params.values_mut().iter_mut().zip(anchor.params.values().iter().zip(target.params.values())) {
        *v = a + alpha * (t - a);
    }
    for (v, (a, t)) in p.log_std.iter_mut().zip(anchor.log_std.iter().zip(&target.log_std)) {
        *v = a + alpha * (t - a);
    }
    p
}

/// Fine-tune from `anchor` with the scalarized, centered reward and the
/// anchor-KL constraint.
///
/// When bounded, the result is checked on a fresh rollout: if its anchor KL
/// exceeds `c`, parameters are pulled toward the anchor along the straight
/// line between the two, keeping the largest weight (by bisection) whose
/// fresh-rollout KL is within `c`.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    env: &EnvParams,
    anchor: &PolicyCheckpoint,
    energy: EnergySource<'_>,
    reward: &RewardConfig,
    kl_bound: Option<f64>,
    ppo: &PpoConfig,
    commands: &[f64],
    seed: u64,
    id: &str,
) -> Result<FinetuneOutcome> {
    ppo.validate()?;
    reward.validate()?;
    if let Some(c) = kl_bound {
        if !(c > 0.0) {
            return Err(Error::rejected("KL bound must be > 0"));
        }
    }
    if let EnergySource::Model(m) = energy {
        if m.version == 0 {
            return Err(Error::rejected("current model version must be > 0"));
        }
    }
    let mut policy = anchor.derive(id, Lineage::Candidate, anchor.iteration);
    let mut value = ValueNet::new(&ppo.value_hidden, value_scale(ppo.gamma), seed.wrapping_add(1));
    let mut state = PpoState::new(&policy, &value, ppo, kl_bound, seed.wrapping_add(2));
    let mut collector = RolloutCollector::new(env, commands, energy, ppo.envs, seed.wrapping_add(3))?;
    let mut reward = reward.clone();
    reward.center = 0.0;
    let mut history = Vec::new();
    for u in 0..ppo.updates() {
        let batch = collector.collect(&policy, Some(&value), &mut reward, ppo.rollout_len, true)?;
        let adv = gae(&batch, ppo.gamma, ppo.gae_lambda);
        let mut stats = ppo_update(&mut policy, &mut value, &batch, &adv, Some(anchor), kl_bound, ppo, &mut state)?;
        stats.update = u;
        stats.steps = (u + 1) * ppo.batch_steps();
        history.push(stats);
    }

    let Some(c) = kl_bound else {
        return Ok(FinetuneOutcome {
            policy,
            stats: history,
            anchor_kl: None,
            projection: 1.0,
        });
    };
    let check_seed = seed.wrapping_add(4);
    let measure = |p: &PolicyCheckpoint| measure_anchor_kl(env, commands, p, anchor, ppo.envs, ppo.rollout_len, check_seed);
    let mut kl = measure(&policy)?;
    let mut alpha = 1.0;
    if kl > c {
        let optimized = policy.clone();
        let (mut lo, mut hi) = (0.0, 1.0);
        let mut lo_kl = 0.0;
        for _ in 0..12 {
            let mid = 0.5 * (lo + hi);
            let k = measure(&blend(anchor, &optimized, mid))?;
            if k <= c {
                lo = mid;
                lo_kl = k;
            } else {
                hi = mid;
            }
        }
        alpha = lo;
        kl = lo_kl;
        policy = blend(anchor, &optimized, alpha);
    }
    Ok(FinetuneOutcome {
        policy,
        stats: history,
        anchor_kl: Some(kl),
        projection: alpha,
    })
}
