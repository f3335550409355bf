use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Advantages, RolloutBatch};
use crate::diffkit::{AdamConfig, AdamState, MlpSpec, Objective};
use crate::envsim::{MOTORS, OBS_DIM};
use crate::error::{Error, Result};
use crate::policy::{gaussian_kl, PolicyCheckpoint, LOG_STD_MAX, LOG_STD_MIN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub epochs: usize,
    pub minibatch: usize,
    /// Steps per instance per update.
    pub rollout_len: usize,
    pub envs: usize,
    /// Simulator steps per training run.
    pub total_steps: usize,
    pub lr: f64,
    pub value_lr: f64,
    pub max_grad_norm: f64,
    pub entropy_coef: f64,
    pub value_hidden: Vec<usize>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            epochs: 4,
            minibatch: 800,
            rollout_len: 400,
            envs: 8,
            total_steps: 200_000,
            lr: 3e-4,
            value_lr: 1e-3,
            max_grad_norm: 0.5,
            entropy_coef: 0.0,
            value_hidden: vec![64, 64],
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("ppo.{m}")));
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad("clip must be in (0, 1)");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must be in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must be in [0, 1]");
        }
        if self.epochs == 0 || self.minibatch == 0 || self.rollout_len == 0 || self.envs == 0 {
            return bad("epochs, minibatch, rollout_len and envs must be >= 1");
        }
        if self.total_steps < self.batch_steps() {
            return bad("total_steps must cover at least one rollout");
        }
        if !(self.lr > 0.0) || !(self.value_lr > 0.0) || !(self.max_grad_norm > 0.0) {
            return bad("learning rates and max_grad_norm must be > 0");
        }
        if !(self.entropy_coef >= 0.0) {
            return bad("entropy_coef must be >= 0");
        }
        Ok(())
    }

    pub fn batch_steps(&self) -> usize {
        self.envs * self.rollout_len
    }

    pub fn updates(&self) -> usize {
        self.total_steps / self.batch_steps()
    }
}

/// State-value network. Outputs are multiplied by `scale` so the raw network
/// works on returns of order one.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueNet {
    pub spec: MlpSpec,
    pub params: Vec<f64>,
    pub scale: f64,
}

impl ValueNet {
    pub fn new(hidden: &[usize], scale: f64, seed: u64) -> Self {
        let spec = MlpSpec::new(OBS_DIM, hidden, 1);
        let params = spec.init_scaled(seed, 1.0).into_values();
        Self { spec, params, scale }
    }

    pub fn predict_batch(&self, obs: &[f64], n: usize) -> Vec<f64> {
        self.spec
            .forward_batch(&self.params, obs, n)
            .output()
            .iter()
            .map(|v| v * self.scale)
            .collect()
    }
}

/// Optimizer state carried across updates of one training run.
#[derive(Debug, Clone)]
pub struct PpoState {
    policy_adam: AdamState,
    value_adam: AdamState,
    /// Current weight of the anchor-KL penalty.
    pub beta: f64,
    rng: ChaCha8Rng,
}

impl PpoState {
    /// `beta` starts at 1 when a KL bound is set and is pinned to 0 otherwise.
    pub fn new(policy: &PolicyCheckpoint, value: &ValueNet, config: &PpoConfig, kl_bound: Option<f64>, seed: u64) -> Self {
        Self {
            policy_adam: AdamState::new(policy.params.len() + policy.log_std.len(), AdamConfig::with_lr(config.lr)),
            value_adam: AdamState::new(value.params.len(), AdamConfig::with_lr(config.value_lr)),
            beta: if kl_bound.is_some() { 1.0 } else { 0.0 },
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub update: usize,
    /// Simulator steps consumed so far.
    pub steps: usize,
    pub mean_sim_reward: f64,
    pub mean_current: Option<f64>,
    pub mean_energy_reward: Option<f64>,
    pub anchor_kl: Option<f64>,
    pub beta: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
    pub epochs_run: usize,
    pub early_stopped: bool,
}

/// Fixed minibatch pieces for the policy loss.
struct Minibatch<'a> {
    obs: &'a [f64],
    actions: &'a [f64],
    old_log_probs: &'a [f64],
    advantages: &'a [f64],
    anchor_means: Option<&'a [f64]>,
}

struct LossSettings<'a> {
    clip: f64,
    beta: f64,
    entropy_coef: f64,
    anchor_log_std: Option<&'a [f64]>,
}

/// Clipped-surrogate loss plus `beta · KL(π ‖ anchor)` minus an entropy bonus,
/// averaged over the minibatch. `theta` is the policy's network parameters
/// followed by its log std. Returns (loss, clipped fraction).
fn policy_loss(spec: &MlpSpec, theta: &[f64], mb: &Minibatch<'_>, s: &LossSettings<'_>, grad: Option<&mut [f64]>) -> (f64, f64) {
    let n = mb.old_log_probs.len();
    let np = spec.param_count();
    let (net, log_std) = theta.split_at(np);
    let trace = spec.forward_batch(net, mb.obs, n);
    let means = trace.output();
    let inv_n = 1.0 / n as f64;
    let use_kl = s.beta != 0.0 && mb.anchor_means.is_some();

    let mut d_mean = vec![0.0; n * MOTORS];
    let mut d_log_std = [0.0; MOTORS];
    let mut loss = 0.0;
    let mut clipped = 0usize;
    let const_term = -0.5 * MOTORS as f64 * (2.0 * std::f64::consts::PI).ln();
    for b in 0..n {
        let mean = &means[b * MOTORS..(b + 1) * MOTORS];
        let action = &mb.actions[b * MOTORS..(b + 1) * MOTORS];
        let mut lp = const_term;
        let mut z = [0.0; MOTORS];
        for k in 0..MOTORS {
            z[k] = (action[k] - mean[k]) / log_std[k].exp();
            lp -= log_std[k] + 0.5 * z[k] * z[k];
        }
        let ratio = (lp - mb.old_log_probs[b]).exp();
        let adv = mb.advantages[b];
        let unclipped = ratio * adv;
        let clipped_obj = ratio.clamp(1.0 - s.clip, 1.0 + s.clip) * adv;
        let (obj, active) = if unclipped <= clipped_obj {
            (unclipped, true)
        } else {
            clipped += 1;
            (clipped_obj, false)
        };
        loss -= obj * inv_n;
        if active {
            // d(−r·A)/d log π = −r·A
            let g_lp = -unclipped * inv_n;
            for k in 0..MOTORS {
                let sd = log_std[k].exp();
                d_mean[b * MOTORS + k] += g_lp * z[k] / sd;
                d_log_std[k] += g_lp * (z[k] * z[k] - 1.0);
            }
        }
        if use_kl {
            let am = &mb.anchor_means.expect("checked")[b * MOTORS..(b + 1) * MOTORS];
            let als = s.anchor_log_std.expect("anchor log std with anchor means");
            loss += s.beta * inv_n * gaussian_kl(mean, log_std, am, als);
            for k in 0..MOTORS {
                let var_a = (2.0 * als[k]).exp();
                d_mean[b * MOTORS + k] += s.beta * inv_n * (mean[k] - am[k]) / var_a;
                d_log_std[k] += s.beta * inv_n * ((2.0 * log_std[k]).exp() / var_a - 1.0);
            }
        }
    }
    if s.entropy_coef != 0.0 {
        let entropy: f64 = log_std.iter().sum::<f64>() + 0.5 * MOTORS as f64 * (1.0 + (2.0 * std::f64::consts::PI).ln());
        loss -= s.entropy_coef * entropy;
        for d in &mut d_log_std {
            *d -= s.entropy_coef;
        }
    }
    if let Some(g) = grad {
        g.iter_mut().for_each(|x| *x = 0.0);
        spec.backward_batch(net, &trace, &d_mean, &mut g[..np], false);
        g[np..].copy_from_slice(&d_log_std);
    }
    (loss, clipped as f64 * inv_n)
}

/// The policy loss on a frozen batch as a function of the flattened policy
/// parameters (network then log std), for gradient verification.
pub struct SurrogateObjective {
    pub spec: MlpSpec,
    pub obs: Vec<f64>,
    pub actions: Vec<f64>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub anchor_means: Option<Vec<f64>>,
    pub anchor_log_std: Option<Vec<f64>>,
    pub clip: f64,
    pub beta: f64,
    pub entropy_coef: f64,
}

impl SurrogateObjective {
    fn eval(&self, theta: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let mb = Minibatch {
            obs: &self.obs,
            actions: &self.actions,
            old_log_probs: &self.old_log_probs,
            advantages: &self.advantages,
            anchor_means: self.anchor_means.as_deref(),
        };
        let s = LossSettings {
            clip: self.clip,
            beta: self.beta,
            entropy_coef: self.entropy_coef,
            anchor_log_std: self.anchor_log_std.as_deref(),
        };
        policy_loss(&self.spec, theta, &mb, &s, grad).0
    }
}

impl Objective for SurrogateObjective {
    fn value(&self, params: &[f64]) -> f64 {
        self.eval(params, None)
    }

    fn gradient(&self, params: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; params.len()];
        self.eval(params, Some(&mut g));
        g
    }
}

fn clip_norm(g: &mut [f64], max_norm: f64) {
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        g.iter_mut().for_each(|x| *x *= s);
    }
}

fn flatten(policy: &PolicyCheckpoint) -> Vec<f64> {
    let mut theta = policy.params.values().to_vec();
    theta.extend_from_slice(&policy.log_std);
    theta
}

fn unflatten(policy: &mut PolicyCheckpoint, theta: &[f64]) {
    let np = policy.params.len();
    policy.params.values_mut().copy_from_slice(&theta[..np]);
    policy.log_std.copy_from_slice(&theta[np..]);
}

fn anchor_kl_on(spec: &MlpSpec, theta: &[f64], obs: &[f64], n: usize, anchor_means: &[f64], anchor_log_std: &[f64]) -> f64 {
    let np = spec.param_count();
    let trace = spec.forward_batch(&theta[..np], obs, n);
    let total: f64 = trace
        .output()
        .chunks_exact(MOTORS)
        .zip(anchor_means.chunks_exact(MOTORS))
        .map(|(m, a)| gaussian_kl(m, &theta[np..], a, anchor_log_std))
        .sum();
    (total / n as f64).max(0.0)
}

/// One PPO update on `batch`.
///
/// With an anchor and bound `c`, the loss carries `β·KL(π ‖ anchor)`. After
/// every epoch the anchor KL is measured on the batch states: β doubles when
/// it exceeds `c` and halves below `c/2`; above `1.5·c` the epoch is undone
/// and the update stops. A non-finite loss restores the entry parameters and
/// returns a numeric error.
pub fn ppo_update(
    policy: &mut PolicyCheckpoint,
    value: &mut ValueNet,
    batch: &RolloutBatch,
    adv: &Advantages,
    anchor: Option<&PolicyCheckpoint>,
    kl_bound: Option<f64>,
    config: &PpoConfig,
    state: &mut PpoState,
) -> Result<UpdateStats> {
    let n = batch.len();
    if n == 0 || adv.advantages.len() != n {
        return Err(Error::rejected("advantages do not match the batch"));
    }
    if let Some(a) = anchor {
        if a.spec != policy.spec {
            return Err(Error::rejected("anchor and policy have different networks"));
        }
    }
    let spec = policy.spec.clone();
    let entry_policy = policy.clone();
    let entry_value = value.params.clone();
    let anchor_means = anchor.map(|a| a.mean_batch(&batch.obs, n).output().to_vec());
    let anchor_log_std = anchor.map(|a| a.log_std.clone());
    let constrained = kl_bound.is_some() && anchor.is_some();
    if !constrained {
        state.beta = 0.0;
    }

    let mut theta = flatten(policy);
    let np = spec.param_count();
    let mut grad = vec![0.0; theta.len()];
    let mut vgrad = vec![0.0; value.params.len()];
    let mut idx: Vec<usize> = (0..n).collect();
    let mb_size = config.minibatch.min(n);

    let mut obs = Vec::with_capacity(mb_size * OBS_DIM);
    let mut actions = Vec::with_capacity(mb_size * MOTORS);
    let mut old_lp = Vec::with_capacity(mb_size);
    let mut advs = Vec::with_capacity(mb_size);
    let mut a_means = Vec::with_capacity(mb_size * MOTORS);
    let mut targets = Vec::with_capacity(mb_size);

    let mut stats = UpdateStats {
        update: 0,
        steps: 0,
        mean_sim_reward: batch.sim_rewards.iter().sum::<f64>() / n as f64,
        mean_current: batch.predicted_current.as_ref().map(|c| c.iter().sum::<f64>() / n as f64),
        mean_energy_reward: batch.energy_rewards.as_ref().map(|c| c.iter().sum::<f64>() / n as f64),
        anchor_kl: None,
        beta: state.beta,
        policy_loss: 0.0,
        value_loss: 0.0,
        clip_fraction: 0.0,
        epochs_run: 0,
        early_stopped: false,
    };
    let fail = |policy: &mut PolicyCheckpoint, value: &mut ValueNet, what: &str| {
        *policy = entry_policy.clone();
        value.params.clone_from(&entry_value);
        Err(Error::Numeric(format!("non-finite {what} during update")))
    };

    for _ in 0..config.epochs {
        let epoch_start = theta.clone();
        idx.shuffle(&mut state.rng);
        let (mut loss_sum, mut vloss_sum, mut clip_sum, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in idx.chunks(mb_size) {
            obs.clear();
            actions.clear();
            old_lp.clear();
            advs.clear();
            a_means.clear();
            targets.clear();
            for &i in chunk {
                obs.extend_from_slice(batch.obs_row(i));
                actions.extend_from_slice(&batch.actions[i * MOTORS..(i + 1) * MOTORS]);
                old_lp.push(batch.log_probs[i]);
                advs.push(adv.advantages[i]);
                targets.push(adv.returns[i] / value.scale);
                if let Some(am) = &anchor_means {
                    a_means.extend_from_slice(&am[i * MOTORS..(i + 1) * MOTORS]);
                }
            }
            let mb = Minibatch {
                obs: &obs,
                actions: &actions,
                old_log_probs: &old_lp,
                advantages: &advs,
                anchor_means: anchor_means.as_ref().map(|_| a_means.as_slice()),
            };
            let settings = LossSettings {
                clip: config.clip,
                beta: state.beta,
                entropy_coef: config.entropy_coef,
                anchor_log_std: anchor_log_std.as_deref(),
            };
            let (loss, clip_frac) = policy_loss(&spec, &theta, &mb, &settings, Some(&mut grad));
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return fail(policy, value, "policy loss");
            }
            clip_norm(&mut grad, config.max_grad_norm);
            state.policy_adam.step(&mut theta, &grad)?;
            for s in &mut theta[np..] {
                *s = s.clamp(LOG_STD_MIN, LOG_STD_MAX);
            }

            let m = chunk.len();
            let trace = value.spec.forward_batch(&value.params, &obs, m);
            let mut d_out = vec![0.0; m];
            let mut vloss = 0.0;
            for ((d, y), t) in d_out.iter_mut().zip(trace.output()).zip(&targets) {
                vloss += (y - t) * (y - t) / m as f64;
                *d = 2.0 * (y - t) / m as f64;
            }
            if !vloss.is_finite() {
                return fail(policy, value, "value loss");
            }
            vgrad.iter_mut().for_each(|g| *g = 0.0);
            value.spec.backward_batch(&value.params, &trace, &d_out, &mut vgrad, false);
            clip_norm(&mut vgrad, config.max_grad_norm);
            state.value_adam.step(&mut value.params, &vgrad)?;

            loss_sum += loss;
            vloss_sum += vloss;
            clip_sum += clip_frac;
            batches += 1;
        }
        stats.epochs_run += 1;
        stats.policy_loss = loss_sum / batches as f64;
        stats.value_loss = vloss_sum / batches as f64;
        stats.clip_fraction = clip_sum / batches as f64;

        if let (Some(am), Some(als)) = (&anchor_means, &anchor_log_std) {
            let kl = anchor_kl_on(&spec, &theta, &batch.obs, n, am, als);
            if !kl.is_finite() {
                return fail(policy, value, "anchor KL");
            }
            stats.anchor_kl = Some(kl);
            if let (true, Some(c)) = (constrained, kl_bound) {
                if kl > c {
                    state.beta *= 2.0;
                } else if kl < c / 2.0 {
                    state.beta /= 2.0;
                }
                if kl > 1.5 * c {
                    theta = epoch_start;
                    stats.anchor_kl = Some(anchor_kl_on(&spec, &theta, &batch.obs, n, am, als));
                    stats.early_stopped = true;
                    break;
                }
            }
        }
    }
    unflatten(policy, &theta);
    stats.beta = state.beta;
    Ok(stats)
}
