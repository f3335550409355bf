//! Diagonal-Gaussian policy with a state-independent log standard deviation,
//! plus the closed-form KL used to anchor fine-tuning.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffkit::{hexf64, MlpSpec, MlpTrace, ParamVector};
use crate::envsim::{Observation, Torques, MOTORS, OBS_DIM};
use crate::error::{Error, Result};
use crate::persist;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
pub const POLICY_SCHEMA: &str = "powertune.policy/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Lineage {
    PreTrained,
    Anchor,
    Candidate,
    Elite,
    Best,
}

impl fmt::Display for Lineage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Lineage::PreTrained => "pre-trained",
            Lineage::Anchor => "anchor",
            Lineage::Candidate => "candidate",
            Lineage::Elite => "elite",
            Lineage::Best => "best",
        };
        f.write_str(s)
    }
}

/// Sweep configuration a candidate was fine-tuned with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigTag {
    pub lambda: f64,
    /// KL bound `c`; `None` means unconstrained.
    pub kl_bound: Option<f64>,
    pub anchor_id: String,
    /// Position of the anchor in the sweep's anchor list.
    pub anchor_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub schema: String,
    pub id: String,
    pub lineage: Lineage,
    pub iteration: usize,
    pub config_tag: Option<ConfigTag>,
    pub spec: MlpSpec,
    #[serde(with = "hexf64")]
    pub log_std: Vec<f64>,
    pub params: ParamVector,
}

impl PolicyCheckpoint {
    pub fn new(id: impl Into<String>, spec: MlpSpec, params: ParamVector, log_std: Vec<f64>, lineage: Lineage) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(Error::rejected("policy params do not match spec"));
        }
        if log_std.len() != spec.output_dim {
            return Err(Error::rejected("log_std length must equal action dimension"));
        }
        if log_std.iter().any(|s| !(LOG_STD_MIN..=LOG_STD_MAX).contains(s)) {
            return Err(Error::rejected(format!("log_std outside [{LOG_STD_MIN}, {LOG_STD_MAX}]")));
        }
        Ok(Self {
            schema: POLICY_SCHEMA.to_string(),
            id: id.into(),
            lineage,
            iteration: 0,
            config_tag: None,
            spec,
            log_std,
            params,
        })
    }

    /// Fresh policy for this environment: 11 → hidden → 4, small output layer.
    pub fn fresh(id: impl Into<String>, hidden: &[usize], init_log_std: f64, seed: u64) -> Result<Self> {
        let spec = MlpSpec::new(OBS_DIM, hidden, MOTORS);
        let params = spec.init_scaled(seed, 0.01);
        Self::new(id, spec, params, vec![init_log_std; MOTORS], Lineage::PreTrained)
    }

    pub fn obs_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn action_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|s| s.exp()).collect()
    }

    fn check_obs(&self, obs: &[f64]) -> Result<()> {
        if obs.len() != self.obs_dim() {
            return Err(Error::rejected(format!(
                "observation length {} != policy input {}",
                obs.len(),
                self.obs_dim()
            )));
        }
        Ok(())
    }

    pub fn mean(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.check_obs(obs)?;
        Ok(self.spec.forward_batch(self.params.values(), obs, 1).output().to_vec())
    }

    /// Deterministic deployment action.
    pub fn mean_action(&self, obs: &Observation) -> Result<Torques> {
        let m = self.mean(obs)?;
        m.try_into().map_err(|_| Error::rejected("policy action dimension is not the motor count"))
    }

    /// Means for a row-major batch of observations.
    pub fn mean_batch(&self, obs: &[f64], batch: usize) -> MlpTrace {
        self.spec.forward_batch(self.params.values(), obs, batch)
    }

    pub fn clamp_log_std(&mut self) {
        for s in &mut self.log_std {
            *s = s.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }

    /// Same network and distribution, new identity.
    pub fn derive(&self, id: impl Into<String>, lineage: Lineage, iteration: usize) -> Self {
        let mut p = self.clone();
        p.id = id.into();
        p.lineage = lineage;
        p.iteration = iteration;
        p
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        persist::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p: Self = persist::read_json(path)?;
        persist::check_schema(path, &p.schema, POLICY_SCHEMA)?;
        Self::new(p.id.clone(), p.spec.clone(), p.params.clone(), p.log_std.clone(), p.lineage)
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(p)
    }
}

/// Diagonal-Gaussian log density of `action` given mean and log std.
pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    let mut lp = -0.5 * mean.len() as f64 * (2.0 * PI).ln();
    for ((m, ls), a) in mean.iter().zip(log_std).zip(action) {
        let z = (a - m) / ls.exp();
        lp -= ls + 0.5 * z * z;
    }
    lp
}

/// KL(p ‖ q) between diagonal Gaussians.
pub fn gaussian_kl(mean_p: &[f64], log_std_p: &[f64], mean_q: &[f64], log_std_q: &[f64]) -> f64 {
    let mut kl = 0.0;
    for i in 0..mean_p.len() {
        let var_p = (2.0 * log_std_p[i]).exp();
        let var_q = (2.0 * log_std_q[i]).exp();
        let d = mean_p[i] - mean_q[i];
        kl += log_std_q[i] - log_std_p[i] + (var_p + d * d) / (2.0 * var_q) - 0.5;
    }
    kl
}

/// Sample `mean + σ ⊙ ξ` and return it with its exact log density.
pub fn act<R: Rng + ?Sized>(policy: &PolicyCheckpoint, obs: &[f64], rng: &mut R) -> Result<(Vec<f64>, f64)> {
    let mean = policy.mean(obs)?;
    let action: Vec<f64> = mean
        .iter()
        .zip(&policy.log_std)
        .map(|(m, ls)| {
            let xi: f64 = rng.sample(StandardNormal);
            m + ls.exp() * xi
        })
        .collect();
    let lp = gaussian_log_prob(&mean, &policy.log_std, &action);
    Ok((action, lp))
}

pub fn log_prob(policy: &PolicyCheckpoint, obs: &[f64], action: &[f64]) -> Result<f64> {
    if action.len() != policy.action_dim() {
        return Err(Error::rejected("action length does not match policy"));
    }
    let mean = policy.mean(obs)?;
    Ok(gaussian_log_prob(&mean, &policy.log_std, action))
}

/// Batch mean of the closed-form KL(p ‖ q) over observations.
pub fn kl_mean(p: &PolicyCheckpoint, q: &PolicyCheckpoint, obs_batch: &[Observation]) -> Result<f64> {
    if obs_batch.is_empty() {
        return Err(Error::rejected("empty observation batch"));
    }
    if p.action_dim() != q.action_dim() || p.obs_dim() != q.obs_dim() {
        return Err(Error::rejected("policies have different shapes"));
    }
    let flat: Vec<f64> = obs_batch.iter().flatten().copied().collect();
    kl_mean_flat(p, q, &flat, obs_batch.len())
}

pub(crate) fn kl_mean_flat(p: &PolicyCheckpoint, q: &PolicyCheckpoint, flat: &[f64], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::rejected("empty observation batch"));
    }
    let mp = p.mean_batch(flat, n);
    let mq = q.mean_batch(flat, n);
    let d = p.action_dim();
    let total: f64 = mp
        .output()
        .chunks_exact(d)
        .zip(mq.output().chunks_exact(d))
        .map(|(a, b)| gaussian_kl(a, &p.log_std, b, &q.log_std))
        .sum();
    Ok((total / n as f64).max(0.0))
}
