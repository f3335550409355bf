//! Analytical-proxy baseline: fine-tune from the pre-trained policy with the
//! nominal `τq̇ + (r/k²)τ²` reward over a wide (λ, c) grid, keep the best
//! scorers by mean proxy reward, and measure them in the real twin.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{bound_of, derive_seed, select_best, select_top_k, CandidateRecord, Evaluation, IterationRecord, Pipeline};
use crate::envsim::MOTORS;
use crate::error::{Error, Result};
use crate::metrics::{proxy_correlation, ProxyComparison};
use crate::policy::{ConfigTag, Lineage, PolicyCheckpoint};
use crate::rl::{finetune, worst_occupancy, EnergySource};

pub const BASELINE_SCHEMA: &str = "powertune.baseline/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub lambdas: Vec<f64>,
    /// Multiplies every λ; the proxy is in watts rather than amperes.
    pub lambda_scale: f64,
    /// `inf` means unconstrained.
    pub kl_bounds: Vec<f64>,
    /// How many top proxy scorers get a real evaluation.
    pub evaluated: usize,
    pub r_over_k2: [f64; MOTORS],
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            lambdas: vec![5e-5, 1e-4, 5e-4, 1e-3, 5e-3],
            lambda_scale: 100.0,
            kl_bounds: vec![0.1, 0.2, 0.5, 1.0, 5.0, f64::INFINITY],
            evaluated: 24,
            r_over_k2: [4.0; MOTORS],
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() || self.kl_bounds.is_empty() {
            return Err(Error::Config("baseline.lambdas and baseline.kl_bounds must be nonempty".into()));
        }
        if self.lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) || !(self.lambda_scale > 0.0) || !self.lambda_scale.is_finite() {
            return Err(Error::Config("baseline.lambdas and lambda_scale must be finite and positive".into()));
        }
        if self.kl_bounds.iter().any(|c| !(*c > 0.0)) {
            return Err(Error::Config("baseline.kl_bounds must be > 0".into()));
        }
        if self.evaluated == 0 || self.evaluated > self.lambdas.len() * self.kl_bounds.len() {
            return Err(Error::Config("baseline.evaluated must be between 1 and the grid size".into()));
        }
        if self.r_over_k2.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Config("baseline.r_over_k2 must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub schema: String,
    pub candidates: Vec<CandidateRecord>,
    pub evaluated: Vec<String>,
    pub evaluations: BTreeMap<String, Evaluation>,
    pub best_id: String,
    pub best_net_delta_p: f64,
    pub comparison: ProxyComparison,
    pub real_steps: usize,
}

/// Pair predicted and measured net reductions for the elites of the last
/// `last_n` iterations.
pub fn data_driven_comparison(records: &[IterationRecord], last_n: usize) -> ProxyComparison {
    let mut cmp = ProxyComparison {
        proxy: "data-driven".into(),
        policy_ids: vec![],
        predicted: vec![],
        measured: vec![],
        correlation: None,
    };
    for r in records.iter().rev().take(last_n).rev() {
        for id in &r.elites {
            if let Some(e) = r.evaluations.get(id) {
                if let Some(m) = e.net_delta_p {
                    cmp.policy_ids.push(id.clone());
                    cmp.predicted.push(e.predicted_reduction);
                    cmp.measured.push(m);
                }
            }
        }
    }
    cmp.correlation = proxy_correlation(&cmp.predicted, &cmp.measured).ok();
    cmp
}

pub fn baseline_id(lambda: f64, c: f64) -> String {
    let c = if c.is_finite() { format!("{c}") } else { "inf".into() };
    format!("bl-l{lambda}-c{c}")
}

/// Run the whole baseline sweep. Returns the report and every candidate.
pub fn run_baseline(
    pipeline: &Pipeline,
    pretrained: &PolicyCheckpoint,
    cfg: &BaselineConfig,
    seed: u64,
) -> Result<(BaselineReport, Vec<PolicyCheckpoint>)> {
    cfg.validate()?;
    let lc = &pipeline.config;
    let energy = EnergySource::AnalyticalProxy(cfg.r_over_k2);
    let score_seed = derive_seed(seed, 0xba5e, 0);
    let mut records = Vec::new();
    let mut policies = Vec::new();
    let mut n = 0u64;
    for &lambda in &cfg.lambdas {
        for &c in &cfg.kl_bounds {
            let id = baseline_id(lambda, c);
            let out = finetune(
                &pipeline.env,
                pretrained,
                energy,
                &lc.reward.with_lambda(lambda * cfg.lambda_scale),
                bound_of(c),
                &lc.finetune,
                &lc.commands,
                derive_seed(seed, 0xba5e, n + 1),
                &id,
            )?;
            n += 1;
            let tag = ConfigTag {
                lambda,
                kl_bound: bound_of(c),
                anchor_id: pretrained.id.clone(),
                anchor_rank: 0,
            };
            let mut policy = out.policy;
            policy.config_tag = Some(tag.clone());
            records.push(CandidateRecord {
                id,
                tag,
                sim_energy_score: pipeline.sim_energy_score(&policy, energy, score_seed)?,
                sim_occupancy: worst_occupancy(&pipeline.env, &policy, &lc.commands)?,
                anchor_kl: out.anchor_kl,
                projection: out.projection,
            });
            policies.push(policy);
        }
    }

    let top = select_top_k(&records, cfg.evaluated, lc.min_occupancy)?;
    let pre_cost = pipeline.predicted_cost(pretrained, energy)?;
    let mut evaluations = BTreeMap::new();
    for r in &top {
        let p = policies.iter_mut().find(|p| p.id == r.id).expect("top candidate exists");
        p.lineage = Lineage::Elite;
        let predicted = pipeline.predicted_reduction(p, pre_cost, energy, 0.0)?;
        evaluations.insert(r.id.clone(), pipeline.evaluate(p, pretrained, predicted)?);
    }
    let best_id = select_best(&evaluations).ok_or_else(|| Error::TrainingFailure("no baseline policy produced a qualifying segment".into()))?;
    let best_net_delta_p = evaluations[&best_id].net_delta_p.unwrap_or(0.0);

    let mut cmp = ProxyComparison {
        proxy: "analytical".into(),
        policy_ids: vec![],
        predicted: vec![],
        measured: vec![],
        correlation: None,
    };
    for r in &top {
        let e = &evaluations[&r.id];
        if let Some(m) = e.net_delta_p {
            cmp.policy_ids.push(r.id.clone());
            cmp.predicted.push(e.predicted_reduction);
            cmp.measured.push(m);
        }
    }
    cmp.correlation = proxy_correlation(&cmp.predicted, &cmp.measured).ok();

    let report = BaselineReport {
        schema: BASELINE_SCHEMA.into(),
        evaluated: top.iter().map(|r| r.id.clone()).collect(),
        real_steps: evaluations.len() * pipeline.real_steps_per_eval(),
        candidates: records,
        evaluations,
        best_id,
        best_net_delta_p,
        comparison: cmp,
    };
    Ok((report, policies))
}
