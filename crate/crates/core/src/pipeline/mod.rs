//! The outer loop: collect real data from the elites, refit the current
//! model on everything collected so far, fine-tune one candidate per
//! (anchor, λ, c), keep the top-K by simulated energy, and pick the best
//! by measured real net power.

mod baseline;
mod store;

pub use baseline::{baseline_id, data_driven_comparison, run_baseline, BaselineConfig, BaselineReport, BASELINE_SCHEMA};
pub use store::{load_state, save_iteration, RunStore, RUN_SCHEMA};

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffkit::RecurrentSpec;
use crate::envsim::{self, EnvParams, EVAL_COMMANDS, MOTORS};
use crate::error::{Error, Result};
use crate::measurement::{train_measurement, MeasurementModel, RealDataset, RealTrajectory, StepRecord, TrainingConfig, FEATURES};
use crate::metrics::{delta_p, head_to_head, PowerReport};
use crate::policy::{ConfigTag, Lineage, PolicyCheckpoint};
use crate::realworld::{self, RealParams};
use crate::rl::{finetune, worst_occupancy, EnergySource, PpoConfig, RewardConfig, RolloutCollector, UpdateStats};

pub const RECORD_SCHEMA: &str = "powertune.iteration/1";

/// Reward weights × KL bounds swept per anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub lambdas: Vec<f64>,
    /// KL bounds `c`; `inf` means unconstrained.
    pub kl_bounds: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            lambdas: vec![0.5, 1.0, 5.0],
            kl_bounds: vec![0.2, 0.5, 1.0],
        }
    }
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() || self.kl_bounds.is_empty() {
            return Err(Error::Config("grid.lambdas and grid.kl_bounds must be nonempty".into()));
        }
        if self.lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Config("grid.lambdas must be finite and >= 0".into()));
        }
        if self.kl_bounds.iter().any(|c| !(*c > 0.0)) {
            return Err(Error::Config("grid.kl_bounds must be > 0".into()));
        }
        Ok(())
    }
}

pub(crate) fn bound_of(c: f64) -> Option<f64> {
    c.is_finite().then_some(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub grid: SweepGrid,
    /// K, elites promoted to real evaluation.
    pub elites: usize,
    pub iterations: usize,
    /// Real episodes per command per data-source policy.
    pub episodes_per_command: usize,
    pub commands: Vec<f64>,
    pub eval_command: f64,
    pub block_seconds: f64,
    pub total_seconds: f64,
    /// Stochastic episodes in the frozen-seed simulated energy score.
    pub score_episodes: usize,
    /// Stop once the best net ΔP reaches this, percent.
    pub target_delta_p: f64,
    /// Band occupancy a real evaluation needs to be selectable.
    pub min_occupancy: f64,
    pub finetune: PpoConfig,
    pub reward: RewardConfig,
    pub measurement: TrainingConfig,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            grid: SweepGrid::default(),
            elites: 6,
            iterations: 4,
            episodes_per_command: 4,
            commands: EVAL_COMMANDS.to_vec(),
            eval_command: 0.8,
            block_seconds: 80.0,
            total_seconds: 160.0,
            score_episodes: 10,
            target_delta_p: 15.0,
            min_occupancy: 0.8,
            finetune: PpoConfig::default(),
            reward: RewardConfig::default(),
            measurement: TrainingConfig::default(),
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.finetune.validate()?;
        self.reward.validate()?;
        self.measurement.validate()?;
        if self.elites == 0 || self.iterations == 0 || self.episodes_per_command == 0 || self.score_episodes == 0 {
            return Err(Error::Config("loop.elites, iterations, episodes_per_command and score_episodes must be >= 1".into()));
        }
        if self.commands.is_empty() {
            return Err(Error::Config("loop.commands must be nonempty".into()));
        }
        if !(self.block_seconds > 0.0) || !(self.total_seconds >= 2.0 * self.block_seconds) {
            return Err(Error::Config("loop.total_seconds must cover at least two blocks".into()));
        }
        if !(0.0..=1.0).contains(&self.min_occupancy) {
            return Err(Error::Config("loop.min_occupancy must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Everything a run needs besides its evolving state.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub env: EnvParams,
    pub real: RealParams,
    pub config: LoopConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub id: String,
    pub tag: ConfigTag,
    /// Unweighted mean energy reward over the frozen simulated evaluation.
    pub sim_energy_score: f64,
    /// Worst-command band occupancy of one deterministic simulated episode.
    pub sim_occupancy: f64,
    pub anchor_kl: Option<f64>,
    pub projection: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: PowerReport,
    /// The pre-trained policy measured in the same alternating run.
    pub reference: PowerReport,
    pub net_delta_p: Option<f64>,
    pub gross_delta_p: Option<f64>,
    /// Reduction the proxy predicts in simulation, percent.
    pub predicted_reduction: f64,
    pub eligible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub schema: String,
    pub iteration: usize,
    pub dataset_fingerprint: String,
    pub dataset_trajectories: usize,
    pub dataset_steps: usize,
    pub model_version: usize,
    pub model_epochs: usize,
    pub model_heldout_relative_rmse: f64,
    pub anchors: Vec<String>,
    pub candidates: Vec<CandidateRecord>,
    pub elites: Vec<String>,
    pub incumbent: String,
    pub evaluations: BTreeMap<String, Evaluation>,
    pub best_id: String,
    pub best_net_power: f64,
    pub best_net_delta_p: f64,
    pub best_gross_delta_p: f64,
    /// Real samples used this iteration (data collection plus evaluation).
    pub real_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopState {
    pub dataset: RealDataset,
    pub pretrained: PolicyCheckpoint,
    pub best: PolicyCheckpoint,
    /// Data sources for the next iteration.
    pub elites: Vec<PolicyCheckpoint>,
    pub records: Vec<IterationRecord>,
    pub seed: u64,
}

impl LoopState {
    pub fn new(pretrained: PolicyCheckpoint, seed: u64) -> Self {
        Self {
            dataset: RealDataset::new(),
            best: pretrained.clone(),
            elites: vec![pretrained.clone()],
            pretrained,
            records: Vec::new(),
            seed,
        }
    }

    pub fn next_iteration(&self) -> usize {
        self.records.len()
    }
}

/// Artifacts of one iteration beyond its record, for persistence.
#[derive(Debug, Clone)]
pub struct IterationOutput {
    pub record: IterationRecord,
    pub model: MeasurementModel,
    pub candidates: Vec<(PolicyCheckpoint, Vec<UpdateStats>)>,
}

/// SplitMix64 finalizer over a combination of stream identifiers.
pub(crate) fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Roll each policy in the real twin for `episodes` episodes per command,
/// sampling stochastic actions, and record (τ, q̇, i) per step.
pub fn collect_real(
    real: &RealParams,
    policies: &[&PolicyCheckpoint],
    episodes: usize,
    commands: &[f64],
    iteration: usize,
    seed: u64,
) -> Result<Vec<RealTrajectory>> {
    if policies.is_empty() {
        return Err(Error::rejected("no policies to collect from"));
    }
    let mut out = Vec::with_capacity(policies.len() * episodes * commands.len());
    for (pi, policy) in policies.iter().enumerate() {
        if policy.obs_dim() != envsim::OBS_DIM || policy.action_dim() != MOTORS {
            return Err(Error::rejected(format!("policy {} does not match the environment", policy.id)));
        }
        for (ci, &command) in commands.iter().enumerate() {
            for ep in 0..episodes {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, pi as u64, (ci * episodes + ep) as u64));
                let mut state = realworld::real_reset(real, command, 0, 1.0)?;
                let mut steps = Vec::with_capacity(real.episode_len());
                for _ in 0..real.episode_len() {
                    let mean = policy.mean_action(&envsim::observe(&state.env_state))?;
                    let action: [f64; MOTORS] = std::array::from_fn(|k| {
                        let xi: f64 = rng.sample(StandardNormal);
                        mean[k] + policy.log_std[k].exp() * xi
                    });
                    let (next, sample, _) = realworld::real_step(real, &state, &action)?;
                    state = next;
                    steps.push(StepRecord {
                        torques: sample.torques,
                        motor_velocities: sample.motor_velocities,
                        current: sample.current,
                    });
                }
                out.push(RealTrajectory {
                    id: 0,
                    policy_id: policy.id.clone(),
                    lineage: policy.lineage,
                    command,
                    iteration,
                    steps,
                });
            }
        }
    }
    Ok(out)
}

fn tie_order(a: &CandidateRecord, b: &CandidateRecord) -> Ordering {
    let c = |t: &ConfigTag| t.kl_bound.unwrap_or(f64::INFINITY);
    a.tag
        .lambda
        .total_cmp(&b.tag.lambda)
        .then(c(&a.tag).total_cmp(&c(&b.tag)))
        .then(a.tag.anchor_rank.cmp(&b.tag.anchor_rank))
        .then(a.id.cmp(&b.id))
}

/// The K highest simulated energy scores. Candidates that still track in
/// simulation (`sim_occupancy >= min_occupancy`) rank ahead of those that do
/// not, since standing still is always cheapest. Score ties go to smaller λ,
/// smaller c, earlier anchor, then id.
pub fn select_top_k(candidates: &[CandidateRecord], k: usize, min_occupancy: f64) -> Result<Vec<CandidateRecord>> {
    if candidates.len() < k {
        return Err(Error::rejected(format!("{} candidates for {k} elite slots", candidates.len())));
    }
    let mut sorted = candidates.to_vec();
    let feasible = |c: &CandidateRecord| c.sim_occupancy >= min_occupancy;
    sorted.sort_by(|a, b| {
        feasible(b)
            .cmp(&feasible(a))
            .then_with(|| b.sim_energy_score.total_cmp(&a.sim_energy_score))
            .then_with(|| tie_order(a, b))
    });
    sorted.truncate(k);
    Ok(sorted)
}

/// Argmin of net power over eligible evaluations, ties broken by id. Falls
/// back to every evaluation with a net power when none is eligible.
pub fn select_best(evaluations: &BTreeMap<String, Evaluation>) -> Option<String> {
    let pick = |eligible_only: bool| {
        evaluations
            .iter()
            .filter(|(_, e)| e.report.net_power.is_some() && (!eligible_only || e.eligible))
            .min_by(|(ia, a), (ib, b)| {
                a.report
                    .net_power
                    .unwrap()
                    .total_cmp(&b.report.net_power.unwrap())
                    .then_with(|| ia.cmp(ib))
            })
            .map(|(id, _)| id.clone())
    };
    pick(true).or_else(|| pick(false))
}

fn format_number(x: f64) -> String {
    if x.is_finite() {
        format!("{x}")
    } else {
        "inf".to_string()
    }
}

pub fn candidate_id(iteration: usize, anchor_rank: usize, lambda: f64, c: f64) -> String {
    format!("it{iteration}-a{anchor_rank}-l{}-c{}", format_number(lambda), format_number(c))
}

impl Pipeline {
    pub fn new(env: EnvParams, real: RealParams, config: LoopConfig) -> Result<Self> {
        env.validate()?;
        real.validate()?;
        config.validate()?;
        Ok(Self { env, real, config })
    }

    fn model_spec(&self) -> RecurrentSpec {
        RecurrentSpec::new(FEATURES, self.config.measurement.hidden_dim, 1)
    }

    /// Unweighted mean energy reward over frozen-seed stochastic episodes at
    /// the evaluation command.
    pub fn sim_energy_score(&self, policy: &PolicyCheckpoint, energy: EnergySource<'_>, seed: u64) -> Result<f64> {
        let mut collector = RolloutCollector::new(&self.env, &[self.config.eval_command], energy, self.config.score_episodes, seed)?;
        let mut reward = RewardConfig::default();
        let batch = collector.collect(policy, None, &mut reward, self.env.episode_len, true)?;
        let er = batch.energy_rewards.ok_or_else(|| Error::rejected("scoring needs an energy source"))?;
        Ok(er.iter().sum::<f64>() / er.len() as f64)
    }

    /// Mean energy cost of one deterministic episode at the evaluation command.
    pub fn predicted_cost(&self, policy: &PolicyCheckpoint, energy: EnergySource<'_>) -> Result<f64> {
        let mut collector = RolloutCollector::new(&self.env, &[self.config.eval_command], energy, 1, 0)?;
        let mut reward = RewardConfig::default();
        let batch = collector.collect(policy, None, &mut reward, self.env.episode_len, false)?;
        let er = batch.energy_rewards.ok_or_else(|| Error::rejected("prediction needs an energy source"))?;
        Ok(-er.iter().sum::<f64>() / er.len() as f64)
    }

    /// Real head-to-head of `policy` against `reference` at the evaluation command.
    pub fn evaluate(&self, policy: &PolicyCheckpoint, reference: &PolicyCheckpoint, predicted_reduction: f64) -> Result<Evaluation> {
        let c = &self.config;
        let (report, refr) = head_to_head(&self.real, policy, reference, c.eval_command, c.block_seconds, c.total_seconds, 0)?;
        let both = |f: fn(&PowerReport) -> Option<f64>| match (f(&refr), f(&report)) {
            (Some(a), Some(b)) => delta_p(a, b).ok(),
            _ => None,
        };
        Ok(Evaluation {
            net_delta_p: both(|r| r.net_power),
            gross_delta_p: both(|r| r.gross_power),
            eligible: report.is_eligible(c.min_occupancy),
            predicted_reduction,
            report,
            reference: refr,
        })
    }

    /// Reduction of `policy` against the pre-trained one as predicted by `energy`, percent of net.
    pub fn predicted_reduction(&self, policy: &PolicyCheckpoint, pretrained_cost: f64, energy: EnergySource<'_>, offset: f64) -> Result<f64> {
        let cost = self.predicted_cost(policy, energy)?;
        let base = pretrained_cost - offset;
        if !(base.abs() > 0.0) {
            return Err(Error::Numeric("pre-trained predicted cost equals the offset".into()));
        }
        Ok((pretrained_cost - cost) / base * 100.0)
    }

    fn real_steps_per_eval(&self) -> usize {
        (self.config.total_seconds / self.real.dt()).round() as usize
    }

    /// One pass of the outer loop. Does not touch the disk; the caller
    /// persists the returned output and only then adopts the new state.
    pub fn run_iteration(&self, state: &LoopState) -> Result<(LoopState, IterationOutput)> {
        let c = &self.config;
        let i = state.next_iteration();
        let seed_i = derive_seed(state.seed, 0x17e5, i as u64);

        // (a) real data from the current elites and the incumbent
        let mut sources: Vec<&PolicyCheckpoint> = Vec::new();
        for p in state.elites.iter().chain(std::iter::once(&state.best)) {
            if !sources.iter().any(|q| q.id == p.id) {
                sources.push(p);
            }
        }
        let trajs = collect_real(&self.real, &sources, c.episodes_per_command, &c.commands, i, derive_seed(seed_i, 1, 0))?;
        let collected: usize = trajs.iter().map(|t| t.steps.len()).sum();
        let mut dataset = state.dataset.clone();
        dataset.extend(trajs)?;

        // (b) model on everything collected so far
        let model = train_measurement(&dataset, &self.model_spec(), &c.measurement, derive_seed(seed_i, 2, 0), i + 1)?;
        let energy = EnergySource::Model(&model);

        // (c) one candidate per (anchor, λ, c)
        let mut anchors: Vec<&PolicyCheckpoint> = vec![&state.best];
        if state.best.id != state.pretrained.id {
            anchors.push(&state.pretrained);
        }
        let reward = c.reward.clone();
        let score_seed = derive_seed(seed_i, 3, 0);
        let mut candidates = Vec::new();
        let mut records = Vec::new();
        let mut n = 0u64;
        for (rank, anchor) in anchors.iter().enumerate() {
            for &lambda in &c.grid.lambdas {
                for &kl in &c.grid.kl_bounds {
                    let id = candidate_id(i, rank, lambda, kl);
                    let out = finetune(
                        &self.env,
                        anchor,
                        energy,
                        &reward.with_lambda(lambda),
                        bound_of(kl),
                        &c.finetune,
                        &c.commands,
                        derive_seed(seed_i, 4, n),
                        &id,
                    )?;
                    n += 1;
                    let tag = ConfigTag {
                        lambda,
                        kl_bound: bound_of(kl),
                        anchor_id: anchor.id.clone(),
                        anchor_rank: rank,
                    };
                    let mut policy = out.policy;
                    policy.iteration = i;
                    policy.config_tag = Some(tag.clone());
                    // (d) simulated energy score
                    records.push(CandidateRecord {
                        id: id.clone(),
                        tag,
                        sim_energy_score: self.sim_energy_score(&policy, energy, score_seed)?,
                        sim_occupancy: worst_occupancy(&self.env, &policy, &c.commands)?,
                        anchor_kl: out.anchor_kl,
                        projection: out.projection,
                    });
                    candidates.push((policy, out.stats));
                }
            }
        }

        // (e) elites
        let elite_records = select_top_k(&records, c.elites.min(records.len()), c.min_occupancy)?;
        let mut elites: Vec<PolicyCheckpoint> = elite_records
            .iter()
            .map(|r| {
                let p = &candidates.iter().find(|(p, _)| p.id == r.id).expect("elite is a candidate").0;
                p.derive(p.id.clone(), Lineage::Elite, i)
            })
            .collect();
        for (p, _) in &mut candidates {
            if elites.iter().any(|e| e.id == p.id) {
                p.lineage = Lineage::Elite;
            }
        }

        // (f) real evaluation of the elites plus the incumbent
        let idle = realworld::measure_idle(&self.real);
        let pre_cost = self.predicted_cost(&state.pretrained, energy)?;
        let mut evaluations = BTreeMap::new();
        for p in elites.iter().chain(std::iter::once(&state.best)) {
            if evaluations.contains_key(&p.id) {
                continue;
            }
            let predicted = self.predicted_reduction(p, pre_cost, energy, idle)?;
            evaluations.insert(p.id.clone(), self.evaluate(p, &state.pretrained, predicted)?);
        }
        let real_steps = collected + evaluations.len() * self.real_steps_per_eval();

        // (g) best by measured net power
        let best_id = select_best(&evaluations).ok_or_else(|| Error::TrainingFailure("no policy produced a qualifying segment".into()))?;
        let best_eval = &evaluations[&best_id];
        let best = if best_id == state.best.id {
            state.best.clone()
        } else {
            elites.iter().find(|e| e.id == best_id).expect("best is an elite").clone()
        };
        let mut best = best.derive(best.id.clone(), Lineage::Best, best.iteration);
        if best.id == state.pretrained.id {
            best.lineage = Lineage::PreTrained;
        }
        for e in &mut elites {
            if e.id == best.id {
                e.lineage = Lineage::Best;
            }
        }

        let record = IterationRecord {
            schema: RECORD_SCHEMA.to_string(),
            iteration: i,
            dataset_fingerprint: dataset.fingerprint(),
            dataset_trajectories: dataset.len(),
            dataset_steps: dataset.step_count(),
            model_version: model.version,
            model_epochs: model.epochs_run,
            model_heldout_relative_rmse: model.heldout_relative_rmse,
            anchors: anchors.iter().map(|a| a.id.clone()).collect(),
            candidates: records,
            elites: elite_records.iter().map(|r| r.id.clone()).collect(),
            incumbent: state.best.id.clone(),
            best_id: best_id.clone(),
            best_net_power: best_eval.report.net_power.expect("selected reports have net power"),
            best_net_delta_p: best_eval.net_delta_p.unwrap_or(0.0),
            best_gross_delta_p: best_eval.gross_delta_p.unwrap_or(0.0),
            evaluations,
            real_steps,
        };
        let mut records_all = state.records.clone();
        records_all.push(record.clone());
        let next = LoopState {
            dataset,
            pretrained: state.pretrained.clone(),
            best,
            elites,
            records: records_all,
            seed: state.seed,
        };
        Ok((next, IterationOutput { record, model, candidates }))
    }

    /// Chain iterations until `iterations` have run in total or the target
    /// ΔP is reached. Each finished iteration is handed to `commit` before it
    /// becomes the current state.
    pub fn run(
        &self,
        mut state: LoopState,
        iterations: usize,
        mut commit: impl FnMut(&LoopState, &IterationOutput) -> Result<()>,
    ) -> Result<LoopState> {
        if iterations == 0 {
            return Err(Error::rejected("iterations must be >= 1"));
        }
        while state.next_iteration() < iterations {
            if state.records.last().is_some_and(|r| r.best_net_delta_p >= self.config.target_delta_p) {
                break;
            }
            let (next, out) = self.run_iteration(&state)?;
            commit(&next, &out)?;
            state = next;
        }
        Ok(state)
    }
}
