//! Learned battery-current model: real-data bookkeeping, feature
//! normalization, recurrent regression training and held-out evaluation.
//!
//! Inputs are exactly the eight sim-observable signals per step (four motor
//! torques, four motor velocities); the target is the measured pack current.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffkit::{hexf64, AdamConfig, AdamState, ParamVector, RecurrentSpec};
use crate::envsim::{Torques, MOTORS};
use crate::error::{Error, Result};
use crate::persist;
use crate::policy::Lineage;

pub const FEATURES: usize = 2 * MOTORS;
pub const DATASET_SCHEMA: &str = "powertune.dataset/1";
pub const MODEL_SCHEMA: &str = "powertune.current-model/1";
const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub torques: Torques,
    pub motor_velocities: Torques,
    pub current: f64,
}

impl StepRecord {
    fn features(&self) -> [f64; FEATURES] {
        let mut f = [0.0; FEATURES];
        f[..MOTORS].copy_from_slice(&self.torques);
        f[MOTORS..].copy_from_slice(&self.motor_velocities);
        f
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealTrajectory {
    /// Unique within a dataset; assigned on append.
    pub id: usize,
    pub policy_id: String,
    pub lineage: Lineage,
    pub command: f64,
    pub iteration: usize,
    pub steps: Vec<StepRecord>,
}

impl RealTrajectory {
    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::rejected(format!("trajectory {} is empty", self.id)));
        }
        for s in &self.steps {
            let finite = s.torques.iter().chain(&s.motor_velocities).all(|v| v.is_finite()) && s.current.is_finite();
            if !finite || s.current < 0.0 {
                return Err(Error::rejected(format!("trajectory {} has an invalid record", self.id)));
            }
        }
        Ok(())
    }
}

/// Append-only collection of real trajectories across iterations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RealDataset {
    trajectories: Vec<RealTrajectory>,
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    schema: String,
    trajectories: usize,
    steps: usize,
}

#[derive(Serialize, Deserialize)]
struct StepLine {
    iteration: usize,
    trajectory: usize,
    step: usize,
    policy: String,
    lineage: Lineage,
    command: f64,
    torques: Torques,
    motor_velocities: Torques,
    current: f64,
}

impl RealDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_trajectories(trajectories: Vec<RealTrajectory>) -> Result<Self> {
        let mut d = Self::new();
        for t in trajectories {
            d.push(t)?;
        }
        Ok(d)
    }

    /// Append one trajectory, re-numbering its id to the next free slot.
    pub fn push(&mut self, mut trajectory: RealTrajectory) -> Result<usize> {
        trajectory.id = self.trajectories.len();
        trajectory.validate()?;
        self.trajectories.push(trajectory);
        Ok(self.trajectories.len() - 1)
    }

    pub fn extend(&mut self, trajectories: impl IntoIterator<Item = RealTrajectory>) -> Result<()> {
        for t in trajectories {
            self.push(t)?;
        }
        Ok(())
    }

    pub fn trajectories(&self) -> &[RealTrajectory] {
        &self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn step_count(&self) -> usize {
        self.trajectories.iter().map(|t| t.steps.len()).sum()
    }

    /// Iterations that contributed data, ascending.
    pub fn coverage(&self) -> Vec<usize> {
        let mut its: Vec<usize> = self.trajectories.iter().map(|t| t.iteration).collect();
        its.sort_unstable();
        its.dedup();
        its
    }

    /// Whether every trajectory of `other` appears, in order, as a prefix of this dataset.
    pub fn contains_prefix(&self, other: &RealDataset) -> bool {
        other.len() <= self.len() && self.trajectories[..other.len()] == other.trajectories[..]
    }

    pub fn to_jsonl(&self) -> String {
        let header = DatasetHeader {
            schema: DATASET_SCHEMA.to_string(),
            trajectories: self.len(),
            steps: self.step_count(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for t in &self.trajectories {
            for (k, s) in t.steps.iter().enumerate() {
                let line = StepLine {
                    iteration: t.iteration,
                    trajectory: t.id,
                    step: k,
                    policy: t.policy_id.clone(),
                    lineage: t.lineage,
                    command: t.command,
                    torques: s.torques,
                    motor_velocities: s.motor_velocities,
                    current: s.current,
                };
                out.push_str(&serde_json::to_string(&line).expect("line serializes"));
                out.push('\n');
            }
        }
        out
    }

    pub fn from_jsonl(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, first) = lines.next().ok_or_else(|| Error::format(origin, "empty dataset file"))?;
        let header: DatasetHeader =
            serde_json::from_str(first).map_err(|e| Error::format(origin, format!("line 1: {e}")))?;
        persist::check_schema(origin, &header.schema, DATASET_SCHEMA)?;
        let mut trajectories: Vec<RealTrajectory> = Vec::new();
        for (n, line) in lines {
            let rec: StepLine =
                serde_json::from_str(line).map_err(|e| Error::format(origin, format!("line {}: {e}", n + 1)))?;
            let step = StepRecord {
                torques: rec.torques,
                motor_velocities: rec.motor_velocities,
                current: rec.current,
            };
            match trajectories.last_mut() {
                Some(t) if t.id == rec.trajectory => {
                    if rec.step != t.steps.len() {
                        return Err(Error::format(origin, format!("line {}: step out of order", n + 1)));
                    }
                    t.steps.push(step);
                }
                _ => {
                    if rec.trajectory != trajectories.len() || rec.step != 0 {
                        return Err(Error::format(origin, format!("line {}: trajectory out of order", n + 1)));
                    }
                    trajectories.push(RealTrajectory {
                        id: rec.trajectory,
                        policy_id: rec.policy,
                        lineage: rec.lineage,
                        command: rec.command,
                        iteration: rec.iteration,
                        steps: vec![step],
                    });
                }
            }
        }
        let d = Self { trajectories };
        if d.len() != header.trajectories || d.step_count() != header.steps {
            return Err(Error::format(origin, "header counts do not match body"));
        }
        Ok(d)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        persist::write_atomic(path, self.to_jsonl().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_jsonl(&persist::read_string(path)?, path)
    }

    /// Short content hash of the canonical serialization.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_jsonl().as_bytes());
        let mut s = String::with_capacity(16);
        for b in &digest[..8] {
            let _ = write!(s, "{b:02x}");
        }
        s
    }

    fn subset(&self, idx: &[usize]) -> Vec<&RealTrajectory> {
        idx.iter().map(|&i| &self.trajectories[i]).collect()
    }
}

/// Per-feature and target standardization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    #[serde(with = "hexf64")]
    pub feature_mean: Vec<f64>,
    #[serde(with = "hexf64")]
    pub feature_std: Vec<f64>,
    pub current_mean: f64,
    pub current_std: f64,
}

impl Normalizer {
    pub fn normalize_features(&self, torques: &Torques, velocities: &Torques, out: &mut [f64]) {
        for i in 0..MOTORS {
            out[i] = (torques[i] - self.feature_mean[i]) / self.feature_std[i];
            let j = MOTORS + i;
            out[j] = (velocities[i] - self.feature_mean[j]) / self.feature_std[j];
        }
    }

    pub fn denormalize_feature(&self, index: usize, z: f64) -> f64 {
        z * self.feature_std[index] + self.feature_mean[index]
    }

    pub fn normalize_current(&self, i: f64) -> f64 {
        (i - self.current_mean) / self.current_std
    }

    pub fn denormalize_current(&self, z: f64) -> f64 {
        z * self.current_std + self.current_mean
    }
}

/// Population mean/std over every step of every trajectory, std floored at 1e-6.
pub fn fit_normalizer(dataset: &RealDataset) -> Result<Normalizer> {
    let n = dataset.step_count();
    if n == 0 {
        return Err(Error::rejected("cannot fit a normalizer on an empty dataset"));
    }
    let steps = || dataset.trajectories.iter().flat_map(|t| t.steps.iter());
    let mut mean = [0.0; FEATURES + 1];
    for s in steps() {
        for (m, v) in mean.iter_mut().zip(s.features().iter().chain([&s.current])) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = [0.0; FEATURES + 1];
    for s in steps() {
        for ((acc, m), v) in var.iter_mut().zip(&mean).zip(s.features().iter().chain([&s.current])) {
            *acc += (v - m) * (v - m);
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / n as f64).sqrt().max(STD_FLOOR)).collect();
    Ok(Normalizer {
        feature_mean: mean[..FEATURES].to_vec(),
        feature_std: std[..FEATURES].to_vec(),
        current_mean: mean[FEATURES],
        current_std: std[FEATURES],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub hidden_dim: usize,
    /// Truncation length for backpropagation through time, steps.
    pub chunk_len: usize,
    /// Trajectories processed in lockstep per update.
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
    pub lr: f64,
    pub val_fraction: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            chunk_len: 100,
            batch_size: 16,
            max_epochs: 500,
            patience: 150,
            lr: 3e-3,
            val_fraction: 0.1,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.chunk_len == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("measurement sizes must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config("measurement.lr must be > 0 and val_fraction in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Frozen current model `f_i`: network, the normalizer it was trained with,
/// its version and the fingerprint of its training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementModel {
    pub schema: String,
    pub version: usize,
    pub dataset_fingerprint: String,
    pub spec: RecurrentSpec,
    pub params: ParamVector,
    pub normalizer: Normalizer,
    pub validation_loss: f64,
    pub epochs_run: usize,
    /// Dataset trajectory ids held out from training.
    pub heldout_ids: Vec<usize>,
    pub heldout_rmse: f64,
    pub heldout_relative_rmse: f64,
}

impl MeasurementModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        persist::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = persist::read_json(path)?;
        persist::check_schema(path, &m.schema, MODEL_SCHEMA)?;
        if m.params.len() != m.spec.param_count() {
            return Err(Error::format(path, "params do not match spec"));
        }
        Ok(m)
    }

    /// Streaming predictor with one recurrent state per environment instance.
    pub fn predictor(&self, instances: usize) -> CurrentPredictor<'_> {
        CurrentPredictor {
            model: self,
            hidden: vec![vec![0.0; self.spec.hidden_dim]; instances],
            x: vec![0.0; FEATURES],
        }
    }
}

/// Causal per-instance current prediction for rollouts.
pub struct CurrentPredictor<'a> {
    model: &'a MeasurementModel,
    hidden: Vec<Vec<f64>>,
    x: Vec<f64>,
}

impl CurrentPredictor<'_> {
    /// Zero the recurrent state of one instance (start of an episode).
    pub fn reset(&mut self, instance: usize) {
        self.hidden[instance].iter_mut().for_each(|h| *h = 0.0);
    }

    pub fn predict(&mut self, instance: usize, torques: &Torques, velocities: &Torques) -> f64 {
        let m = self.model;
        m.normalizer.normalize_features(torques, velocities, &mut self.x);
        let mut y = [0.0];
        m.spec.step(m.params.values(), &mut self.hidden[instance], &self.x, &mut y);
        m.normalizer.denormalize_current(y[0])
    }
}

/// Predicted current for each step of one sequence, from a zero state.
pub fn predict_currents(model: &MeasurementModel, torque_seq: &[Torques], velocity_seq: &[Torques]) -> Result<Vec<f64>> {
    if torque_seq.len() != velocity_seq.len() {
        return Err(Error::rejected(format!(
            "{} torque steps but {} velocity steps",
            torque_seq.len(),
            velocity_seq.len()
        )));
    }
    let mut p = model.predictor(1);
    Ok(torque_seq.iter().zip(velocity_seq).map(|(t, v)| p.predict(0, t, v)).collect())
}

/// Step-weighted RMSE over all held-out steps and RMSE relative to the mean
/// measured current.
pub fn eval_rmse(model: &MeasurementModel, heldout: &RealDataset) -> Result<(f64, f64)> {
    eval_rmse_on(model, heldout.trajectories.iter())
}

fn eval_rmse_on<'a>(model: &MeasurementModel, trajs: impl Iterator<Item = &'a RealTrajectory>) -> Result<(f64, f64)> {
    let (mut sse, mut sum, mut n) = (0.0, 0.0, 0usize);
    for t in trajs {
        let torques: Vec<Torques> = t.steps.iter().map(|s| s.torques).collect();
        let vels: Vec<Torques> = t.steps.iter().map(|s| s.motor_velocities).collect();
        let pred = predict_currents(model, &torques, &vels)?;
        for (p, s) in pred.iter().zip(&t.steps) {
            sse += (p - s.current) * (p - s.current);
            sum += s.current;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::rejected("held-out set is empty"));
    }
    let rmse = (sse / n as f64).sqrt();
    let mean = sum / n as f64;
    Ok((rmse, if mean > 0.0 { rmse / mean } else { f64::INFINITY }))
}

/// Deterministic by-trajectory split: returns (train, validation) indices.
pub fn split_by_trajectory(count: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((count as f64 * val_fraction).round() as usize).clamp(1, count.saturating_sub(1).max(1));
    let val = idx.split_off(count - n_val);
    (idx, val)
}

/// Sequences packed `[step][sequence][feature]` with a validity mask, ready
/// for lockstep recurrent passes.
struct Packed {
    inputs: Vec<f64>,
    targets: Vec<f64>,
    mask: Vec<bool>,
    batch: usize,
    steps: usize,
}

fn pack(trajs: &[&RealTrajectory], norm: &Normalizer, from: usize, len: usize) -> Packed {
    let batch = trajs.len();
    let mut p = Packed {
        inputs: vec![0.0; len * batch * FEATURES],
        targets: vec![0.0; len * batch],
        mask: vec![false; len * batch],
        batch,
        steps: len,
    };
    for (b, t) in trajs.iter().enumerate() {
        for k in 0..len {
            if let Some(s) = t.steps.get(from + k) {
                let i = k * batch + b;
                norm.normalize_features(&s.torques, &s.motor_velocities, &mut p.inputs[i * FEATURES..(i + 1) * FEATURES]);
                p.targets[i] = norm.normalize_current(s.current);
                p.mask[i] = true;
            }
        }
    }
    p
}

fn masked_mse(outputs: &[f64], packed: &Packed) -> (f64, usize) {
    let mut sse = 0.0;
    let mut n = 0;
    for ((y, t), m) in outputs.iter().zip(&packed.targets).zip(&packed.mask) {
        if *m {
            sse += (y - t) * (y - t);
            n += 1;
        }
    }
    (sse, n)
}

/// Mean squared error in normalized units over full sequences from a zero state.
fn full_sequence_mse(spec: &RecurrentSpec, params: &[f64], trajs: &[&RealTrajectory], norm: &Normalizer) -> f64 {
    let len = trajs.iter().map(|t| t.steps.len()).max().unwrap_or(0);
    let packed = pack(trajs, norm, 0, len);
    let h0 = vec![0.0; trajs.len() * spec.hidden_dim];
    let trace = spec.forward_batch(params, &packed.inputs, packed.batch, packed.steps, &h0);
    let (sse, n) = masked_mse(trace.outputs(), &packed);
    sse / n.max(1) as f64
}

/// Chunked masked-MSE loss and gradient for a batch of sequences, carrying
/// the hidden state across chunks (truncated backpropagation through time).
/// Calls `update` after each chunk with the chunk gradient.
fn tbptt_pass(
    spec: &RecurrentSpec,
    params: &mut Vec<f64>,
    trajs: &[&RealTrajectory],
    norm: &Normalizer,
    chunk_len: usize,
    mut update: impl FnMut(&mut Vec<f64>, &[f64]) -> Result<()>,
) -> Result<f64> {
    let len = trajs.iter().map(|t| t.steps.len()).max().unwrap_or(0);
    let mut h = vec![0.0; trajs.len() * spec.hidden_dim];
    let mut grad = vec![0.0; params.len()];
    let mut total = 0.0;
    let mut from = 0;
    while from < len {
        let steps = chunk_len.min(len - from);
        let packed = pack(trajs, norm, from, steps);
        let trace = spec.forward_batch(params, &packed.inputs, packed.batch, packed.steps, &h);
        let (sse, n) = masked_mse(trace.outputs(), &packed);
        if n > 0 {
            let scale = 2.0 / n as f64;
            let d_out: Vec<f64> = trace
                .outputs()
                .iter()
                .zip(&packed.targets)
                .zip(&packed.mask)
                .map(|((y, t), m)| if *m { scale * (y - t) } else { 0.0 })
                .collect();
            grad.iter_mut().for_each(|g| *g = 0.0);
            spec.backward_batch(params, &trace, &d_out, &mut grad);
            update(params, &grad)?;
            total += sse;
        }
        h.copy_from_slice(trace.final_hidden());
        from += steps;
    }
    Ok(total)
}

/// Fit a recurrent current model on the whole dataset.
///
/// Trajectories are split 90/10 (by trajectory); training runs chunked
/// truncated BPTT with Adam and keeps the parameters with the best
/// validation loss, stopping after `patience` epochs without improvement.
pub fn train_measurement(
    dataset: &RealDataset,
    spec: &RecurrentSpec,
    config: &TrainingConfig,
    seed: u64,
    version: usize,
) -> Result<MeasurementModel> {
    spec.validate()?;
    config.validate()?;
    if spec.input_dim != FEATURES || spec.output_dim != 1 {
        return Err(Error::rejected(format!("current model must map {FEATURES} features to 1 output")));
    }
    if dataset.len() < 2 {
        return Err(Error::rejected("need at least two trajectories to hold one out"));
    }
    let normalizer = fit_normalizer(dataset)?;
    let (train_idx, val_idx) = split_by_trajectory(dataset.len(), config.val_fraction, seed);
    let val = dataset.subset(&val_idx);

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_cafe);
    let mut params = spec.init(seed).into_values();
    let mut adam = AdamState::new(params.len(), AdamConfig::with_lr(config.lr));
    let mut best = (full_sequence_mse(spec, &params, &val, &normalizer), params.clone());
    let mut since_best = 0;
    let mut epochs_run = 0;
    let mut order = train_idx.clone();
    for _ in 0..config.max_epochs {
        epochs_run += 1;
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let trajs = dataset.subset(batch);
            tbptt_pass(spec, &mut params, &trajs, &normalizer, config.chunk_len, |p, g| adam.step(p, g))?;
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("current model diverged".into()));
        }
        let val_loss = full_sequence_mse(spec, &params, &val, &normalizer);
        if val_loss < best.0 {
            best = (val_loss, params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    let mut model = MeasurementModel {
        schema: MODEL_SCHEMA.to_string(),
        version,
        dataset_fingerprint: dataset.fingerprint(),
        spec: spec.clone(),
        params: ParamVector::from_parts(best.1, spec.layout())?,
        normalizer,
        validation_loss: best.0,
        epochs_run,
        heldout_ids: val_idx.clone(),
        heldout_rmse: 0.0,
        heldout_relative_rmse: 0.0,
    };
    let (rmse, rel) = eval_rmse_on(&model, val.into_iter())?;
    model.heldout_rmse = rmse;
    model.heldout_relative_rmse = rel;
    Ok(model)
}

/// Normalized-MSE objective over a fixed set of sequences (gradient by BPTT
/// without truncation), exposed for gradient verification.
pub struct SequenceMse<'a> {
    pub spec: &'a RecurrentSpec,
    pub trajectories: Vec<&'a RealTrajectory>,
    pub normalizer: &'a Normalizer,
}

impl crate::diffkit::Objective for SequenceMse<'_> {
    fn value(&self, params: &[f64]) -> f64 {
        full_sequence_mse(self.spec, params, &self.trajectories, self.normalizer)
    }

    fn gradient(&self, params: &[f64]) -> Vec<f64> {
        let len = self.trajectories.iter().map(|t| t.steps.len()).max().unwrap_or(0);
        let mut p = params.to_vec();
        let mut out = vec![0.0; params.len()];
        tbptt_pass(self.spec, &mut p, &self.trajectories, self.normalizer, len.max(1), |_, g| {
            out.copy_from_slice(g);
            Ok(())
        })
        .expect("gradient pass");
        out
    }
}
