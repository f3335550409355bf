#![allow(dead_code)]

pub mod probes;

use powertune::config::RunConfig;
use powertune::diffkit::{MlpSpec, ParamVector};
use powertune::envsim::{EnvParams, MOTORS, OBS_DIM};
use powertune::pipeline::{BaselineConfig, LoopConfig, Pipeline, SweepGrid};
use powertune::policy::{Lineage, PolicyCheckpoint};
use powertune::realworld::RealParams;
use powertune::rl::PpoConfig;

pub fn tiny_env() -> EnvParams {
    EnvParams {
        episode_len: 50,
        ..EnvParams::default()
    }
}

pub fn tiny_ppo() -> PpoConfig {
    PpoConfig {
        envs: 2,
        rollout_len: 50,
        minibatch: 50,
        epochs: 2,
        total_steps: 200,
        value_hidden: vec![8],
        ..PpoConfig::default()
    }
}

pub fn tiny_loop() -> LoopConfig {
    let mut c = LoopConfig {
        grid: SweepGrid {
            lambdas: vec![0.5, 5.0],
            kl_bounds: vec![0.5],
        },
        elites: 2,
        iterations: 3,
        episodes_per_command: 1,
        commands: vec![0.5, 1.1],
        block_seconds: 2.0,
        total_seconds: 4.0,
        score_episodes: 2,
        min_occupancy: 0.0,
        target_delta_p: f64::INFINITY,
        finetune: tiny_ppo(),
        ..LoopConfig::default()
    };
    c.measurement.hidden_dim = 6;
    c.measurement.max_epochs = 3;
    c.measurement.chunk_len = 25;
    c.measurement.val_fraction = 0.3;
    c
}

pub fn tiny_pipeline() -> Pipeline {
    let env = tiny_env();
    let real = RealParams::perturbed_from(&env);
    Pipeline::new(env, real, tiny_loop()).unwrap()
}

/// Proportional velocity controller with a friction feedforward, written
/// directly into a 2-unit tanh network kept in its linear range. Tracks every
/// command within the band, so untrained fixtures still yield segments.
pub fn tiny_pretrained() -> PolicyCheckpoint {
    let spec = MlpSpec::new(OBS_DIM, &[2], MOTORS);
    let (s, kp) = (0.01, 60.0);
    let env = EnvParams::default();
    let g = env.gear_ratios;
    let g2: f64 = g.iter().map(|x| x * x).sum();
    let mut w0 = vec![0.0; 2 * OBS_DIM];
    w0[2] = s; // unit 0: command error
    w0[OBS_DIM + 1] = s; // unit 1: command
    let mut w1 = vec![0.0; MOTORS * 2];
    let mut b1 = vec![0.0; MOTORS];
    for k in 0..MOTORS {
        w1[2 * k] = g[k] / g2 * kp / s;
        w1[2 * k + 1] = g[k] / g2 * env.viscous_friction / s;
        b1[k] = g[k] / g2 * env.coulomb_friction;
    }
    let mut values = w0;
    values.extend([0.0, 0.0]);
    values.extend(w1);
    values.extend(b1);
    let params = ParamVector::from_parts(values, spec.layout()).unwrap();
    PolicyCheckpoint::new("pretrained", spec, params, vec![-1.0; MOTORS], Lineage::PreTrained).unwrap()
}

pub fn tiny_config() -> RunConfig {
    let mut c = RunConfig {
        seed: 11,
        env: tiny_env(),
        pipeline: tiny_loop(),
        baseline: BaselineConfig {
            lambdas: vec![1e-3, 5e-3],
            kl_bounds: vec![0.5, f64::INFINITY],
            evaluated: 3,
            ..BaselineConfig::default()
        },
        ..RunConfig::default()
    };
    c.pretrain.ppo = tiny_ppo();
    c.pretrain.hidden = vec![8];
    c.pretrain.eval_every = 1;
    c.pretrain.min_occupancy = 0.0;
    c
}
