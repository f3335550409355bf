//! Deterministic toy locomotion simulator: a cart driven by four redundant
//! motors with distinct gearing, tracking a commanded forward velocity.
//!
//! One step is one 50 Hz sample. The state exposed here (motor torques and
//! motor angular velocities) is everything the learned current model sees.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of actuated motors.
pub const MOTORS: usize = 4;

/// Length of the encoded observation vector.
pub const OBS_DIM: usize = 3 + 2 * MOTORS;

/// Commands used for training and evaluation, in m/s.
pub const EVAL_COMMANDS: [f64; 3] = [0.5, 0.8, 1.1];

pub type Torques = [f64; MOTORS];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvParams {
    /// kg
    pub mass: f64,
    /// rad per metre; motor i spins at `gear_ratios[i] * v`.
    pub gear_ratios: [f64; MOTORS],
    /// N·s/m
    pub viscous_friction: f64,
    /// N
    pub coulomb_friction: f64,
    /// N·m, symmetric per-motor clamp.
    pub torque_limit: f64,
    /// s
    pub dt: f64,
    /// steps per episode
    pub episode_len: usize,
    /// largest |command| accepted by `reset`, m/s
    pub command_ceiling: f64,
    /// width of the Gaussian tracking kernel, m/s
    pub tracking_sigma: f64,
}

impl Default for EnvParams {
    fn default() -> Self {
        Self {
            mass: 4.0,
            gear_ratios: [4.0, 5.0, 6.0, 7.0],
            viscous_friction: 8.0,
            coulomb_friction: 3.0,
            torque_limit: 3.0,
            dt: 0.02,
            episode_len: 500,
            command_ceiling: 2.0,
            tracking_sigma: 0.25,
        }
    }
}

impl EnvParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("env.{m}")));
        if !(self.mass > 0.0) {
            return bad("mass must be > 0");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be > 0");
        }
        if !(self.torque_limit > 0.0) {
            return bad("torque_limit must be > 0");
        }
        if self.episode_len == 0 {
            return bad("episode_len must be >= 1");
        }
        if !(self.viscous_friction >= 0.0) || !(self.coulomb_friction >= 0.0) {
            return bad("friction coefficients must be >= 0");
        }
        if !(self.command_ceiling > 0.0) || !(self.tracking_sigma > 0.0) {
            return bad("command_ceiling and tracking_sigma must be > 0");
        }
        for (i, g) in self.gear_ratios.iter().enumerate() {
            if *g == 0.0 || !g.is_finite() {
                return bad("gear_ratios must be finite and nonzero");
            }
            if self.gear_ratios[..i].contains(g) {
                return bad("gear_ratios must be pairwise distinct");
            }
        }
        Ok(())
    }

    pub fn motor_velocities(&self, cart_velocity: f64) -> Torques {
        self.gear_ratios.map(|g| g * cart_velocity)
    }

    pub fn clamp_action(&self, action: &Torques) -> Torques {
        action.map(|a| a.clamp(-self.torque_limit, self.torque_limit))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub cart_velocity: f64,
    pub command: f64,
    pub motor_velocities: Torques,
    pub last_action: Torques,
    pub step_index: usize,
    /// Distance travelled since reset, m.
    pub distance: f64,
}

/// Per-step task reward components.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SimRewardTerms {
    pub tracking: f64,
    pub action_smoothness: f64,
    pub torque_magnitude: f64,
}

pub type Observation = [f64; OBS_DIM];

/// Start an episode at rest. The seed is accepted for interface symmetry with
/// stochastic environments; this one has no random initial conditions.
pub fn reset(params: &EnvParams, command: f64, _seed: u64) -> Result<EnvState> {
    if !command.is_finite() || command.abs() > params.command_ceiling {
        return Err(Error::rejected(format!(
            "command {command} outside ±{}",
            params.command_ceiling
        )));
    }
    Ok(EnvState {
        cart_velocity: 0.0,
        command,
        motor_velocities: [0.0; MOTORS],
        last_action: [0.0; MOTORS],
        step_index: 0,
        distance: 0.0,
    })
}

/// Advance one step. Returns the next state and the task reward terms of the
/// transition (tracking is scored on the post-step velocity, smoothness against
/// the previous applied action).
pub fn step(params: &EnvParams, state: &EnvState, action: &Torques) -> Result<(EnvState, SimRewardTerms)> {
    if state.step_index >= params.episode_len {
        return Err(Error::EndOfEpisode(state.step_index));
    }
    if action.iter().any(|a| !a.is_finite()) {
        return Err(Error::rejected("non-finite action"));
    }
    let applied = params.clamp_action(action);
    let force: f64 = params
        .gear_ratios
        .iter()
        .zip(&applied)
        .map(|(g, t)| g * t)
        .sum();
    let v = state.cart_velocity;
    let v_next = integrate_velocity(params, v, force);

    let next = EnvState {
        cart_velocity: v_next,
        command: state.command,
        motor_velocities: params.motor_velocities(v_next),
        last_action: applied,
        step_index: state.step_index + 1,
        distance: state.distance + v_next * params.dt,
    };
    let terms = reward_terms(v_next, state.command, &applied, &state.last_action, params.tracking_sigma);
    Ok((next, terms))
}

fn integrate_velocity(params: &EnvParams, v: f64, force: f64) -> f64 {
    // static clamp: at rest nothing moves until the drive force beats Coulomb friction
    if v == 0.0 && force.abs() <= params.coulomb_friction {
        return 0.0;
    }
    let dir = if v != 0.0 { v.signum() } else { force.signum() };
    let accel = (force - params.viscous_friction * v - params.coulomb_friction * dir) / params.mass;
    let v_next = v + accel * params.dt;
    // friction cannot reverse the motion within one step
    if v != 0.0 && v_next.signum() != v.signum() && force.abs() <= params.coulomb_friction {
        0.0
    } else {
        v_next
    }
}

/// Task reward terms for a state and the action applied in it.
pub fn task_reward(state: &EnvState, action: &Torques, tracking_sigma: f64) -> SimRewardTerms {
    reward_terms(state.cart_velocity, state.command, action, &state.last_action, tracking_sigma)
}

fn reward_terms(v: f64, command: f64, action: &Torques, last: &Torques, sigma: f64) -> SimRewardTerms {
    let err = v - command;
    SimRewardTerms {
        tracking: (-(err * err) / (sigma * sigma)).exp(),
        action_smoothness: -action.iter().zip(last).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
        torque_magnitude: -action.iter().map(|a| a * a).sum::<f64>(),
    }
}

pub fn observe(state: &EnvState) -> Observation {
    let mut obs = [0.0; OBS_DIM];
    obs[0] = state.cart_velocity;
    obs[1] = state.command;
    obs[2] = state.command - state.cart_velocity;
    obs[3..3 + MOTORS].copy_from_slice(&state.last_action);
    obs[3 + MOTORS..].copy_from_slice(&state.motor_velocities);
    obs
}

/// Whether `v` lies within ±10 % of `command` (absolute ±0.05 m/s at zero command).
pub fn in_band(v: f64, command: f64) -> bool {
    // 1e-12 slack so that exact edge values such as 0.72 at 0.8 count as in band
    let half_width = if command == 0.0 { 0.05 } else { 0.1 * command.abs() };
    (v - command).abs() <= half_width + 1e-12
}
