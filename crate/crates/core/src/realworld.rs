//! The "real robot": the simulator's cart with perturbed dynamics plus a hidden
//! electrical model that produces battery current.
//!
//! Oracle constants are private to this module. Callers can step the twin,
//! read the measured current, and measure idle draw, but they cannot inspect
//! the resistances, torque constants or loss coefficients behind them.

use serde::{Deserialize, Serialize};

use crate::envsim::{self, EnvParams, EnvState, SimRewardTerms, Torques, MOTORS, OBS_DIM};
use crate::error::{Error, Result};
use crate::policy::PolicyCheckpoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RealParams {
    env: EnvParams,
    motor_kt: [f64; MOTORS],
    motor_resistance: [f64; MOTORS],
    switching_coeff: [f64; MOTORS],
    thermal_tau: f64,
    thermal_gain: f64,
    bus_voltage: f64,
    idle_current: f64,
    battery_capacity: f64,
    regen_efficiency: f64,
}

impl Default for RealParams {
    fn default() -> Self {
        Self::perturbed_from(&EnvParams::default())
    }
}

impl RealParams {
    /// Default real twin of a simulator: mass ×1.15, viscous ×1.3, Coulomb ×0.8.
    pub fn perturbed_from(sim: &EnvParams) -> Self {
        let env = EnvParams {
            mass: sim.mass * 1.15,
            viscous_friction: sim.viscous_friction * 1.3,
            coulomb_friction: sim.coulomb_friction * 0.8,
            ..sim.clone()
        };
        Self {
            env,
            motor_kt: [0.5, 0.45, 0.4, 0.35],
            motor_resistance: [0.25, 1.215, 2.4, 3.675],
            switching_coeff: [0.01; MOTORS],
            thermal_tau: 2.0,
            thermal_gain: 0.1,
            bus_voltage: 24.0,
            idle_current: 0.5,
            battery_capacity: 0.5,
            regen_efficiency: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate().map_err(|e| Error::Config(format!("real.{e}")))?;
        let bad = |m: &str| Err(Error::Config(format!("real.{m}")));
        let positive = |v: &[f64; MOTORS]| v.iter().all(|x| *x > 0.0 && x.is_finite());
        if !positive(&self.motor_kt) || !positive(&self.motor_resistance) || !positive(&self.switching_coeff) {
            return bad("motor constants must be strictly positive");
        }
        if !(self.idle_current > 0.0) || !(self.bus_voltage > 0.0) {
            return bad("idle_current and bus_voltage must be > 0");
        }
        if !(0.0..1.0).contains(&self.regen_efficiency) {
            return bad("regen_efficiency must lie in [0, 1)");
        }
        if !(self.thermal_tau > 0.0) || !(self.thermal_gain >= 0.0) || !(self.battery_capacity > 0.0) {
            return bad("thermal_tau and battery_capacity must be > 0, thermal_gain >= 0");
        }
        Ok(())
    }

    /// Battery bus voltage; measurable on the robot and constant within a run.
    pub fn bus_voltage(&self) -> f64 {
        self.bus_voltage
    }

    pub fn dt(&self) -> f64 {
        self.env.dt
    }

    pub fn episode_len(&self) -> usize {
        self.env.episode_len
    }

    pub fn command_ceiling(&self) -> f64 {
        self.env.command_ceiling
    }

    /// Same robot with a different episode horizon, for long continuous runs.
    pub fn with_episode_len(&self, steps: usize) -> Self {
        let mut p = self.clone();
        p.env.episode_len = steps.max(1);
        p
    }

    /// Test-only constructor for the closed-form oracle examples.
    #[cfg(test)]
    pub(crate) fn uniform_motors(kt: f64, resistance: f64, switching: f64, bus_voltage: f64, idle: f64) -> Self {
        Self {
            motor_kt: [kt; MOTORS],
            motor_resistance: [resistance; MOTORS],
            switching_coeff: [switching; MOTORS],
            bus_voltage,
            idle_current: idle,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealState {
    pub env_state: EnvState,
    /// Low-pass filtered winding-resistance increment per motor, Ω.
    pub thermal: [f64; MOTORS],
    pub soc: f64,
}

/// One 50 Hz sample of the battery current and the sim-observable signals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurrentSample {
    pub current: f64,
    pub torques: Torques,
    pub motor_velocities: Torques,
    pub step_index: usize,
}

pub fn real_reset(params: &RealParams, command: f64, seed: u64, soc: f64) -> Result<RealState> {
    if !(0.0..=1.0).contains(&soc) {
        return Err(Error::rejected(format!("soc {soc} outside [0, 1]")));
    }
    Ok(RealState {
        env_state: envsim::reset(&params.env, command, seed)?,
        thermal: [0.0; MOTORS],
        soc,
    })
}

/// Step the real twin. The current is evaluated on the applied (clamped)
/// torques, the post-step motor velocities and the pre-step thermal state.
pub fn real_step(
    params: &RealParams,
    state: &RealState,
    action: &Torques,
) -> Result<(RealState, CurrentSample, SimRewardTerms)> {
    let (env_state, terms) = envsim::step(&params.env, &state.env_state, action)?;
    let torques = env_state.last_action;
    let current = oracle_current(params, &torques, &env_state.motor_velocities, &state.thermal);

    let alpha = params.env.dt / params.thermal_tau;
    let mut thermal = state.thermal;
    for (th, t) in thermal.iter_mut().zip(&torques) {
        *th += alpha * (params.thermal_gain * t * t - *th);
        *th = th.max(0.0);
    }
    let soc = (state.soc - current * params.env.dt / (3600.0 * params.battery_capacity)).max(0.0);

    let sample = CurrentSample {
        current,
        torques,
        motor_velocities: env_state.motor_velocities,
        step_index: env_state.step_index,
    };
    Ok((RealState { env_state, thermal, soc }, sample, terms))
}

/// Hidden battery-current model, in amperes.
///
/// Idle draw, plus mechanical power (partially regenerated when negative) and
/// Joule losses with thermally drifting resistance divided by the bus voltage,
/// plus a square-root drive/switching overhead per motor. Clamped at zero.
pub fn oracle_current(params: &RealParams, torques: &Torques, motor_velocities: &Torques, thermal: &[f64; MOTORS]) -> f64 {
    let mut power = 0.0;
    let mut switching = 0.0;
    for i in 0..MOTORS {
        let tau = torques[i];
        let mech = tau * motor_velocities[i];
        power += if mech >= 0.0 {
            mech
        } else {
            -params.regen_efficiency * mech.abs()
        };
        let kt = params.motor_kt[i];
        power += (params.motor_resistance[i] + thermal[i]) / (kt * kt) * tau * tau;
        switching += params.switching_coeff[i] * tau.abs().sqrt();
    }
    (params.idle_current + power / params.bus_voltage + switching).max(0.0)
}

/// Battery draw with every motor idle and cold.
pub fn measure_idle(params: &RealParams) -> f64 {
    oracle_current(params, &[0.0; MOTORS], &[0.0; MOTORS], &[0.0; MOTORS])
}

/// Roll the policy's mean action through a command schedule in one continuous
/// run and sample the battery state of charge once per metre travelled.
///
/// The first point is always `(0, initial_soc)`.
pub fn soc_curve(
    params: &RealParams,
    policy: &PolicyCheckpoint,
    command_schedule: &[(f64, f64)],
    initial_soc: f64,
) -> Result<Vec<(f64, f64)>> {
    if !(initial_soc > 0.0 && initial_soc <= 1.0) {
        return Err(Error::rejected(format!("initial soc {initial_soc} outside (0, 1]")));
    }
    if policy.obs_dim() != OBS_DIM {
        return Err(Error::rejected(format!(
            "policy expects {} inputs, environment emits {OBS_DIM}",
            policy.obs_dim()
        )));
    }
    let dt = params.env.dt;
    let steps: Vec<usize> = command_schedule
        .iter()
        .map(|(_, secs)| (secs / dt).round().max(0.0) as usize)
        .collect();
    let total: usize = steps.iter().sum();
    let mut curve = vec![(0.0, initial_soc)];
    if total == 0 {
        return Ok(curve);
    }
    let run = params.with_episode_len(total);
    let first_command = command_schedule[0].0;
    let mut state = real_reset(&run, first_command, 0, initial_soc)?;
    let mut next_mark = 1.0;
    for ((command, _), n) in command_schedule.iter().zip(steps) {
        state.env_state.command = *command;
        for _ in 0..n {
            let action = policy.mean_action(&envsim::observe(&state.env_state))?;
            let (next, _, _) = real_step(&run, &state, &action)?;
            state = next;
            while state.env_state.distance >= next_mark {
                curve.push((next_mark, state.soc));
                next_mark += 1.0;
            }
        }
    }
    Ok(curve)
}
