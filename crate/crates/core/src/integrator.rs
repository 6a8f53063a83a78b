//! Fixed-step state propagation and policy rollouts.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Accel, JointState};

/// Control rate of every policy and of the stored trajectories.
pub const CONTROL_DT: f64 = 1.0 / 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegratorConfig {
    /// Step in seconds.
    pub dt: f64,
    pub max_steps: usize,
    /// Per-joint velocity clamp, rad/s.
    pub velocity_clamp: f64,
    /// Per-joint acceleration clamp, rad/s².
    pub accel_clamp: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            dt: CONTROL_DT,
            max_steps: 300,
            velocity_clamp: 4.0,
            accel_clamp: 40.0,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.velocity_clamp > 0.0) || !(self.accel_clamp > 0.0) {
            return Err(Error::invalid("integrator: dt and clamps must be positive"));
        }
        Ok(())
    }

    /// Config without effective clamps, for exactness checks.
    pub fn unclamped(dt: f64, max_steps: usize) -> Self {
        Self {
            dt,
            max_steps,
            velocity_clamp: f64::INFINITY,
            accel_clamp: f64::INFINITY,
        }
    }
}

/// One step of
/// `q' = q + dt·q̇ + ½dt²·a`, `q̇' = q̇ + dt·a`,
/// with `a` clamped before use and `q̇'` clamped after.
pub fn rk2_step(state: &JointState, accel: &Accel, cfg: &IntegratorConfig) -> Result<JointState> {
    if !accel.is_finite() {
        return Err(Error::RolloutAbort {
            step: 0,
            reason: "non-finite acceleration".into(),
        });
    }
    if accel.0.len() != state.dim() {
        return Err(Error::invalid("acceleration dimension does not match state"));
    }
    let dt = cfg.dt;
    let a = accel.0.map(|v| v.clamp(-cfg.accel_clamp, cfg.accel_clamp));
    let q = &state.q + &state.qdot * dt + &a * (0.5 * dt * dt);
    let qdot = (&state.qdot + &a * dt).map(|v| v.clamp(-cfg.velocity_clamp, cfg.velocity_clamp));
    Ok(JointState { q, qdot })
}

/// Time-indexed joint states sampled every `dt` seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub states: Vec<JointState>,
}

impl Trajectory {
    pub fn new(dt: f64, states: Vec<JointState>) -> Self {
        Self { dt, states }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, JointState::dim)
    }

    pub fn first(&self) -> Option<&JointState> {
        self.states.first()
    }

    pub fn last(&self) -> Option<&JointState> {
        self.states.last()
    }

    /// Frame order reversed and velocities negated, so a path planned away
    /// from a configuration becomes a demonstration moving into it.
    pub fn reversed(&self) -> Trajectory {
        let states = self
            .states
            .iter()
            .rev()
            .map(|s| JointState {
                q: s.q.clone(),
                qdot: -&s.qdot,
            })
            .collect();
        Trajectory { dt: self.dt, states }
    }

    /// CSV with header `t,q0..q{D-1},qd0..qd{D-1}`, shortest round-trip decimals.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.dim();
        let mut header = vec!["t".to_string()];
        header.extend((0..d).map(|i| format!("q{i}")));
        header.extend((0..d).map(|i| format!("qd{i}")));
        writeln!(w, "{}", header.join(","))?;
        for (i, s) in self.states.iter().enumerate() {
            let mut row = vec![format!("{:?}", i as f64 * self.dt)];
            row.extend(s.q.iter().map(|v| format!("{v:?}")));
            row.extend(s.qdot.iter().map(|v| format!("{v:?}")));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Rolls `accel_fn` forward from `initial` for at most `cfg.max_steps`
/// frames (the initial state counts as the first), stopping early when
/// `stop` fires on the current state.
pub fn rollout<F, S>(mut accel_fn: F, initial: JointState, cfg: &IntegratorConfig, mut stop: S) -> Result<Trajectory>
where
    F: FnMut(&JointState) -> Result<Accel>,
    S: FnMut(&JointState, usize) -> bool,
{
    cfg.validate()?;
    let mut states = Vec::with_capacity(cfg.max_steps.min(4096));
    let mut state = initial;
    let mut step = 0;
    while states.len() + 1 < cfg.max_steps.max(1) {
        if stop(&state, step) {
            break;
        }
        let a = accel_fn(&state).map_err(|e| match e {
            Error::RolloutAbort { reason, .. } => Error::RolloutAbort { step, reason },
            other => other,
        })?;
        let next = rk2_step(&state, &a, cfg).map_err(|e| match e {
            Error::RolloutAbort { reason, .. } => Error::RolloutAbort { step, reason },
            other => other,
        })?;
        states.push(std::mem::replace(&mut state, next));
        step += 1;
    }
    states.push(state);
    Ok(Trajectory::new(cfg.dt, states))
}
