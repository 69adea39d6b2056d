//! Vehicle and actuators with dual command authority.
//!
//! Traction and steering accept either a CAN setpoint or a direct-wired
//! manual command; manual always wins in the tick it is engaged. The brake
//! pedal is manual-only and the arm valves are CAN-only. When the gate is
//! closed and no manual channel is engaged, traction coasts toward zero and
//! steering holds its angle.
//!
//! Motion is a kinematic bicycle: first-order speed lag, rate-limited
//! steering, and pose advanced with the updated speed and angle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canbus::{CanFrame, IdMap, Origin};
use crate::codec::{decode_fixed, decode_indexed, encode_fixed, encode_indexed};
use crate::Millis;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PlantError {
    #[error("{0:?} has no manual path")]
    NoManualPath(ActuatorKind),
    #[error("{0:?} has no CAN path")]
    NoCanPath(ActuatorKind),
    #[error("arm joint {0} does not exist")]
    UnknownJoint(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantConfig {
    pub wheelbase: f64,
    pub steer_limit: f64,
    pub v_max: f64,
    pub speed_tau_ms: f64,
    /// rad/s
    pub steer_rate_max: f64,
    /// m/s² at full brake pedal.
    pub brake_decel: f64,
    /// Wheel torque (N·m) mapped to full steering lock.
    pub torque_max: f64,
    pub arm_joints: u8,
    pub arm_joint_limit: f64,
    pub feedback_period: Millis,
    /// Amplitude of uniform noise added to feedback values; 0 disables it.
    pub feedback_noise: f64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            wheelbase: 2.5,
            steer_limit: 0.6,
            v_max: 3.0,
            speed_tau_ms: 500.0,
            steer_rate_max: 1.0,
            brake_decel: 3.0,
            torque_max: 5.0,
            arm_joints: 2,
            arm_joint_limit: 1.5,
            feedback_period: 10,
            feedback_noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActuatorKind {
    Traction,
    Steering,
    Brake,
    ArmJoint(u8),
}

impl ActuatorKind {
    pub fn has_manual_path(self) -> bool {
        !matches!(self, ActuatorKind::ArmJoint(_))
    }

    pub fn has_can_path(self) -> bool {
        !matches!(self, ActuatorKind::Brake)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Authority {
    Manual,
    Can,
    None,
}

/// One actuator as the low-level controller sees it. Values are in
/// actuator units: m/s for traction, rad for steering, fraction for brake,
/// rad/s for arm valves.
#[derive(Debug, Clone, PartialEq)]
pub struct ActuatorChannel {
    kind: ActuatorKind,
    can_setpoint: f64,
    can_fresh: bool,
    manual_value: Option<f64>,
    authority: Authority,
}

impl ActuatorChannel {
    pub fn new(kind: ActuatorKind) -> Self {
        Self {
            kind,
            can_setpoint: 0.0,
            can_fresh: false,
            manual_value: None,
            authority: Authority::None,
        }
    }

    /// Builds a channel with a manual command already wired in.
    pub fn with_manual(kind: ActuatorKind, value: f64) -> Result<Self, PlantError> {
        let mut ch = Self::new(kind);
        ch.set_manual(Some(value))?;
        Ok(ch)
    }

    pub fn kind(&self) -> ActuatorKind {
        self.kind
    }

    pub fn can_setpoint(&self) -> f64 {
        self.can_setpoint
    }

    pub fn manual_value(&self) -> Option<f64> {
        self.manual_value
    }

    pub fn authority(&self) -> Authority {
        self.authority
    }

    /// `Some` while the manual channel is engaged, `None` otherwise.
    pub fn set_manual(&mut self, value: Option<f64>) -> Result<(), PlantError> {
        if value.is_some() && !self.kind.has_manual_path() {
            return Err(PlantError::NoManualPath(self.kind));
        }
        self.manual_value = value;
        Ok(())
    }

    pub fn set_can(&mut self, value: f64) -> Result<(), PlantError> {
        if !self.kind.has_can_path() {
            return Err(PlantError::NoCanPath(self.kind));
        }
        self.can_setpoint = value;
        self.can_fresh = true;
        Ok(())
    }

    /// Resolves this tick's command. `can_live` is false while the gate is
    /// closed; arm valves only move on a setpoint delivered this tick.
    fn resolve(&mut self, can_live: bool) -> Option<f64> {
        let fresh = std::mem::take(&mut self.can_fresh);
        if let Some(v) = self.manual_value {
            self.authority = Authority::Manual;
            return Some(v);
        }
        let usable = match self.kind {
            ActuatorKind::ArmJoint(_) => fresh,
            _ => can_live,
        };
        if usable && self.kind.has_can_path() {
            self.authority = Authority::Can;
            Some(self.can_setpoint)
        } else {
            self.authority = Authority::None;
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActuatorSet {
    pub traction: ActuatorChannel,
    pub steering: ActuatorChannel,
    pub brake: ActuatorChannel,
    pub arms: Vec<ActuatorChannel>,
}

impl ActuatorSet {
    pub fn new(arm_joints: u8) -> Self {
        Self {
            traction: ActuatorChannel::new(ActuatorKind::Traction),
            steering: ActuatorChannel::new(ActuatorKind::Steering),
            brake: ActuatorChannel::new(ActuatorKind::Brake),
            arms: (0..arm_joints)
                .map(|k| ActuatorChannel::new(ActuatorKind::ArmJoint(k)))
                .collect(),
        }
    }
}

/// What the actuators do this tick. `None` means no authority holds the channel.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Commands {
    pub speed: Option<f64>,
    pub steering: Option<f64>,
    pub brake: f64,
    pub arm_rates: Vec<Option<f64>>,
}

/// Effective command per channel; manual wins whenever engaged.
pub fn apply_commands(channels: &mut ActuatorSet, can_live: bool) -> Commands {
    Commands {
        speed: channels.traction.resolve(can_live),
        steering: channels.steering.resolve(can_live),
        brake: channels.brake.resolve(can_live).unwrap_or(0.0),
        arm_rates: channels.arms.iter_mut().map(|a| a.resolve(can_live)).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub steering_angle: f64,
    pub arm_joints: Vec<f64>,
    pub wheelbase: f64,
}

impl VehicleState {
    pub fn at_rest(cfg: &PlantConfig) -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            heading: 0.0,
            speed: 0.0,
            steering_angle: 0.0,
            arm_joints: vec![0.0; cfg.arm_joints as usize],
            wheelbase: cfg.wheelbase,
        }
    }
}

fn approach(current: f64, target: f64, max_step: f64) -> f64 {
    current + (target - current).clamp(-max_step, max_step)
}

/// Advances the vehicle by `dt_ms`. Commands are clamped to actuator limits.
pub fn integrate(state: &VehicleState, cmd: &Commands, dt_ms: Millis, cfg: &PlantConfig) -> VehicleState {
    let dt = dt_ms as f64 / 1000.0;
    let mut next = state.clone();

    let speed_target = cmd.speed.unwrap_or(0.0).clamp(-cfg.v_max, cfg.v_max);
    let alpha = 1.0 - (-(dt_ms as f64) / cfg.speed_tau_ms).exp();
    let mut speed = state.speed + (speed_target - state.speed) * alpha;
    if cmd.brake > 0.0 {
        speed = approach(speed, 0.0, cmd.brake.clamp(0.0, 1.0) * cfg.brake_decel * dt);
    }
    next.speed = speed.clamp(-cfg.v_max, cfg.v_max);

    let steer_target = cmd
        .steering
        .unwrap_or(state.steering_angle)
        .clamp(-cfg.steer_limit, cfg.steer_limit);
    next.steering_angle =
        approach(state.steering_angle, steer_target, cfg.steer_rate_max * dt).clamp(-cfg.steer_limit, cfg.steer_limit);

    let v = next.speed;
    let yaw_rate = v * next.steering_angle.tan() / state.wheelbase;
    if yaw_rate.abs() < 1e-12 {
        next.x += v * state.heading.cos() * dt;
        next.y += v * state.heading.sin() * dt;
    } else {
        let h1 = state.heading + yaw_rate * dt;
        next.x += v / yaw_rate * (h1.sin() - state.heading.sin());
        next.y += v / yaw_rate * (state.heading.cos() - h1.cos());
        next.heading = h1;
    }

    for (joint, rate) in next.arm_joints.iter_mut().zip(&cmd.arm_rates) {
        if let Some(rate) = rate {
            *joint = (*joint + rate * dt).clamp(-cfg.arm_joint_limit, cfg.arm_joint_limit);
        }
    }
    next
}

/// Decoded contents of a feedback frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Feedback {
    Speed(f64),
    SteeringAngle(f64),
    ArmJoint(u8, f64),
}

pub fn decode_feedback(frame: &CanFrame, ids: &IdMap) -> Option<Feedback> {
    if frame.id == ids.traction_feedback {
        decode_fixed(&frame.data).map(Feedback::Speed)
    } else if frame.id == ids.steering_feedback {
        decode_fixed(&frame.data).map(Feedback::SteeringAngle)
    } else if frame.id == ids.arm_feedback {
        decode_indexed(&frame.data).map(|(k, v)| Feedback::ArmJoint(k, v))
    } else {
        None
    }
}

/// Simulated vehicle: state, actuator channels and the feedback noise source.
pub struct Plant {
    cfg: PlantConfig,
    ids: IdMap,
    state: VehicleState,
    channels: ActuatorSet,
    noise: ChaCha8Rng,
}

impl Plant {
    pub fn new(cfg: PlantConfig, ids: IdMap, seed: u64) -> Self {
        Self {
            state: VehicleState::at_rest(&cfg),
            channels: ActuatorSet::new(cfg.arm_joints),
            noise: ChaCha8Rng::seed_from_u64(seed),
            cfg,
            ids,
        }
    }

    pub fn config(&self) -> &PlantConfig {
        &self.cfg
    }

    pub fn state(&self) -> &VehicleState {
        &self.state
    }

    pub fn channels(&self) -> &ActuatorSet {
        &self.channels
    }

    /// Direct-wired operator commands, in operator units. `None` = not engaged.
    pub fn wire_manual(&mut self, throttle: Option<f64>, brake: Option<f64>, steering_torque: Option<f64>) {
        let cfg = self.cfg;
        let speed = throttle.map(|t| t.clamp(0.0, 1.0) * cfg.v_max);
        let steer = steering_torque.map(|tq| (tq / cfg.torque_max).clamp(-1.0, 1.0) * cfg.steer_limit);
        // traction, steering and brake all have manual paths
        self.channels
            .traction
            .set_manual(speed)
            .expect("traction has a manual path");
        self.channels
            .steering
            .set_manual(steer)
            .expect("steering has a manual path");
        self.channels
            .brake
            .set_manual(brake.map(|b| b.clamp(0.0, 1.0)))
            .expect("brake has a manual path");
    }

    /// Latches a delivered setpoint frame. Returns false if the frame is not
    /// an actuator command.
    pub fn accept_setpoint(&mut self, frame: &CanFrame) -> Result<bool, PlantError> {
        let ids = self.ids;
        if frame.id == ids.traction_setpoint {
            if let Some(v) = decode_fixed(&frame.data) {
                self.channels.traction.set_can(v)?;
            }
        } else if frame.id == ids.steering_setpoint {
            if let Some(v) = decode_fixed(&frame.data) {
                self.channels.steering.set_can(v)?;
            }
        } else if frame.id == ids.arm_command {
            if let Some((k, rate)) = decode_indexed(&frame.data) {
                let arm = self
                    .channels
                    .arms
                    .get_mut(k as usize)
                    .ok_or(PlantError::UnknownJoint(k))?;
                arm.set_can(rate)?;
            }
        } else {
            return Ok(false);
        }
        Ok(true)
    }

    pub fn tick(&mut self, can_live: bool, dt_ms: Millis) -> Commands {
        let cmd = apply_commands(&mut self.channels, can_live);
        self.state = integrate(&self.state, &cmd, dt_ms, &self.cfg);
        cmd
    }

    pub fn emit_feedback(&mut self) -> Vec<CanFrame> {
        let speed = self.state.speed + self.draw_noise();
        let steer = self.state.steering_angle + self.draw_noise();
        let mut frames = vec![
            CanFrame::new(
                self.ids.traction_feedback,
                &encode_fixed(speed),
                Origin::ActuatorController,
            ),
            CanFrame::new(
                self.ids.steering_feedback,
                &encode_fixed(steer),
                Origin::ActuatorController,
            ),
        ];
        let joints = self.state.arm_joints.clone();
        for (k, q) in joints.iter().enumerate() {
            let q = q + self.draw_noise();
            frames.push(CanFrame::new(
                self.ids.arm_feedback,
                &encode_indexed(k as u8, q),
                Origin::Sensor,
            ));
        }
        frames.into_iter().map(|f| f.expect("feedback ids are valid")).collect()
    }

    fn draw_noise(&mut self) -> f64 {
        let a = self.cfg.feedback_noise;
        if a > 0.0 {
            self.noise.gen_range(-a..=a)
        } else {
            0.0
        }
    }
}
