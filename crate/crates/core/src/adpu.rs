//! Autonomous driving processing unit, reduced to what the supervisor and
//! the bus can observe.
//!
//! The sensing stage builds an [`EgoEstimate`] purely from delivered
//! feedback frames (dead reckoning on speed and steering feedback).
//! Perception and map validation are typed no-op stages. Planning walks a
//! waypoint list; control runs pure pursuit for steering and a proportional
//! speed correction, then frames the clamped setpoints.
//!
//! The ADPU keeps computing in every supervisor mode. Whether its setpoints
//! reach the actuators is decided by the bus gate alone.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canbus::{CanFrame, IdMap, Origin};
use crate::codec::{encode_fixed, encode_indexed};
use crate::plant::{decode_feedback, Feedback, PlantConfig};
use crate::Millis;

#[derive(Debug, Error)]
pub enum AdpuError {
    #[error("unknown behavior {0:?}")]
    UnknownBehavior(String),
    #[error("control_period must be > 0")]
    ZeroPeriod,
    #[error("reading waypoint file: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing waypoint file: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfirmPolicy {
    Always,
    Never,
    /// Confirm this many ms after the request arrives, ignoring `confirm_latency`.
    After(Millis),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub x_m: f64,
    pub y_m: f64,
    pub speed_mps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmCommand {
    pub joint: u8,
    /// rad/s while the valve is commanded
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Planner {
    pub waypoints: Vec<Waypoint>,
    pub looped: bool,
    /// Pure-pursuit lookahead L_d, m.
    pub lookahead: f64,
    /// A waypoint counts as reached inside this radius, m.
    pub reach_radius: f64,
    pub speed_gain: f64,
    pub arm: Option<ArmCommand>,
}

impl Default for Planner {
    fn default() -> Self {
        Self {
            waypoints: Vec::new(),
            looped: false,
            lookahead: 2.0,
            reach_radius: 0.5,
            speed_gain: 0.5,
            arm: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdpuBehavior {
    pub name: String,
    pub control_period: Millis,
    pub confirm_latency: Millis,
    pub confirm_policy: ConfirmPolicy,
    pub planner: Planner,
}

impl AdpuBehavior {
    pub fn validate(&self) -> Result<(), AdpuError> {
        if self.control_period == 0 {
            return Err(AdpuError::ZeroPeriod);
        }
        Ok(())
    }

    /// The three shipped behaviors, differing in planner content and period.
    pub fn stock(name: &str) -> Result<Self, AdpuError> {
        let wp = |x_m, y_m, speed_mps| Waypoint { x_m, y_m, speed_mps };
        let behavior = match name {
            "session1" => Self {
                name: name.into(),
                control_period: 50,
                confirm_latency: 20,
                confirm_policy: ConfirmPolicy::Always,
                planner: Planner {
                    waypoints: vec![wp(20.0, 0.0, 1.0), wp(40.0, 0.0, 1.5), wp(60.0, 0.0, 1.0)],
                    ..Default::default()
                },
            },
            "session2" => Self {
                name: name.into(),
                control_period: 20,
                confirm_latency: 20,
                confirm_policy: ConfirmPolicy::Always,
                planner: Planner {
                    waypoints: vec![
                        wp(10.0, 0.0, 1.2),
                        wp(15.0, 5.0, 0.8),
                        wp(10.0, 10.0, 0.8),
                        wp(0.0, 10.0, 1.2),
                        wp(-5.0, 5.0, 0.8),
                        wp(0.0, 0.0, 0.8),
                    ],
                    looped: true,
                    lookahead: 3.0,
                    arm: Some(ArmCommand { joint: 0, rate: 0.05 }),
                    ..Default::default()
                },
            },
            "session3" => Self {
                name: name.into(),
                control_period: 100,
                confirm_latency: 20,
                confirm_policy: ConfirmPolicy::Always,
                planner: Planner {
                    waypoints: (1..=12)
                        .map(|k| wp(5.0 * k as f64, if k % 2 == 0 { 2.0 } else { -2.0 }, 0.7))
                        .collect(),
                    lookahead: 2.5,
                    speed_gain: 0.8,
                    ..Default::default()
                },
            },
            other => return Err(AdpuError::UnknownBehavior(other.to_string())),
        };
        Ok(behavior)
    }

    pub const STOCK: [&'static str; 3] = ["session1", "session2", "session3"];
}

/// Waypoint file: JSON array of `{x_m, y_m, speed_mps}`.
pub fn load_waypoints(path: &Path) -> Result<Vec<Waypoint>, AdpuError> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct EgoEstimate {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub steering_angle: f64,
    /// Sample time of the newest feedback folded in.
    pub t: Millis,
}

/// Dead reckoning over delivered feedback. Pose is advanced at each speed
/// sample using the previous speed and steering values, so the estimate
/// depends on frame contents and sample times only.
#[derive(Debug, Clone)]
pub struct EgoEstimator {
    wheelbase: f64,
    ego: EgoEstimate,
    arm_joints: Vec<f64>,
}

impl EgoEstimator {
    pub fn new(wheelbase: f64) -> Self {
        Self {
            wheelbase,
            ego: EgoEstimate::default(),
            arm_joints: Vec::new(),
        }
    }

    pub fn estimate(&self) -> EgoEstimate {
        self.ego
    }

    pub fn arm_joints(&self) -> &[f64] {
        &self.arm_joints
    }

    pub fn absorb(&mut self, fb: Feedback, sampled_at: Millis) {
        match fb {
            Feedback::Speed(v) => {
                let dt = sampled_at.saturating_sub(self.ego.t) as f64 / 1000.0;
                let e = &mut self.ego;
                let yaw_rate = e.speed * e.steering_angle.tan() / self.wheelbase;
                e.x += e.speed * e.heading.cos() * dt;
                e.y += e.speed * e.heading.sin() * dt;
                e.heading = wrap_angle(e.heading + yaw_rate * dt);
                e.speed = v;
                e.t = sampled_at;
            }
            Feedback::SteeringAngle(a) => self.ego.steering_angle = a,
            Feedback::ArmJoint(k, q) => {
                let k = k as usize;
                if self.arm_joints.len() <= k {
                    self.arm_joints.resize(k + 1, 0.0);
                }
                self.arm_joints[k] = q;
            }
        }
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    let mut a = (a + PI).rem_euclid(2.0 * PI) - PI;
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

/// κ = 2·sin(α)/L_d
pub fn pure_pursuit_curvature(bearing_error: f64, lookahead: f64) -> f64 {
    2.0 * bearing_error.sin() / lookahead
}

/// Steering angle for a curvature on a bicycle of the given wheelbase, clamped.
pub fn steering_for_curvature(curvature: f64, wheelbase: f64, steer_limit: f64) -> f64 {
    (curvature * wheelbase).atan().clamp(-steer_limit, steer_limit)
}

/// Something the perception stage reports. Never populated by the stubs.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub x: f64,
    pub y: f64,
    pub label: String,
}

pub trait Perception {
    fn detect(&mut self, ego: &EgoEstimate, now: Millis) -> Vec<Detection>;
}

pub trait MapValidation {
    fn map_valid(&mut self, ego: &EgoEstimate, now: Millis) -> bool;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct NoPerception;

impl Perception for NoPerception {
    fn detect(&mut self, _: &EgoEstimate, _: Millis) -> Vec<Detection> {
        Vec::new()
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct AlwaysValidMap;

impl MapValidation for AlwaysValidMap {
    fn map_valid(&mut self, _: &EgoEstimate, _: Millis) -> bool {
        true
    }
}

/// Vehicle limits the control stage clamps against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleLimits {
    pub wheelbase: f64,
    pub steer_limit: f64,
    pub v_max: f64,
}

impl From<&PlantConfig> for VehicleLimits {
    fn from(c: &PlantConfig) -> Self {
        Self {
            wheelbase: c.wheelbase,
            steer_limit: c.steer_limit,
            v_max: c.v_max,
        }
    }
}

/// Setpoints before framing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Setpoints {
    pub speed: f64,
    pub steering: f64,
    pub arm: Option<ArmCommand>,
}

pub struct Adpu {
    behavior: AdpuBehavior,
    limits: VehicleLimits,
    ids: IdMap,
    estimator: EgoEstimator,
    active: usize,
    finished: bool,
    pending_confirms: Vec<Millis>,
    perception: Box<dyn Perception + Send>,
    map: Box<dyn MapValidation + Send>,
}

impl Adpu {
    pub fn new(behavior: AdpuBehavior, limits: VehicleLimits, ids: IdMap) -> Self {
        Self {
            estimator: EgoEstimator::new(limits.wheelbase),
            behavior,
            limits,
            ids,
            active: 0,
            finished: false,
            pending_confirms: Vec::new(),
            perception: Box::new(NoPerception),
            map: Box::new(AlwaysValidMap),
        }
    }

    pub fn with_stages(mut self, perception: Box<dyn Perception + Send>, map: Box<dyn MapValidation + Send>) -> Self {
        self.perception = perception;
        self.map = map;
        self
    }

    pub fn behavior(&self) -> &AdpuBehavior {
        &self.behavior
    }

    pub fn ego(&self) -> EgoEstimate {
        self.estimator.estimate()
    }

    /// Handles a frame delivered to the ADPU. Returns the scheduled confirm
    /// time when the frame is a control request that will be answered.
    pub fn on_frame(&mut self, frame: &CanFrame, now: Millis) -> Option<Millis> {
        if frame.id == self.ids.control_request {
            return self.on_control_request(now);
        }
        if let Some(fb) = decode_feedback(frame, &self.ids) {
            self.estimator.absorb(fb, frame.t_submit);
        }
        None
    }

    pub fn on_control_request(&mut self, now: Millis) -> Option<Millis> {
        let at = match self.behavior.confirm_policy {
            ConfirmPolicy::Always => now + self.behavior.confirm_latency,
            ConfirmPolicy::After(delay) => now + delay,
            ConfirmPolicy::Never => return None,
        };
        self.pending_confirms.push(at);
        Some(at)
    }

    /// Confirm frames whose time has come.
    pub fn due_confirms(&mut self, now: Millis) -> Vec<CanFrame> {
        let mut out = Vec::new();
        self.pending_confirms.retain(|t| {
            if *t <= now {
                out.push(CanFrame::new(self.ids.control_confirm, &[1], Origin::Adpu).expect("valid id"));
                false
            } else {
                true
            }
        });
        out
    }

    pub fn is_control_tick(&self, now: Millis) -> bool {
        now > 0 && now.is_multiple_of(self.behavior.control_period)
    }

    /// Runs sensing, planning and control once and frames the setpoints.
    pub fn control_cycle(&mut self, now: Millis) -> Vec<CanFrame> {
        let ego = self.estimator.estimate();
        let _detections = self.perception.detect(&ego, now);
        let _map_ok = self.map.map_valid(&ego, now);
        let sp = self.plan_and_control(&ego);
        self.frame_setpoints(&sp)
    }

    pub fn plan_and_control(&mut self, ego: &EgoEstimate) -> Setpoints {
        let planner = &self.behavior.planner;
        let waypoints = &planner.waypoints;
        if waypoints.is_empty() || self.finished {
            return Setpoints {
                speed: 0.0,
                steering: 0.0,
                arm: None,
            };
        }
        // skip reached waypoints, at most one lap per cycle
        for _ in 0..waypoints.len() {
            let wp = waypoints[self.active];
            if (wp.x_m - ego.x).hypot(wp.y_m - ego.y) >= planner.reach_radius {
                break;
            }
            if self.active + 1 < waypoints.len() {
                self.active += 1;
            } else if planner.looped {
                self.active = 0;
            } else {
                self.finished = true;
                return Setpoints {
                    speed: 0.0,
                    steering: 0.0,
                    arm: None,
                };
            }
        }
        let target = waypoints[self.active];
        control_law(ego, &target, planner, &self.limits)
    }

    fn frame_setpoints(&self, sp: &Setpoints) -> Vec<CanFrame> {
        let speed = sp.speed.clamp(-self.limits.v_max, self.limits.v_max);
        let steer = sp.steering.clamp(-self.limits.steer_limit, self.limits.steer_limit);
        let mut frames = vec![
            CanFrame::new(self.ids.traction_setpoint, &encode_fixed(speed), Origin::Adpu),
            CanFrame::new(self.ids.steering_setpoint, &encode_fixed(steer), Origin::Adpu),
        ];
        if let Some(arm) = sp.arm {
            frames.push(CanFrame::new(
                self.ids.arm_command,
                &encode_indexed(arm.joint, arm.rate),
                Origin::Adpu,
            ));
        }
        frames.into_iter().map(|f| f.expect("setpoint ids are valid")).collect()
    }
}

/// Pure pursuit toward `target` plus proportional speed correction.
pub fn control_law(ego: &EgoEstimate, target: &Waypoint, planner: &Planner, limits: &VehicleLimits) -> Setpoints {
    let bearing = (target.y_m - ego.y).atan2(target.x_m - ego.x);
    let alpha = wrap_angle(bearing - ego.heading);
    let kappa = pure_pursuit_curvature(alpha, planner.lookahead);
    let steering = steering_for_curvature(kappa, limits.wheelbase, limits.steer_limit);
    let profile = target.speed_mps;
    let speed = (profile + planner.speed_gain * (profile - ego.speed)).clamp(-limits.v_max, limits.v_max);
    Setpoints {
        speed,
        steering,
        arm: planner.arm,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::decode_fixed;

    fn limits() -> VehicleLimits {
        VehicleLimits::from(&PlantConfig::default())
    }

    fn adpu(policy: ConfirmPolicy) -> Adpu {
        let mut b = AdpuBehavior::stock("session1").unwrap();
        b.confirm_policy = policy;
        Adpu::new(b, limits(), IdMap::default())
    }

    #[test]
    fn always_confirms_after_latency() {
        let mut a = adpu(ConfirmPolicy::Always);
        assert_eq!(a.on_control_request(100), Some(120));
        assert!(a.due_confirms(119).is_empty());
        let c = a.due_confirms(120);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].id, 0x091);
        assert!(a.due_confirms(121).is_empty());
    }

    #[test]
    fn never_stays_silent() {
        let mut a = adpu(ConfirmPolicy::Never);
        assert_eq!(a.on_control_request(100), None);
        assert!(a.due_confirms(10_000).is_empty());
    }

    #[test]
    fn after_uses_its_own_delay() {
        let mut a = adpu(ConfirmPolicy::After(3000));
        assert_eq!(a.on_control_request(100), Some(3100));
    }

    #[test]
    fn straight_ahead_zero_steer() {
        let planner = Planner::default();
        let wp = Waypoint {
            x_m: 10.0,
            y_m: 0.0,
            speed_mps: 1.0,
        };
        let sp = control_law(&EgoEstimate::default(), &wp, &planner, &limits());
        assert_eq!(sp.steering, 0.0);
    }

    #[test]
    fn pure_pursuit_closed_form() {
        let alpha = PI / 6.0;
        let kappa = pure_pursuit_curvature(alpha, 2.0);
        assert!((kappa - 0.5).abs() < 1e-12);
        let unclamped = steering_for_curvature(kappa, 2.5, f64::INFINITY);
        assert!((unclamped - 1.25f64.atan()).abs() < 1e-12);
        assert!((unclamped - 0.8961).abs() < 1e-3);
        assert_eq!(steering_for_curvature(kappa, 2.5, 0.6), 0.6);

        // geometric check: waypoint at bearing π/6, lookahead 2 m
        let wp = Waypoint {
            x_m: 2.0 * alpha.cos(),
            y_m: 2.0 * alpha.sin(),
            speed_mps: 1.0,
        };
        let sp = control_law(&EgoEstimate::default(), &wp, &Planner::default(), &limits());
        assert!((sp.steering - 0.6).abs() < 1e-12);
    }

    #[test]
    fn at_profile_speed_no_correction() {
        let wp = Waypoint {
            x_m: 10.0,
            y_m: 0.0,
            speed_mps: 1.0,
        };
        let ego = EgoEstimate {
            speed: 1.0,
            ..Default::default()
        };
        let sp = control_law(&ego, &wp, &Planner::default(), &limits());
        assert_eq!(sp.speed, 1.0);
    }

    #[test]
    fn no_waypoints_zero_setpoints() {
        let mut b = AdpuBehavior::stock("session1").unwrap();
        b.planner.waypoints.clear();
        let mut a = Adpu::new(b, limits(), IdMap::default());
        let frames = a.control_cycle(50);
        assert_eq!(frames.len(), 2);
        assert!(frames.iter().all(|f| decode_fixed(&f.data) == Some(0.0)));
    }

    #[test]
    fn setpoints_clamped_before_framing() {
        let mut b = AdpuBehavior::stock("session1").unwrap();
        b.planner.waypoints = vec![Waypoint {
            x_m: 0.0,
            y_m: 10.0,
            speed_mps: 50.0,
        }];
        let mut a = Adpu::new(b, limits(), IdMap::default());
        let frames = a.control_cycle(50);
        assert_eq!(decode_fixed(&frames[0].data), Some(3.0));
        assert_eq!(decode_fixed(&frames[1].data), Some(0.6));
    }

    #[test]
    fn finished_route_stops() {
        let mut b = AdpuBehavior::stock("session1").unwrap();
        b.planner.waypoints = vec![Waypoint {
            x_m: 0.1,
            y_m: 0.0,
            speed_mps: 1.0,
        }];
        let mut a = Adpu::new(b, limits(), IdMap::default());
        let sp = a.plan_and_control(&EgoEstimate::default());
        assert_eq!(sp.speed, 0.0);
    }

    #[test]
    fn ego_from_feedback_dead_reckons() {
        let mut est = EgoEstimator::new(2.5);
        est.absorb(Feedback::Speed(1.0), 0);
        est.absorb(Feedback::Speed(1.0), 1000);
        let e = est.estimate();
        assert!((e.x - 1.0).abs() < 1e-12);
        assert_eq!(e.heading, 0.0);
        est.absorb(Feedback::ArmJoint(1, 0.25), 1000);
        assert_eq!(est.arm_joints(), &[0.0, 0.25]);
    }

    #[test]
    fn stock_behaviors_exist_and_unknown_fails() {
        for name in AdpuBehavior::STOCK {
            let b = AdpuBehavior::stock(name).unwrap();
            assert!(b.validate().is_ok());
        }
        assert!(matches!(
            AdpuBehavior::stock("nope"),
            Err(AdpuError::UnknownBehavior(_))
        ));
    }

    #[test]
    fn waypoint_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("route.json");
        std::fs::write(&path, r#"[{"x_m":1.0,"y_m":2.0,"speed_mps":0.5}]"#).unwrap();
        let wps = load_waypoints(&path).unwrap();
        assert_eq!(
            wps,
            vec![Waypoint {
                x_m: 1.0,
                y_m: 2.0,
                speed_mps: 0.5
            }]
        );
    }

    #[test]
    fn wrap_angle_range() {
        for a in [-10.0, -PI, 0.0, PI, 3.5, 10.0] {
            let w = wrap_angle(a);
            assert!(w > -PI - 1e-12 && w <= PI + 1e-12, "{a} -> {w}");
            assert!(((w - a) / (2.0 * PI)).fract().abs() < 1e-9 || ((w - a) / (2.0 * PI)).fract().abs() > 1.0 - 1e-9);
        }
    }
}
