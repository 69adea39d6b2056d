//! Operator input channels and engagement detection.
//!
//! [`OperatorPanel`] holds the piecewise-constant pedal, wheel and consent
//! levels set by scenario events and remembers, per channel, the instant the
//! signal last rose above its activation threshold. That instant is the
//! activation time reported by [`detect_engagement`], so a measured response
//! includes the wait for the next supervisor sample.

use serde::{Deserialize, Serialize};

use crate::Millis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManualChannel {
    Throttle,
    Brake,
    Steering,
}

impl ManualChannel {
    pub const ALL: [ManualChannel; 3] = [ManualChannel::Throttle, ManualChannel::Brake, ManualChannel::Steering];

    pub fn index(self) -> usize {
        match self {
            ManualChannel::Throttle => 0,
            ManualChannel::Brake => 1,
            ManualChannel::Steering => 2,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ManualChannel::Throttle => "throttle",
            ManualChannel::Brake => "brake",
            ManualChannel::Steering => "steering",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "throttle" => Some(ManualChannel::Throttle),
            "brake" => Some(ManualChannel::Brake),
            "steering" | "steering_torque" => Some(ManualChannel::Steering),
            _ => None,
        }
    }
}

/// Per-channel value indexed by [`ManualChannel::index`].
pub type PerChannel<T> = [T; 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngagementConfig {
    pub throttle_threshold: f64,
    pub brake_threshold: f64,
    /// N·m, compared against the torque magnitude.
    pub steering_torque_threshold: f64,
    pub debounce_samples: u32,
}

impl Default for EngagementConfig {
    fn default() -> Self {
        Self {
            throttle_threshold: 0.05,
            brake_threshold: 0.02,
            steering_torque_threshold: 0.5,
            debounce_samples: 0,
        }
    }
}

impl EngagementConfig {
    pub fn threshold(&self, channel: ManualChannel) -> f64 {
        match channel {
            ManualChannel::Throttle => self.throttle_threshold,
            ManualChannel::Brake => self.brake_threshold,
            ManualChannel::Steering => self.steering_torque_threshold,
        }
    }

    /// Instantaneous comparison; steering uses |torque|.
    pub fn above(&self, channel: ManualChannel, value: f64) -> bool {
        value.abs() > self.threshold(channel)
    }

    pub fn validate(&self) -> Result<(), String> {
        for ch in ManualChannel::ALL {
            let thr = self.threshold(ch);
            if !(thr > 0.0 && thr.is_finite()) {
                return Err(format!("{} threshold must be > 0, got {thr}", ch.label()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ManualInputs {
    pub throttle: f64,
    pub brake: f64,
    pub steering_torque: f64,
    pub consent: bool,
    pub t: Millis,
    /// Time the channel last crossed above its threshold, if currently above.
    pub rise_edge: PerChannel<Option<Millis>>,
}

impl ManualInputs {
    pub fn value(&self, channel: ManualChannel) -> f64 {
        match channel {
            ManualChannel::Throttle => self.throttle,
            ManualChannel::Brake => self.brake,
            ManualChannel::Steering => self.steering_torque,
        }
    }
}

/// Held operator levels, updated by scenario events.
#[derive(Debug, Clone)]
pub struct OperatorPanel {
    cfg: EngagementConfig,
    values: PerChannel<f64>,
    consent: bool,
    rise_edge: PerChannel<Option<Millis>>,
}

impl OperatorPanel {
    pub fn new(cfg: EngagementConfig) -> Self {
        Self {
            cfg,
            values: [0.0; 3],
            consent: false,
            rise_edge: [None; 3],
        }
    }

    pub fn set(&mut self, channel: ManualChannel, value: f64, t: Millis) {
        let i = channel.index();
        let was_above = self.cfg.above(channel, self.values[i]);
        let is_above = self.cfg.above(channel, value);
        self.values[i] = value;
        match (was_above, is_above) {
            (false, true) => self.rise_edge[i] = Some(t),
            (_, false) => self.rise_edge[i] = None,
            (true, true) => {}
        }
    }

    pub fn set_consent(&mut self, consent: bool) {
        self.consent = consent;
    }

    pub fn value(&self, channel: ManualChannel) -> f64 {
        self.values[channel.index()]
    }

    pub fn consent(&self) -> bool {
        self.consent
    }

    /// Direct-wired engagement: what the actuator controllers see this tick.
    pub fn wired_engaged(&self, channel: ManualChannel) -> bool {
        self.cfg.above(channel, self.value(channel))
    }

    pub fn sample(&self, t: Millis) -> ManualInputs {
        ManualInputs {
            throttle: self.values[0],
            brake: self.values[1],
            steering_torque: self.values[2],
            consent: self.consent,
            t,
            rise_edge: self.rise_edge,
        }
    }
}

/// Consecutive-sample history kept between calls to [`detect_engagement`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EngagementHistory {
    run_len: PerChannel<u32>,
    run_start: PerChannel<Option<Millis>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Engagement {
    pub engaged: PerChannel<bool>,
    pub any_engaged: bool,
    pub activation: PerChannel<Option<Millis>>,
}

/// Updates `history` with one sample and reports which channels are engaged.
///
/// A channel is engaged once it has been above threshold for
/// `debounce_samples + 1` consecutive samples. Its activation time is the
/// rise edge observed at the first sample of that run, falling back to the
/// sample time when no edge was recorded.
pub fn detect_engagement(input: &ManualInputs, cfg: &EngagementConfig, history: &mut EngagementHistory) -> Engagement {
    let mut out = Engagement::default();
    for ch in ManualChannel::ALL {
        let i = ch.index();
        if !cfg.above(ch, input.value(ch)) {
            history.run_len[i] = 0;
            history.run_start[i] = None;
            continue;
        }
        let edge = input.rise_edge[i].unwrap_or(input.t);
        // a dip below threshold between samples shows up as a new edge
        let continues = history.run_len[i] > 0 && input.rise_edge[i].is_none_or(|e| Some(e) == history.run_start[i]);
        if continues {
            history.run_len[i] = history.run_len[i].saturating_add(1);
        } else {
            history.run_len[i] = 1;
            history.run_start[i] = Some(edge);
        }
        if history.run_len[i] > cfg.debounce_samples {
            out.engaged[i] = true;
            out.activation[i] = history.run_start[i];
        }
    }
    out.any_engaged = out.engaged.iter().any(|e| *e);
    out
}

/// The held consent level at the sample instant.
pub fn consent_signal(input: &ManualInputs) -> bool {
    input.consent
}
