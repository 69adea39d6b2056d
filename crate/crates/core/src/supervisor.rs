//! PLC-role supervisor: the MS/WS/AS mode machine.
//!
//! `step` is a pure function of (state, inputs, config). Rules are checked
//! in a fixed priority order, first match wins:
//!
//! 1. any manual actuator engaged -> MS
//! 2. consent is 0 -> MS
//! 3. MS with consent 1 -> WS, control request emitted
//! 4. WS with a confirm inside the window -> AS
//! 5. WS past the window -> MS
//!
//! The bus gate is open exactly when the post-state is AS.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::canbus::{CanFrame, IdMap, Origin};
use crate::Millis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "MS")]
    Manual,
    #[serde(rename = "WS")]
    Waiting,
    #[serde(rename = "AS")]
    Autonomous,
}

impl Mode {
    pub fn code(self) -> u8 {
        match self {
            Mode::Manual => 0,
            Mode::Waiting => 1,
            Mode::Autonomous => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Mode::Manual),
            1 => Some(Mode::Waiting),
            2 => Some(Mode::Autonomous),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Mode::Manual => "MS",
            Mode::Waiting => "WS",
            Mode::Autonomous => "AS",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Why the last transition happened. Carried in byte 1 of the state broadcast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cause {
    Ignition,
    ManualEngagement,
    ConsentRevoked,
    ConsentGranted,
    AdpuConfirmed,
    WsTimeout,
}

impl Cause {
    pub fn code(self) -> u8 {
        match self {
            Cause::Ignition => 0,
            Cause::ManualEngagement => 1,
            Cause::ConsentRevoked => 2,
            Cause::ConsentGranted => 3,
            Cause::AdpuConfirmed => 4,
            Cause::WsTimeout => 5,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Cause::Ignition => "ignition",
            Cause::ManualEngagement => "manual_engagement",
            Cause::ConsentRevoked => "consent_revoked",
            Cause::ConsentGranted => "consent_granted",
            Cause::AdpuConfirmed => "adpu_confirmed",
            Cause::WsTimeout => "ws_timeout",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub from: Mode,
    pub to: Mode,
    pub cause: Cause,
    pub t: Millis,
}

impl Transition {
    /// `t_ms,from,to,cause`
    pub fn log_line(&self) -> String {
        format!("{},{},{},{}", self.t, self.from, self.to, self.cause.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SupervisorState {
    pub mode: Mode,
    pub ws_entered_at: Option<Millis>,
    pub gate_open: bool,
    pub last_transition: Transition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SupervisorInputs {
    pub consent: bool,
    /// A control-confirm frame was delivered since the previous step.
    pub adpu_confirm: bool,
    pub manual_engaged: bool,
    pub now: Millis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisorConfig {
    pub cycle_period: Millis,
    pub ws_timeout: Millis,
}

impl Default for SupervisorConfig {
    fn default() -> Self {
        Self {
            cycle_period: 10,
            ws_timeout: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Effect {
    SetGate(bool),
    /// Frame for the bus; the caller submits it.
    Emit(CanFrame),
}

pub fn initial_state() -> SupervisorState {
    SupervisorState {
        mode: Mode::Manual,
        ws_entered_at: None,
        gate_open: false,
        last_transition: Transition {
            from: Mode::Manual,
            to: Mode::Manual,
            cause: Cause::Ignition,
            t: 0,
        },
    }
}

/// Mode-level decision, separated from bookkeeping so `step` stays readable.
fn decide(state: &SupervisorState, input: &SupervisorInputs, cfg: &SupervisorConfig) -> Option<(Mode, Cause)> {
    if input.manual_engaged {
        return (state.mode != Mode::Manual).then_some((Mode::Manual, Cause::ManualEngagement));
    }
    if !input.consent {
        return (state.mode != Mode::Manual).then_some((Mode::Manual, Cause::ConsentRevoked));
    }
    match state.mode {
        Mode::Manual => Some((Mode::Waiting, Cause::ConsentGranted)),
        Mode::Waiting => {
            let entered = state.ws_entered_at.unwrap_or(input.now);
            let elapsed = input.now.saturating_sub(entered);
            if input.adpu_confirm && elapsed <= cfg.ws_timeout {
                Some((Mode::Autonomous, Cause::AdpuConfirmed))
            } else if elapsed > cfg.ws_timeout {
                Some((Mode::Manual, Cause::WsTimeout))
            } else {
                None
            }
        }
        Mode::Autonomous => None,
    }
}

pub fn step(
    state: &SupervisorState,
    input: &SupervisorInputs,
    cfg: &SupervisorConfig,
    ids: &IdMap,
) -> (SupervisorState, Vec<Effect>) {
    let mut next = *state;
    let mut effects = Vec::with_capacity(3);

    if let Some((to, cause)) = decide(state, input, cfg) {
        next.mode = to;
        next.last_transition = Transition {
            from: state.mode,
            to,
            cause,
            t: input.now,
        };
        next.ws_entered_at = (to == Mode::Waiting).then_some(input.now);
        if to == Mode::Waiting {
            let request = CanFrame::new(ids.control_request, &[1], Origin::Plc).expect("valid id map");
            effects.push(Effect::Emit(request));
        }
    }
    next.gate_open = next.mode == Mode::Autonomous;

    effects.push(Effect::SetGate(next.gate_open));
    let broadcast = CanFrame::new(
        ids.supervisor_state,
        &[next.mode.code(), next.last_transition.cause.code()],
        Origin::Plc,
    )
    .expect("valid id map");
    effects.push(Effect::Emit(broadcast));
    (next, effects)
}

/// True when the step produced a mode change.
pub fn transitioned(before: &SupervisorState, after: &SupervisorState) -> bool {
    before.mode != after.mode
}
