//! Deterministic virtual CAN segment.
//!
//! One shared bus. Frames are scheduled at `now + base_latency + jitter`,
//! where the jitter comes from a seeded uniform draw over `[0, jitter_max]`.
//! Frames that fall due on the same tick leave the bus in arbitration
//! order (lowest identifier first, then submission order).
//!
//! The supervisor owns a gate on the bus. While it is closed, frames that
//! originate at the ADPU and carry an actuator-command identifier are
//! discarded at delivery time and recorded as drops. Everything else
//! (feedback, handshake, supervisor broadcasts) always passes.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Millis;

/// Largest standard (11-bit) identifier plus one.
pub const CAN_ID_LIMIT: u16 = 0x800;
/// Classic CAN payload limit.
pub const CAN_MAX_DLEN: usize = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BusError {
    #[error("identifier {0:#x} does not fit in 11 bits")]
    InvalidId(u16),
    #[error("payload of {0} bytes exceeds the 8-byte limit")]
    Oversize(usize),
}

/// Node on the bus that put a frame on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Adpu,
    Plc,
    ActuatorController,
    Sensor,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Origin::Adpu => "adpu",
            Origin::Plc => "plc",
            Origin::ActuatorController => "actuator_controller",
            Origin::Sensor => "sensor",
        };
        f.write_str(s)
    }
}

/// Identifier assignment for every message on the segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdMap {
    pub supervisor_state: u16,
    pub control_request: u16,
    pub control_confirm: u16,
    pub traction_setpoint: u16,
    pub steering_setpoint: u16,
    pub arm_command: u16,
    pub traction_feedback: u16,
    pub steering_feedback: u16,
    pub arm_feedback: u16,
}

impl Default for IdMap {
    fn default() -> Self {
        Self {
            supervisor_state: 0x080,
            control_request: 0x090,
            control_confirm: 0x091,
            traction_setpoint: 0x100,
            steering_setpoint: 0x110,
            arm_command: 0x120,
            traction_feedback: 0x200,
            steering_feedback: 0x210,
            arm_feedback: 0x220,
        }
    }
}

impl IdMap {
    /// Identifiers that command an actuator and are therefore subject to the gate.
    pub fn is_actuator_command(&self, id: u16) -> bool {
        id == self.traction_setpoint || id == self.steering_setpoint || id == self.arm_command
    }

    pub fn is_feedback(&self, id: u16) -> bool {
        id == self.traction_feedback || id == self.steering_feedback || id == self.arm_feedback
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanFrame {
    pub id: u16,
    pub data: Vec<u8>,
    pub origin: Origin,
    pub t_submit: Millis,
    pub t_deliver: Millis,
}

impl CanFrame {
    /// Builds an unscheduled frame; timestamps are assigned by [`CanBus::submit`].
    pub fn new(id: u16, data: &[u8], origin: Origin) -> Result<Self, BusError> {
        let frame = Self {
            id,
            data: data.to_vec(),
            origin,
            t_submit: 0,
            t_deliver: 0,
        };
        frame.validate()?;
        Ok(frame)
    }

    pub fn dlc(&self) -> usize {
        self.data.len()
    }

    pub fn validate(&self) -> Result<(), BusError> {
        if self.id >= CAN_ID_LIMIT {
            return Err(BusError::InvalidId(self.id));
        }
        if self.data.len() > CAN_MAX_DLEN {
            return Err(BusError::Oversize(self.data.len()));
        }
        Ok(())
    }

    /// Payload as lowercase hex, used in the event log.
    pub fn data_hex(&self) -> String {
        self.data.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BusConfig {
    pub base_latency: Millis,
    pub jitter_max: Millis,
    pub seed: u64,
}

impl Default for BusConfig {
    fn default() -> Self {
        Self {
            base_latency: 1,
            jitter_max: 1,
            seed: 42,
        }
    }
}

#[derive(Debug)]
struct Pending {
    t_deliver: Millis,
    id: u16,
    seq: u64,
    frame: CanFrame,
}

impl Pending {
    fn key(&self) -> (Millis, u16, u64) {
        (self.t_deliver, self.id, self.seq)
    }
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl Eq for Pending {}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Pending {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key().cmp(&other.key())
    }
}

pub struct CanBus {
    config: BusConfig,
    ids: IdMap,
    rng: ChaCha8Rng,
    queue: BinaryHeap<Reverse<Pending>>,
    seq: u64,
    gate_open: bool,
    dropped: Vec<CanFrame>,
}

impl CanBus {
    pub fn new(config: BusConfig, ids: IdMap) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            ids,
            queue: BinaryHeap::new(),
            seq: 0,
            gate_open: false,
            dropped: Vec::new(),
        }
    }

    pub fn config(&self) -> &BusConfig {
        &self.config
    }

    pub fn ids(&self) -> &IdMap {
        &self.ids
    }

    pub fn gate_open(&self) -> bool {
        self.gate_open
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    /// Schedules a frame and returns it with its timestamps filled in.
    pub fn submit(&mut self, mut frame: CanFrame, now: Millis) -> Result<CanFrame, BusError> {
        frame.validate()?;
        let jitter = if self.config.jitter_max > 0 {
            self.rng.gen_range(0..=self.config.jitter_max)
        } else {
            0
        };
        frame.t_submit = now;
        frame.t_deliver = now + self.config.base_latency + jitter;
        self.queue.push(Reverse(Pending {
            t_deliver: frame.t_deliver,
            id: frame.id,
            seq: self.seq,
            frame: frame.clone(),
        }));
        self.seq += 1;
        Ok(frame)
    }

    /// Pops every frame due at or before `now`, in arbitration order.
    /// Gated frames are diverted to the drop list (see [`CanBus::drain_dropped`]).
    pub fn deliver_due(&mut self, now: Millis) -> Vec<CanFrame> {
        let mut out = Vec::new();
        while let Some(Reverse(head)) = self.queue.peek() {
            if head.t_deliver > now {
                break;
            }
            let Reverse(pending) = self.queue.pop().expect("peeked");
            let frame = pending.frame;
            if self.is_gated(&frame) {
                log::debug!("gate closed, dropping {:#05x} from {}", frame.id, frame.origin);
                self.dropped.push(frame);
            } else {
                out.push(frame);
            }
        }
        out
    }

    pub fn set_gate(&mut self, open: bool) {
        self.gate_open = open;
    }

    /// Frames discarded by the gate since the last call.
    pub fn drain_dropped(&mut self) -> Vec<CanFrame> {
        std::mem::take(&mut self.dropped)
    }

    fn is_gated(&self, frame: &CanFrame) -> bool {
        !self.gate_open && frame.origin == Origin::Adpu && self.ids.is_actuator_command(frame.id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_jitter() -> BusConfig {
        BusConfig {
            base_latency: 1,
            jitter_max: 0,
            seed: 42,
        }
    }

    fn frame(id: u16, origin: Origin) -> CanFrame {
        CanFrame::new(id, &[1, 2], origin).unwrap()
    }

    #[test]
    fn lower_id_wins_same_tick() {
        let mut bus = CanBus::new(no_jitter(), IdMap::default());
        bus.submit(frame(0x100, Origin::Plc), 0).unwrap();
        bus.submit(frame(0x090, Origin::Plc), 0).unwrap();
        let ids: Vec<u16> = bus.deliver_due(1).iter().map(|f| f.id).collect();
        assert_eq!(ids, vec![0x090, 0x100]);
    }

    #[test]
    fn equal_ids_keep_submission_order() {
        let mut bus = CanBus::new(no_jitter(), IdMap::default());
        let a = CanFrame::new(0x200, &[1], Origin::Sensor).unwrap();
        let b = CanFrame::new(0x200, &[2], Origin::Sensor).unwrap();
        bus.submit(a, 3).unwrap();
        bus.submit(b, 3).unwrap();
        let out = bus.deliver_due(4);
        assert_eq!(out[0].data, vec![1]);
        assert_eq!(out[1].data, vec![2]);
    }

    #[test]
    fn latency_without_jitter() {
        let mut bus = CanBus::new(no_jitter(), IdMap::default());
        let f = bus.submit(frame(0x100, Origin::Plc), 5).unwrap();
        assert_eq!(f.t_deliver, 6);
        assert!(bus.deliver_due(5).is_empty());
        assert_eq!(bus.deliver_due(6).len(), 1);
    }

    #[test]
    fn oversize_and_bad_id_rejected() {
        assert_eq!(CanFrame::new(0x100, &[0; 9], Origin::Adpu), Err(BusError::Oversize(9)));
        assert_eq!(CanFrame::new(0x800, &[], Origin::Adpu), Err(BusError::InvalidId(0x800)));
        let mut bus = CanBus::new(no_jitter(), IdMap::default());
        let raw = CanFrame {
            id: 0x100,
            data: vec![0; 12],
            origin: Origin::Adpu,
            t_submit: 0,
            t_deliver: 0,
        };
        assert_eq!(bus.submit(raw, 0), Err(BusError::Oversize(12)));
        assert_eq!(bus.pending(), 0);
    }

    #[test]
    fn seeded_jitter_replays() {
        let cfg = BusConfig {
            base_latency: 1,
            jitter_max: 1,
            seed: 42,
        };
        let run = || {
            let mut bus = CanBus::new(cfg, IdMap::default());
            (0..200)
                .map(|t| bus.submit(frame(0x100, Origin::Plc), t).unwrap().t_deliver)
                .collect::<Vec<_>>()
        };
        let first = run();
        assert_eq!(first, run());
        // both jitter values actually occur
        assert!(first.iter().enumerate().any(|(t, d)| *d == t as u64 + 1));
        assert!(first.iter().enumerate().any(|(t, d)| *d == t as u64 + 2));
    }

    #[test]
    fn closed_gate_drops_adpu_setpoints_only() {
        let mut bus = CanBus::new(no_jitter(), IdMap::default());
        bus.submit(frame(0x100, Origin::Adpu), 0).unwrap();
        bus.submit(frame(0x200, Origin::ActuatorController), 0).unwrap();
        bus.submit(frame(0x091, Origin::Adpu), 0).unwrap();
        let out: Vec<u16> = bus.deliver_due(1).iter().map(|f| f.id).collect();
        assert_eq!(out, vec![0x091, 0x200]);
        let dropped = bus.drain_dropped();
        assert_eq!(dropped.len(), 1);
        assert_eq!(dropped[0].id, 0x100);
        assert!(bus.drain_dropped().is_empty());
    }

    #[test]
    fn open_gate_delivers_in_id_order() {
        let mut bus = CanBus::new(no_jitter(), IdMap::default());
        bus.set_gate(true);
        bus.submit(frame(0x200, Origin::ActuatorController), 0).unwrap();
        bus.submit(frame(0x100, Origin::Adpu), 0).unwrap();
        let out: Vec<u16> = bus.deliver_due(1).iter().map(|f| f.id).collect();
        assert_eq!(out, vec![0x100, 0x200]);
    }

    #[test]
    fn gate_last_write_wins() {
        let mut bus = CanBus::new(no_jitter(), IdMap::default());
        bus.submit(frame(0x110, Origin::Adpu), 0).unwrap();
        bus.set_gate(true);
        bus.set_gate(false);
        assert!(bus.deliver_due(1).is_empty());
        bus.submit(frame(0x110, Origin::Adpu), 1).unwrap();
        bus.set_gate(false);
        bus.set_gate(true);
        assert_eq!(bus.deliver_due(2).len(), 1);
    }
}
