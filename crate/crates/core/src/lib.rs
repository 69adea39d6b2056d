//! Deterministic simulation of an industrial ground vehicle retrofitted for
//! autonomy with manual override.
//!
//! A PLC-role [`supervisor`] arbitrates between the operator and the
//! autonomous driving processing unit ([`adpu`]) over a virtual CAN bus
//! ([`canbus`]). Manual commands reach the [`plant`] directly; the
//! [`scenario`] engine scripts operator maneuvers and [`metrics`] turns the
//! resulting event logs into override response-time distributions.

pub mod adpu;
pub mod canbus;
pub mod codec;
pub mod manual_io;
pub mod metrics;
pub mod plant;
pub mod scenario;
pub mod supervisor;

/// Simulation time in milliseconds.
pub type Millis = u64;
