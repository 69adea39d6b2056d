//! Operator socket protocol, version "1".
//!
//! Every message is one JSON object per text frame:
//! `{"kind": ..., "t": <sim ms>, "body": {...}}`.
//!
//! | kind         | direction | body                                              |
//! |--------------|-----------|---------------------------------------------------|
//! | `hello`      | both      | `{"version": "1"}`                                |
//! | `telemetry`  | server    | mode, pose, speed, steering, operator levels, last response |
//! | `transition` | server    | `{"from", "to", "cause"}`                         |
//! | `input`      | client    | `{"channel": "throttle"/"brake"/"steering_torque", "value"}` |
//! | `consent`    | client    | `{"value": 0 or 1}`                               |
//! | `error`      | server    | `{"message"}`                                     |

use agvsim::scenario::EventChannel;
use agvsim::supervisor::{Mode, Transition};
use agvsim::Millis;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const PROTOCOL_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Telemetry,
    Transition,
    Input,
    Consent,
    Hello,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub kind: Kind,
    #[serde(default)]
    pub t: Millis,
    #[serde(default)]
    pub body: Value,
}

impl Message {
    pub fn hello(t: Millis) -> Self {
        Self {
            kind: Kind::Hello,
            t,
            body: json!({ "version": PROTOCOL_VERSION }),
        }
    }

    pub fn error(t: Millis, message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Error,
            t,
            body: json!({ "message": message.into() }),
        }
    }

    pub fn transition(tr: &Transition) -> Self {
        Self {
            kind: Kind::Transition,
            t: tr.t,
            body: json!({ "from": tr.from, "to": tr.to, "cause": tr.cause.label() }),
        }
    }

    pub fn telemetry(t: Millis, body: &Telemetry) -> Self {
        Self {
            kind: Kind::Telemetry,
            t,
            body: serde_json::to_value(body).expect("telemetry serializes"),
        }
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("messages serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub mode: Mode,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub steering_angle: f64,
    pub throttle: f64,
    pub brake: f64,
    pub steering_torque: f64,
    pub consent: u8,
    /// Activation-to-MS time of the most recent override, ms.
    pub last_response_ms: Option<Millis>,
}

/// What a client message asks for.
#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    Hello { version: String },
    Event { channel: EventChannel, value: f64 },
}

/// Validates a client text frame. The error string is sent back verbatim.
pub fn parse_request(text: &str) -> Result<Request, String> {
    let msg: Message = serde_json::from_str(text).map_err(|e| format!("malformed message: {e}"))?;
    let field = |name: &str| msg.body.get(name).cloned();
    match msg.kind {
        Kind::Hello => {
            let version = field("version")
                .and_then(|v| v.as_str().map(str::to_string))
                .ok_or("hello needs a string version")?;
            Ok(Request::Hello { version })
        }
        Kind::Input => {
            let name = field("channel")
                .and_then(|v| v.as_str().map(str::to_string))
                .ok_or("input needs a channel")?;
            let channel = EventChannel::parse(&name)
                .filter(|c| *c != EventChannel::Consent)
                .ok_or_else(|| format!("unknown input channel {name:?}"))?;
            let value = field("value")
                .and_then(|v| v.as_f64())
                .ok_or("input needs a numeric value")?;
            channel.check(value)?;
            Ok(Request::Event { channel, value })
        }
        Kind::Consent => {
            let value = field("value")
                .and_then(|v| v.as_f64())
                .ok_or("consent needs a numeric value")?;
            EventChannel::Consent.check(value)?;
            Ok(Request::Event {
                channel: EventChannel::Consent,
                value,
            })
        }
        other => Err(format!("clients may not send {other:?} messages")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_inputs() {
        assert_eq!(
            parse_request(r#"{"kind":"input","body":{"channel":"throttle","value":0.3}}"#),
            Ok(Request::Event {
                channel: EventChannel::Throttle,
                value: 0.3
            })
        );
        assert_eq!(
            parse_request(r#"{"kind":"consent","t":5,"body":{"value":1}}"#),
            Ok(Request::Event {
                channel: EventChannel::Consent,
                value: 1.0
            })
        );
        assert_eq!(
            parse_request(r#"{"kind":"hello","body":{"version":"1"}}"#),
            Ok(Request::Hello { version: "1".into() })
        );
    }

    #[test]
    fn rejects_bad_messages() {
        for bad in [
            "not json",
            r#"{"kind":"input","body":{"channel":"throttle","value":1.5}}"#,
            r#"{"kind":"input","body":{"channel":"horn","value":1}}"#,
            r#"{"kind":"input","body":{"channel":"consent","value":1}}"#,
            r#"{"kind":"consent","body":{"value":0.5}}"#,
            r#"{"kind":"telemetry","body":{}}"#,
            r#"{"kind":"hello","body":{}}"#,
        ] {
            assert!(parse_request(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn hello_shape() {
        let v: Value = serde_json::from_str(&Message::hello(0).to_text()).unwrap();
        assert_eq!(v, json!({"kind":"hello","t":0,"body":{"version":"1"}}));
    }
}
