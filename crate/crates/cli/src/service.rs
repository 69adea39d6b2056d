//! Live service mode.
//!
//! The simulation thread is the only owner of the engine. It paces ticks
//! against the wall clock (1 simulated ms per real ms, catching up rather
//! than skipping when late) and absorbs operator inputs from a single
//! ordered queue, stamping each with the tick that consumes it. A
//! connection thread speaks the socket protocol to at most one operator.
//! When that operator goes away every manual level and consent is forced
//! to 0 on the next tick.

use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender, TryRecvError};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use agvsim::manual_io::ManualChannel;
use agvsim::scenario::{Engine, EventChannel, Record, ScenarioEvent, ScenarioScript};
use agvsim::supervisor::{Cause, Mode, Transition};
use agvsim::Millis;
use tungstenite::{Message as WsMessage, WebSocket};

use crate::config::ServiceConfig;
use crate::protocol::{parse_request, Message, Request, Telemetry, PROTOCOL_VERSION};

/// Events applied when the operator link drops.
pub const FAIL_SAFE: [(EventChannel, f64); 4] = [
    (EventChannel::Throttle, 0.0),
    (EventChannel::Brake, 0.0),
    (EventChannel::SteeringTorque, 0.0),
    (EventChannel::Consent, 0.0),
];

/// Engine plus the bookkeeping the live protocol needs.
pub struct LiveSession {
    engine: Engine,
    cfg: ServiceConfig,
    absorbed: Vec<ScenarioEvent>,
    levels: [f64; 4],
    seen: usize,
    pending_activation: Option<Millis>,
    last_response: Option<Millis>,
}

impl LiveSession {
    pub fn new(cfg: &ServiceConfig) -> anyhow::Result<Self> {
        let behavior = cfg.behavior()?;
        let issues = cfg.sim.validate();
        anyhow::ensure!(issues.is_empty(), "{}", issues.join("; "));
        let engine = Engine::new(&cfg.sim, behavior, cfg.seed, "live");
        Ok(Self {
            seen: engine.records().len(),
            engine,
            cfg: cfg.clone(),
            absorbed: Vec::new(),
            levels: [0.0; 4],
            pending_activation: None,
            last_response: None,
        })
    }

    pub fn now(&self) -> Millis {
        self.engine.now()
    }

    pub fn mode(&self) -> Mode {
        self.engine.mode()
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn absorbed(&self) -> &[ScenarioEvent] {
        &self.absorbed
    }

    pub fn last_response(&self) -> Option<Millis> {
        self.last_response
    }

    /// Runs one tick with the given operator inputs and returns the messages
    /// to broadcast.
    pub fn tick(&mut self, inputs: &[(EventChannel, f64)]) -> Vec<Message> {
        let t = self.engine.now();
        let events: Vec<ScenarioEvent> = inputs
            .iter()
            .map(|&(channel, value)| ScenarioEvent { t, channel, value })
            .collect();
        for ev in &events {
            let slot = match ev.channel {
                EventChannel::Throttle => 0,
                EventChannel::Brake => 1,
                EventChannel::SteeringTorque => 2,
                EventChannel::Consent => 3,
            };
            self.levels[slot] = ev.value;
        }
        self.absorbed.extend_from_slice(&events);
        let mode_before = self.engine.mode();
        self.engine.step(&events);

        let mut out = Vec::new();
        for r in &self.engine.records()[self.seen..] {
            match r.body {
                Record::Engage { activation, .. } if mode_before == Mode::Autonomous => {
                    self.pending_activation = Some(self.pending_activation.map_or(activation, |a| a.min(activation)));
                }
                Record::Transition { from, to, cause } => {
                    let tr = Transition {
                        from,
                        to,
                        cause,
                        t: r.t,
                    };
                    log::info!("{}", tr.log_line());
                    if to == Mode::Manual && cause == Cause::ManualEngagement {
                        if let Some(a) = self.pending_activation.take() {
                            self.last_response = Some(r.t - a);
                        }
                    }
                    out.push(Message::transition(&tr));
                }
                _ => {}
            }
        }
        self.seen = self.engine.records().len();

        if t.is_multiple_of(self.cfg.sim.telemetry_period) {
            out.push(Message::telemetry(t, &self.telemetry()));
        }
        out
    }

    pub fn telemetry(&self) -> Telemetry {
        let v = self.engine.vehicle();
        Telemetry {
            mode: self.engine.mode(),
            x: v.x,
            y: v.y,
            heading: v.heading,
            speed: v.speed,
            steering_angle: v.steering_angle,
            throttle: self.levels[ManualChannel::Throttle.index()],
            brake: self.levels[ManualChannel::Brake.index()],
            steering_torque: self.levels[2],
            consent: self.levels[3] as u8,
            last_response_ms: self.last_response,
        }
    }

    pub fn transitions(&self) -> Vec<Transition> {
        self.engine
            .records()
            .iter()
            .filter_map(|r| match r.body {
                Record::Transition { from, to, cause } => Some(Transition {
                    from,
                    to,
                    cause,
                    t: r.t,
                }),
                _ => None,
            })
            .collect()
    }

    /// The absorbed inputs as a batch script covering every tick run so far.
    pub fn replay_script(&self) -> ScenarioScript {
        let mut script = ScenarioScript::new("live-replay", self.now().saturating_sub(1), self.absorbed.clone());
        script.seed = self.cfg.seed;
        script.behavior = self.cfg.behavior.clone();
        script.session = Some("live".into());
        script.overrides = self.cfg.sim.clone();
        script
    }
}

enum Control {
    Attach(Sender<Message>),
    Detach,
    Input(EventChannel, f64),
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(self) {
        self.stop.store(true, Ordering::SeqCst);
        for t in self.threads {
            let _ = t.join();
        }
    }

    /// Blocks until the server stops.
    pub fn wait(self) {
        for t in self.threads {
            let _ = t.join();
        }
    }
}

/// Binds `addr` and starts the simulation and acceptor threads.
pub fn start(cfg: ServiceConfig, addr: &str) -> anyhow::Result<ServerHandle> {
    let mut session = LiveSession::new(&cfg)?;
    let listener = TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let local = listener.local_addr()?;

    let stop = Arc::new(AtomicBool::new(false));
    let clock = Arc::new(AtomicU64::new(0));
    let (ctrl_tx, ctrl_rx) = mpsc::channel::<Control>();

    let sim = {
        let stop = stop.clone();
        let clock = clock.clone();
        thread::Builder::new()
            .name("sim".into())
            .spawn(move || sim_loop(&mut session, ctrl_rx, &stop, &clock))?
    };
    let acceptor = {
        let stop = stop.clone();
        thread::Builder::new()
            .name("acceptor".into())
            .spawn(move || accept_loop(listener, ctrl_tx, stop, clock))?
    };
    log::info!("serving on ws://{local}");
    Ok(ServerHandle {
        addr: local,
        stop,
        threads: vec![sim, acceptor],
    })
}

fn sim_loop(session: &mut LiveSession, ctrl: Receiver<Control>, stop: &AtomicBool, clock: &AtomicU64) {
    let start = Instant::now();
    let mut outbox: Option<Sender<Message>> = None;
    let mut queued: Vec<(EventChannel, f64)> = Vec::new();
    while !stop.load(Ordering::SeqCst) {
        loop {
            match ctrl.try_recv() {
                Ok(Control::Attach(tx)) => outbox = Some(tx),
                Ok(Control::Detach) => {
                    outbox = None;
                    queued.extend_from_slice(&FAIL_SAFE);
                }
                Ok(Control::Input(ch, v)) => queued.push((ch, v)),
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => return,
            }
        }
        let target = start.elapsed().as_millis() as Millis;
        while session.now() <= target {
            let msgs = session.tick(&queued);
            queued.clear();
            clock.store(session.now(), Ordering::SeqCst);
            if let Some(tx) = &outbox {
                for m in msgs {
                    if tx.send(m).is_err() {
                        break;
                    }
                }
            }
        }
        thread::sleep(Duration::from_micros(250));
    }
}

fn accept_loop(listener: TcpListener, ctrl: Sender<Control>, stop: Arc<AtomicBool>, clock: Arc<AtomicU64>) {
    let busy = Arc::new(AtomicBool::new(false));
    let mut workers = Vec::new();
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let _ = stream.set_nonblocking(false);
                if busy.swap(true, Ordering::SeqCst) {
                    log::warn!("refusing second operator from {peer}");
                    let now = clock.load(Ordering::SeqCst);
                    workers.push(thread::spawn(move || refuse(stream, now)));
                    continue;
                }
                log::info!("operator connected from {peer}");
                let ctrl = ctrl.clone();
                let (stop, clock, busy) = (stop.clone(), clock.clone(), busy.clone());
                workers.push(thread::spawn(move || {
                    if let Err(e) = serve_operator(stream, &ctrl, &stop, &clock) {
                        log::warn!("operator session ended: {e}");
                    }
                    let _ = ctrl.send(Control::Detach);
                    busy.store(false, Ordering::SeqCst);
                }));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(2)),
            Err(e) => {
                log::error!("accept failed: {e}");
                thread::sleep(Duration::from_millis(20));
            }
        }
    }
    for w in workers {
        let _ = w.join();
    }
}

fn send(ws: &mut WebSocket<TcpStream>, msg: &Message) -> tungstenite::Result<()> {
    ws.send(WsMessage::Text(msg.to_text().into()))
}

fn refuse(stream: TcpStream, now: Millis) {
    if let Ok(mut ws) = tungstenite::accept(stream) {
        let _ = send(&mut ws, &Message::error(now, "an operator is already connected"));
        let _ = ws.close(None);
        let _ = ws.flush();
    }
}

fn serve_operator(
    stream: TcpStream,
    ctrl: &Sender<Control>,
    stop: &AtomicBool,
    clock: &AtomicU64,
) -> anyhow::Result<()> {
    let mut ws = tungstenite::accept(stream)?;
    ws.get_ref().set_read_timeout(Some(Duration::from_millis(2)))?;
    let (tx, rx) = mpsc::channel();
    send(&mut ws, &Message::hello(clock.load(Ordering::SeqCst)))?;
    ctrl.send(Control::Attach(tx))?;

    while !stop.load(Ordering::SeqCst) {
        match ws.read() {
            Ok(WsMessage::Text(text)) => match parse_request(&text) {
                Ok(Request::Event { channel, value }) => ctrl.send(Control::Input(channel, value))?,
                Ok(Request::Hello { version }) if version == PROTOCOL_VERSION => {}
                Ok(Request::Hello { version }) => {
                    let msg = format!("unsupported protocol version {version:?}, server speaks {PROTOCOL_VERSION:?}");
                    send(&mut ws, &Message::error(clock.load(Ordering::SeqCst), msg))?;
                }
                Err(e) => send(&mut ws, &Message::error(clock.load(Ordering::SeqCst), e))?,
            },
            Ok(WsMessage::Close(_)) => break,
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => break,
            Err(e) => return Err(e.into()),
        }
        loop {
            match rx.try_recv() {
                Ok(m) => send(&mut ws, &m)?,
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => return Ok(()),
            }
        }
    }
    let _ = ws.close(None);
    let _ = ws.flush();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use agvsim::scenario;

    fn session() -> LiveSession {
        LiveSession::new(&ServiceConfig::default()).unwrap()
    }

    fn run_until(s: &mut LiveSession, t: Millis) -> Vec<Message> {
        let mut out = Vec::new();
        while s.now() < t {
            out.extend(s.tick(&[]));
        }
        out
    }

    #[test]
    fn consent_then_override_reports_response() {
        let mut s = session();
        run_until(&mut s, 100);
        s.tick(&[(EventChannel::Consent, 1.0)]);
        run_until(&mut s, 503);
        assert_eq!(s.mode(), Mode::Autonomous);
        s.tick(&[(EventChannel::Throttle, 0.3)]);
        let msgs = run_until(&mut s, 551);
        assert_eq!(s.mode(), Mode::Manual);
        assert_eq!(s.last_response(), Some(7));
        let tel = msgs
            .iter()
            .rev()
            .find(|m| m.kind == crate::protocol::Kind::Telemetry)
            .unwrap();
        assert_eq!(tel.body["last_response_ms"], 7);
        assert_eq!(tel.body["mode"], "MS");
    }

    #[test]
    fn fail_safe_leaves_autonomy_within_a_cycle() {
        let mut s = session();
        s.tick(&[(EventChannel::Consent, 1.0)]);
        run_until(&mut s, 300);
        assert_eq!(s.mode(), Mode::Autonomous);
        let dropped_at = s.now();
        s.tick(&FAIL_SAFE);
        run_until(&mut s, dropped_at + 11);
        assert_eq!(s.mode(), Mode::Manual);
        let last = *s.transitions().last().unwrap();
        assert_eq!(last.cause, Cause::ConsentRevoked);
        assert!(last.t - dropped_at <= 10);
    }

    #[test]
    fn replay_matches_live_transitions() {
        let mut s = session();
        let plan: &[(Millis, EventChannel, f64)] = &[
            (37, EventChannel::Consent, 1.0),
            (412, EventChannel::SteeringTorque, -2.0),
            (640, EventChannel::SteeringTorque, 0.0),
            (901, EventChannel::Brake, 0.6),
            (905, EventChannel::Throttle, 0.2),
            (1300, EventChannel::Brake, 0.0),
            (1301, EventChannel::Throttle, 0.0),
            (1777, EventChannel::Consent, 0.0),
        ];
        for &(t, ch, v) in plan {
            run_until(&mut s, t);
            s.tick(&[(ch, v)]);
        }
        run_until(&mut s, 2000);
        let replay = scenario::run(&s.replay_script()).unwrap();
        let batch: Vec<Transition> = replay.transitions().collect();
        assert_eq!(batch, s.transitions());
        assert!(batch.len() >= 6);
    }
}
