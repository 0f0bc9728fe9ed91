//! Websocket bridge between a training run and a browser cockpit.
//!
//! Messages are JSON text frames of the form `{"type": ..., "payload": ...}`
//! with `type` one of `frame`, `input`, `control` or `error`.
//!
//! The training thread and the network thread share exactly two single-slot
//! mailboxes: the operator state (latest input plus the pause flag), written
//! by the network thread and read once per env step, and the latest frame,
//! written once per env step and pushed to every client. A client that falls
//! behind skips straight to the newest frame.

use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tungstenite::{Message, WebSocket};

use crate::env::Env;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObstacleMsg {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadMsg {
    pub centerline: Vec<[f64; 2]>,
    pub half_width: f64,
}

/// HUD flags shown by the cockpit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HudFlags {
    pub speed: f64,
    pub takeover: bool,
    pub total_step: u64,
    /// Wall-clock seconds since the run started.
    pub total_time: f64,
    pub takeover_rate: f64,
    pub reward_policy: bool,
}

/// Snapshot of the scene after one env step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMsg {
    pub step: u64,
    pub stage: u8,
    pub ego: Pose,
    pub speed: f64,
    pub obstacles: Vec<ObstacleMsg>,
    pub checkpoints: Vec<[f64; 2]>,
    pub lidar: Vec<f64>,
    pub road: RoadMsg,
    pub flags: HudFlags,
}

impl FrameMsg {
    pub fn capture(env: &Env, step: u64, stage: u8, flags: HudFlags) -> FrameMsg {
        let sc = env.scenario();
        let e = env.ego();
        FrameMsg {
            step,
            stage,
            ego: Pose {
                x: e.position[0],
                y: e.position[1],
                heading: e.heading,
            },
            speed: e.speed,
            obstacles: env
                .obstacle_discs()
                .into_iter()
                .map(|(c, r)| ObstacleMsg { x: c[0], y: c[1], radius: r })
                .collect(),
            checkpoints: sc.checkpoints.clone(),
            lidar: env.lidar(),
            road: RoadMsg {
                centerline: sc.centerline.clone(),
                half_width: sc.lane_half_width,
            },
            flags,
        }
    }
}

/// Operator control input. Axes are clamped to `[-1, 1]` on receipt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputMsg {
    pub takeover: bool,
    pub accel: f64,
    pub steer: f64,
    #[serde(default)]
    pub timestamp: f64,
}

impl InputMsg {
    pub fn sanitized(self) -> Result<InputMsg, String> {
        if !(self.accel.is_finite() && self.steer.is_finite() && self.timestamp.is_finite()) {
            return Err("input values must be finite".into());
        }
        Ok(InputMsg {
            accel: self.accel.clamp(-1.0, 1.0),
            steer: self.steer.clamp(-1.0, 1.0),
            ..self
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlCommand {
    Pause,
    Resume,
    StageInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlMsg {
    pub command: ControlCommand,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_step: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paused: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMsg {
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "lowercase")]
pub enum Envelope {
    Frame(FrameMsg),
    Input(InputMsg),
    Control(ControlMsg),
    Error(ErrorMsg),
}

impl Envelope {
    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("envelope serializes")
    }
}

/// Single-slot mailbox: writers overwrite, readers see the latest value.
#[derive(Debug, Default)]
pub struct Mailbox<T> {
    slot: Mutex<(u64, T)>,
}

impl<T: Clone> Mailbox<T> {
    pub fn new(value: T) -> Self {
        Self {
            slot: Mutex::new((0, value)),
        }
    }

    pub fn put(&self, value: T) {
        let mut g = self.slot.lock().unwrap_or_else(|p| p.into_inner());
        g.0 += 1;
        g.1 = value;
    }

    pub fn update(&self, f: impl FnOnce(&mut T)) {
        let mut g = self.slot.lock().unwrap_or_else(|p| p.into_inner());
        g.0 += 1;
        f(&mut g.1);
    }

    /// Current sequence number and value.
    pub fn get(&self) -> (u64, T) {
        self.slot.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }
}

/// What the operator currently wants.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OperatorState {
    pub input: Option<InputMsg>,
    pub paused: bool,
}

impl OperatorState {
    /// Takeover action while the operator holds control.
    pub fn takeover(&self) -> Option<[f64; 2]> {
        self.input.filter(|i| i.takeover).map(|i| [i.accel, i.steer])
    }
}

#[derive(Debug, Clone, Default)]
pub struct FrameSlot {
    pub text: Option<Arc<str>>,
    pub stage: u8,
    pub total_step: u64,
}

#[derive(Debug, Default)]
struct Shared {
    operator: Mailbox<OperatorState>,
    frame: Mailbox<FrameSlot>,
    stop: AtomicBool,
}

/// Training-side handle.
#[derive(Debug, Clone)]
pub struct BridgeLink {
    shared: Arc<Shared>,
}

impl BridgeLink {
    /// A link with no network attached, used by tests and offline drivers.
    pub fn detached() -> Self {
        Self {
            shared: Arc::new(Shared::default()),
        }
    }

    pub fn operator(&self) -> OperatorState {
        self.shared.operator.get().1
    }

    /// Applies an input exactly as if it arrived over the network.
    pub fn apply_input(&self, msg: InputMsg) -> Result<(), String> {
        let msg = msg.sanitized()?;
        self.shared.operator.update(|s| s.input = Some(msg));
        Ok(())
    }

    pub fn set_paused(&self, paused: bool) {
        self.shared.operator.update(|s| s.paused = paused);
    }

    pub fn publish(&self, frame: &FrameMsg) {
        let text: Arc<str> = Envelope::Frame(frame.clone()).to_text().into();
        self.shared.frame.put(FrameSlot {
            text: Some(text),
            stage: frame.stage,
            total_step: frame.step,
        });
    }

    pub fn latest_frame(&self) -> (u64, FrameSlot) {
        self.shared.frame.get()
    }

    pub fn stopped(&self) -> bool {
        self.shared.stop.load(Ordering::Relaxed)
    }
}

/// Reply for one inbound text message, after applying its effect.
fn handle_text(link: &BridgeLink, text: &str) -> Option<Envelope> {
    let env: Envelope = match serde_json::from_str(text) {
        Ok(e) => e,
        Err(e) => {
            return Some(Envelope::Error(ErrorMsg {
                message: format!("malformed message: {e}"),
            }))
        }
    };
    match env {
        Envelope::Input(msg) => link.apply_input(msg).err().map(|message| Envelope::Error(ErrorMsg { message })),
        Envelope::Control(c) => match c.command {
            ControlCommand::Pause | ControlCommand::Resume => {
                link.set_paused(c.command == ControlCommand::Pause);
                None
            }
            ControlCommand::StageInfo => {
                let (_, slot) = link.latest_frame();
                Some(Envelope::Control(ControlMsg {
                    command: ControlCommand::StageInfo,
                    stage: Some(slot.stage),
                    total_step: Some(slot.total_step),
                    paused: Some(link.operator().paused),
                }))
            }
        },
        Envelope::Frame(_) | Envelope::Error(_) => Some(Envelope::Error(ErrorMsg {
            message: "clients may only send input or control messages".into(),
        })),
    }
}

struct Client {
    ws: WebSocket<TcpStream>,
    /// The last write did not drain; hold new frames until it does.
    backlog: bool,
}

fn would_block(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if io.kind() == ErrorKind::WouldBlock)
}

/// Listening bridge running on its own thread.
pub struct BridgeServer {
    addr: SocketAddr,
    link: BridgeLink,
    thread: Option<JoinHandle<()>>,
}

impl BridgeServer {
    pub fn start(addr: impl ToSocketAddrs) -> std::io::Result<BridgeServer> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let link = BridgeLink::detached();
        let thread_link = link.clone();
        let thread = std::thread::Builder::new().name("bridge".into()).spawn(move || serve(listener, thread_link))?;
        log::info!("bridge listening on ws://{addr}");
        Ok(BridgeServer {
            addr,
            link,
            thread: Some(thread),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn link(&self) -> BridgeLink {
        self.link.clone()
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.link.shared.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for BridgeServer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn serve(listener: TcpListener, link: BridgeLink) {
    let mut clients: Vec<Client> = Vec::new();
    let mut sent_seq = 0u64;
    while !link.stopped() {
        let mut busy = false;
        match listener.accept() {
            Ok((stream, peer)) => {
                busy = true;
                let accepted = stream
                    .set_nonblocking(false)
                    .and_then(|_| stream.set_read_timeout(Some(Duration::from_secs(2))))
                    .map_err(|e| e.to_string())
                    .and_then(|_| tungstenite::accept(stream).map_err(|e| e.to_string()));
                match accepted {
                    Ok(ws) => {
                        if ws.get_ref().set_nonblocking(true).is_ok() {
                            log::info!("cockpit connected from {peer}");
                            clients.push(Client { ws, backlog: false });
                        }
                    }
                    Err(e) => log::warn!("handshake with {peer} failed: {e}"),
                }
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => {}
            Err(e) => log::warn!("accept failed: {e}"),
        }

        let (seq, slot) = link.latest_frame();
        let fresh = seq != sent_seq;
        sent_seq = seq;
        let mut dead = Vec::new();
        for (i, c) in clients.iter_mut().enumerate() {
            if c.backlog {
                match c.ws.flush() {
                    Ok(()) => c.backlog = false,
                    Err(e) if would_block(&e) => {}
                    Err(e) => {
                        log::info!("client dropped: {e}");
                        dead.push(i);
                        continue;
                    }
                }
            }
            if fresh && !c.backlog {
                if let Some(text) = &slot.text {
                    busy = true;
                    match c.ws.send(Message::text(text.to_string())) {
                        Ok(()) => {}
                        Err(e) if would_block(&e) => c.backlog = true,
                        Err(e) => {
                            log::info!("client dropped: {e}");
                            dead.push(i);
                            continue;
                        }
                    }
                }
            }
            loop {
                match c.ws.read() {
                    Ok(Message::Text(t)) => {
                        busy = true;
                        if let Some(reply) = handle_text(&link, &t) {
                            if let Err(e) = c.ws.send(Message::text(reply.to_text())) {
                                if would_block(&e) {
                                    c.backlog = true;
                                }
                            }
                        }
                    }
                    Ok(Message::Close(_)) => {
                        dead.push(i);
                        break;
                    }
                    Ok(_) => {}
                    Err(e) if would_block(&e) => break,
                    Err(e) => {
                        log::info!("client dropped: {e}");
                        dead.push(i);
                        break;
                    }
                }
            }
        }
        dead.dedup();
        for i in dead.into_iter().rev() {
            clients.remove(i);
        }
        if !busy {
            std::thread::sleep(Duration::from_millis(2));
        }
    }
    for mut c in clients {
        let _ = c.ws.close(None);
        let _ = c.ws.flush();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn only_latest_input_survives() {
        let link = BridgeLink::detached();
        link.apply_input(InputMsg {
            takeover: true,
            accel: 0.1,
            steer: 0.0,
            timestamp: 1.0,
        })
        .unwrap();
        link.apply_input(InputMsg {
            takeover: true,
            accel: 0.5,
            steer: -0.2,
            timestamp: 2.0,
        })
        .unwrap();
        assert_eq!(link.operator().takeover(), Some([0.5, -0.2]));
    }

    #[test]
    fn input_is_clamped_and_checked() {
        let m = InputMsg {
            takeover: true,
            accel: 3.0,
            steer: -7.0,
            timestamp: 0.0,
        };
        assert_eq!(m.sanitized().unwrap().accel, 1.0);
        assert_eq!(m.sanitized().unwrap().steer, -1.0);
        assert!(InputMsg { accel: f64::NAN, ..m }.sanitized().is_err());
    }

    #[test]
    fn malformed_text_gets_error_reply() {
        let link = BridgeLink::detached();
        assert!(matches!(handle_text(&link, "{nope"), Some(Envelope::Error(_))));
        assert!(matches!(handle_text(&link, r#"{"type":"input","payload":{"takeover":true}}"#), Some(Envelope::Error(_))));
        assert!(handle_text(&link, r#"{"type":"control","payload":{"command":"pause"}}"#).is_none());
        assert!(link.operator().paused);
    }

    #[test]
    fn envelope_shape() {
        let t = Envelope::Input(InputMsg {
            takeover: false,
            accel: 0.0,
            steer: 0.0,
            timestamp: 0.0,
        })
        .to_text();
        let v: serde_json::Value = serde_json::from_str(&t).unwrap();
        assert_eq!(v["type"], "input");
        assert_eq!(v["payload"]["takeover"], false);
    }
}
