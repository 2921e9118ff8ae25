//! Base-station link: rate-capped telemetry publishing, the operator command
//! listener, and a WebSocket bridge that turns packets into JSON for the UI.
//!
//! Socket work happens on dedicated threads; the executive only exchanges
//! packets with them through channels, so a dead link never stalls the sim.

pub mod wire;

use std::io;
use std::net::{SocketAddr, TcpListener, UdpSocket};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use wire::{
    CarSelector, CommandKind, DecodeError, OperatorCommand, TelemetryPacket, COMMAND_LEN, TELEMETRY_LEN,
};

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("bandwidth cap {cap} B/s is below one {TELEMETRY_LEN}-byte packet per second")]
    CapTooLow { cap: f64 },
    #[error("rate must be positive, got {0}")]
    BadRate(f64),
    #[error("socket: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PublisherConfig {
    pub max_rate_hz: f64,
    pub cap_bytes_per_s: f64,
}

impl Default for PublisherConfig {
    fn default() -> Self {
        PublisherConfig {
            max_rate_hz: 10.0,
            cap_bytes_per_s: 1000.0,
        }
    }
}

/// Snapshots are offered at 100 Hz; emission periods are multiples of 10 ms.
pub const SNAPSHOT_PERIOD_MS: u64 = 10;

/// Downsamples the snapshot stream to the highest rate that fits the cap.
#[derive(Debug, Clone)]
pub struct Publisher {
    period_ms: u64,
    next_seq: u32,
}

impl Publisher {
    pub fn new(cfg: PublisherConfig) -> Result<Self, TelemetryError> {
        if !(cfg.max_rate_hz > 0.0) {
            return Err(TelemetryError::BadRate(cfg.max_rate_hz));
        }
        if !(cfg.cap_bytes_per_s >= TELEMETRY_LEN as f64) {
            return Err(TelemetryError::CapTooLow {
                cap: cfg.cap_bytes_per_s,
            });
        }
        let round_up = |ms: f64| -> u64 {
            let ms = ms.ceil() as u64;
            ms.div_ceil(SNAPSHOT_PERIOD_MS) * SNAPSHOT_PERIOD_MS
        };
        let by_rate = round_up(1000.0 / cfg.max_rate_hz - 1e-9);
        // any 1 s window holds ceil(1000 / period) packets, so size by whole packets
        let per_second = (cfg.cap_bytes_per_s / TELEMETRY_LEN as f64 + 1e-9).floor();
        let by_cap = round_up(1000.0 / per_second - 1e-9);
        Ok(Publisher {
            period_ms: by_rate.max(by_cap).max(SNAPSHOT_PERIOD_MS),
            next_seq: 0,
        })
    }

    pub fn period_ms(&self) -> u64 {
        self.period_ms
    }

    pub fn rate_hz(&self) -> f64 {
        1000.0 / self.period_ms as f64
    }

    /// Returns a packet with the next sequence number when `now_ms` is an emission instant.
    pub fn offer(&mut self, now_ms: u64, build: impl FnOnce(u32) -> TelemetryPacket) -> Option<TelemetryPacket> {
        if !now_ms.is_multiple_of(self.period_ms) {
            return None;
        }
        let seq = self.next_seq;
        self.next_seq = self.next_seq.wrapping_add(1);
        Some(build(seq))
    }
}

/// Fire-and-forget UDP sender on its own thread.
pub struct UdpTelemetrySender {
    tx: Option<Sender<TelemetryPacket>>,
    failed: Arc<AtomicBool>,
    sent: Arc<AtomicU64>,
    handle: Option<JoinHandle<()>>,
}

impl UdpTelemetrySender {
    pub fn spawn(target: SocketAddr) -> Result<Self, TelemetryError> {
        let socket = UdpSocket::bind(("0.0.0.0", 0))?;
        let (tx, rx) = mpsc::channel::<TelemetryPacket>();
        let failed = Arc::new(AtomicBool::new(false));
        let sent = Arc::new(AtomicU64::new(0));
        let (f2, s2) = (failed.clone(), sent.clone());
        let handle = std::thread::Builder::new()
            .name("telemetry-tx".into())
            .spawn(move || {
                for pkt in rx {
                    match socket.send_to(&pkt.encode(), target) {
                        Ok(_) => {
                            s2.fetch_add(1, Ordering::Relaxed);
                        }
                        Err(e) => {
                            log::warn!("telemetry send failed: {e}");
                            f2.store(true, Ordering::Relaxed);
                        }
                    }
                }
            })?;
        Ok(UdpTelemetrySender {
            tx: Some(tx),
            failed,
            sent,
            handle: Some(handle),
        })
    }

    pub fn send(&self, pkt: TelemetryPacket) {
        if let Some(tx) = &self.tx {
            if tx.send(pkt).is_err() {
                self.failed.store(true, Ordering::Relaxed);
            }
        }
    }

    pub fn failed(&self) -> bool {
        self.failed.load(Ordering::Relaxed)
    }

    pub fn sent(&self) -> u64 {
        self.sent.load(Ordering::Relaxed)
    }
}

impl Drop for UdpTelemetrySender {
    fn drop(&mut self) {
        self.tx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Receives operator commands on a UDP port and queues the ones that decode.
pub struct CommandListener {
    rx: Receiver<OperatorCommand>,
    stop: Arc<AtomicBool>,
    rejected: Arc<AtomicU64>,
    local: SocketAddr,
    handle: Option<JoinHandle<()>>,
}

impl CommandListener {
    pub fn bind(addr: SocketAddr) -> Result<Self, TelemetryError> {
        let socket = UdpSocket::bind(addr)?;
        socket.set_read_timeout(Some(Duration::from_millis(50)))?;
        let local = socket.local_addr()?;
        let (tx, rx) = mpsc::channel();
        let stop = Arc::new(AtomicBool::new(false));
        let rejected = Arc::new(AtomicU64::new(0));
        let (stop2, rej2) = (stop.clone(), rejected.clone());
        let handle = std::thread::Builder::new()
            .name("command-rx".into())
            .spawn(move || {
                let mut buf = [0u8; 256];
                while !stop2.load(Ordering::Relaxed) {
                    match socket.recv_from(&mut buf) {
                        Ok((n, _)) => match OperatorCommand::decode(&buf[..n]) {
                            Ok(cmd) => {
                                if tx.send(cmd).is_err() {
                                    return;
                                }
                            }
                            Err(e) => {
                                log::warn!("dropped operator command: {e}");
                                rej2.fetch_add(1, Ordering::Relaxed);
                            }
                        },
                        Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
                        Err(e) => {
                            log::warn!("command socket error: {e}");
                            return;
                        }
                    }
                }
            })?;
        Ok(CommandListener {
            rx,
            stop,
            rejected,
            local,
            handle: Some(handle),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local
    }

    pub fn rejected(&self) -> u64 {
        self.rejected.load(Ordering::Relaxed)
    }

    /// Commands received since the last call, in arrival order.
    pub fn drain(&self) -> Vec<OperatorCommand> {
        self.rx.try_iter().collect()
    }

    /// Blocks up to `timeout` for one command.
    pub fn recv_timeout(&self, timeout: Duration) -> Option<OperatorCommand> {
        self.rx.recv_timeout(timeout).ok()
    }
}

impl Drop for CommandListener {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Keeps only commands newer than the last applied sequence number.
#[derive(Debug, Clone, Default)]
pub struct CommandSequencer {
    last: Option<u32>,
}

impl CommandSequencer {
    pub fn accept(&mut self, cmd: &OperatorCommand) -> bool {
        if self.last.is_some_and(|l| cmd.seq <= l) {
            return false;
        }
        self.last = Some(cmd.seq);
        true
    }
}

#[derive(Serialize)]
struct BridgeTelemetry<'a> {
    #[serde(rename = "type")]
    kind: &'static str,
    #[serde(flatten)]
    packet: &'a TelemetryPacket,
}

/// JSON object the bridge pushes for each telemetry packet.
pub fn telemetry_json(p: &TelemetryPacket) -> String {
    serde_json::to_string(&BridgeTelemetry {
        kind: "telemetry",
        packet: p,
    })
    .expect("packet serializes")
}

/// WebSocket bridge: decoded telemetry out as JSON, JSON commands in as
/// binary packets sent to the stack's command port.
pub struct Bridge {
    stop: Arc<AtomicBool>,
    ws_addr: SocketAddr,
    udp_addr: SocketAddr,
    handles: Vec<JoinHandle<()>>,
}

impl Bridge {
    pub fn spawn(ws_addr: SocketAddr, telemetry_addr: SocketAddr, command_target: SocketAddr) -> Result<Self, TelemetryError> {
        let stop = Arc::new(AtomicBool::new(false));
        let clients: Arc<Mutex<Vec<Sender<String>>>> = Arc::new(Mutex::new(Vec::new()));

        let udp = UdpSocket::bind(telemetry_addr)?;
        udp.set_read_timeout(Some(Duration::from_millis(50)))?;
        let udp_addr = udp.local_addr()?;
        let listener = TcpListener::bind(ws_addr)?;
        listener.set_nonblocking(true)?;
        let ws_addr = listener.local_addr()?;
        let cmd_socket = Arc::new(UdpSocket::bind(("0.0.0.0", 0))?);

        let mut handles = Vec::new();
        let (stop_rx, clients_rx) = (stop.clone(), clients.clone());
        handles.push(
            std::thread::Builder::new()
                .name("bridge-udp".into())
                .spawn(move || {
                    let mut buf = [0u8; 256];
                    while !stop_rx.load(Ordering::Relaxed) {
                        let Ok((n, _)) = udp.recv_from(&mut buf) else { continue };
                        let Ok(pkt) = TelemetryPacket::decode(&buf[..n]) else { continue };
                        let msg = telemetry_json(&pkt);
                        clients_rx.lock().expect("client list").retain(|c| c.send(msg.clone()).is_ok());
                    }
                })?,
        );

        let stop_acc = stop.clone();
        handles.push(
            std::thread::Builder::new()
                .name("bridge-ws".into())
                .spawn(move || {
                    let mut workers = Vec::new();
                    while !stop_acc.load(Ordering::Relaxed) {
                        match listener.accept() {
                            Ok((stream, _)) => {
                                let (tx, rx) = mpsc::channel();
                                clients.lock().expect("client list").push(tx);
                                let stop_c = stop_acc.clone();
                                let sock = cmd_socket.clone();
                                workers.push(std::thread::spawn(move || {
                                    serve_client(stream, rx, sock, command_target, stop_c)
                                }));
                            }
                            Err(_) => std::thread::sleep(Duration::from_millis(20)),
                        }
                    }
                    for w in workers {
                        let _ = w.join();
                    }
                })?,
        );
        Ok(Bridge {
            stop,
            ws_addr,
            udp_addr,
            handles,
        })
    }

    pub fn ws_addr(&self) -> SocketAddr {
        self.ws_addr
    }

    /// Where the bridge listens for telemetry datagrams.
    pub fn telemetry_addr(&self) -> SocketAddr {
        self.udp_addr
    }
}

impl Drop for Bridge {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

fn serve_client(
    stream: std::net::TcpStream,
    outgoing: Receiver<String>,
    cmd_socket: Arc<UdpSocket>,
    command_target: SocketAddr,
    stop: Arc<AtomicBool>,
) {
    use tungstenite::{Error as WsError, Message};
    if stream.set_nonblocking(false).is_err() {
        return;
    }
    let _ = stream.set_read_timeout(Some(Duration::from_millis(20)));
    let mut ws = match tungstenite::accept(stream) {
        Ok(ws) => ws,
        Err(e) => {
            log::warn!("websocket handshake failed: {e}");
            return;
        }
    };
    while !stop.load(Ordering::Relaxed) {
        for msg in outgoing.try_iter() {
            if ws.send(Message::text(msg)).is_err() {
                return;
            }
        }
        match ws.read() {
            Ok(Message::Text(text)) => match serde_json::from_str::<OperatorCommand>(text.as_str()) {
                Ok(cmd) => {
                    if let Err(e) = cmd_socket.send_to(&cmd.encode(), command_target) {
                        log::warn!("command forward failed: {e}");
                    }
                }
                Err(e) => log::warn!("bad command json: {e}"),
            },
            Ok(Message::Close(_)) => return,
            Ok(_) => {}
            Err(WsError::Io(e)) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(_) => return,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cap_arithmetic() {
        let p = Publisher::new(PublisherConfig {
            max_rate_hz: 100.0,
            cap_bytes_per_s: 10.0 * TELEMETRY_LEN as f64,
        })
        .unwrap();
        assert_eq!(p.period_ms(), 100);
        let p = Publisher::new(PublisherConfig::default()).unwrap();
        assert_eq!(p.period_ms(), 100);
        assert!(Publisher::new(PublisherConfig {
            max_rate_hz: 10.0,
            cap_bytes_per_s: 50.0,
        })
        .is_err());
        let p = Publisher::new(PublisherConfig {
            max_rate_hz: 100.0,
            cap_bytes_per_s: 3.0 * TELEMETRY_LEN as f64,
        })
        .unwrap();
        assert!(p.rate_hz() * TELEMETRY_LEN as f64 <= 3.0 * TELEMETRY_LEN as f64);
    }

    #[test]
    fn sequencer_ignores_replays() {
        let mut s = CommandSequencer::default();
        let c = |seq| OperatorCommand {
            seq,
            kind: CommandKind::EmergencyStop,
        };
        assert!(s.accept(&c(1)));
        assert!(!s.accept(&c(1)));
        assert!(!s.accept(&c(0)));
        assert!(s.accept(&c(5)));
    }
}
