//! WebSocket bridge over real sockets: telemetry datagrams out as JSON,
//! JSON commands back in as wire packets.

use std::net::{SocketAddr, UdpSocket};
use std::time::{Duration, Instant};

use tungstenite::stream::MaybeTlsStream;
use tungstenite::Message;

use racestack::planner::{Flag, Role};
use racestack::telemetry::{Bridge, CarSelector, CommandKind, CommandListener, OperatorCommand, TelemetryPacket};

fn packet(seq: u32) -> TelemetryPacket {
    TelemetryPacket {
        seq,
        sim_time: 0.1 * seq as f64,
        x: 1.5,
        y: -186.25,
        psi: 0.0,
        speed: 40.0,
        target_speed: 44.7,
        flag: Flag::WavingGreen,
        role: Role::Defender,
        opponent_present: true,
        opponent_x: 20.0,
        opponent_y: -193.75,
        opponent_speed: 45.0,
        health: 0x0fff,
        cte: 0.05,
        steer: -0.01,
        throttle: 0.4,
        brake: 0.0,
    }
}

#[test]
fn bridge_relays_both_directions() {
    let local: SocketAddr = "127.0.0.1:0".parse().unwrap();
    let listener = CommandListener::bind(local).unwrap();
    let bridge = Bridge::spawn(local, local, listener.local_addr()).unwrap();

    let (mut ws, _) = tungstenite::connect(format!("ws://{}", bridge.ws_addr())).unwrap();
    if let MaybeTlsStream::Plain(s) = ws.get_mut() {
        s.set_read_timeout(Some(Duration::from_millis(100))).unwrap();
    }

    // the client registers asynchronously, so keep sending until a frame comes back
    let udp = UdpSocket::bind(local).unwrap();
    let deadline = Instant::now() + Duration::from_secs(5);
    let mut json = None;
    let mut seq = 0;
    while json.is_none() && Instant::now() < deadline {
        udp.send_to(&packet(seq).encode(), bridge.telemetry_addr()).unwrap();
        // garbage must be dropped without disturbing the stream
        udp.send_to(b"not a packet", bridge.telemetry_addr()).unwrap();
        seq += 1;
        if let Ok(Message::Text(t)) = ws.read() {
            json = Some(t.as_str().to_owned());
        }
    }
    let v: serde_json::Value = serde_json::from_str(&json.expect("no telemetry frame")).unwrap();
    assert_eq!(v["type"], "telemetry");
    assert_eq!(v["flag"], "waving_green");
    assert_eq!(v["role"], "defender");
    assert_eq!(v["health"], 0x0fff);
    assert!((v["speed"].as_f64().unwrap() - 40.0).abs() < 1e-6);

    ws.send(Message::text(r#"{"seq":5,"kind":"set_flag","flag":"red","car":{"car":1}}"#)).unwrap();
    ws.send(Message::text(r#"{"seq":6,"kind":"launch_rockets"}"#)).unwrap();
    ws.send(Message::text(r#"{"seq":7,"kind":"set_round_speed","speed":49.17}"#)).unwrap();
    let first = listener.recv_timeout(Duration::from_secs(2)).expect("command forwarded");
    assert_eq!(
        first,
        OperatorCommand { seq: 5, kind: CommandKind::SetFlag { flag: Flag::Red, car: CarSelector::Car(1) } }
    );
    let second = listener.recv_timeout(Duration::from_secs(2)).expect("command forwarded");
    assert_eq!(second.seq, 7);
    match second.kind {
        CommandKind::SetRoundSpeed { speed } => assert!((speed - 49.17).abs() < 1e-5),
        k => panic!("unexpected {k:?}"),
    }
}

#[test]
fn listener_counts_corrupt_commands() {
    let local: SocketAddr = "127.0.0.1:0".parse().unwrap();
    let listener = CommandListener::bind(local).unwrap();
    let tx = UdpSocket::bind(local).unwrap();
    let good = OperatorCommand { seq: 1, kind: CommandKind::EmergencyStop }.encode();
    let mut bad = good;
    bad[10] ^= 0x40;
    tx.send_to(&bad, listener.local_addr()).unwrap();
    tx.send_to(&good, listener.local_addr()).unwrap();
    let got = listener.recv_timeout(Duration::from_secs(2)).expect("good command");
    assert_eq!(got.kind, CommandKind::EmergencyStop);
    assert_eq!(listener.rejected(), 1);
}
