//! Runs the passing scenario against the WebSocket bridge on localhost.
//!
//! A client thread plays the base station: it prints a few telemetry JSON
//! frames, sends a yellow flag as JSON, and watches the flag reach the car.

use std::net::SocketAddr;
use std::time::Duration;

use tungstenite::stream::MaybeTlsStream;
use tungstenite::Message;

use racestack::executive::{TelemetryLink, World};
use racestack::log::{LogRecord, RunLog};
use racestack::scenario::Scenario;
use racestack::telemetry::{Bridge, CommandListener, UdpTelemetrySender};

fn base_station(ws: SocketAddr) -> Result<(usize, bool), Box<tungstenite::Error>> {
    let (mut client, _) = tungstenite::connect(format!("ws://{ws}")).map_err(Box::new)?;
    if let MaybeTlsStream::Plain(s) = client.get_mut() {
        s.set_read_timeout(Some(Duration::from_millis(500))).map_err(|e| Box::new(e.into()))?;
    }
    let (mut frames, mut saw_yellow) = (0usize, false);
    while let Ok(msg) = client.read() {
        let Message::Text(text) = msg else { continue };
        frames += 1;
        if frames <= 3 {
            println!("ws <- {}", text.as_str());
        }
        if frames == 5 {
            let cmd = r#"{"seq":1,"kind":"set_flag","flag":"yellow","car":"all"}"#;
            println!("ws -> {cmd}");
            client.send(Message::text(cmd)).map_err(Box::new)?;
        }
        saw_yellow |= text.as_str().contains(r#""flag":"yellow""#);
    }
    Ok((frames, saw_yellow))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let local: SocketAddr = "127.0.0.1:0".parse()?;
    let listener = CommandListener::bind(local)?;
    let bridge = Bridge::spawn(local, local, listener.local_addr())?;
    println!("bridge on ws://{}, telemetry udp {}", bridge.ws_addr(), bridge.telemetry_addr());

    let client = {
        let ws = bridge.ws_addr();
        std::thread::spawn(move || base_station(ws))
    };
    // give the client time to connect before packets start flowing
    std::thread::sleep(Duration::from_millis(200));

    let sc = Scenario::resolve("passing_competition")?;
    let mut world = World::new(&sc, None, Some(4.0))?;
    world.attach(TelemetryLink {
        sender: Some(UdpTelemetrySender::spawn(bridge.telemetry_addr())?),
        listener: Some(listener),
    });
    let mut log = RunLog::memory();
    let summary = world.run(&mut log, true)?;

    let (frames, saw_yellow) = client.join().expect("client thread")?;
    let applied: Vec<_> = log
        .records()
        .iter()
        .filter_map(|r| match r {
            LogRecord::Command(c) => Some((c.t, c.seq, c.applied)),
            _ => None,
        })
        .collect();
    println!("{} packets published, {frames} JSON frames received", summary.telemetry_packets);
    println!("commands applied by the executive (t, seq, applied): {applied:?}");
    println!("yellow flag visible in telemetry: {saw_yellow}");
    Ok(())
}
