use std::fs::File;
use std::io::BufReader;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use racestack::executive::{TelemetryLink, World};
use racestack::log::{read_log, RunLog};
use racestack::metrics::{build_report, write_report, Report};
use racestack::scenario::{Scenario, BUNDLED};
use racestack::telemetry::{Bridge, CommandListener, UdpTelemetrySender};

#[derive(Parser)]
#[command(name = "racestack", version, about = "Two-car oval racing simulator with an autonomy stack")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and write its log and metrics report.
    Run(RunArgs),
    /// Recompute the metrics report from a stored run log.
    Report {
        log: PathBuf,
        /// Report directory; defaults to the log path without its extension plus `_report`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the bundled scenarios.
    List,
    /// Stand-alone WebSocket bridge between UDP telemetry/commands and the UI.
    Bridge {
        #[arg(long, default_value_t = 8765)]
        ui_bridge_port: u16,
        #[arg(long, default_value_t = 47000)]
        telemetry_port: u16,
        #[arg(long, default_value_t = 47001)]
        command_port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    /// Bundled scenario name or path to a scenario file.
    #[arg(long)]
    scenario: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Sim seconds; overrides the scenario.
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long, default_value = "runs")]
    log_dir: PathBuf,
    /// Run as fast as possible instead of pacing against the wall clock.
    #[arg(long)]
    headless: bool,
    /// UDP port telemetry packets are sent to.
    #[arg(long)]
    telemetry_port: Option<u16>,
    /// UDP port operator commands are received on.
    #[arg(long)]
    command_port: Option<u16>,
    /// Serve the WebSocket JSON bridge on this port.
    #[arg(long)]
    ui_bridge_port: Option<u16>,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
}

fn addr(host: &str, port: u16) -> Result<SocketAddr, String> {
    format!("{host}:{port}")
        .parse()
        .map_err(|e| format!("bad address {host}:{port}: {e}"))
}

fn print_report(r: &Report) {
    for b in &r.cte {
        let all = b.get(">10m/s").and_then(|x| x.mean);
        let max = b.get(">10m/s").and_then(|x| x.max);
        if let (Some(m), Some(x)) = (all, max) {
            println!("car {} cte >10m/s: mean {m:.3} m, max {x:.3} m", b.car);
        }
    }
    for g in &r.gg {
        println!(
            "car {} g-g: max |a_lat| {:.2}, max |a_long| {:.2} m/s^2",
            g.car, g.max_abs_lat, g.max_abs_long
        );
    }
    for d in &r.detection {
        println!(
            "car {} {:?} detections: {} mean period {:.1} ms, latency {:.1} ms",
            d.car,
            d.source,
            d.detections,
            d.mean_period * 1000.0,
            d.mean_latency * 1000.0
        );
    }
    for l in &r.localization {
        println!(
            "car {} localization: rmse {:.3} m / {:.4} rad, safe stop {}",
            l.car, l.rmse_position, l.rmse_heading, l.safe_stop
        );
    }
    for p in &r.passes {
        println!("pass t={:.1}s car {} over car {} at {} (gap {:.1} m)", p.t, p.passer, p.passed, p.bracket, p.gap);
    }
}

fn run(args: RunArgs) -> Result<ExitCode, String> {
    let scenario = Scenario::resolve(&args.scenario).map_err(|e| e.to_string())?;
    let mut world = World::new(&scenario, args.seed, args.duration).map_err(|e| e.to_string())?;

    let mut link = TelemetryLink::default();
    let mut _bridge = None;
    let listener = match (args.command_port, args.ui_bridge_port) {
        (Some(p), _) => Some(CommandListener::bind(addr(&args.host, p)?).map_err(|e| e.to_string())?),
        (None, Some(_)) => Some(CommandListener::bind(addr(&args.host, 0)?).map_err(|e| e.to_string())?),
        (None, None) => None,
    };
    let mut telemetry_target = args.telemetry_port.map(|p| addr(&args.host, p)).transpose()?;
    if let Some(ui) = args.ui_bridge_port {
        let cmd = listener.as_ref().map(|l| l.local_addr()).expect("listener bound for the bridge");
        let udp = telemetry_target.unwrap_or(addr(&args.host, 0)?);
        let b = Bridge::spawn(addr(&args.host, ui)?, udp, cmd).map_err(|e| e.to_string())?;
        println!("ui bridge on ws://{}", b.ws_addr());
        telemetry_target = Some(b.telemetry_addr());
        _bridge = Some(b);
    }
    if let Some(t) = telemetry_target {
        link.sender = Some(UdpTelemetrySender::spawn(t).map_err(|e| e.to_string())?);
    }
    if let Some(l) = &listener {
        println!("commands on udp://{}", l.local_addr());
    }
    link.listener = listener;
    world.attach(link);

    std::fs::create_dir_all(&args.log_dir).map_err(|e| e.to_string())?;
    let stem = format!("{}_{}", scenario.name, world.seed);
    let log_path = args.log_dir.join(format!("{stem}.jsonl"));
    let file = File::create(&log_path).map_err(|e| format!("{}: {e}", log_path.display()))?;
    let mut log = RunLog::to_writer(Box::new(std::io::BufWriter::new(file)), true);
    let summary = world.run(&mut log, !args.headless).map_err(|e| e.to_string())?;

    let report = build_report(log.records());
    let report_dir = args.log_dir.join(format!("{stem}_report"));
    write_report(&report_dir, &report).map_err(|e| e.to_string())?;
    let run_json = serde_json::to_string_pretty(&summary).map_err(|e| e.to_string())?;
    std::fs::write(report_dir.join("run.json"), run_json).map_err(|e| e.to_string())?;

    println!(
        "{}: {:.1} s sim in {:.1} s wall, log {}",
        scenario.name,
        summary.sim_time,
        summary.wall_time,
        log_path.display()
    );
    print_report(&report);
    for b in &summary.breaches {
        eprintln!("invariant breach at {:.3} s: {}", b.t, b.what);
    }
    if scenario.strict && !summary.breaches.is_empty() {
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run(a) => run(a),
        Cmd::Report { log, out } => (|| {
            let f = File::open(&log).map_err(|e| format!("{}: {e}", log.display()))?;
            let records = read_log(BufReader::new(f)).map_err(|e| e.to_string())?;
            let report = build_report(&records);
            let out = out.unwrap_or_else(|| {
                let mut p = log.with_extension("");
                p.as_mut_os_string().push("_report");
                p
            });
            write_report(&out, &report).map_err(|e| e.to_string())?;
            print_report(&report);
            println!("report written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        })(),
        Cmd::List => {
            for (name, _) in BUNDLED {
                println!("{name}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Bridge {
            ui_bridge_port,
            telemetry_port,
            command_port,
            host,
        } => (|| {
            let b = Bridge::spawn(
                addr(&host, ui_bridge_port)?,
                addr(&host, telemetry_port)?,
                addr(&host, command_port)?,
            )
            .map_err(|e| e.to_string())?;
            println!("bridging udp {} <-> ws://{}", b.telemetry_addr(), b.ws_addr());
            loop {
                std::thread::park();
            }
        })(),
    };
    match result {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
