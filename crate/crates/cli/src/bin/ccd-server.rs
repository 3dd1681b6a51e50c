//! Control server: channels, gateway, static assets and the controller link.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::Ordering;
use std::time::Duration;

use ccdaq::config::KeyValues;
use ccdaq::detector::DetectorGeometry;
use ccdaq::server::config::{ChannelSpec, ControllerEndpoint};
use ccdaq::server::{Server, ServerConfig};
use clap::Parser;

#[derive(Parser)]
#[command(name = "ccd-server", version, about = "CCD acquisition control server")]
struct Args {
    /// Server configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Detector preset name or geometry file (overrides the config).
    #[arg(long)]
    detector: Option<String>,
    /// `embedded`, or `udp://host:port` of a controller process.
    #[arg(long)]
    controller: Option<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, conflicts_with = "channel_port")]
    channel_dir: Option<PathBuf>,
    /// First of four consecutive TCP ports for the channels.
    #[arg(long)]
    channel_port: Option<u16>,
    #[arg(long)]
    gateway_port: Option<u16>,
    #[arg(long)]
    http_port: Option<u16>,
    #[arg(long)]
    static_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Speed of the embedded controller's clock; 0 runs as fast as possible.
    #[arg(long)]
    time_scale: Option<f64>,
}

fn build(args: &Args) -> Result<ServerConfig, String> {
    let mut c = match &args.config {
        Some(p) => ServerConfig::load(p).map_err(|e| format!("{}: {e}", p.display()))?,
        None => ServerConfig::from_config(&KeyValues::default(), None).map_err(|e| e.to_string())?,
    };
    if let Some(d) = &args.detector {
        let g = DetectorGeometry::load(d).map_err(|e| format!("{d}: {e}"))?;
        if let ControllerEndpoint::Embedded { config, .. } = &mut c.controller {
            config.geometry = g.clone();
        }
        c.detector = g;
    }
    if let Some(ctl) = &args.controller {
        if ctl != "embedded" {
            c.controller = ControllerEndpoint::Udp(ctl.strip_prefix("udp://").unwrap_or(ctl).to_string());
        }
    }
    if let (Some(ts), ControllerEndpoint::Embedded { config, .. }) = (args.time_scale, &mut c.controller) {
        config.time_scale = ts;
    }
    let bind = std::net::IpAddr::from([127, 0, 0, 1]);
    if let Some(d) = &args.channel_dir {
        c.channels = ChannelSpec::Dir(d.clone());
    }
    if let Some(p) = args.channel_port {
        c.channels = ChannelSpec::Tcp((bind, p).into());
    }
    if let Some(p) = args.gateway_port {
        c.gateway = Some((bind, p).into());
    }
    if let Some(p) = args.http_port {
        c.http = Some((bind, p).into());
    }
    if let Some(d) = &args.data_dir {
        c.data_dir = d.clone();
    }
    if let Some(d) = &args.static_dir {
        c.static_dir = Some(d.clone());
    }
    if let Some(s) = args.seed {
        c.seed = s;
    }
    Ok(c)
}

fn main() -> ExitCode {
    ccdaq_cli::init_logging();
    let args = Args::parse();
    let config = match build(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("ccd-server: {e}");
            return ExitCode::from(2);
        }
    };
    let stop = ccdaq_cli::stop_flag();
    let mut server = match Server::start(config) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("ccd-server: {e}");
            return ExitCode::from(1);
        }
    };
    let opt = |a: Option<std::net::SocketAddr>| a.map_or("-".to_string(), |a| a.to_string());
    println!(
        "ccd-server ready channels={} gateway={} http={}",
        server.endpoints().describe(),
        opt(server.gateway_addr()),
        opt(server.http_addr())
    );
    while !stop.load(Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(100));
    }
    log::info!(target: "server", "shutting down");
    server.shutdown();
    ExitCode::SUCCESS
}
