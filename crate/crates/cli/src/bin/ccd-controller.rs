//! Controller emulator as a separate process on a UDP port.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use ccdaq::controller::{serve, Controller, ControllerConfig};
use ccdaq::detector::{DetectorGeometry, SceneModel};
use ccdaq::transport::link::UdpLink;
use ccdaq::transport::{Transport, TransportConfig};
use clap::Parser;

#[derive(Parser)]
#[command(name = "ccd-controller", version, about = "Simulated CCD controller")]
struct Args {
    /// Address to listen on; port 0 picks one.
    #[arg(long, default_value = "127.0.0.1:5000")]
    listen: String,
    /// Controller configuration file (detector, scene, timing).
    #[arg(long, conflicts_with = "detector")]
    config: Option<PathBuf>,
    /// Detector preset name or geometry file, with a flat scene.
    #[arg(long)]
    detector: Option<String>,
    /// Flat sky level for `--detector`, e-/pixel/s.
    #[arg(long, default_value_t = 10.0)]
    sky: f64,
    /// Clock speed; 0 runs as fast as possible.
    #[arg(long)]
    time_scale: Option<f64>,
}

fn main() -> ExitCode {
    ccdaq_cli::init_logging();
    let args = Args::parse();
    let config = match (&args.config, &args.detector) {
        (Some(p), _) => ControllerConfig::load(p).map_err(|e| format!("{}: {e}", p.display())),
        (None, d) => DetectorGeometry::load(d.as_deref().unwrap_or("ccd42-40"))
            .map(|g| ControllerConfig::new(g, SceneModel::flat(args.sky)))
            .map_err(|e| e.to_string()),
    };
    let mut config = match config {
        Ok(c) => c,
        Err(e) => {
            eprintln!("ccd-controller: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(ts) = args.time_scale {
        config.time_scale = ts;
    }
    let stop = ccdaq_cli::stop_flag();
    let mut controller = Controller::new(config);
    let first = match UdpLink::listen(&args.listen) {
        Ok(l) => Arc::new(l),
        Err(e) => {
            eprintln!("ccd-controller: {}: {e}", args.listen);
            return ExitCode::from(1);
        }
    };
    let addr = first.local_addr().map(|a| a.to_string()).unwrap_or_else(|_| args.listen.clone());
    println!("ccd-controller listening {addr}");
    let mut link = Some(first);
    while !stop.load(Ordering::SeqCst) {
        let l = match link.take() {
            Some(l) => l,
            None => match UdpLink::listen(&addr) {
                Ok(l) => Arc::new(l),
                Err(e) => {
                    log::error!(target: "controller", "{addr}: {e}");
                    return ExitCode::from(1);
                }
            },
        };
        let transport = Transport::new(TransportConfig::default());
        match transport.accept_link(l.clone(), Duration::from_millis(500)) {
            Ok(_) => {
                log::info!(target: "controller", "session from {}", l.peer().map_or("?".into(), |p| p.to_string()));
                if let Err(e) = serve(&mut controller, &transport, &stop) {
                    log::info!(target: "controller", "session ended: {e}");
                }
                let _ = transport.disconnect();
            }
            // No peer yet: keep the socket and try again.
            Err(_) => link = Some(l),
        }
    }
    ExitCode::SUCCESS
}
