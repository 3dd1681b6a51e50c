//! External device plug-in speaking DESCRIBE / SET / GET on stdin and stdout.

use std::io;
use std::process::ExitCode;

use ccdaq::server::devices::serve_device;
use clap::Parser;

#[derive(Parser)]
#[command(name = "ccd-device-sim", version, about = "Simulated external device plug-in")]
struct Args {
    #[arg(long)]
    name: String,
    /// Device kind reported by DESCRIBE, e.g. shutter, filter, lamp.
    #[arg(long, default_value = "switch")]
    kind: String,
    /// Accepted values, comma separated; the first is the initial value.
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
}

fn main() -> ExitCode {
    ccdaq_cli::init_logging();
    let args = Args::parse();
    match serve_device(&args.name, &args.kind, &args.values, io::stdin().lock(), io::stdout().lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!(target: "device", "{}: {e}", args.name);
            ExitCode::from(1)
        }
    }
}
