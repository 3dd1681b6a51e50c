//! Symbolic client: one command, a batch script, or an interactive session.

use std::io::{self, IsTerminal, Read};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use ccdaq::client::exec::{default_history_path, repl, ExecOptions, ExitStatus, ServerConnection};
use ccdaq::client::execute;
use ccdaq::server::channels::{ChannelClient, Endpoints};
use clap::Parser;

#[derive(Parser)]
#[command(name = "ccdctl", version, about = "Control the CCD acquisition server from a command line or a batch file")]
struct Args {
    /// Channel address: a directory, `unix:<dir>`, or `host:port` of the first TCP channel.
    #[arg(long, env = "CCDAQ_SERVER")]
    server: Option<String>,
    /// Run a macro script (`-` reads standard input).
    #[arg(long, conflicts_with = "command")]
    script: Option<PathBuf>,
    /// Seconds to wait for a reply before the server counts as lost.
    #[arg(long, default_value_t = 30.0)]
    timeout: f64,
    /// Seconds `wait <event>` waits when the script gives no timeout.
    #[arg(long, default_value_t = 600.0)]
    event_timeout: f64,
    /// History file for interactive sessions.
    #[arg(long)]
    history: Option<PathBuf>,
    /// A command to send, e.g. `setup type=dark exptime=10`. A single quoted
    /// argument is run as script text.
    command: Vec<String>,
}

fn main() -> ExitCode {
    ccdaq_cli::init_logging();
    let args = Args::parse();
    let addr = args.server.clone().unwrap_or_else(|| format!("unix:{}", std::env::temp_dir().join("ccdaq-channels").display()));
    let endpoints = match Endpoints::parse(&addr) {
        Ok(e) => e,
        Err(e) => {
            eprintln!("ccdctl: {e}");
            return ExitCode::from(ExitStatus::ConnectionLost.code() as u8);
        }
    };
    let client = match ChannelClient::connect(&endpoints) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("ccdctl: cannot reach {}: {e}", endpoints.describe());
            return ExitCode::from(ExitStatus::ConnectionLost.code() as u8);
        }
    };
    let mut conn = ServerConnection::new(client);
    conn.reply_timeout = Duration::from_secs_f64(args.timeout.max(0.001));
    let opts = ExecOptions { event_timeout: Duration::from_secs_f64(args.event_timeout.max(0.0)), ..ExecOptions::default() };

    let text = if let Some(path) = &args.script {
        let r = if path.as_os_str() == "-" {
            let mut s = String::new();
            io::stdin().read_to_string(&mut s).map(|_| s)
        } else {
            std::fs::read_to_string(path)
        };
        match r {
            Ok(t) => Some(t),
            Err(e) => {
                eprintln!("ccdctl: {}: {e}", path.display());
                return ExitCode::from(ExitStatus::ParseError.code() as u8);
            }
        }
    } else if args.command.len() == 1 {
        Some(args.command[0].clone())
    } else if !args.command.is_empty() {
        Some(ccdaq_cli::join_words(&args.command))
    } else if !io::stdin().is_terminal() {
        let mut s = String::new();
        let _ = io::stdin().read_to_string(&mut s);
        Some(s)
    } else {
        None
    };

    let status = match text {
        Some(t) => {
            let o = execute(&t, &mut conn, &mut io::stdout().lock(), opts);
            if let Some(e) = &o.error {
                eprintln!("ccdctl: {e}");
            }
            o.status
        }
        None => {
            let history = args.history.or_else(default_history_path);
            repl(&mut conn, &mut io::stdin().lock(), &mut io::stdout().lock(), history.as_deref())
        }
    };
    ExitCode::from(status.code() as u8)
}
