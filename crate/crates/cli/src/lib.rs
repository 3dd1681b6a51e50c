//! Shared plumbing for the command-line tools.

use std::io::Write;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

/// Log lines read `ISO8601 LEVEL component message`. The level comes from
/// `RUST_LOG`, default `info`.
pub fn init_logging() {
    let env = env_logger::Env::default().default_filter_or("info");
    env_logger::Builder::from_env(env)
        .format(|buf, rec| {
            let ts = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true);
            writeln!(buf, "{ts} {} {} {}", rec.level(), rec.target(), rec.args())
        })
        .target(env_logger::Target::Stderr)
        .init();
}

/// A flag raised by SIGINT or SIGTERM.
pub fn stop_flag() -> Arc<AtomicBool> {
    let flag = Arc::new(AtomicBool::new(false));
    let f = flag.clone();
    if let Err(e) = ctrlc::set_handler(move || f.store(true, Ordering::SeqCst)) {
        log::warn!(target: "cli", "no signal handler: {e}");
    }
    flag
}

/// Rebuilds one command line from shell words, quoting values that the
/// shell had already unquoted.
pub fn join_words(words: &[String]) -> String {
    use ccdaq::server::line::quote;
    words
        .iter()
        .enumerate()
        .map(|(i, w)| {
            if i == 0 {
                return w.clone();
            }
            match w.split_once('=') {
                Some((k, v)) if !k.is_empty() && k.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.')) => {
                    format!("{k}={}", quote(v))
                }
                _ => quote(w),
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shell_words_are_requoted() {
        let w: Vec<String> = ["setup", "object=M 31", "type=dark", "a b"].iter().map(|s| s.to_string()).collect();
        assert_eq!(join_words(&w), "setup object=\"M 31\" type=dark \"a b\"");
    }
}
