//! Script execution against a server connection.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use crate::server::channels::{ChannelClient, ClientError};
use crate::server::http::INFO_VERBS;
use crate::server::line::CommandLine;

use super::script::{needs_more, parse_script_with, Arg, Diagnostic, Expr, Part, Script, Stmt, StmtKind, Template, WaitTarget};

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int(i64),
    Real(f64),
    Str(String),
    /// Seconds.
    Duration(f64),
}

impl Value {
    pub fn seconds(&self) -> Option<f64> {
        match *self {
            Value::Int(i) => Some(i as f64),
            Value::Real(r) | Value::Duration(r) => Some(r),
            Value::Str(_) => None,
        }
    }
}

/// Durations expand to plain seconds so the server can read them.
impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(i) => write!(f, "{i}"),
            Value::Real(r) | Value::Duration(r) => write!(f, "{r}"),
            Value::Str(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConnError {
    #[error("connection lost: {0}")]
    Lost(String),
    #[error("timed out waiting for {0}")]
    Timeout(String),
}

/// What the executor needs from a server.
pub trait Connection {
    /// Sends one command line and returns the reply line.
    fn command(&mut self, line: &str) -> Result<String, ConnError>;
    /// Blocks until an event named `name` arrives and returns its line.
    fn wait_event(&mut self, name: &str, timeout: Duration) -> Result<String, ConnError>;
}

/// A [`ChannelClient`] with a per-reply timeout; info verbs use the info
/// channels.
pub struct ServerConnection {
    pub client: ChannelClient,
    pub reply_timeout: Duration,
}

impl ServerConnection {
    pub fn new(client: ChannelClient) -> Self {
        Self { client, reply_timeout: Duration::from_secs(30) }
    }
}

fn conn_err(e: ClientError) -> ConnError {
    match e {
        ClientError::Lost(m) => ConnError::Lost(m),
        ClientError::Timeout(w) => ConnError::Timeout(w.to_string()),
    }
}

impl Connection for ServerConnection {
    fn command(&mut self, line: &str) -> Result<String, ConnError> {
        let verb = line.split_whitespace().next().unwrap_or("");
        let r = if INFO_VERBS.contains(&verb) {
            self.client.info(line, self.reply_timeout)
        } else {
            self.client.command(line, self.reply_timeout)
        };
        // A reply that never comes means the server is gone.
        r.map_err(|e| match conn_err(e) {
            ConnError::Timeout(w) => ConnError::Lost(format!("no {w}")),
            other => other,
        })
    }

    fn wait_event(&mut self, name: &str, timeout: Duration) -> Result<String, ConnError> {
        self.client.wait_event(name, timeout).map_err(conn_err)
    }
}

/// Process exit statuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Ok = 0,
    CommandError = 1,
    ParseError = 2,
    ConnectionLost = 3,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }
}

#[derive(Debug)]
pub struct Outcome {
    pub status: ExitStatus,
    pub transcript: Vec<String>,
    /// Why the script stopped early, for stderr.
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ExecOptions {
    /// Used by `wait <event>` without an explicit timeout.
    pub event_timeout: Duration,
    /// Stop at the first failed statement not marked `try`.
    pub stop_on_error: bool,
}

impl Default for ExecOptions {
    fn default() -> Self {
        Self { event_timeout: Duration::from_secs(600), stop_on_error: true }
    }
}

enum Halt {
    Failed(String),
    Lost(String),
    Io(io::Error),
}

/// Runs statements in order, keeping variables between scripts.
pub struct Executor<'a, C: Connection> {
    conn: &'a mut C,
    vars: HashMap<String, Value>,
    opts: ExecOptions,
    out: &'a mut dyn Write,
    transcript: Vec<String>,
    failed: bool,
}

impl<'a, C: Connection> Executor<'a, C> {
    /// Transcript lines are also written to `out` as they happen: `> ` for
    /// commands, `< ` for replies and events, plain text for `print`.
    pub fn new(conn: &'a mut C, out: &'a mut dyn Write, opts: ExecOptions) -> Self {
        Self { conn, vars: HashMap::new(), opts, out, transcript: Vec::new(), failed: false }
    }

    pub fn defined(&self) -> HashSet<String> {
        self.vars.keys().cloned().collect()
    }

    pub fn var(&self, name: &str) -> Option<&Value> {
        self.vars.get(name)
    }

    fn record(&mut self, line: String) -> Result<(), Halt> {
        writeln!(self.out, "{line}").map_err(Halt::Io)?;
        self.transcript.push(line);
        Ok(())
    }

    fn expand(&self, t: &Template) -> Result<String, Halt> {
        let mut s = String::new();
        for p in &t.0 {
            match p {
                Part::Lit(l) => s.push_str(l),
                Part::Var(n) => {
                    let v = self.vars.get(n).ok_or_else(|| Halt::Failed(format!("unknown variable `${n}`")))?;
                    s.push_str(&v.to_string());
                }
            }
        }
        Ok(s)
    }

    fn eval(&self, e: &Expr) -> Result<Value, Halt> {
        Ok(match e {
            Expr::Int(i) => Value::Int(*i),
            Expr::Real(r) => Value::Real(*r),
            Expr::Duration(d) => Value::Duration(*d),
            Expr::Text(t) => match t.as_var() {
                Some(n) => self.vars.get(n).cloned().ok_or_else(|| Halt::Failed(format!("unknown variable `${n}`")))?,
                None => Value::Str(self.expand(t)?),
            },
        })
    }

    /// Builds the command line from parts; expanded values are quoted as
    /// needed and never re-read as syntax.
    pub fn command_line(&self, verb: &str, args: &[Arg]) -> Result<CommandLine, String> {
        let mut cmd = CommandLine::new(verb);
        for a in args {
            let r = match a {
                Arg::Positional(t) => self.expand(t).map(|v| cmd.positional.push(v)),
                Arg::Named(k, t) => self.expand(t).map(|v| cmd.named.push((k.clone(), v))),
            };
            r.map_err(|h| match h {
                Halt::Failed(m) => m,
                _ => unreachable!("expansion only fails on variables"),
            })?;
        }
        Ok(cmd)
    }

    fn fail(&mut self, try_: bool, why: String) -> Result<(), Halt> {
        if try_ {
            return Ok(());
        }
        self.failed = true;
        if self.opts.stop_on_error {
            Err(Halt::Failed(why))
        } else {
            Ok(())
        }
    }

    fn stmt(&mut self, s: &Stmt) -> Result<(), Halt> {
        match &s.kind {
            StmtKind::Comment(_) => Ok(()),
            StmtKind::Let { name, value } => {
                let v = self.eval(value)?;
                self.vars.insert(name.clone(), v);
                Ok(())
            }
            StmtKind::Print(items) => {
                let parts: Result<Vec<_>, _> = items.iter().map(|e| self.eval(e).map(|v| v.to_string())).collect();
                let line = parts?.join(" ");
                self.record(line)
            }
            StmtKind::Repeat { count, body } => {
                for _ in 0..*count {
                    for b in body {
                        self.stmt(b)?;
                    }
                }
                Ok(())
            }
            StmtKind::Command { try_, verb, args } => {
                let line = self.command_line(verb, args).map_err(Halt::Failed)?.to_string();
                self.record(format!("> {line}"))?;
                let reply = self.conn.command(&line).map_err(|e| Halt::Lost(e.to_string()))?;
                self.record(format!("< {reply}"))?;
                if reply.starts_with("ERR") {
                    return self.fail(*try_, format!("{} failed: {reply}", s.pos));
                }
                Ok(())
            }
            StmtKind::Wait { try_, target } => match target {
                WaitTarget::For(e) => {
                    let v = self.eval(e)?;
                    let secs = v.seconds().filter(|s| *s >= 0.0).ok_or_else(|| Halt::Failed(format!("{}: cannot wait for `{v}`", s.pos)))?;
                    std::thread::sleep(Duration::from_secs_f64(secs));
                    Ok(())
                }
                WaitTarget::Event { name, timeout } => {
                    let limit = match timeout {
                        Some(e) => {
                            let v = self.eval(e)?;
                            let secs = v.seconds().filter(|s| *s >= 0.0).ok_or_else(|| Halt::Failed(format!("{}: bad timeout `{v}`", s.pos)))?;
                            Duration::from_secs_f64(secs)
                        }
                        None => self.opts.event_timeout,
                    };
                    match self.conn.wait_event(name, limit) {
                        Ok(line) => self.record(format!("< {line}")),
                        Err(ConnError::Timeout(_)) => {
                            self.record(format!("! timeout waiting for {name}"))?;
                            self.fail(*try_, format!("{}: timed out waiting for {name}", s.pos))
                        }
                        Err(e) => Err(Halt::Lost(e.to_string())),
                    }
                }
            },
        }
    }

    fn status_of(&mut self, r: Result<(), Halt>) -> (ExitStatus, Option<String>) {
        match r {
            Ok(()) if self.failed => (ExitStatus::CommandError, None),
            Ok(()) => (ExitStatus::Ok, None),
            Err(Halt::Failed(m)) => (ExitStatus::CommandError, Some(m)),
            Err(Halt::Lost(m)) => (ExitStatus::ConnectionLost, Some(m)),
            Err(Halt::Io(e)) => (ExitStatus::CommandError, Some(format!("output: {e}"))),
        }
    }

    /// Runs a parsed script.
    pub fn run(&mut self, script: &Script) -> (ExitStatus, Option<String>) {
        let r = script.statements.iter().try_for_each(|s| self.stmt(s));
        self.status_of(r)
    }

    pub fn into_transcript(self) -> Vec<String> {
        self.transcript
    }
}

/// Parses and runs `text`; parse failures exit with status 2.
pub fn execute<C: Connection>(text: &str, conn: &mut C, out: &mut dyn Write, opts: ExecOptions) -> Outcome {
    let script = match super::script::parse_script(text) {
        Ok(s) => s,
        Err(d) => return Outcome { status: ExitStatus::ParseError, transcript: Vec::new(), error: Some(d.to_string()) },
    };
    let mut ex = Executor::new(conn, out, opts);
    let (status, error) = ex.run(&script);
    Outcome { status, transcript: ex.into_transcript(), error }
}

pub fn parse_error(d: &Diagnostic) -> Outcome {
    Outcome { status: ExitStatus::ParseError, transcript: Vec::new(), error: Some(d.to_string()) }
}

// ---------------------------------------------------------------------------
// Interactive session

pub const HELP: &str = "\
control:  setup key=value ...   observe   stop   abort   run_cmd <procedure> [args]
info:     status   get <key>   set <register> <value>
macros:   let name = value   repeat N { ... }   wait <duration|event> [timeout]
          print value ...   try <command>   # comment
session:  help   quit";

/// `$XDG_STATE_HOME/ccdctl/history`, else `~/.ccdctl_history`.
pub fn default_history_path() -> Option<PathBuf> {
    if let Some(d) = std::env::var_os("XDG_STATE_HOME").filter(|d| !d.is_empty()) {
        return Some(PathBuf::from(d).join("ccdctl").join("history"));
    }
    std::env::var_os("HOME").filter(|h| !h.is_empty()).map(|h| PathBuf::from(h).join(".ccdctl_history"))
}

pub fn load_history(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).map(|s| s.lines().map(String::from).collect()).unwrap_or_default()
}

fn append_history(path: &Path, entry: &str) {
    if let Some(dir) = path.parent() {
        let _ = std::fs::create_dir_all(dir);
    }
    let f = std::fs::OpenOptions::new().create(true).append(true).open(path);
    if let Ok(mut f) = f {
        let _ = writeln!(f, "{}", entry.replace('\n', " "));
    }
}

/// Reads statements from `input` until `quit` or end of input. Failed
/// commands print their reply and the session goes on; a lost connection
/// ends it with status 3.
pub fn repl<C: Connection>(conn: &mut C, input: &mut dyn BufRead, out: &mut dyn Write, history: Option<&Path>) -> ExitStatus {
    let opts = ExecOptions { stop_on_error: false, ..ExecOptions::default() };
    let mut vars: HashMap<String, Value> = HashMap::new();
    let mut pending = String::new();
    loop {
        let _ = write!(out, "{}", if pending.is_empty() { "ccd> " } else { "...> " });
        let _ = out.flush();
        let mut line = String::new();
        match input.read_line(&mut line) {
            Ok(0) | Err(_) => return ExitStatus::Ok,
            Ok(_) => {}
        }
        let line = line.trim_end_matches(['\r', '\n']);
        if pending.is_empty() {
            match line.trim() {
                "" => continue,
                "quit" | "exit" => return ExitStatus::Ok,
                "help" => {
                    let _ = writeln!(out, "{HELP}");
                    continue;
                }
                _ => {}
            }
        }
        pending.push_str(line);
        pending.push('\n');
        if needs_more(&pending) {
            continue;
        }
        let text = std::mem::take(&mut pending);
        if let Some(h) = history {
            append_history(h, text.trim_end());
        }
        let mut defined: HashSet<String> = vars.keys().cloned().collect();
        let script = match parse_script_with(&text, &mut defined) {
            Ok(s) => s,
            Err(d) => {
                let _ = writeln!(out, "! {d}");
                continue;
            }
        };
        let mut ex = Executor::new(conn, out, opts.clone());
        ex.vars = std::mem::take(&mut vars);
        let (status, error) = ex.run(&script);
        vars = std::mem::take(&mut ex.vars);
        drop(ex);
        if status == ExitStatus::ConnectionLost {
            let _ = writeln!(out, "! {}", error.unwrap_or_default());
            return status;
        }
        if let Some(e) = error {
            let _ = writeln!(out, "! {e}");
        }
    }
}
