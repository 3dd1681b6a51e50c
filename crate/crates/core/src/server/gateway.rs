//! WebSocket gateway for the operator console.
//!
//! Outgoing records are JSON objects `{type, seq, payload}` with `type` one
//! of `status`, `telemetry`, `preview` or `event`; `seq` counts up from 0 per
//! connection. Incoming records `{type: "command", verb, args}` enter the
//! same command path as the line channels.

use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{Receiver, Sender};
use serde_json::{json, Value};
use tungstenite::handshake::server::{ErrorResponse, Request, Response};
use tungstenite::{Message, WebSocket};

use super::channels::{LineSink, Source};
use super::line::CommandLine;

pub const RECORD_TYPES: [&str; 4] = ["status", "telemetry", "preview", "event"];

/// Whether a browser `Origin` may connect. `*` allows anything; an empty
/// list allows local origins only. Clients that send no origin are not
/// browsers and are let through.
pub fn origin_allowed(origin: Option<&str>, allow: &[String]) -> bool {
    let Some(origin) = origin else { return true };
    if allow.iter().any(|a| a == "*" || a.trim_end_matches('/') == origin.trim_end_matches('/')) {
        return true;
    }
    if allow.is_empty() {
        let host = origin.split("://").nth(1).unwrap_or(origin);
        let host = host.rsplit_once(':').map_or(host, |(h, p)| if p.chars().all(|c| c.is_ascii_digit()) { h } else { host });
        return matches!(host, "localhost" | "127.0.0.1" | "[::1]");
    }
    false
}

/// Turns a gateway command record into a command line.
pub fn command_line(record: &Value) -> Result<CommandLine, String> {
    let verb = record.get("verb").and_then(Value::as_str).ok_or("missing verb")?;
    let mut cmd = CommandLine::new(verb);
    let text = |v: &Value| match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    match record.get("args") {
        None | Some(Value::Null) => {}
        Some(Value::Array(items)) => cmd.positional.extend(items.iter().map(text)),
        Some(Value::Object(map)) if verb == "set" && map.contains_key("register") => {
            cmd.positional.push(text(&map["register"]));
            cmd.positional.push(map.get("value").map(text).ok_or("set needs a value")?);
        }
        Some(Value::Object(map)) => cmd.named.extend(map.iter().map(|(k, v)| (k.clone(), text(v)))),
        Some(Value::String(s)) => cmd.positional.extend(s.split_whitespace().map(String::from)),
        Some(_) => return Err("args must be an object, array or string".into()),
    }
    // Verbs go through the same parser as channel lines.
    let line = cmd.to_string();
    super::line::parse_line(&line).map_err(|e| format!("{e}"))?;
    Ok(cmd)
}

type Clients = Arc<Mutex<Vec<Sender<(String, Value)>>>>;

pub struct Gateway {
    addr: SocketAddr,
    clients: Clients,
    live: Arc<AtomicUsize>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl Gateway {
    pub fn start(addr: SocketAddr, allow: Vec<String>, sink: impl LineSink) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let clients: Clients = Arc::default();
        let live = Arc::new(AtomicUsize::new(0));
        let stop = Arc::new(AtomicBool::new(false));
        let thread = {
            let shared = Shared { allow, clients: clients.clone(), live: live.clone(), stop: stop.clone() };
            std::thread::Builder::new()
                .name("gateway".into())
                .spawn(move || accept_loop(listener, shared, sink))?
        };
        Ok(Self { addr, clients, live, stop, thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn clients(&self) -> usize {
        self.live.load(Ordering::SeqCst)
    }

    pub fn broadcast(&self, kind: &str, payload: Value) {
        let mut c = self.clients.lock().unwrap();
        c.retain(|tx| tx.send((kind.to_string(), payload.clone())).is_ok());
    }

    pub fn stop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for Gateway {
    fn drop(&mut self) {
        self.stop();
    }
}

#[derive(Clone)]
struct Shared {
    allow: Vec<String>,
    clients: Clients,
    live: Arc<AtomicUsize>,
    stop: Arc<AtomicBool>,
}

fn accept_loop(listener: TcpListener, shared: Shared, sink: impl LineSink) {
    let mut conns: Vec<JoinHandle<()>> = Vec::new();
    while !shared.stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let shared = shared.clone();
                let sink = sink.clone();
                let h = std::thread::Builder::new()
                    .name("gateway-conn".into())
                    .spawn(move || {
                        if let Err(e) = serve(stream, &shared, &sink) {
                            log::info!(target: "gateway", "{peer}: {e}");
                        }
                    });
                if let Ok(h) = h {
                    conns.push(h);
                }
                conns.retain(|h| !h.is_finished());
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(10)),
            Err(e) => {
                log::warn!(target: "gateway", "accept failed: {e}");
                std::thread::sleep(Duration::from_millis(50));
            }
        }
    }
    for h in conns {
        let _ = h.join();
    }
}

fn serve(stream: TcpStream, shared: &Shared, sink: &impl LineSink) -> Result<(), String> {
    let allow = &shared.allow;
    stream.set_nonblocking(false).map_err(|e| e.to_string())?;
    stream.set_nodelay(true).map_err(|e| e.to_string())?;
    stream.set_read_timeout(Some(Duration::from_secs(5))).map_err(|e| e.to_string())?;
    let check = |req: &Request, resp: Response| -> Result<Response, ErrorResponse> {
        let origin = req.headers().get("origin").and_then(|v| v.to_str().ok());
        if origin_allowed(origin, allow) {
            Ok(resp)
        } else {
            let mut r = ErrorResponse::new(Some(format!("origin {} not allowed", origin.unwrap_or(""))));
            *r.status_mut() = tungstenite::http::StatusCode::FORBIDDEN;
            Err(r)
        }
    };
    let ws = tungstenite::accept_hdr(stream, check).map_err(|e| format!("handshake: {e}"))?;
    ws.get_ref().set_read_timeout(Some(Duration::from_millis(10))).map_err(|e| e.to_string())?;
    let (rec_tx, rec_rx) = crossbeam_channel::unbounded::<(String, Value)>();
    shared.clients.lock().unwrap().push(rec_tx);
    shared.live.fetch_add(1, Ordering::SeqCst);
    let (reply_tx, reply_rx) = crossbeam_channel::unbounded::<String>();
    let mut conn = Conn { ws, seq: 0 };
    let result = conn.run(&shared.stop, &rec_rx, &reply_tx, &reply_rx, sink);
    shared.live.fetch_sub(1, Ordering::SeqCst);
    drop(rec_rx);
    let _ = conn.ws.close(None);
    let _ = conn.ws.flush();
    result
}

struct Conn {
    ws: WebSocket<TcpStream>,
    seq: u64,
}

impl Conn {
    fn send(&mut self, kind: &str, payload: Value) -> Result<(), String> {
        let record = json!({ "type": kind, "seq": self.seq, "payload": payload });
        self.seq += 1;
        self.ws.send(Message::text(record.to_string())).map_err(|e| e.to_string())
    }

    fn run(
        &mut self,
        stop: &AtomicBool,
        records: &Receiver<(String, Value)>,
        reply_tx: &Sender<String>,
        replies: &Receiver<String>,
        sink: &impl LineSink,
    ) -> Result<(), String> {
        while !stop.load(Ordering::SeqCst) {
            while let Ok((kind, payload)) = records.try_recv() {
                self.send(&kind, payload)?;
            }
            while let Ok(line) = replies.try_recv() {
                self.send("event", json!({ "reply": line }))?;
            }
            match self.ws.read() {
                Ok(Message::Text(text)) => self.incoming(text.as_str(), reply_tx, sink)?,
                Ok(Message::Close(_)) => return Ok(()),
                Ok(_) => {}
                Err(tungstenite::Error::Io(e)) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
                Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
                Err(e) => return Err(e.to_string()),
            }
        }
        Ok(())
    }

    fn incoming(&mut self, text: &str, reply_tx: &Sender<String>, sink: &impl LineSink) -> Result<(), String> {
        let Ok(record) = serde_json::from_str::<Value>(text) else {
            return self.send("event", json!({ "error": "parse" }));
        };
        match record.get("type").and_then(Value::as_str) {
            Some("command") => match command_line(&record) {
                Ok(cmd) => {
                    sink.line(Source::Gateway, cmd.to_string(), reply_tx.clone());
                    Ok(())
                }
                Err(detail) => self.send("event", json!({ "error": "parse", "detail": detail })),
            },
            Some("resync") => {
                sink.line(Source::Gateway, "status".into(), reply_tx.clone());
                Ok(())
            }
            _ => self.send("event", json!({ "error": "unknown-type" })),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origins() {
        let none: Vec<String> = vec![];
        assert!(origin_allowed(None, &none));
        assert!(origin_allowed(Some("http://localhost:8080"), &none));
        assert!(origin_allowed(Some("http://127.0.0.1"), &none));
        assert!(!origin_allowed(Some("http://evil.example"), &none));
        let list = vec!["https://console.example".to_string()];
        assert!(origin_allowed(Some("https://console.example"), &list));
        assert!(!origin_allowed(Some("http://localhost:8080"), &list));
        assert!(origin_allowed(Some("http://anything"), &["*".to_string()]));
    }

    #[test]
    fn records_to_lines() {
        let c = command_line(&json!({"type": "command", "verb": "observe"})).unwrap();
        assert_eq!(c.to_string(), "observe");
        let c = command_line(&json!({"verb": "setup", "args": {"type": "dark", "exptime": 10}})).unwrap();
        assert_eq!(c.get("exptime"), Some("10"));
        let c = command_line(&json!({"verb": "set", "args": {"register": "ccd-temp", "value": 173.0}})).unwrap();
        assert_eq!(c.positional, vec!["ccd-temp", "173.0"]);
        assert!(command_line(&json!({"verb": 3})).is_err());
        assert!(command_line(&json!({"verb": "9bad"})).is_err());
    }
}
