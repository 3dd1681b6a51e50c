//! Static HTTP service for the console's assets and the record schema.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde_json::{json, Value};

use crate::controller::Telemetry;
use crate::server::fsm::{ControlState, ControlVerb};
use crate::server::setup::SETUP_KEYS;

use super::gateway::RECORD_TYPES;

pub const SCHEMA_PATH: &str = "/schema.json";
pub const INFO_VERBS: [&str; 3] = ["status", "get", "set"];
const MAX_REQUEST: usize = 16 * 1024;

/// Describes the gateway records, commands and telemetry registers.
pub fn schema(telemetry: &Telemetry) -> Value {
    let registers: serde_json::Map<String, Value> = telemetry
        .specs()
        .iter()
        .map(|(name, s)| {
            let spec = json!({
                "group": s.group, "unit": s.unit, "min": s.min, "max": s.max,
                "writable": s.writable, "default": s.default,
            });
            (name.clone(), spec)
        })
        .collect();
    json!({
        "version": 1,
        "envelope": { "type": RECORD_TYPES, "seq": "integer, per connection, from 0", "payload": "object" },
        "records": {
            "status": {
                "state": ControlState::ALL.iter().map(|s| s.as_str()).collect::<Vec<_>>(),
                "fields": ["state", "frames_done", "frames_total", "percent", "eta", "power", "seed", "last_file"],
            },
            "telemetry": { "fields": "register name -> readback value" },
            "preview": {
                "fields": ["frame", "factor", "x", "y", "width", "height", "image_width", "image_height", "data"],
            },
            "event": { "fields": ["name", "line", "state", "reply", "error"] },
        },
        "command": {
            "record": { "type": "command", "verb": "string", "args": "object | array | string" },
            "control_verbs": ControlVerb::ALL.iter().map(|v| v.as_str()).collect::<Vec<_>>(),
            "info_verbs": INFO_VERBS,
            "setup_keys": SETUP_KEYS,
        },
        "registers": registers,
    })
}

pub struct HttpServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl HttpServer {
    pub fn start(addr: SocketAddr, root: Option<PathBuf>, schema: Value) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let schema = Arc::new(serde_json::to_vec_pretty(&schema).expect("schema serializes"));
        let thread = std::thread::Builder::new().name("http".into()).spawn(move || {
            while !flag.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let root = root.clone();
                        let schema = schema.clone();
                        let _ = std::thread::Builder::new().name("http-conn".into()).spawn(move || {
                            if let Err(e) = handle(stream, root.as_deref(), &schema) {
                                log::debug!(target: "http", "{e}");
                            }
                        });
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(10)),
                    Err(e) => {
                        log::warn!(target: "http", "accept failed: {e}");
                        std::thread::sleep(Duration::from_millis(50));
                    }
                }
            }
        })?;
        Ok(Self { addr, stop, thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for HttpServer {
    fn drop(&mut self) {
        self.stop();
    }
}

pub fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).unwrap_or("") {
        "html" | "htm" => "text/html; charset=utf-8",
        "js" | "mjs" => "text/javascript; charset=utf-8",
        "css" => "text/css; charset=utf-8",
        "json" | "map" => "application/json",
        "svg" => "image/svg+xml",
        "png" => "image/png",
        "ico" => "image/x-icon",
        "wasm" => "application/wasm",
        "txt" => "text/plain; charset=utf-8",
        _ => "application/octet-stream",
    }
}

/// Maps a request path onto `root`, refusing anything that climbs out.
pub fn resolve(root: &Path, target: &str) -> Option<PathBuf> {
    let path = target.split(['?', '#']).next().unwrap_or("/");
    let mut out = root.to_path_buf();
    for c in Path::new(path.trim_start_matches('/')).components() {
        match c {
            Component::Normal(p) => out.push(p),
            Component::CurDir => {}
            _ => return None,
        }
    }
    if out.is_dir() {
        out.push("index.html");
    }
    Some(out)
}

fn handle(mut stream: TcpStream, root: Option<&Path>, schema: &[u8]) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    let mut buf = Vec::with_capacity(1024);
    let mut chunk = [0u8; 1024];
    let (method, target) = loop {
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            return Ok(());
        }
        buf.extend_from_slice(&chunk[..n]);
        let mut headers = [httparse::EMPTY_HEADER; 64];
        let mut req = httparse::Request::new(&mut headers);
        match req.parse(&buf) {
            Ok(httparse::Status::Complete(_)) => {
                break (req.method.unwrap_or("").to_string(), req.path.unwrap_or("/").to_string());
            }
            Ok(httparse::Status::Partial) if buf.len() < MAX_REQUEST => {}
            _ => return respond(&mut stream, 400, "text/plain", b"bad request\n", true),
        }
    };
    let head_only = method == "HEAD";
    if method != "GET" && !head_only {
        return respond(&mut stream, 405, "text/plain", b"method not allowed\n", head_only);
    }
    if target.split('?').next() == Some(SCHEMA_PATH) {
        return respond(&mut stream, 200, "application/json", schema, head_only);
    }
    let Some(path) = root.and_then(|r| resolve(r, &target)) else {
        return respond(&mut stream, 404, "text/plain", b"not found\n", head_only);
    };
    match std::fs::read(&path) {
        Ok(body) => respond(&mut stream, 200, content_type(&path), &body, head_only),
        Err(_) => respond(&mut stream, 404, "text/plain", b"not found\n", head_only),
    }
}

fn respond(stream: &mut TcpStream, status: u16, ctype: &str, body: &[u8], head_only: bool) -> io::Result<()> {
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        404 => "Not Found",
        405 => "Method Not Allowed",
        _ => "",
    };
    let head = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: {ctype}\r\nContent-Length: {}\r\nCache-Control: no-cache\r\nConnection: close\r\n\r\n",
        body.len()
    );
    stream.write_all(head.as_bytes())?;
    if !head_only {
        stream.write_all(body)?;
    }
    stream.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::TelemetryConfig;

    #[test]
    fn paths_stay_inside_the_root() {
        let root = Path::new("/srv/ui");
        assert_eq!(resolve(root, "/app.js?v=2"), Some(PathBuf::from("/srv/ui/app.js")));
        assert_eq!(resolve(root, "/../etc/passwd"), None);
        assert_eq!(resolve(root, "/a/../../b"), None);
    }

    #[test]
    fn schema_lists_registers_and_records() {
        let s = schema(&Telemetry::new(2, TelemetryConfig::default()));
        assert_eq!(s["envelope"]["type"].as_array().unwrap().len(), 4);
        assert_eq!(s["registers"]["node1.ID"]["writable"], json!(false));
        assert_eq!(s["registers"]["clock.V1"]["max"], json!(12.0));
        assert_eq!(s["command"]["setup_keys"].as_array().unwrap().len(), SETUP_KEYS.len());
    }
}
