//! The four client channels over local stream sockets.
//!
//! Clients write commands to `C_PIPE` and read replies and event lines from
//! `S_PIPE`; information commands go through `C_PIPE_INFO` and
//! `S_PIPE_INFO`. Every connection starts with `HELLO <token>`; the token
//! pairs a client's command channel with its reply channel. Reply channels
//! answer the greeting with `OK hello` once registered.

use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, Sender};

use super::config::ChannelSpec;

pub const C_PIPE: &str = "C_PIPE";
pub const S_PIPE: &str = "S_PIPE";
pub const C_PIPE_INFO: &str = "C_PIPE_INFO";
pub const S_PIPE_INFO: &str = "S_PIPE_INFO";
pub const CHANNEL_NAMES: [&str; 4] = [C_PIPE, S_PIPE, C_PIPE_INFO, S_PIPE_INFO];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    Command,
    Reply,
    InfoCommand,
    InfoReply,
}

impl Channel {
    pub const ALL: [Channel; 4] = [Channel::Command, Channel::Reply, Channel::InfoCommand, Channel::InfoReply];

    pub fn name(self) -> &'static str {
        CHANNEL_NAMES[self as usize]
    }
}

/// Resolved addresses of the four channels.
#[derive(Debug, Clone, PartialEq)]
pub enum Endpoints {
    Dir(PathBuf),
    Tcp([SocketAddr; 4]),
}

impl Endpoints {
    /// Parses a client-side address: a directory path, `unix:<dir>`, or
    /// `host:port` naming the first of four consecutive TCP ports.
    pub fn parse(s: &str) -> Result<Self, String> {
        if let Some(dir) = s.strip_prefix("unix:") {
            return Ok(Endpoints::Dir(dir.into()));
        }
        if s.contains('/') {
            return Ok(Endpoints::Dir(s.into()));
        }
        let base: SocketAddr = std::net::ToSocketAddrs::to_socket_addrs(s)
            .map_err(|e| format!("{s}: {e}"))?
            .next()
            .ok_or_else(|| format!("{s}: no address"))?;
        let at = |i: u16| SocketAddr::new(base.ip(), base.port() + i);
        Ok(Endpoints::Tcp([at(0), at(1), at(2), at(3)]))
    }

    pub fn describe(&self) -> String {
        match self {
            Endpoints::Dir(d) => format!("unix:{}", d.display()),
            Endpoints::Tcp(a) => a[0].to_string(),
        }
    }

    fn connect(&self, ch: Channel) -> io::Result<Stream> {
        match self {
            Endpoints::Dir(d) => Ok(Stream::Unix(UnixStream::connect(d.join(ch.name()))?)),
            Endpoints::Tcp(a) => {
                let s = TcpStream::connect(a[ch as usize])?;
                s.set_nodelay(true)?;
                Ok(Stream::Tcp(s))
            }
        }
    }
}

enum Listener {
    Unix(UnixListener, PathBuf),
    Tcp(TcpListener),
}

pub(crate) enum Stream {
    Unix(UnixStream),
    Tcp(TcpStream),
}

impl Stream {
    fn try_clone(&self) -> io::Result<Stream> {
        Ok(match self {
            Stream::Unix(s) => Stream::Unix(s.try_clone()?),
            Stream::Tcp(s) => Stream::Tcp(s.try_clone()?),
        })
    }

    fn set_read_timeout(&self, d: Option<Duration>) -> io::Result<()> {
        match self {
            Stream::Unix(s) => s.set_read_timeout(d),
            Stream::Tcp(s) => s.set_read_timeout(d),
        }
    }

    fn shutdown(&self) {
        let _ = match self {
            Stream::Unix(s) => s.shutdown(std::net::Shutdown::Both),
            Stream::Tcp(s) => s.shutdown(std::net::Shutdown::Both),
        };
    }
}

impl Read for Stream {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        match self {
            Stream::Unix(s) => s.read(buf),
            Stream::Tcp(s) => s.read(buf),
        }
    }
}

impl Write for Stream {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        match self {
            Stream::Unix(s) => s.write(buf),
            Stream::Tcp(s) => s.write(buf),
        }
    }

    fn flush(&mut self) -> io::Result<()> {
        match self {
            Stream::Unix(s) => s.flush(),
            Stream::Tcp(s) => s.flush(),
        }
    }
}

impl Listener {
    fn accept(&self) -> io::Result<Stream> {
        match self {
            Listener::Unix(l, _) => {
                let (s, _) = l.accept()?;
                s.set_nonblocking(false)?;
                Ok(Stream::Unix(s))
            }
            Listener::Tcp(l) => {
                let (s, _) = l.accept()?;
                s.set_nonblocking(false)?;
                s.set_nodelay(true)?;
                Ok(Stream::Tcp(s))
            }
        }
    }
}

impl Drop for Listener {
    fn drop(&mut self) {
        if let Listener::Unix(_, path) = self {
            let _ = std::fs::remove_file(path);
        }
    }
}

fn bind_all(spec: &ChannelSpec) -> io::Result<(Vec<Listener>, Endpoints)> {
    match spec {
        ChannelSpec::Dir(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut out = Vec::new();
            for name in CHANNEL_NAMES {
                let path = dir.join(name);
                if path.exists() {
                    // A live server still answers; a stale socket does not.
                    if UnixStream::connect(&path).is_ok() {
                        return Err(io::Error::new(io::ErrorKind::AddrInUse, format!("{} is in use", path.display())));
                    }
                    std::fs::remove_file(&path)?;
                }
                let l = UnixListener::bind(&path)?;
                l.set_nonblocking(true)?;
                out.push(Listener::Unix(l, path));
            }
            Ok((out, Endpoints::Dir(dir.clone())))
        }
        ChannelSpec::Tcp(base) => {
            let try_block = |port: u16| -> io::Result<Vec<TcpListener>> {
                (0..4).map(|i| TcpListener::bind(SocketAddr::new(base.ip(), port + i))).collect()
            };
            let listeners = if base.port() != 0 {
                try_block(base.port())?
            } else {
                // Find four consecutive free ports starting from an
                // OS-chosen one.
                let mut found = None;
                for _ in 0..64 {
                    let probe = TcpListener::bind(SocketAddr::new(base.ip(), 0))?;
                    let p = probe.local_addr()?.port();
                    drop(probe);
                    if p > u16::MAX - 4 {
                        continue;
                    }
                    if let Ok(ls) = try_block(p) {
                        found = Some(ls);
                        break;
                    }
                }
                found.ok_or_else(|| io::Error::new(io::ErrorKind::AddrInUse, "no block of four free ports"))?
            };
            let mut addrs = [*base; 4];
            for (i, l) in listeners.iter().enumerate() {
                l.set_nonblocking(true)?;
                addrs[i] = l.local_addr()?;
            }
            Ok((listeners.into_iter().map(Listener::Tcp).collect(), Endpoints::Tcp(addrs)))
        }
    }
}

/// Which command channel a line arrived on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Control,
    Info,
    Gateway,
}

/// Receives lines from the channel threads.
pub trait LineSink: Clone + Send + 'static {
    fn line(&self, source: Source, line: String, reply: Sender<String>);
}

#[derive(Default)]
struct Registry {
    replies: HashMap<String, Sender<String>>,
    info: HashMap<String, Sender<String>>,
    /// Subscribers to event lines: every live reply channel.
    events: Vec<Sender<String>>,
}

/// Running channel listeners.
pub struct ChannelServer {
    endpoints: Endpoints,
    registry: Arc<Mutex<Registry>>,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl ChannelServer {
    /// Creates all four channels, then starts accepting.
    pub fn start(spec: &ChannelSpec, sink: impl LineSink) -> io::Result<Self> {
        let (listeners, endpoints) = bind_all(spec)?;
        let registry = Arc::new(Mutex::new(Registry::default()));
        let stop = Arc::new(AtomicBool::new(false));
        let mut threads = Vec::new();
        for (listener, ch) in listeners.into_iter().zip(Channel::ALL) {
            let registry = registry.clone();
            let stop = stop.clone();
            let sink = sink.clone();
            threads.push(
                std::thread::Builder::new()
                    .name(format!("accept-{}", ch.name()))
                    .spawn(move || accept_loop(listener, ch, registry, stop, sink))?,
            );
        }
        Ok(Self { endpoints, registry, stop, threads })
    }

    pub fn endpoints(&self) -> &Endpoints {
        &self.endpoints
    }

    /// Sends an event line to every connected reply channel.
    pub fn broadcast(&self, line: &str) {
        let mut reg = self.registry.lock().unwrap();
        reg.events.retain(|tx| tx.send(line.to_string()).is_ok());
    }

    pub fn clients(&self) -> usize {
        self.registry.lock().unwrap().events.len()
    }

    pub fn stop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        {
            let mut reg = self.registry.lock().unwrap();
            reg.events.clear();
            reg.replies.clear();
            reg.info.clear();
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for ChannelServer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn accept_loop(listener: Listener, ch: Channel, registry: Arc<Mutex<Registry>>, stop: Arc<AtomicBool>, sink: impl LineSink) {
    let mut conns: Vec<JoinHandle<()>> = Vec::new();
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok(stream) => {
                let registry = registry.clone();
                let stop = stop.clone();
                let sink = sink.clone();
                match std::thread::Builder::new()
                    .name(format!("conn-{}", ch.name()))
                    .spawn(move || serve_connection(stream, ch, registry, stop, sink))
                {
                    Ok(h) => conns.push(h),
                    Err(e) => log::error!(target: "channels", "spawn failed: {e}"),
                }
                conns.retain(|h| !h.is_finished());
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(10)),
            Err(e) => {
                log::warn!(target: "channels", "{}: accept failed: {e}", ch.name());
                std::thread::sleep(Duration::from_millis(50));
            }
        }
    }
    for h in conns {
        let _ = h.join();
    }
}

const POLL: Duration = Duration::from_millis(50);

/// Reads one line, tolerating read timeouts; `None` at end of stream or stop.
fn read_line(reader: &mut BufReader<Stream>, stop: &AtomicBool) -> Option<String> {
    let mut buf = Vec::new();
    loop {
        if stop.load(Ordering::SeqCst) {
            return None;
        }
        match reader.read_until(b'\n', &mut buf) {
            Ok(0) => return None,
            Ok(_) if buf.ends_with(b"\n") => {
                let s = String::from_utf8_lossy(&buf).trim_end_matches(['\r', '\n']).to_string();
                return Some(s);
            }
            Ok(_) => {}
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(_) => return None,
        }
    }
}

fn serve_connection(stream: Stream, ch: Channel, registry: Arc<Mutex<Registry>>, stop: Arc<AtomicBool>, sink: impl LineSink) {
    if stream.set_read_timeout(Some(POLL)).is_err() {
        return;
    }
    let Ok(mut writer) = stream.try_clone() else { return };
    let mut reader = BufReader::new(stream);
    let token = match read_line(&mut reader, &stop) {
        Some(l) => match l.strip_prefix("HELLO ") {
            Some(t) if !t.trim().is_empty() => t.trim().to_string(),
            _ => {
                let _ = writeln!(writer, "ERR hello expected `HELLO <token>`");
                return;
            }
        },
        None => return,
    };
    match ch {
        Channel::Reply | Channel::InfoReply => {
            let (tx, rx) = crossbeam_channel::unbounded::<String>();
            {
                let mut reg = registry.lock().unwrap();
                if ch == Channel::Reply {
                    reg.replies.insert(token.clone(), tx.clone());
                    reg.events.push(tx);
                } else {
                    reg.info.insert(token.clone(), tx);
                }
            }
            if writeln!(writer, "OK hello").is_err() {
                return;
            }
            write_loop(&mut writer, &rx, &mut reader, &stop);
            let mut reg = registry.lock().unwrap();
            let map = if ch == Channel::Reply { &mut reg.replies } else { &mut reg.info };
            map.remove(&token);
        }
        Channel::Command | Channel::InfoCommand => {
            let source = if ch == Channel::Command { Source::Control } else { Source::Info };
            while let Some(line) = read_line(&mut reader, &stop) {
                let reply = {
                    let reg = registry.lock().unwrap();
                    let map = if ch == Channel::Command { &reg.replies } else { &reg.info };
                    map.get(&token).cloned()
                };
                let reply = reply.unwrap_or_else(|| {
                    log::warn!(target: "channels", "{}: no reply channel for token {token}", ch.name());
                    crossbeam_channel::unbounded().0
                });
                sink.line(source, line, reply);
            }
        }
    }
    writer.shutdown();
}

/// Pumps queued lines out until the peer goes away.
fn write_loop(writer: &mut Stream, rx: &Receiver<String>, reader: &mut BufReader<Stream>, stop: &AtomicBool) {
    // Reply channels are write-only for clients; reading detects hangups.
    let _ = reader.get_ref().set_read_timeout(Some(Duration::from_millis(1)));
    let mut last_check = Instant::now();
    while !stop.load(Ordering::SeqCst) {
        match rx.recv_timeout(POLL) {
            Ok(line) => {
                if writer.write_all(format!("{line}\n").as_bytes()).is_err() {
                    return;
                }
            }
            Err(crossbeam_channel::RecvTimeoutError::Disconnected) => return,
            Err(_) => {}
        }
        if last_check.elapsed() >= POLL {
            last_check = Instant::now();
            let mut b = [0u8; 64];
            match reader.get_mut().read(&mut b) {
                Ok(0) => return,
                Ok(_) => {}
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
                Err(_) => return,
            }
        }
    }
}

/// Client side of the four channels.
pub struct ChannelClient {
    cmd: Stream,
    replies: BufReader<Stream>,
    info_cmd: Stream,
    info_replies: BufReader<Stream>,
    events: std::collections::VecDeque<String>,
    endpoints: Endpoints,
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("connection lost: {0}")]
    Lost(String),
    #[error("timed out waiting for {0}")]
    Timeout(&'static str),
}

fn token() -> String {
    use rand::Rng;
    format!("{:016x}", rand::thread_rng().gen::<u64>())
}

impl ChannelClient {
    pub fn connect(endpoints: &Endpoints) -> io::Result<Self> {
        let token = token();
        let hello = |ch: Channel| -> io::Result<Stream> {
            let mut s = endpoints.connect(ch)?;
            writeln!(s, "HELLO {token}")?;
            Ok(s)
        };
        let greet = |s: Stream| -> io::Result<BufReader<Stream>> {
            s.set_read_timeout(Some(Duration::from_secs(5)))?;
            let mut r = BufReader::new(s);
            let mut line = String::new();
            r.read_line(&mut line)?;
            if line.trim_end() != "OK hello" {
                return Err(io::Error::new(io::ErrorKind::ConnectionRefused, format!("bad greeting `{}`", line.trim_end())));
            }
            Ok(r)
        };
        let replies = greet(hello(Channel::Reply)?)?;
        let info_replies = greet(hello(Channel::InfoReply)?)?;
        let cmd = hello(Channel::Command)?;
        let info_cmd = hello(Channel::InfoCommand)?;
        Ok(Self { cmd, replies, info_cmd, info_replies, events: Default::default(), endpoints: endpoints.clone() })
    }

    pub fn endpoints(&self) -> &Endpoints {
        &self.endpoints
    }

    fn next_line(r: &mut BufReader<Stream>, deadline: Instant) -> Result<Option<String>, ClientError> {
        let left = deadline.saturating_duration_since(Instant::now());
        if left.is_zero() {
            return Ok(None);
        }
        let _ = r.get_ref().set_read_timeout(Some(left.max(Duration::from_millis(1))));
        let mut buf = Vec::new();
        loop {
            match r.read_until(b'\n', &mut buf) {
                Ok(0) => return Err(ClientError::Lost("server closed the channel".into())),
                Ok(_) if buf.ends_with(b"\n") => {
                    return Ok(Some(String::from_utf8_lossy(&buf).trim_end_matches(['\r', '\n']).to_string()))
                }
                Ok(_) => {}
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                    if Instant::now() >= deadline {
                        if buf.is_empty() {
                            return Ok(None);
                        }
                        // Half a line: the rest is in flight.
                        if Instant::now() >= deadline + Duration::from_secs(1) {
                            return Err(ClientError::Lost("truncated line".into()));
                        }
                        let _ = r.get_ref().set_read_timeout(Some(Duration::from_millis(20)));
                    }
                }
                Err(e) => return Err(ClientError::Lost(e.to_string())),
            }
        }
    }

    /// Sends a control command and returns its reply line. Event lines that
    /// arrive first are queued for [`next_event`](Self::next_event).
    pub fn command(&mut self, line: &str, timeout: Duration) -> Result<String, ClientError> {
        writeln!(self.cmd, "{line}").map_err(|e| ClientError::Lost(e.to_string()))?;
        let deadline = Instant::now() + timeout;
        loop {
            match Self::next_line(&mut self.replies, deadline)? {
                Some(l) if l.starts_with("EVENT ") => self.events.push_back(l),
                Some(l) => return Ok(l),
                None => return Err(ClientError::Timeout("reply")),
            }
        }
    }

    /// Sends an information command over the info channels.
    pub fn info(&mut self, line: &str, timeout: Duration) -> Result<String, ClientError> {
        writeln!(self.info_cmd, "{line}").map_err(|e| ClientError::Lost(e.to_string()))?;
        match Self::next_line(&mut self.info_replies, Instant::now() + timeout)? {
            Some(l) => Ok(l),
            None => Err(ClientError::Timeout("info reply")),
        }
    }

    /// Next event line, waiting up to `timeout`.
    pub fn next_event(&mut self, timeout: Duration) -> Result<Option<String>, ClientError> {
        if let Some(e) = self.events.pop_front() {
            return Ok(Some(e));
        }
        let deadline = Instant::now() + timeout;
        loop {
            match Self::next_line(&mut self.replies, deadline)? {
                Some(l) if l.starts_with("EVENT ") => return Ok(Some(l)),
                Some(l) => log::warn!(target: "client", "unsolicited line `{l}`"),
                None => return Ok(None),
            }
        }
    }

    /// Waits for an event whose name is `name`.
    pub fn wait_event(&mut self, name: &str, timeout: Duration) -> Result<String, ClientError> {
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.next_event(left)? {
                Some(e) if e.split_whitespace().nth(1) == Some(name) => return Ok(e),
                Some(_) => {}
                None => return Err(ClientError::Timeout("event")),
            }
        }
    }

    /// Drops queued events.
    pub fn clear_events(&mut self) {
        self.events.clear();
    }
}

pub fn socket_path(dir: &Path, ch: Channel) -> PathBuf {
    dir.join(ch.name())
}
