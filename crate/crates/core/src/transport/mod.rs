//! Transport layer between host and controller: application messages are
//! fragmented into CRC-protected frames of at most 1500 bytes and exchanged
//! as datagrams.
//!
//! Commands, replies and service requests are *reliable*: frames are
//! acknowledged individually, kept in a send window and retransmitted on
//! timeout (or early, once enough later frames have been acknowledged), and
//! messages are delivered in send order. Video data is *best-effort*: frames
//! are never retransmitted, completed messages are delivered as soon as they
//! are whole, and messages that cannot be completed within the reassembly
//! timeout are counted in [`TransportStatus::messages_dropped`].
//!
//! [`Transport`] exposes the six transport verbs: connect, disconnect, write
//! message, read message, status and reset.

pub mod frame;
pub mod link;
mod session;

use std::fmt;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use link::{ChannelConfig, Link, MemLink, UdpLink};
use session::SessionCore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MessageKind {
    Command,
    Reply,
    VideoData,
    ServiceRequest,
}

impl MessageKind {
    pub fn is_reliable(self) -> bool {
        self != MessageKind::VideoData
    }
}

/// Application-layer message.
#[derive(Clone, PartialEq, Eq)]
pub struct Message {
    pub kind: MessageKind,
    pub body: Vec<u8>,
}

impl Message {
    pub fn new(kind: MessageKind, body: impl Into<Vec<u8>>) -> Self {
        Self { kind, body: body.into() }
    }
}

impl fmt::Debug for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Message")
            .field("kind", &self.kind)
            .field("len", &self.body.len())
            .finish()
    }
}

/// Largest body the 16-bit fragment counter can carry.
pub const MAX_BODY: usize = u16::MAX as usize * frame::MAX_PAYLOAD;

#[derive(Debug, Clone, PartialEq)]
pub struct TransportConfig {
    /// Maximum unacknowledged reliable frames.
    pub window: usize,
    /// Timeout retransmissions before the peer is declared lost.
    pub max_retries: u32,
    /// Initial retransmission timeout; doubles with every retry of a frame.
    pub rto: Duration,
    /// Acknowledgements of frames sent this many frames later trigger an
    /// early retransmission.
    pub fast_retransmit_after: u64,
    pub reassembly_timeout: Duration,
    /// Total time allowed for the connect handshake.
    pub handshake_timeout: Duration,
    pub handshake_retries: u32,
    /// Optional rate limit for video frames, bytes per second.
    pub video_pacing: Option<f64>,
    /// Receive poll granularity of the background pump.
    pub poll_interval: Duration,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            window: 32,
            max_retries: 5,
            rto: Duration::from_millis(20),
            fast_retransmit_after: 16,
            reassembly_timeout: Duration::from_secs(2),
            handshake_timeout: Duration::from_millis(500),
            handshake_retries: 2,
            video_pacing: None,
            poll_interval: Duration::from_millis(2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorCode {
    Unreachable,
    AlreadyConnected,
    NotConnected,
    PeerLost,
    PeerClosed,
    TooLarge,
    Io,
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ErrorCode::Unreachable => "unreachable",
            ErrorCode::AlreadyConnected => "already-connected",
            ErrorCode::NotConnected => "not-connected",
            ErrorCode::PeerLost => "peer-lost",
            ErrorCode::PeerClosed => "peer-closed",
            ErrorCode::TooLarge => "too-large",
            ErrorCode::Io => "io",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("unreachable: no handshake reply within {0:?}")]
    Unreachable(Duration),
    #[error("already-connected")]
    AlreadyConnected,
    #[error("not-connected")]
    NotConnected,
    #[error("peer-lost: retransmissions exhausted")]
    PeerLost,
    #[error("message body of {0} bytes exceeds the {MAX_BODY}-byte limit")]
    TooLarge(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl TransportError {
    pub fn code(&self) -> ErrorCode {
        match self {
            TransportError::Unreachable(_) => ErrorCode::Unreachable,
            TransportError::AlreadyConnected => ErrorCode::AlreadyConnected,
            TransportError::NotConnected => ErrorCode::NotConnected,
            TransportError::PeerLost => ErrorCode::PeerLost,
            TransportError::TooLarge(_) => ErrorCode::TooLarge,
            TransportError::Io(_) => ErrorCode::Io,
        }
    }
}

/// Counters are monotone between resets.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransportStatus {
    pub connected: bool,
    pub session: u16,
    pub frames_sent: u64,
    pub frames_received: u64,
    pub crc_errors: u64,
    pub retransmits: u64,
    pub messages_dropped: u64,
    pub last_error: Option<ErrorCode>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SendReceipt {
    pub msg_seq: u32,
    pub frames: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionAction {
    Connect,
    Disconnect,
    Reset,
}

/// A transport endpoint. All methods take `&self`; one writer and one reader
/// may use the same endpoint concurrently.
pub struct Transport {
    config: TransportConfig,
    session: Mutex<Option<Arc<SessionCore>>>,
    last_error: Mutex<Option<ErrorCode>>,
}

impl Transport {
    pub fn new(config: TransportConfig) -> Self {
        Self { config, session: Mutex::new(None), last_error: Mutex::new(None) }
    }

    pub fn config(&self) -> &TransportConfig {
        &self.config
    }

    fn current(&self) -> Option<Arc<SessionCore>> {
        self.session.lock().unwrap().clone()
    }

    fn live(&self) -> Result<Arc<SessionCore>, TransportError> {
        match self.current() {
            Some(core) if core.is_connected() => Ok(core),
            Some(core) if core.last_error() == Some(ErrorCode::PeerLost) => Err(TransportError::PeerLost),
            _ => Err(TransportError::NotConnected),
        }
    }

    /// `TransportConnect` / `TransportDisconnect` / `TransportReset`.
    /// `endpoint` is a `host:port` string and only used by `Connect`.
    pub fn session_control(&self, action: SessionAction, endpoint: &str) -> Result<TransportStatus, TransportError> {
        match action {
            SessionAction::Connect => self.connect(endpoint),
            SessionAction::Disconnect => self.disconnect(),
            SessionAction::Reset => self.reset(),
        }
    }

    /// Connects over UDP to a listening peer at `endpoint`.
    pub fn connect(&self, endpoint: &str) -> Result<TransportStatus, TransportError> {
        self.ensure_disconnected()?;
        let link = Arc::new(UdpLink::connect(endpoint)?);
        self.connect_link(link)
    }

    /// Connects over an arbitrary link (the peer must be accepting).
    pub fn connect_link(&self, link: Arc<dyn Link>) -> Result<TransportStatus, TransportError> {
        self.ensure_disconnected()?;
        match SessionCore::connect(link, self.config.clone()) {
            Ok(core) => Ok(self.install(core)),
            Err(e) => {
                *self.last_error.lock().unwrap() = Some(e.code());
                Err(e)
            }
        }
    }

    /// Binds `endpoint` over UDP and waits up to `timeout` for a peer.
    pub fn listen(&self, endpoint: &str, timeout: Duration) -> Result<TransportStatus, TransportError> {
        self.ensure_disconnected()?;
        let link = Arc::new(UdpLink::listen(endpoint)?);
        self.accept_link(link, timeout)
    }

    /// Waits up to `timeout` for a peer's handshake on `link`.
    pub fn accept_link(&self, link: Arc<dyn Link>, timeout: Duration) -> Result<TransportStatus, TransportError> {
        self.ensure_disconnected()?;
        let core = SessionCore::accept(link, self.config.clone(), timeout)?;
        Ok(self.install(core))
    }

    fn ensure_disconnected(&self) -> Result<(), TransportError> {
        let mut guard = self.session.lock().unwrap();
        if let Some(core) = guard.as_ref() {
            if core.is_connected() {
                return Err(TransportError::AlreadyConnected);
            }
            core.shutdown();
            *guard = None;
        }
        Ok(())
    }

    fn install(&self, core: Arc<SessionCore>) -> TransportStatus {
        let status = core.status();
        *self.session.lock().unwrap() = Some(core);
        *self.last_error.lock().unwrap() = None;
        status
    }

    /// Sends a teardown frame and stops the session.
    pub fn disconnect(&self) -> Result<TransportStatus, TransportError> {
        let core = self.session.lock().unwrap().take().ok_or(TransportError::NotConnected)?;
        core.disconnect();
        Ok(core.status())
    }

    /// Zeroes counters and discards partial video reassemblies; the session
    /// stays up.
    pub fn reset(&self) -> Result<TransportStatus, TransportError> {
        let core = self.live()?;
        core.reset();
        Ok(core.status())
    }

    pub fn write_msg(&self, msg: &Message) -> Result<SendReceipt, TransportError> {
        self.live()?.write(msg)
    }

    /// Next message, or `Ok(None)` when `timeout` expires first.
    pub fn read_msg(&self, timeout: Duration) -> Result<Option<Message>, TransportError> {
        match self.current() {
            Some(core) => core.read(timeout),
            None => Err(TransportError::NotConnected),
        }
    }

    /// Blocks until every reliable frame sent so far is acknowledged.
    pub fn flush(&self, timeout: Duration) -> Result<bool, TransportError> {
        self.live()?.flush(timeout)
    }

    pub fn status(&self) -> TransportStatus {
        match self.current() {
            Some(core) => core.status(),
            None => TransportStatus { last_error: *self.last_error.lock().unwrap(), ..Default::default() },
        }
    }

    pub fn is_connected(&self) -> bool {
        self.current().map(|c| c.is_connected()).unwrap_or(false)
    }

    pub fn describe(&self) -> String {
        self.current().map(|c| c.describe()).unwrap_or_else(|| "disconnected".into())
    }
}

impl Drop for Transport {
    fn drop(&mut self) {
        if let Some(core) = self.session.get_mut().unwrap().take() {
            core.shutdown();
        }
    }
}
