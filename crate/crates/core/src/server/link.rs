//! The server's session with its controller.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, Sender};

use crate::controller::{self, AsyncCommand, Controller, ControllerReply, StatusEvent};
use crate::transport::{Link, MemLink, MessageKind, Transport, TransportConfig, TransportError};

use super::config::ControllerEndpoint;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LinkError {
    #[error("controller-timeout")]
    Timeout,
    #[error("controller-lost {0}")]
    Transport(String),
}

/// Where the reader thread sends what the controller says unprompted.
pub trait LinkSink: Send + 'static {
    fn event(&self, event: StatusEvent);
    fn video(&self, body: Vec<u8>);
    fn lost(&self, reason: String);
}

struct Embedded {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

pub struct ControllerLink {
    transport: Arc<Transport>,
    replies: Receiver<ControllerReply>,
    timeout: Duration,
    sent: AtomicU64,
    stop: Arc<AtomicBool>,
    reader: Mutex<Option<JoinHandle<()>>>,
    embedded: Mutex<Option<Embedded>>,
}

impl ControllerLink {
    pub fn open(endpoint: &ControllerEndpoint, timeout: Duration, sink: impl LinkSink) -> Result<Self, LinkError> {
        let transport = Arc::new(Transport::new(TransportConfig::default()));
        let mut embedded = None;
        match endpoint {
            ControllerEndpoint::Udp(addr) => {
                transport.connect(addr).map_err(|e| LinkError::Transport(e.to_string()))?;
            }
            ControllerEndpoint::Embedded { config, channel } => {
                let (host_end, ctrl_end) = MemLink::pair(*channel);
                let stop = Arc::new(AtomicBool::new(false));
                let flag = stop.clone();
                let config = (**config).clone();
                let thread = std::thread::Builder::new()
                    .name("controller".into())
                    .spawn(move || {
                        let t = Transport::new(TransportConfig::default());
                        let link: Arc<dyn Link> = ctrl_end;
                        if let Err(e) = t.accept_link(link, Duration::from_secs(5)) {
                            log::error!(target: "controller", "handshake failed: {e}");
                            return;
                        }
                        let mut c = Controller::new(config);
                        if let Err(e) = controller::serve(&mut c, &t, &flag) {
                            log::warn!(target: "controller", "session ended: {e}");
                        }
                    })
                    .expect("spawn controller thread");
                let link: Arc<dyn Link> = host_end;
                transport.connect_link(link).map_err(|e| LinkError::Transport(e.to_string()))?;
                embedded = Some(Embedded { stop, thread: Some(thread) });
            }
        }
        let (reply_tx, replies) = crossbeam_channel::unbounded();
        let stop = Arc::new(AtomicBool::new(false));
        let reader = {
            let t = transport.clone();
            let stop = stop.clone();
            std::thread::Builder::new()
                .name("controller-reader".into())
                .spawn(move || read_loop(&t, &stop, &reply_tx, &sink))
                .expect("spawn reader")
        };
        Ok(Self {
            transport,
            replies,
            timeout,
            sent: AtomicU64::new(0),
            stop,
            reader: Mutex::new(Some(reader)),
            embedded: Mutex::new(embedded),
        })
    }

    /// Sends one command and waits for its reply.
    pub fn request(&self, cmd: &AsyncCommand) -> Result<ControllerReply, LinkError> {
        while self.replies.try_recv().is_ok() {}
        self.sent.fetch_add(1, Ordering::SeqCst);
        self.transport.write_msg(&cmd.to_message()).map_err(|e| LinkError::Transport(e.to_string()))?;
        let deadline = Instant::now() + self.timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.replies.recv_timeout(left) {
                Ok(r) if r.in_reply_to == cmd.kind() => return Ok(r),
                Ok(r) => log::warn!(target: "server", "stale reply to {:?}", r.in_reply_to),
                Err(_) => return Err(LinkError::Timeout),
            }
        }
    }

    /// Commands sent to the controller so far.
    pub fn commands_sent(&self) -> u64 {
        self.sent.load(Ordering::SeqCst)
    }

    pub fn transport(&self) -> &Transport {
        &self.transport
    }

    pub fn close(&self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(mut e) = self.embedded.lock().unwrap().take() {
            e.stop.store(true, Ordering::SeqCst);
            if let Some(t) = e.thread.take() {
                let _ = t.join();
            }
        }
        let _ = self.transport.disconnect();
        if let Some(r) = self.reader.lock().unwrap().take() {
            let _ = r.join();
        }
    }
}

impl Drop for ControllerLink {
    fn drop(&mut self) {
        self.close();
    }
}

fn read_loop(t: &Transport, stop: &AtomicBool, replies: &Sender<ControllerReply>, sink: &impl LinkSink) {
    while !stop.load(Ordering::SeqCst) {
        match t.read_msg(Duration::from_millis(20)) {
            Ok(None) => {}
            Ok(Some(m)) => match m.kind {
                MessageKind::Reply => match ControllerReply::decode(&m.body) {
                    Ok(r) => {
                        let _ = replies.send(r);
                    }
                    Err(e) => log::warn!(target: "server", "undecodable reply: {e}"),
                },
                MessageKind::ServiceRequest => match StatusEvent::decode(&m.body) {
                    Ok(ev) => sink.event(ev),
                    Err(e) => log::warn!(target: "server", "undecodable service request: {e}"),
                },
                MessageKind::VideoData => sink.video(m.body),
                MessageKind::Command => log::warn!(target: "server", "controller sent a command; ignored"),
            },
            Err(TransportError::NotConnected) if stop.load(Ordering::SeqCst) => break,
            Err(e) => {
                if !stop.load(Ordering::SeqCst) {
                    sink.lost(e.to_string());
                }
                break;
            }
        }
    }
}
