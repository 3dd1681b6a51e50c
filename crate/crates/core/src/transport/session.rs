use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::frame::{self, flags, FrameView, MAX_PAYLOAD};
use super::{ErrorCode, Link, Message, MessageKind, SendReceipt, TransportConfig, TransportError, TransportStatus, MAX_BODY};

struct InFlight {
    bytes: Arc<Vec<u8>>,
    sent_at: Instant,
    retries: u32,
    ordinal: u64,
    fast_done: bool,
}

struct Partial {
    kind: MessageKind,
    total: u16,
    got: Vec<bool>,
    count: usize,
    buf: Vec<u8>,
    last_len: usize,
    started: Instant,
}

impl Partial {
    fn new(kind: MessageKind, total: u16, now: Instant) -> Self {
        Self {
            kind,
            total,
            got: vec![false; total as usize],
            count: 0,
            buf: vec![0; total as usize * MAX_PAYLOAD],
            last_len: 0,
            started: now,
        }
    }

    /// Stores one fragment; false if it was a duplicate or malformed.
    fn insert(&mut self, index: u16, payload: &[u8]) -> bool {
        let i = index as usize;
        if self.got[i] {
            return false;
        }
        let last = i + 1 == self.total as usize;
        if !last && payload.len() != MAX_PAYLOAD {
            return false;
        }
        self.buf[i * MAX_PAYLOAD..i * MAX_PAYLOAD + payload.len()].copy_from_slice(payload);
        if last {
            self.last_len = payload.len();
        }
        self.got[i] = true;
        self.count += 1;
        true
    }

    fn is_complete(&self) -> bool {
        self.count == self.total as usize
    }

    fn into_message(mut self) -> Message {
        self.buf.truncate((self.total as usize - 1) * MAX_PAYLOAD + self.last_len);
        Message { kind: self.kind, body: self.buf }
    }
}

#[derive(Default)]
struct Counters {
    frames_sent: u64,
    frames_received: u64,
    crc_errors: u64,
    retransmits: u64,
    messages_dropped: u64,
}

struct State {
    connected: bool,
    last_error: Option<ErrorCode>,
    counters: Counters,

    next_reliable: u32,
    next_video: u32,
    next_ordinal: u64,
    inflight: HashMap<(u32, u16), InFlight>,

    reliable_next: u32,
    reliable_done: BTreeMap<u32, Message>,
    reliable_partial: HashMap<u32, Partial>,

    video_partial: HashMap<u32, Partial>,
    video_floor: u32,
    video_resolved: BTreeSet<u32>,
    video_max_seen: Option<u32>,
    video_gap_since: Option<(u32, Instant)>,

    delivered: VecDeque<Message>,
}

impl State {
    fn new() -> Self {
        Self {
            connected: true,
            last_error: None,
            counters: Counters::default(),
            next_reliable: 0,
            next_video: 0,
            next_ordinal: 0,
            inflight: HashMap::new(),
            reliable_next: 0,
            reliable_done: BTreeMap::new(),
            reliable_partial: HashMap::new(),
            video_partial: HashMap::new(),
            video_floor: 0,
            video_resolved: BTreeSet::new(),
            video_max_seen: None,
            video_gap_since: None,
            delivered: VecDeque::new(),
        }
    }
}

pub(super) struct SessionCore {
    link: Arc<dyn Link>,
    config: TransportConfig,
    session: u16,
    state: Mutex<State>,
    /// Signalled when window space frees up or the session dies.
    space: Condvar,
    /// Signalled when a message is delivered or the session dies.
    readable: Condvar,
    stop: AtomicBool,
    pump: Mutex<Option<JoinHandle<()>>>,
}

fn control_frame(session: u16, seq: u32, index: u16, total: u16, f: u8) -> Vec<u8> {
    let mut out = Vec::with_capacity(frame::HEADER_LEN + frame::CRC_LEN);
    frame::encode_into(&mut out, session, seq, index, total, f, &[]);
    out
}

impl SessionCore {
    pub(super) fn connect(link: Arc<dyn Link>, config: TransportConfig) -> Result<Arc<Self>, TransportError> {
        let session = loop {
            let s: u16 = rand::random();
            if s != 0 {
                break s;
            }
        };
        let hello = control_frame(session, 0, 0, 0, flags::HELLO);
        let attempts = config.handshake_retries + 1;
        let per_attempt = config.handshake_timeout / attempts;
        let mut sent = 0;
        for _ in 0..attempts {
            link.send(&hello)?;
            sent += 1;
            let deadline = Instant::now() + per_attempt;
            loop {
                let now = Instant::now();
                if now >= deadline {
                    break;
                }
                let Some(bytes) = link.recv(deadline - now)? else { continue };
                if let Ok(view) = FrameView::parse(&bytes) {
                    if view.session == session && view.flags & (flags::HELLO | flags::ACK) == flags::HELLO | flags::ACK {
                        let core = Self::start(link, config, session);
                        {
                            let mut st = core.lock();
                            st.counters.frames_sent = sent;
                            st.counters.frames_received = 1;
                        }
                        return Ok(core);
                    }
                }
            }
        }
        Err(TransportError::Unreachable(config.handshake_timeout))
    }

    pub(super) fn accept(link: Arc<dyn Link>, config: TransportConfig, timeout: Duration) -> Result<Arc<Self>, TransportError> {
        let deadline = Instant::now() + timeout;
        loop {
            let now = Instant::now();
            if now >= deadline {
                return Err(TransportError::Unreachable(timeout));
            }
            let Some(bytes) = link.recv((deadline - now).min(Duration::from_millis(50)))? else { continue };
            let Ok(view) = FrameView::parse(&bytes) else { continue };
            if view.flags & (flags::HELLO | flags::ACK) == flags::HELLO && view.session != 0 {
                link.send(&control_frame(view.session, 0, 0, 0, flags::HELLO | flags::ACK))?;
                let core = Self::start(link, config, view.session);
                {
                    let mut st = core.lock();
                    st.counters.frames_sent = 1;
                    st.counters.frames_received = 1;
                }
                return Ok(core);
            }
        }
    }

    fn start(link: Arc<dyn Link>, config: TransportConfig, session: u16) -> Arc<Self> {
        let core = Arc::new(Self {
            link,
            config,
            session,
            state: Mutex::new(State::new()),
            space: Condvar::new(),
            readable: Condvar::new(),
            stop: AtomicBool::new(false),
            pump: Mutex::new(None),
        });
        let pump_core = core.clone();
        let handle = std::thread::Builder::new()
            .name(format!("transport-{session:04x}"))
            .spawn(move || pump_core.pump())
            .expect("spawn transport pump");
        *core.pump.lock().unwrap() = Some(handle);
        core
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap()
    }

    pub(super) fn is_connected(&self) -> bool {
        self.lock().connected
    }

    pub(super) fn last_error(&self) -> Option<ErrorCode> {
        self.lock().last_error
    }

    pub(super) fn describe(&self) -> String {
        format!("{} session {:04x}", self.link.describe(), self.session)
    }

    pub(super) fn status(&self) -> TransportStatus {
        let st = self.lock();
        TransportStatus {
            connected: st.connected,
            session: self.session,
            frames_sent: st.counters.frames_sent,
            frames_received: st.counters.frames_received,
            crc_errors: st.counters.crc_errors,
            retransmits: st.counters.retransmits,
            messages_dropped: st.counters.messages_dropped,
            last_error: st.last_error,
        }
    }

    pub(super) fn reset(&self) {
        let mut st = self.lock();
        st.counters = Counters::default();
        st.last_error = None;
        // Reliable partials hold fragments the peer already saw acknowledged;
        // dropping them would lose those messages for good.
        st.video_partial.clear();
        st.video_resolved.clear();
        st.video_gap_since = None;
        st.video_floor = st.video_max_seen.map(|m| m.wrapping_add(1)).unwrap_or(st.video_floor);
    }

    pub(super) fn disconnect(&self) {
        let bye = control_frame(self.session, 0, 0, 0, flags::BYE);
        for _ in 0..3 {
            let _ = self.link.send(&bye);
        }
        {
            let mut st = self.lock();
            st.counters.frames_sent += 3;
            st.connected = false;
        }
        self.shutdown();
    }

    pub(super) fn shutdown(&self) {
        self.stop.store(true, Ordering::SeqCst);
        {
            let mut st = self.lock();
            st.connected = false;
        }
        self.space.notify_all();
        self.readable.notify_all();
        let handle = self.pump.lock().unwrap().take();
        if let Some(h) = handle {
            if h.thread().id() != std::thread::current().id() {
                let _ = h.join();
            }
        }
    }

    fn dead_error(st: &State) -> TransportError {
        if st.last_error == Some(ErrorCode::PeerLost) {
            TransportError::PeerLost
        } else {
            TransportError::NotConnected
        }
    }

    pub(super) fn write(&self, msg: &Message) -> Result<SendReceipt, TransportError> {
        if msg.body.len() > MAX_BODY {
            return Err(TransportError::TooLarge(msg.body.len()));
        }
        if msg.kind.is_reliable() {
            self.write_reliable(msg)
        } else {
            self.write_video(msg)
        }
    }

    fn write_reliable(&self, msg: &Message) -> Result<SendReceipt, TransportError> {
        let total = frame::frames_for(msg.body.len());
        let fl = frame::flags_for(msg.kind);
        let seq = {
            let mut st = self.lock();
            if !st.connected {
                return Err(Self::dead_error(&st));
            }
            let s = st.next_reliable;
            st.next_reliable = s.wrapping_add(1);
            s
        };
        for index in 0..total {
            let chunk = chunk_of(&msg.body, index);
            let mut bytes = Vec::with_capacity(frame::HEADER_LEN + chunk.len() + frame::CRC_LEN);
            frame::encode_into(&mut bytes, self.session, seq, index as u16, total as u16, fl, chunk);
            let bytes = Arc::new(bytes);
            {
                let mut st = self.lock();
                loop {
                    if !st.connected {
                        return Err(Self::dead_error(&st));
                    }
                    if st.inflight.len() < self.config.window {
                        break;
                    }
                    st = self.space.wait_timeout(st, Duration::from_millis(50)).unwrap().0;
                }
                let ordinal = st.next_ordinal;
                st.next_ordinal += 1;
                st.inflight.insert(
                    (seq, index as u16),
                    InFlight { bytes: bytes.clone(), sent_at: Instant::now(), retries: 0, ordinal, fast_done: false },
                );
                st.counters.frames_sent += 1;
            }
            self.link.send(&bytes)?;
        }
        Ok(SendReceipt { msg_seq: seq, frames: total })
    }

    fn write_video(&self, msg: &Message) -> Result<SendReceipt, TransportError> {
        let total = frame::frames_for(msg.body.len());
        let fl = frame::flags_for(msg.kind);
        let seq = {
            let mut st = self.lock();
            if !st.connected {
                return Err(Self::dead_error(&st));
            }
            let s = st.next_video;
            st.next_video = s.wrapping_add(1);
            s
        };
        let started = Instant::now();
        let mut sent_bytes = 0usize;
        let mut buf = Vec::with_capacity(frame::MAX_FRAME);
        for index in 0..total {
            let chunk = chunk_of(&msg.body, index);
            buf.clear();
            frame::encode_into(&mut buf, self.session, seq, index as u16, total as u16, fl, chunk);
            self.link.send(&buf)?;
            sent_bytes += buf.len();
            if let Some(rate) = self.config.video_pacing {
                let due = started + Duration::from_secs_f64(sent_bytes as f64 / rate);
                let now = Instant::now();
                if due > now + Duration::from_micros(200) {
                    std::thread::sleep(due - now);
                }
            }
        }
        self.lock().counters.frames_sent += total as u64;
        Ok(SendReceipt { msg_seq: seq, frames: total })
    }

    pub(super) fn read(&self, timeout: Duration) -> Result<Option<Message>, TransportError> {
        let deadline = Instant::now() + timeout;
        let mut st = self.lock();
        loop {
            if let Some(m) = st.delivered.pop_front() {
                return Ok(Some(m));
            }
            if !st.connected {
                return Err(Self::dead_error(&st));
            }
            let now = Instant::now();
            if now >= deadline {
                return Ok(None);
            }
            st = self.readable.wait_timeout(st, deadline - now).unwrap().0;
        }
    }

    pub(super) fn flush(&self, timeout: Duration) -> Result<bool, TransportError> {
        let deadline = Instant::now() + timeout;
        let mut st = self.lock();
        loop {
            if !st.connected {
                return Err(Self::dead_error(&st));
            }
            if st.inflight.is_empty() {
                return Ok(true);
            }
            let now = Instant::now();
            if now >= deadline {
                return Ok(false);
            }
            st = self.space.wait_timeout(st, (deadline - now).min(Duration::from_millis(50))).unwrap().0;
        }
    }

    // -----------------------------------------------------------------------
    // Background pump: receive, acknowledge, reassemble, retransmit.

    fn pump(self: Arc<Self>) {
        let mut last_timers = Instant::now();
        let mut outbox: Vec<Arc<Vec<u8>>> = Vec::new();
        while !self.stop.load(Ordering::SeqCst) {
            match self.link.recv(self.config.poll_interval) {
                Ok(Some(bytes)) => {
                    self.handle(&bytes, &mut outbox);
                    // Drain whatever else is queued before checking timers.
                    for _ in 0..64 {
                        match self.link.recv(Duration::ZERO) {
                            Ok(Some(more)) => self.handle(&more, &mut outbox),
                            _ => break,
                        }
                    }
                }
                Ok(None) => {}
                Err(e) => {
                    log::debug!("transport recv error: {e}");
                    std::thread::sleep(self.config.poll_interval);
                }
            }
            let now = Instant::now();
            if now.duration_since(last_timers) >= Duration::from_millis(1) {
                last_timers = now;
                self.timers(now, &mut outbox);
            }
            self.flush_outbox(&mut outbox);
        }
    }

    fn flush_outbox(&self, outbox: &mut Vec<Arc<Vec<u8>>>) {
        for bytes in outbox.drain(..) {
            let _ = self.link.send(&bytes);
        }
    }

    fn handle(&self, bytes: &[u8], outbox: &mut Vec<Arc<Vec<u8>>>) {
        let view = match FrameView::parse(bytes) {
            Ok(v) => v,
            Err(frame::DecodeError::Crc) => {
                self.lock().counters.crc_errors += 1;
                return;
            }
            Err(_) => return,
        };
        if view.session != self.session {
            return;
        }
        let mut st = self.lock();
        st.counters.frames_received += 1;
        let f = view.flags;
        if f & flags::HELLO != 0 {
            if f & flags::ACK == 0 {
                // The peer missed our handshake reply.
                outbox.push(Arc::new(control_frame(self.session, 0, 0, 0, flags::HELLO | flags::ACK)));
                st.counters.frames_sent += 1;
            }
            return;
        }
        if f & flags::BYE != 0 {
            st.connected = false;
            st.last_error = Some(ErrorCode::PeerClosed);
            st.inflight.clear();
            drop(st);
            self.space.notify_all();
            self.readable.notify_all();
            return;
        }
        if f & flags::ACK != 0 {
            self.on_ack(&mut st, view.msg_seq, view.frag_index, outbox);
            drop(st);
            self.space.notify_all();
            return;
        }
        let Some(kind) = frame::kind_of(f) else { return };
        if kind.is_reliable() {
            outbox.push(Arc::new(control_frame(
                self.session,
                view.msg_seq,
                view.frag_index,
                view.frag_total,
                flags::ACK | flags::CONTROL,
            )));
            st.counters.frames_sent += 1;
            if self.on_reliable(&mut st, kind, &view) {
                drop(st);
                self.readable.notify_all();
            }
        } else if self.on_video(&mut st, &view) {
            drop(st);
            self.readable.notify_all();
        }
    }

    fn on_ack(&self, st: &mut State, seq: u32, index: u16, outbox: &mut Vec<Arc<Vec<u8>>>) {
        let Some(acked) = st.inflight.remove(&(seq, index)) else { return };
        let threshold = self.config.fast_retransmit_after;
        let now = Instant::now();
        let mut resent = 0;
        for entry in st.inflight.values_mut() {
            if !entry.fast_done && entry.ordinal + threshold < acked.ordinal {
                entry.fast_done = true;
                entry.sent_at = now;
                outbox.push(entry.bytes.clone());
                resent += 1;
            }
        }
        st.counters.retransmits += resent;
        st.counters.frames_sent += resent;
    }

    fn on_reliable(&self, st: &mut State, kind: MessageKind, view: &FrameView<'_>) -> bool {
        let seq = view.msg_seq;
        if seq.wrapping_sub(st.reliable_next) > u32::MAX / 2 || st.reliable_done.contains_key(&seq) {
            return false;
        }
        let now = Instant::now();
        let partial = st
            .reliable_partial
            .entry(seq)
            .or_insert_with(|| Partial::new(kind, view.frag_total, now));
        if partial.total != view.frag_total || partial.kind != kind {
            return false;
        }
        partial.insert(view.frag_index, view.payload);
        if !partial.is_complete() {
            return false;
        }
        let msg = st.reliable_partial.remove(&seq).unwrap().into_message();
        st.reliable_done.insert(seq, msg);
        let mut delivered = false;
        loop {
            let next = st.reliable_next;
            let Some(m) = st.reliable_done.remove(&next) else { break };
            st.delivered.push_back(m);
            st.reliable_next = next.wrapping_add(1);
            delivered = true;
        }
        delivered
    }

    fn on_video(&self, st: &mut State, view: &FrameView<'_>) -> bool {
        let seq = view.msg_seq;
        if seq.wrapping_sub(st.video_floor) > u32::MAX / 2 || st.video_resolved.contains(&seq) {
            return false;
        }
        st.video_max_seen = Some(match st.video_max_seen {
            Some(m) if m.wrapping_sub(seq) < u32::MAX / 2 => m,
            _ => seq,
        });
        let now = Instant::now();
        let partial = st
            .video_partial
            .entry(seq)
            .or_insert_with(|| Partial::new(MessageKind::VideoData, view.frag_total, now));
        if partial.total != view.frag_total {
            return false;
        }
        partial.insert(view.frag_index, view.payload);
        if !partial.is_complete() {
            return false;
        }
        let msg = st.video_partial.remove(&seq).unwrap().into_message();
        st.delivered.push_back(msg);
        st.video_resolved.insert(seq);
        true
    }

    fn timers(&self, now: Instant, outbox: &mut Vec<Arc<Vec<u8>>>) {
        let mut st = self.lock();
        if !st.connected {
            return;
        }
        let mut lost = false;
        let mut resent = 0;
        for entry in st.inflight.values_mut() {
            let rto = self.config.rto * 2u32.saturating_pow(entry.retries.min(16));
            if now.duration_since(entry.sent_at) < rto {
                continue;
            }
            if entry.retries >= self.config.max_retries {
                lost = true;
                break;
            }
            entry.retries += 1;
            entry.sent_at = now;
            outbox.push(entry.bytes.clone());
            resent += 1;
        }
        st.counters.retransmits += resent;
        st.counters.frames_sent += resent;
        if lost {
            st.connected = false;
            st.last_error = Some(ErrorCode::PeerLost);
            st.inflight.clear();
            outbox.clear();
            drop(st);
            log::warn!("transport session {:04x}: peer lost", self.session);
            self.space.notify_all();
            self.readable.notify_all();
            return;
        }
        self.sweep_video(&mut st, now);
    }

    fn sweep_video(&self, st: &mut State, now: Instant) {
        let limit = self.config.reassembly_timeout;
        let stale: Vec<u32> = st
            .video_partial
            .iter()
            .filter(|(_, p)| now.duration_since(p.started) > limit)
            .map(|(&s, _)| s)
            .collect();
        for seq in stale {
            st.video_partial.remove(&seq);
            st.video_resolved.insert(seq);
            st.counters.messages_dropped += 1;
        }
        let Some(max_seen) = st.video_max_seen else { return };
        loop {
            let floor = st.video_floor;
            let ahead = floor.wrapping_sub(max_seen);
            if ahead != 0 && ahead < u32::MAX / 2 {
                break;
            }
            if st.video_resolved.remove(&floor) {
                st.video_floor = floor.wrapping_add(1);
                st.video_gap_since = None;
                continue;
            }
            if st.video_partial.contains_key(&floor) {
                break;
            }
            // Never seen, yet a later message has arrived.
            match st.video_gap_since {
                Some((f, since)) if f == floor => {
                    if now.duration_since(since) > limit {
                        st.counters.messages_dropped += 1;
                        st.video_floor = floor.wrapping_add(1);
                        st.video_gap_since = None;
                        continue;
                    }
                    break;
                }
                _ => {
                    st.video_gap_since = Some((floor, now));
                    break;
                }
            }
        }
    }
}

fn chunk_of(body: &[u8], index: usize) -> &[u8] {
    let start = index * MAX_PAYLOAD;
    let end = (start + MAX_PAYLOAD).min(body.len());
    &body[start.min(body.len())..end]
}
