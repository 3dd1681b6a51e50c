//! Datagram links carrying encoded frames.

use std::collections::VecDeque;
use std::io;
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::frame::MAX_FRAME;

/// An unreliable, unordered datagram service between two peers.
pub trait Link: Send + Sync {
    fn send(&self, datagram: &[u8]) -> io::Result<()>;

    /// Waits up to `timeout` for one datagram.
    fn recv(&self, timeout: Duration) -> io::Result<Option<Vec<u8>>>;

    fn describe(&self) -> String {
        "link".into()
    }
}

const SOCKET_BUFFER: usize = 4 << 20;

/// UDP socket link. The peer is fixed at construction (connecting side) or
/// learned from the first datagram received (listening side).
pub struct UdpLink {
    socket: UdpSocket,
    peer: Mutex<Option<SocketAddr>>,
}

impl UdpLink {
    fn socket(bind: SocketAddr) -> io::Result<UdpSocket> {
        let domain = if bind.is_ipv4() { socket2::Domain::IPV4 } else { socket2::Domain::IPV6 };
        let sock = socket2::Socket::new(domain, socket2::Type::DGRAM, Some(socket2::Protocol::UDP))?;
        // Best effort: the kernel caps these at rmem_max / wmem_max.
        let _ = sock.set_recv_buffer_size(SOCKET_BUFFER);
        let _ = sock.set_send_buffer_size(SOCKET_BUFFER);
        sock.bind(&bind.into())?;
        Ok(sock.into())
    }

    /// Binds an ephemeral local port and targets `endpoint` (`host:port`).
    pub fn connect(endpoint: &str) -> io::Result<Self> {
        let peer = resolve(endpoint)?;
        let bind: SocketAddr = if peer.is_ipv4() { "0.0.0.0:0" } else { "[::]:0" }.parse().unwrap();
        Ok(Self { socket: Self::socket(bind)?, peer: Mutex::new(Some(peer)) })
    }

    /// Binds `endpoint` and waits for a peer to speak first.
    pub fn listen(endpoint: &str) -> io::Result<Self> {
        Ok(Self { socket: Self::socket(resolve(endpoint)?)?, peer: Mutex::new(None) })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.socket.local_addr()
    }

    pub fn peer(&self) -> Option<SocketAddr> {
        *self.peer.lock().unwrap()
    }
}

fn resolve(endpoint: &str) -> io::Result<SocketAddr> {
    endpoint
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, format!("cannot resolve `{endpoint}`")))
}

impl Link for UdpLink {
    fn send(&self, datagram: &[u8]) -> io::Result<()> {
        let Some(peer) = self.peer() else {
            return Err(io::Error::new(io::ErrorKind::NotConnected, "no peer yet"));
        };
        loop {
            match self.socket.send_to(datagram, peer) {
                Ok(_) => return Ok(()),
                // Full socket buffer: the frame counts as lost, like on a wire.
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => return Ok(()),
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) if e.kind() == io::ErrorKind::ConnectionRefused => return Ok(()),
                Err(e) => return Err(e),
            }
        }
    }

    fn recv(&self, timeout: Duration) -> io::Result<Option<Vec<u8>>> {
        self.socket.set_read_timeout(Some(timeout.max(Duration::from_micros(1))))?;
        let mut buf = vec![0u8; MAX_FRAME + 64];
        loop {
            match self.socket.recv_from(&mut buf) {
                Ok((n, from)) => {
                    let mut peer = self.peer.lock().unwrap();
                    match *peer {
                        None => *peer = Some(from),
                        Some(p) if p != from => continue,
                        Some(_) => {}
                    }
                    buf.truncate(n);
                    return Ok(Some(buf));
                }
                Err(e) => match e.kind() {
                    io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => return Ok(None),
                    io::ErrorKind::Interrupted => continue,
                    io::ErrorKind::ConnectionRefused | io::ErrorKind::ConnectionReset => return Ok(None),
                    _ => return Err(e),
                },
            }
        }
    }

    fn describe(&self) -> String {
        match (self.socket.local_addr(), self.peer()) {
            (Ok(local), Some(peer)) => format!("udp {local} -> {peer}"),
            (Ok(local), None) => format!("udp {local}"),
            _ => "udp".into(),
        }
    }
}

/// Impairments applied by the in-memory test channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelConfig {
    /// Probability that a datagram is silently dropped.
    pub drop_probability: f64,
    /// Probability that one bit of a delivered datagram is flipped.
    pub corrupt_probability: f64,
    /// Maximum number of later datagrams that may overtake an earlier one.
    /// Zero and one both mean in-order delivery.
    pub reorder_depth: usize,
    pub seed: u64,
}

impl ChannelConfig {
    pub fn perfect() -> Self {
        Self { drop_probability: 0.0, corrupt_probability: 0.0, reorder_depth: 0, seed: 0 }
    }

    pub fn lossy(drop_probability: f64, reorder_depth: usize, seed: u64) -> Self {
        Self { drop_probability, corrupt_probability: 0.0, reorder_depth, seed }
    }
}

struct Inbox {
    rx: Receiver<Vec<u8>>,
    // Datagrams with the number of later ones that have overtaken them.
    pending: VecDeque<(Vec<u8>, usize)>,
    rng: ChaCha8Rng,
}

/// One end of a seeded, in-process datagram channel with configurable loss,
/// corruption and bounded reordering.
pub struct MemLink {
    tx: Sender<Vec<u8>>,
    tx_rng: Mutex<ChaCha8Rng>,
    inbox: Mutex<Inbox>,
    config: ChannelConfig,
    name: &'static str,
}

impl MemLink {
    pub fn pair(config: ChannelConfig) -> (Arc<MemLink>, Arc<MemLink>) {
        let (a_tx, b_rx) = crossbeam_channel::unbounded();
        let (b_tx, a_rx) = crossbeam_channel::unbounded();
        let make = |tx, rx, salt: u64, name| {
            Arc::new(MemLink {
                tx,
                tx_rng: Mutex::new(ChaCha8Rng::seed_from_u64(config.seed ^ salt)),
                inbox: Mutex::new(Inbox {
                    rx,
                    pending: VecDeque::new(),
                    rng: ChaCha8Rng::seed_from_u64(config.seed ^ salt ^ 0x5EED),
                }),
                config,
                name,
            })
        };
        (make(a_tx, a_rx, 0xA, "mem-a"), make(b_tx, b_rx, 0xB, "mem-b"))
    }
}

impl Link for MemLink {
    fn send(&self, datagram: &[u8]) -> io::Result<()> {
        let mut rng = self.tx_rng.lock().unwrap();
        if self.config.drop_probability > 0.0 && rng.gen::<f64>() < self.config.drop_probability {
            return Ok(());
        }
        let mut bytes = datagram.to_vec();
        if self.config.corrupt_probability > 0.0 && rng.gen::<f64>() < self.config.corrupt_probability {
            let bit = rng.gen_range(0..bytes.len() * 8);
            bytes[bit / 8] ^= 1 << (bit % 8);
        }
        // A vanished peer looks like loss.
        let _ = self.tx.send(bytes);
        Ok(())
    }

    fn recv(&self, timeout: Duration) -> io::Result<Option<Vec<u8>>> {
        let mut inbox = self.inbox.lock().unwrap();
        while let Ok(d) = inbox.rx.try_recv() {
            inbox.pending.push_back((d, 0));
        }
        if inbox.pending.is_empty() {
            match inbox.rx.recv_timeout(timeout) {
                Ok(d) => inbox.pending.push_back((d, 0)),
                Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => return Ok(None),
            }
        }
        let limit = self.config.reorder_depth.max(1);
        let window = limit.min(inbox.pending.len());
        let forced = inbox.pending.iter().take(window).position(|(_, n)| *n + 1 >= limit);
        let pick = match forced {
            Some(i) => i,
            None if window > 1 => inbox.rng.gen_range(0..window),
            None => 0,
        };
        for entry in inbox.pending.iter_mut().take(pick) {
            entry.1 += 1;
        }
        Ok(inbox.pending.remove(pick).map(|(d, _)| d))
    }

    fn describe(&self) -> String {
        self.name.into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_channel_is_fifo() {
        let (a, b) = MemLink::pair(ChannelConfig::perfect());
        for i in 0..10u8 {
            a.send(&[i]).unwrap();
        }
        let got: Vec<u8> = (0..10).map(|_| b.recv(Duration::from_millis(10)).unwrap().unwrap()[0]).collect();
        assert_eq!(got, (0..10).collect::<Vec<_>>());
        assert_eq!(b.recv(Duration::from_millis(1)).unwrap(), None);
    }

    #[test]
    fn reordering_is_bounded() {
        let depth = 8;
        let (a, b) = MemLink::pair(ChannelConfig::lossy(0.0, depth, 42));
        let n = 2000u32;
        for i in 0..n {
            a.send(&i.to_be_bytes()).unwrap();
        }
        let got: Vec<u32> = (0..n)
            .map(|_| u32::from_be_bytes(b.recv(Duration::from_millis(10)).unwrap().unwrap().try_into().unwrap()))
            .collect();
        let mut sorted = got.clone();
        sorted.sort();
        assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        assert_ne!(got, sorted, "expected some reordering");
        for (pos, &v) in got.iter().enumerate() {
            assert!((pos as i64 - v as i64).abs() < depth as i64, "{v} delivered at {pos}");
        }
    }

    #[test]
    fn drop_rate_matches() {
        let (a, b) = MemLink::pair(ChannelConfig::lossy(0.1, 0, 7));
        for _ in 0..10_000 {
            a.send(&[0]).unwrap();
        }
        let mut n = 0;
        while b.recv(Duration::from_millis(1)).unwrap().is_some() {
            n += 1;
        }
        // Binomial(10000, 0.9): sd = 30.
        assert!((n as i64 - 9000).abs() < 150, "{n}");
    }

    #[test]
    fn udp_learns_peer() {
        let server = UdpLink::listen("127.0.0.1:0").unwrap();
        let addr = server.local_addr().unwrap().to_string();
        let client = UdpLink::connect(&addr).unwrap();
        client.send(b"hi").unwrap();
        assert_eq!(server.recv(Duration::from_secs(1)).unwrap().unwrap(), b"hi");
        server.send(b"yo").unwrap();
        assert_eq!(client.recv(Duration::from_secs(1)).unwrap().unwrap(), b"yo");
    }
}
