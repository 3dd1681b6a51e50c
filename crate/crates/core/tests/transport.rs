use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use ccdaq::transport::frame::{self, flags, Frame, MAX_PAYLOAD};
use ccdaq::transport::{
    ChannelConfig, ErrorCode, Link, MemLink, Message, MessageKind, Transport, TransportConfig, TransportError,
};

fn pair(channel: ChannelConfig, config: TransportConfig) -> (Transport, Transport) {
    let (a, b) = MemLink::pair(channel);
    let server = Transport::new(config.clone());
    let cfg = config.clone();
    let acceptor = thread::spawn(move || {
        server.accept_link(b, Duration::from_secs(2)).unwrap();
        server
    });
    let client = Transport::new(cfg);
    client.connect_link(a).unwrap();
    (client, acceptor.join().unwrap())
}

fn body(len: usize, salt: u8) -> Vec<u8> {
    (0..len).map(|i| (i as u8).wrapping_mul(31).wrapping_add(salt)).collect()
}

#[test]
fn handshake_and_round_trip() {
    let (c, s) = pair(ChannelConfig::perfect(), TransportConfig::default());
    assert!(c.is_connected() && s.is_connected());
    assert_eq!(c.status().session, s.status().session);
    let msg = Message::new(MessageKind::Command, body(5000, 1));
    let receipt = c.write_msg(&msg).unwrap();
    assert_eq!(receipt.frames, 4);
    assert_eq!(s.read_msg(Duration::from_secs(1)).unwrap(), Some(msg));
    s.write_msg(&Message::new(MessageKind::Reply, b"ok".to_vec())).unwrap();
    let reply = c.read_msg(Duration::from_secs(1)).unwrap().unwrap();
    assert_eq!(reply.kind, MessageKind::Reply);
    assert!(c.flush(Duration::from_secs(1)).unwrap());
}

#[test]
fn empty_body_round_trips() {
    let (c, s) = pair(ChannelConfig::perfect(), TransportConfig::default());
    c.write_msg(&Message::new(MessageKind::ServiceRequest, Vec::new())).unwrap();
    c.write_msg(&Message::new(MessageKind::VideoData, Vec::new())).unwrap();
    let a = s.read_msg(Duration::from_secs(1)).unwrap().unwrap();
    let b = s.read_msg(Duration::from_secs(1)).unwrap().unwrap();
    let mut kinds = [a.kind, b.kind];
    kinds.sort_by_key(|k| k.is_reliable());
    assert_eq!(kinds, [MessageKind::VideoData, MessageKind::ServiceRequest]);
    assert!(a.body.is_empty() && b.body.is_empty());
}

#[test]
fn unreachable_peer_times_out_near_handshake_limit() {
    let (a, _b) = MemLink::pair(ChannelConfig::perfect());
    let t = Transport::new(TransportConfig::default());
    let start = Instant::now();
    let err = t.connect_link(a).unwrap_err();
    let took = start.elapsed();
    assert!(matches!(err, TransportError::Unreachable(_)));
    assert!(took >= Duration::from_millis(450) && took < Duration::from_millis(800), "{took:?}");
    assert_eq!(t.status().last_error, Some(ErrorCode::Unreachable));
}

#[test]
fn udp_unreachable() {
    // Bound but silent socket.
    let silent = std::net::UdpSocket::bind("127.0.0.1:0").unwrap();
    let addr = silent.local_addr().unwrap().to_string();
    let t = Transport::new(TransportConfig::default());
    let err = t.connect(&addr).unwrap_err();
    assert_eq!(err.code(), ErrorCode::Unreachable);
}

#[test]
fn second_connect_is_rejected() {
    let (c, _s) = pair(ChannelConfig::perfect(), TransportConfig::default());
    let (a, _b) = MemLink::pair(ChannelConfig::perfect());
    assert!(matches!(c.connect_link(a), Err(TransportError::AlreadyConnected)));
}

#[test]
fn disconnect_notifies_peer() {
    let (c, s) = pair(ChannelConfig::perfect(), TransportConfig::default());
    c.disconnect().unwrap();
    let deadline = Instant::now() + Duration::from_secs(1);
    while s.is_connected() && Instant::now() < deadline {
        thread::sleep(Duration::from_millis(5));
    }
    assert!(!s.is_connected());
    assert_eq!(s.status().last_error, Some(ErrorCode::PeerClosed));
    assert!(matches!(c.write_msg(&Message::new(MessageKind::Command, vec![1])), Err(TransportError::NotConnected)));
}

#[test]
fn reset_zeroes_counters_and_keeps_session() {
    let (c, s) = pair(ChannelConfig::perfect(), TransportConfig::default());
    c.write_msg(&Message::new(MessageKind::Command, body(3000, 2))).unwrap();
    s.read_msg(Duration::from_secs(1)).unwrap().unwrap();
    c.flush(Duration::from_secs(1)).unwrap();
    assert!(c.status().frames_sent > 0);
    let st = c.reset().unwrap();
    assert_eq!((st.frames_sent, st.frames_received, st.retransmits, st.crc_errors), (0, 0, 0, 0));
    assert!(st.connected);
    c.write_msg(&Message::new(MessageKind::Command, vec![9])).unwrap();
    assert_eq!(s.read_msg(Duration::from_secs(1)).unwrap().unwrap().body, vec![9]);
}

#[test]
fn peer_lost_after_retries() {
    let (c, s) = pair(ChannelConfig::perfect(), TransportConfig::default());
    // Kill the acceptor's pump without sending BYE so nothing is acked.
    drop(s);
    let start = Instant::now();
    c.write_msg(&Message::new(MessageKind::Command, vec![1])).unwrap();
    let err = loop {
        match c.flush(Duration::from_secs(5)) {
            Err(e) => break e,
            Ok(true) => panic!("unexpected ack"),
            Ok(false) => {}
        }
    };
    assert!(matches!(err, TransportError::PeerLost));
    // 20 + 40 + 80 + 160 + 320 + 640 ms of backoff.
    let took = start.elapsed();
    assert!(took >= Duration::from_millis(1200) && took < Duration::from_secs(3), "{took:?}");
    assert_eq!(c.status().last_error, Some(ErrorCode::PeerLost));
}

/// Drives the acceptor side by hand with raw frames.
fn raw_peer() -> (Transport, Arc<MemLink>, u16) {
    let (a, b) = MemLink::pair(ChannelConfig::perfect());
    let t = Transport::new(TransportConfig::default());
    let peer = b.clone();
    let responder = thread::spawn(move || loop {
        let bytes = peer.recv(Duration::from_secs(2)).unwrap().unwrap();
        let f = Frame::decode(&bytes).unwrap();
        if f.flags == flags::HELLO {
            let ack = Frame { flags: flags::HELLO | flags::ACK, ..f.clone() };
            peer.send(&ack.encode()).unwrap();
            return f.session;
        }
    });
    t.connect_link(a).unwrap();
    let session = responder.join().unwrap();
    (t, b, session)
}

fn fragments(session: u16, seq: u32, kind: MessageKind, body: &[u8]) -> Vec<Vec<u8>> {
    let total = frame::frames_for(body.len());
    (0..total)
        .map(|i| {
            let end = ((i + 1) * MAX_PAYLOAD).min(body.len());
            Frame {
                session,
                msg_seq: seq,
                frag_index: i as u16,
                frag_total: total as u16,
                flags: frame::flags_for(kind),
                payload: body[i * MAX_PAYLOAD..end].to_vec(),
            }
            .encode()
        })
        .collect()
}

#[test]
fn reverse_order_fragments_reassemble() {
    let (t, peer, session) = raw_peer();
    let data = body(10 * MAX_PAYLOAD + 17, 5);
    for f in fragments(session, 0, MessageKind::Reply, &data).into_iter().rev() {
        peer.send(&f).unwrap();
    }
    let got = t.read_msg(Duration::from_secs(1)).unwrap().unwrap();
    assert_eq!(got.body, data);
    // Every fragment is acknowledged.
    let mut acks = 0;
    while let Some(bytes) = peer.recv(Duration::from_millis(50)).unwrap() {
        if Frame::decode(&bytes).unwrap().flags & flags::ACK != 0 {
            acks += 1;
        }
    }
    assert_eq!(acks, 11);
}

#[test]
fn reliable_messages_delivered_in_order() {
    let (t, peer, session) = raw_peer();
    for seq in [2u32, 0, 1] {
        for f in fragments(session, seq, MessageKind::Reply, &[seq as u8]) {
            peer.send(&f).unwrap();
        }
    }
    for want in 0..3u8 {
        assert_eq!(t.read_msg(Duration::from_secs(1)).unwrap().unwrap().body, vec![want]);
    }
}

#[test]
fn duplicate_messages_delivered_once() {
    let (t, peer, session) = raw_peer();
    let f = fragments(session, 0, MessageKind::Reply, b"x");
    peer.send(&f[0]).unwrap();
    peer.send(&f[0]).unwrap();
    assert_eq!(t.read_msg(Duration::from_secs(1)).unwrap().unwrap().body, b"x");
    assert_eq!(t.read_msg(Duration::from_millis(100)).unwrap(), None);
}

#[test]
fn corrupted_frames_counted() {
    let (t, peer, session) = raw_peer();
    let mut f = fragments(session, 0, MessageKind::Reply, b"abc").remove(0);
    let good = f.clone();
    f[16] ^= 0x40;
    peer.send(&f).unwrap();
    peer.send(&good).unwrap();
    assert_eq!(t.read_msg(Duration::from_secs(1)).unwrap().unwrap().body, b"abc");
    assert_eq!(t.status().crc_errors, 1);
}

#[test]
fn incomplete_video_is_dropped_and_later_frames_flow() {
    let config = TransportConfig { reassembly_timeout: Duration::from_millis(200), ..Default::default() };
    let (a, b) = MemLink::pair(ChannelConfig::perfect());
    let t = Transport::new(config);
    let peer = b.clone();
    let responder = thread::spawn(move || loop {
        let f = Frame::decode(&peer.recv(Duration::from_secs(2)).unwrap().unwrap()).unwrap();
        if f.flags == flags::HELLO {
            peer.send(&Frame { flags: flags::HELLO | flags::ACK, ..f.clone() }.encode()).unwrap();
            return f.session;
        }
    });
    t.connect_link(a).unwrap();
    let session = responder.join().unwrap();

    let v0 = body(3 * MAX_PAYLOAD, 1);
    let v2 = body(2 * MAX_PAYLOAD, 3);
    // Message 0 loses its middle fragment, message 1 never arrives.
    let f0 = fragments(session, 0, MessageKind::VideoData, &v0);
    b.send(&f0[0]).unwrap();
    b.send(&f0[2]).unwrap();
    for f in fragments(session, 2, MessageKind::VideoData, &v2) {
        b.send(&f).unwrap();
    }
    let got = t.read_msg(Duration::from_secs(1)).unwrap().unwrap();
    assert_eq!(got.body, v2);
    thread::sleep(Duration::from_millis(600));
    assert_eq!(t.status().messages_dropped, 2);
    // The late fragment no longer resurrects message 0.
    b.send(&f0[1]).unwrap();
    assert_eq!(t.read_msg(Duration::from_millis(100)).unwrap(), None);
}

#[test]
fn lossy_channel_delivers_everything_in_order() {
    let (c, s) = pair(ChannelConfig::lossy(0.05, 8, 11), TransportConfig::default());
    let n = 300;
    let reader = thread::spawn(move || {
        let mut got = Vec::new();
        for _ in 0..n {
            got.push(s.read_msg(Duration::from_secs(10)).unwrap().unwrap());
        }
        (got, s)
    });
    let mut sent = Vec::new();
    for i in 0..n {
        let len = (i * 7919) % 20_000;
        let m = Message::new(MessageKind::Command, body(len, i as u8));
        c.write_msg(&m).unwrap();
        sent.push(m);
    }
    let (got, _s) = reader.join().unwrap();
    assert_eq!(got, sent);
    assert!(c.status().retransmits > 0);
}

#[test]
fn too_large_is_rejected() {
    let (c, _s) = pair(ChannelConfig::perfect(), TransportConfig::default());
    let huge = Message::new(MessageKind::VideoData, vec![0; ccdaq::transport::MAX_BODY + 1]);
    assert!(matches!(c.write_msg(&huge), Err(TransportError::TooLarge(_))));
}

#[test]
fn udp_round_trip() {
    let server = Transport::new(TransportConfig::default());
    let link = Arc::new(ccdaq::transport::UdpLink::listen("127.0.0.1:0").unwrap());
    let addr = link.local_addr().unwrap().to_string();
    let handle = thread::spawn(move || {
        server.accept_link(link, Duration::from_secs(2)).unwrap();
        let m = server.read_msg(Duration::from_secs(2)).unwrap().unwrap();
        server.write_msg(&Message::new(MessageKind::Reply, m.body)).unwrap();
        server.flush(Duration::from_secs(2)).unwrap();
        server
    });
    let client = Transport::new(TransportConfig::default());
    client.connect(&addr).unwrap();
    let data = body(50_000, 7);
    client.write_msg(&Message::new(MessageKind::Command, data.clone())).unwrap();
    let back = client.read_msg(Duration::from_secs(2)).unwrap().unwrap();
    assert_eq!(back.body, data);
    let _server = handle.join().unwrap();
}

#[test]
fn udp_full_frame_video() {
    let frame_bytes = 2048 * 4608 * 2;
    let server = Transport::new(TransportConfig::default());
    let link = Arc::new(ccdaq::transport::UdpLink::listen("127.0.0.1:0").unwrap());
    let addr = link.local_addr().unwrap().to_string();
    let handle = thread::spawn(move || {
        server.accept_link(link, Duration::from_secs(2)).unwrap();
        let m = server.read_msg(Duration::from_secs(10)).unwrap();
        (m.map(|m| m.body.len()), server.status())
    });
    let client = Transport::new(TransportConfig::default());
    client.connect(&addr).unwrap();
    let data = body(frame_bytes, 3);
    let start = Instant::now();
    client.write_msg(&Message::new(MessageKind::VideoData, data)).unwrap();
    let (len, status) = handle.join().unwrap();
    let took = start.elapsed();
    eprintln!("{took:?} {:.1} MB/s {status:?}", frame_bytes as f64 / took.as_secs_f64() / 1e6);
    assert_eq!(len, Some(frame_bytes));
}
