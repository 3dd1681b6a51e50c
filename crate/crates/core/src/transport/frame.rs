//! Link-layer frame codec.
//!
//! | offset | size | field        |
//! |--------|------|--------------|
//! | 0      | 2    | magic `D1 4C`|
//! | 2      | 2    | session      |
//! | 4      | 4    | msg_seq      |
//! | 8      | 2    | frag_index   |
//! | 10     | 2    | frag_total   |
//! | 12     | 1    | flags        |
//! | 13     | 2    | payload_len  |
//! | 15     | n    | payload      |
//! | 15 + n | 4    | crc32        |
//!
//! All integers are big-endian. The CRC (CRC-32/ISO-HDLC) covers the header
//! and payload.

use super::MessageKind;

pub const MAGIC: [u8; 2] = [0xD1, 0x4C];
pub const HEADER_LEN: usize = 15;
pub const CRC_LEN: usize = 4;
pub const MAX_PAYLOAD: usize = 1472;
pub const MAX_FRAME: usize = HEADER_LEN + MAX_PAYLOAD + CRC_LEN;

/// Frame flag bits. The two high bits carry the message kind of reliable
/// frames (`00` command, `01` reply, `10` service request).
pub mod flags {
    pub const CONTROL: u8 = 0x01;
    pub const VIDEO: u8 = 0x02;
    pub const ACK: u8 = 0x04;
    pub const RESET: u8 = 0x08;
    pub const HELLO: u8 = 0x10;
    pub const BYE: u8 = 0x20;
    pub const KIND_SHIFT: u8 = 6;
    pub const KIND_MASK: u8 = 0xC0;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub session: u16,
    pub msg_seq: u32,
    pub frag_index: u16,
    pub frag_total: u16,
    pub flags: u8,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("frame shorter than header")]
    Truncated,
    #[error("bad magic")]
    BadMagic,
    #[error("payload length mismatch")]
    Length,
    #[error("crc mismatch")]
    Crc,
    #[error("fragment index out of range")]
    Fragment,
}

pub fn crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

impl Frame {
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len() + CRC_LEN
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        encode_into(
            &mut out,
            self.session,
            self.msg_seq,
            self.frag_index,
            self.frag_total,
            self.flags,
            &self.payload,
        );
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Frame, DecodeError> {
        let view = FrameView::parse(bytes)?;
        Ok(Frame {
            session: view.session,
            msg_seq: view.msg_seq,
            frag_index: view.frag_index,
            frag_total: view.frag_total,
            flags: view.flags,
            payload: view.payload.to_vec(),
        })
    }

    pub fn kind(&self) -> Option<MessageKind> {
        kind_of(self.flags)
    }
}

/// Encodes directly into `out` without building a [`Frame`].
pub fn encode_into(
    out: &mut Vec<u8>,
    session: u16,
    msg_seq: u32,
    frag_index: u16,
    frag_total: u16,
    flags: u8,
    payload: &[u8],
) {
    assert!(payload.len() <= MAX_PAYLOAD, "payload exceeds {MAX_PAYLOAD} bytes");
    let start = out.len();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&session.to_be_bytes());
    out.extend_from_slice(&msg_seq.to_be_bytes());
    out.extend_from_slice(&frag_index.to_be_bytes());
    out.extend_from_slice(&frag_total.to_be_bytes());
    out.push(flags);
    out.extend_from_slice(&(payload.len() as u16).to_be_bytes());
    out.extend_from_slice(payload);
    let crc = crc32(&out[start..]);
    out.extend_from_slice(&crc.to_be_bytes());
}

/// Zero-copy view of a received frame.
#[derive(Debug, Clone, Copy)]
pub struct FrameView<'a> {
    pub session: u16,
    pub msg_seq: u32,
    pub frag_index: u16,
    pub frag_total: u16,
    pub flags: u8,
    pub payload: &'a [u8],
}

impl<'a> FrameView<'a> {
    pub fn parse(bytes: &'a [u8]) -> Result<Self, DecodeError> {
        if bytes.len() < HEADER_LEN + CRC_LEN {
            return Err(DecodeError::Truncated);
        }
        if bytes[0..2] != MAGIC {
            return Err(DecodeError::BadMagic);
        }
        let be16 = |i: usize| u16::from_be_bytes([bytes[i], bytes[i + 1]]);
        let payload_len = be16(13) as usize;
        if payload_len > MAX_PAYLOAD || bytes.len() != HEADER_LEN + payload_len + CRC_LEN {
            return Err(DecodeError::Length);
        }
        let body_end = HEADER_LEN + payload_len;
        let expected = u32::from_be_bytes(bytes[body_end..body_end + 4].try_into().unwrap());
        if crc32(&bytes[..body_end]) != expected {
            return Err(DecodeError::Crc);
        }
        let frag_index = be16(8);
        let frag_total = be16(10);
        let flags = bytes[12];
        // Handshake, teardown and ack frames carry no fragment.
        let data = flags & (flags::CONTROL | flags::VIDEO) != 0 && flags & flags::ACK == 0;
        if data && frag_index >= frag_total {
            return Err(DecodeError::Fragment);
        }
        Ok(FrameView {
            session: be16(2),
            msg_seq: u32::from_be_bytes(bytes[4..8].try_into().unwrap()),
            frag_index,
            frag_total,
            flags,
            payload: &bytes[HEADER_LEN..body_end],
        })
    }
}

pub fn kind_of(f: u8) -> Option<MessageKind> {
    if f & flags::VIDEO != 0 {
        return Some(MessageKind::VideoData);
    }
    if f & flags::CONTROL == 0 {
        return None;
    }
    match (f & flags::KIND_MASK) >> flags::KIND_SHIFT {
        0 => Some(MessageKind::Command),
        1 => Some(MessageKind::Reply),
        2 => Some(MessageKind::ServiceRequest),
        _ => None,
    }
}

pub fn flags_for(kind: MessageKind) -> u8 {
    match kind {
        MessageKind::VideoData => flags::VIDEO,
        MessageKind::Command => flags::CONTROL,
        MessageKind::Reply => flags::CONTROL | (1 << flags::KIND_SHIFT),
        MessageKind::ServiceRequest => flags::CONTROL | (2 << flags::KIND_SHIFT),
    }
}

/// Number of frames a body of `len` bytes occupies (an empty body still
/// takes one frame).
pub fn frames_for(len: usize) -> usize {
    len.div_ceil(MAX_PAYLOAD).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn crc_check_value() {
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    }

    #[test]
    fn max_frame_fits_ethernet_mtu() {
        assert!(MAX_FRAME <= 1500);
    }

    #[test]
    fn fragment_counts() {
        assert_eq!(frames_for(1472), 1);
        assert_eq!(frames_for(1473), 2);
        assert_eq!(frames_for(0), 1);
        // 12822 full frames plus 384 bytes.
        assert_eq!(frames_for(18_874_368), 12_823);
    }

    #[test]
    fn rejects_garbage() {
        let f = Frame { session: 1, msg_seq: 2, frag_index: 0, frag_total: 1, flags: flags::CONTROL, payload: vec![1, 2, 3] };
        let mut bytes = f.encode();
        assert_eq!(Frame::decode(&bytes[..10]), Err(DecodeError::Truncated));
        bytes[0] = 0;
        assert_eq!(Frame::decode(&bytes), Err(DecodeError::BadMagic));
        let bad = Frame { frag_index: 1, ..f };
        assert_eq!(Frame::decode(&bad.encode()), Err(DecodeError::Fragment));
    }

    #[test]
    fn kinds_round_trip() {
        for k in [MessageKind::Command, MessageKind::Reply, MessageKind::ServiceRequest, MessageKind::VideoData] {
            assert_eq!(kind_of(flags_for(k)), Some(k));
        }
    }

    fn arb_frame() -> impl Strategy<Value = Frame> {
        (any::<u16>(), any::<u32>(), 1u16.., any::<u8>(), prop::collection::vec(any::<u8>(), 0..=MAX_PAYLOAD))
            .prop_flat_map(|(session, seq, total, flags, payload)| {
                (0..total).prop_map(move |idx| Frame {
                    session,
                    msg_seq: seq,
                    frag_index: idx,
                    frag_total: total,
                    flags,
                    payload: payload.clone(),
                })
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn codec_round_trip(frame in arb_frame()) {
            prop_assert_eq!(Frame::decode(&frame.encode()), Ok(frame));
        }

        #[test]
        fn single_bit_flips_detected(frame in arb_frame(), bit in any::<prop::sample::Index>()) {
            let mut bytes = frame.encode();
            let i = bit.index(bytes.len() * 8);
            bytes[i / 8] ^= 1 << (i % 8);
            prop_assert!(Frame::decode(&bytes).map(|f| f != frame).unwrap_or(true));
            prop_assert!(Frame::decode(&bytes).is_err());
        }
    }
}
