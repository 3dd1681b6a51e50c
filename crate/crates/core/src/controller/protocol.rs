//! Message bodies exchanged with the controller.
//!
//! Command: `kind: u8` then the kind's payload. Reply: `kind: u8`,
//! `status: u8` (0 ok, 1 busy, 2 error) then either an error code in UTF-8
//! or the reply payload. Service requests carry a JSON [`StatusEvent`].
//! Video data carries a 20-byte [`VideoHeader`] then big-endian 16-bit
//! samples.

use serde::{Deserialize, Serialize};

use crate::transport::{Message, MessageKind, MAX_BODY};

/// Program slots `0..16`; the other array ids are fixed.
pub const PROGRAM_SLOTS: u8 = 16;
/// JSON [`ExposureParams`](crate::detector::ExposureParams) used by programs.
pub const PARAMS_ARRAY: u8 = 0x40;
/// JSON map of register writes; reading it returns the readback.
pub const TELEMETRY_ARRAY: u8 = 0x80;

pub const VIDEO_HEADER_LEN: usize = 20;
/// Sample bytes per video message, so header plus data fill one frame.
pub const VIDEO_CHUNK: usize = crate::transport::frame::MAX_PAYLOAD - VIDEO_HEADER_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    StatusPoll,
    PowerOn,
    PowerOff,
    Reset,
    ArrayWrite,
    ArrayRead,
    StartProcess,
    StopProcess,
    SyncClock,
    ExtDevice,
}

impl CommandKind {
    pub const ALL: [CommandKind; 10] = [
        CommandKind::StatusPoll,
        CommandKind::PowerOn,
        CommandKind::PowerOff,
        CommandKind::Reset,
        CommandKind::ArrayWrite,
        CommandKind::ArrayRead,
        CommandKind::StartProcess,
        CommandKind::StopProcess,
        CommandKind::SyncClock,
        CommandKind::ExtDevice,
    ];

    pub fn code(self) -> u8 {
        Self::ALL.iter().position(|&k| k == self).unwrap() as u8 + 1
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get((code as usize).checked_sub(1)?).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopMode {
    /// Discard everything and end now.
    Abort,
    /// Skip remaining integration and read out what has accumulated.
    Finish,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AsyncCommand {
    StatusPoll,
    PowerOn,
    PowerOff,
    Reset,
    ArrayWrite { id: u8, data: Vec<u8> },
    ArrayRead { id: u8 },
    /// `run` numbers the frame within an exposure sequence and keys the
    /// per-frame random streams together with `seed`.
    StartProcess { slot: u8, run: u32, seed: u64 },
    StopProcess { mode: StopMode },
    SyncClock { host_time: f64 },
    ExtDevice { device: u8, action: u8, value: i32 },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolError {
    #[error("empty message body")]
    Empty,
    #[error("unknown command kind {0}")]
    UnknownKind(u8),
    #[error("{0}: truncated or oversized payload")]
    Payload(&'static str),
    #[error("malformed {0}")]
    Malformed(&'static str),
}

fn exact<const N: usize>(p: &[u8], what: &'static str) -> Result<[u8; N], ProtocolError> {
    p.try_into().map_err(|_| ProtocolError::Payload(what))
}

impl AsyncCommand {
    pub fn kind(&self) -> CommandKind {
        match self {
            AsyncCommand::StatusPoll => CommandKind::StatusPoll,
            AsyncCommand::PowerOn => CommandKind::PowerOn,
            AsyncCommand::PowerOff => CommandKind::PowerOff,
            AsyncCommand::Reset => CommandKind::Reset,
            AsyncCommand::ArrayWrite { .. } => CommandKind::ArrayWrite,
            AsyncCommand::ArrayRead { .. } => CommandKind::ArrayRead,
            AsyncCommand::StartProcess { .. } => CommandKind::StartProcess,
            AsyncCommand::StopProcess { .. } => CommandKind::StopProcess,
            AsyncCommand::SyncClock { .. } => CommandKind::SyncClock,
            AsyncCommand::ExtDevice { .. } => CommandKind::ExtDevice,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![self.kind().code()];
        match self {
            AsyncCommand::StatusPoll | AsyncCommand::PowerOn | AsyncCommand::PowerOff | AsyncCommand::Reset => {}
            AsyncCommand::ArrayWrite { id, data } => {
                out.push(*id);
                out.extend_from_slice(data);
            }
            AsyncCommand::ArrayRead { id } => out.push(*id),
            AsyncCommand::StartProcess { slot, run, seed } => {
                out.push(*slot);
                out.extend_from_slice(&run.to_be_bytes());
                out.extend_from_slice(&seed.to_be_bytes());
            }
            AsyncCommand::StopProcess { mode } => out.push(match mode {
                StopMode::Abort => 0,
                StopMode::Finish => 1,
            }),
            AsyncCommand::SyncClock { host_time } => out.extend_from_slice(&host_time.to_be_bytes()),
            AsyncCommand::ExtDevice { device, action, value } => {
                out.push(*device);
                out.push(*action);
                out.extend_from_slice(&value.to_be_bytes());
            }
        }
        out
    }

    pub fn decode(body: &[u8]) -> Result<Self, ProtocolError> {
        let (&code, p) = body.split_first().ok_or(ProtocolError::Empty)?;
        let kind = CommandKind::from_code(code).ok_or(ProtocolError::UnknownKind(code))?;
        Ok(match kind {
            CommandKind::StatusPoll | CommandKind::PowerOn | CommandKind::PowerOff | CommandKind::Reset => {
                if !p.is_empty() {
                    return Err(ProtocolError::Payload("no-argument command"));
                }
                match kind {
                    CommandKind::StatusPoll => AsyncCommand::StatusPoll,
                    CommandKind::PowerOn => AsyncCommand::PowerOn,
                    CommandKind::PowerOff => AsyncCommand::PowerOff,
                    _ => AsyncCommand::Reset,
                }
            }
            CommandKind::ArrayWrite => {
                let (&id, data) = p.split_first().ok_or(ProtocolError::Payload("array-write"))?;
                AsyncCommand::ArrayWrite { id, data: data.to_vec() }
            }
            CommandKind::ArrayRead => AsyncCommand::ArrayRead { id: exact::<1>(p, "array-read")?[0] },
            CommandKind::StartProcess => {
                let b = exact::<13>(p, "start-process")?;
                AsyncCommand::StartProcess {
                    slot: b[0],
                    run: u32::from_be_bytes(b[1..5].try_into().unwrap()),
                    seed: u64::from_be_bytes(b[5..13].try_into().unwrap()),
                }
            }
            CommandKind::StopProcess => AsyncCommand::StopProcess {
                mode: match exact::<1>(p, "stop-process")?[0] {
                    0 => StopMode::Abort,
                    1 => StopMode::Finish,
                    _ => return Err(ProtocolError::Malformed("stop mode")),
                },
            },
            CommandKind::SyncClock => AsyncCommand::SyncClock { host_time: f64::from_be_bytes(exact(p, "sync-clock")?) },
            CommandKind::ExtDevice => {
                let b = exact::<6>(p, "ext-device")?;
                AsyncCommand::ExtDevice { device: b[0], action: b[1], value: i32::from_be_bytes(b[2..6].try_into().unwrap()) }
            }
        })
    }

    pub fn to_message(&self) -> Message {
        Message::new(MessageKind::Command, self.encode())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReplyStatus {
    Ok,
    Busy,
    Error(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerReply {
    pub in_reply_to: CommandKind,
    pub status: ReplyStatus,
    pub payload: Vec<u8>,
}

impl ControllerReply {
    pub fn ok(kind: CommandKind, payload: Vec<u8>) -> Self {
        Self { in_reply_to: kind, status: ReplyStatus::Ok, payload }
    }

    pub fn busy(kind: CommandKind) -> Self {
        Self { in_reply_to: kind, status: ReplyStatus::Busy, payload: Vec::new() }
    }

    pub fn error(kind: CommandKind, code: impl Into<String>) -> Self {
        Self { in_reply_to: kind, status: ReplyStatus::Error(code.into()), payload: Vec::new() }
    }

    pub fn is_ok(&self) -> bool {
        self.status == ReplyStatus::Ok
    }

    pub fn error_code(&self) -> Option<&str> {
        match &self.status {
            ReplyStatus::Error(c) => Some(c),
            _ => None,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![self.in_reply_to.code()];
        match &self.status {
            ReplyStatus::Ok => {
                out.push(0);
                out.extend_from_slice(&self.payload);
            }
            ReplyStatus::Busy => out.push(1),
            ReplyStatus::Error(code) => {
                out.push(2);
                out.extend_from_slice(code.as_bytes());
            }
        }
        out
    }

    pub fn decode(body: &[u8]) -> Result<Self, ProtocolError> {
        if body.len() < 2 {
            return Err(ProtocolError::Payload("reply"));
        }
        let kind = CommandKind::from_code(body[0]).ok_or(ProtocolError::UnknownKind(body[0]))?;
        let rest = &body[2..];
        Ok(match body[1] {
            0 => Self::ok(kind, rest.to_vec()),
            1 => Self::busy(kind),
            2 => Self::error(kind, String::from_utf8(rest.to_vec()).map_err(|_| ProtocolError::Malformed("error code"))?),
            _ => return Err(ProtocolError::Malformed("reply status")),
        })
    }

    pub fn to_message(&self) -> Message {
        Message::new(MessageKind::Reply, self.encode())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PowerState {
    Off,
    On,
    Fault,
}

/// Snapshot returned by `StatusPoll`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerStatus {
    pub power: PowerState,
    pub running: bool,
    pub run: Option<u32>,
    pub pc: Option<usize>,
    /// Simulated controller time, seconds.
    pub clock: f64,
    pub commands: u64,
    pub fault: Option<String>,
    pub telemetry: std::collections::BTreeMap<String, f64>,
    pub devices: std::collections::BTreeMap<String, i32>,
}

/// Frame metadata reported when a readout finishes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadoutInfo {
    pub run: u32,
    pub frame: u32,
    pub width: usize,
    pub height: usize,
    pub chunks: usize,
    pub saturated: usize,
    pub start: f64,
    pub stop: f64,
    #[serde(default)]
    pub ramp_rows: usize,
}

/// Service requests sent by the controller without being asked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum StatusEvent {
    IntegrationComplete { run: u32, frame: u32 },
    ReadoutComplete(ReadoutInfo),
    Device { device: u8, action: u8, value: i32 },
    /// Terminal events: exactly one ends every started process.
    Done { run: u32, frames: u32 },
    Aborted { run: u32 },
    Fault { run: u32, reason: String },
}

impl StatusEvent {
    pub fn is_terminal(&self) -> bool {
        matches!(self, StatusEvent::Done { .. } | StatusEvent::Aborted { .. } | StatusEvent::Fault { .. })
    }

    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("status event serializes")
    }

    pub fn decode(body: &[u8]) -> Result<Self, ProtocolError> {
        serde_json::from_slice(body).map_err(|_| ProtocolError::Malformed("status event"))
    }

    pub fn to_message(&self) -> Message {
        Message::new(MessageKind::ServiceRequest, self.encode())
    }
}

/// Header of one video-data message.
///
/// | offset | size | field  |
/// |--------|------|--------|
/// | 0      | 4    | run    |
/// | 4      | 4    | frame  |
/// | 8      | 2    | chunk  |
/// | 10     | 2    | chunks |
/// | 12     | 4    | width  |
/// | 16     | 4    | height |
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VideoHeader {
    pub run: u32,
    pub frame: u32,
    pub chunk: u16,
    pub chunks: u16,
    pub width: u32,
    pub height: u32,
}

impl VideoHeader {
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.run.to_be_bytes());
        out.extend_from_slice(&self.frame.to_be_bytes());
        out.extend_from_slice(&self.chunk.to_be_bytes());
        out.extend_from_slice(&self.chunks.to_be_bytes());
        out.extend_from_slice(&self.width.to_be_bytes());
        out.extend_from_slice(&self.height.to_be_bytes());
    }

    /// Splits a video body into header and sample bytes.
    pub fn decode(body: &[u8]) -> Result<(Self, &[u8]), ProtocolError> {
        if body.len() < VIDEO_HEADER_LEN {
            return Err(ProtocolError::Payload("video header"));
        }
        let be32 = |i: usize| u32::from_be_bytes(body[i..i + 4].try_into().unwrap());
        let be16 = |i: usize| u16::from_be_bytes([body[i], body[i + 1]]);
        let h = VideoHeader { run: be32(0), frame: be32(4), chunk: be16(8), chunks: be16(10), width: be32(12), height: be32(16) };
        if h.chunk >= h.chunks {
            return Err(ProtocolError::Malformed("video chunk index"));
        }
        Ok((h, &body[VIDEO_HEADER_LEN..]))
    }
}

/// Number of video messages for a `width x height` frame.
pub fn video_chunks(width: usize, height: usize) -> usize {
    (width * height * 2).div_ceil(VIDEO_CHUNK)
}

/// Largest frame the 16-bit chunk counter can describe.
pub const MAX_VIDEO_BYTES: usize = u16::MAX as usize * VIDEO_CHUNK;

const _: () = assert!(VIDEO_HEADER_LEN + VIDEO_CHUNK <= MAX_BODY);

/// Builds the video messages for a frame; samples go big-endian in
/// row-major order.
pub fn video_messages(run: u32, frame: u32, width: usize, height: usize, samples: &[u16]) -> Vec<Vec<u8>> {
    let bytes: Vec<u8> = samples.iter().flat_map(|s| s.to_be_bytes()).collect();
    let chunks = video_chunks(width, height);
    (0..chunks)
        .map(|c| {
            let data = &bytes[c * VIDEO_CHUNK..((c + 1) * VIDEO_CHUNK).min(bytes.len())];
            let mut out = Vec::with_capacity(VIDEO_HEADER_LEN + data.len());
            VideoHeader {
                run,
                frame,
                chunk: c as u16,
                chunks: chunks as u16,
                width: width as u32,
                height: height as u32,
            }
            .encode_into(&mut out);
            out.extend_from_slice(data);
            out
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commands_round_trip() {
        let all = [
            AsyncCommand::StatusPoll,
            AsyncCommand::PowerOn,
            AsyncCommand::PowerOff,
            AsyncCommand::Reset,
            AsyncCommand::ArrayWrite { id: 3, data: vec![1, 2, 3] },
            AsyncCommand::ArrayRead { id: PARAMS_ARRAY },
            AsyncCommand::StartProcess { slot: 1, run: 7, seed: u64::MAX - 3 },
            AsyncCommand::StopProcess { mode: StopMode::Finish },
            AsyncCommand::SyncClock { host_time: 1.25e9 },
            AsyncCommand::ExtDevice { device: 2, action: 1, value: -4 },
        ];
        for cmd in all {
            assert_eq!(AsyncCommand::decode(&cmd.encode()), Ok(cmd));
        }
        assert_eq!(AsyncCommand::decode(&[]), Err(ProtocolError::Empty));
        assert_eq!(AsyncCommand::decode(&[99]), Err(ProtocolError::UnknownKind(99)));
        assert!(AsyncCommand::decode(&[CommandKind::StartProcess.code(), 1]).is_err());
    }

    #[test]
    fn replies_round_trip() {
        for r in [
            ControllerReply::ok(CommandKind::ArrayRead, vec![9, 8]),
            ControllerReply::busy(CommandKind::StartProcess),
            ControllerReply::error(CommandKind::StartProcess, "no-program"),
        ] {
            assert_eq!(ControllerReply::decode(&r.encode()), Ok(r));
        }
    }

    #[test]
    fn events_round_trip() {
        let e = StatusEvent::ReadoutComplete(ReadoutInfo {
            run: 1,
            frame: 0,
            width: 4,
            height: 2,
            chunks: 1,
            saturated: 0,
            start: 0.0,
            stop: 1.5,
            ramp_rows: 0,
        });
        assert_eq!(StatusEvent::decode(&e.encode()), Ok(e));
        let done = String::from_utf8(StatusEvent::Done { run: 3, frames: 1 }.encode()).unwrap();
        assert_eq!(done, r#"{"event":"done","run":3,"frames":1}"#);
    }

    #[test]
    fn video_chunks_cover_frame() {
        let (w, h) = (37, 53);
        let samples: Vec<u16> = (0..w * h).map(|i| (i * 7) as u16).collect();
        let msgs = video_messages(2, 0, w, h, &samples);
        // 3922 bytes at 1452 per chunk.
        assert_eq!(msgs.len(), 3);
        let mut bytes = Vec::new();
        for (i, m) in msgs.iter().enumerate() {
            let (hdr, data) = VideoHeader::decode(m).unwrap();
            assert_eq!((hdr.chunk as usize, hdr.chunks, hdr.width, hdr.height), (i, 3, 37, 53));
            assert!(m.len() <= crate::transport::frame::MAX_PAYLOAD);
            bytes.extend_from_slice(data);
        }
        let back: Vec<u16> = bytes.chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
        assert_eq!(back, samples);
    }
}
