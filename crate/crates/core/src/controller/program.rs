//! Synchronous instruction set.
//!
//! Each instruction is 8 bytes: a one-byte opcode followed by seven bytes of
//! big-endian arguments.
//!
//! | opcode | instruction    | arguments                                         |
//! |--------|----------------|---------------------------------------------------|
//! | `0x01` | `IntegrateCtl` | ticks: u48                                        |
//! | `0x02` | `TransferCtl`  | rows: u32, flags: u8 (bit 0 = flush)              |
//! | `0x03` | `ReadoutCtl`   | mode: u8 (0 = frame, 1 = drift scan)              |
//! | `0x04` | `ExtDeviceCtl` | device: u8, action: u8, value: i32                |
//! | `0x05` | `SeqCtl`       | target: u16, count: u32                           |
//!
//! Unused argument bytes must be zero. One tick is one simulated microsecond.

use std::fmt;

pub const INSTRUCTION_LEN: usize = 8;
pub const TICKS_PER_SECOND: f64 = 1e6;
const MAX_TICKS: u64 = (1 << 48) - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadoutMode {
    Frame,
    Scan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncInstruction {
    IntegrateCtl { ticks: u64 },
    /// Shifts charge `rows` rows toward the readout register, or clears the
    /// whole array when `flush` is set.
    TransferCtl { rows: u32, flush: bool },
    ReadoutCtl { mode: ReadoutMode },
    ExtDeviceCtl { device: u8, action: u8, value: i32 },
    /// Jumps back to `target` until the block has run `count` times.
    SeqCtl { target: u16, count: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProgramError {
    #[error("program length {0} is not a multiple of 8 bytes")]
    Length(usize),
    #[error("instruction {index}: unknown opcode {opcode:#04x}")]
    Opcode { index: usize, opcode: u8 },
    #[error("instruction {index}: {reason}")]
    Argument { index: usize, reason: String },
    #[error("instruction {index}: loop target {target} is not an earlier instruction")]
    LoopTarget { index: usize, target: u16 },
    #[error("empty program")]
    Empty,
}

impl SyncInstruction {
    pub fn integrate_seconds(seconds: f64) -> Self {
        SyncInstruction::IntegrateCtl { ticks: seconds_to_ticks(seconds) }
    }

    pub fn encode(&self) -> [u8; INSTRUCTION_LEN] {
        let mut b = [0u8; INSTRUCTION_LEN];
        match *self {
            SyncInstruction::IntegrateCtl { ticks } => {
                b[0] = 0x01;
                b[1..7].copy_from_slice(&ticks.min(MAX_TICKS).to_be_bytes()[2..]);
            }
            SyncInstruction::TransferCtl { rows, flush } => {
                b[0] = 0x02;
                b[1..5].copy_from_slice(&rows.to_be_bytes());
                b[5] = flush as u8;
            }
            SyncInstruction::ReadoutCtl { mode } => {
                b[0] = 0x03;
                b[1] = match mode {
                    ReadoutMode::Frame => 0,
                    ReadoutMode::Scan => 1,
                };
            }
            SyncInstruction::ExtDeviceCtl { device, action, value } => {
                b[0] = 0x04;
                b[1] = device;
                b[2] = action;
                b[3..7].copy_from_slice(&value.to_be_bytes());
            }
            SyncInstruction::SeqCtl { target, count } => {
                b[0] = 0x05;
                b[1..3].copy_from_slice(&target.to_be_bytes());
                b[3..7].copy_from_slice(&count.to_be_bytes());
            }
        }
        b
    }

    pub fn decode(b: &[u8; INSTRUCTION_LEN], index: usize) -> Result<Self, ProgramError> {
        let unused_zero = |from: usize| {
            if b[from..].iter().all(|&x| x == 0) {
                Ok(())
            } else {
                Err(ProgramError::Argument { index, reason: "reserved bytes must be zero".into() })
            }
        };
        let arg = |reason: &str| ProgramError::Argument { index, reason: reason.into() };
        Ok(match b[0] {
            0x01 => {
                unused_zero(7)?;
                let mut t = [0u8; 8];
                t[2..].copy_from_slice(&b[1..7]);
                SyncInstruction::IntegrateCtl { ticks: u64::from_be_bytes(t) }
            }
            0x02 => {
                unused_zero(6)?;
                if b[5] > 1 {
                    return Err(arg("unknown transfer flags"));
                }
                SyncInstruction::TransferCtl {
                    rows: u32::from_be_bytes(b[1..5].try_into().unwrap()),
                    flush: b[5] == 1,
                }
            }
            0x03 => {
                unused_zero(2)?;
                let mode = match b[1] {
                    0 => ReadoutMode::Frame,
                    1 => ReadoutMode::Scan,
                    _ => return Err(arg("unknown readout mode")),
                };
                SyncInstruction::ReadoutCtl { mode }
            }
            0x04 => SyncInstruction::ExtDeviceCtl {
                device: b[1],
                action: b[2],
                value: i32::from_be_bytes(b[3..7].try_into().unwrap()),
            },
            0x05 => {
                unused_zero(7)?;
                let count = u32::from_be_bytes(b[3..7].try_into().unwrap());
                if count == 0 {
                    return Err(arg("loop count must be at least 1"));
                }
                SyncInstruction::SeqCtl { target: u16::from_be_bytes([b[1], b[2]]), count }
            }
            opcode => return Err(ProgramError::Opcode { index, opcode }),
        })
    }
}

impl fmt::Display for SyncInstruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SyncInstruction::IntegrateCtl { ticks } => write!(f, "integrate {ticks}"),
            SyncInstruction::TransferCtl { flush: true, .. } => write!(f, "flush"),
            SyncInstruction::TransferCtl { rows, .. } => write!(f, "transfer {rows}"),
            SyncInstruction::ReadoutCtl { mode: ReadoutMode::Frame } => write!(f, "readout frame"),
            SyncInstruction::ReadoutCtl { mode: ReadoutMode::Scan } => write!(f, "readout scan"),
            SyncInstruction::ExtDeviceCtl { device, action, value } => write!(f, "device {device} {action} {value}"),
            SyncInstruction::SeqCtl { target, count } => write!(f, "loop {target} x{count}"),
        }
    }
}

/// Exposure times are carried as whole ticks; `ticks / 1e6` gives back the
/// original decimal for any exposure time with at most six decimals.
pub fn seconds_to_ticks(seconds: f64) -> u64 {
    (seconds.max(0.0) * TICKS_PER_SECOND).round().min(MAX_TICKS as f64) as u64
}

pub fn ticks_to_seconds(ticks: u64) -> f64 {
    ticks as f64 / TICKS_PER_SECOND
}

/// A validated instruction sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    instructions: Vec<SyncInstruction>,
}

impl Program {
    pub fn new(instructions: Vec<SyncInstruction>) -> Result<Self, ProgramError> {
        if instructions.is_empty() {
            return Err(ProgramError::Empty);
        }
        for (index, ins) in instructions.iter().enumerate() {
            if let SyncInstruction::SeqCtl { target, count } = *ins {
                // Backward jumps only, so every loop is a counted block.
                if target as usize >= index {
                    return Err(ProgramError::LoopTarget { index, target });
                }
                if count == 0 {
                    return Err(ProgramError::Argument { index, reason: "loop count must be at least 1".into() });
                }
            }
        }
        Ok(Self { instructions })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ProgramError> {
        if bytes.len() % INSTRUCTION_LEN != 0 {
            return Err(ProgramError::Length(bytes.len()));
        }
        let instructions = bytes
            .chunks_exact(INSTRUCTION_LEN)
            .enumerate()
            .map(|(i, c)| SyncInstruction::decode(c.try_into().unwrap(), i))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(instructions)
    }

    pub fn encode(&self) -> Vec<u8> {
        self.instructions.iter().flat_map(|i| i.encode()).collect()
    }

    pub fn instructions(&self) -> &[SyncInstruction] {
        &self.instructions
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    /// Instruction trace of a full run, expanding loops.
    pub fn trace(&self) -> Vec<usize> {
        let mut counters = vec![0u32; self.len()];
        let mut pc = 0;
        let mut out = Vec::new();
        while pc < self.len() {
            out.push(pc);
            pc = step_pc(&self.instructions, pc, &mut counters);
        }
        out
    }
}

/// Program counter after executing instruction `pc`.
pub(crate) fn step_pc(program: &[SyncInstruction], pc: usize, counters: &mut [u32]) -> usize {
    match program[pc] {
        SyncInstruction::SeqCtl { target, count } => {
            counters[pc] += 1;
            if counters[pc] < count {
                target as usize
            } else {
                counters[pc] = 0;
                pc + 1
            }
        }
        _ => pc + 1,
    }
}
