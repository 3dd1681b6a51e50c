//! Controller emulator: a message-driven peer that answers asynchronous
//! commands at once and runs synchronous programs loaded in advance as data
//! arrays, streaming video data back to the host.
//!
//! [`Controller`] is transport-free: [`Controller::handle_async`] answers one
//! command and [`Controller::step`] advances the running program by one
//! instruction (or one batch of video messages). [`serve`] drives it over a
//! [`Transport`].

mod program;
mod protocol;
mod telemetry;

pub use program::{
    seconds_to_ticks, ticks_to_seconds, Program, ProgramError, ReadoutMode, SyncInstruction, INSTRUCTION_LEN,
    TICKS_PER_SECOND,
};
pub use protocol::{
    video_chunks, video_messages, AsyncCommand, CommandKind, ControllerReply, ControllerStatus, PowerState,
    ProtocolError, ReadoutInfo, ReplyStatus, StatusEvent, StopMode, VideoHeader, MAX_VIDEO_BYTES, PARAMS_ARRAY,
    PROGRAM_SLOTS, TELEMETRY_ARRAY, VIDEO_CHUNK, VIDEO_HEADER_LEN,
};
pub use telemetry::{RegisterGroup, RegisterSpec, Telemetry, TelemetryConfig, TelemetryError, CLOCK_PHASES, TEMPERATURE};

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use crate::config::KeyValues;
use crate::detector::{self, ChargeImage, DetectorError, DetectorGeometry, ExposureParams, SceneModel};
use crate::transport::{Message, MessageKind, Transport, TransportError};

/// Stage key of drift-scan seeds for runs after the first.
const SCAN_STAGE: u64 = u64::MAX;

pub const DEVICE_NAMES: [&str; 3] = ["shutter", "filter", "lamp"];

pub fn device_name(id: u8) -> String {
    DEVICE_NAMES.get(id as usize).map(|s| s.to_string()).unwrap_or_else(|| format!("device{id}"))
}

/// Seed a drift-scan readout uses: the process seed itself for the first
/// frame of run 0, so a single scan reproduces [`detector::drift_scan`].
pub fn scan_seed(seed: u64, frame_key: u64) -> u64 {
    if frame_key == 0 {
        seed
    } else {
        detector::derive_seed(seed, frame_key, SCAN_STAGE)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    pub geometry: DetectorGeometry,
    pub scene: SceneModel,
    pub telemetry: TelemetryConfig,
    /// Simulated seconds per wall-clock second; 0 runs as fast as possible.
    pub time_scale: f64,
    /// Video messages emitted per [`Controller::step`].
    pub chunks_per_step: usize,
}

impl ControllerConfig {
    pub fn new(geometry: DetectorGeometry, scene: SceneModel) -> Self {
        Self { geometry, scene, telemetry: TelemetryConfig::default(), time_scale: 0.0, chunks_per_step: 64 }
    }

    pub fn from_config(kv: &KeyValues, base_dir: Option<&Path>) -> Result<Self, DetectorError> {
        kv.check_keys(&[
            "detector",
            "scene",
            "time_scale",
            "chunks_per_step",
            "temperature_half_life",
            "temperature_initial",
            "clock_noise",
            "voltage_noise",
            "current_noise",
            "temperature_noise",
            "readback_seed",
            "range",
        ])?;
        let resolve = |p: &str| match base_dir {
            Some(dir) if Path::new(p).is_relative() && !DetectorGeometry::preset_names().contains(&p) => {
                dir.join(p).to_string_lossy().into_owned()
            }
            _ => p.to_string(),
        };
        let geometry = DetectorGeometry::load(&resolve(kv.get_str("detector").unwrap_or("ccd42-40")))?;
        let scene = match kv.get_str("scene") {
            Some(p) => SceneModel::load(&resolve(p))?,
            None => SceneModel::flat(10.0),
        };
        let d = TelemetryConfig::default();
        let mut ranges = BTreeMap::new();
        for e in kv.all("range") {
            let parts: Vec<&str> = crate::config::split_list(&e.value).collect();
            let [name, min, max] = parts[..] else {
                return Err(e.error("expected `register min max`").into());
            };
            let num = |s: &str| s.parse::<f64>().map_err(|_| e.error(format!("`{s}` is not a number")));
            ranges.insert(name.to_string(), (num(min)?, num(max)?));
        }
        let telemetry = TelemetryConfig {
            clock_noise: kv.get_or("clock_noise", d.clock_noise)?,
            voltage_noise: kv.get_or("voltage_noise", d.voltage_noise)?,
            current_noise: kv.get_or("current_noise", d.current_noise)?,
            temperature_noise: kv.get_or("temperature_noise", d.temperature_noise)?,
            temperature_initial: kv.get_or("temperature_initial", d.temperature_initial)?,
            temperature_half_life: kv.get_or("temperature_half_life", d.temperature_half_life)?,
            node_transconductance: d.node_transconductance,
            ranges,
            seed: kv.get_or("readback_seed", d.seed)?,
        };
        Ok(Self {
            geometry,
            scene,
            telemetry,
            time_scale: kv.get_or("time_scale", 0.0)?,
            chunks_per_step: kv.get_or("chunks_per_step", 64usize)?.max(1),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DetectorError> {
        let path = path.as_ref();
        let kv = KeyValues::load(path)?;
        Self::from_config(&kv, path.parent())
    }
}

struct Readout {
    messages: VecDeque<Vec<u8>>,
    info: ReadoutInfo,
}

struct Process {
    program: Program,
    pc: usize,
    counters: Vec<u32>,
    run: u32,
    seed: u64,
    params: ExposureParams,
    frame: u32,
    integrations: usize,
    frame_start: f64,
    readout: Option<Readout>,
    finish_requested: bool,
    /// Set once a finish request has been honoured; the process ends after
    /// the current readout.
    ending: bool,
}

impl Process {
    fn frame_key(&self) -> u64 {
        self.run as u64 + self.frame as u64
    }
}

/// Simulated controller state.
pub struct Controller {
    config: ControllerConfig,
    power: PowerState,
    fault: Option<String>,
    programs: Vec<Option<Program>>,
    params_array: Option<Vec<u8>>,
    telemetry: Telemetry,
    devices: BTreeMap<String, i32>,
    detector: ChargeImage,
    clock_ticks: u64,
    host_offset: f64,
    commands: u64,
    process: Option<Process>,
    outbox: VecDeque<Message>,
    wait_until: Option<Instant>,
}

impl Controller {
    pub fn new(config: ControllerConfig) -> Self {
        let telemetry = Telemetry::new(config.geometry.output_nodes, config.telemetry.clone());
        Self {
            detector: ChargeImage::for_detector(&config.geometry),
            telemetry,
            config,
            power: PowerState::Off,
            fault: None,
            programs: vec![None; PROGRAM_SLOTS as usize],
            params_array: None,
            devices: DEVICE_NAMES.iter().map(|d| (d.to_string(), 0)).collect(),
            clock_ticks: 0,
            host_offset: 0.0,
            commands: 0,
            process: None,
            outbox: VecDeque::new(),
            wait_until: None,
        }
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn power(&self) -> PowerState {
        self.power
    }

    pub fn is_running(&self) -> bool {
        self.process.is_some()
    }

    /// Number of asynchronous commands handled so far.
    pub fn commands_handled(&self) -> u64 {
        self.commands
    }

    pub fn telemetry(&self) -> &Telemetry {
        &self.telemetry
    }

    pub fn clock(&self) -> f64 {
        ticks_to_seconds(self.clock_ticks)
    }

    /// Whether [`step`](Self::step) has something to do right now.
    pub fn has_work(&self, now: Instant) -> bool {
        !self.outbox.is_empty() || (self.process.is_some() && self.wait_until.map_or(true, |w| now >= w))
    }

    /// Lets wall-clock time pass for the temperature model.
    pub fn advance_time(&mut self, dt: f64) {
        self.telemetry.advance(dt);
    }

    pub fn status(&mut self) -> ControllerStatus {
        let telemetry = match self.power {
            PowerState::On => self.telemetry.readback(),
            _ => self.telemetry.readback_off(),
        };
        ControllerStatus {
            power: self.power,
            running: self.process.is_some(),
            run: self.process.as_ref().map(|p| p.run),
            pc: self.process.as_ref().map(|p| p.pc),
            clock: self.clock(),
            commands: self.commands,
            fault: self.fault.clone(),
            telemetry,
            devices: self.devices.clone(),
        }
    }

    pub fn handle_async(&mut self, cmd: &AsyncCommand) -> ControllerReply {
        self.commands += 1;
        let kind = cmd.kind();
        match (self.power, cmd) {
            (_, AsyncCommand::StatusPoll) => {
                let status = self.status();
                return ControllerReply::ok(kind, serde_json::to_vec(&status).expect("status serializes"));
            }
            (PowerState::Off, AsyncCommand::PowerOn) => {
                self.power = PowerState::On;
                return ControllerReply::ok(kind, Vec::new());
            }
            (PowerState::Off, _) => return ControllerReply::error(kind, "powered-off"),
            (PowerState::Fault, AsyncCommand::Reset | AsyncCommand::ArrayRead { .. }) => {}
            (PowerState::Fault, _) => return ControllerReply::error(kind, "fault"),
            (PowerState::On, _) => {}
        }
        match cmd {
            AsyncCommand::StatusPoll => unreachable!(),
            AsyncCommand::PowerOn => ControllerReply::ok(kind, Vec::new()),
            AsyncCommand::PowerOff => {
                self.abort_process();
                self.power = PowerState::Off;
                ControllerReply::ok(kind, Vec::new())
            }
            AsyncCommand::Reset => {
                self.abort_process();
                self.detector.clear();
                self.programs.iter_mut().for_each(|p| *p = None);
                self.params_array = None;
                self.fault = None;
                if self.power == PowerState::Fault {
                    self.power = PowerState::Off;
                }
                ControllerReply::ok(kind, Vec::new())
            }
            AsyncCommand::ArrayWrite { id, data } => self.array_write(*id, data),
            AsyncCommand::ArrayRead { id } => self.array_read(*id),
            AsyncCommand::StartProcess { slot, run, seed } => self.start_process(*slot, *run, *seed),
            AsyncCommand::StopProcess { mode } => match (&mut self.process, mode) {
                (None, _) => ControllerReply::error(kind, "not-running"),
                (Some(_), StopMode::Abort) => {
                    self.abort_process();
                    ControllerReply::ok(kind, Vec::new())
                }
                (Some(p), StopMode::Finish) => {
                    p.finish_requested = true;
                    self.wait_until = None;
                    ControllerReply::ok(kind, Vec::new())
                }
            },
            AsyncCommand::SyncClock { host_time } => {
                self.host_offset = host_time - self.clock();
                ControllerReply::ok(kind, self.clock().to_be_bytes().to_vec())
            }
            AsyncCommand::ExtDevice { device, action: _, value } => {
                self.devices.insert(device_name(*device), *value);
                ControllerReply::ok(kind, Vec::new())
            }
        }
    }

    fn array_write(&mut self, id: u8, data: &[u8]) -> ControllerReply {
        let kind = CommandKind::ArrayWrite;
        match id {
            slot if slot < PROGRAM_SLOTS => match Program::decode(data) {
                Ok(p) => {
                    self.programs[slot as usize] = Some(p);
                    ControllerReply::ok(kind, Vec::new())
                }
                Err(e) => ControllerReply::error(kind, format!("bad-program {e}")),
            },
            PARAMS_ARRAY => match serde_json::from_slice::<ExposureParams>(data) {
                Ok(_) => {
                    self.params_array = Some(data.to_vec());
                    ControllerReply::ok(kind, Vec::new())
                }
                Err(e) => ControllerReply::error(kind, format!("bad-array {e}")),
            },
            TELEMETRY_ARRAY => {
                let writes: BTreeMap<String, f64> = match serde_json::from_slice(data) {
                    Ok(w) => w,
                    Err(e) => return ControllerReply::error(kind, format!("bad-array {e}")),
                };
                match self.telemetry.set_levels(&writes) {
                    Ok(()) => ControllerReply::ok(kind, Vec::new()),
                    Err(e @ TelemetryError::OutOfRange { .. }) => ControllerReply::error(kind, format!("out-of-range {e}")),
                    Err(e @ TelemetryError::ReadOnly(_)) => ControllerReply::error(kind, format!("read-only {e}")),
                    Err(e @ TelemetryError::Unknown(_)) => ControllerReply::error(kind, format!("unknown-register {e}")),
                }
            }
            _ => ControllerReply::error(kind, format!("bad-array unknown array id {id}")),
        }
    }

    fn array_read(&mut self, id: u8) -> ControllerReply {
        let kind = CommandKind::ArrayRead;
        match id {
            slot if slot < PROGRAM_SLOTS => match &self.programs[slot as usize] {
                Some(p) => ControllerReply::ok(kind, p.encode()),
                None => ControllerReply::error(kind, "no-program"),
            },
            PARAMS_ARRAY => match &self.params_array {
                Some(a) => ControllerReply::ok(kind, a.clone()),
                None => ControllerReply::error(kind, "no-array"),
            },
            TELEMETRY_ARRAY => {
                let readback = self.telemetry.readback();
                ControllerReply::ok(kind, serde_json::to_vec(&readback).expect("readback serializes"))
            }
            _ => ControllerReply::error(kind, format!("bad-array unknown array id {id}")),
        }
    }

    fn start_process(&mut self, slot: u8, run: u32, seed: u64) -> ControllerReply {
        let kind = CommandKind::StartProcess;
        if self.process.is_some() {
            return ControllerReply::busy(kind);
        }
        let Some(Some(program)) = self.programs.get(slot as usize) else {
            return ControllerReply::error(kind, "no-program");
        };
        let Some(params) = self.params_array.as_ref().and_then(|a| serde_json::from_slice(a).ok()) else {
            return ControllerReply::error(kind, "no-params");
        };
        self.process = Some(Process {
            counters: vec![0; program.len()],
            program: program.clone(),
            pc: 0,
            run,
            seed,
            params,
            frame: 0,
            integrations: 0,
            frame_start: self.clock(),
            readout: None,
            finish_requested: false,
            ending: false,
        });
        ControllerReply::ok(kind, Vec::new())
    }

    fn abort_process(&mut self) {
        if let Some(p) = self.process.take() {
            self.detector.clear();
            self.wait_until = None;
            self.outbox.push_back(StatusEvent::Aborted { run: p.run }.to_message());
        }
    }

    fn latch_fault(&mut self, reason: String) {
        log::warn!("controller fault: {reason}");
        let run = self.process.take().map(|p| p.run).unwrap_or(0);
        self.detector.clear();
        self.wait_until = None;
        self.power = PowerState::Fault;
        self.fault = Some(reason.clone());
        self.outbox.push_back(StatusEvent::Fault { run, reason }.to_message());
    }

    /// Runs one unit of program work and returns the messages to send:
    /// queued events first, then whatever the step produced.
    pub fn step(&mut self, now: Instant) -> Vec<Message> {
        if self.process.is_some() && self.wait_until.map_or(true, |w| now >= w) {
            self.wait_until = None;
            if let Err(reason) = self.run_step(now) {
                self.latch_fault(reason);
            }
        }
        self.outbox.drain(..).collect()
    }

    /// Runs the loaded process to completion without pacing.
    pub fn run_to_end(&mut self) -> Vec<Message> {
        let mut out = Vec::new();
        let saved = self.config.time_scale;
        self.config.time_scale = 0.0;
        while self.process.is_some() || !self.outbox.is_empty() {
            out.extend(self.step(Instant::now()));
        }
        self.config.time_scale = saved;
        out
    }

    fn run_step(&mut self, now: Instant) -> Result<(), String> {
        let geom = &self.config.geometry;
        let scene = &self.config.scene;
        let p = self.process.as_mut().expect("running process");

        if let Some(readout) = &mut p.readout {
            for _ in 0..self.config.chunks_per_step {
                match readout.messages.pop_front() {
                    Some(body) => self.outbox.push_back(Message::new(MessageKind::VideoData, body)),
                    None => break,
                }
            }
            if readout.messages.is_empty() {
                let info = p.readout.take().unwrap().info;
                self.outbox.push_back(StatusEvent::ReadoutComplete(info).to_message());
                if p.ending {
                    p.pc = p.program.len();
                }
            }
            return Ok(());
        }

        if p.finish_requested && !p.ending {
            // Skip the remaining integration straight to the next readout.
            p.ending = true;
            let next = p.program.instructions()[p.pc..]
                .iter()
                .position(|i| matches!(i, SyncInstruction::ReadoutCtl { .. }));
            p.pc = next.map_or(p.program.len(), |k| p.pc + k);
        }

        if p.pc >= p.program.len() {
            let done = StatusEvent::Done { run: p.run, frames: p.frame };
            self.process = None;
            self.outbox.push_back(done.to_message());
            return Ok(());
        }

        let instruction = p.program.instructions()[p.pc];
        match instruction {
            SyncInstruction::IntegrateCtl { ticks } => {
                let seed = detector::derive_seed(p.seed, p.frame_key(), detector::integration_stage(p.integrations));
                let charge = detector::integrate_seconds(scene, geom, &p.params, ticks_to_seconds(ticks), seed)
                    .map_err(|e| e.to_string())?;
                self.detector.accumulate(&charge, geom.full_well);
                p.integrations += 1;
                self.clock_ticks += ticks;
                if self.config.time_scale > 0.0 && ticks > 0 {
                    self.wait_until =
                        Some(now + Duration::from_secs_f64(ticks_to_seconds(ticks) / self.config.time_scale));
                }
            }
            SyncInstruction::TransferCtl { flush: true, .. } => self.detector.clear(),
            SyncInstruction::TransferCtl { rows, .. } => self.detector.shift_rows(rows as usize),
            SyncInstruction::ReadoutCtl { mode } => {
                self.outbox.push_back(StatusEvent::IntegrationComplete { run: p.run, frame: p.frame }.to_message());
                let key = p.frame_key();
                let (frame, ramp_rows, seconds) = match mode {
                    ReadoutMode::Frame => {
                        let f = detector::digitize_readout(
                            &self.detector,
                            geom,
                            &p.params,
                            detector::derive_seed(p.seed, key, detector::STAGE_READOUT),
                        )
                        .map_err(|e| e.to_string())?;
                        (f, 0, p.params.readout_time(geom))
                    }
                    ReadoutMode::Scan => {
                        let scan = detector::drift_scan(scene, geom, &p.params, scan_seed(p.seed, key))
                            .map_err(|e| e.to_string())?;
                        let f = scan.into_frame();
                        let (ramp, stop) = (f.meta.ramp_rows, f.meta.stop);
                        (f, ramp, stop)
                    }
                };
                if frame.width * frame.height * 2 > MAX_VIDEO_BYTES {
                    return Err(format!("frame of {}x{} exceeds the video chunk limit", frame.width, frame.height));
                }
                self.detector.clear();
                self.clock_ticks += seconds_to_ticks(seconds);
                let info = ReadoutInfo {
                    run: p.run,
                    frame: p.frame,
                    width: frame.width,
                    height: frame.height,
                    chunks: video_chunks(frame.width, frame.height),
                    saturated: frame.meta.saturated,
                    start: p.frame_start + self.host_offset,
                    stop: ticks_to_seconds(self.clock_ticks) + self.host_offset,
                    ramp_rows,
                };
                let messages = video_messages(p.run, p.frame, frame.width, frame.height, &frame.samples);
                p.readout = Some(Readout { messages: messages.into(), info });
                p.frame += 1;
                p.integrations = 0;
                p.frame_start = ticks_to_seconds(self.clock_ticks);
            }
            SyncInstruction::ExtDeviceCtl { device, action, value } => {
                self.devices.insert(device_name(device), value);
                self.outbox.push_back(StatusEvent::Device { device, action, value }.to_message());
            }
            SyncInstruction::SeqCtl { .. } => {}
        }
        let p = self.process.as_mut().expect("running process");
        p.pc = program::step_pc(p.program.instructions(), p.pc, &mut p.counters);
        Ok(())
    }
}

/// Serves `controller` over an established transport session until `stop`
/// is set or the session ends.
pub fn serve(controller: &mut Controller, transport: &Transport, stop: &AtomicBool) -> Result<(), TransportError> {
    let mut last = Instant::now();
    while !stop.load(Ordering::SeqCst) {
        let now = Instant::now();
        let timeout = if controller.has_work(now) { Duration::ZERO } else { Duration::from_millis(5) };
        if let Some(msg) = transport.read_msg(timeout)? {
            if msg.kind == MessageKind::Command {
                let reply = match AsyncCommand::decode(&msg.body) {
                    Ok(cmd) => controller.handle_async(&cmd),
                    Err(e) => {
                        let kind = msg.body.first().and_then(|&c| CommandKind::from_code(c)).unwrap_or(CommandKind::StatusPoll);
                        ControllerReply::error(kind, format!("malformed {e}"))
                    }
                };
                transport.write_msg(&reply.to_message())?;
            }
        }
        let now = Instant::now();
        controller.advance_time(now.duration_since(last).as_secs_f64());
        last = now;
        for m in controller.step(now) {
            transport.write_msg(&m)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::ExposureType;

    fn small() -> Controller {
        let mut g = DetectorGeometry::ideal(16, 12);
        g.read_noise = vec![3.0];
        g.dark_current = 0.1;
        Controller::new(ControllerConfig::new(g, SceneModel::flat(50.0)))
    }

    fn powered() -> Controller {
        let mut c = small();
        assert!(c.handle_async(&AsyncCommand::PowerOn).is_ok());
        c
    }

    fn load(c: &mut Controller, slot: u8, program: &[SyncInstruction], params: &ExposureParams) {
        let prog = Program::new(program.to_vec()).unwrap().encode();
        assert!(c.handle_async(&AsyncCommand::ArrayWrite { id: slot, data: prog }).is_ok());
        let json = serde_json::to_vec(params).unwrap();
        assert!(c.handle_async(&AsyncCommand::ArrayWrite { id: PARAMS_ARRAY, data: json }).is_ok());
    }

    fn events(msgs: &[Message]) -> Vec<StatusEvent> {
        msgs.iter()
            .filter(|m| m.kind == MessageKind::ServiceRequest)
            .map(|m| StatusEvent::decode(&m.body).unwrap())
            .collect()
    }

    #[test]
    fn status_poll_while_off_has_no_side_effects() {
        let mut c = small();
        let r = c.handle_async(&AsyncCommand::StatusPoll);
        let st: ControllerStatus = serde_json::from_slice(&r.payload).unwrap();
        assert_eq!(st.power, PowerState::Off);
        assert_eq!(c.power(), PowerState::Off);
        assert!(!c.is_running());
    }

    #[test]
    fn powered_off_rejects_everything_but_poll_and_power_on() {
        let mut c = small();
        for cmd in [
            AsyncCommand::PowerOff,
            AsyncCommand::Reset,
            AsyncCommand::ArrayWrite { id: 0, data: vec![] },
            AsyncCommand::ArrayRead { id: 0 },
            AsyncCommand::StartProcess { slot: 0, run: 0, seed: 0 },
            AsyncCommand::StopProcess { mode: StopMode::Abort },
            AsyncCommand::SyncClock { host_time: 0.0 },
            AsyncCommand::ExtDevice { device: 0, action: 0, value: 0 },
        ] {
            assert_eq!(c.handle_async(&cmd).error_code(), Some("powered-off"), "{cmd:?}");
        }
    }

    #[test]
    fn start_empty_slot_is_no_program() {
        let mut c = powered();
        let r = c.handle_async(&AsyncCommand::StartProcess { slot: 7, run: 0, seed: 1 });
        assert_eq!(r.error_code(), Some("no-program"));
    }

    #[test]
    fn frame_program_matches_direct_simulation() {
        let mut c = powered();
        let g = c.config().geometry.clone();
        let params = ExposureParams::new(ExposureType::Object, 2.5, &g);
        load(
            &mut c,
            1,
            &[
                SyncInstruction::TransferCtl { rows: 0, flush: true },
                SyncInstruction::integrate_seconds(params.exptime),
                SyncInstruction::ReadoutCtl { mode: ReadoutMode::Frame },
            ],
            &params,
        );
        for run in 0..3u32 {
            assert!(c.handle_async(&AsyncCommand::StartProcess { slot: 1, run, seed: 99 }).is_ok());
            let out = c.run_to_end();
            let video: Vec<u8> = out
                .iter()
                .filter(|m| m.kind == MessageKind::VideoData)
                .flat_map(|m| VideoHeader::decode(&m.body).unwrap().1.to_vec())
                .collect();
            let samples: Vec<u16> = video.chunks(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect();
            let mut p = params.clone();
            p.n_exposures = run as usize + 1;
            let direct = detector::simulate_exposure(&c.config().scene, &g, &p, 99).unwrap();
            assert_eq!(samples, direct[run as usize].samples);
            let ev = events(&out);
            assert!(matches!(ev.last(), Some(StatusEvent::Done { frames: 1, .. })));
        }
    }

    #[test]
    fn message_count_is_chunks_plus_terminal() {
        let mut c = powered();
        let g = c.config().geometry.clone();
        let params = ExposureParams::new(ExposureType::Bias, 0.0, &g);
        load(
            &mut c,
            0,
            &[SyncInstruction::IntegrateCtl { ticks: 0 }, SyncInstruction::ReadoutCtl { mode: ReadoutMode::Frame }],
            &params,
        );
        c.handle_async(&AsyncCommand::StartProcess { slot: 0, run: 0, seed: 1 });
        let out = c.run_to_end();
        let video = out.iter().filter(|m| m.kind == MessageKind::VideoData).count();
        // 16 x 12 x 2 = 384 bytes: one chunk.
        assert_eq!(video, 1);
        assert_eq!(events(&out).iter().filter(|e| e.is_terminal()).count(), 1);
    }

    #[test]
    fn loop_shifts_thirty_rows() {
        let mut c = powered();
        c.config.geometry = DetectorGeometry::ideal(64, 4);
        c.config.scene = SceneModel::flat(0.0);
        c.detector = ChargeImage::for_detector(&c.config.geometry);
        let g = c.config.geometry.clone();
        let params = ExposureParams::new(ExposureType::PushPull, 0.0, &g).with_push_pull(1.0, 3, 10);
        load(
            &mut c,
            2,
            &[
                SyncInstruction::integrate_seconds(1.0),
                SyncInstruction::TransferCtl { rows: 10, flush: false },
                SyncInstruction::SeqCtl { target: 0, count: 3 },
            ],
            &params,
        );
        c.detector.charge[2 * 4 + 1] = 1000.0;
        c.handle_async(&AsyncCommand::StartProcess { slot: 2, run: 0, seed: 0 });
        while c.is_running() {
            c.step(Instant::now());
        }
        assert_eq!(c.detector.get(32, 1), 1000.0);
        assert_eq!(c.detector.total(), 1000.0);
    }

    #[test]
    fn stop_abort_mid_readout_ends_stream() {
        let mut c = powered();
        c.config.chunks_per_step = 1;
        c.config.geometry = DetectorGeometry::ideal(64, 64);
        c.detector = ChargeImage::for_detector(&c.config.geometry);
        let g = c.config.geometry.clone();
        let params = ExposureParams::new(ExposureType::Dark, 1.0, &g);
        load(
            &mut c,
            0,
            &[SyncInstruction::integrate_seconds(1.0), SyncInstruction::ReadoutCtl { mode: ReadoutMode::Frame }],
            &params,
        );
        c.handle_async(&AsyncCommand::StartProcess { slot: 0, run: 0, seed: 0 });
        let mut out = Vec::new();
        // integrate, readout start, two chunks
        for _ in 0..4 {
            out.extend(c.step(Instant::now()));
        }
        assert!(c.handle_async(&AsyncCommand::StopProcess { mode: StopMode::Abort }).is_ok());
        out.extend(c.run_to_end());
        let video = out.iter().filter(|m| m.kind == MessageKind::VideoData).count();
        assert_eq!(video, 2);
        let last = out.last().unwrap();
        assert_eq!(StatusEvent::decode(&last.body).unwrap(), StatusEvent::Aborted { run: 0 });
        assert!(!c.is_running());
    }

    #[test]
    fn stop_finish_skips_to_readout() {
        let mut c = powered();
        let g = c.config().geometry.clone();
        let params = ExposureParams::new(ExposureType::Dark, 1.0, &g);
        load(
            &mut c,
            0,
            &[
                SyncInstruction::integrate_seconds(1.0),
                SyncInstruction::SeqCtl { target: 0, count: 1000 },
                SyncInstruction::ReadoutCtl { mode: ReadoutMode::Frame },
            ],
            &params,
        );
        c.handle_async(&AsyncCommand::StartProcess { slot: 0, run: 0, seed: 0 });
        for _ in 0..10 {
            c.step(Instant::now());
        }
        c.handle_async(&AsyncCommand::StopProcess { mode: StopMode::Finish });
        let out = c.run_to_end();
        let ev = events(&out);
        assert!(ev.iter().any(|e| matches!(e, StatusEvent::ReadoutComplete(_))));
        assert!(matches!(ev.last(), Some(StatusEvent::Done { frames: 1, .. })));
        assert!(c.clock() < 20.0);
    }

    #[test]
    fn runtime_error_latches_fault_until_reset() {
        let mut c = powered();
        let g = c.config().geometry.clone();
        // ROI outside the detector only fails when the program runs.
        let params = ExposureParams::new(ExposureType::Dark, 1.0, &g).with_roi(8, 0, 8, 4);
        load(
            &mut c,
            0,
            &[SyncInstruction::integrate_seconds(1.0), SyncInstruction::ReadoutCtl { mode: ReadoutMode::Frame }],
            &params,
        );
        c.handle_async(&AsyncCommand::StartProcess { slot: 0, run: 4, seed: 0 });
        let out = c.run_to_end();
        assert!(matches!(events(&out).last(), Some(StatusEvent::Fault { run: 4, .. })));
        assert_eq!(c.power(), PowerState::Fault);
        assert_eq!(c.handle_async(&AsyncCommand::StartProcess { slot: 0, run: 0, seed: 0 }).error_code(), Some("fault"));
        assert_eq!(c.handle_async(&AsyncCommand::PowerOn).error_code(), Some("fault"));
        assert!(c.handle_async(&AsyncCommand::Reset).is_ok());
        assert_eq!(c.power(), PowerState::Off);
        assert!(c.handle_async(&AsyncCommand::PowerOn).is_ok());
    }

    #[test]
    fn busy_while_running() {
        let mut c = powered();
        let g = c.config().geometry.clone();
        let params = ExposureParams::new(ExposureType::Dark, 1.0, &g);
        load(&mut c, 0, &[SyncInstruction::integrate_seconds(1.0)], &params);
        assert!(c.handle_async(&AsyncCommand::StartProcess { slot: 0, run: 0, seed: 0 }).is_ok());
        let r = c.handle_async(&AsyncCommand::StartProcess { slot: 0, run: 1, seed: 0 });
        assert_eq!(r.status, ReplyStatus::Busy);
    }

    #[test]
    fn telemetry_write_errors_name_register() {
        let mut c = powered();
        let data = br#"{"clock.V2": 15.0}"#.to_vec();
        let r = c.handle_async(&AsyncCommand::ArrayWrite { id: TELEMETRY_ARRAY, data });
        let code = r.error_code().unwrap();
        assert!(code.starts_with("out-of-range") && code.contains("clock.V2"), "{code}");
    }

    #[test]
    fn power_off_aborts_running_process() {
        let mut c = powered();
        let g = c.config().geometry.clone();
        let params = ExposureParams::new(ExposureType::Dark, 1.0, &g);
        load(&mut c, 0, &[SyncInstruction::integrate_seconds(1.0)], &params);
        c.handle_async(&AsyncCommand::StartProcess { slot: 0, run: 0, seed: 0 });
        c.handle_async(&AsyncCommand::PowerOff);
        let out = c.step(Instant::now());
        assert_eq!(events(&out), vec![StatusEvent::Aborted { run: 0 }]);
    }

    #[test]
    fn config_file_parses() {
        let kv = KeyValues::parse(
            "detector = ccd42-90\ntime_scale = 2\ntemperature_half_life = 30\nrange = clock.V1 0 11\n",
        )
        .unwrap();
        let cfg = ControllerConfig::from_config(&kv, None).unwrap();
        assert_eq!(cfg.geometry.rows, 4608);
        assert_eq!(cfg.time_scale, 2.0);
        assert_eq!(cfg.telemetry.ranges["clock.V1"], (0.0, 11.0));
    }
}
