//! The control server: one event loop owning the control state machine, the
//! controller session and the client channels.

use std::collections::{BTreeMap, HashMap};
use std::io;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, Sender};
use serde_json::{json, Value};

use crate::controller::{
    AsyncCommand, ControllerStatus, PowerState, Program, ReadoutInfo, StatusEvent, StopMode, SyncInstruction, Telemetry,
    VideoHeader, DEVICE_NAMES, PARAMS_ARRAY, TELEMETRY_ARRAY,
};
use crate::detector::{FrameMeta, RawFrame};

use super::assembly::{preview_tiles, Assembled, Assembler, PreviewTile};
use super::channels::{ChannelServer, Endpoints, LineSink, Source};
use super::config::{ControllerEndpoint, ServerConfig};
use super::devices::{DeviceError, DevicePlugin};
use super::fits::write_fits;
use super::fsm::{transition, ControlState, ControlVerb, FsmInput, InternalEvent};
use super::gateway::Gateway;
use super::http::{schema, HttpServer};
use super::line::{self, parse_line, CommandLine};
use super::link::{ControllerLink, LinkError, LinkSink};
use super::setup::{compile, frame_seconds, parse_setup, Setup};

const OBSERVE_SLOT: u8 = 0;
const FLUSH_SLOT: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error("{0}")]
    Link(#[from] LinkError),
    #[error("{0}")]
    Device(#[from] DeviceError),
}

/// Per-frame context handed to the assembler with the readout report.
#[derive(Debug, Clone)]
struct FrameCtx {
    observe: u64,
    index: usize,
    seed: u64,
    setup: Setup,
    detector: String,
    path: Option<PathBuf>,
    preview: bool,
}

#[derive(Debug)]
struct FrameResult {
    observe: u64,
    index: usize,
    path: Option<PathBuf>,
    missing_rows: Vec<usize>,
    tiles: Vec<PreviewTile>,
    error: Option<String>,
}

enum AsmMsg {
    Begin,
    Discard,
    Video(Vec<u8>),
    Readout(ReadoutInfo, Box<FrameCtx>),
}

enum CoreEvent {
    Line { source: Source, line: String, reply: Sender<String> },
    Controller(StatusEvent),
    ControllerLost(String),
    Frame(FrameResult),
    Shutdown,
}

#[derive(Clone)]
struct CoreSink(Sender<CoreEvent>);

impl LineSink for CoreSink {
    fn line(&self, source: Source, line: String, reply: Sender<String>) {
        let _ = self.0.send(CoreEvent::Line { source, line, reply });
    }
}

struct LinkEvents {
    core: Sender<CoreEvent>,
    asm: Sender<AsmMsg>,
}

impl LinkSink for LinkEvents {
    fn event(&self, event: StatusEvent) {
        let _ = self.core.send(CoreEvent::Controller(event));
    }

    fn video(&self, body: Vec<u8>) {
        let _ = self.asm.send(AsmMsg::Video(body));
    }

    fn lost(&self, reason: String) {
        let _ = self.core.send(CoreEvent::ControllerLost(reason));
    }
}

/// A running server. Dropping it shuts everything down.
pub struct Server {
    events: Sender<CoreEvent>,
    core: Option<JoinHandle<()>>,
    asm: Option<JoinHandle<()>>,
    link: Arc<ControllerLink>,
    endpoints: Endpoints,
    gateway: Option<SocketAddr>,
    http: Option<HttpServer>,
}

impl Server {
    pub fn start(config: ServerConfig) -> Result<Self, ServerError> {
        std::fs::create_dir_all(&config.data_dir)?;
        let (tx, rx) = crossbeam_channel::unbounded();
        let (asm_tx, asm_rx) = crossbeam_channel::unbounded();
        let link = Arc::new(ControllerLink::open(
            &config.controller,
            config.controller_timeout,
            LinkEvents { core: tx.clone(), asm: asm_tx.clone() },
        )?);
        let mut devices = BTreeMap::new();
        for spec in &config.devices {
            let plugin = DevicePlugin::spawn(spec)?;
            log::info!(target: "server", "device {}: {}", spec.name, plugin.description());
            devices.insert(spec.name.clone(), plugin);
        }
        let channels = ChannelServer::start(&config.channels, CoreSink(tx.clone()))?;
        let endpoints = channels.endpoints().clone();
        let gateway = match config.gateway {
            Some(addr) => Some(Gateway::start(addr, config.allow_origin.clone(), CoreSink(tx.clone()))?),
            None => None,
        };
        let telemetry = match &config.controller {
            ControllerEndpoint::Embedded { config: c, .. } => Telemetry::new(c.geometry.output_nodes, c.telemetry.clone()),
            ControllerEndpoint::Udp(_) => Telemetry::new(config.detector.output_nodes, Default::default()),
        };
        let http = match config.http {
            Some(addr) => Some(HttpServer::start(addr, config.static_dir.clone(), schema(&telemetry))?),
            None => None,
        };
        let gateway_addr = gateway.as_ref().map(Gateway::addr);
        log::info!(target: "server", "channels at {}", endpoints.describe());

        let asm = {
            let core = tx.clone();
            let grace = config.assembly_grace;
            std::thread::Builder::new().name("assembler".into()).spawn(move || assemble(asm_rx, core, grace))?
        };
        let now = Instant::now();
        let core = Core {
            link: link.clone(),
            state: ControlState::Standby,
            setup: None,
            loaded: false,
            observation: None,
            observe_count: 0,
            command: None,
            power: PowerState::Off,
            last_file: None,
            channels,
            gateway,
            devices,
            asm: asm_tx,
            next_status: now,
            next_telemetry: now,
            config,
        };
        let core = std::thread::Builder::new().name("server".into()).spawn(move || core.run(rx))?;
        Ok(Self { events: tx, core: Some(core), asm: Some(asm), link, endpoints, gateway: gateway_addr, http })
    }

    pub fn endpoints(&self) -> &Endpoints {
        &self.endpoints
    }

    pub fn gateway_addr(&self) -> Option<SocketAddr> {
        self.gateway
    }

    pub fn http_addr(&self) -> Option<SocketAddr> {
        self.http.as_ref().map(HttpServer::addr)
    }

    /// Commands sent to the controller since start.
    pub fn controller_commands(&self) -> u64 {
        self.link.commands_sent()
    }

    /// Blocks until the server stops.
    pub fn wait(mut self) {
        if let Some(c) = self.core.take() {
            let _ = c.join();
        }
        self.shutdown();
    }

    pub fn shutdown(&mut self) {
        let _ = self.events.send(CoreEvent::Shutdown);
        if let Some(c) = self.core.take() {
            let _ = c.join();
        }
        if let Some(a) = self.asm.take() {
            let _ = a.join();
        }
        if let Some(mut h) = self.http.take() {
            h.stop();
        }
        self.link.close();
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown();
    }
}

// ---------------------------------------------------------------------------
// Assembler thread

fn assemble(rx: Receiver<AsmMsg>, core: Sender<CoreEvent>, grace: Duration) {
    let mut asm = Assembler::new(grace);
    let mut ctx: HashMap<(u32, u32), Box<FrameCtx>> = HashMap::new();
    loop {
        let now = Instant::now();
        let mut done = Vec::new();
        match rx.recv_timeout(Duration::from_millis(50)) {
            Ok(AsmMsg::Begin) => {
                asm.begin();
                ctx.clear();
            }
            Ok(AsmMsg::Discard) => {
                asm.discard();
                ctx.clear();
            }
            Ok(AsmMsg::Video(body)) => match VideoHeader::decode(&body) {
                Ok((h, data)) => done.extend(asm.on_video(&h, data, now)),
                Err(e) => log::warn!(target: "assembler", "bad video message: {e}"),
            },
            Ok(AsmMsg::Readout(info, c)) => {
                ctx.insert((info.run, info.frame), c);
                done.extend(asm.on_readout(info, now));
            }
            Err(crossbeam_channel::RecvTimeoutError::Timeout) => {}
            Err(crossbeam_channel::RecvTimeoutError::Disconnected) => return,
        }
        done.extend(asm.poll(now));
        for frame in done {
            let Some(c) = ctx.remove(&(frame.info.run, frame.info.frame)) else { continue };
            if core.send(CoreEvent::Frame(finish_frame(frame, *c))).is_err() {
                return;
            }
        }
    }
}

fn finish_frame(a: Assembled, c: FrameCtx) -> FrameResult {
    let tiles = if c.preview { preview_tiles(c.index, &a.samples, a.info.width, a.info.height) } else { Vec::new() };
    let params = c.setup.params.clone();
    let frame = RawFrame {
        width: a.info.width,
        height: a.info.height,
        meta: FrameMeta {
            node: params.node,
            params,
            detector: c.detector,
            start: a.info.start,
            stop: a.info.stop,
            saturated: a.info.saturated,
            seed: c.seed,
            frame_index: c.index,
            ramp_rows: a.info.ramp_rows,
            incomplete: a.incomplete(),
            missing_rows: a.missing_rows.clone(),
            date_obs: Some(chrono::Utc::now().format("%Y-%m-%dT%H:%M:%S%.3f").to_string()),
        },
        samples: a.samples,
    };
    let mut error = None;
    if let Some(path) = &c.path {
        if let Err(e) = write_fits(&frame, path) {
            log::error!(target: "server", "writing {}: {e}", path.display());
            error = Some(e.to_string());
        }
    }
    FrameResult {
        observe: c.observe,
        index: c.index,
        path: if error.is_none() { c.path } else { None },
        missing_rows: a.missing_rows,
        tiles,
        error,
    }
}

// ---------------------------------------------------------------------------
// Control loop

struct Observation {
    id: u64,
    seed: u64,
    total: usize,
    /// Index of the frame being acquired.
    current: usize,
    done: usize,
    controller_done: bool,
    result: Option<FrameResult>,
    stop_requested: bool,
    frame_seconds: f64,
}

/// A `run_cmd` procedure still waiting on the controller.
struct PendingCmd {
    procedure: String,
}

struct Core {
    config: ServerConfig,
    link: Arc<ControllerLink>,
    state: ControlState,
    setup: Option<Setup>,
    /// Whether the controller holds the current setup's program and params.
    loaded: bool,
    observation: Option<Observation>,
    observe_count: u64,
    command: Option<PendingCmd>,
    power: PowerState,
    last_file: Option<PathBuf>,
    channels: ChannelServer,
    gateway: Option<Gateway>,
    devices: BTreeMap<String, DevicePlugin>,
    asm: Sender<AsmMsg>,
    next_status: Instant,
    next_telemetry: Instant,
}

type Reply = Result<String, String>;

fn refused(r: super::fsm::Refusal) -> String {
    line::err(r.code.as_str(), format!("state={}", r.state))
}

fn controller_err(e: LinkError) -> String {
    match e {
        LinkError::Timeout => line::err("controller-timeout", ""),
        LinkError::Transport(m) => line::err("controller-lost", m),
    }
}

impl Core {
    fn run(mut self, rx: Receiver<CoreEvent>) {
        loop {
            let wait = self.next_tick().saturating_duration_since(Instant::now());
            match rx.recv_timeout(wait) {
                Ok(CoreEvent::Shutdown) | Err(crossbeam_channel::RecvTimeoutError::Disconnected) => break,
                Ok(CoreEvent::Line { source, line, reply }) => {
                    let answer = self.on_line(source, &line);
                    let _ = reply.send(answer);
                }
                Ok(CoreEvent::Controller(ev)) => self.on_controller(ev),
                Ok(CoreEvent::ControllerLost(reason)) => self.fault(&format!("controller-lost {reason}")),
                Ok(CoreEvent::Frame(f)) => self.on_frame(f),
                Err(crossbeam_channel::RecvTimeoutError::Timeout) => {}
            }
            self.tick();
        }
        self.channels.stop();
        if let Some(mut g) = self.gateway.take() {
            g.stop();
        }
        self.link.close();
    }

    fn next_tick(&self) -> Instant {
        let mut t = self.next_status;
        if !self.config.telemetry_period.is_zero() {
            t = t.min(self.next_telemetry);
        }
        t
    }

    fn tick(&mut self) {
        let now = Instant::now();
        let Some(gw) = &self.gateway else {
            self.next_status = now + Duration::from_secs(3600);
            self.next_telemetry = self.next_status;
            return;
        };
        if now >= self.next_status {
            self.next_status = now + self.config.status_period.max(Duration::from_millis(10));
            if gw.clients() > 0 {
                gw.broadcast("status", self.status_record());
            }
        }
        if !self.config.telemetry_period.is_zero() && now >= self.next_telemetry {
            self.next_telemetry = now + self.config.telemetry_period;
            if gw.clients() > 0 && self.power == PowerState::On {
                if let Ok(r) = self.link.request(&AsyncCommand::ArrayRead { id: TELEMETRY_ARRAY }) {
                    if let Ok(v) = serde_json::from_slice::<Value>(&r.payload) {
                        if r.is_ok() {
                            if let Some(gw) = &self.gateway {
                                gw.broadcast("telemetry", v);
                            }
                        }
                    }
                }
            }
        }
    }

    fn emit(&self, name: &str, fields: &[(&str, String)]) {
        let text = line::event(name, fields);
        log::info!(target: "server", "{text}");
        self.channels.broadcast(&text);
        if let Some(gw) = &self.gateway {
            let mut payload = serde_json::Map::new();
            payload.insert("name".into(), json!(name));
            payload.insert("line".into(), json!(text));
            for (k, v) in fields {
                payload.insert((*k).into(), json!(v));
            }
            gw.broadcast("event", Value::Object(payload));
        }
    }

    fn set_state(&mut self, state: ControlState) {
        if state != self.state {
            self.state = state;
            self.emit("state", &[("state", state.as_str().to_string())]);
        }
    }

    fn apply(&mut self, input: FsmInput) -> Result<ControlState, String> {
        transition(self.state, input).map_err(refused)
    }

    // -- lines -----------------------------------------------------------

    fn on_line(&mut self, source: Source, text: &str) -> String {
        let cmd = match parse_line(text) {
            Ok(c) => c,
            Err(e) => return line::err("parse", format!("column={} {}", e.column, e.message)),
        };
        let verb = cmd.verb.as_str();
        let result = match verb.parse::<ControlVerb>() {
            Ok(_) if source == Source::Info => {
                Err(line::err("wrong-channel", format!("{verb} is a control command; use the command channel")))
            }
            Ok(v) => self.control(v, &cmd),
            Err(_) => match verb {
                "status" => Ok(self.status_line()),
                "get" => self.get(&cmd),
                "set" => self.set(&cmd),
                _ => Err(line::err("unknown-verb", verb)),
            },
        };
        result.unwrap_or_else(|e| e)
    }

    fn control(&mut self, verb: ControlVerb, cmd: &CommandLine) -> Reply {
        let next = self.apply(FsmInput::Verb(verb))?;
        match verb {
            ControlVerb::Setup => self.setup(cmd, next),
            ControlVerb::Observe => self.observe(next),
            ControlVerb::Stop => self.stop(next),
            ControlVerb::Abort => self.abort(next),
            ControlVerb::RunCmd => self.run_cmd(cmd, next),
        }
    }

    fn request(&mut self, cmd: &AsyncCommand) -> Result<Vec<u8>, String> {
        let r = self.link.request(cmd).map_err(controller_err)?;
        if r.is_ok() {
            return Ok(r.payload);
        }
        Err(match r.error_code() {
            Some(code) => {
                let (c, rest) = code.split_once(' ').unwrap_or((code, ""));
                line::err(c, rest)
            }
            None => line::err("controller-busy", format!("{:?}", r.in_reply_to)),
        })
    }

    fn poll_status(&mut self) -> Result<ControllerStatus, String> {
        let payload = self.request(&AsyncCommand::StatusPoll)?;
        let st: ControllerStatus =
            serde_json::from_slice(&payload).map_err(|e| line::err("controller-protocol", e))?;
        self.power = st.power;
        Ok(st)
    }

    /// Brings the controller to powered-on with the setup's program loaded.
    fn load(&mut self, setup: &Setup) -> Result<(), String> {
        let st = self.poll_status()?;
        if st.power == PowerState::Fault {
            self.request(&AsyncCommand::Reset)?;
            self.power = PowerState::Off;
        }
        if self.power != PowerState::On {
            self.request(&AsyncCommand::PowerOn)?;
            self.power = PowerState::On;
        }
        let host_time = chrono::Utc::now().timestamp_micros() as f64 / 1e6;
        self.request(&AsyncCommand::SyncClock { host_time })?;
        let params = serde_json::to_vec(&setup.params).expect("params serialize");
        self.request(&AsyncCommand::ArrayWrite { id: PARAMS_ARRAY, data: params })?;
        let program = compile(&setup.params, &self.config.detector).encode();
        self.request(&AsyncCommand::ArrayWrite { id: OBSERVE_SLOT, data: program })?;
        self.loaded = true;
        Ok(())
    }

    fn setup(&mut self, cmd: &CommandLine, next: ControlState) -> Reply {
        let setup = parse_setup(cmd, &self.config.detector).map_err(|e| line::err("bad-arg", format!("{} {}", e.field, e.reason)))?;
        self.load(&setup)?;
        let p = &setup.params;
        let (w, h) = p.output_dims();
        let reply = line::ok(format!(
            "setup type={} frames={} width={w} height={h} write={}",
            p.exposure_type.as_str(),
            p.n_exposures,
            setup.write as u8
        ));
        self.setup = Some(setup);
        self.set_state(next);
        Ok(reply)
    }

    fn frame_ctx(&self, obs: &Observation, index: usize) -> FrameCtx {
        let setup = self.setup.clone().expect("observing needs a setup");
        let path = setup.write.then(|| {
            self.config.data_dir.join(format!("{}{:04}-{:03}.fits", self.config.file_prefix, obs.id, index))
        });
        FrameCtx {
            observe: obs.id,
            index,
            seed: obs.seed,
            setup,
            detector: self.config.detector.name.clone(),
            path,
            preview: self.gateway.is_some(),
        }
    }

    fn start_frame(&mut self, index: usize, seed: u64) -> Result<(), String> {
        self.request(&AsyncCommand::StartProcess { slot: OBSERVE_SLOT, run: index as u32, seed })?;
        Ok(())
    }

    fn observe(&mut self, next: ControlState) -> Reply {
        let setup = self.setup.clone().expect("Ready implies a setup");
        if !self.loaded {
            self.load(&setup)?;
        }
        self.observe_count += 1;
        let seed = setup.seed.unwrap_or(self.config.seed.wrapping_add(self.observe_count));
        let total = if setup.params.exposure_type.is_frame_type() { setup.params.n_exposures.max(1) } else { 1 };
        let _ = self.asm.send(AsmMsg::Begin);
        self.start_frame(0, seed)?;
        self.observation = Some(Observation {
            id: self.observe_count,
            seed,
            total,
            current: 0,
            done: 0,
            controller_done: false,
            result: None,
            stop_requested: false,
            frame_seconds: frame_seconds(&setup.params, &self.config.detector),
        });
        self.set_state(next);
        Ok(line::ok(format!("observe started id={} frames={total} seed={seed}", self.observe_count)))
    }

    fn stop(&mut self, next: ControlState) -> Reply {
        if let Some(o) = &mut self.observation {
            o.stop_requested = true;
        }
        match self.request(&AsyncCommand::StopProcess { mode: StopMode::Finish }) {
            Ok(_) => {}
            Err(e) if e.starts_with("ERR not-running") => {}
            Err(e) => return Err(e),
        }
        self.set_state(next);
        Ok(line::ok("stop"))
    }

    fn abort(&mut self, next: ControlState) -> Reply {
        match self.request(&AsyncCommand::StopProcess { mode: StopMode::Abort }) {
            Ok(_) => {}
            Err(e) if e.starts_with("ERR not-running") => {}
            Err(e) => return Err(e),
        }
        let _ = self.asm.send(AsmMsg::Discard);
        let frames = self.observation.take().map_or(0, |o| o.done);
        self.command = None;
        self.set_state(next);
        self.emit("aborted", &[("frames", frames.to_string())]);
        Ok(line::ok("abort"))
    }

    fn run_cmd(&mut self, cmd: &CommandLine, next: ControlState) -> Reply {
        let Some(procedure) = cmd.positional.first().cloned() else {
            return Err(line::err("bad-arg", "run_cmd needs a procedure name"));
        };
        let args = &cmd.positional[1..];
        let detail = match procedure.as_str() {
            "flush" => {
                let rows = self.config.detector.rows as u32;
                let prog = Program::new(vec![SyncInstruction::TransferCtl { rows, flush: true }]).expect("flush program");
                self.request(&AsyncCommand::ArrayWrite { id: FLUSH_SLOT, data: prog.encode() })?;
                self.request(&AsyncCommand::StartProcess { slot: FLUSH_SLOT, run: 0, seed: 0 })?;
                self.command = Some(PendingCmd { procedure });
                self.set_state(next);
                return Ok(line::ok("run_cmd flush started"));
            }
            "power-on" => {
                self.request(&AsyncCommand::PowerOn)?;
                self.power = PowerState::On;
                String::new()
            }
            "power-off" => {
                self.request(&AsyncCommand::PowerOff)?;
                self.power = PowerState::Off;
                String::new()
            }
            "reset" => {
                self.request(&AsyncCommand::Reset)?;
                self.loaded = false;
                self.poll_status()?;
                String::new()
            }
            "poll" => {
                let st = self.poll_status()?;
                format!("power={} running={} clock={:.6}", power_str(st.power), st.running as u8, st.clock)
            }
            "sync-clock" => {
                let host_time = chrono::Utc::now().timestamp_micros() as f64 / 1e6;
                self.request(&AsyncCommand::SyncClock { host_time })?;
                String::new()
            }
            "device" => {
                let [name, value] = args else {
                    return Err(line::err("bad-arg", "usage: run_cmd device <name> <value>"));
                };
                self.set_device(name, value)?
            }
            other => return Err(line::err("bad-arg", format!("unknown procedure `{other}`"))),
        };
        // Synchronous procedures finish before the reply.
        self.state = next;
        let done = self.apply(FsmInput::Event(InternalEvent::CmdComplete))?;
        self.state = done;
        self.emit("cmd-complete", &[("proc", procedure.clone())]);
        Ok(line::ok(format!("run_cmd {procedure} {detail}").trim_end().to_string()))
    }

    fn set_device(&mut self, name: &str, value: &str) -> Result<String, String> {
        if let Some(p) = self.devices.get_mut(name) {
            return p.set(value).map_err(|e| line::err("device", e));
        }
        let Some(id) = DEVICE_NAMES.iter().position(|d| *d == name) else {
            return Err(line::err("bad-arg", format!("unknown device `{name}`")));
        };
        let value: i32 = value.parse().map_err(|_| line::err("bad-arg", format!("device value `{value}`")))?;
        self.request(&AsyncCommand::ExtDevice { device: id as u8, action: 1, value })?;
        Ok(format!("value={value}"))
    }

    // -- info ------------------------------------------------------------

    fn status_line(&self) -> String {
        let (done, total) = self.observation.as_ref().map_or((0, 0), |o| (o.done, o.total));
        line::ok(format!(
            "state={} frames_done={done}/{total} percent={:.1} eta={:.1} power={}",
            self.state,
            self.percent(),
            self.eta(),
            power_str(self.power)
        ))
    }

    fn percent(&self) -> f64 {
        self.observation.as_ref().map_or(0.0, |o| 100.0 * o.done as f64 / o.total.max(1) as f64)
    }

    /// Nominal simulated seconds left in the sequence.
    fn eta(&self) -> f64 {
        self.observation.as_ref().map_or(0.0, |o| (o.total - o.done) as f64 * o.frame_seconds)
    }

    fn status_record(&self) -> Value {
        let (done, total, seed) = self.observation.as_ref().map_or((0, 0, None), |o| (o.done, o.total, Some(o.seed)));
        json!({
            "state": self.state.as_str(),
            "frames_done": done,
            "frames_total": total,
            "percent": self.percent(),
            "eta": self.eta(),
            "power": power_str(self.power),
            "seed": seed,
            "last_file": self.last_file.as_ref().map(|p| p.display().to_string()),
        })
    }

    fn get(&self, cmd: &CommandLine) -> Reply {
        let Some(key) = cmd.positional.first() else {
            return Err(line::err("bad-arg", "get needs a key"));
        };
        let p = self.setup.as_ref().map(|s| &s.params);
        let value = match key.as_str() {
            "state" => self.state.as_str().to_string(),
            "power" => power_str(self.power).to_string(),
            "frames_done" => {
                let (d, t) = self.observation.as_ref().map_or((0, 0), |o| (o.done, o.total));
                format!("{d}/{t}")
            }
            "seed" => self.observation.as_ref().map_or("none".into(), |o| o.seed.to_string()),
            "last_file" => self.last_file.as_ref().map_or("none".into(), |p| p.display().to_string()),
            "commands" => self.link.commands_sent().to_string(),
            "detector" => self.config.detector.name.clone(),
            "params" => match p {
                Some(p) => serde_json::to_string(p).expect("params serialize"),
                None => return Err(line::err("not-initialized", "no setup")),
            },
            "type" | "exptime" | "n" | "bin" | "roi" | "speed" | "gain" | "write" => {
                let Some(s) = &self.setup else { return Err(line::err("not-initialized", "no setup")) };
                let p = &s.params;
                match key.as_str() {
                    "type" => p.exposure_type.as_str().to_string(),
                    "exptime" => p.exptime.to_string(),
                    "n" => p.n_exposures.to_string(),
                    "bin" => format!("{}x{}", p.bin_x, p.bin_y),
                    "roi" => format!("{},{},{},{}", p.roi.x0, p.roi.y0, p.roi.width, p.roi.height),
                    "speed" => p.speed.to_string(),
                    "gain" => p.gain_index.to_string(),
                    _ => (s.write as u8).to_string(),
                }
            }
            other => return Err(line::err("bad-arg", format!("unknown key `{other}`"))),
        };
        Ok(line::ok(format!("{key}={}", line::quote(&value))))
    }

    fn set(&mut self, cmd: &CommandLine) -> Reply {
        let (register, value) = match (cmd.positional.as_slice(), cmd.named.first()) {
            ([r, v], None) => (r.clone(), v.clone()),
            ([], Some((r, v))) if cmd.named.len() == 1 => (r.clone(), v.clone()),
            _ => return Err(line::err("bad-arg", "usage: set <register> <value>")),
        };
        let v: f64 = value.parse().map_err(|_| line::err("bad-arg", format!("`{value}` is not a number")))?;
        let data = serde_json::to_vec(&BTreeMap::from([(register.clone(), v)])).expect("map serializes");
        self.request(&AsyncCommand::ArrayWrite { id: TELEMETRY_ARRAY, data })?;
        Ok(line::ok(format!("set {register}={v}")))
    }

    // -- controller events -----------------------------------------------

    fn on_controller(&mut self, ev: StatusEvent) {
        match ev {
            StatusEvent::IntegrationComplete { run, .. } => {
                if self.state == ControlState::Exposing && self.is_current(run) {
                    if let Ok(s) = self.apply(FsmInput::Event(InternalEvent::IntegrationComplete)) {
                        self.emit("integration-complete", &[("frame", run.to_string())]);
                        self.set_state(s);
                    }
                }
            }
            StatusEvent::ReadoutComplete(info) => {
                if !self.is_current(info.run) || self.command.is_some() {
                    return;
                }
                let obs = self.observation.as_ref().expect("current observation");
                let ctx = self.frame_ctx(obs, info.run as usize);
                let _ = self.asm.send(AsmMsg::Readout(info, Box::new(ctx)));
            }
            StatusEvent::Device { device, value, .. } => {
                let name = crate::controller::device_name(device);
                self.emit("device", &[("name", name.clone()), ("value", value.to_string())]);
                if let Some(p) = self.devices.get_mut(&name) {
                    if let Err(e) = p.set(&value.to_string()) {
                        log::warn!(target: "server", "{e}");
                    }
                }
            }
            StatusEvent::Done { run, frames } => {
                if let Some(c) = self.command.take() {
                    if let Ok(s) = self.apply(FsmInput::Event(InternalEvent::CmdComplete)) {
                        self.state = s;
                        self.emit("cmd-complete", &[("proc", c.procedure)]);
                        self.emit("state", &[("state", s.as_str().to_string())]);
                    }
                    return;
                }
                if !self.is_current(run) {
                    return;
                }
                let o = self.observation.as_mut().expect("current observation");
                o.controller_done = true;
                if frames == 0 {
                    // Nothing was read out, so no frame will arrive.
                    o.result = Some(FrameResult {
                        observe: o.id,
                        index: o.current,
                        path: None,
                        missing_rows: Vec::new(),
                        tiles: Vec::new(),
                        error: None,
                    });
                }
                self.advance();
            }
            StatusEvent::Aborted { run } => {
                if self.is_current(run) {
                    let _ = self.asm.send(AsmMsg::Discard);
                    let frames = self.observation.take().map_or(0, |o| o.done);
                    self.set_state(ControlState::Ready);
                    self.emit("aborted", &[("frames", frames.to_string())]);
                }
            }
            StatusEvent::Fault { reason, .. } => self.fault(&reason),
        }
    }

    fn is_current(&self, run: u32) -> bool {
        self.observation.as_ref().is_some_and(|o| o.current == run as usize)
    }

    fn fault(&mut self, reason: &str) {
        let _ = self.asm.send(AsmMsg::Discard);
        self.observation = None;
        self.command = None;
        self.loaded = false;
        if let Ok(s) = self.apply(FsmInput::Event(InternalEvent::ControllerFault)) {
            self.emit("fault", &[("reason", reason.to_string())]);
            self.set_state(s);
        }
        if !reason.starts_with("controller-lost") {
            self.power = PowerState::Fault;
        }
    }

    fn on_frame(&mut self, f: FrameResult) {
        let Some(o) = self.observation.as_mut() else { return };
        if o.id != f.observe || o.current != f.index {
            return;
        }
        if let Some(gw) = &self.gateway {
            for t in &f.tiles {
                gw.broadcast("preview", serde_json::to_value(t).expect("tile serializes"));
            }
        }
        let file = f.path.as_ref().map_or(String::new(), |p| p.display().to_string());
        if let Some(p) = &f.path {
            self.last_file = Some(p.clone());
        }
        let mut fields = vec![
            ("frame", f.index.to_string()),
            ("file", file),
            ("incomplete", (!f.missing_rows.is_empty() as u8).to_string()),
        ];
        if let Some(e) = &f.error {
            fields.push(("error", e.clone()));
        }
        o.result = Some(f);
        self.emit("readout-complete", &fields);
        self.advance();
    }

    /// Moves to the next frame once both the controller and the assembler
    /// are finished with the current one.
    fn advance(&mut self) {
        let Some(o) = self.observation.as_mut() else { return };
        if !(o.controller_done && o.result.is_some()) {
            return;
        }
        o.done += 1;
        let remain = o.done < o.total && !o.stop_requested;
        // A stop or a scan can finish a frame before integration was reported.
        if self.state == ControlState::Exposing {
            self.state = ControlState::Reading;
        }
        let next = match self.apply(FsmInput::Event(InternalEvent::FrameComplete { frames_remain: remain })) {
            Ok(s) => s,
            Err(e) => {
                log::warn!(target: "server", "frame completion refused: {e}");
                return;
            }
        };
        let o = self.observation.as_mut().expect("observation");
        if remain {
            o.current = o.done;
            o.controller_done = false;
            o.result = None;
            let (index, seed) = (o.current, o.seed);
            self.state = next;
            if let Err(e) = self.start_frame(index, seed) {
                log::error!(target: "server", "starting frame {index}: {e}");
                self.fault(&format!("start-failed {}", e.trim_start_matches("ERR ")));
                return;
            }
            self.emit("state", &[("state", next.as_str().to_string())]);
        } else {
            let frames = o.done;
            self.set_state(next);
            self.emit("exposure-complete", &[("frames", frames.to_string())]);
        }
    }
}

fn power_str(p: PowerState) -> &'static str {
    match p {
        PowerState::Off => "off",
        PowerState::On => "on",
        PowerState::Fault => "fault",
    }
}
