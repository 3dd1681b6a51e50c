//! Server configuration file.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use crate::config::{ConfigError, KeyValues};
use crate::controller::ControllerConfig;
use crate::detector::{DetectorError, DetectorGeometry, SceneModel};
use crate::transport::ChannelConfig;

/// Where the four client channels live.
#[derive(Debug, Clone, PartialEq)]
pub enum ChannelSpec {
    /// Unix stream sockets named after the channels inside a directory.
    Dir(PathBuf),
    /// TCP ports `base`, `base+1`, `base+2`, `base+3`; port 0 picks a free
    /// block.
    Tcp(SocketAddr),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ControllerEndpoint {
    /// Controller emulator in a thread of the server, over an in-memory
    /// datagram channel.
    Embedded { config: Box<ControllerConfig>, channel: ChannelConfig },
    /// A separate `host:port` UDP peer.
    Udp(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceSpec {
    pub name: String,
    pub command: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerConfig {
    pub detector: DetectorGeometry,
    pub controller: ControllerEndpoint,
    pub channels: ChannelSpec,
    pub gateway: Option<SocketAddr>,
    pub http: Option<SocketAddr>,
    pub static_dir: Option<PathBuf>,
    pub data_dir: PathBuf,
    pub file_prefix: String,
    /// Allowed `Origin` values for the gateway; `*` allows any. When empty,
    /// only local origins are accepted.
    pub allow_origin: Vec<String>,
    pub status_period: Duration,
    /// Zero disables telemetry polling.
    pub telemetry_period: Duration,
    pub seed: u64,
    pub assembly_grace: Duration,
    pub controller_timeout: Duration,
    pub devices: Vec<DeviceSpec>,
}

impl ServerConfig {
    /// Embedded controller on `geometry` with a flat scene; channels in
    /// `dir`; no gateway.
    pub fn embedded(geometry: DetectorGeometry, scene: SceneModel, dir: impl Into<PathBuf>) -> Self {
        let dir = dir.into();
        Self {
            detector: geometry.clone(),
            controller: ControllerEndpoint::Embedded {
                config: Box::new(ControllerConfig::new(geometry, scene)),
                channel: ChannelConfig::perfect(),
            },
            channels: ChannelSpec::Dir(dir.join("channels")),
            gateway: None,
            http: None,
            static_dir: None,
            data_dir: dir.join("data"),
            file_prefix: "ccd".into(),
            allow_origin: Vec::new(),
            status_period: Duration::from_millis(250),
            telemetry_period: Duration::from_secs(1),
            seed: 1,
            assembly_grace: Duration::from_secs(1),
            controller_timeout: Duration::from_secs(2),
            devices: Vec::new(),
        }
    }

    pub fn from_config(kv: &KeyValues, base_dir: Option<&Path>) -> Result<Self, DetectorError> {
        kv.check_keys(&[
            "detector",
            "controller",
            "controller_config",
            "channel_dir",
            "channel_port",
            "gateway_port",
            "http_port",
            "bind",
            "static_dir",
            "data_dir",
            "file_prefix",
            "allow_origin",
            "status_period_ms",
            "telemetry_period_ms",
            "seed",
            "assembly_grace_ms",
            "controller_timeout_ms",
            "device",
        ])?;
        let resolve = |p: &str| -> PathBuf {
            match base_dir {
                Some(d) if Path::new(p).is_relative() => d.join(p),
                _ => PathBuf::from(p),
            }
        };
        let preset_or_path = |p: &str| -> String {
            if DetectorGeometry::preset_names().contains(&p) {
                p.to_string()
            } else {
                resolve(p).to_string_lossy().into_owned()
            }
        };
        let embedded = match kv.get_str("controller_config") {
            Some(p) => ControllerConfig::load(resolve(p))?,
            None => {
                let g = DetectorGeometry::load(&preset_or_path(kv.get_str("detector").unwrap_or("ccd42-40")))?;
                ControllerConfig::new(g, SceneModel::flat(10.0))
            }
        };
        let detector = match kv.get_str("detector") {
            Some(d) => DetectorGeometry::load(&preset_or_path(d))?,
            None => embedded.geometry.clone(),
        };
        let controller = match kv.get_str("controller").unwrap_or("embedded") {
            "embedded" => ControllerEndpoint::Embedded { config: Box::new(embedded), channel: ChannelConfig::perfect() },
            other => ControllerEndpoint::Udp(other.strip_prefix("udp://").unwrap_or(other).to_string()),
        };
        let bind: std::net::IpAddr = kv.get_or("bind", std::net::IpAddr::from([127, 0, 0, 1]))?;
        let port = |key: &str| -> Result<Option<SocketAddr>, ConfigError> {
            Ok(kv.get::<u16>(key)?.map(|p| SocketAddr::new(bind, p)))
        };
        let channels = match (kv.get_str("channel_dir"), port("channel_port")?) {
            (Some(d), None) => ChannelSpec::Dir(resolve(d)),
            (None, Some(addr)) => ChannelSpec::Tcp(addr),
            (None, None) => ChannelSpec::Dir(std::env::temp_dir().join("ccdaq-channels")),
            (Some(_), Some(_)) => {
                let e = kv.entry("channel_port").unwrap();
                return Err(e.error("give either channel_dir or channel_port, not both").into());
            }
        };
        let mut devices = Vec::new();
        for e in kv.all("device") {
            let mut parts = e.value.split_whitespace().map(String::from);
            let (Some(name), command) = (parts.next(), parts.collect::<Vec<_>>()) else {
                return Err(e.error("expected `name command [args...]`").into());
            };
            if command.is_empty() {
                return Err(e.error("expected `name command [args...]`").into());
            }
            devices.push(DeviceSpec { name, command });
        }
        let ms = |key: &str, d: u64| -> Result<Duration, ConfigError> { Ok(Duration::from_millis(kv.get_or(key, d)?)) };
        Ok(Self {
            detector,
            controller,
            channels,
            gateway: port("gateway_port")?,
            http: port("http_port")?,
            static_dir: kv.get_str("static_dir").map(resolve),
            data_dir: resolve(kv.get_str("data_dir").unwrap_or("data")),
            file_prefix: kv.get_str("file_prefix").unwrap_or("ccd").to_string(),
            allow_origin: kv
                .get_str("allow_origin")
                .map(|v| crate::config::split_list(v).map(String::from).collect())
                .unwrap_or_default(),
            status_period: ms("status_period_ms", 250)?,
            telemetry_period: ms("telemetry_period_ms", 1000)?,
            seed: kv.get_or("seed", 1)?,
            assembly_grace: ms("assembly_grace_ms", 1000)?,
            controller_timeout: ms("controller_timeout_ms", 2000)?,
            devices,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DetectorError> {
        let path = path.as_ref();
        let kv = KeyValues::load(path)?;
        Self::from_config(&kv, path.parent())
    }
}
