//! Telemetry registers: clock levels, output-stage voltages and currents,
//! and detector temperature.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const TEMPERATURE: &str = "ccd-temp";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegisterGroup {
    Clock,
    NodeVoltage,
    NodeCurrent,
    Temperature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterSpec {
    pub group: RegisterGroup,
    pub unit: &'static str,
    pub min: f64,
    pub max: f64,
    /// Standard deviation of readback noise.
    pub noise: f64,
    pub writable: bool,
    pub default: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TelemetryError {
    #[error("unknown register `{0}`")]
    Unknown(String),
    #[error("register `{0}` is read-only")]
    ReadOnly(String),
    #[error("register `{register}`: {value} outside [{min}, {max}]")]
    OutOfRange { register: String, value: f64, min: f64, max: f64 },
}

impl TelemetryError {
    pub fn register(&self) -> &str {
        match self {
            TelemetryError::Unknown(r) | TelemetryError::ReadOnly(r) => r,
            TelemetryError::OutOfRange { register, .. } => register,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryConfig {
    pub clock_noise: f64,
    pub voltage_noise: f64,
    pub current_noise: f64,
    pub temperature_noise: f64,
    pub temperature_initial: f64,
    /// Seconds for the distance to the set-point to halve.
    pub temperature_half_life: f64,
    /// Output-stage transconductance, mA per volt of drain voltage.
    pub node_transconductance: f64,
    /// Overrides of register ranges: name -> (min, max).
    pub ranges: BTreeMap<String, (f64, f64)>,
    pub seed: u64,
}

impl Default for TelemetryConfig {
    fn default() -> Self {
        Self {
            clock_noise: 0.01,
            voltage_noise: 0.01,
            current_noise: 0.005,
            temperature_noise: 0.02,
            temperature_initial: 293.0,
            temperature_half_life: 60.0,
            node_transconductance: 0.2,
            ranges: BTreeMap::new(),
            seed: 0x7E1E,
        }
    }
}

pub const CLOCK_PHASES: [&str; 7] = ["V1", "V2", "V3", "H1", "H2", "H3", "RG"];
const CLOCK_DEFAULTS: [f64; 7] = [10.0, 10.0, 10.0, 8.0, 8.0, 8.0, 9.0];

/// Register bank of one controller.
#[derive(Debug, Clone)]
pub struct Telemetry {
    specs: BTreeMap<String, RegisterSpec>,
    setpoints: BTreeMap<String, f64>,
    temperature: f64,
    config: TelemetryConfig,
    rng: ChaCha8Rng,
}

impl Telemetry {
    pub fn new(nodes: usize, config: TelemetryConfig) -> Self {
        let mut specs = BTreeMap::new();
        for (phase, default) in CLOCK_PHASES.iter().zip(CLOCK_DEFAULTS) {
            specs.insert(
                format!("clock.{phase}"),
                RegisterSpec {
                    group: RegisterGroup::Clock,
                    unit: "V",
                    min: 0.0,
                    max: 12.0,
                    noise: config.clock_noise,
                    writable: true,
                    default,
                },
            );
        }
        for n in 0..nodes {
            for (stage, min, max, default) in [("OD", 0.0, 32.0, 28.0), ("RD", 0.0, 20.0, 17.0), ("OG", 0.0, 5.0, 2.5)] {
                specs.insert(
                    format!("node{n}.{stage}"),
                    RegisterSpec {
                        group: RegisterGroup::NodeVoltage,
                        unit: "V",
                        min,
                        max,
                        noise: config.voltage_noise,
                        writable: true,
                        default,
                    },
                );
            }
            specs.insert(
                format!("node{n}.ID"),
                RegisterSpec {
                    group: RegisterGroup::NodeCurrent,
                    unit: "mA",
                    min: 0.0,
                    max: 10.0,
                    noise: config.current_noise,
                    writable: false,
                    default: 0.0,
                },
            );
        }
        specs.insert(
            TEMPERATURE.into(),
            RegisterSpec {
                group: RegisterGroup::Temperature,
                unit: "K",
                min: 140.0,
                max: 300.0,
                noise: config.temperature_noise,
                writable: true,
                default: config.temperature_initial,
            },
        );
        for (name, &(min, max)) in &config.ranges {
            if let Some(spec) = specs.get_mut(name) {
                spec.min = min;
                spec.max = max;
            }
        }
        let setpoints = specs.iter().filter(|(_, s)| s.writable).map(|(k, s)| (k.clone(), s.default)).collect();
        Self {
            specs,
            setpoints,
            temperature: config.temperature_initial,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
        }
    }

    pub fn specs(&self) -> &BTreeMap<String, RegisterSpec> {
        &self.specs
    }

    /// Applies every write or none of them.
    pub fn set_levels(&mut self, writes: &BTreeMap<String, f64>) -> Result<(), TelemetryError> {
        for (name, &value) in writes {
            let spec = self.specs.get(name).ok_or_else(|| TelemetryError::Unknown(name.clone()))?;
            if !spec.writable {
                return Err(TelemetryError::ReadOnly(name.clone()));
            }
            if !(spec.min..=spec.max).contains(&value) {
                return Err(TelemetryError::OutOfRange { register: name.clone(), value, min: spec.min, max: spec.max });
            }
        }
        for (name, &value) in writes {
            self.setpoints.insert(name.clone(), value);
        }
        Ok(())
    }

    pub fn setpoint(&self, name: &str) -> Option<f64> {
        self.setpoints.get(name).copied()
    }

    /// Noise-free temperature of the detector.
    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Advances the first-order temperature model by `dt` seconds: the gap
    /// to the set-point decays as `0.5^(dt / half_life)`.
    pub fn advance(&mut self, dt: f64) {
        let target = self.setpoints[TEMPERATURE];
        let decay = 0.5f64.powf(dt / self.config.temperature_half_life);
        self.temperature = target + (self.temperature - target) * decay;
    }

    fn true_value(&self, name: &str, spec: &RegisterSpec) -> f64 {
        match spec.group {
            RegisterGroup::Temperature => self.temperature,
            RegisterGroup::NodeCurrent => {
                let od = name.replace(".ID", ".OD");
                self.setpoints.get(&od).copied().unwrap_or(0.0) * self.config.node_transconductance
            }
            _ => self.setpoints[name],
        }
    }

    /// Measured values: true value plus Gaussian measurement noise.
    pub fn readback(&mut self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for (name, spec) in &self.specs {
            let v = self.true_value(name, spec);
            let noise = if spec.noise > 0.0 {
                Normal::new(0.0, spec.noise).unwrap().sample(&mut self.rng)
            } else {
                0.0
            };
            out.insert(name.clone(), v + noise);
        }
        out
    }

    /// Powered-down readback: every register reads zero except temperature.
    pub fn readback_off(&mut self) -> BTreeMap<String, f64> {
        let mut out = self.readback();
        for (name, v) in out.iter_mut() {
            if name != TEMPERATURE {
                *v = 0.0;
            }
        }
        out
    }
}
