use serde::{Deserialize, Serialize};

use super::DetectorError;
use crate::config::{ConfigError, KeyValues};

const CCD42_40: &str = include_str!("../../../../presets/ccd42-40.conf");
const CCD42_90: &str = include_str!("../../../../presets/ccd42-90.conf");

/// Static description of a detector and its video chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorGeometry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Electrons.
    pub full_well: f64,
    /// Electrons per pixel per second.
    pub dark_current: f64,
    pub output_nodes: usize,
    /// ADU, one per output node.
    pub bias_level: Vec<u16>,
    /// Electrons rms, one per readout-speed index.
    pub read_noise: Vec<f64>,
    /// Seconds per pixel, one per readout-speed index.
    pub pixel_time: Vec<f64>,
    /// Electrons per ADU, one per gain index.
    pub gains: Vec<f64>,
}

impl DetectorGeometry {
    /// Built-in presets: `ccd42-40` and `ccd42-90`.
    pub fn preset(name: &str) -> Result<Self, DetectorError> {
        let text = match name {
            "ccd42-40" => CCD42_40,
            "ccd42-90" => CCD42_90,
            other => {
                return Err(DetectorError::InvalidGeometry(format!(
                    "unknown preset `{other}`"
                )))
            }
        };
        Self::from_config(&KeyValues::parse(text)?)
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["ccd42-40", "ccd42-90"]
    }

    pub fn from_config(kv: &KeyValues) -> Result<Self, DetectorError> {
        kv.check_keys(&[
            "name",
            "rows",
            "cols",
            "full_well",
            "dark_current",
            "output_nodes",
            "bias_level",
            "read_noise",
            "pixel_time",
            "gains",
        ])?;
        let geom = Self {
            name: kv.require_str("name")?.to_string(),
            rows: kv.require("rows")?,
            cols: kv.require("cols")?,
            full_well: kv.require("full_well")?,
            dark_current: kv.require("dark_current")?,
            output_nodes: kv.require("output_nodes")?,
            bias_level: kv.require_list("bias_level")?,
            read_noise: kv.require_list("read_noise")?,
            pixel_time: kv.require_list("pixel_time")?,
            gains: kv.require_list("gains")?,
        };
        geom.validate()?;
        Ok(geom)
    }

    /// Loads either a preset name or a path to a config file.
    pub fn load(spec: &str) -> Result<Self, DetectorError> {
        if Self::preset_names().contains(&spec) {
            return Self::preset(spec);
        }
        let kv = KeyValues::load(spec)?;
        Self::from_config(&kv)
    }

    pub fn to_config(&self) -> String {
        fn list<T: ToString>(v: &[T]) -> String {
            v.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
        }
        format!(
            "name = {}\nrows = {}\ncols = {}\nfull_well = {}\ndark_current = {}\noutput_nodes = {}\n\
             bias_level = {}\nread_noise = {}\npixel_time = {}\ngains = {}\n",
            self.name,
            self.rows,
            self.cols,
            self.full_well,
            self.dark_current,
            self.output_nodes,
            list(&self.bias_level),
            list(&self.read_noise),
            list(&self.pixel_time),
            list(&self.gains),
        )
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |msg: String| Err(DetectorError::InvalidGeometry(msg));
        if self.rows == 0 || self.cols == 0 {
            return bad(format!("dimensions must be >= 1, got {}x{}", self.cols, self.rows));
        }
        if !(self.full_well > 0.0) {
            return bad(format!("full_well must be > 0, got {}", self.full_well));
        }
        if !(self.dark_current >= 0.0) {
            return bad(format!("dark_current must be >= 0, got {}", self.dark_current));
        }
        if !(1..=4).contains(&self.output_nodes) {
            return bad(format!("output_nodes must be 1..4, got {}", self.output_nodes));
        }
        if self.bias_level.len() != self.output_nodes {
            return bad(format!(
                "bias_level needs one entry per output node ({}), got {}",
                self.output_nodes,
                self.bias_level.len()
            ));
        }
        if self.read_noise.is_empty() || self.pixel_time.is_empty() || self.gains.is_empty() {
            return bad("read_noise, pixel_time and gains must be non-empty".into());
        }
        if self.read_noise.len() != self.pixel_time.len() {
            return bad("read_noise and pixel_time need one entry per readout speed".into());
        }
        if self.read_noise.iter().any(|&r| !(r >= 0.0)) {
            return bad("read_noise entries must be >= 0".into());
        }
        if self.pixel_time.iter().any(|&t| !(t > 0.0)) {
            return bad("pixel_time entries must be > 0".into());
        }
        if self.gains.iter().any(|&g| !(g > 0.0)) {
            return bad("gains entries must be > 0".into());
        }
        Ok(())
    }

    pub fn speeds(&self) -> usize {
        self.pixel_time.len()
    }

    /// Output node serving a detector column: equal-width vertical strips.
    pub fn node_of_column(&self, col: usize) -> usize {
        (col * self.output_nodes / self.cols).min(self.output_nodes - 1)
    }

    /// A small noiseless detector, handy in tests and examples.
    pub fn ideal(rows: usize, cols: usize) -> Self {
        Self {
            name: "ideal".into(),
            rows,
            cols,
            full_well: 1.0e9,
            dark_current: 0.0,
            output_nodes: 1,
            bias_level: vec![0],
            read_noise: vec![0.0],
            pixel_time: vec![1.0e-6],
            gains: vec![1.0],
        }
    }
}

impl From<ConfigError> for DetectorError {
    fn from(e: ConfigError) -> Self {
        DetectorError::Config(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_load() {
        let g = DetectorGeometry::preset("ccd42-40").unwrap();
        assert_eq!((g.cols, g.rows), (2048, 2048));
        let g = DetectorGeometry::preset("ccd42-90").unwrap();
        assert_eq!(g.cols * g.rows, 2048 * 4608);
        assert!(DetectorGeometry::preset("ccd99").is_err());
    }

    #[test]
    fn config_round_trip() {
        let g = DetectorGeometry::preset("ccd42-40").unwrap();
        let back = DetectorGeometry::from_config(&KeyValues::parse(&g.to_config()).unwrap()).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn rejects_invalid() {
        let mut g = DetectorGeometry::ideal(4, 4);
        g.gains = vec![0.0];
        assert!(g.validate().is_err());
        let mut g = DetectorGeometry::ideal(4, 4);
        g.rows = 0;
        assert!(g.validate().is_err());
        let mut g = DetectorGeometry::ideal(4, 4);
        g.read_noise.clear();
        assert!(g.validate().is_err());
        let mut g = DetectorGeometry::ideal(4, 4);
        g.full_well = 0.0;
        assert!(g.validate().is_err());
    }

    #[test]
    fn node_strips() {
        let mut g = DetectorGeometry::ideal(4, 8);
        g.output_nodes = 2;
        g.bias_level = vec![0, 0];
        let nodes: Vec<_> = (0..8).map(|c| g.node_of_column(c)).collect();
        assert_eq!(nodes, [0, 0, 0, 0, 1, 1, 1, 1]);
    }
}
