use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{DetectorError, DetectorGeometry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExposureType {
    Bias,
    Dark,
    Object,
    Neon,
    Scan,
    PushPull,
}

impl ExposureType {
    pub const ALL: [ExposureType; 6] = [
        ExposureType::Bias,
        ExposureType::Dark,
        ExposureType::Object,
        ExposureType::Neon,
        ExposureType::Scan,
        ExposureType::PushPull,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExposureType::Bias => "bias",
            ExposureType::Dark => "dark",
            ExposureType::Object => "object",
            ExposureType::Neon => "neon",
            ExposureType::Scan => "scan",
            ExposureType::PushPull => "push_pull",
        }
    }

    /// Whether this type opens the shutter at all.
    pub fn uses_shutter(self) -> bool {
        !matches!(self, ExposureType::Bias | ExposureType::Dark)
    }

    /// Types handled by frame-by-frame `simulate_exposure`.
    pub fn is_frame_type(self) -> bool {
        matches!(
            self,
            ExposureType::Bias | ExposureType::Dark | ExposureType::Object | ExposureType::Neon
        )
    }
}

impl fmt::Display for ExposureType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExposureType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bias" => Ok(ExposureType::Bias),
            "dark" => Ok(ExposureType::Dark),
            "object" => Ok(ExposureType::Object),
            "neon" => Ok(ExposureType::Neon),
            "scan" => Ok(ExposureType::Scan),
            "push_pull" | "push-pull" => Ok(ExposureType::PushPull),
            other => Err(format!("unknown exposure type `{other}`")),
        }
    }
}

/// Output node selection: a single amplifier or all of them in parallel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeSelect {
    Single(u8),
    All,
}

impl fmt::Display for NodeSelect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeSelect::Single(n) => write!(f, "{n}"),
            NodeSelect::All => f.write_str("all"),
        }
    }
}

impl FromStr for NodeSelect {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(NodeSelect::All);
        }
        s.parse::<u8>()
            .map(NodeSelect::Single)
            .map_err(|_| format!("node must be an index or `all`, got `{s}`"))
    }
}

/// Region of interest in unbinned detector pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl Roi {
    pub fn full(geom: &DetectorGeometry) -> Self {
        Self { x0: 0, y0: 0, width: geom.cols, height: geom.rows }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanParams {
    pub scan_rows: usize,
    /// Seconds per row shift.
    pub row_period: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PushPullParams {
    /// Seconds integrated before each transfer.
    pub elementary_exptime: f64,
    pub n_transfers: usize,
    pub rows_per_transfer: usize,
}

/// One acquisition request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExposureParams {
    pub exposure_type: ExposureType,
    /// Seconds.
    pub exptime: f64,
    pub flush_before: bool,
    pub shutter: bool,
    pub filter: usize,
    pub speed: usize,
    pub bin_x: usize,
    pub bin_y: usize,
    pub gain_index: usize,
    pub node: NodeSelect,
    pub roi: Roi,
    pub n_exposures: usize,
    pub scan: Option<ScanParams>,
    pub push_pull: Option<PushPullParams>,
}

impl ExposureParams {
    /// Full-frame, unbinned, single exposure through node 0.
    pub fn new(exposure_type: ExposureType, exptime: f64, geom: &DetectorGeometry) -> Self {
        Self {
            exposure_type,
            exptime,
            flush_before: true,
            shutter: exposure_type.uses_shutter(),
            filter: 0,
            speed: 0,
            bin_x: 1,
            bin_y: 1,
            gain_index: 0,
            node: NodeSelect::Single(0),
            roi: Roi::full(geom),
            n_exposures: 1,
            scan: None,
            push_pull: None,
        }
    }

    pub fn with_roi(mut self, x0: usize, y0: usize, width: usize, height: usize) -> Self {
        self.roi = Roi { x0, y0, width, height };
        self
    }

    pub fn with_binning(mut self, bin_x: usize, bin_y: usize) -> Self {
        self.bin_x = bin_x;
        self.bin_y = bin_y;
        self
    }

    pub fn with_scan(mut self, scan_rows: usize, row_period: f64) -> Self {
        self.scan = Some(ScanParams { scan_rows, row_period });
        self
    }

    pub fn with_push_pull(mut self, elementary_exptime: f64, n_transfers: usize, rows_per_transfer: usize) -> Self {
        self.push_pull = Some(PushPullParams { elementary_exptime, n_transfers, rows_per_transfer });
        self
    }

    /// Photons reach the detector only for shutter-opening types with the
    /// shutter flag set.
    pub fn shutter_open(&self) -> bool {
        self.exposure_type.uses_shutter() && self.shutter
    }

    /// Binned output dimensions `(width, height)`.
    pub fn output_dims(&self) -> (usize, usize) {
        match (self.exposure_type, self.scan) {
            (ExposureType::Scan, Some(s)) => (self.roi.width / self.bin_x, s.scan_rows),
            _ => (self.roi.width / self.bin_x, self.roi.height / self.bin_y),
        }
    }

    /// Seconds to digitize one frame at the selected speed.
    pub fn readout_time(&self, geom: &DetectorGeometry) -> f64 {
        let (w, h) = self.output_dims();
        let per_pixel = geom.pixel_time.get(self.speed).copied().unwrap_or(0.0);
        (w * h) as f64 * per_pixel
    }

    pub fn validate(&self, geom: &DetectorGeometry) -> Result<(), DetectorError> {
        let err = |field: &'static str, reason: String| Err(DetectorError::Parameter { field, reason });
        if !(self.exptime >= 0.0) || !self.exptime.is_finite() {
            return err("exptime", format!("must be >= 0, got {}", self.exptime));
        }
        if self.bin_x == 0 {
            return err("bin_x", "must be >= 1".into());
        }
        if self.bin_y == 0 {
            return err("bin_y", "must be >= 1".into());
        }
        if self.speed >= geom.speeds() {
            return err("speed", format!("index {} out of range 0..{}", self.speed, geom.speeds()));
        }
        if self.gain_index >= geom.gains.len() {
            return err(
                "gain_index",
                format!("index {} out of range 0..{}", self.gain_index, geom.gains.len()),
            );
        }
        if let NodeSelect::Single(n) = self.node {
            if n as usize >= geom.output_nodes {
                return err("node", format!("node {n} out of range 0..{}", geom.output_nodes));
            }
        }
        let roi = self.roi;
        if roi.width == 0 || roi.height == 0 {
            return err("roi", "width and height must be >= 1".into());
        }
        if roi.x0 + roi.width > geom.cols {
            return err(
                "roi",
                format!("x0 + width = {} exceeds detector width {}", roi.x0 + roi.width, geom.cols),
            );
        }
        if roi.y0 + roi.height > geom.rows {
            return err(
                "roi",
                format!("y0 + height = {} exceeds detector height {}", roi.y0 + roi.height, geom.rows),
            );
        }
        if roi.width % self.bin_x != 0 {
            return err("bin_x", format!("roi width {} not divisible by {}", roi.width, self.bin_x));
        }
        if roi.height % self.bin_y != 0 {
            return err("bin_y", format!("roi height {} not divisible by {}", roi.height, self.bin_y));
        }
        if self.n_exposures == 0 {
            return err("n_exposures", "must be >= 1".into());
        }
        let is_scan = self.exposure_type == ExposureType::Scan;
        match (is_scan, self.scan) {
            (true, None) => return err("scan_rows", "scan exposure needs scan_rows and row_period".into()),
            (false, Some(_)) => return err("scan_rows", "only valid for scan exposures".into()),
            (true, Some(s)) => {
                if s.scan_rows == 0 {
                    return err("scan_rows", "must be >= 1".into());
                }
                if !(s.row_period > 0.0) || !s.row_period.is_finite() {
                    return err("row_period", format!("must be > 0, got {}", s.row_period));
                }
                if self.bin_y != 1 {
                    return err("bin_y", "drift scans bin along the row only".into());
                }
            }
            (false, None) => {}
        }
        let is_pp = self.exposure_type == ExposureType::PushPull;
        match (is_pp, self.push_pull) {
            (true, None) => {
                return err("n_transfers", "push-pull exposure needs elementary_exptime, n_transfers, rows_per_transfer".into())
            }
            (false, Some(_)) => return err("n_transfers", "only valid for push-pull exposures".into()),
            (true, Some(p)) => {
                if p.n_transfers == 0 {
                    return err("n_transfers", "must be >= 1".into());
                }
                if p.rows_per_transfer == 0 {
                    return err("rows_per_transfer", "must be >= 1".into());
                }
                if p.rows_per_transfer >= geom.rows {
                    return err(
                        "rows_per_transfer",
                        format!("{} would shift the entire {}-row image out", p.rows_per_transfer, geom.rows),
                    );
                }
                if !(p.elementary_exptime >= 0.0) || !p.elementary_exptime.is_finite() {
                    return err("elementary_exptime", format!("must be >= 0, got {}", p.elementary_exptime));
                }
            }
            (false, None) => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom() -> DetectorGeometry {
        DetectorGeometry::ideal(64, 32)
    }

    fn field_of(r: Result<(), DetectorError>) -> &'static str {
        match r {
            Err(DetectorError::Parameter { field, .. }) => field,
            other => panic!("expected parameter error, got {other:?}"),
        }
    }

    #[test]
    fn full_frame_is_valid() {
        let g = geom();
        ExposureParams::new(ExposureType::Object, 1.0, &g).validate(&g).unwrap();
    }

    #[test]
    fn names_offending_field() {
        let g = geom();
        let base = ExposureParams::new(ExposureType::Object, 1.0, &g);
        assert_eq!(field_of(base.clone().with_roi(10, 0, 30, 8).validate(&g)), "roi");
        assert_eq!(field_of(base.clone().with_roi(0, 0, 30, 8).with_binning(4, 1).validate(&g)), "bin_x");
        assert_eq!(field_of(base.clone().with_roi(0, 0, 32, 9).with_binning(1, 2).validate(&g)), "bin_y");
        let mut p = base.clone();
        p.exptime = -1.0;
        assert_eq!(field_of(p.validate(&g)), "exptime");
        let mut p = base.clone();
        p.speed = 3;
        assert_eq!(field_of(p.validate(&g)), "speed");
        assert_eq!(field_of(base.clone().with_scan(10, 0.1).validate(&g)), "scan_rows");
    }

    #[test]
    fn mode_fields_present_iff_type() {
        let g = geom();
        let scan = ExposureParams::new(ExposureType::Scan, 0.0, &g);
        assert_eq!(field_of(scan.clone().validate(&g)), "scan_rows");
        scan.clone().with_scan(5, 0.1).validate(&g).unwrap();
        assert_eq!(field_of(scan.with_scan(5, 0.0).validate(&g)), "row_period");
        let pp = ExposureParams::new(ExposureType::PushPull, 0.0, &g);
        assert_eq!(field_of(pp.clone().validate(&g)), "n_transfers");
        pp.clone().with_push_pull(1.0, 3, 10).validate(&g).unwrap();
        assert_eq!(field_of(pp.clone().with_push_pull(1.0, 3, 64).validate(&g)), "rows_per_transfer");
        assert_eq!(field_of(pp.with_push_pull(1.0, 3, 0).validate(&g)), "rows_per_transfer");
    }

    #[test]
    fn type_names_round_trip() {
        for t in ExposureType::ALL {
            assert_eq!(t.as_str().parse::<ExposureType>().unwrap(), t);
        }
        assert_eq!("push-pull".parse::<ExposureType>().unwrap(), ExposureType::PushPull);
        assert_eq!("all".parse::<NodeSelect>().unwrap(), NodeSelect::All);
    }
}
