//! Deterministic CCD simulation: charge integration, on-chip binning and
//! digitization for the six exposure types.
//!
//! Every random draw comes from a ChaCha stream keyed by `(seed, stage,
//! detector row)`, so a region-of-interest readout reproduces the
//! corresponding crop of a full-frame readout exactly, and results never
//! depend on thread scheduling.

mod geometry;
mod params;
mod scene;

pub use geometry::DetectorGeometry;
pub use params::{ExposureParams, ExposureType, NodeSelect, PushPullParams, Roi, ScanParams};
pub use scene::{LampLine, SceneModel, Source};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::ConfigError;

pub const ADU_MAX: u16 = u16::MAX;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DetectorError {
    #[error("parameter `{field}`: {reason}")]
    Parameter { field: &'static str, reason: String },
    #[error("{operation} cannot run a `{got}` exposure")]
    WrongOperation { operation: &'static str, got: ExposureType },
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("charge image is {got_rows}x{got_cols}, detector is {rows}x{cols}")]
    ShapeMismatch { rows: usize, cols: usize, got_rows: usize, got_cols: usize },
    #[error(transparent)]
    Config(ConfigError),
}

// ---------------------------------------------------------------------------
// Seeds

pub const STAGE_READOUT: u64 = 0;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sub-seed for one stage of one frame. Stage 0 is the readout; stage
/// `1 + j` is the `j`-th integration since the last readout.
pub fn derive_seed(seed: u64, frame: u64, stage: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ frame) ^ stage.wrapping_mul(0xA24B_AED4_963E_E407))
}

pub fn integration_stage(j: usize) -> u64 {
    1 + j as u64
}

fn row_rng(seed: u64, row: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ (row as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)))
}

// ---------------------------------------------------------------------------
// Images

/// Accumulated charge in electrons, full detector size, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ChargeImage {
    pub rows: usize,
    pub cols: usize,
    pub charge: Vec<f64>,
}

impl ChargeImage {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, charge: vec![0.0; rows * cols] }
    }

    pub fn for_detector(geom: &DetectorGeometry) -> Self {
        Self::zeros(geom.rows, geom.cols)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.charge[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.charge[row * self.cols..(row + 1) * self.cols]
    }

    pub fn total(&self) -> f64 {
        self.charge.iter().sum()
    }

    /// Flush: exact reset to zero.
    pub fn clear(&mut self) {
        self.charge.iter_mut().for_each(|q| *q = 0.0);
    }

    /// Adds `other`, clamping every pixel at `full_well`.
    pub fn accumulate(&mut self, other: &ChargeImage, full_well: f64) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (q, add) in self.charge.iter_mut().zip(&other.charge) {
            *q = (*q + add).min(full_well);
        }
    }

    /// Moves every row `n` rows toward higher row indices. Charge pushed past
    /// the last row is lost; vacated rows become empty.
    pub fn shift_rows(&mut self, n: usize) {
        let n = n.min(self.rows);
        let keep = (self.rows - n) * self.cols;
        self.charge.copy_within(0..keep, n * self.cols);
        self.charge[..n * self.cols].iter_mut().for_each(|q| *q = 0.0);
    }

    fn check(&self, geom: &DetectorGeometry) -> Result<(), DetectorError> {
        if self.rows != geom.rows || self.cols != geom.cols {
            return Err(DetectorError::ShapeMismatch {
                rows: geom.rows,
                cols: geom.cols,
                got_rows: self.rows,
                got_cols: self.cols,
            });
        }
        Ok(())
    }
}

/// Acquisition metadata carried with every digitized frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub params: ExposureParams,
    pub detector: String,
    /// Simulated seconds since the start of the sequence.
    pub start: f64,
    pub stop: f64,
    pub node: NodeSelect,
    pub saturated: usize,
    pub seed: u64,
    pub frame_index: usize,
    /// Leading drift-scan rows flagged as ramp-up.
    pub ramp_rows: usize,
    pub incomplete: bool,
    pub missing_rows: Vec<usize>,
    /// UTC start time, set by the recording server.
    pub date_obs: Option<String>,
}

/// Digitized 16-bit image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFrame {
    pub width: usize,
    pub height: usize,
    pub samples: Vec<u16>,
    pub meta: FrameMeta,
}

impl RawFrame {
    pub fn row(&self, row: usize) -> &[u16] {
        &self.samples[row * self.width..(row + 1) * self.width]
    }

    pub fn mean(&self) -> f64 {
        self.samples.iter().map(|&s| s as f64).sum::<f64>() / self.samples.len().max(1) as f64
    }
}

// ---------------------------------------------------------------------------
// Integration

/// Integration time actually spent: bias frames integrate for zero seconds.
pub fn effective_exptime(params: &ExposureParams) -> f64 {
    match params.exposure_type {
        ExposureType::Bias => 0.0,
        _ => params.exptime,
    }
}

/// Poisson sampler that reuses its distribution across equal means.
struct PoissonSampler {
    lambda: f64,
    dist: Option<Poisson<f64>>,
}

impl PoissonSampler {
    fn new() -> Self {
        Self { lambda: f64::NAN, dist: None }
    }

    fn sample(&mut self, lambda: f64, rng: &mut ChaCha8Rng) -> f64 {
        if !(lambda > 0.0) {
            return 0.0;
        }
        if lambda != self.lambda {
            self.lambda = lambda;
            self.dist = Poisson::new(lambda).ok();
        }
        match &self.dist {
            Some(d) => d.sample(rng),
            None => 0.0,
        }
    }
}

/// Charge for one detector row: Poisson draws over columns `0..cols` from the
/// row stream `rng_row`, with photons from scene row `scene_row`.
///
/// The photon and dark terms are drawn as a single Poisson variate of the
/// summed mean, which has the same distribution as the sum of two.
fn integrate_row(
    scene: &SceneModel,
    geom: &DetectorGeometry,
    shutter_open: bool,
    lamp: bool,
    seconds: f64,
    scene_row: usize,
    rng_row: usize,
    seed: u64,
    sampler: &mut PoissonSampler,
    out: &mut [f64],
) {
    let dark = geom.dark_current * seconds;
    let mut rng = row_rng(seed, rng_row);
    if shutter_open && seconds > 0.0 {
        let rates = scene.rate_row(scene_row, 0, geom.cols, lamp);
        for (q, rate) in out.iter_mut().zip(rates) {
            *q = sampler.sample(rate * seconds + dark, &mut rng).min(geom.full_well);
        }
    } else {
        for q in out.iter_mut() {
            *q = sampler.sample(dark, &mut rng).min(geom.full_well);
        }
    }
}

fn integrate_for(
    scene: &SceneModel,
    geom: &DetectorGeometry,
    shutter_open: bool,
    lamp: bool,
    seconds: f64,
    seed: u64,
) -> ChargeImage {
    let mut image = ChargeImage::for_detector(geom);
    let mut sampler = PoissonSampler::new();
    for (row, out) in image.charge.chunks_mut(geom.cols).enumerate() {
        integrate_row(scene, geom, shutter_open, lamp, seconds, row, row, seed, &mut sampler, out);
    }
    image
}

/// Accumulates charge over one integration: photons (shutter open only) plus
/// dark current, Poisson-distributed and clamped at full well.
pub fn integrate_charge(
    scene: &SceneModel,
    geom: &DetectorGeometry,
    params: &ExposureParams,
    seed: u64,
) -> Result<ChargeImage, DetectorError> {
    geom.validate()?;
    scene.validate()?;
    params.validate(geom)?;
    Ok(integrate_for(
        scene,
        geom,
        params.shutter_open(),
        params.exposure_type == ExposureType::Neon,
        effective_exptime(params),
        seed,
    ))
}

/// [`integrate_charge`] for an explicit duration instead of the exposure
/// time, as a controller program drives it. Shutter and lamp follow `params`.
pub fn integrate_seconds(
    scene: &SceneModel,
    geom: &DetectorGeometry,
    params: &ExposureParams,
    seconds: f64,
    seed: u64,
) -> Result<ChargeImage, DetectorError> {
    geom.validate()?;
    scene.validate()?;
    params.validate(geom)?;
    Ok(integrate_for(
        scene,
        geom,
        params.shutter_open(),
        params.exposure_type == ExposureType::Neon,
        seconds,
        seed,
    ))
}

/// Noiseless counterpart of [`integrate_charge`]: the per-pixel mean charge.
pub fn expected_charge(
    scene: &SceneModel,
    geom: &DetectorGeometry,
    params: &ExposureParams,
) -> Result<ChargeImage, DetectorError> {
    geom.validate()?;
    scene.validate()?;
    params.validate(geom)?;
    let t = effective_exptime(params);
    let mut image = ChargeImage::for_detector(geom);
    for (row, out) in image.charge.chunks_mut(geom.cols).enumerate() {
        let rates = if params.shutter_open() {
            scene.rate_row(row, 0, geom.cols, params.exposure_type == ExposureType::Neon)
        } else {
            vec![0.0; geom.cols]
        };
        for (q, rate) in out.iter_mut().zip(rates) {
            *q = ((rate + geom.dark_current) * t).min(geom.full_well);
        }
    }
    Ok(image)
}

// ---------------------------------------------------------------------------
// Readout

/// Digitizes one binned output row. `sums` holds superpixel charges whose
/// origin (top-left unbinned pixel) sits on `origin_row` at columns
/// `x0 + k * bin_x`. Returns the samples and the number of saturated ones.
fn digitize_row(
    sums: &[f64],
    origin_row: usize,
    geom: &DetectorGeometry,
    params: &ExposureParams,
    seed: u64,
) -> (Vec<u16>, usize) {
    let sigma = geom.read_noise[params.speed];
    let gain = geom.gains[params.gain_index];
    let x0 = params.roi.x0;
    let noise: Vec<f64> = if sigma > 0.0 {
        // One normal per unbinned column from column 0, so the value used at a
        // given origin column does not depend on the ROI.
        let last = x0 + (sums.len() - 1) * params.bin_x;
        let mut rng = row_rng(seed, origin_row);
        let draws: Vec<f64> = (0..=last).map(|_| StandardNormal.sample(&mut rng)).collect();
        (0..sums.len()).map(|k| sigma * draws[x0 + k * params.bin_x]).collect()
    } else {
        vec![0.0; sums.len()]
    };
    let mut saturated = 0;
    let samples = sums
        .iter()
        .zip(noise)
        .enumerate()
        .map(|(k, (&q, n))| {
            let col = x0 + k * params.bin_x;
            let node = match params.node {
                NodeSelect::All => geom.node_of_column(col),
                NodeSelect::Single(i) => i as usize,
            };
            // f64::round rounds half away from zero.
            let adu = ((q + n) / gain).round() + geom.bias_level[node] as f64;
            if adu >= ADU_MAX as f64 {
                saturated += 1;
            }
            adu.clamp(0.0, ADU_MAX as f64) as u16
        })
        .collect();
    (samples, saturated)
}

fn binned_row_sums(charge: &ChargeImage, params: &ExposureParams, first_row: usize) -> Vec<f64> {
    let width = params.roi.width / params.bin_x;
    let mut sums = vec![0.0; width];
    for r in first_row..first_row + params.bin_y {
        let row = &charge.row(r)[params.roi.x0..params.roi.x0 + params.roi.width];
        for (k, block) in row.chunks(params.bin_x).enumerate() {
            sums[k] += block.iter().sum::<f64>();
        }
    }
    sums
}

fn base_meta(geom: &DetectorGeometry, params: &ExposureParams, seed: u64) -> FrameMeta {
    FrameMeta {
        params: params.clone(),
        detector: geom.name.clone(),
        start: 0.0,
        stop: params.readout_time(geom),
        node: params.node,
        saturated: 0,
        seed,
        frame_index: 0,
        ramp_rows: 0,
        incomplete: false,
        missing_rows: Vec::new(),
        date_obs: None,
    }
}

/// Crops the ROI, sums `bin_x x bin_y` blocks, adds Gaussian read noise and
/// converts to ADU with the node's bias, clamping to 16 bits.
pub fn digitize_readout(
    charge: &ChargeImage,
    geom: &DetectorGeometry,
    params: &ExposureParams,
    seed: u64,
) -> Result<RawFrame, DetectorError> {
    geom.validate()?;
    params.validate(geom)?;
    charge.check(geom)?;
    let width = params.roi.width / params.bin_x;
    let height = params.roi.height / params.bin_y;
    let mut samples = Vec::with_capacity(width * height);
    let mut meta = base_meta(geom, params, seed);
    for j in 0..height {
        let origin = params.roi.y0 + j * params.bin_y;
        let sums = binned_row_sums(charge, params, origin);
        let (row, sat) = digitize_row(&sums, origin, geom, params, seed);
        samples.extend_from_slice(&row);
        meta.saturated += sat;
    }
    Ok(RawFrame { width, height, samples, meta })
}

// ---------------------------------------------------------------------------
// Exposure sequences

/// Frame-by-frame exposures (bias, dark, object, neon): integrate then read
/// out, `n_exposures` times with per-frame sub-seeds.
pub fn simulate_exposure(
    scene: &SceneModel,
    geom: &DetectorGeometry,
    params: &ExposureParams,
    seed: u64,
) -> Result<Vec<RawFrame>, DetectorError> {
    if !params.exposure_type.is_frame_type() {
        return Err(DetectorError::WrongOperation {
            operation: "simulate_exposure",
            got: params.exposure_type,
        });
    }
    geom.validate()?;
    scene.validate()?;
    params.validate(geom)?;
    let mut detector = ChargeImage::for_detector(geom);
    let exptime = effective_exptime(params);
    let readout = params.readout_time(geom);
    let mut clock = 0.0;
    let mut frames = Vec::with_capacity(params.n_exposures);
    for i in 0..params.n_exposures {
        if params.flush_before {
            detector.clear();
        }
        let integrated = integrate_charge(scene, geom, params, derive_seed(seed, i as u64, integration_stage(0)))?;
        detector.accumulate(&integrated, geom.full_well);
        let mut frame = digitize_readout(&detector, geom, params, derive_seed(seed, i as u64, STAGE_READOUT))?;
        detector.clear();
        frame.meta.seed = seed;
        frame.meta.frame_index = i;
        frame.meta.start = clock;
        frame.meta.stop = clock + exptime + readout;
        clock = frame.meta.stop;
        frames.push(frame);
    }
    Ok(frames)
}

/// One digitized drift-scan row.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanRow {
    pub index: usize,
    /// Simulated seconds since the shutter opened.
    pub timestamp: f64,
    pub samples: Vec<u16>,
    pub ramp_up: bool,
    pub saturated: usize,
}

/// Lazy stream of drift-scan rows; see [`drift_scan`].
#[derive(Debug, Clone)]
pub struct DriftScan {
    scene: SceneModel,
    geom: DetectorGeometry,
    params: ExposureParams,
    seed: u64,
    next: usize,
    scan: ScanParams,
}

impl DriftScan {
    pub fn len(&self) -> usize {
        self.scan.scan_rows
    }

    pub fn is_empty(&self) -> bool {
        self.scan.scan_rows == 0
    }

    /// Seconds each charge packet spends integrating: the full column transit.
    pub fn dwell(&self) -> f64 {
        self.geom.rows as f64 * self.scan.row_period
    }

    pub fn params(&self) -> &ExposureParams {
        &self.params
    }

    /// Collects the remaining rows into a frame.
    pub fn into_frame(self) -> RawFrame {
        let mut meta = base_meta(&self.geom, &self.params, self.seed);
        meta.ramp_rows = self.geom.rows.min(self.scan.scan_rows);
        let width = self.params.roi.width / self.params.bin_x;
        let mut samples = Vec::with_capacity(width * self.scan.scan_rows);
        let mut height = 0;
        let mut last = 0.0;
        for row in self {
            samples.extend_from_slice(&row.samples);
            meta.saturated += row.saturated;
            last = row.timestamp;
            height += 1;
        }
        meta.start = 0.0;
        meta.stop = last;
        RawFrame { width, height, samples, meta }
    }
}

impl Iterator for DriftScan {
    type Item = ScanRow;

    fn next(&mut self) -> Option<ScanRow> {
        if self.next >= self.scan.scan_rows {
            return None;
        }
        let k = self.next;
        self.next += 1;
        let dwell = self.dwell();
        let origin = self.params.roi.y0;
        let mut sampler = PoissonSampler::new();
        let mut charge = ChargeImage::zeros(1, self.geom.cols);
        // Row k images scene row y0 + k, drawn from the same per-row stream an
        // ordinary readout of detector row y0 would use for frame k.
        integrate_row(
            &self.scene,
            &self.geom,
            self.params.shutter_open(),
            false,
            dwell,
            origin + k,
            origin,
            derive_seed(self.seed, k as u64, integration_stage(0)),
            &mut sampler,
            &mut charge.charge,
        );
        let mut single = self.params.clone();
        single.roi.y0 = 0;
        single.roi.height = 1;
        let sums = binned_row_sums(&charge, &single, 0);
        let (samples, saturated) = digitize_row(
            &sums,
            origin,
            &self.geom,
            &self.params,
            derive_seed(self.seed, k as u64, STAGE_READOUT),
        );
        Some(ScanRow {
            index: k,
            timestamp: (k + 1) as f64 * self.scan.row_period,
            samples,
            ramp_up: k < self.geom.rows,
            saturated,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.scan.scan_rows - self.next;
        (left, Some(left))
    }
}

impl ExactSizeIterator for DriftScan {}

/// Drift-scan (time-delay integration): the image drifts one row per
/// `row_period` while charge shifts in step with it, so every emitted row has
/// integrated for `rows x row_period`. Row `k` samples scene row `roi.y0 + k`
/// across the ROI columns, binned by `bin_x`.
pub fn drift_scan(
    scene: &SceneModel,
    geom: &DetectorGeometry,
    params: &ExposureParams,
    seed: u64,
) -> Result<DriftScan, DetectorError> {
    if params.exposure_type != ExposureType::Scan {
        return Err(DetectorError::WrongOperation { operation: "drift_scan", got: params.exposure_type });
    }
    geom.validate()?;
    scene.validate()?;
    params.validate(geom)?;
    let scan = params.scan.expect("validated scan params");
    Ok(DriftScan {
        scene: scene.clone(),
        geom: geom.clone(),
        params: params.clone(),
        seed,
        next: 0,
        scan,
    })
}

/// Combined integration/transfer: `n_transfers` cycles of integrating for
/// `elementary_exptime` then shifting the charge `rows_per_transfer` rows,
/// followed by a single readout.
pub fn push_pull(
    scene: &SceneModel,
    geom: &DetectorGeometry,
    params: &ExposureParams,
    seed: u64,
) -> Result<RawFrame, DetectorError> {
    if params.exposure_type != ExposureType::PushPull {
        return Err(DetectorError::WrongOperation { operation: "push_pull", got: params.exposure_type });
    }
    geom.validate()?;
    scene.validate()?;
    params.validate(geom)?;
    let pp = params.push_pull.expect("validated push-pull params");
    let mut detector = ChargeImage::for_detector(geom);
    for j in 0..pp.n_transfers {
        let step = integrate_for(
            scene,
            geom,
            params.shutter_open(),
            false,
            pp.elementary_exptime,
            derive_seed(seed, 0, integration_stage(j)),
        );
        detector.accumulate(&step, geom.full_well);
        detector.shift_rows(pp.rows_per_transfer);
    }
    let mut frame = digitize_readout(&detector, geom, params, derive_seed(seed, 0, STAGE_READOUT))?;
    frame.meta.stop = pp.n_transfers as f64 * pp.elementary_exptime + params.readout_time(geom);
    Ok(frame)
}
