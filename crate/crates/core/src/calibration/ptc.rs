//! Photon transfer: gain and read noise from flat-field pairs.

use super::{solve, CalibrationError, FrameData, CLIP_FRACTION};

/// One illumination level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PtcPoint {
    /// Bias-subtracted mean, ADU.
    pub signal: f64,
    /// `var(A - B) / 2`, ADU².
    pub variance: f64,
    pub pixels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhotonTransferResult {
    /// e-/ADU.
    pub gain: f64,
    /// e- rms.
    pub read_noise: f64,
    /// (mean ADU, variance ADU²) of the levels used.
    pub fit_points: Vec<(f64, f64)>,
    /// ADU².
    pub residual_rms: f64,
    pub slope: f64,
    pub intercept: f64,
    /// Levels left out, with the reason.
    pub excluded: Vec<(f64, String)>,
}

impl PhotonTransferResult {
    pub fn read_noise_adu(&self) -> f64 {
        self.read_noise / self.gain
    }

    /// Fitted variance at `signal` ADU.
    pub fn model(&self, signal: f64) -> f64 {
        self.intercept + self.slope * signal
    }
}

fn check_dims(frames: &[&dyn FrameData]) -> Result<(usize, usize), CalibrationError> {
    let dims = frames[0].dims();
    for f in frames {
        if f.dims() != dims {
            return Err(CalibrationError::Mismatch(format!("frame is {:?}, expected {:?}", f.dims(), dims)));
        }
        if f.samples().is_empty() {
            return Err(CalibrationError::InsufficientData("empty frame".into()));
        }
    }
    Ok(dims)
}

/// Gain and read noise from flat pairs at matched illumination and bias
/// frames taken with the same settings.
pub fn photon_transfer<F: FrameData>(flat_pairs: &[(F, F)], bias_frames: &[F]) -> Result<PhotonTransferResult, CalibrationError> {
    if bias_frames.is_empty() {
        return Err(CalibrationError::InsufficientData("no bias frames".into()));
    }
    if flat_pairs.is_empty() {
        return Err(CalibrationError::InsufficientData("no flat pairs".into()));
    }
    let all: Vec<&dyn FrameData> = flat_pairs
        .iter()
        .flat_map(|(a, b)| [a as &dyn FrameData, b as &dyn FrameData])
        .chain(bias_frames.iter().map(|f| f as &dyn FrameData))
        .collect();
    check_dims(&all)?;
    let bias = bias_frames.iter().map(|f| f.mean()).sum::<f64>() / bias_frames.len() as f64;

    let mut points = Vec::new();
    let mut excluded = Vec::new();
    for (a, b) in flat_pairs {
        let signal = (a.mean() + b.mean()) / 2.0 - bias;
        let clipped = a.clipped_fraction().max(b.clipped_fraction());
        if clipped > CLIP_FRACTION {
            log::warn!(target: "calibration", "level {signal:.1} ADU excluded: {:.2}% clipped", clipped * 100.0);
            excluded.push((signal, format!("saturated {:.3}%", clipped * 100.0)));
            continue;
        }
        let diff: Vec<f64> = a.samples().iter().zip(b.samples()).map(|(&x, &y)| x as f64 - y as f64).collect();
        let n = diff.len() as f64;
        let m = diff.iter().sum::<f64>() / n;
        let var = diff.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / (n - 1.0).max(1.0);
        points.push(PtcPoint { signal, variance: var / 2.0, pixels: diff.len() });
    }
    let mut r = fit_ptc(&points)?;
    excluded.append(&mut r.excluded);
    r.excluded = excluded;
    Ok(r)
}

/// Drops levels indistinguishable from zero, merges duplicates for the
/// distinct-level count and cuts the curve after its variance peak.
fn usable(points: &[PtcPoint]) -> (Vec<PtcPoint>, Vec<(f64, String)>) {
    let mut pts: Vec<PtcPoint> = points.to_vec();
    pts.sort_by(|a, b| a.signal.total_cmp(&b.signal));
    let mut excluded = Vec::new();
    pts.retain(|p| {
        // Mean of N pixels is known to sqrt(var / N).
        let se = (p.variance.max(0.0) / p.pixels.max(1) as f64).sqrt();
        let ok = p.signal.is_finite() && p.variance.is_finite() && p.signal > 5.0 * se && p.signal > 0.0;
        if !ok {
            excluded.push((p.signal, "no signal".to_string()));
        }
        ok
    });
    if let Some(peak) = pts.iter().enumerate().max_by(|a, b| a.1.variance.total_cmp(&b.1.variance)).map(|(i, _)| i) {
        for p in pts.drain(peak + 1..) {
            log::warn!(target: "calibration", "level {:.1} ADU excluded: variance falls past the peak", p.signal);
            excluded.push((p.signal, "non-monotone".to_string()));
        }
    }
    (pts, excluded)
}

fn distinct_levels(pts: &[PtcPoint]) -> usize {
    let mut n = 0;
    let mut last = f64::NEG_INFINITY;
    for p in pts {
        if p.signal > last * 1.01 + 1e-9 {
            n += 1;
            last = p.signal;
        }
    }
    n
}

/// Weighted straight line `variance = intercept + slope * signal`. Weights
/// are the inverse squared model variance (the spread of a sample variance
/// grows with its size), refined over a few passes.
pub fn fit_ptc(points: &[PtcPoint]) -> Result<PhotonTransferResult, CalibrationError> {
    let (pts, excluded) = usable(points);
    let levels = distinct_levels(&pts);
    if levels < 3 {
        return Err(CalibrationError::InsufficientData(format!("{levels} usable illumination levels, need at least 3")));
    }
    if levels < 5 {
        log::warn!(target: "calibration", "only {levels} distinct levels; 5 or more are expected");
    }
    if pts.iter().all(|p| p.variance <= 0.0) {
        return Err(CalibrationError::DegenerateFit("variance is zero at every level".into()));
    }
    let line = |w: &[f64]| -> Option<(f64, f64)> {
        let (mut sw, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (p, &wi) in pts.iter().zip(w) {
            sw += wi;
            sx += wi * p.signal;
            sy += wi * p.variance;
            sxx += wi * p.signal * p.signal;
            sxy += wi * p.signal * p.variance;
        }
        let ab = solve(vec![vec![sw, sx], vec![sx, sxx]], vec![sy, sxy])?;
        Some((ab[0], ab[1]))
    };
    let mut w: Vec<f64> = pts.iter().map(|p| (p.pixels as f64 - 1.0).max(1.0)).collect();
    let mut fit = line(&w).ok_or_else(|| CalibrationError::DegenerateFit("singular normal equations".into()))?;
    for _ in 0..3 {
        let (a, b) = fit;
        let model: Vec<f64> = pts.iter().map(|p| a + b * p.signal).collect();
        if model.iter().any(|m| *m <= 0.0 || !m.is_finite()) {
            break;
        }
        w = pts.iter().zip(&model).map(|(p, m)| (p.pixels as f64 - 1.0).max(1.0) / (2.0 * m * m)).collect();
        fit = line(&w).ok_or_else(|| CalibrationError::DegenerateFit("singular normal equations".into()))?;
    }
    let (intercept, slope) = fit;
    if !(slope > 0.0 && slope.is_finite()) {
        return Err(CalibrationError::DegenerateFit(format!("variance does not grow with signal (slope {slope:.3e})")));
    }
    let gain = 1.0 / slope;
    if intercept < 0.0 {
        log::warn!(target: "calibration", "negative intercept {intercept:.3} ADU²; read noise reported as 0");
    }
    let read_noise = gain * intercept.max(0.0).sqrt();
    let residual_rms = (pts.iter().map(|p| (p.variance - intercept - slope * p.signal).powi(2)).sum::<f64>() / pts.len() as f64).sqrt();
    Ok(PhotonTransferResult {
        gain,
        read_noise,
        fit_points: pts.iter().map(|p| (p.signal, p.variance)).collect(),
        residual_rms,
        slope,
        intercept,
        excluded,
    })
}
