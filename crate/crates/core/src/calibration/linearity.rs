//! Transfer characteristic and its linearizing correction.

use super::{CalibrationError, FrameData, CLIP_FRACTION};
use crate::detector::ADU_MAX;

pub const MIN_LEVELS: usize = 8;
/// Share of the signal range the reference line is fitted over.
pub const LINEAR_SHARE: f64 = 0.3;

/// Monotone piecewise-cubic Hermite map through the calibration knots
/// (Fritsch-Carlson slopes). Outside the knots the map has unit slope: it
/// keeps the end offset and applies no further correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Correction {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    slopes: Vec<f64>,
}

impl Correction {
    /// Knots must be strictly increasing in both coordinates.
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self, CalibrationError> {
        let n = xs.len();
        if n < 2 || ys.len() != n {
            return Err(CalibrationError::InsufficientData("need at least two knots".into()));
        }
        if xs.windows(2).any(|w| w[1] <= w[0]) || ys.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CalibrationError::BadRamp("knots are not strictly increasing".into()));
        }
        let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|i| (ys[i + 1] - ys[i]) / h[i]).collect();
        let mut d = vec![0.0; n];
        if n == 2 {
            d = vec![delta[0]; 2];
        } else {
            for i in 1..n - 1 {
                // Weighted harmonic mean of the neighbouring secants.
                let (w1, w2) = (2.0 * h[i] + h[i - 1], h[i] + 2.0 * h[i - 1]);
                d[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
            }
            let end = |h0: f64, h1: f64, d0: f64, d1: f64| {
                let s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
                if s.signum() != d0.signum() {
                    0.0
                } else if d0.signum() != d1.signum() && s.abs() > 3.0 * d0.abs() {
                    3.0 * d0
                } else {
                    s
                }
            };
            d[0] = end(h[0], h[1], delta[0], delta[1]);
            d[n - 1] = end(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        }
        Ok(Self { xs, ys, slopes: d })
    }

    pub fn identity() -> Self {
        Self { xs: Vec::new(), ys: Vec::new(), slopes: Vec::new() }
    }

    pub fn range(&self) -> Option<(f64, f64)> {
        Some((*self.xs.first()?, *self.xs.last()?))
    }

    pub fn apply(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if n < 2 {
            return x;
        }
        if x < self.xs[0] {
            return x + (self.ys[0] - self.xs[0]);
        }
        if x > self.xs[n - 1] {
            return x + (self.ys[n - 1] - self.xs[n - 1]);
        }
        let i = match self.xs.partition_point(|&k| k <= x) {
            0 => 0,
            p => (p - 1).min(n - 2),
        };
        let h = self.xs[i + 1] - self.xs[i];
        let t = (x - self.xs[i]) / h;
        let (t2, t3) = (t * t, t * t * t);
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * self.ys[i] + h10 * h * self.slopes[i] + h01 * self.ys[i + 1] + h11 * h * self.slopes[i + 1]
    }

    /// Corrects samples, rounding and clamping to the ADC range.
    pub fn apply_samples(&self, samples: &[u16]) -> Vec<u16> {
        samples.iter().map(|&s| self.apply(s as f64).round().clamp(0.0, ADU_MAX as f64) as u16).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferCurve {
    /// (exposure s, mean ADU), by exposure.
    pub points: Vec<(f64, f64)>,
    pub correction: Correction,
    /// Reference line `offset + slope * exposure`.
    pub offset: f64,
    pub slope: f64,
    /// Percent of full scale.
    pub max_nonlinearity_before: f64,
    /// Leave-one-out residual of the correction at interior levels,
    /// percent of full scale.
    pub max_nonlinearity_after: f64,
    /// Signal span of the reference line over the ramp, ADU.
    pub full_scale: f64,
    pub excluded: Vec<(f64, String)>,
}

impl TransferCurve {
    pub fn ideal(&self, exposure: f64) -> f64 {
        self.offset + self.slope * exposure
    }
}

fn line_fit(pts: &[(f64, f64)]) -> Option<(f64, f64)> {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| {
        let b = sxy / sxx;
        (my - b * mx, b)
    })
}

/// Fits a transfer curve to a ramp of (exposure, frame) taken under stable
/// illumination.
pub fn fit_transfer_curve<F: FrameData>(ramp: &[(f64, F)]) -> Result<TransferCurve, CalibrationError> {
    if ramp.len() < MIN_LEVELS {
        return Err(CalibrationError::InsufficientData(format!("{} exposure levels, need at least {MIN_LEVELS}", ramp.len())));
    }
    let dims = ramp[0].1.dims();
    if let Some((_, f)) = ramp.iter().find(|(_, f)| f.dims() != dims) {
        return Err(CalibrationError::Mismatch(format!("frame is {:?}, expected {:?}", f.dims(), dims)));
    }
    let mut pts = Vec::new();
    let mut excluded = Vec::new();
    for (t, f) in ramp {
        if !t.is_finite() || *t < 0.0 {
            return Err(CalibrationError::BadRamp(format!("exposure {t}")));
        }
        let clipped = f.clipped_fraction();
        if clipped > CLIP_FRACTION {
            log::warn!(target: "calibration", "exposure {t} s excluded: {:.2}% clipped", clipped * 100.0);
            excluded.push((*t, format!("saturated {:.3}%", clipped * 100.0)));
            continue;
        }
        pts.push((*t, f.mean()));
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if pts.len() < 4 {
        return Err(CalibrationError::InsufficientData(format!("{} unsaturated levels", pts.len())));
    }
    for w in pts.windows(2) {
        if w[1].0 <= w[0].0 {
            return Err(CalibrationError::BadRamp(format!("exposure {} s appears twice", w[0].0)));
        }
        if w[1].1 <= w[0].1 {
            return Err(CalibrationError::BadRamp(format!(
                "mean falls from {:.2} to {:.2} ADU between {} s and {} s",
                w[0].1, w[1].1, w[0].0, w[1].0
            )));
        }
    }
    let (lo, hi) = (pts[0].1, pts[pts.len() - 1].1);
    let cut = lo + LINEAR_SHARE * (hi - lo);
    let mut low: Vec<(f64, f64)> = pts.iter().copied().filter(|p| p.1 <= cut).collect();
    if low.len() < 2 {
        low = pts[..2].to_vec();
    }
    let (offset, slope) = line_fit(&low).ok_or_else(|| CalibrationError::DegenerateFit("reference line".into()))?;
    if !(slope > 0.0) {
        return Err(CalibrationError::BadRamp("reference line does not rise".into()));
    }
    let ideal: Vec<f64> = pts.iter().map(|p| offset + slope * p.0).collect();
    let full_scale = ideal[ideal.len() - 1] - offset;
    let xs: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let before = xs.iter().zip(&ideal).map(|(m, i)| (m - i).abs()).fold(0.0, f64::max) / full_scale * 100.0;
    let correction = Correction::new(xs.clone(), ideal.clone()).map_err(|e| match e {
        CalibrationError::BadRamp(_) => CalibrationError::BadRamp("reference line is not increasing over the ramp".into()),
        other => other,
    })?;
    let mut after: f64 = 0.0;
    for k in 1..xs.len() - 1 {
        let keep = |v: &[f64]| v.iter().enumerate().filter(|(i, _)| *i != k).map(|(_, x)| *x).collect::<Vec<_>>();
        let c = Correction::new(keep(&xs), keep(&ideal))?;
        after = after.max((c.apply(xs[k]) - ideal[k]).abs());
    }
    Ok(TransferCurve {
        points: pts,
        correction,
        offset,
        slope,
        max_nonlinearity_before: before,
        max_nonlinearity_after: after / full_scale * 100.0,
        full_scale,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_passes_knots_and_rises() {
        let xs = vec![0.0, 1.0, 2.0, 4.0, 8.0];
        let ys = vec![0.0, 1.5, 2.0, 5.0, 6.0];
        let c = Correction::new(xs.clone(), ys.clone()).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            assert!((c.apply(*x) - y).abs() < 1e-12);
        }
        let mut last = f64::NEG_INFINITY;
        for i in 0..=800 {
            let v = c.apply(i as f64 / 100.0);
            assert!(v > last);
            last = v;
        }
        assert_eq!(c.apply(-1.0), -1.0);
        assert_eq!(c.apply(9.0), 7.0);
    }

    #[test]
    fn linear_data_is_reproduced() {
        let xs: Vec<f64> = (0..6).map(|i| i as f64 * 3.0).collect();
        let c = Correction::new(xs.clone(), xs.iter().map(|x| 2.0 * x + 1.0).collect()).unwrap();
        assert!((c.apply(7.3) - 15.6).abs() < 1e-9);
    }

    #[test]
    fn knots_must_rise() {
        assert!(matches!(Correction::new(vec![0.0, 1.0, 1.0], vec![0.0, 1.0, 2.0]), Err(CalibrationError::BadRamp(_))));
    }
}
