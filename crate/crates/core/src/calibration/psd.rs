//! Averaged periodograms of the video sample stream and the
//! minimum-variance FIR filter they imply.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{solve, CalibrationError};

pub const DEFAULT_TAPS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpectrum {
    /// Cycles per sample, 0 to 0.5.
    pub frequencies: Vec<f64>,
    /// One-sided density, ADU² per unit frequency; summing `psd * df`
    /// gives the variance.
    pub psd: Vec<f64>,
    pub n_segments: usize,
    pub segment_len: usize,
    /// Unit-DC-gain taps of the minimum-variance filter.
    pub filter_coeffs: Vec<f64>,
    /// Autocovariance at lags `0..taps`, ADU².
    pub autocovariance: Vec<f64>,
    /// Mean of the input, removed before analysis.
    pub mean: f64,
}

impl NoiseSpectrum {
    pub fn bin_width(&self) -> f64 {
        1.0 / self.segment_len as f64
    }

    /// Variance implied by the spectrum.
    pub fn total_power(&self) -> f64 {
        self.psd.iter().sum::<f64>() * self.bin_width()
    }
}

fn hann(n: usize) -> Vec<f64> {
    // Periodic form, so half-overlapped windows sum to a constant.
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()).collect()
}

pub fn noise_spectrum(stream: &[f64], segment_len: usize) -> Result<NoiseSpectrum, CalibrationError> {
    noise_spectrum_with(stream, segment_len, DEFAULT_TAPS)
}

/// Welch estimate over half-overlapping Hann-windowed segments of the
/// mean-subtracted stream, plus `taps` optimal filter coefficients.
pub fn noise_spectrum_with(stream: &[f64], segment_len: usize, taps: usize) -> Result<NoiseSpectrum, CalibrationError> {
    if segment_len < 2 || !segment_len.is_power_of_two() {
        return Err(CalibrationError::Parameter(format!("segment length {segment_len} is not a power of two >= 2")));
    }
    if taps == 0 || taps > segment_len / 2 {
        return Err(CalibrationError::Parameter(format!("{taps} taps; need 1 to {}", segment_len / 2)));
    }
    if stream.len() < 8 * segment_len {
        return Err(CalibrationError::InsufficientData(format!(
            "{} samples; need at least {} for segments of {segment_len}",
            stream.len(),
            8 * segment_len
        )));
    }
    if stream.iter().any(|v| !v.is_finite()) {
        return Err(CalibrationError::Parameter("stream contains non-finite samples".into()));
    }
    let n = segment_len;
    let mean = stream.iter().sum::<f64>() / stream.len() as f64;
    let window = hann(n);
    let u: f64 = window.iter().map(|w| w * w).sum();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let hop = n / 2;
    let segments = (stream.len() - n) / hop + 1;
    let mut two_sided = vec![0.0; n];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for s in 0..segments {
        let seg = &stream[s * hop..s * hop + n];
        for ((b, x), w) in buf.iter_mut().zip(seg).zip(&window) {
            *b = Complex::new((x - mean) * w, 0.0);
        }
        fft.process(&mut buf);
        for (acc, c) in two_sided.iter_mut().zip(&buf) {
            *acc += c.norm_sqr() / u;
        }
    }
    two_sided.iter_mut().for_each(|p| *p /= segments as f64);

    let half = n / 2;
    let psd: Vec<f64> = (0..=half)
        .map(|k| if k == 0 || k == half { two_sided[k] } else { 2.0 * two_sided[k] })
        .collect();
    let frequencies = (0..=half).map(|k| k as f64 / n as f64).collect();

    // Autocovariance is the inverse transform of the two-sided density.
    let mut ac: Vec<Complex<f64>> = two_sided.iter().map(|&p| Complex::new(p, 0.0)).collect();
    FftPlanner::<f64>::new().plan_fft_inverse(n).process(&mut ac);
    let autocovariance: Vec<f64> = ac[..taps].iter().map(|c| c.re / n as f64).collect();
    let filter_coeffs = optimal_filter(&autocovariance)?;
    Ok(NoiseSpectrum { frequencies, psd, n_segments: segments, segment_len: n, filter_coeffs, autocovariance, mean })
}

/// Taps `h` minimizing `hᵀ R h` subject to `Σ h = 1`, where `R` is the
/// Toeplitz matrix of `acov`: `h = R⁻¹ 1 / (1ᵀ R⁻¹ 1)`.
pub fn optimal_filter(acov: &[f64]) -> Result<Vec<f64>, CalibrationError> {
    let l = acov.len();
    if l == 0 {
        return Err(CalibrationError::Parameter("no taps".into()));
    }
    let r: Vec<Vec<f64>> = (0..l).map(|i| (0..l).map(|j| acov[i.abs_diff(j)]).collect()).collect();
    let x = solve(r, vec![1.0; l]).ok_or_else(|| CalibrationError::DegenerateFit("noise autocovariance matrix is singular".into()))?;
    let sum: f64 = x.iter().sum();
    if !(sum.is_finite() && sum.abs() > 0.0) {
        return Err(CalibrationError::DegenerateFit("filter normalization failed".into()));
    }
    let mut h: Vec<f64> = x.iter().map(|v| v / sum).collect();
    // Put the rounding remainder on the middle tap, then check.
    let mid = l / 2;
    let rest: f64 = h.iter().enumerate().filter(|(i, _)| *i != mid).map(|(_, v)| v).sum();
    h[mid] = 1.0 - rest;
    let total: f64 = h.iter().sum();
    if (total - 1.0).abs() > 4.0 * f64::EPSILON * l as f64 {
        return Err(CalibrationError::DegenerateFit(format!("tap sum {total} is not 1")));
    }
    Ok(h)
}

pub fn boxcar(taps: usize) -> Vec<f64> {
    vec![1.0 / taps as f64; taps]
}

/// Sample variance of `stream` convolved with `h`, over full overlaps.
pub fn fir_variance(stream: &[f64], h: &[f64]) -> f64 {
    let l = h.len();
    if stream.len() < l + 1 {
        return f64::NAN;
    }
    let out: Vec<f64> = stream.windows(l).map(|w| w.iter().zip(h).map(|(x, c)| x * c).sum()).collect();
    let m = out.iter().sum::<f64>() / out.len() as f64;
    out.iter().map(|y| (y - m) * (y - m)).sum::<f64>() / (out.len() - 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameters_are_checked() {
        let s = vec![0.0; 1000];
        assert!(matches!(noise_spectrum(&s, 100), Err(CalibrationError::Parameter(_))));
        assert!(matches!(noise_spectrum(&s, 128), Err(CalibrationError::InsufficientData(_))));
        assert!(matches!(noise_spectrum(&s, 64), Err(CalibrationError::DegenerateFit(_))));
    }

    #[test]
    fn sinusoid_lands_in_its_bin() {
        let n = 64;
        let s: Vec<f64> = (0..n * 32).map(|i| (2.0 * std::f64::consts::PI * 8.0 * i as f64 / n as f64).sin() + 1e-3 * ((i * 7919) % 13) as f64).collect();
        let p = noise_spectrum(&s, n).unwrap();
        let peak = p.psd.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(p.frequencies[peak], 0.125);
        assert!((p.total_power() - 0.5).abs() < 0.01);
    }

    #[test]
    fn uncorrelated_noise_gives_a_boxcar() {
        let mut acov = vec![0.0; 6];
        acov[0] = 3.0;
        let h = optimal_filter(&acov).unwrap();
        assert!(h.iter().all(|&c| (c - 1.0 / 6.0).abs() < 1e-12));
        assert_eq!(h.iter().sum::<f64>(), 1.0);
    }
}
