//! Video-channel calibration: photon transfer, noise spectra with optimal
//! filter taps, and transfer-curve linearization.

mod linearity;
mod psd;
mod ptc;
pub mod report;

pub use linearity::{fit_transfer_curve, Correction, TransferCurve};
pub use psd::{boxcar, fir_variance, noise_spectrum, noise_spectrum_with, optimal_filter, NoiseSpectrum, DEFAULT_TAPS};
pub use ptc::{fit_ptc, photon_transfer, PhotonTransferResult, PtcPoint};

use crate::detector::{RawFrame, ADU_MAX};
use crate::server::fits::FitsImage;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CalibrationError {
    #[error("insufficient-data: {0}")]
    InsufficientData(String),
    #[error("degenerate-fit: {0}")]
    DegenerateFit(String),
    #[error("bad-ramp: {0}")]
    BadRamp(String),
    #[error("parameter: {0}")]
    Parameter(String),
    #[error("mismatch: {0}")]
    Mismatch(String),
}

impl CalibrationError {
    pub fn code(&self) -> &'static str {
        match self {
            CalibrationError::InsufficientData(_) => "insufficient-data",
            CalibrationError::DegenerateFit(_) => "degenerate-fit",
            CalibrationError::BadRamp(_) => "bad-ramp",
            CalibrationError::Parameter(_) => "parameter",
            CalibrationError::Mismatch(_) => "mismatch",
        }
    }
}

/// Levels with more clipped pixels than this fraction are left out.
pub const CLIP_FRACTION: f64 = 1e-3;

/// Pixel data the analyses read: recorded frames or FITS files.
pub trait FrameData {
    fn dims(&self) -> (usize, usize);
    fn samples(&self) -> &[u16];

    fn mean(&self) -> f64 {
        let s = self.samples();
        s.iter().map(|&v| v as f64).sum::<f64>() / s.len().max(1) as f64
    }

    fn clipped_fraction(&self) -> f64 {
        let s = self.samples();
        s.iter().filter(|&&v| v == ADU_MAX).count() as f64 / s.len().max(1) as f64
    }
}

impl FrameData for RawFrame {
    fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    fn samples(&self) -> &[u16] {
        &self.samples
    }
}

impl FrameData for FitsImage {
    fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    fn samples(&self) -> &[u16] {
        &self.samples
    }
}

/// Solves `a x = b` for a small dense system by Gaussian elimination with
/// partial pivoting. `None` when the matrix is singular to working precision.
pub(crate) fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return None;
    }
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() <= scale * 1e-13 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            if f != 0.0 {
                for c in col..n {
                    a[r][c] -= f * a[col][c];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_systems() {
        let x = solve(vec![vec![0.0, 2.0], vec![3.0, 1.0]], vec![4.0, 5.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 2.0).abs() < 1e-12);
        assert!(solve(vec![vec![1.0, 2.0], vec![2.0, 4.0]], vec![1.0, 2.0]).is_none());
    }
}
