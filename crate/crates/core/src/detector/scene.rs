use serde::{Deserialize, Serialize};

use super::DetectorError;
use crate::config::KeyValues;

/// A point source with a circular Gaussian PSF. Coordinates are continuous
/// pixel coordinates: pixel `(col, row)` covers `[col, col+1) x [row, row+1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Source {
    pub x: f64,
    pub y: f64,
    /// Electrons per second.
    pub flux: f64,
    pub psf_sigma: f64,
}

/// Emission line of the comparison lamp, dispersed along the columns and
/// uniform along the rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LampLine {
    pub x: f64,
    /// Electrons per second per row.
    pub flux: f64,
    pub sigma: f64,
}

/// Synthetic sky illuminating the detector.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneModel {
    /// Electrons per pixel per second.
    pub sky_level: f64,
    pub sources: Vec<Source>,
    /// Electrons/pixel/second per pixel along x (columns) and y (rows).
    pub gradient: (f64, f64),
    pub lamp_lines: Vec<LampLine>,
}

/// Half-width of the PSF evaluation box, in sigmas.
const PSF_EXTENT: f64 = 8.0;

impl SceneModel {
    pub fn flat(sky_level: f64) -> Self {
        Self {
            sky_level,
            ..Self::default()
        }
    }

    pub fn with_source(mut self, x: f64, y: f64, flux: f64, psf_sigma: f64) -> Self {
        self.sources.push(Source { x, y, flux, psf_sigma });
        self
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |msg: String| Err(DetectorError::InvalidScene(msg));
        if !(self.sky_level >= 0.0) {
            return bad(format!("sky_level must be >= 0, got {}", self.sky_level));
        }
        for s in &self.sources {
            if !(s.flux >= 0.0) || !(s.psf_sigma > 0.0) || !s.x.is_finite() || !s.y.is_finite() {
                return bad(format!("invalid source {s:?}"));
            }
        }
        for l in &self.lamp_lines {
            if !(l.flux >= 0.0) || !(l.sigma > 0.0) || !l.x.is_finite() {
                return bad(format!("invalid lamp line {l:?}"));
            }
        }
        if !self.gradient.0.is_finite() || !self.gradient.1.is_finite() {
            return bad("gradient must be finite".into());
        }
        Ok(())
    }

    pub fn from_config(kv: &KeyValues) -> Result<Self, DetectorError> {
        kv.check_keys(&["sky_level", "gradient", "source", "lamp_line"])?;
        let gradient = match kv.entry("gradient") {
            Some(e) => {
                let g: Vec<f64> = e.parse_list()?;
                if g.len() != 2 {
                    return Err(e.error("expected two values `gx, gy`").into());
                }
                (g[0], g[1])
            }
            None => (0.0, 0.0),
        };
        let mut sources = Vec::new();
        for e in kv.all("source") {
            let v: Vec<f64> = e.parse_list()?;
            if v.len() != 4 {
                return Err(e.error("expected `x y flux psf_sigma`").into());
            }
            sources.push(Source { x: v[0], y: v[1], flux: v[2], psf_sigma: v[3] });
        }
        let mut lamp_lines = Vec::new();
        for e in kv.all("lamp_line") {
            let v: Vec<f64> = e.parse_list()?;
            if v.len() != 3 {
                return Err(e.error("expected `x flux sigma`").into());
            }
            lamp_lines.push(LampLine { x: v[0], flux: v[1], sigma: v[2] });
        }
        let scene = Self {
            sky_level: kv.get_or("sky_level", 0.0)?,
            sources,
            gradient,
            lamp_lines,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn load(path: &str) -> Result<Self, DetectorError> {
        Self::from_config(&KeyValues::load(path)?)
    }

    /// Photon rate (e-/s) for columns `x0..x0+width` of scene row `row`.
    /// `lamp` adds the comparison-lamp spectrum.
    pub fn rate_row(&self, row: usize, x0: usize, width: usize, lamp: bool) -> Vec<f64> {
        let yc = row as f64 + 0.5;
        let mut out: Vec<f64> = (0..width)
            .map(|i| {
                let xc = (x0 + i) as f64 + 0.5;
                self.sky_level + self.gradient.0 * xc + self.gradient.1 * yc
            })
            .collect();
        for s in &self.sources {
            let reach = PSF_EXTENT * s.psf_sigma + 1.0;
            if (yc - s.y).abs() > reach {
                continue;
            }
            let fy = pixel_fraction(row as f64, s.y, s.psf_sigma);
            if fy == 0.0 {
                continue;
            }
            let lo = ((s.x - reach).floor().max(x0 as f64)) as usize;
            let hi = ((s.x + reach).ceil().min((x0 + width) as f64)).max(lo as f64) as usize;
            for col in lo..hi {
                out[col - x0] += s.flux * fy * pixel_fraction(col as f64, s.x, s.psf_sigma);
            }
        }
        if lamp {
            for l in &self.lamp_lines {
                let reach = PSF_EXTENT * l.sigma + 1.0;
                let lo = ((l.x - reach).floor().max(x0 as f64)) as usize;
                let hi = ((l.x + reach).ceil().min((x0 + width) as f64)).max(lo as f64) as usize;
                for col in lo..hi {
                    out[col - x0] += l.flux * pixel_fraction(col as f64, l.x, l.sigma);
                }
            }
        }
        for v in &mut out {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        out
    }
}

/// Fraction of a unit Gaussian centred at `center` falling in `[pixel, pixel+1)`.
fn pixel_fraction(pixel: f64, center: f64, sigma: f64) -> f64 {
    let k = 1.0 / (sigma * std::f64::consts::SQRT_2);
    0.5 * (libm::erf((pixel + 1.0 - center) * k) - libm::erf((pixel - center) * k))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psf_conserves_flux() {
        let scene = SceneModel::flat(0.0).with_source(20.3, 20.7, 1000.0, 1.5);
        let total: f64 = (0..41).flat_map(|r| scene.rate_row(r, 0, 41, false)).sum();
        assert!((total - 1000.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn gradient_and_clamp() {
        let mut scene = SceneModel::flat(1.0);
        scene.gradient = (-1.0, 0.0);
        let row = scene.rate_row(0, 0, 3, false);
        assert_eq!(row, vec![0.5, 0.0, 0.0]);
    }

    #[test]
    fn lamp_only_when_requested() {
        let mut scene = SceneModel::flat(0.0);
        scene.lamp_lines.push(LampLine { x: 5.5, flux: 100.0, sigma: 0.8 });
        assert!(scene.rate_row(3, 0, 10, false).iter().all(|&v| v == 0.0));
        let lit: f64 = scene.rate_row(3, 0, 10, true).iter().sum();
        assert!((lit - 100.0).abs() < 1e-6);
    }

    #[test]
    fn parses_config() {
        let kv = KeyValues::parse(include_str!("../../../../presets/flat-sky.scene")).unwrap();
        let scene = SceneModel::from_config(&kv).unwrap();
        assert_eq!(scene.sources.len(), 2);
        assert_eq!(scene.lamp_lines.len(), 3);
        let kv = KeyValues::parse("source = 1 2 -3 1\n").unwrap();
        assert!(SceneModel::from_config(&kv).is_err());
    }
}
