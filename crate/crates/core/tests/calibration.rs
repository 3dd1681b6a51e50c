use ccdaq::calibration::{
    boxcar, fit_ptc, fit_transfer_curve, noise_spectrum, noise_spectrum_with, optimal_filter, photon_transfer, CalibrationError,
    Correction, PtcPoint, TransferCurve,
};
use ccdaq::detector::{simulate_exposure, DetectorGeometry, ExposureParams, ExposureType, RawFrame, SceneModel};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn camera(size: usize, gain: f64, rn: f64) -> DetectorGeometry {
    let mut g = DetectorGeometry::ideal(size, size);
    g.gains = vec![gain];
    g.read_noise = vec![rn];
    g.bias_level = vec![1000];
    g
}

fn frame(g: &DetectorGeometry, rate: f64, t: f64, seed: u64) -> RawFrame {
    let kind = if t == 0.0 { ExposureType::Bias } else { ExposureType::Object };
    let p = ExposureParams::new(kind, t, g);
    simulate_exposure(&SceneModel::flat(rate), g, &p, seed).unwrap().remove(0)
}

fn flats(g: &DetectorGeometry, levels: &[f64]) -> (Vec<(RawFrame, RawFrame)>, Vec<RawFrame>) {
    let pairs = levels.iter().enumerate().map(|(i, &e)| (frame(g, e, 1.0, 10 * i as u64), frame(g, e, 1.0, 10 * i as u64 + 1))).collect();
    let bias = (0..3).map(|i| frame(g, 0.0, 0.0, 1000 + i)).collect();
    (pairs, bias)
}

const LEVELS: [f64; 8] = [300.0, 800.0, 2000.0, 5000.0, 10000.0, 20000.0, 35000.0, 50000.0];

#[test]
fn photon_transfer_recovers_gain_and_read_noise() {
    let g = camera(128, 2.0, 5.0);
    let (pairs, bias) = flats(&g, &LEVELS);
    let r = photon_transfer(&pairs, &bias).unwrap();
    assert!((r.gain - 2.0).abs() / 2.0 < 0.03, "gain {}", r.gain);
    assert!((r.read_noise - 5.0).abs() / 5.0 < 0.05, "read noise {}", r.read_noise);
    assert_eq!(r.fit_points.len(), 8);
    // Signal is electrons over gain.
    for (&(s, _), e) in r.fit_points.iter().zip(LEVELS) {
        assert!((s - e / 2.0).abs() < 0.01 * e / 2.0 + 1.0, "{s} vs {}", e / 2.0);
    }
}

#[test]
fn saturated_levels_are_left_out() {
    let mut g = camera(64, 1.0, 5.0);
    g.full_well = 40000.0;
    let mut levels = LEVELS.to_vec();
    levels.push(200000.0);
    let (pairs, bias) = flats(&g, &levels);
    let r = photon_transfer(&pairs, &bias).unwrap();
    assert!(!r.excluded.is_empty());
    assert!(r.fit_points.iter().all(|&(s, _)| s < 40000.0));
    assert!((r.gain - 1.0).abs() < 0.05, "gain {}", r.gain);
}

#[test]
fn photon_transfer_refuses_bad_input() {
    let g = camera(32, 2.0, 5.0);
    let (pairs, bias) = flats(&g, &[0.0; 6]);
    assert!(matches!(photon_transfer(&pairs, &bias), Err(CalibrationError::InsufficientData(_))));

    let quiet = camera(32, 1.0, 0.0);
    // Noiseless: identical pairs from identical seeds, no read noise.
    let pairs: Vec<_> = LEVELS[..5].iter().map(|&e| (frame(&quiet, e, 1.0, 5), frame(&quiet, e, 1.0, 5))).collect();
    let bias = vec![frame(&quiet, 0.0, 0.0, 1)];
    assert!(matches!(photon_transfer(&pairs, &bias), Err(CalibrationError::DegenerateFit(_))));

    let small = camera(16, 2.0, 5.0);
    let (mut pairs, bias) = flats(&g, &LEVELS[..5]);
    pairs.push((frame(&small, 1000.0, 1.0, 1), frame(&small, 1000.0, 1.0, 2)));
    assert!(matches!(photon_transfer(&pairs, &bias), Err(CalibrationError::Mismatch(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gain_scales_inversely_with_signal(k in 0.05f64..20.0, rn in 0.5f64..20.0, gain in 0.3f64..8.0) {
        let pts: Vec<PtcPoint> = [100.0, 300.0, 1000.0, 3000.0, 10000.0, 20000.0]
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                // A fixed wobble so the fit is not exact.
                let wobble = 1.0 + 0.01 * ((i * 37 % 7) as f64 - 3.0);
                PtcPoint { signal: s, variance: (s / gain + (rn / gain).powi(2)) * wobble, pixels: 4096 }
            })
            .collect();
        let scaled: Vec<PtcPoint> = pts.iter().map(|p| PtcPoint { signal: p.signal * k, variance: p.variance * k * k, ..*p }).collect();
        let a = fit_ptc(&pts).unwrap();
        let b = fit_ptc(&scaled).unwrap();
        prop_assert!((b.gain * k - a.gain).abs() < 1e-9 * a.gain);
    }
}

// ---------------------------------------------------------------------------
// Noise spectra

fn white(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn ar1(n: usize, rho: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = 0.0;
    // Burn in past the start-up transient.
    (0..n + 1000)
        .map(|_| {
            let e: f64 = StandardNormal.sample(&mut rng);
            x = rho * x + e;
            x
        })
        .skip(1000)
        .collect()
}

fn variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

#[test]
fn white_noise_spectrum_is_flat() {
    let n = 256;
    let x = white(1 << 17, 1);
    let p = noise_spectrum(&x, n).unwrap();
    let k = p.n_segments as f64;
    // Overlap correlation of half-shifted periodic Hann windows.
    let w: Vec<f64> = (0..n).map(|i| (std::f64::consts::PI * i as f64 / n as f64).sin().powi(2)).collect();
    let c = (0..n / 2).map(|i| w[i] * w[i + n / 2]).sum::<f64>() / w.iter().map(|v| v * v).sum::<f64>();
    let rel = ((1.0 + 2.0 * c * c) / k).sqrt();
    for (i, &v) in p.psd.iter().enumerate() {
        let edge = i == 0 || i == n / 2;
        let level = if edge { 1.0 } else { 2.0 };
        let sd = if edge { rel * 2f64.sqrt() } else { rel } * level;
        assert!((v - level).abs() < 5.0 * sd, "bin {i}: {v} vs {level} +- {sd}");
    }
    let total: f64 = p.psd.iter().sum::<f64>() / n as f64;
    assert!((total - variance(&x)).abs() / variance(&x) < 0.01, "{total}");
}

#[test]
fn white_noise_filter_is_the_mean() {
    let x = white(1 << 20, 2);
    let p = noise_spectrum(&x, 256).unwrap();
    assert_eq!(p.filter_coeffs.len(), 8);
    for &c in &p.filter_coeffs {
        assert!((c - 0.125).abs() < 0.02 * 0.125, "{:?}", p.filter_coeffs);
    }
}

#[test]
fn correlated_noise_filter_beats_the_boxcar() {
    let rho = 0.8;
    let p = noise_spectrum_with(&ar1(1 << 20, rho, 3), 512, 8).unwrap();
    let h = &p.filter_coeffs;
    assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    // Ends weigh more than the middle for AR(1).
    assert!(h[0] > h[3] && h[7] > h[4]);
    let fresh = ar1(1_000_000, rho, 4);
    let conv = |taps: &[f64]| -> f64 {
        let mut out = Vec::with_capacity(fresh.len());
        for i in taps.len() - 1..fresh.len() {
            out.push((0..taps.len()).map(|j| taps[j] * fresh[i - j]).sum::<f64>());
        }
        variance(&out)
    };
    let (vo, vb) = (conv(h), conv(&boxcar(8)));
    assert!(vo < vb, "optimal {vo} boxcar {vb}");
    // Closed forms with unit innovations.
    let s2 = 1.0 / (1.0 - rho * rho);
    let blue = s2 * (1.0 + rho) / (8.0 - 6.0 * rho);
    let box_theory = s2 / 64.0 * (8.0 + 2.0 * (1..8).map(|k| (8 - k) as f64 * rho.powi(k)).sum::<f64>());
    assert!((vo - blue).abs() / blue < 0.03, "{vo} vs {blue}");
    assert!((vb - box_theory).abs() / box_theory < 0.03, "{vb} vs {box_theory}");
}

#[test]
fn singular_autocovariance_is_an_error() {
    assert!(matches!(optimal_filter(&[1.0, 1.0, 1.0]), Err(CalibrationError::DegenerateFit(_))));
}

// ---------------------------------------------------------------------------
// Transfer curve

const BIAS: f64 = 1000.0;
const TOP: f64 = 50000.0;

fn compress(x: u16, amount: f64) -> u16 {
    let s = x as f64 - BIAS;
    (BIAS + s * (1.0 - amount * (s / TOP).powi(2))).round().clamp(0.0, 65535.0) as u16
}

fn ramp(amount: f64) -> (Vec<(f64, RawFrame)>, f64) {
    let g = camera(64, 1.0, 5.0);
    let rate = 5000.0;
    let r = (0..12)
        .map(|i| {
            let t = i as f64;
            let mut f = frame(&g, rate, t.max(1e-9), 500 + i);
            f.samples.iter_mut().for_each(|s| *s = compress(*s, amount));
            (t, f)
        })
        .collect();
    (r, rate)
}

#[test]
fn linear_ramp_needs_no_correction() {
    let (r, _) = ramp(0.0);
    let c = fit_transfer_curve(&r).unwrap();
    assert!(c.max_nonlinearity_before < 0.05, "{}", c.max_nonlinearity_before);
    assert!(c.max_nonlinearity_after <= 0.05, "{}", c.max_nonlinearity_after);
    for &(_, m) in &c.points {
        assert!((c.correction.apply(m) - m).abs() / c.full_scale < 5e-4);
    }
}

fn residual_pct(c: &TransferCurve, rate: f64, amount: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..=1000 {
        let t = 11.0 * i as f64 / 1000.0;
        let s = rate * t;
        let measured = BIAS + s * (1.0 - amount * (s / TOP).powi(2));
        worst = worst.max((c.correction.apply(measured) - c.ideal(t)).abs());
    }
    worst / c.full_scale * 100.0
}

#[test]
fn compression_is_linearized() {
    let (r, rate) = ramp(0.03);
    let c = fit_transfer_curve(&r).unwrap();
    assert!(c.max_nonlinearity_before > 2.0, "{}", c.max_nonlinearity_before);
    let dense = residual_pct(&c, rate, 0.03);
    assert!(dense < 0.3, "dense residual {dense}%");
    assert!(c.max_nonlinearity_after < 0.3, "{}", c.max_nonlinearity_after);
}

#[test]
fn correcting_corrected_data_changes_nothing() {
    let (r, _) = ramp(0.03);
    let first = fit_transfer_curve(&r).unwrap();
    let corrected: Vec<(f64, RawFrame)> = r
        .iter()
        .map(|(t, f)| {
            let mut f = f.clone();
            f.samples = first.correction.apply_samples(&f.samples);
            (*t, f)
        })
        .collect();
    let second = fit_transfer_curve(&corrected).unwrap();
    let (lo, hi) = first.correction.range().unwrap();
    for i in 0..=500 {
        let x = lo + (hi - lo) * i as f64 / 500.0;
        let once = first.correction.apply(x);
        let twice = second.correction.apply(once);
        assert!((twice - once).abs() / first.full_scale < 1e-3, "{x}: {once} -> {twice}");
    }
}

#[test]
fn ramps_that_fall_are_rejected() {
    let (mut r, _) = ramp(0.0);
    r.swap(4, 6);
    r[4].0 = 6.0;
    r[6].0 = 4.0;
    // Exposure order restored, data order broken.
    let s = r[5].1.samples.clone();
    r[5].1.samples = r[3].1.samples.clone();
    r[3].1.samples = s;
    assert!(matches!(fit_transfer_curve(&r), Err(CalibrationError::BadRamp(_))));
    assert!(matches!(fit_transfer_curve(&r[..5]), Err(CalibrationError::InsufficientData(_))));
}

proptest! {
    #[test]
    fn correction_rises_over_its_range(steps in prop::collection::vec((0.1f64..100.0, 0.1f64..100.0), 2..12)) {
        let (mut x, mut y) = (0.0, 0.0);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (dx, dy) in steps {
            x += dx;
            y += dy;
            xs.push(x);
            ys.push(y);
        }
        let c = Correction::new(xs.clone(), ys).unwrap();
        let (lo, hi) = (xs[0], xs[xs.len() - 1]);
        let mut last = f64::NEG_INFINITY;
        for i in 0..=2000 {
            let v = c.apply((lo + (hi - lo) * i as f64 / 2000.0).min(hi));
            prop_assert!(v > last || (v - last).abs() < 1e-12 * v.abs().max(1.0), "{} <= {}", v, last);
            last = v;
        }
    }
}
