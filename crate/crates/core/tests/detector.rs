use ccdaq::detector::{
    derive_seed, digitize_readout, drift_scan, expected_charge, integrate_charge, integration_stage, push_pull,
    simulate_exposure, DetectorGeometry, ExposureParams, ExposureType, NodeSelect, SceneModel, STAGE_READOUT,
};
use proptest::prelude::*;

fn noiseless(rows: usize, cols: usize) -> DetectorGeometry {
    DetectorGeometry::ideal(rows, cols)
}

fn realistic(rows: usize, cols: usize) -> DetectorGeometry {
    let mut g = DetectorGeometry::ideal(rows, cols);
    g.full_well = 2.0e5;
    g.dark_current = 0.5;
    g.read_noise = vec![5.0, 9.0];
    g.pixel_time = vec![2e-6, 1e-6];
    g.gains = vec![2.0, 4.0];
    g.bias_level = vec![1000];
    g
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

#[test]
fn dark_charge_follows_the_poisson_mean() {
    let mut g = noiseless(64, 64);
    g.dark_current = 0.04;
    let p = ExposureParams::new(ExposureType::Dark, 100.0, &g);
    let q = integrate_charge(&SceneModel::flat(50.0), &g, &p, 11).unwrap();
    let (m, _) = mean_std(&q.charge);
    // Poisson(4): standard error sqrt(4 / N).
    let se = (4.0 / q.charge.len() as f64).sqrt();
    assert!((m - 4.0).abs() < 5.0 * se, "mean {m}, expected 4 +- {}", 5.0 * se);
    assert!(q.charge.iter().all(|&c| c >= 0.0 && c.fract() == 0.0));
}

#[test]
fn roi_readout_is_a_crop_of_the_full_frame() {
    let g = realistic(48, 40);
    let scene = SceneModel::flat(20.0).with_source(17.3, 21.8, 5.0e4, 2.0);
    let full = ExposureParams::new(ExposureType::Object, 3.0, &g);
    let full_frames = simulate_exposure(&scene, &g, &full, 99).unwrap();
    for (bin, roi) in [((1, 1), (5, 7, 20, 16)), ((2, 2), (4, 6, 20, 16)), ((4, 2), (8, 0, 32, 48))] {
        let (bx, by) = bin;
        let (x0, y0, w, h) = roi;
        let binned_full = ExposureParams::new(ExposureType::Object, 3.0, &g).with_binning(bx, by);
        let reference = if bin == (1, 1) {
            full_frames[0].clone()
        } else {
            simulate_exposure(&scene, &g, &binned_full, 99).unwrap().remove(0)
        };
        let p = binned_full.clone().with_roi(x0, y0, w, h);
        let sub = simulate_exposure(&scene, &g, &p, 99).unwrap().remove(0);
        // The ROI origin is bin-aligned, so it starts at binned (x0/bx, y0/by).
        let (cx, cy) = (x0 / bx, y0 / by);
        for r in 0..sub.height {
            assert_eq!(sub.row(r), &reference.row(cy + r)[cx..cx + sub.width], "bin {bin:?} row {r}");
        }
    }
}

#[test]
fn binning_conserves_charge() {
    // Zero read noise, unit gain and zero bias make ADU equal electrons.
    let g = noiseless(16, 24);
    let scene = SceneModel::flat(7.0).with_source(10.0, 5.0, 900.0, 1.2);
    let p1 = ExposureParams::new(ExposureType::Object, 10.0, &g);
    let q = integrate_charge(&scene, &g, &p1, 5).unwrap();
    for (bx, by) in [(1, 1), (2, 2), (3, 4), (24, 16)] {
        let p = p1.clone().with_binning(bx, by);
        let f = digitize_readout(&q, &g, &p, 6).unwrap();
        for j in 0..f.height {
            for i in 0..f.width {
                let mut s = 0.0;
                for r in j * by..(j + 1) * by {
                    for c in i * bx..(i + 1) * bx {
                        s += q.get(r, c);
                    }
                }
                assert_eq!(f.samples[j * f.width + i] as f64, s);
            }
        }
        let total: f64 = f.samples.iter().map(|&s| s as f64).sum();
        assert_eq!(total, q.total());
    }
}

#[test]
fn identical_inputs_give_identical_frames() {
    let g = realistic(20, 20);
    let scene = SceneModel::flat(5.0).with_source(9.0, 9.0, 1e4, 1.0);
    let p = ExposureParams::new(ExposureType::Object, 2.0, &g);
    let mut p3 = p.clone();
    p3.n_exposures = 3;
    assert_eq!(simulate_exposure(&scene, &g, &p3, 7).unwrap(), simulate_exposure(&scene, &g, &p3, 7).unwrap());
    assert_ne!(simulate_exposure(&scene, &g, &p, 7).unwrap(), simulate_exposure(&scene, &g, &p, 8).unwrap());
    let mut scan = ExposureParams::new(ExposureType::Scan, 0.0, &g).with_scan(30, 0.05);
    scan.roi.height = 1;
    let a = drift_scan(&scene, &g, &scan, 3).unwrap().into_frame();
    let b = drift_scan(&scene, &g, &scan, 3).unwrap().into_frame();
    assert_eq!(a, b);
}

#[test]
fn flat_pairs_obey_the_photon_transfer_relation() {
    let mut g = realistic(16, 16);
    g.dark_current = 0.0;
    let (gain, rn) = (g.gains[0], g.read_noise[0]);
    let scene = SceneModel::flat(100.0);
    let p = ExposureParams::new(ExposureType::Object, 10.0, &g);
    let bias = g.bias_level[0] as f64;
    let mut diffs = Vec::new();
    let mut signal = Vec::new();
    for k in 0..1000u64 {
        let a = &simulate_exposure(&scene, &g, &p, 2 * k).unwrap()[0];
        let b = &simulate_exposure(&scene, &g, &p, 2 * k + 1).unwrap()[0];
        for (&x, &y) in a.samples.iter().zip(&b.samples) {
            diffs.push((x as f64 - y as f64) / 2f64.sqrt());
            signal.push((x as f64 + y as f64) / 2.0 - bias);
        }
    }
    let (mean_signal, _) = mean_std(&signal);
    let (_, sd) = mean_std(&diffs);
    let expected = mean_signal / gain + (rn / gain).powi(2);
    let rel = (sd * sd - expected).abs() / expected;
    assert!(rel < 0.05, "variance {} vs {expected} ({:.2}%)", sd * sd, rel * 100.0);
}

#[test]
fn mean_signal_grows_with_exposure_until_saturation() {
    let mut g = realistic(8, 8);
    g.full_well = 5.0e4;
    let scene = SceneModel::flat(1000.0);
    let mut last = f64::NEG_INFINITY;
    let mut saturated = false;
    for t in [0.0, 1.0, 2.0, 5.0, 10.0, 20.0, 40.0, 80.0, 160.0] {
        let p = ExposureParams::new(ExposureType::Object, t, &g);
        let q = expected_charge(&scene, &g, &p).unwrap();
        // Noiseless mean ADU of the expectation.
        let adu = (q.get(3, 3) / g.gains[0]).round() + g.bias_level[0] as f64;
        let adu = adu.min(65535.0);
        assert!(adu >= last, "exptime {t}: {adu} < {last}");
        saturated |= q.get(3, 3) >= g.full_well;
        last = adu;
        let f = &simulate_exposure(&scene, &g, &p, 1).unwrap()[0];
        let (m, _) = mean_std(&f.samples.iter().map(|&s| s as f64).collect::<Vec<_>>());
        let sigma = ((q.get(0, 0) + g.read_noise[0].powi(2)).sqrt() / g.gains[0]) / 8.0;
        assert!((m - adu).abs() <= 5.0 * sigma + 0.5, "exptime {t}: mean {m} vs {adu}");
    }
    assert!(saturated);
}

#[test]
fn drift_scan_rows_are_homogeneous_on_a_uniform_scene() {
    let g = realistic(32, 64);
    let scene = SceneModel::flat(40.0);
    let p = ExposureParams::new(ExposureType::Scan, 0.0, &g).with_scan(100, 0.1);
    let rows: Vec<_> = drift_scan(&scene, &g, &p, 21).unwrap().collect();
    assert_eq!(rows.len(), 100);
    assert!((rows[99].timestamp - rows[0].timestamp - 9.9).abs() < 1e-9);
    let stats: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| mean_std(&r.samples.iter().map(|&s| s as f64).collect::<Vec<_>>()))
        .collect();
    let n = rows[0].samples.len() as f64;
    // Expected mean: (sky + dark) x rows x row_period electrons.
    let expect = (40.0 + g.dark_current) * 32.0 * 0.1 / g.gains[0] + g.bias_level[0] as f64;
    for (i, a) in stats.iter().enumerate() {
        assert!((a.0 - expect).abs() < 5.0 * a.1 / n.sqrt(), "row {i}: {} vs {expect}", a.0);
        for b in &stats[i + 1..] {
            let z = (a.0 - b.0).abs() / (a.1 * a.1 / n + b.1 * b.1 / n).sqrt();
            assert!(z < 5.0, "z = {z}");
        }
    }
    assert_eq!(rows.iter().filter(|r| r.ramp_up).count(), 32);
}

#[test]
fn one_row_scan_equals_a_one_row_roi_readout() {
    let g = realistic(32, 24);
    let scene = SceneModel::flat(10.0).with_source(12.0, 7.5, 2e4, 1.5);
    let (period, y0) = (0.25, 7);
    let mut scan = ExposureParams::new(ExposureType::Scan, 0.0, &g).with_scan(1, period);
    scan.roi.y0 = y0;
    scan.roi.height = 1;
    let s = drift_scan(&scene, &g, &scan, 77).unwrap().into_frame();
    let roi = ExposureParams::new(ExposureType::Object, g.rows as f64 * period, &g).with_roi(0, y0, g.cols, 1);
    let f = simulate_exposure(&scene, &g, &roi, 77).unwrap().remove(0);
    assert_eq!((s.width, s.height), (f.width, f.height));
    assert_eq!(s.samples, f.samples);
}

/// Integrate, shift, repeat, written out longhand over plain vectors.
fn shift_accumulate(rows: usize, cols: usize, steps: &[Vec<f64>], shift: usize, full_well: f64) -> Vec<f64> {
    let mut acc = vec![0.0; rows * cols];
    for step in steps {
        for i in 0..acc.len() {
            acc[i] = (acc[i] + step[i]).min(full_well);
        }
        let mut moved = vec![0.0; rows * cols];
        for r in 0..rows {
            if r + shift < rows {
                for c in 0..cols {
                    moved[(r + shift) * cols + c] = acc[r * cols + c];
                }
            }
        }
        acc = moved;
    }
    acc
}

#[test]
fn push_pull_matches_brute_force_shift_accumulate() {
    let mut g = realistic(64, 16);
    // Without dark current the three band sums see source flux only.
    g.dark_current = 0.0;
    let scene = SceneModel::flat(0.0).with_source(8.0, 12.0, 2.0e4, 1.0);
    let p = ExposureParams::new(ExposureType::PushPull, 0.0, &g).with_push_pull(1.0, 3, 10);
    let seed = 31;
    let frame = push_pull(&scene, &g, &p, seed).unwrap();

    let mut single = ExposureParams::new(ExposureType::Object, 1.0, &g);
    single.shutter = true;
    let steps: Vec<Vec<f64>> = (0..3)
        .map(|j| integrate_charge(&scene, &g, &single, derive_seed(seed, 0, integration_stage(j))).unwrap().charge)
        .collect();
    let acc = shift_accumulate(g.rows, g.cols, &steps, 10, g.full_well);
    let mut charge = ccdaq::detector::ChargeImage::for_detector(&g);
    charge.charge = acc;
    let oracle = digitize_readout(&charge, &g, &p, derive_seed(seed, 0, STAGE_READOUT)).unwrap();
    assert_eq!(frame.samples, oracle.samples);

    // Expectation: three equal copies at +10, +20, +30 rows.
    let e = expected_charge(&scene, &g, &single).unwrap().charge;
    let expect = shift_accumulate(g.rows, g.cols, &[e.clone(), e.clone(), e], 10, g.full_well);
    let band = |acc: &[f64], centre: usize| -> f64 { (centre - 4..centre + 5).map(|r| acc[r * g.cols..(r + 1) * g.cols].iter().sum::<f64>()).sum() };
    let copies: Vec<f64> = [22, 32, 42].iter().map(|&r| band(&expect, r)).collect();
    // Equal up to the source tails falling outside each 9-row band.
    assert!((copies[0] - copies[1]).abs() < 1e-5 * copies[0] && (copies[1] - copies[2]).abs() < 1e-5 * copies[0]);
    assert!((copies[0] - 2.0e4).abs() < 0.01 * 2.0e4);
    // Averaged over seeds the measured copies agree with the expectation.
    let runs = 60;
    let mut measured = [0.0; 3];
    let bias = g.bias_level[0] as f64;
    for s in 0..runs {
        let f = push_pull(&scene, &g, &p, 1000 + s).unwrap();
        let adu: Vec<f64> = f.samples.iter().map(|&v| (v as f64 - bias) * g.gains[0]).collect();
        for (k, r) in [22, 32, 42].into_iter().enumerate() {
            measured[k] += band(&adu, r) / runs as f64;
        }
    }
    for (k, m) in measured.iter().enumerate() {
        // Poisson flux plus read noise over a 9x16 band, averaged.
        let sigma = ((copies[k] + 144.0 * g.read_noise[0].powi(2)) / runs as f64).sqrt();
        assert!((m - copies[k]).abs() < 5.0 * sigma, "copy {k}: {m} vs {}", copies[k]);
    }
}

#[test]
fn two_node_readout_uses_per_node_bias() {
    let mut g = noiseless(4, 8);
    g.output_nodes = 2;
    g.bias_level = vec![100, 300];
    let mut p = ExposureParams::new(ExposureType::Bias, 0.0, &g);
    p.node = NodeSelect::All;
    let f = simulate_exposure(&SceneModel::flat(0.0), &g, &p, 0).unwrap().remove(0);
    for r in 0..4 {
        assert_eq!(f.row(r), &[100, 100, 100, 100, 300, 300, 300, 300]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn any_aligned_roi_is_a_crop(x0 in 0usize..6, y0 in 0usize..6, w in 1usize..5, h in 1usize..5, bx in 1usize..3, by in 1usize..3, seed in any::<u64>()) {
        let g = realistic(20, 20);
        let scene = SceneModel::flat(15.0).with_source(10.0, 10.0, 3e3, 2.0);
        let (x0, y0) = (x0 * bx, y0 * by);
        let full = ExposureParams::new(ExposureType::Object, 1.0, &g).with_binning(bx, by);
        let a = simulate_exposure(&scene, &g, &full, seed).unwrap().remove(0);
        let roi = full.clone().with_roi(x0, y0, w * bx, h * by);
        let b = simulate_exposure(&scene, &g, &roi, seed).unwrap().remove(0);
        for r in 0..h {
            prop_assert_eq!(b.row(r), &a.row(y0 / by + r)[x0 / bx..x0 / bx + w]);
        }
    }
}
