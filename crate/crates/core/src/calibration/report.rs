//! Key-value text reports and plot-ready CSV tables.

use std::fmt::Write;

use super::{NoiseSpectrum, PhotonTransferResult, TransferCurve};

fn kv(out: &mut String, key: &str, value: impl std::fmt::Display) {
    let _ = writeln!(out, "{key} = {value}");
}

fn excluded(out: &mut String, list: &[(f64, String)]) {
    kv(out, "excluded_levels", list.len());
    for (i, (level, why)) in list.iter().enumerate() {
        kv(out, &format!("excluded.{i}"), format!("{level:.6} {why}"));
    }
}

pub fn ptc_report(r: &PhotonTransferResult) -> String {
    let mut s = String::new();
    kv(&mut s, "analysis", "photon-transfer");
    kv(&mut s, "gain_e_per_adu", format!("{:.6}", r.gain));
    kv(&mut s, "read_noise_e", format!("{:.6}", r.read_noise));
    kv(&mut s, "read_noise_adu", format!("{:.6}", r.read_noise_adu()));
    kv(&mut s, "slope", format!("{:.9e}", r.slope));
    kv(&mut s, "intercept_adu2", format!("{:.6}", r.intercept));
    kv(&mut s, "residual_rms_adu2", format!("{:.6}", r.residual_rms));
    kv(&mut s, "levels", r.fit_points.len());
    excluded(&mut s, &r.excluded);
    s
}

pub fn ptc_csv(r: &PhotonTransferResult) -> String {
    let mut s = String::from("signal_adu,variance_adu2,model_adu2\n");
    for &(x, y) in &r.fit_points {
        let _ = writeln!(s, "{x:.6},{y:.6},{:.6}", r.model(x));
    }
    s
}

pub fn psd_report(p: &NoiseSpectrum) -> String {
    let mut s = String::new();
    kv(&mut s, "analysis", "noise-spectrum");
    kv(&mut s, "segment_len", p.segment_len);
    kv(&mut s, "n_segments", p.n_segments);
    kv(&mut s, "mean_adu", format!("{:.6}", p.mean));
    kv(&mut s, "total_power_adu2", format!("{:.6}", p.total_power()));
    kv(&mut s, "taps", p.filter_coeffs.len());
    for (i, c) in p.filter_coeffs.iter().enumerate() {
        kv(&mut s, &format!("tap.{i}"), format!("{c:.12}"));
    }
    s
}

pub fn psd_csv(p: &NoiseSpectrum) -> String {
    let mut s = String::from("frequency_cycles_per_sample,psd_adu2_per_unit_frequency\n");
    for (f, v) in p.frequencies.iter().zip(&p.psd) {
        let _ = writeln!(s, "{f:.8},{v:.9e}");
    }
    s
}

pub fn linearity_report(c: &TransferCurve) -> String {
    let mut s = String::new();
    kv(&mut s, "analysis", "transfer-curve");
    kv(&mut s, "levels", c.points.len());
    kv(&mut s, "offset_adu", format!("{:.6}", c.offset));
    kv(&mut s, "slope_adu_per_s", format!("{:.6}", c.slope));
    kv(&mut s, "full_scale_adu", format!("{:.3}", c.full_scale));
    kv(&mut s, "max_nonlinearity_before_pct", format!("{:.4}", c.max_nonlinearity_before));
    kv(&mut s, "max_nonlinearity_after_pct", format!("{:.4}", c.max_nonlinearity_after));
    for (i, (x, y)) in c.correction.xs.iter().zip(&c.correction.ys).enumerate() {
        kv(&mut s, &format!("knot.{i}"), format!("{x:.4} {y:.4}"));
    }
    excluded(&mut s, &c.excluded);
    s
}

pub fn linearity_csv(c: &TransferCurve) -> String {
    let mut s = String::from("exposure_s,mean_adu,ideal_adu,corrected_adu\n");
    for &(t, m) in &c.points {
        let _ = writeln!(s, "{t:.6},{m:.4},{:.4},{:.4}", c.ideal(t), c.correction.apply(m));
    }
    s
}

/// Reads `key = value` lines back.
pub fn parse_report(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::{fit_ptc, PtcPoint};
    use super::*;

    #[test]
    fn reports_read_back() {
        let pts: Vec<_> = [50.0, 100.0, 200.0, 400.0, 800.0]
            .iter()
            .map(|&x| PtcPoint { signal: x, variance: 4.0 + x / 2.0, pixels: 100 })
            .collect();
        let r = fit_ptc(&pts).unwrap();
        let kv = parse_report(&ptc_report(&r));
        assert!(kv.contains(&("gain_e_per_adu".into(), "2.000000".into())));
        assert_eq!(ptc_csv(&r).lines().count(), 6);
    }
}
