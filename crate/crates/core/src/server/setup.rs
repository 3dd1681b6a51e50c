//! `setup` arguments and their compilation into controller programs.

use std::str::FromStr;

use crate::controller::{Program, ReadoutMode, SyncInstruction};
use crate::detector::{self, DetectorGeometry, ExposureParams, ExposureType, NodeSelect, Roi};

use super::line::CommandLine;

pub const SHUTTER: u8 = 0;
pub const FILTER: u8 = 1;
pub const LAMP: u8 = 2;

/// Everything `setup` configures.
#[derive(Debug, Clone, PartialEq)]
pub struct Setup {
    pub params: ExposureParams,
    /// Fixed seed for the next `observe`; otherwise one is derived.
    pub seed: Option<u64>,
    /// Whether frames are recorded as FITS files.
    pub write: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{field}: {reason}")]
pub struct SetupError {
    pub field: String,
    pub reason: String,
}

fn bad(field: &str, reason: impl Into<String>) -> SetupError {
    SetupError { field: field.to_string(), reason: reason.into() }
}

fn num<T: FromStr>(field: &str, v: &str) -> Result<T, SetupError> {
    v.parse().map_err(|_| bad(field, format!("cannot parse `{v}`")))
}

fn flag(field: &str, v: &str) -> Result<bool, SetupError> {
    match v.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" | "open" => Ok(true),
        "0" | "false" | "no" | "off" | "closed" => Ok(false),
        _ => Err(bad(field, format!("expected a boolean, got `{v}`"))),
    }
}

pub const SETUP_KEYS: [&str; 20] = [
    "type",
    "exptime",
    "flush",
    "shutter",
    "filter",
    "speed",
    "bin",
    "binx",
    "biny",
    "gain",
    "node",
    "roi",
    "n",
    "scan_rows",
    "row_period",
    "elementary_exptime",
    "n_transfers",
    "rows_per_transfer",
    "seed",
    "write",
];

/// Builds a setup from `key=value` arguments. Unspecified fields take
/// full-frame, unbinned, single-exposure defaults.
pub fn parse_setup(cmd: &CommandLine, geom: &DetectorGeometry) -> Result<Setup, SetupError> {
    if let Some(p) = cmd.positional.first() {
        return Err(bad("setup", format!("unexpected argument `{p}`; use key=value")));
    }
    let ty: ExposureType = match cmd.get("type") {
        Some(t) => t.parse().map_err(|e: String| bad("type", e))?,
        None => return Err(bad("type", "missing")),
    };
    let mut params = ExposureParams::new(ty, 0.0, geom);
    let mut seed = None;
    let mut write = true;
    let (mut scan_rows, mut row_period) = (None, None);
    let (mut elem, mut transfers, mut rows_per) = (None, None, None);
    for (k, v) in &cmd.named {
        match k.as_str() {
            "type" => {}
            "exptime" => params.exptime = num(k, v)?,
            "flush" => params.flush_before = flag(k, v)?,
            "shutter" => params.shutter = flag(k, v)?,
            "filter" => params.filter = num(k, v)?,
            "speed" => params.speed = num(k, v)?,
            "bin" => {
                let b = num(k, v)?;
                params.bin_x = b;
                params.bin_y = b;
            }
            "binx" => params.bin_x = num(k, v)?,
            "biny" => params.bin_y = num(k, v)?,
            "gain" => params.gain_index = num(k, v)?,
            "node" => params.node = NodeSelect::from_str(v).map_err(|e| bad(k, e))?,
            "roi" => {
                let parts: Vec<&str> = v.split(',').collect();
                if parts.len() != 4 {
                    return Err(bad(k, "expected x0,y0,width,height"));
                }
                let n: Vec<usize> = parts.iter().map(|p| num::<usize>(k, p.trim())).collect::<Result<_, _>>()?;
                params.roi = Roi { x0: n[0], y0: n[1], width: n[2], height: n[3] };
            }
            "n" => params.n_exposures = num(k, v)?,
            "scan_rows" => scan_rows = Some(num(k, v)?),
            "row_period" => row_period = Some(num(k, v)?),
            "elementary_exptime" => elem = Some(num(k, v)?),
            "n_transfers" => transfers = Some(num(k, v)?),
            "rows_per_transfer" => rows_per = Some(num(k, v)?),
            "seed" => seed = Some(num(k, v)?),
            "write" => write = flag(k, v)?,
            other => return Err(bad(other, "unknown setup field")),
        }
    }
    match (scan_rows, row_period) {
        (None, None) => {}
        (Some(r), Some(p)) => params = params.with_scan(r, p),
        (None, Some(_)) => return Err(bad("scan_rows", "missing")),
        (Some(_), None) => return Err(bad("row_period", "missing")),
    }
    match (elem, transfers, rows_per) {
        (None, None, None) => {}
        (Some(e), Some(t), Some(r)) => params = params.with_push_pull(e, t, r),
        (None, _, _) => return Err(bad("elementary_exptime", "missing")),
        (_, None, _) => return Err(bad("n_transfers", "missing")),
        (_, _, None) => return Err(bad("rows_per_transfer", "missing")),
    }
    params.validate(geom).map_err(|e| match e {
        detector::DetectorError::Parameter { field, reason } => bad(field, reason),
        other => bad("setup", other.to_string()),
    })?;
    Ok(Setup { params, seed, write })
}

/// The synchronous program that acquires one frame of `params`.
pub fn compile(params: &ExposureParams, geom: &DetectorGeometry) -> Program {
    use SyncInstruction::*;
    let mut prog = Vec::new();
    if params.flush_before {
        prog.push(TransferCtl { rows: geom.rows as u32, flush: true });
    }
    if params.exposure_type.uses_shutter() {
        prog.push(ExtDeviceCtl { device: FILTER, action: 1, value: params.filter as i32 });
    }
    let neon = params.exposure_type == ExposureType::Neon;
    let open = params.shutter_open();
    if neon {
        prog.push(ExtDeviceCtl { device: LAMP, action: 1, value: 1 });
    }
    if open {
        prog.push(ExtDeviceCtl { device: SHUTTER, action: 1, value: 1 });
    }
    let close = |prog: &mut Vec<SyncInstruction>| {
        if open {
            prog.push(ExtDeviceCtl { device: SHUTTER, action: 1, value: 0 });
        }
        if neon {
            prog.push(ExtDeviceCtl { device: LAMP, action: 1, value: 0 });
        }
    };
    match params.exposure_type {
        ExposureType::Scan => {
            prog.push(ReadoutCtl { mode: ReadoutMode::Scan });
            close(&mut prog);
        }
        ExposureType::PushPull => {
            let pp = params.push_pull.expect("validated push-pull params");
            let body = prog.len() as u16;
            prog.push(SyncInstruction::integrate_seconds(pp.elementary_exptime));
            prog.push(TransferCtl { rows: pp.rows_per_transfer as u32, flush: false });
            if pp.n_transfers > 1 {
                prog.push(SeqCtl { target: body, count: pp.n_transfers as u32 });
            }
            close(&mut prog);
            prog.push(ReadoutCtl { mode: ReadoutMode::Frame });
        }
        _ => {
            prog.push(SyncInstruction::integrate_seconds(detector::effective_exptime(params)));
            close(&mut prog);
            prog.push(ReadoutCtl { mode: ReadoutMode::Frame });
        }
    }
    Program::new(prog).expect("compiled programs are well formed")
}

/// Expected simulated duration of one frame, seconds.
pub fn frame_seconds(params: &ExposureParams, geom: &DetectorGeometry) -> f64 {
    match (params.scan, params.push_pull) {
        (Some(s), _) => s.scan_rows as f64 * s.row_period,
        (_, Some(p)) => p.n_transfers as f64 * p.elementary_exptime + params.readout_time(geom),
        _ => detector::effective_exptime(params) + params.readout_time(geom),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::server::line::parse_line;

    fn geom() -> DetectorGeometry {
        DetectorGeometry::ideal(64, 32)
    }

    #[test]
    fn defaults_are_full_frame() {
        let s = parse_setup(&parse_line("setup type=dark exptime=10").unwrap(), &geom()).unwrap();
        assert_eq!(s.params.roi, Roi { x0: 0, y0: 0, width: 32, height: 64 });
        assert_eq!(s.params.exptime, 10.0);
        assert!(s.write);
    }

    #[test]
    fn all_fields() {
        let line = "setup type=object exptime=1.5 flush=0 shutter=1 filter=2 speed=0 bin=2 gain=0 node=0 \
                    roi=4,8,16,32 n=3 seed=77 write=no";
        let s = parse_setup(&parse_line(line).unwrap(), &geom()).unwrap();
        let p = &s.params;
        assert!(!p.flush_before);
        assert_eq!((p.bin_x, p.bin_y, p.filter, p.n_exposures), (2, 2, 2, 3));
        assert_eq!(p.roi, Roi { x0: 4, y0: 8, width: 16, height: 32 });
        assert_eq!(s.seed, Some(77));
        assert!(!s.write);
    }

    #[test]
    fn errors_name_the_field() {
        let g = geom();
        let f = |l: &str| parse_setup(&parse_line(l).unwrap(), &g).unwrap_err().field;
        assert_eq!(f("setup exptime=1"), "type");
        assert_eq!(f("setup type=dark exptime=x"), "exptime");
        assert_eq!(f("setup type=dark roi=0,0,40,8"), "roi");
        assert_eq!(f("setup type=scan scan_rows=10"), "row_period");
        assert_eq!(f("setup type=dark colour=red"), "colour");
        assert_eq!(f("setup type=push_pull elementary_exptime=1 n_transfers=2 rows_per_transfer=64"), "rows_per_transfer");
    }

    #[test]
    fn push_pull_program_loops() {
        let g = geom();
        let line = "setup type=push_pull elementary_exptime=1 n_transfers=3 rows_per_transfer=10 flush=0 shutter=1";
        let s = parse_setup(&parse_line(line).unwrap(), &g).unwrap();
        let prog = compile(&s.params, &g);
        let integrations =
            prog.trace().iter().filter(|&&i| matches!(prog.instructions()[i], SyncInstruction::IntegrateCtl { .. })).count();
        assert_eq!(integrations, 3);
    }

    #[test]
    fn bias_integrates_zero_ticks() {
        let g = geom();
        let s = parse_setup(&parse_line("setup type=bias exptime=5").unwrap(), &g).unwrap();
        let prog = compile(&s.params, &g);
        assert!(prog.instructions().contains(&SyncInstruction::IntegrateCtl { ticks: 0 }));
        assert!(!prog.instructions().iter().any(|i| matches!(i, SyncInstruction::ExtDeviceCtl { device: SHUTTER, .. })));
    }
}
