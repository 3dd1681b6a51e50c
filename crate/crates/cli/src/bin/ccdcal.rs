//! Offline calibration: photon transfer, noise spectrum, transfer curve.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ccdaq::calibration::{self, report, CalibrationError};
use ccdaq::server::fits::{read_fits, FitsImage};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "ccdcal", version, about = "Detector calibration from FITS frames")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Output {
    /// Write the key-value report here instead of standard output.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    /// Write the plot table as CSV.
    #[arg(long, global = true)]
    csv: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Gain and read noise from flat pairs and bias frames.
    Ptc {
        #[arg(long, num_args = 1.., required = true)]
        bias: Vec<PathBuf>,
        /// Flat frames, taken as consecutive pairs at matched illumination.
        #[arg(long, num_args = 1.., required = true)]
        flat: Vec<PathBuf>,
        #[command(flatten)]
        out: Output,
    },
    /// Noise spectrum and optimal filter of a sample stream (FITS or text).
    Psd {
        input: PathBuf,
        #[arg(long, default_value_t = 256)]
        segment: usize,
        #[arg(long, default_value_t = calibration::DEFAULT_TAPS)]
        taps: usize,
        #[command(flatten)]
        out: Output,
    },
    /// Transfer curve and linearizing correction from an exposure ramp;
    /// exposure times come from EXPTIME.
    Linearity {
        #[arg(required = true)]
        frames: Vec<PathBuf>,
        #[command(flatten)]
        out: Output,
    },
}

enum Failure {
    Input(String),
    Analysis(CalibrationError),
}

impl From<CalibrationError> for Failure {
    fn from(e: CalibrationError) -> Self {
        Failure::Analysis(e)
    }
}

fn load(p: &Path) -> Result<FitsImage, Failure> {
    read_fits(p).map_err(|e| Failure::Input(format!("{}: {e}", p.display())))
}

/// Whitespace or comma separated numbers; `#` starts a comment.
fn read_stream(p: &Path) -> Result<Vec<f64>, Failure> {
    if matches!(p.extension().and_then(|e| e.to_str()), Some("fits" | "fit" | "fts")) {
        return Ok(load(p)?.samples.iter().map(|&s| s as f64).collect());
    }
    let text = std::fs::read_to_string(p).map_err(|e| Failure::Input(format!("{}: {e}", p.display())))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("");
        for tok in line.split(|c: char| c.is_whitespace() || c == ',').filter(|t| !t.is_empty()) {
            let v = tok.parse::<f64>().map_err(|_| Failure::Input(format!("{}:{}: not a number: {tok}", p.display(), n + 1)))?;
            out.push(v);
        }
    }
    Ok(out)
}

fn emit(out: &Output, report: String, csv: String) -> Result<(), Failure> {
    let write = |p: &PathBuf, s: &str| std::fs::write(p, s).map_err(|e| Failure::Input(format!("{}: {e}", p.display())));
    match &out.report {
        Some(p) => write(p, &report)?,
        None => print!("{report}"),
    }
    if let Some(p) = &out.csv {
        write(p, &csv)?;
    }
    Ok(())
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Ptc { bias, flat, out } => {
            if flat.len() % 2 != 0 {
                return Err(Failure::Input(format!("{} flat frames; they must come in pairs", flat.len())));
            }
            let bias = bias.iter().map(|p| load(p)).collect::<Result<Vec<_>, _>>()?;
            let flats = flat.iter().map(|p| load(p)).collect::<Result<Vec<_>, _>>()?;
            let mut it = flats.into_iter();
            let mut pairs = Vec::new();
            while let (Some(a), Some(b)) = (it.next(), it.next()) {
                pairs.push((a, b));
            }
            let r = calibration::photon_transfer(&pairs, &bias)?;
            emit(&out, report::ptc_report(&r), report::ptc_csv(&r))
        }
        Cmd::Psd { input, segment, taps, out } => {
            let s = read_stream(&input)?;
            let p = calibration::noise_spectrum_with(&s, segment, taps)?;
            emit(&out, report::psd_report(&p), report::psd_csv(&p))
        }
        Cmd::Linearity { frames, out } => {
            let mut ramp = Vec::new();
            for p in &frames {
                let f = load(p)?;
                let t = f.real("EXPTIME").ok_or_else(|| Failure::Input(format!("{}: no EXPTIME", p.display())))?;
                ramp.push((t, f));
            }
            let c = calibration::fit_transfer_curve(&ramp)?;
            emit(&out, report::linearity_report(&c), report::linearity_csv(&c))
        }
    }
}

fn main() -> ExitCode {
    ccdaq_cli::init_logging();
    match run(Cli::parse().cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(m)) => {
            eprintln!("ccdcal: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Analysis(e)) => {
            eprintln!("ccdcal: {}: {e}", e.code());
            ExitCode::from(1)
        }
    }
}
