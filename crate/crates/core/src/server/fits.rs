//! Single-HDU FITS writer and reader for 16-bit frames.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use crate::detector::{ExposureType, NodeSelect, RawFrame};

pub const BLOCK: usize = 2880;
pub const CARD: usize = 80;
pub const BZERO: i32 = 32768;

#[derive(Debug, Clone, PartialEq)]
pub enum CardValue {
    Logical(bool),
    Int(i64),
    Real(f64),
    Text(String),
}

impl CardValue {
    fn render(&self) -> String {
        match self {
            CardValue::Logical(b) => format!("{:>20}", if *b { "T" } else { "F" }),
            CardValue::Int(i) => format!("{i:>20}"),
            CardValue::Real(x) => format!("{:>20}", format_real(*x)),
            CardValue::Text(s) => {
                let quoted = format!("'{:<8}'", s.replace('\'', "''"));
                format!("{quoted:<20}")
            }
        }
    }
}

fn format_real(x: f64) -> String {
    if x == x.trunc() && x.abs() < 1e15 {
        format!("{x:.1}")
    } else {
        let s = format!("{x:.12E}");
        // Rust prints `1.5E0`; FITS readers expect the exponent sign.
        match s.split_once('E') {
            Some((m, e)) if !e.starts_with('-') => format!("{m}E+{e}"),
            _ => s,
        }
    }
}

/// One 80-character header card.
pub fn card(key: &str, value: CardValue, comment: &str) -> String {
    assert!(key.len() <= 8, "FITS keyword `{key}` longer than 8 characters");
    let mut c = format!("{key:<8}= {}", value.render());
    if !comment.is_empty() {
        c.push_str(" / ");
        c.push_str(comment);
    }
    c.truncate(CARD);
    format!("{c:<80}")
}

fn commentary(key: &str, text: &str) -> String {
    let mut c = format!("{key:<8}{text}");
    c.truncate(CARD);
    format!("{c:<80}")
}

/// Contiguous runs of row indices, for compact header listing.
fn row_ranges(rows: &[usize]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for &r in rows {
        match out.last_mut() {
            Some((_, end)) if *end + 1 == r => *end = r,
            _ => out.push((r, r)),
        }
    }
    out
}

pub fn header_cards(frame: &RawFrame) -> Vec<String> {
    use CardValue::*;
    let m = &frame.meta;
    let p = &m.params;
    let date = m
        .date_obs
        .clone()
        .unwrap_or_else(|| chrono::Utc::now().format("%Y-%m-%dT%H:%M:%S%.3f").to_string());
    let node = match m.node {
        NodeSelect::All => "ALL".to_string(),
        NodeSelect::Single(n) => n.to_string(),
    };
    let mut cards = vec![
        card("SIMPLE", Logical(true), "conforms to FITS standard"),
        card("BITPIX", Int(16), "16-bit signed integers"),
        card("NAXIS", Int(2), ""),
        card("NAXIS1", Int(frame.width as i64), "binned columns"),
        card("NAXIS2", Int(frame.height as i64), "binned rows"),
        card("BZERO", Int(BZERO as i64), "unsigned 16-bit offset"),
        card("BSCALE", Int(1), ""),
        card("EXPTIME", Real(p.exptime), "[s] integration time"),
        card("DATE-OBS", Text(date), "UTC start of exposure"),
        card("DETECTOR", Text(m.detector.clone()), ""),
        card("IMAGETYP", Text(p.exposure_type.as_str().to_string()), ""),
        card("GAIN-IDX", Int(p.gain_index as i64), "gain setting index"),
        card("SPEED", Int(p.speed as i64), "readout speed index"),
        card("BINX", Int(p.bin_x as i64), ""),
        card("BINY", Int(p.bin_y as i64), ""),
        card("ROIX0", Int(p.roi.x0 as i64), "ROI origin column, unbinned"),
        card("ROIY0", Int(p.roi.y0 as i64), "ROI origin row, unbinned"),
        card("ROIW", Int(p.roi.width as i64), "ROI width, unbinned"),
        card("ROIH", Int(p.roi.height as i64), "ROI height, unbinned"),
        card("NODE", Text(node), "output node"),
        card("INCOMPLT", Logical(m.incomplete), "rows lost in transfer"),
        card("NSATUR", Int(m.saturated as i64), "saturated samples"),
        card("SEED", Text(m.seed.to_string()), "simulation seed"),
        card("FRAMEIDX", Int(m.frame_index as i64), "frame within sequence"),
        card("TSTART", Real(m.start), "[s] controller time"),
        card("TSTOP", Real(m.stop), "[s] controller time"),
    ];
    if p.exposure_type == ExposureType::Scan {
        cards.push(card("RAMPROWS", Int(m.ramp_rows as i64), "rows with partial dwell"));
    }
    if m.incomplete {
        cards.push(card("MISSROWS", Int(m.missing_rows.len() as i64), "zero-filled rows"));
        for (a, b) in row_ranges(&m.missing_rows) {
            cards.push(commentary("COMMENT", &format!("missing rows {a}-{b}")));
        }
    }
    cards.push(format!("{:<80}", "END"));
    cards
}

/// Serializes a frame into FITS bytes.
pub fn encode_fits(frame: &RawFrame) -> Vec<u8> {
    assert_eq!(frame.samples.len(), frame.width * frame.height, "sample count");
    let mut out: Vec<u8> = header_cards(frame).concat().into_bytes();
    out.resize(out.len().div_ceil(BLOCK) * BLOCK, b' ');
    let data_start = out.len();
    for &s in &frame.samples {
        // s - 32768 as two's complement is s with the top bit flipped.
        out.extend_from_slice(&(s ^ 0x8000).to_be_bytes());
    }
    let data_len = out.len() - data_start;
    out.resize(data_start + data_len.div_ceil(BLOCK) * BLOCK, 0);
    out
}

pub fn write_fits(frame: &RawFrame, path: impl AsRef<Path>) -> io::Result<()> {
    let path = path.as_ref();
    let bytes = encode_fits(frame);
    // Write to a sibling temp file then rename, so readers never see a
    // partial file.
    let tmp = path.with_extension("fits.part");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

#[derive(Debug, thiserror::Error)]
pub enum FitsError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("not a FITS file: {0}")]
    Format(String),
}

/// Parsed FITS image.
#[derive(Debug, Clone, PartialEq)]
pub struct FitsImage {
    pub cards: Vec<(String, String)>,
    pub width: usize,
    pub height: usize,
    pub samples: Vec<u16>,
}

impl FitsImage {
    pub fn raw(&self, key: &str) -> Option<&str> {
        self.cards.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn int(&self, key: &str) -> Option<i64> {
        self.raw(key)?.parse().ok()
    }

    pub fn real(&self, key: &str) -> Option<f64> {
        self.raw(key)?.replace('D', "E").parse().ok()
    }

    pub fn logical(&self, key: &str) -> Option<bool> {
        match self.raw(key)? {
            "T" => Some(true),
            "F" => Some(false),
            _ => None,
        }
    }

    pub fn text(&self, key: &str) -> Option<String> {
        let v = self.raw(key)?;
        let inner = v.strip_prefix('\'')?.rsplit_once('\'')?.0;
        Some(inner.replace("''", "'").trim_end().to_string())
    }
}

fn card_value(card: &str) -> Option<(String, String)> {
    let key = card[..8].trim_end().to_string();
    if &card[8..10] != "= " {
        return None;
    }
    let rest = card[10..].trim_start();
    let value = if rest.starts_with('\'') {
        // Quoted string; '' is an escaped quote.
        let bytes = rest.as_bytes();
        let mut i = 1;
        while i < bytes.len() {
            if bytes[i] == b'\'' {
                if bytes.get(i + 1) == Some(&b'\'') {
                    i += 2;
                    continue;
                }
                break;
            }
            i += 1;
        }
        rest[..(i + 1).min(rest.len())].to_string()
    } else {
        rest.split('/').next().unwrap_or("").trim().to_string()
    };
    Some((key, value))
}

pub fn decode_fits(bytes: &[u8]) -> Result<FitsImage, FitsError> {
    let bad = |m: &str| FitsError::Format(m.to_string());
    if bytes.len() % BLOCK != 0 || bytes.is_empty() {
        return Err(bad("length is not a multiple of 2880"));
    }
    let mut cards = Vec::new();
    let mut end = None;
    for (i, chunk) in bytes.chunks(CARD).enumerate() {
        let c = std::str::from_utf8(chunk).map_err(|_| bad("non-ASCII header"))?;
        if c.starts_with("END") && c[3..].trim().is_empty() {
            end = Some(i);
            break;
        }
        if let Some(kv) = card_value(c) {
            cards.push(kv);
        }
    }
    let end = end.ok_or_else(|| bad("no END card"))?;
    let header_len = ((end + 1) * CARD).div_ceil(BLOCK) * BLOCK;
    let mut img = FitsImage { cards, width: 0, height: 0, samples: Vec::new() };
    if img.logical("SIMPLE") != Some(true) || img.int("BITPIX") != Some(16) || img.int("NAXIS") != Some(2) {
        return Err(bad("expected SIMPLE=T, BITPIX=16, NAXIS=2"));
    }
    img.width = img.int("NAXIS1").ok_or_else(|| bad("NAXIS1"))? as usize;
    img.height = img.int("NAXIS2").ok_or_else(|| bad("NAXIS2"))? as usize;
    let bzero = img.real("BZERO").unwrap_or(0.0);
    let bscale = img.real("BSCALE").unwrap_or(1.0);
    let n = img.width * img.height;
    let data = bytes.get(header_len..header_len + 2 * n).ok_or_else(|| bad("data segment truncated"))?;
    img.samples = data
        .chunks_exact(2)
        .map(|b| {
            let v = i16::from_be_bytes([b[0], b[1]]) as f64 * bscale + bzero;
            v.clamp(0.0, u16::MAX as f64) as u16
        })
        .collect();
    Ok(img)
}

pub fn read_fits(path: impl AsRef<Path>) -> Result<FitsImage, FitsError> {
    decode_fits(&fs::read(path)?)
}
