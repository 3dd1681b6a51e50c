//! Reassembly of video-data chunks into frames, and preview tiles.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use crate::controller::{ReadoutInfo, VideoHeader, VIDEO_CHUNK};

/// A frame put back together from its chunks.
#[derive(Debug, Clone, PartialEq)]
pub struct Assembled {
    pub info: ReadoutInfo,
    pub samples: Vec<u16>,
    /// Rows zero-filled because a chunk touching them never arrived.
    pub missing_rows: Vec<usize>,
}

impl Assembled {
    pub fn incomplete(&self) -> bool {
        !self.missing_rows.is_empty()
    }
}

struct Pending {
    width: usize,
    height: usize,
    bytes: Vec<u8>,
    got: Vec<bool>,
    info: Option<ReadoutInfo>,
    deadline: Option<Instant>,
    touched: Instant,
}

impl Pending {
    fn new(width: usize, height: usize, chunks: usize, now: Instant) -> Self {
        Self {
            width,
            height,
            bytes: vec![0; width * height * 2],
            got: vec![false; chunks],
            info: None,
            deadline: None,
            touched: now,
        }
    }

    fn complete(&self) -> bool {
        self.got.iter().all(|&g| g)
    }

    fn finish(self) -> Assembled {
        let info = self.info.expect("finish needs readout info");
        let mut samples: Vec<u16> = self.bytes.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect();
        let mut missing = std::collections::BTreeSet::new();
        let total = samples.len();
        for (c, _) in self.got.iter().enumerate().filter(|(_, &g)| !g) {
            let first = c * VIDEO_CHUNK / 2;
            let last = ((c + 1) * VIDEO_CHUNK / 2).min(total);
            if first >= last || self.width == 0 {
                continue;
            }
            for row in first / self.width..=(last - 1) / self.width {
                missing.insert(row);
            }
        }
        for &row in &missing {
            samples[row * self.width..(row + 1) * self.width].fill(0);
        }
        debug_assert!(missing.iter().all(|&r| r < self.height));
        Assembled { info, samples, missing_rows: missing.into_iter().collect() }
    }
}

/// Collects chunks per `(run, frame)`. A frame is released once every chunk
/// has arrived after its readout report, or when the grace period after the
/// report runs out.
pub struct Assembler {
    pending: BTreeMap<(u32, u32), Pending>,
    grace: Duration,
    /// Chunks of frames never reported are dropped after this long.
    orphan_timeout: Duration,
    accepting: bool,
}

impl Assembler {
    pub fn new(grace: Duration) -> Self {
        Self { pending: BTreeMap::new(), grace, orphan_timeout: Duration::from_secs(30), accepting: true }
    }

    /// Starts accepting chunks of a new process.
    pub fn begin(&mut self) {
        self.pending.clear();
        self.accepting = true;
    }

    /// Drops everything in flight and ignores chunks until [`begin`](Self::begin).
    pub fn discard(&mut self) {
        self.pending.clear();
        self.accepting = false;
    }

    pub fn in_flight(&self) -> usize {
        self.pending.len()
    }

    /// Chunks received and expected for the frame being read.
    pub fn progress(&self) -> Option<(usize, usize)> {
        self.pending.values().next().map(|p| (p.got.iter().filter(|&&g| g).count(), p.got.len()))
    }

    pub fn on_video(&mut self, header: &VideoHeader, data: &[u8], now: Instant) -> Option<Assembled> {
        if !self.accepting {
            return None;
        }
        let (w, h) = (header.width as usize, header.height as usize);
        let key = (header.run, header.frame);
        let p = self.pending.entry(key).or_insert_with(|| Pending::new(w, h, header.chunks as usize, now));
        if p.width != w || p.height != h || p.got.len() != header.chunks as usize {
            log::warn!(target: "assembler", "chunk {key:?} disagrees with frame shape; dropped");
            return None;
        }
        let c = header.chunk as usize;
        let start = c * VIDEO_CHUNK;
        let expected = VIDEO_CHUNK.min(p.bytes.len().saturating_sub(start));
        if data.len() != expected || p.got[c] {
            return None;
        }
        p.bytes[start..start + expected].copy_from_slice(data);
        p.got[c] = true;
        p.touched = now;
        if p.info.is_some() && p.complete() {
            return self.pending.remove(&key).map(Pending::finish);
        }
        None
    }

    /// Records the controller's readout report; returns the frame at once if
    /// every chunk is already here.
    pub fn on_readout(&mut self, info: ReadoutInfo, now: Instant) -> Option<Assembled> {
        if !self.accepting {
            return None;
        }
        let key = (info.run, info.frame);
        let p = self
            .pending
            .entry(key)
            .or_insert_with(|| Pending::new(info.width, info.height, info.chunks, now));
        p.deadline = Some(now + self.grace);
        p.info = Some(info);
        if p.complete() {
            return self.pending.remove(&key).map(Pending::finish);
        }
        None
    }

    /// Releases frames whose grace period has run out.
    pub fn poll(&mut self, now: Instant) -> Vec<Assembled> {
        let expired: Vec<_> = self
            .pending
            .iter()
            .filter(|(_, p)| match p.deadline {
                Some(d) => now >= d,
                None => now.duration_since(p.touched) >= self.orphan_timeout,
            })
            .map(|(k, _)| *k)
            .collect();
        let mut out = Vec::new();
        for k in expired {
            let p = self.pending.remove(&k).unwrap();
            if p.info.is_some() {
                out.push(p.finish());
            }
        }
        out
    }
}

pub const PREVIEW_FACTOR: usize = 8;
/// Preview tile edge, in downsampled pixels.
pub const TILE: usize = 64;

/// Block-mean downsampling; edge blocks average the pixels they cover.
/// Means round half up.
pub fn downsample(samples: &[u16], width: usize, height: usize, factor: usize) -> (Vec<u16>, usize, usize) {
    let (dw, dh) = (width.div_ceil(factor), height.div_ceil(factor));
    let mut out = Vec::with_capacity(dw * dh);
    for by in 0..dh {
        for bx in 0..dw {
            let (mut sum, mut n) = (0u64, 0u64);
            for y in by * factor..((by + 1) * factor).min(height) {
                for x in bx * factor..((bx + 1) * factor).min(width) {
                    sum += samples[y * width + x] as u64;
                    n += 1;
                }
            }
            out.push(((2 * sum + n) / (2 * n)) as u16);
        }
    }
    (out, dw, dh)
}

/// One preview tile of a downsampled frame.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PreviewTile {
    pub frame: usize,
    pub factor: usize,
    /// Tile origin in downsampled pixels.
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
    /// Downsampled image size.
    pub image_width: usize,
    pub image_height: usize,
    pub data: Vec<u16>,
}

pub fn preview_tiles(frame: usize, samples: &[u16], width: usize, height: usize) -> Vec<PreviewTile> {
    let (small, dw, dh) = downsample(samples, width, height, PREVIEW_FACTOR);
    let mut tiles = Vec::new();
    for ty in (0..dh).step_by(TILE) {
        for tx in (0..dw).step_by(TILE) {
            let (tw, th) = (TILE.min(dw - tx), TILE.min(dh - ty));
            let mut data = Vec::with_capacity(tw * th);
            for y in ty..ty + th {
                data.extend_from_slice(&small[y * dw + tx..y * dw + tx + tw]);
            }
            tiles.push(PreviewTile {
                frame,
                factor: PREVIEW_FACTOR,
                x: tx,
                y: ty,
                width: tw,
                height: th,
                image_width: dw,
                image_height: dh,
                data,
            });
        }
    }
    tiles
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::video_messages;

    fn info(w: usize, h: usize) -> ReadoutInfo {
        ReadoutInfo {
            run: 0,
            frame: 0,
            width: w,
            height: h,
            chunks: crate::controller::video_chunks(w, h),
            saturated: 0,
            start: 0.0,
            stop: 1.0,
            ramp_rows: 0,
        }
    }

    fn frame(w: usize, h: usize) -> Vec<u16> {
        (0..w * h).map(|i| (i % 60000) as u16 + 1).collect()
    }

    #[test]
    fn complete_stream_is_bit_exact() {
        let (w, h) = (300, 40);
        let samples = frame(w, h);
        let now = Instant::now();
        let mut a = Assembler::new(Duration::from_secs(1));
        for m in video_messages(0, 0, w, h, &samples) {
            let (hd, data) = VideoHeader::decode(&m).unwrap();
            assert!(a.on_video(&hd, data, now).is_none());
        }
        let f = a.on_readout(info(w, h), now).unwrap();
        assert_eq!(f.samples, samples);
        assert!(!f.incomplete());
    }

    #[test]
    fn dropped_chunk_zero_fills_its_rows() {
        let (w, h) = (300, 40);
        let samples = frame(w, h);
        let now = Instant::now();
        let mut a = Assembler::new(Duration::from_millis(10));
        let msgs = video_messages(0, 0, w, h, &samples);
        for (i, m) in msgs.iter().enumerate() {
            if i == 3 {
                continue;
            }
            let (hd, data) = VideoHeader::decode(m).unwrap();
            a.on_video(&hd, data, now);
        }
        assert!(a.on_readout(info(w, h), now).is_none());
        assert!(a.poll(now).is_empty());
        let f = a.poll(now + Duration::from_millis(20)).pop().unwrap();
        // Chunk 3 holds samples 2178..2904, rows 7..=9 of a 300-wide frame.
        assert_eq!(f.missing_rows, vec![7, 8, 9]);
        for r in 0..h {
            let row = &f.samples[r * w..(r + 1) * w];
            if f.missing_rows.contains(&r) {
                assert!(row.iter().all(|&s| s == 0));
            } else {
                assert_eq!(row, &samples[r * w..(r + 1) * w]);
            }
        }
    }

    #[test]
    fn discard_ignores_late_chunks() {
        let (w, h) = (10, 10);
        let now = Instant::now();
        let mut a = Assembler::new(Duration::from_secs(1));
        let msgs = video_messages(0, 0, w, h, &frame(w, h));
        a.discard();
        let (hd, data) = VideoHeader::decode(&msgs[0]).unwrap();
        assert!(a.on_video(&hd, data, now).is_none());
        assert!(a.on_readout(info(w, h), now).is_none());
        assert_eq!(a.in_flight(), 0);
        a.begin();
        assert!(a.on_video(&hd, data, now).is_none());
        assert!(a.on_readout(info(w, h), now).is_some());
    }

    #[test]
    fn downsample_means() {
        let s: Vec<u16> = (0..16 * 9).map(|i| i as u16).collect();
        let (d, dw, dh) = downsample(&s, 16, 9, 8);
        assert_eq!((dw, dh), (2, 2));
        // Block (0,0): rows 0..8, cols 0..8 -> mean of r*16+c = 56 + 3.5.
        assert_eq!(d[0], 60);
        // Bottom edge block covers row 8 only: 128..136, mean 131.5 -> 132.
        assert_eq!(d[2], 132);
    }

    #[test]
    fn tiles_cover_the_image() {
        let (w, h) = (1100, 600);
        let s = frame(w, h);
        let tiles = preview_tiles(0, &s, w, h);
        // 138 x 75 downsampled: 3 x 2 tiles.
        assert_eq!(tiles.len(), 6);
        let area: usize = tiles.iter().map(|t| t.width * t.height).sum();
        assert_eq!(area, 138 * 75);
    }
}
