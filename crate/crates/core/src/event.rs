//! Asynchronous event streams and their polarity-split spatiotemporal voxel grids.
//!
//! Events are `(x, y, t, p)` tuples with integer-microsecond timestamps and
//! polarity in `{-1, +1}`. A window of events is binned into a dense
//! `2 x T x H x W` count tensor; channel 0 holds negative-polarity counts,
//! channel 1 positive. Binning uses exact integer arithmetic so that results
//! are bit-identical regardless of how the work is partitioned.

use crate::error::{Error, Result};
use std::io::{Read, Write};

/// A single camera event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    /// Pixel column, `0 <= x < width`.
    pub x: u16,
    /// Pixel row, `0 <= y < height`.
    pub y: u16,
    /// Timestamp in microseconds.
    pub t: i64,
    /// Polarity, strictly -1 or +1.
    pub p: i8,
}

impl Event {
    pub fn new(x: u16, y: u16, t: i64, p: i8) -> Result<Self> {
        if p != -1 && p != 1 {
            return Err(Error::InvalidArgument(format!(
                "polarity must be -1 or +1, got {p}"
            )));
        }
        Ok(Event { x, y, t, p })
    }
}

/// An ordered slice of events over an observation window `[t_a, t_b]`.
///
/// Construction sorts events by timestamp (stable) and rejects events whose
/// coordinates fall outside the sensor or whose polarity is not in `{-1,+1}`.
/// Events with timestamps outside the window are kept; `voxelize` ignores them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventWindow {
    events: Vec<Event>,
    pub t_a: i64,
    pub t_b: i64,
    pub width: u16,
    pub height: u16,
}

impl EventWindow {
    pub fn new(mut events: Vec<Event>, t_a: i64, t_b: i64, width: u16, height: u16) -> Result<Self> {
        if t_a >= t_b {
            return Err(Error::InvalidWindow(format!(
                "window start {t_a} must be strictly before end {t_b}"
            )));
        }
        for (i, e) in events.iter().enumerate() {
            if e.x >= width || e.y >= height {
                return Err(Error::InvalidArgument(format!(
                    "event {i} at ({}, {}) outside {width}x{height} sensor",
                    e.x, e.y
                )));
            }
            if e.p != -1 && e.p != 1 {
                return Err(Error::InvalidArgument(format!(
                    "event {i} has polarity {}, expected -1 or +1",
                    e.p
                )));
            }
        }
        events.sort_by_key(|e| e.t);
        Ok(EventWindow { events, t_a, t_b, width, height })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Dense `2 x T x H x W` event-count tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoxelGrid {
    pub bins: usize,
    pub width: u16,
    pub height: u16,
    data: Vec<u32>,
}

impl VoxelGrid {
    pub fn zeros(bins: usize, width: u16, height: u16) -> Self {
        let cells = 2 * bins * width as usize * height as usize;
        VoxelGrid { bins, width, height, data: vec![0; cells] }
    }

    #[inline]
    fn index(&self, channel: usize, bin: usize, y: usize, x: usize) -> usize {
        ((channel * self.bins + bin) * self.height as usize + y) * self.width as usize + x
    }

    /// Count at `(channel, bin, y, x)`; channel 0 = polarity -1, channel 1 = +1.
    pub fn get(&self, channel: usize, bin: usize, y: usize, x: usize) -> u32 {
        self.data[self.index(channel, bin, y, x)]
    }

    pub fn set(&mut self, channel: usize, bin: usize, y: usize, x: usize, value: u32) {
        let i = self.index(channel, bin, y, x);
        self.data[i] = value;
    }

    /// Raw cell storage, channel-major then bin, row, column.
    pub fn cells(&self) -> &[u32] {
        &self.data
    }

    /// Sum of all counts.
    pub fn total(&self) -> u64 {
        self.data.iter().map(|&c| c as u64).sum()
    }

    /// Merge another grid of identical geometry by elementwise addition.
    pub fn merge(&mut self, other: &VoxelGrid) -> Result<()> {
        if self.bins != other.bins || self.width != other.width || self.height != other.height {
            return Err(Error::InvalidArgument("voxel grid geometry mismatch".into()));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
        Ok(())
    }
}

/// Count of non-zero voxels in a grid, with optional corpus-level min-max scaling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResponseStrength {
    pub raw: u64,
    pub normalized: Option<f64>,
}

/// Bin a window of events into a voxel grid with `bins` temporal bins.
///
/// Each event with `t_a <= t <= t_b` increments exactly one cell; the bin
/// index is `floor((t - t_a) * T / (t_b - t_a))`, clamped to `T - 1` when
/// `t = t_b`. Events outside the window are ignored.
pub fn voxelize(window: &EventWindow, bins: usize) -> Result<VoxelGrid> {
    if bins == 0 {
        return Err(Error::InvalidArgument("bin count must be at least 1".into()));
    }
    let mut grid = VoxelGrid::zeros(bins, window.width, window.height);
    let span = (window.t_b - window.t_a) as i128;
    for e in window.events() {
        if e.t < window.t_a || e.t > window.t_b {
            continue;
        }
        let offset = (e.t - window.t_a) as i128;
        let mut bin = (offset * bins as i128 / span) as usize;
        if bin == bins {
            bin = bins - 1;
        }
        let channel = if e.p < 0 { 0 } else { 1 };
        let i = grid.index(channel, bin, e.y as usize, e.x as usize);
        grid.data[i] += 1;
    }
    Ok(grid)
}

/// Count the non-zero spatiotemporal positions of a grid.
pub fn response_strength(grid: &VoxelGrid) -> ResponseStrength {
    let raw = grid.data.iter().filter(|&&c| c > 0).count() as u64;
    ResponseStrength { raw, normalized: None }
}

/// Min-max-normalize raw strengths over a corpus. A degenerate corpus with
/// `s_max = s_min` maps every strength to 0. Input order is preserved.
pub fn normalize_strengths(strengths: &[ResponseStrength]) -> Result<Vec<ResponseStrength>> {
    if strengths.is_empty() {
        return Err(Error::InvalidArgument("cannot normalize an empty corpus".into()));
    }
    let s_min = strengths.iter().map(|s| s.raw).min().unwrap();
    let s_max = strengths.iter().map(|s| s.raw).max().unwrap();
    Ok(strengths
        .iter()
        .map(|s| {
            let normalized = if s_max == s_min {
                0.0
            } else {
                (s.raw - s_min) as f64 / (s_max - s_min) as f64
            };
            ResponseStrength { raw: s.raw, normalized: Some(normalized) }
        })
        .collect())
}

/// Number of equal-range strength bins.
pub const STRENGTH_BINS: usize = 7;

/// Map a normalized strength in `[0, 1]` to one of seven equal-range bins,
/// numbered 1..=7. Bin `i` covers `[(i-1)/7, i/7)`; the value 1.0 belongs to
/// bin 7.
pub fn strength_bin(normalized: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&normalized) {
        return Err(Error::InvalidArgument(format!(
            "normalized strength {normalized} outside [0, 1]"
        )));
    }
    for bin in 1..STRENGTH_BINS {
        if normalized < bin as f64 / STRENGTH_BINS as f64 {
            return Ok(bin);
        }
    }
    Ok(STRENGTH_BINS)
}

const EVENT_MAGIC: &[u8; 4] = b"EVT0";
const EVENT_RECORD_BYTES: usize = 13;

/// Write an event stream as a binary record stream: a 16-byte header
/// (magic "EVT0", u16 width, u16 height, u32 count, 4 reserved bytes) followed
/// by one little-endian `u16 x, u16 y, i64 t, i8 p` record per event.
pub fn write_events<W: Write>(out: &mut W, width: u16, height: u16, events: &[Event]) -> Result<()> {
    out.write_all(EVENT_MAGIC)?;
    out.write_all(&width.to_le_bytes())?;
    out.write_all(&height.to_le_bytes())?;
    let count = u32::try_from(events.len())
        .map_err(|_| Error::InvalidArgument("event stream too long for u32 count".into()))?;
    out.write_all(&count.to_le_bytes())?;
    out.write_all(&[0u8; 4])?;
    for e in events {
        out.write_all(&e.x.to_le_bytes())?;
        out.write_all(&e.y.to_le_bytes())?;
        out.write_all(&e.t.to_le_bytes())?;
        out.write_all(&e.p.to_le_bytes())?;
    }
    Ok(())
}

/// Read a binary event stream written by [`write_events`].
pub fn read_events<R: Read>(input: &mut R) -> Result<(u16, u16, Vec<Event>)> {
    let mut header = [0u8; 16];
    input.read_exact(&mut header).map_err(|_| Error::Format("truncated event header".into()))?;
    if &header[0..4] != EVENT_MAGIC {
        return Err(Error::Format("bad event stream magic, expected EVT0".into()));
    }
    let width = u16::from_le_bytes([header[4], header[5]]);
    let height = u16::from_le_bytes([header[6], header[7]]);
    let count = u32::from_le_bytes([header[8], header[9], header[10], header[11]]) as usize;
    let mut body = vec![0u8; count * EVENT_RECORD_BYTES];
    input
        .read_exact(&mut body)
        .map_err(|_| Error::Format(format!("truncated event stream, expected {count} records")))?;
    let mut events = Vec::with_capacity(count);
    for rec in body.chunks_exact(EVENT_RECORD_BYTES) {
        let x = u16::from_le_bytes([rec[0], rec[1]]);
        let y = u16::from_le_bytes([rec[2], rec[3]]);
        let t = i64::from_le_bytes(rec[4..12].try_into().unwrap());
        let p = rec[12] as i8;
        events.push(Event::new(x, y, t, p)?);
    }
    Ok((width, height, events))
}

#[derive(serde::Serialize, serde::Deserialize)]
struct EventStreamJson {
    width: u16,
    height: u16,
    events: Vec<(u16, u16, i64, i8)>,
}

/// Read an event stream from either the binary format or its JSON fixture
/// form `{"width": .., "height": .., "events": [[x, y, t, p], ..]}`.
pub fn read_events_auto(bytes: &[u8]) -> Result<(u16, u16, Vec<Event>)> {
    if bytes.starts_with(EVENT_MAGIC) {
        return read_events(&mut &bytes[..]);
    }
    let parsed: EventStreamJson = serde_json::from_slice(bytes)?;
    let events = parsed
        .events
        .into_iter()
        .map(|(x, y, t, p)| Event::new(x, y, t, p))
        .collect::<Result<Vec<_>>>()?;
    Ok((parsed.width, parsed.height, events))
}
