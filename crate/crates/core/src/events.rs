//! Event records, event streams, flux sequences and frame volumes.
//!
//! Timestamps are integer microseconds. Streams are kept sorted by
//! `(t, y, x, p)` so that every consumer sees a deterministic order.

use std::cmp::Ordering;

use ndarray::{Array3, Array4, ArrayView2, Axis};

use crate::error::{Error, Result};

/// A single `(t, x, y, p)` event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventRecord {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub p: i8,
}

impl EventRecord {
    pub fn new(t: u64, x: u16, y: u16, p: i8) -> Self {
        Self { t, x, y, p }
    }

    /// Stream ordering: time first, ties broken by row, column, polarity.
    pub fn order_key(&self) -> (u64, u16, u16, i8) {
        (self.t, self.y, self.x, self.p)
    }

    fn validate(&self, width: u16, height: u16) -> Result<()> {
        if self.x >= width || self.y >= height {
            return Err(Error::OutOfBounds {
                x: self.x.into(),
                y: self.y.into(),
                width,
                height,
            });
        }
        if self.p != 1 && self.p != -1 {
            return Err(Error::BadPolarity(self.p.into()));
        }
        Ok(())
    }
}

impl PartialOrd for EventRecord {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for EventRecord {
    fn cmp(&self, other: &Self) -> Ordering {
        self.order_key().cmp(&other.order_key())
    }
}

/// An ordered, validated collection of events on a `width x height` sensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    records: Vec<EventRecord>,
    width: u16,
    height: u16,
    dt: u64,
}

impl EventStream {
    /// Validates every record and sorts the result. Alias of [`sort_and_validate`].
    pub fn new(width: u16, height: u16, dt: u64, records: Vec<EventRecord>) -> Result<Self> {
        sort_and_validate(width, height, dt, records)
    }

    pub fn empty(width: u16, height: u16, dt: u64) -> Self {
        Self {
            records: Vec::new(),
            width,
            height,
            dt,
        }
    }

    /// Caller guarantees `records` are valid and sorted (e.g. a subsequence of a valid stream).
    pub(crate) fn from_sorted(width: u16, height: u16, dt: u64, records: Vec<EventRecord>) -> Self {
        debug_assert!(records.windows(2).all(|w| w[0] <= w[1]));
        Self {
            records,
            width,
            height,
            dt,
        }
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<EventRecord> {
        self.records
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    /// Temporal resolution in microseconds per simulation step.
    pub fn dt(&self) -> u64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, EventRecord> {
        self.records.iter()
    }

    /// Keeps the records selected by `keep`, preserving order.
    pub fn retain_by<F: FnMut(usize, &EventRecord) -> bool>(&self, mut keep: F) -> Self {
        let records = self
            .records
            .iter()
            .enumerate()
            .filter(|(i, r)| keep(*i, r))
            .map(|(_, r)| *r)
            .collect();
        Self::from_sorted(self.width, self.height, self.dt, records)
    }

    /// Fails with `UnsortedStream` at the first out-of-order record.
    pub fn check_sorted(&self) -> Result<()> {
        match self.records.windows(2).position(|w| w[0] > w[1]) {
            Some(i) => Err(Error::UnsortedStream(i + 1)),
            None => Ok(()),
        }
    }
}

impl<'a> IntoIterator for &'a EventStream {
    type Item = &'a EventRecord;
    type IntoIter = std::slice::Iter<'a, EventRecord>;

    fn into_iter(self) -> Self::IntoIter {
        self.records.iter()
    }
}

/// Validates every record against the sensor size and sorts by `(t, y, x, p)`.
pub fn sort_and_validate(
    width: u16,
    height: u16,
    dt: u64,
    mut records: Vec<EventRecord>,
) -> Result<EventStream> {
    for r in &records {
        r.validate(width, height)?;
    }
    records.sort_unstable();
    Ok(EventStream {
        records,
        width,
        height,
        dt,
    })
}

/// Mean photons per pixel per interval on a fixed grid, stored as `[N, X, Y]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FluxSequence {
    frames: Array3<f64>,
    t0: u64,
    dt: u64,
}

impl FluxSequence {
    pub fn new(frames: Array3<f64>, t0: u64, dt: u64) -> Result<Self> {
        let (n, w, h) = frames.dim();
        if n == 0 || w == 0 || h == 0 {
            return Err(Error::DimensionMismatch(format!(
                "flux sequence must be non-empty, got [{n}, {w}, {h}]"
            )));
        }
        if w > u16::MAX as usize || h > u16::MAX as usize {
            return Err(Error::DimensionMismatch(format!(
                "sensor {w}x{h} exceeds 16-bit addressing"
            )));
        }
        if dt == 0 {
            return Err(Error::InvalidArgument("flux interval dt must be >= 1 us".into()));
        }
        if let Some(&bad) = frames.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::NegativeFlux(bad));
        }
        Ok(Self { frames, t0, dt })
    }

    /// Builds a sequence that repeats one frame `n` times.
    pub fn constant(frame: ArrayView2<'_, f64>, n: usize, t0: u64, dt: u64) -> Result<Self> {
        let frames = frame
            .insert_axis(Axis(0))
            .broadcast((n, frame.dim().0, frame.dim().1))
            .ok_or_else(|| Error::DimensionMismatch("cannot broadcast frame".into()))?
            .to_owned();
        Self::new(frames, t0, dt)
    }

    pub fn frames(&self) -> &Array3<f64> {
        &self.frames
    }

    pub fn into_frames(self) -> Array3<f64> {
        self.frames
    }

    pub fn frame(&self, j: usize) -> ArrayView2<'_, f64> {
        self.frames.index_axis(Axis(0), j)
    }

    pub fn n_frames(&self) -> usize {
        self.frames.dim().0
    }

    pub fn width(&self) -> u16 {
        self.frames.dim().1 as u16
    }

    pub fn height(&self) -> u16 {
        self.frames.dim().2 as u16
    }

    pub fn t0(&self) -> u64 {
        self.t0
    }

    pub fn dt(&self) -> u64 {
        self.dt
    }

    /// Timestamp of frame `j`: `t0 + j * dt`.
    pub fn time(&self, j: usize) -> u64 {
        self.t0 + j as u64 * self.dt
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameMode {
    /// Last polarity per (bin, pixel), values in {-1, 0, +1}.
    Polarity,
    /// Sum of polarities per (bin, pixel).
    Count,
}

/// Event frames laid out as `[N, C, X, Y]` with `C = 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventFrameVolume {
    data: Array4<i32>,
    mode: FrameMode,
    t0: u64,
    dt_bin: u64,
}

impl EventFrameVolume {
    pub fn new(data: Array4<i32>, mode: FrameMode, t0: u64, dt_bin: u64) -> Result<Self> {
        let (_, c, w, h) = data.dim();
        if c != 1 {
            return Err(Error::DimensionMismatch(format!("expected one channel, got {c}")));
        }
        if w == 0 || h == 0 || w > u16::MAX as usize || h > u16::MAX as usize {
            return Err(Error::DimensionMismatch(format!("bad spatial size {w}x{h}")));
        }
        if dt_bin == 0 {
            return Err(Error::InvalidArgument("dt_bin must be >= 1 us".into()));
        }
        if mode == FrameMode::Polarity {
            if let Some(&bad) = data.iter().find(|v| !(-1..=1).contains(*v)) {
                return Err(Error::BadPolarity(bad.into()));
            }
        }
        Ok(Self {
            data,
            mode,
            t0,
            dt_bin,
        })
    }

    pub fn zeros(n_bins: usize, width: u16, height: u16, mode: FrameMode, t0: u64, dt_bin: u64) -> Self {
        Self {
            data: Array4::zeros((n_bins, 1, width as usize, height as usize)),
            mode,
            t0,
            dt_bin: dt_bin.max(1),
        }
    }

    pub fn data(&self) -> &Array4<i32> {
        &self.data
    }

    pub fn mode(&self) -> FrameMode {
        self.mode
    }

    pub fn t0(&self) -> u64 {
        self.t0
    }

    pub fn dt_bin(&self) -> u64 {
        self.dt_bin
    }

    pub fn n_bins(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> u16 {
        self.data.dim().2 as u16
    }

    pub fn height(&self) -> u16 {
        self.data.dim().3 as u16
    }

    pub fn nonzero_count(&self) -> usize {
        self.data.iter().filter(|v| **v != 0).count()
    }
}

/// Explicit time binning for [`events_to_frames_binned`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameBinning {
    pub t0: u64,
    pub dt_bin: u64,
    pub n_bins: usize,
}

impl FrameBinning {
    /// Bin index of `t`; the last bin absorbs everything past the grid.
    fn bin_of(&self, t: u64) -> usize {
        (((t - self.t0) / self.dt_bin) as usize).min(self.n_bins - 1)
    }
}

/// Splits `[t_first, t_last + dt)` into `n_bins` equal bins and accumulates events.
///
/// An event at `t_last` is taken to occupy one step of the stream's `dt`, so
/// a stream whose events sit on a regular `dt` grid spanning exactly
/// `n_bins` steps maps each step onto one bin.
pub fn events_to_frames(stream: &EventStream, n_bins: usize, mode: FrameMode) -> Result<EventFrameVolume> {
    if n_bins == 0 {
        return Err(Error::InvalidArgument("n_bins must be >= 1".into()));
    }
    let (Some(first), Some(last)) = (stream.records.first(), stream.records.last()) else {
        return Ok(EventFrameVolume::zeros(
            n_bins,
            stream.width,
            stream.height,
            mode,
            0,
            stream.dt.max(1),
        ));
    };
    let span = last.t - first.t + stream.dt;
    let dt_bin = span / n_bins as u64;
    if dt_bin == 0 {
        if n_bins > 1 {
            return Err(Error::EmptyStream(n_bins));
        }
        // single bin over a zero-length span
        return events_to_frames_binned(
            stream,
            FrameBinning {
                t0: first.t,
                dt_bin: 1,
                n_bins,
            },
            mode,
        );
    }
    events_to_frames_binned(
        stream,
        FrameBinning {
            t0: first.t,
            dt_bin,
            n_bins,
        },
        mode,
    )
}

/// Accumulates events into the given binning. Events before `t0` are rejected.
pub fn events_to_frames_binned(
    stream: &EventStream,
    binning: FrameBinning,
    mode: FrameMode,
) -> Result<EventFrameVolume> {
    if binning.n_bins == 0 || binning.dt_bin == 0 {
        return Err(Error::InvalidArgument("binning needs n_bins >= 1 and dt_bin >= 1".into()));
    }
    let mut volume = EventFrameVolume::zeros(
        binning.n_bins,
        stream.width,
        stream.height,
        mode,
        binning.t0,
        binning.dt_bin,
    );
    for r in &stream.records {
        if r.t < binning.t0 {
            return Err(Error::InvalidArgument(format!(
                "event at t={} precedes binning origin t0={}",
                r.t, binning.t0
            )));
        }
        let cell = &mut volume.data[[binning.bin_of(r.t), 0, r.x as usize, r.y as usize]];
        match mode {
            FrameMode::Polarity => *cell = r.p.into(),
            FrameMode::Count => *cell += i32::from(r.p),
        }
    }
    Ok(volume)
}

/// One event per nonzero cell of a polarity volume, stamped at its bin start.
pub fn frames_to_events(volume: &EventFrameVolume) -> Result<EventStream> {
    if volume.mode != FrameMode::Polarity {
        return Err(Error::NotPolarityMode);
    }
    let mut records = Vec::with_capacity(volume.nonzero_count());
    for ((n, _, x, y), &v) in volume.data.indexed_iter() {
        if v != 0 {
            records.push(EventRecord::new(
                volume.t0 + n as u64 * volume.dt_bin,
                x as u16,
                y as u16,
                v as i8,
            ));
        }
    }
    sort_and_validate(volume.width(), volume.height(), volume.dt_bin, records)
}
