//! Event-stream denoising filters, in stream form and frame form.

use ndarray::{Array3, Array4, ArrayView4};
use serde::{Deserialize, Serialize};

use crate::diff::soft_indicator;
use crate::error::{Error, Result};
use crate::events::{EventFrameVolume, EventRecord, EventStream, FrameMode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterParams {
    /// BAF support window (us).
    pub baf_dt: u64,
    pub baf_radius: u32,
    pub ief_t_minus: u64,
    pub ief_t_plus: u64,
    pub ief_polarity_agnostic: bool,
    /// YNoise half-window (us), symmetric around each event.
    pub ynoise_dt: u64,
    pub ynoise_radius: u32,
    pub ynoise_coarse_min: u32,
    pub ynoise_hot_max: u32,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            baf_dt: 2000,
            baf_radius: 1,
            ief_t_minus: 1000,
            ief_t_plus: 1000,
            ief_polarity_agnostic: false,
            ynoise_dt: 10_000,
            ynoise_radius: 1,
            ynoise_coarse_min: 2,
            ynoise_hot_max: 10,
        }
    }
}

impl FilterParams {
    pub fn validate(&self) -> Result<()> {
        if self.baf_radius < 1 || self.ynoise_radius < 1 {
            return Err(Error::InvariantViolation("filter radii must be >= 1".into()));
        }
        if self.ynoise_coarse_min < 1 || self.ynoise_hot_max < 1 {
            return Err(Error::InvariantViolation("YNoise counts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Which polarities [`filter_polarity`] keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolaritySelection {
    Positive,
    Negative,
    Both,
}

impl PolaritySelection {
    pub fn accepts(self, p: i8) -> bool {
        match self {
            Self::Positive => p > 0,
            Self::Negative => p < 0,
            Self::Both => true,
        }
    }
}

pub fn filter_polarity(stream: &EventStream, keep: PolaritySelection) -> EventStream {
    stream.retain_by(|_, r| keep.accepts(r.p))
}

/// Last-event timestamps per pixel and polarity; channel 0 negative, 1 positive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestampMap {
    data: Array3<Option<u64>>,
}

impl TimestampMap {
    pub fn new(width: u16, height: u16) -> Self {
        Self {
            data: Array3::from_elem((width as usize, height as usize, 2), None),
        }
    }

    pub fn get(&self, x: usize, y: usize, p: i8) -> Option<u64> {
        self.data[[x, y, usize::from(p > 0)]]
    }

    /// Most recent timestamp at the pixel across both polarities.
    pub fn latest(&self, x: usize, y: usize) -> Option<u64> {
        self.get(x, y, -1).max(self.get(x, y, 1))
    }

    pub fn record(&mut self, r: &EventRecord) {
        self.data[[r.x as usize, r.y as usize, usize::from(r.p > 0)]] = Some(r.t);
    }
}

fn neighborhood(x: usize, y: usize, radius: u32, w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
    let r = radius as usize;
    let xs = x.saturating_sub(r)..=(x + r).min(w - 1);
    xs.flat_map(move |nx| (y.saturating_sub(r)..=(y + r).min(h - 1)).map(move |ny| (nx, ny)))
}

/// Background-activity filter: keeps events supported by a recent prior event
/// at a neighboring pixel.
pub fn filter_baf(stream: &EventStream, params: &FilterParams) -> Result<EventStream> {
    params.validate()?;
    stream.check_sorted()?;
    let (w, h) = (stream.width() as usize, stream.height() as usize);
    let mut map = TimestampMap::new(stream.width(), stream.height());
    let mut keep = Vec::with_capacity(stream.len());
    for r in stream {
        let (x, y) = (r.x as usize, r.y as usize);
        let since = r.t.saturating_sub(params.baf_dt);
        let supported = neighborhood(x, y, params.baf_radius, w, h)
            .filter(|&p| p != (x, y))
            .any(|(nx, ny)| map.latest(nx, ny).is_some_and(|t| t >= since));
        keep.push(supported);
        map.record(r);
    }
    Ok(stream.retain_by(|i, _| keep[i]))
}

/// Per-pixel (and per-polarity unless agnostic) sorted timestamp lists.
fn pixel_times(stream: &EventStream, split_polarity: bool) -> Vec<Vec<u64>> {
    let h = stream.height() as usize;
    let channels = if split_polarity { 2 } else { 1 };
    let mut lists = vec![Vec::new(); stream.width() as usize * h * channels];
    for r in stream {
        lists[slot(r, h, split_polarity)].push(r.t);
    }
    lists
}

fn slot(r: &EventRecord, h: usize, split_polarity: bool) -> usize {
    let pixel = r.x as usize * h + r.y as usize;
    if split_polarity {
        2 * pixel + usize::from(r.p > 0)
    } else {
        pixel
    }
}

/// Number of entries of the sorted `times` inside `[lo, hi]`.
fn count_in(times: &[u64], lo: u64, hi: u64) -> usize {
    times.partition_point(|&t| t <= hi) - times.partition_point(|&t| t < lo)
}

/// Inter-event filter: keeps events with a companion at the same pixel within
/// `t_minus` before or `t_plus` after, excluding identical timestamps.
pub fn filter_ief(stream: &EventStream, params: &FilterParams) -> Result<EventStream> {
    params.validate()?;
    stream.check_sorted()?;
    let split = !params.ief_polarity_agnostic;
    let h = stream.height() as usize;
    let lists = pixel_times(stream, split);
    Ok(stream.retain_by(|_, r| {
        let times = &lists[slot(r, h, split)];
        let before = r.t > 0 && count_in(times, r.t.saturating_sub(params.ief_t_minus), r.t - 1) > 0;
        let after = params.ief_t_plus > 0 && count_in(times, r.t + 1, r.t.saturating_add(params.ief_t_plus)) > 0;
        before || after
    }))
}

/// Two-phase YNoise filter: a density test against isolated noise, then
/// rejection of busy pixels with a quiet surround.
pub fn filter_ynoise(stream: &EventStream, params: &FilterParams) -> Result<EventStream> {
    params.validate()?;
    stream.check_sorted()?;
    let (w, h) = (stream.width() as usize, stream.height() as usize);
    let lists = pixel_times(stream, false);
    let coarse_min = params.ynoise_coarse_min as usize;
    let hot_max = params.ynoise_hot_max as usize;
    Ok(stream.retain_by(|_, r| {
        let (x, y) = (r.x as usize, r.y as usize);
        let lo = r.t.saturating_sub(params.ynoise_dt);
        let hi = r.t.saturating_add(params.ynoise_dt);
        // includes the event itself
        let own = count_in(&lists[x * h + y], lo, hi);
        let around: usize = neighborhood(x, y, params.ynoise_radius, w, h)
            .filter(|&p| p != (x, y))
            .map(|(nx, ny)| count_in(&lists[nx * h + ny], lo, hi))
            .sum();
        let density = own - 1 + around;
        if density < coarse_min {
            return false;
        }
        !(own > hot_max && around < coarse_min)
    }))
}

/// Frame-form support counts: previous `floor(baf_dt / dt_bin)` bins over the
/// neighborhood without the center, plus raster-earlier neighbors in the same bin.
fn baf_support(mag: ArrayView4<'_, f64>, dt_bin: u64, params: &FilterParams) -> Array4<f64> {
    let (n, _, w, h) = mag.dim();
    let lookback = (params.baf_dt / dt_bin.max(1)) as usize;
    let mut support = Array4::zeros(mag.dim());
    for b in 0..n {
        for x in 0..w {
            for y in 0..h {
                let mut s = 0.0;
                for (nx, ny) in neighborhood(x, y, params.baf_radius, w, h) {
                    if (nx, ny) == (x, y) {
                        continue;
                    }
                    for k in 1..=lookback.min(b) {
                        s += mag[[b - k, 0, nx, ny]];
                    }
                    if ny < y || (ny == y && nx < x) {
                        s += mag[[b, 0, nx, ny]];
                    }
                }
                support[[b, 0, x, y]] = s;
            }
        }
    }
    support
}

/// Frame-form BAF over a polarity volume, expressed as a mask multiplication.
pub fn filter_baf_frames(volume: &EventFrameVolume, params: &FilterParams) -> Result<EventFrameVolume> {
    params.validate()?;
    if volume.mode() != FrameMode::Polarity {
        return Err(Error::NotPolarityMode);
    }
    let mag = volume.data().mapv(|v| f64::from(v.abs()));
    let support = baf_support(mag.view(), volume.dt_bin(), params);
    let mut data = volume.data().clone();
    data.zip_mut_with(&support, |v, s| *v *= i32::from(*s >= 1.0));
    EventFrameVolume::new(data, FrameMode::Polarity, volume.t0(), volume.dt_bin())
}

/// Differentiable frame-form BAF: `frames * soft_indicator(support - 0.5, k)`.
pub fn filter_baf_frames_soft(
    frames: ArrayView4<'_, f64>,
    dt_bin: u64,
    params: &FilterParams,
    steepness: f64,
) -> Result<Array4<f64>> {
    params.validate()?;
    if frames.dim().1 != 1 {
        return Err(Error::DimensionMismatch(format!("expected one channel, got {}", frames.dim().1)));
    }
    let support = baf_support(frames.mapv(f64::abs).view(), dt_bin, params);
    let mut out = frames.to_owned();
    out.zip_mut_with(&support, |v, s| *v *= soft_indicator(s - 0.5, steepness));
    Ok(out)
}
