//! Time surfaces, continuous-time intensity reconstruction and point-cloud export.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::events::EventStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurfaceMode {
    /// `exp(-(t_eval - t_last) / tau)` of the most recent event per pixel.
    Exponential,
    Count,
    Average,
    AverageAbs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolarityMode {
    Sensitive,
    Agnostic,
}

/// Spatial sub-rectangle `[x0, x0 + width) x [y0, y0 + height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub x0: u16,
    pub y0: u16,
    pub width: u16,
    pub height: u16,
}

impl Window {
    pub fn contains(&self, x: u16, y: u16) -> bool {
        let (x, y) = (u32::from(x), u32::from(y));
        x >= u32::from(self.x0)
            && x < u32::from(self.x0) + u32::from(self.width)
            && y >= u32::from(self.y0)
            && y < u32::from(self.y0) + u32::from(self.height)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeSurfaceSpec {
    pub mode: SurfaceMode,
    /// Decay constant in us, used by the exponential mode.
    pub tau: f64,
    pub t_eval: u64,
    pub window: Option<Window>,
    pub polarity: PolarityMode,
}

impl TimeSurfaceSpec {
    pub fn new(mode: SurfaceMode, t_eval: u64) -> Self {
        Self {
            mode,
            tau: 10_000.0,
            t_eval,
            window: None,
            polarity: PolarityMode::Sensitive,
        }
    }

    fn validate(&self, width: u16, height: u16) -> Result<()> {
        if self.mode == SurfaceMode::Exponential && !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::BadSpec(format!("tau must be positive, got {}", self.tau)));
        }
        if let Some(w) = self.window {
            if u32::from(w.x0) + u32::from(w.width) > u32::from(width)
                || u32::from(w.y0) + u32::from(w.height) > u32::from(height)
            {
                return Err(Error::BadSpec(format!(
                    "window {w:?} exceeds the {width}x{height} sensor"
                )));
            }
        }
        Ok(())
    }
}

/// Evaluates a time surface at `spec.t_eval` from events with `t <= t_eval`.
/// Pixels outside the window are zero.
pub fn time_surface(stream: &EventStream, spec: &TimeSurfaceSpec) -> Result<Array2<f64>> {
    spec.validate(stream.width(), stream.height())?;
    stream.check_sorted()?;
    let shape = (stream.width() as usize, stream.height() as usize);
    let mut last: Array2<Option<(u64, i8)>> = Array2::from_elem(shape, None);
    let mut count = Array2::<f64>::zeros(shape);
    let mut sum = Array2::<f64>::zeros(shape);
    let mut sum_abs = Array2::<f64>::zeros(shape);
    for r in stream.iter().take_while(|r| r.t <= spec.t_eval) {
        if spec.window.is_some_and(|w| !w.contains(r.x, r.y)) {
            continue;
        }
        let idx = [r.x as usize, r.y as usize];
        last[idx] = Some((r.t, r.p));
        count[idx] += 1.0;
        sum[idx] += f64::from(r.p);
        sum_abs[idx] += f64::from(r.p.abs());
    }
    let signed = spec.polarity == PolarityMode::Sensitive;
    let surface = match spec.mode {
        SurfaceMode::Exponential => last.mapv(|e| match e {
            Some((t, p)) => {
                let w = (-((spec.t_eval - t) as f64) / spec.tau).exp();
                if signed {
                    w * f64::from(p)
                } else {
                    w
                }
            }
            None => 0.0,
        }),
        SurfaceMode::Count => count,
        SurfaceMode::Average => {
            let num = if signed { sum } else { sum_abs };
            mean(&num, &count)
        }
        SurfaceMode::AverageAbs => mean(&sum_abs, &count),
    };
    Ok(surface)
}

fn mean(num: &Array2<f64>, count: &Array2<f64>) -> Array2<f64> {
    let mut out = num.clone();
    out.zip_mut_with(count, |v, &c| *v = if c > 0.0 { *v / c } else { 0.0 });
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReconstructionMode {
    /// One frame after every event.
    EventDriven,
    /// Frames at `k * interval`, `k = 1..=max(1, ceil(t_last / interval))`.
    FixedRate { interval: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Smoothing {
    None,
    Gaussian { sigma: f64 },
    Bilateral { sigma_space: f64, sigma_range: f64 },
}

impl Smoothing {
    pub fn gaussian() -> Self {
        Self::Gaussian { sigma: 1.0 }
    }

    pub fn bilateral(theta_pos: f64) -> Self {
        Self::Bilateral {
            sigma_space: 1.0,
            sigma_range: 0.5 * theta_pos,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntensityFrame {
    pub t: u64,
    /// Log-intensity image `[X, Y]`.
    pub image: Array2<f64>,
}

struct LogIntensity {
    value: Array2<f64>,
    updated: Array2<u64>,
    alpha: f64,
}

impl LogIntensity {
    fn decay_to(&mut self, x: usize, y: usize, t: u64) {
        let dt = t.saturating_sub(self.updated[[x, y]]) as f64;
        if self.alpha > 0.0 && dt > 0.0 {
            self.value[[x, y]] *= (-self.alpha * dt).exp();
        }
        self.updated[[x, y]] = t;
    }

    fn readout(&self, t: u64) -> Array2<f64> {
        let mut img = self.value.clone();
        if self.alpha > 0.0 {
            img.zip_mut_with(&self.updated, |v, &u| {
                *v *= (-self.alpha * t.saturating_sub(u) as f64).exp();
            });
        }
        img
    }
}

/// Event-driven log-intensity estimate with exponential decay toward zero.
///
/// `alpha` is in 1/us. Smoothing applies to emitted frames only.
pub fn reconstruct_intensity(
    stream: &EventStream,
    theta_pos: f64,
    theta_neg: f64,
    alpha: f64,
    mode: ReconstructionMode,
    smoothing: Smoothing,
) -> Result<Vec<IntensityFrame>> {
    if !(theta_pos > 0.0 && theta_neg < 0.0) {
        return Err(Error::BadThresholds);
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha must be >= 0, got {alpha}")));
    }
    stream.check_sorted()?;
    let shape = (stream.width() as usize, stream.height() as usize);
    let mut state = LogIntensity {
        value: Array2::zeros(shape),
        updated: Array2::zeros(shape),
        alpha,
    };
    let apply = |state: &mut LogIntensity, r: &crate::events::EventRecord| {
        let (x, y) = (r.x as usize, r.y as usize);
        state.decay_to(x, y, r.t);
        state.value[[x, y]] += if r.p > 0 { theta_pos } else { theta_neg };
    };
    let mut frames = Vec::new();
    match mode {
        ReconstructionMode::EventDriven => {
            for r in stream {
                apply(&mut state, r);
                frames.push(IntensityFrame {
                    t: r.t,
                    image: smooth(&state.readout(r.t), smoothing),
                });
            }
        }
        ReconstructionMode::FixedRate { interval } => {
            if interval == 0 {
                return Err(Error::InvalidArgument("frame interval must be >= 1 us".into()));
            }
            let t_last = stream.records().last().map_or(0, |r| r.t);
            let n_frames = t_last.div_ceil(interval).max(1);
            let mut events = stream.iter().peekable();
            for k in 1..=n_frames {
                let t = k * interval;
                while let Some(r) = events.next_if(|r| r.t <= t) {
                    apply(&mut state, r);
                }
                frames.push(IntensityFrame {
                    t,
                    image: smooth(&state.readout(t), smoothing),
                });
            }
        }
    }
    Ok(frames)
}

fn smooth(img: &Array2<f64>, smoothing: Smoothing) -> Array2<f64> {
    match smoothing {
        Smoothing::None => img.clone(),
        Smoothing::Gaussian { sigma } => filter2d(img, sigma, |_, _| 1.0),
        Smoothing::Bilateral {
            sigma_space,
            sigma_range,
        } => {
            let s2 = 2.0 * sigma_range * sigma_range;
            filter2d(img, sigma_space, move |center, v| {
                if s2 > 0.0 {
                    (-(v - center).powi(2) / s2).exp()
                } else {
                    f64::from(u8::from(v == center))
                }
            })
        }
    }
}

/// Normalized spatial Gaussian filter with an extra range weight; truncated at
/// `3 sigma` and renormalized at the borders.
fn filter2d(img: &Array2<f64>, sigma: f64, range: impl Fn(f64, f64) -> f64) -> Array2<f64> {
    if !(sigma > 0.0) {
        return img.clone();
    }
    let (w, h) = img.dim();
    let r = (3.0 * sigma).ceil() as isize;
    let mut out = Array2::zeros((w, h));
    for x in 0..w as isize {
        for y in 0..h as isize {
            let center = img[[x as usize, y as usize]];
            let (mut acc, mut norm) = (0.0, 0.0);
            for dx in -r..=r {
                for dy in -r..=r {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let v = img[[nx as usize, ny as usize]];
                    let k = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp() * range(center, v);
                    acc += k * v;
                    norm += k;
                }
            }
            out[[x as usize, y as usize]] = acc / norm;
        }
    }
    out
}

/// Writes `t,x,y,p,r,g,b` rows, positive events red and negative blue.
pub fn export_point_cloud(stream: &EventStream, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(["t", "x", "y", "p", "r", "g", "b"]).map_err(csv_error)?;
    for e in stream {
        let (r, g, b) = if e.p > 0 { (255, 0, 0) } else { (0, 0, 255) };
        w.serialize((e.t, e.x, e.y, e.p, r, g, b)).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line,
            message: format!("{other:?}"),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::EventRecord;

    fn ev(t: u64, x: u16, y: u16, p: i8) -> EventRecord {
        EventRecord::new(t, x, y, p)
    }

    fn stream(records: Vec<EventRecord>) -> EventStream {
        EventStream::new(4, 3, 1, records).unwrap()
    }

    #[test]
    fn exponential_weights() {
        let s = stream(vec![ev(100, 1, 1, -1), ev(500, 2, 0, 1)]);
        let mut spec = TimeSurfaceSpec::new(SurfaceMode::Exponential, 500);
        spec.tau = 400.0;
        let ts = time_surface(&s, &spec).unwrap();
        assert_eq!(ts[[2, 0]], 1.0);
        assert!((ts[[1, 1]] + (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(ts[[0, 0]], 0.0);
        spec.polarity = PolarityMode::Agnostic;
        assert!((time_surface(&s, &spec).unwrap()[[1, 1]] - 0.367_879_441_171_442_3).abs() < 1e-15);
        spec.tau = 0.0;
        assert!(matches!(time_surface(&s, &spec), Err(Error::BadSpec(_))));
    }

    #[test]
    fn count_average_and_abs() {
        let s = stream(vec![ev(1, 0, 0, 1), ev(2, 0, 0, -1), ev(3, 0, 0, 1), ev(4, 3, 2, -1)]);
        let count = time_surface(&s, &TimeSurfaceSpec::new(SurfaceMode::Count, 10)).unwrap();
        assert_eq!(count[[0, 0]], 3.0);
        assert_eq!(count.sum(), 4.0);
        let avg = time_surface(&s, &TimeSurfaceSpec::new(SurfaceMode::Average, 10)).unwrap();
        assert!((avg[[0, 0]] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(avg[[3, 2]], -1.0);
        assert_eq!(avg[[1, 1]], 0.0);
        let abs = time_surface(&s, &TimeSurfaceSpec::new(SurfaceMode::AverageAbs, 10)).unwrap();
        assert_eq!(abs.iter().filter(|v| **v == 1.0).count(), 2);
        assert_eq!(abs.iter().filter(|v| **v == 0.0).count(), 10);
    }

    #[test]
    fn later_events_and_window_are_excluded() {
        let s = stream(vec![ev(1, 0, 0, 1), ev(2, 2, 2, 1), ev(20, 0, 0, 1)]);
        let mut spec = TimeSurfaceSpec::new(SurfaceMode::Count, 10);
        spec.window = Some(Window {
            x0: 0,
            y0: 0,
            width: 2,
            height: 2,
        });
        let c = time_surface(&s, &spec).unwrap();
        assert_eq!(c.sum(), 1.0);
        spec.window = Some(Window {
            x0: 3,
            y0: 0,
            width: 2,
            height: 1,
        });
        assert!(matches!(time_surface(&s, &spec), Err(Error::BadSpec(_))));
    }

    #[test]
    fn reconstruction_basics() {
        let empty = stream(vec![]);
        let frames = reconstruct_intensity(&empty, 0.2, -0.2, 0.0, ReconstructionMode::FixedRate { interval: 10 }, Smoothing::None).unwrap();
        assert_eq!(frames.len(), 1);
        assert!(frames[0].image.iter().all(|v| *v == 0.0));

        let one = stream(vec![ev(5, 1, 2, 1)]);
        let frames = reconstruct_intensity(&one, 0.2, -0.3, 0.0, ReconstructionMode::EventDriven, Smoothing::None).unwrap();
        assert_eq!(frames.len(), 1);
        assert_eq!(frames[0].image[[1, 2]], 0.2);
        assert_eq!(frames[0].image.sum(), 0.2);

        assert!(matches!(
            reconstruct_intensity(&one, 0.2, 0.1, 0.0, ReconstructionMode::EventDriven, Smoothing::None),
            Err(Error::BadThresholds)
        ));
    }

    #[test]
    fn readout_decays() {
        let alpha = 1e-3;
        let s = stream(vec![ev(0, 0, 0, 1)]);
        let frames = reconstruct_intensity(&s, 0.5, -0.5, alpha, ReconstructionMode::FixedRate { interval: 1000 }, Smoothing::None).unwrap();
        assert_eq!(frames.len(), 1);
        assert!((frames[0].image[[0, 0]] - 0.5 * (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn fixed_rate_frame_times() {
        let s = stream(vec![ev(3, 0, 0, 1), ev(25, 0, 0, -1)]);
        let frames = reconstruct_intensity(&s, 0.5, -0.5, 0.0, ReconstructionMode::FixedRate { interval: 10 }, Smoothing::None).unwrap();
        let times: Vec<u64> = frames.iter().map(|f| f.t).collect();
        assert_eq!(times, vec![10, 20, 30]);
        assert_eq!(frames[1].image[[0, 0]], 0.5);
        assert_eq!(frames[2].image[[0, 0]], 0.0);
    }

    #[test]
    fn smoothing_preserves_constant_images() {
        let img = Array2::from_elem((5, 4), 0.7);
        for s in [Smoothing::gaussian(), Smoothing::bilateral(0.2)] {
            let out = smooth(&img, s);
            assert!(out.iter().all(|v| (v - 0.7).abs() < 1e-12));
        }
    }

    #[test]
    fn bilateral_keeps_edges_sharper_than_gaussian() {
        let img = Array2::from_shape_fn((6, 6), |(x, _)| if x < 3 { 0.0 } else { 1.0 });
        let g = smooth(&img, Smoothing::gaussian());
        let b = smooth(&img, Smoothing::bilateral(0.2));
        assert!(b[[2, 3]] < g[[2, 3]]);
        assert!(b[[3, 3]] > g[[3, 3]]);
    }

    #[test]
    fn point_cloud_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.csv");
        let s = stream(vec![ev(1, 0, 0, 1), ev(2, 1, 0, -1)]);
        export_point_cloud(&s, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "t,x,y,p,r,g,b\n1,0,0,1,255,0,0\n2,1,0,-1,0,0,255\n");
    }
}
