//! Discrete-time event-camera pixel model.
//!
//! Each step converts a flux frame into photocurrent, compresses it through a
//! clamped logarithm normalized by the well capacity, and compares the change
//! against the stored reference voltage with per-pixel thresholds. Shot, dark,
//! leak and hot-pixel noise plus a refractory period are applied per pixel.
//!
//! Thresholds are expressed in log-voltage units. Voltages are stored
//! normalized to `[0, 1]`, so the comparator works on the rescaled contrast
//! `(V - V_ref) * ln(well_capacity)`.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::safe_log;
use crate::error::{Error, Result};
use crate::events::{
    events_to_frames_binned, EventFrameVolume, EventRecord, EventStream, FluxSequence, FrameBinning,
    FrameMode,
};
use crate::rng::{self, INIT_STREAM, WORDS_PER_PIXEL};

/// Lower clamp on sampled threshold magnitudes.
pub const THRESHOLD_FLOOR: f64 = 1e-6;

const PARALLEL_MIN_PIXELS: usize = 4096;

/// Camera parameters. Field names double as configuration-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    pub width: u16,
    pub height: u16,
    /// Simulation step in microseconds.
    pub dt: u64,
    /// System gain `A`.
    pub gain: f64,
    /// Electron charge scale `q_e`.
    pub qe: f64,
    /// Scalar quantum efficiency `Q` in `(0, 1]`.
    pub quantum_efficiency: f64,
    /// Optional per-pixel quantum efficiency overriding the scalar.
    #[serde(skip)]
    pub quantum_efficiency_map: Option<Array2<f64>>,
    pub theta_pos_mean: f64,
    pub theta_neg_mean: f64,
    pub theta_sigma: f64,
    /// Standard deviation of the additive dark current, in photocurrent units.
    pub sigma_dark: f64,
    pub leak_chance: f64,
    /// Refractory period in microseconds.
    pub refractory: u64,
    pub hot_pixel_fraction: f64,
    pub well_capacity: f64,
    pub shot_noise: bool,
    #[serde(with = "seed_repr")]
    pub seed: u64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            dt: 1000,
            gain: 1.0,
            qe: 1.0,
            quantum_efficiency: 1.0,
            quantum_efficiency_map: None,
            theta_pos_mean: 0.2,
            theta_neg_mean: -0.2,
            theta_sigma: 0.0,
            sigma_dark: 0.0,
            leak_chance: 0.0,
            refractory: 0,
            hot_pixel_fraction: 0.0,
            well_capacity: 1e6,
            shot_noise: false,
            seed: 0,
        }
    }
}

impl SensorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvariantViolation(msg));
        if self.width == 0 || self.height == 0 {
            return fail(format!("sensor size {}x{} must be positive", self.width, self.height));
        }
        if self.dt == 0 {
            return fail("dt must be >= 1 us".into());
        }
        if !(self.gain > 0.0) || !self.gain.is_finite() {
            return fail(format!("gain must be positive, got {}", self.gain));
        }
        if !(self.qe > 0.0) || !self.qe.is_finite() {
            return fail(format!("qe must be positive, got {}", self.qe));
        }
        if !(self.quantum_efficiency > 0.0 && self.quantum_efficiency <= 1.0) {
            return fail(format!(
                "quantum_efficiency must lie in (0, 1], got {}",
                self.quantum_efficiency
            ));
        }
        if let Some(map) = &self.quantum_efficiency_map {
            if map.dim() != (self.width as usize, self.height as usize) {
                return fail("quantum efficiency map does not match sensor size".into());
            }
            if map.iter().any(|q| !(*q > 0.0 && *q <= 1.0)) {
                return fail("quantum efficiency map values must lie in (0, 1]".into());
            }
        }
        if !(self.theta_pos_mean > 0.0) {
            return fail(format!("theta_pos_mean must be > 0, got {}", self.theta_pos_mean));
        }
        if !(self.theta_neg_mean < 0.0) {
            return fail(format!("theta_neg_mean must be < 0, got {}", self.theta_neg_mean));
        }
        if !(self.theta_sigma >= 0.0) {
            return fail(format!("theta_sigma must be >= 0, got {}", self.theta_sigma));
        }
        if !(self.sigma_dark >= 0.0) {
            return fail(format!("sigma_dark must be >= 0, got {}", self.sigma_dark));
        }
        if !(self.leak_chance >= 0.0 && self.leak_chance < 0.5) {
            return fail(format!("leak_chance must lie in [0, 0.5), got {}", self.leak_chance));
        }
        if !(self.hot_pixel_fraction >= 0.0 && self.hot_pixel_fraction < 1.0) {
            return fail(format!(
                "hot_pixel_fraction must lie in [0, 1), got {}",
                self.hot_pixel_fraction
            ));
        }
        if !(self.well_capacity > 1.0) || !self.well_capacity.is_finite() {
            return fail(format!("well_capacity must be > 1, got {}", self.well_capacity));
        }
        Ok(())
    }

    /// `ln(well_capacity)`, the log-voltage at which pixels saturate.
    pub fn log_well_capacity(&self) -> f64 {
        safe_log(self.well_capacity)
    }

    /// True when any stochastic per-step source is enabled.
    pub fn has_step_noise(&self) -> bool {
        self.shot_noise || self.sigma_dark > 0.0 || self.leak_chance > 0.0
    }

    /// Copy with shot, dark, leak and hot-pixel noise disabled.
    pub fn without_noise(&self) -> Self {
        Self {
            shot_noise: false,
            sigma_dark: 0.0,
            leak_chance: 0.0,
            hot_pixel_fraction: 0.0,
            ..self.clone()
        }
    }

    pub(crate) fn quantum_efficiency_at(&self, x: usize, y: usize) -> f64 {
        match &self.quantum_efficiency_map {
            Some(map) => map[[x, y]],
            None => self.quantum_efficiency,
        }
    }

    pub(crate) fn check_frame(&self, frame: &ArrayView2<'_, f64>) -> Result<()> {
        let expected = (self.width as usize, self.height as usize);
        if frame.dim() != expected {
            return Err(Error::DimensionMismatch(format!(
                "frame is {:?}, sensor is {:?}",
                frame.dim(),
                expected
            )));
        }
        Ok(())
    }
}

/// Seeds are written as integers when they fit TOML's signed range, as strings otherwise.
pub(crate) mod seed_repr {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(seed: &u64, s: S) -> Result<S::Ok, S::Error> {
        match i64::try_from(*seed) {
            Ok(v) => s.serialize_i64(v),
            Err(_) => s.serialize_str(&seed.to_string()),
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Int(i64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Int(v) => u64::try_from(v).map_err(|_| de::Error::custom("seed must be non-negative")),
            Repr::Text(s) => s.parse().map_err(de::Error::custom),
        }
    }
}

/// Per-pixel random draws for one step.
#[derive(Debug, Clone)]
pub struct NoiseField {
    /// Uniforms driving the inverse-CDF Poisson draw.
    pub shot_uniform: Array2<f64>,
    /// Standard normals scaled by `sigma_dark`.
    pub dark_normal: Array2<f64>,
    /// Uniforms for the leak comparator.
    pub leak_uniform: Array2<f64>,
}

impl NoiseField {
    /// Draws the field for `step` from the counter-addressed stream of `seed`.
    pub fn draw(seed: u64, step: u64, width: u16, height: u16) -> Self {
        let (w, h) = (width as usize, height as usize);
        let mut words = vec![[0u64; WORDS_PER_PIXEL]; w * h];
        let fill = |(x, lane): (usize, &mut [[u64; WORDS_PER_PIXEL]])| {
            let mut rng = rng::substream(seed, step, x * h, WORDS_PER_PIXEL);
            for slot in lane.iter_mut() {
                for word in slot.iter_mut() {
                    *word = rng.next_u64();
                }
            }
        };
        if w * h >= PARALLEL_MIN_PIXELS {
            words.par_chunks_mut(h).enumerate().for_each(fill);
        } else {
            words.chunks_mut(h).enumerate().for_each(fill);
        }
        let pick = |f: &dyn Fn(&[u64; WORDS_PER_PIXEL]) -> f64| {
            Array2::from_shape_vec((w, h), words.iter().map(f).collect()).expect("shape")
        };
        Self {
            shot_uniform: pick(&|s| rng::unit(s[0])),
            dark_normal: pick(&|s| rng::normal_pair(s[1], s[2]).0),
            leak_uniform: pick(&|s| rng::unit(s[3])),
        }
    }
}

/// Samples per-pixel thresholds `N(mean, theta_sigma^2)`, clamped away from zero.
pub fn sample_thresholds(config: &SensorConfig) -> (Array2<f64>, Array2<f64>) {
    let (pos, neg, _) = sample_static_maps(config);
    (pos, neg)
}

pub(crate) fn sample_static_maps(config: &SensorConfig) -> (Array2<f64>, Array2<f64>, Array2<bool>) {
    let shape = (config.width as usize, config.height as usize);
    let n = shape.0 * shape.1;
    let mut rng = rng::substream(config.seed, INIT_STREAM, 0, 2);
    let mut pos = Vec::with_capacity(n);
    let mut neg = Vec::with_capacity(n);
    for _ in 0..n {
        let (a, b) = rng::next_normal_pair(&mut rng);
        pos.push((config.theta_pos_mean + config.theta_sigma * a).max(THRESHOLD_FLOOR));
        neg.push((config.theta_neg_mean + config.theta_sigma * b).min(-THRESHOLD_FLOOR));
    }
    let hot: Vec<bool> = (0..n)
        .map(|_| rng::unit(rng.next_u64()) < config.hot_pixel_fraction)
        .collect();
    (
        Array2::from_shape_vec(shape, pos).expect("shape"),
        Array2::from_shape_vec(shape, neg).expect("shape"),
        Array2::from_shape_vec(shape, hot).expect("shape"),
    )
}

/// `J = Q * Phi * q_e`, with `Phi` replaced by a Poisson draw when shot noise is on
/// and `noise` is supplied.
pub fn photocurrent(
    flux: ArrayView2<'_, f64>,
    config: &SensorConfig,
    noise: Option<&NoiseField>,
) -> Result<Array2<f64>> {
    config.check_frame(&flux)?;
    if let Some(&bad) = flux.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::NegativeFlux(bad));
    }
    let shot = noise.filter(|_| config.shot_noise);
    Ok(Array2::from_shape_fn(flux.dim(), |(x, y)| {
        let photons = match shot {
            Some(field) => rng::poisson_quantile(flux[[x, y]], field.shot_uniform[[x, y]]),
            None => flux[[x, y]],
        };
        config.quantum_efficiency_at(x, y) * photons * config.qe
    }))
}

/// Normalized voltage of a single photocurrent sample (dark noise already added).
#[inline]
pub fn normalized_voltage(current: f64, gain: f64, log_well: f64) -> f64 {
    (gain * safe_log(current)).min(log_well) / log_well
}

/// `V = min(A * safe_log(J + sigma_D * n), ln W) / ln W`, in `[0, 1]`.
pub fn log_voltage(current: ArrayView2<'_, f64>, config: &SensorConfig, noise: Option<&NoiseField>) -> Array2<f64> {
    let log_well = config.log_well_capacity();
    let dark = noise.filter(|_| config.sigma_dark > 0.0);
    Array2::from_shape_fn(current.dim(), |(x, y)| {
        let j = match dark {
            Some(field) => current[[x, y]] + config.sigma_dark * field.dark_normal[[x, y]],
            None => current[[x, y]],
        };
        normalized_voltage(j, config.gain, log_well)
    })
}

/// Mutable per-pixel simulator state.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelState {
    v_ref: Array2<f64>,
    t_lat: Array2<u64>,
    theta_pos: Array2<f64>,
    theta_neg: Array2<f64>,
    hot_mask: Array2<bool>,
    seed: u64,
    step_index: u64,
    t_current: u64,
}

impl PixelState {
    pub fn v_ref(&self) -> &Array2<f64> {
        &self.v_ref
    }

    pub fn t_lat(&self) -> &Array2<u64> {
        &self.t_lat
    }

    pub fn theta_pos(&self) -> &Array2<f64> {
        &self.theta_pos
    }

    pub fn theta_neg(&self) -> &Array2<f64> {
        &self.theta_neg
    }

    pub fn hot_mask(&self) -> &Array2<bool> {
        &self.hot_mask
    }

    pub fn t_current(&self) -> u64 {
        self.t_current
    }

    /// Index of the next step's random stream.
    pub fn step_index(&self) -> u64 {
        self.step_index
    }
}

/// Samples the static maps and takes the reference voltage from a noiseless
/// rendering of the first frame. No events are produced for that frame.
pub fn init_state(config: &SensorConfig, first_frame: ArrayView2<'_, f64>, t0: u64) -> Result<PixelState> {
    config.validate()?;
    let current = photocurrent(first_frame, config, None)?;
    let v_ref = log_voltage(current.view(), config, None);
    let (theta_pos, theta_neg, hot_mask) = sample_static_maps(config);
    Ok(PixelState {
        t_lat: Array2::from_elem(v_ref.dim(), t0),
        v_ref,
        theta_pos,
        theta_neg,
        hot_mask,
        seed: config.seed,
        step_index: 1,
        t_current: t0,
    })
}

/// Events of one step plus the dense per-pixel outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub events: Vec<EventRecord>,
    pub polarity: Array2<i8>,
}

/// Comparator outcome for one pixel. Threshold crossings win over hot-pixel
/// firing, which wins over a leak draw.
#[inline]
pub(crate) fn comparator(contrast: f64, theta_pos: f64, theta_neg: f64, hot: bool, leak_u: f64, leak: f64) -> i8 {
    if contrast >= theta_pos {
        1
    } else if contrast <= theta_neg {
        -1
    } else if hot {
        1
    } else if leak > 0.0 && leak_u >= 1.0 - leak {
        1
    } else if leak > 0.0 && leak_u <= leak {
        -1
    } else {
        0
    }
}

/// Advances every pixel to `t_j`.
pub fn step(
    state: &mut PixelState,
    frame: ArrayView2<'_, f64>,
    t_j: u64,
    config: &SensorConfig,
) -> Result<StepOutput> {
    if t_j <= state.t_current {
        return Err(Error::NonMonotonicTime {
            t: t_j,
            last: state.t_current,
        });
    }
    let noise = config
        .has_step_noise()
        .then(|| NoiseField::draw(state.seed, state.step_index, config.width, config.height));
    let current = photocurrent(frame, config, noise.as_ref())?;
    let voltage = log_voltage(current.view(), config, noise.as_ref());
    let log_well = config.log_well_capacity();

    let mut polarity = Array2::<i8>::zeros(voltage.dim());
    let mut events = Vec::new();
    for ((x, y), &v) in voltage.indexed_iter() {
        if t_j < state.t_lat[[x, y]] {
            continue;
        }
        let contrast = (v - state.v_ref[[x, y]]) * log_well;
        let leak_u = noise.as_ref().map_or(0.5, |n| n.leak_uniform[[x, y]]);
        let p = comparator(
            contrast,
            state.theta_pos[[x, y]],
            state.theta_neg[[x, y]],
            state.hot_mask[[x, y]],
            leak_u,
            config.leak_chance,
        );
        if p != 0 {
            state.v_ref[[x, y]] = v;
            state.t_lat[[x, y]] = t_j + config.refractory;
            polarity[[x, y]] = p;
            events.push(EventRecord::new(t_j, x as u16, y as u16, p));
        } else {
            state.t_lat[[x, y]] = t_j;
        }
    }
    events.sort_unstable();
    state.t_current = t_j;
    state.step_index += 1;
    Ok(StepOutput { events, polarity })
}

/// Simulation result: the event stream and, optionally, one polarity frame per step.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub stream: EventStream,
    pub frames: Option<EventFrameVolume>,
}

impl SimOutput {
    /// Binning that maps step `j` (frame `j`) onto bin `j - 1`.
    pub fn step_binning(flux: &FluxSequence) -> FrameBinning {
        FrameBinning {
            t0: flux.t0() + flux.dt(),
            dt_bin: flux.dt(),
            n_bins: flux.n_frames() - 1,
        }
    }
}

/// Runs the full sequence: frame 0 initializes, frames `1..N` are stepped.
pub fn simulate(config: &SensorConfig, flux: &FluxSequence, emit_frames: bool) -> Result<SimOutput> {
    config.validate()?;
    if flux.width() != config.width || flux.height() != config.height {
        return Err(Error::DimensionMismatch(format!(
            "flux is {}x{}, sensor is {}x{}",
            flux.width(),
            flux.height(),
            config.width,
            config.height
        )));
    }
    if flux.dt() != config.dt {
        return Err(Error::InvalidArgument(format!(
            "flux interval {} us differs from sensor dt {} us",
            flux.dt(),
            config.dt
        )));
    }
    let mut state = init_state(config, flux.frame(0), flux.t0())?;
    let n_steps = flux.n_frames() - 1;
    let mut frames = emit_frames.then(|| Array3::<i32>::zeros((n_steps, config.width as usize, config.height as usize)));
    let mut records = Vec::new();
    for j in 1..flux.n_frames() {
        let out = step(&mut state, flux.frame(j), flux.time(j), config)?;
        if let Some(frames) = frames.as_mut() {
            frames
                .index_axis_mut(Axis(0), j - 1)
                .assign(&out.polarity.mapv(i32::from));
        }
        records.extend(out.events);
    }
    // steps are emitted in time order, each already tie-broken
    let stream = EventStream::from_sorted(config.width, config.height, config.dt, records);
    let frames = match frames {
        Some(f) => {
            let binning = SimOutput::step_binning(flux);
            Some(EventFrameVolume::new(
                f.insert_axis(Axis(1)),
                FrameMode::Polarity,
                binning.t0,
                binning.dt_bin,
            )?)
        }
        None => None,
    };
    Ok(SimOutput { stream, frames })
}

/// Same as [`events_to_frames_binned`] over the simulator's step grid.
pub fn stream_to_step_frames(stream: &EventStream, flux: &FluxSequence) -> Result<EventFrameVolume> {
    events_to_frames_binned(stream, SimOutput::step_binning(flux), FrameMode::Polarity)
}
