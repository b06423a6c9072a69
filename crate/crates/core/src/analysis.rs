//! Sensitivity theory and Monte-Carlo detection studies: false alarms,
//! latency scaling, impulse detection, ROC curves, AUC grids and threshold
//! selection.
//!
//! Rates are per pixel per step. Every trial derives its own seed from the
//! configured seed, so studies are reproducible and paired across parameter
//! values (common random numbers).

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::sim::{self, SensorConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensitivityResult {
    pub delta_phi_pos: f64,
    pub delta_phi_neg: f64,
}

/// Smallest flux changes that cross each threshold: `phi_prev * (exp(T / A) - 1)`.
pub fn sensitivity_threshold(phi_prev: f64, theta_pos: f64, theta_neg: f64, gain: f64) -> Result<SensitivityResult> {
    if !(gain > 0.0) {
        return Err(Error::NonPositiveGain(gain));
    }
    if !(phi_prev >= 0.0) {
        return Err(Error::NegativeFlux(phi_prev));
    }
    Ok(SensitivityResult {
        delta_phi_pos: phi_prev * (theta_pos / gain).exp_m1(),
        delta_phi_neg: phi_prev * (theta_neg / gain).exp_m1(),
    })
}

/// A uniform background map matching the sensor size.
pub fn uniform_background(config: &SensorConfig, photons: f64) -> Array2<f64> {
    Array2::from_elem((config.width as usize, config.height as usize), photons)
}

/// Which noise sources a false-alarm run keeps from the base configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct NoiseSources {
    pub shot: bool,
    pub dark: bool,
    pub leak: bool,
    pub hot: bool,
}

impl NoiseSources {
    pub const ALL: Self = Self {
        shot: true,
        dark: true,
        leak: true,
        hot: true,
    };

    /// Base config with the disabled sources switched off.
    pub fn apply(&self, config: &SensorConfig) -> SensorConfig {
        SensorConfig {
            shot_noise: config.shot_noise && self.shot,
            sigma_dark: if self.dark { config.sigma_dark } else { 0.0 },
            leak_chance: if self.leak { config.leak_chance } else { 0.0 },
            hot_pixel_fraction: if self.hot { config.hot_pixel_fraction } else { 0.0 },
            ..config.clone()
        }
    }

    /// Short label such as `shot+leak`, or `none`.
    pub fn label(&self) -> String {
        let names: Vec<&str> = [
            (self.shot, "shot"),
            (self.dark, "dark"),
            (self.leak, "leak"),
            (self.hot, "hot"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if names.is_empty() {
            "none".into()
        } else {
            names.join("+")
        }
    }
}

/// Events emitted over `n_steps` steps of a static scene.
pub fn static_event_count(config: &SensorConfig, background: ArrayView2<'_, f64>, n_steps: usize) -> Result<u64> {
    let mut state = sim::init_state(config, background, 0)?;
    let mut total = 0u64;
    for j in 1..=n_steps as u64 {
        total += sim::step(&mut state, background, j * config.dt, config)?.events.len() as u64;
    }
    Ok(total)
}

fn check_steps(n_steps: usize) -> Result<()> {
    if n_steps == 0 {
        return Err(Error::InvalidArgument("n_steps must be >= 1".into()));
    }
    Ok(())
}

/// Events per pixel per step on a static scene.
pub fn static_event_rate(config: &SensorConfig, background: ArrayView2<'_, f64>, n_steps: usize) -> Result<f64> {
    check_steps(n_steps)?;
    let pixels = (config.width as usize * config.height as usize) as f64;
    Ok(static_event_count(config, background, n_steps)? as f64 / (pixels * n_steps as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FalseAlarmRate {
    pub sources: NoiseSources,
    pub rate: f64,
}

/// Static-scene event rate for each requested noise-source combination.
pub fn false_alarm_rate(
    config: &SensorConfig,
    background: ArrayView2<'_, f64>,
    n_steps: usize,
    combinations: &[NoiseSources],
) -> Result<Vec<FalseAlarmRate>> {
    combinations
        .iter()
        .map(|sources| {
            Ok(FalseAlarmRate {
                sources: *sources,
                rate: static_event_rate(&sources.apply(config), background, n_steps)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyScaling {
    /// Rate with `refractory = dt`.
    pub baseline: f64,
    /// `(refractory, rate)` per requested value.
    pub rates: Vec<(u64, f64)>,
    /// `rate / baseline`, `None` when the baseline is zero.
    pub ratios: Vec<Option<f64>>,
}

impl LatencyScaling {
    /// Largest relative deviation of the measured ratios from `dt / R`, `None`
    /// when any ratio is undefined.
    pub fn max_deviation(&self, dt: u64) -> Option<f64> {
        self.rates
            .iter()
            .zip(&self.ratios)
            .map(|(&(r, _), ratio)| ratio.map(|q| (q - dt as f64 / r as f64).abs() / (dt as f64 / r as f64)))
            .try_fold(0.0, |acc: f64, d| d.map(|d| acc.max(d)))
    }
}

/// Static-scene rate for each refractory period, relative to `refractory = dt`.
pub fn latency_scaling(
    config: &SensorConfig,
    background: ArrayView2<'_, f64>,
    refractory_values: &[u64],
    n_steps: usize,
) -> Result<LatencyScaling> {
    if let Some(&r) = refractory_values.iter().find(|&&r| r < config.dt) {
        return Err(Error::InvalidArgument(format!(
            "refractory {r} us is shorter than dt {} us",
            config.dt
        )));
    }
    let with_refractory = |r: u64| SensorConfig {
        refractory: r,
        ..config.clone()
    };
    let baseline = static_event_rate(&with_refractory(config.dt), background, n_steps)?;
    let rates = refractory_values
        .par_iter()
        .map(|&r| static_event_rate(&with_refractory(r), background, n_steps).map(|rate| (r, rate)))
        .collect::<Result<Vec<_>>>()?;
    let ratios = rates
        .iter()
        .map(|&(_, rate)| (baseline > 0.0).then(|| rate / baseline))
        .collect();
    Ok(LatencyScaling {
        baseline,
        rates,
        ratios,
    })
}

/// Number of `(trial, pixel)` pairs with a +1 event at the impulse step.
///
/// Each trial initializes on `background` and steps once to
/// `background + impulse` on every pixel, with seed `derive_seed(seed, trial)`.
pub fn detection_count(
    config: &SensorConfig,
    background: ArrayView2<'_, f64>,
    impulse: f64,
    n_trials: usize,
) -> Result<u64> {
    if n_trials == 0 {
        return Err(Error::InvalidArgument("n_trials must be >= 1".into()));
    }
    config.validate()?;
    let stimulus = background.mapv(|b| b + impulse);
    (0..n_trials as u64)
        .into_par_iter()
        .map(|trial| {
            let cfg = SensorConfig {
                seed: derive_seed(config.seed, trial),
                ..config.clone()
            };
            let mut state = sim::init_state(&cfg, background, 0)?;
            let out = sim::step(&mut state, stimulus.view(), cfg.dt, &cfg)?;
            Ok(out.polarity.iter().filter(|p| **p > 0).count() as u64)
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))
}

/// Fraction of `(trial, pixel)` pairs detecting the impulse.
pub fn detection_probability(
    config: &SensorConfig,
    background: ArrayView2<'_, f64>,
    impulse: f64,
    n_trials: usize,
) -> Result<f64> {
    let hits = detection_count(config, background, impulse, n_trials)?;
    Ok(hits as f64 / (n_trials * background.len()) as f64)
}

/// ROC points `(false alarm, detection)` including the `(0, 0)` and `(1, 1)` endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<(f64, f64)>,
    /// Threshold per interior point, in sweep order.
    pub sweep_values: Vec<f64>,
}

fn with_threshold(config: &SensorConfig, threshold: f64) -> SensorConfig {
    SensorConfig {
        theta_pos_mean: threshold,
        theta_neg_mean: -threshold,
        ..config.clone()
    }
}

/// `(false alarm, detection)` at one symmetric threshold: the +1 probability
/// without and with the impulse, on the same trial seeds.
pub fn roc_point(
    config: &SensorConfig,
    background: ArrayView2<'_, f64>,
    impulse: f64,
    threshold: f64,
    n_trials: usize,
) -> Result<(f64, f64)> {
    let cfg = with_threshold(config, threshold);
    let fa = detection_probability(&cfg, background, 0.0, n_trials)?;
    let pd = detection_probability(&cfg, background, impulse, n_trials)?;
    Ok((fa.clamp(0.0, 1.0), pd.clamp(0.0, 1.0)))
}

pub fn roc_curve(
    config: &SensorConfig,
    background: ArrayView2<'_, f64>,
    impulse: f64,
    sweep: &[f64],
    n_trials: usize,
) -> Result<RocCurve> {
    if sweep.is_empty() {
        return Err(Error::InvalidArgument("threshold sweep is empty".into()));
    }
    let mut points = vec![(0.0, 0.0)];
    for &t in sweep {
        points.push(roc_point(config, background, impulse, t, n_trials)?);
    }
    points.push((1.0, 1.0));
    Ok(RocCurve {
        points,
        sweep_values: sweep.to_vec(),
    })
}

/// Trapezoidal area under the false-alarm-sorted points.
pub fn auc(curve: &RocCurve) -> Result<f64> {
    if curve.points.len() < 2 {
        return Err(Error::DegenerateCurve);
    }
    let mut pts = curve.points.clone();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    Ok(pts
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AucGrid {
    pub impulse_values: Vec<f64>,
    pub threshold_values: Vec<f64>,
    pub background_set: Vec<f64>,
    /// `[impulse, threshold]`.
    pub auc: Array2<f64>,
}

/// Single-threshold AUC per `(impulse, threshold)` cell, averaged over uniform backgrounds.
pub fn auc_grid(
    config: &SensorConfig,
    background_set: &[f64],
    impulse_values: &[f64],
    threshold_values: &[f64],
    n_trials: usize,
) -> Result<AucGrid> {
    if background_set.is_empty() || impulse_values.is_empty() || threshold_values.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let mut grid = Array2::zeros((impulse_values.len(), threshold_values.len()));
    for &level in background_set {
        let bg = uniform_background(config, level);
        for (ti, &t) in threshold_values.iter().enumerate() {
            let cfg = with_threshold(config, t);
            let fa = detection_probability(&cfg, bg.view(), 0.0, n_trials)?.clamp(0.0, 1.0);
            for (ii, &impulse) in impulse_values.iter().enumerate() {
                let pd = detection_probability(&cfg, bg.view(), impulse, n_trials)?.clamp(0.0, 1.0);
                let curve = RocCurve {
                    points: vec![(0.0, 0.0), (fa, pd), (1.0, 1.0)],
                    sweep_values: vec![t],
                };
                grid[[ii, ti]] += auc(&curve)? / background_set.len() as f64;
            }
        }
    }
    Ok(AucGrid {
        impulse_values: impulse_values.to_vec(),
        threshold_values: threshold_values.to_vec(),
        background_set: background_set.to_vec(),
        auc: grid,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    /// Grid impulse row actually used (nearest to the request).
    pub impulse: f64,
    pub threshold: f64,
    pub auc: f64,
}

/// Best threshold for the grid row nearest `impulse`; ties go to the larger threshold.
pub fn optimal_operating_point(grid: &AucGrid, impulse: f64) -> Result<OperatingPoint> {
    if grid.impulse_values.is_empty() || grid.threshold_values.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let row = grid
        .impulse_values
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - impulse).abs().total_cmp(&(b.1 - impulse).abs()))
        .map(|(i, _)| i)
        .expect("non-empty");
    let best = row_argmax(grid, row);
    Ok(OperatingPoint {
        impulse: grid.impulse_values[row],
        threshold: grid.threshold_values[best],
        auc: grid.auc[[row, best]],
    })
}

/// Index of the row maximum, ties toward the larger threshold.
pub fn row_argmax(grid: &AucGrid, row: usize) -> usize {
    let mut best = 0;
    for c in 1..grid.threshold_values.len() {
        let (a, b) = (grid.auc[[row, c]], grid.auc[[row, best]]);
        if a > b || (a == b && grid.threshold_values[c] > grid.threshold_values[best]) {
            best = c;
        }
    }
    best
}

/// One row of a background profile.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileEntry {
    pub label: String,
    /// Hour of day in `[0, 24)`.
    pub hour: f64,
    /// Background photons per pixel per step.
    pub photons: f64,
}

/// Example day with a low-background morning and a high-background midday.
pub fn example_profile() -> Vec<ProfileEntry> {
    [("dawn", 6.0, 50.0), ("morning", 8.0, 500.0), ("day", 12.0, 10_000.0), ("evening", 18.0, 800.0)]
        .into_iter()
        .map(|(label, hour, photons)| ProfileEntry {
            label: label.into(),
            hour,
            photons,
        })
        .collect()
}

/// Background level at each query hour, linearly interpolated between entries
/// and held constant beyond the first and last.
pub fn background_model(profile: &[ProfileEntry], hours: &[f64]) -> Result<Vec<f64>> {
    if profile.is_empty() {
        return Err(Error::EmptyProfile);
    }
    let mut entries: Vec<&ProfileEntry> = profile.iter().collect();
    entries.sort_by(|a, b| a.hour.total_cmp(&b.hour));
    Ok(hours
        .iter()
        .map(|&h| {
            let first = entries[0];
            let last = entries[entries.len() - 1];
            if h <= first.hour {
                return first.photons;
            }
            if h >= last.hour {
                return last.photons;
            }
            let i = entries.partition_point(|e| e.hour <= h);
            let (a, b) = (entries[i - 1], entries[i]);
            let f = (h - a.hour) / (b.hour - a.hour);
            a.photons + f * (b.photons - a.photons)
        })
        .collect())
}

/// Background level for a labelled profile entry.
pub fn background_for_label(profile: &[ProfileEntry], label: &str) -> Result<Option<f64>> {
    if profile.is_empty() {
        return Err(Error::EmptyProfile);
    }
    Ok(profile.iter().find(|e| e.label == label).map(|e| e.photons))
}
