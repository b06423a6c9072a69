//! Differentiable relaxation of the pixel model.
//!
//! The forward pass mirrors [`crate::sim`] but replaces the comparator
//! indicators with sigmoids of steepness `k`, and mixes the reference voltage
//! with the soft event probability. A pipeline-specific tape records what the
//! hand-written backward pass needs.
//!
//! Stochastic nodes: leak and hot-pixel outcomes enter as fixed draws, so they
//! pass gradients through to the flux but carry none to `leak_chance`. Dark
//! noise is additive and contributes no gradient. With shot noise enabled the
//! flux gradient is taken with respect to the realized photon count; use
//! [`poisson_score_gradient`] for gradients of expectations over the Poisson node.

use ndarray::{Array2, Array3, Array4, ArrayView4};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::FluxSequence;
use crate::rng;
use crate::sim::{self, NoiseField, SensorConfig};

/// Logarithm clamped to zero below one photon: `0` for `x < 1`, `ln x` otherwise.
#[inline]
pub fn safe_log(x: f64) -> f64 {
    if x < 1.0 {
        0.0
    } else {
        x.ln()
    }
}

/// Derivative rule paired with [`safe_log`]: zero on the clamped branch.
#[inline]
pub fn safe_log_grad(x: f64) -> f64 {
    if x < 1.0 {
        0.0
    } else {
        1.0 / x
    }
}

/// `1 / (1 + exp(-k u))`, evaluated without overflow.
#[inline]
pub fn soft_indicator(u: f64, k: f64) -> f64 {
    let z = k * u;
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `k s (1 - s)` with `1 - s` taken from the mirrored sigmoid for accuracy in the tails.
#[inline]
pub fn soft_indicator_grad(u: f64, k: f64) -> f64 {
    k * soft_indicator(u, k) * soft_indicator(-u, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelaxationConfig {
    /// Sigmoid steepness `k`, in inverse log-voltage units.
    pub steepness: f64,
    /// Emit the hard comparator output while keeping soft derivatives.
    pub use_hard_forward: bool,
}

impl Default for RelaxationConfig {
    fn default() -> Self {
        Self {
            steepness: 20.0,
            use_hard_forward: false,
        }
    }
}

impl RelaxationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.steepness > 0.0) || !self.steepness.is_finite() {
            return Err(Error::InvariantViolation(format!(
                "steepness must be positive, got {}",
                self.steepness
            )));
        }
        Ok(())
    }
}

/// Differentiable inputs of the relaxed model.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedParams {
    pub theta_pos: Array2<f64>,
    pub theta_neg: Array2<f64>,
    pub gain: f64,
    /// Flux frames `[N, X, Y]`.
    pub flux: Array3<f64>,
}

impl RelaxedParams {
    /// Thresholds sampled exactly as the simulator samples them.
    pub fn from_config(config: &SensorConfig, flux: &FluxSequence) -> Self {
        let (theta_pos, theta_neg) = sim::sample_thresholds(config);
        Self {
            theta_pos,
            theta_neg,
            gain: config.gain,
            flux: flux.frames().clone(),
        }
    }
}

/// Gradients of a scalar loss with respect to every differentiable input.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub d_theta_pos: Array2<f64>,
    pub d_theta_neg: Array2<f64>,
    pub d_gain: f64,
    pub d_flux: Array3<f64>,
}

impl GradientBundle {
    pub fn is_finite(&self) -> bool {
        self.d_gain.is_finite()
            && self.d_theta_pos.iter().all(|v| v.is_finite())
            && self.d_theta_neg.iter().all(|v| v.is_finite())
            && self.d_flux.iter().all(|v| v.is_finite())
    }

    /// Multiplies every entry by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            d_theta_pos: &self.d_theta_pos * factor,
            d_theta_neg: &self.d_theta_neg * factor,
            d_gain: self.d_gain * factor,
            d_flux: &self.d_flux * factor,
        }
    }
}

/// A recorded relaxed forward pass.
#[derive(Debug, Clone)]
pub struct RelaxedPass {
    output: Array4<f64>,
    log_well: f64,
    // [N, X, Y]
    dv_dflux: Array3<f64>,
    dv_dgain: Array3<f64>,
    voltage: Array3<f64>,
    // [N - 1, X, Y]
    v_ref_prev: Array3<f64>,
    dsp: Array3<f64>,
    dsn: Array3<f64>,
    gate: Array3<f64>,
    fixed_outcome: Array3<f64>,
    mix: Array3<f64>,
}

impl RelaxedPass {
    /// Soft (or hard, in hard-forward mode) polarity frames `[N - 1, 1, X, Y]`.
    pub fn output(&self) -> &Array4<f64> {
        &self.output
    }

    /// Loss `sum(output^2)`, the scalar used by [`grad_check`].
    pub fn squared_loss(&self) -> f64 {
        self.output.iter().map(|o| o * o).sum()
    }

    /// Reverse-mode accumulation for the given `dLoss/dOutput`.
    pub fn backward(&self, upstream: ArrayView4<'_, f64>) -> Result<GradientBundle> {
        if upstream.dim() != self.output.dim() {
            return Err(Error::DimensionMismatch(format!(
                "upstream gradient {:?} does not match output {:?}",
                upstream.dim(),
                self.output.dim()
            )));
        }
        let (n, w, h) = self.voltage.dim();
        let lw = self.log_well;
        let mut d_tp = Array2::zeros((w, h));
        let mut d_tn = Array2::zeros((w, h));
        let mut d_flux = Array3::zeros((n, w, h));
        let mut d_gain = 0.0;
        for x in 0..w {
            for y in 0..h {
                let mut r_bar = 0.0;
                for j in (1..n).rev() {
                    let s = j - 1;
                    let o_bar = upstream[[s, 0, x, y]];
                    let g = self.gate[[s, x, y]];
                    let l = self.fixed_outcome[[s, x, y]];
                    let m = l.abs();
                    let v = self.voltage[[j, x, y]];
                    let r_prev = self.v_ref_prev[[s, x, y]];
                    let mix = self.mix[[s, x, y]];

                    // R_j = mix * V_j + (1 - mix) * R_{j-1}
                    let mix_bar = r_bar * (v - r_prev);
                    let mut v_bar = r_bar * mix;
                    let mut r_prev_bar = r_bar * (1.0 - mix);

                    let sp_bar = g * (o_bar * (1.0 - l) + mix_bar * (1.0 - m));
                    let sn_bar = g * (o_bar * (-1.0 - l) + mix_bar * (1.0 - m));
                    let dsp = self.dsp[[s, x, y]];
                    let dsn = self.dsn[[s, x, y]];
                    d_tp[[x, y]] -= sp_bar * dsp;
                    d_tn[[x, y]] += sn_bar * dsn;

                    // contrast = L * (V_j - R_{j-1})
                    let c_bar = sp_bar * dsp - sn_bar * dsn;
                    v_bar += lw * c_bar;
                    r_prev_bar -= lw * c_bar;

                    d_flux[[j, x, y]] += v_bar * self.dv_dflux[[j, x, y]];
                    d_gain += v_bar * self.dv_dgain[[j, x, y]];
                    r_bar = r_prev_bar;
                }
                // R_0 = V_0
                d_flux[[0, x, y]] += r_bar * self.dv_dflux[[0, x, y]];
                d_gain += r_bar * self.dv_dgain[[0, x, y]];
            }
        }
        Ok(GradientBundle {
            d_theta_pos: d_tp,
            d_theta_neg: d_tn,
            d_gain,
            d_flux,
        })
    }
}

/// Relaxed forward pass over `flux` with thresholds sampled from `config`.
pub fn relaxed_forward(config: &SensorConfig, flux: &FluxSequence, relax: &RelaxationConfig) -> Result<RelaxedPass> {
    if flux.dt() != config.dt {
        return Err(Error::InvalidArgument(format!(
            "flux interval {} us differs from sensor dt {} us",
            flux.dt(),
            config.dt
        )));
    }
    relaxed_forward_with(config, relax, &RelaxedParams::from_config(config, flux))
}

/// Relaxed forward pass with explicit differentiable inputs.
pub fn relaxed_forward_with(config: &SensorConfig, relax: &RelaxationConfig, params: &RelaxedParams) -> Result<RelaxedPass> {
    config.validate()?;
    relax.validate()?;
    let (n, w, h) = params.flux.dim();
    let sensor = (config.width as usize, config.height as usize);
    if n == 0 || (w, h) != sensor || params.theta_pos.dim() != sensor || params.theta_neg.dim() != sensor {
        return Err(Error::DimensionMismatch(format!(
            "params do not match the {}x{} sensor",
            config.width, config.height
        )));
    }
    if let Some(&bad) = params.flux.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::NegativeFlux(bad));
    }
    if !(params.gain > 0.0) {
        return Err(Error::NonPositiveGain(params.gain));
    }

    let k = relax.steepness;
    let lw = config.log_well_capacity();
    let gain = params.gain;
    let (_, _, hot) = sim::sample_static_maps(config);
    let steps = n - 1;

    let mut pass = RelaxedPass {
        output: Array4::zeros((steps, 1, w, h)),
        log_well: lw,
        dv_dflux: Array3::zeros((n, w, h)),
        dv_dgain: Array3::zeros((n, w, h)),
        voltage: Array3::zeros((n, w, h)),
        v_ref_prev: Array3::zeros((steps, w, h)),
        dsp: Array3::zeros((steps, w, h)),
        dsn: Array3::zeros((steps, w, h)),
        gate: Array3::zeros((steps, w, h)),
        fixed_outcome: Array3::zeros((steps, w, h)),
        mix: Array3::zeros((steps, w, h)),
    };

    // Records V and its local partials for one sample.
    let render = |pass: &mut RelaxedPass, j: usize, x: usize, y: usize, photons: f64, dark: f64| -> f64 {
        let q = config.quantum_efficiency_at(x, y) * config.qe;
        let current = config.quantum_efficiency_at(x, y) * photons * config.qe + dark;
        let v = sim::normalized_voltage(current, gain, lw);
        if gain * safe_log(current) < lw {
            pass.dv_dflux[[j, x, y]] = gain * safe_log_grad(current) * q / lw;
            pass.dv_dgain[[j, x, y]] = safe_log(current) / lw;
        }
        pass.voltage[[j, x, y]] = v;
        v
    };

    let mut v_ref = Array2::zeros((w, h));
    for ((x, y), r) in v_ref.indexed_iter_mut() {
        *r = render(&mut pass, 0, x, y, params.flux[[0, x, y]], 0.0);
    }
    let mut t_lat = Array2::<u64>::zeros((w, h));

    for j in 1..n {
        let s = j - 1;
        let t_j = j as u64 * config.dt;
        let noise = config
            .has_step_noise()
            .then(|| NoiseField::draw(config.seed, j as u64, config.width, config.height));
        for x in 0..w {
            for y in 0..h {
                let phi = params.flux[[j, x, y]];
                let (photons, dark, leak_u) = match &noise {
                    Some(field) => (
                        if config.shot_noise {
                            rng::poisson_quantile(phi, field.shot_uniform[[x, y]])
                        } else {
                            phi
                        },
                        if config.sigma_dark > 0.0 {
                            config.sigma_dark * field.dark_normal[[x, y]]
                        } else {
                            0.0
                        },
                        field.leak_uniform[[x, y]],
                    ),
                    None => (phi, 0.0, 0.5),
                };
                let v = render(&mut pass, j, x, y, photons, dark);
                let r_prev = v_ref[[x, y]];
                let contrast = (v - r_prev) * lw;
                let tp = params.theta_pos[[x, y]];
                let tn = params.theta_neg[[x, y]];
                let is_hot = hot[[x, y]];
                let gate = if t_j >= t_lat[[x, y]] { 1.0 } else { 0.0 };
                let fixed = f64::from(sim::comparator(0.0, f64::INFINITY, f64::NEG_INFINITY, is_hot, leak_u, config.leak_chance));
                let hard = sim::comparator(contrast, tp, tn, is_hot, leak_u, config.leak_chance);

                let sp = soft_indicator(contrast - tp, k);
                let sn = soft_indicator(tn - contrast, k);
                let (out, mix) = if relax.use_hard_forward {
                    let p = f64::from(hard);
                    (gate * p, gate * p.abs())
                } else {
                    let off = 1.0 - sp - sn;
                    (gate * (sp - sn + off * fixed), gate * (sp + sn + off * fixed.abs()))
                };

                pass.output[[s, 0, x, y]] = out;
                pass.v_ref_prev[[s, x, y]] = r_prev;
                pass.dsp[[s, x, y]] = soft_indicator_grad(contrast - tp, k);
                pass.dsn[[s, x, y]] = soft_indicator_grad(tn - contrast, k);
                pass.gate[[s, x, y]] = gate;
                pass.fixed_outcome[[s, x, y]] = fixed;
                pass.mix[[s, x, y]] = mix;

                v_ref[[x, y]] = mix * v + (1.0 - mix) * r_prev;
                if gate > 0.0 {
                    t_lat[[x, y]] = if hard != 0 { t_j + config.refractory } else { t_j };
                }
            }
        }
    }
    Ok(pass)
}

/// Forward/backward pair that remembers its last tape.
#[derive(Debug, Clone)]
pub struct RelaxedModel {
    config: SensorConfig,
    relax: RelaxationConfig,
    tape: Option<RelaxedPass>,
}

impl RelaxedModel {
    pub fn new(config: SensorConfig, relax: RelaxationConfig) -> Self {
        Self {
            config,
            relax,
            tape: None,
        }
    }

    pub fn forward(&mut self, flux: &FluxSequence) -> Result<&Array4<f64>> {
        let pass = relaxed_forward(&self.config, flux, &self.relax)?;
        Ok(self.tape.insert(pass).output())
    }

    pub fn backward(&self, upstream: ArrayView4<'_, f64>) -> Result<GradientBundle> {
        self.tape.as_ref().ok_or(Error::MissingTape)?.backward(upstream)
    }
}

/// Central-difference step, scaled by `max(1, |x|)`.
pub const FD_STEP: f64 = 1e-4;

/// Denominator floor for relative errors, so gradients that are zero up to
/// round-off compare on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Number of flux entries sampled by [`grad_check`].
pub const FLUX_SAMPLES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    ThetaPos,
    ThetaNeg,
    Gain,
    Flux,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [Self::ThetaPos, Self::ThetaNeg, Self::Gain, Self::Flux];

    pub fn name(self) -> &'static str {
        match self {
            Self::ThetaPos => "theta_pos",
            Self::ThetaNeg => "theta_neg",
            Self::Gain => "gain",
            Self::Flux => "flux",
        }
    }
}

/// A finite-difference estimate for one scalar input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NumericGradient {
    pub group: ParamGroup,
    /// `(frame, x, y)` for flux, `(0, x, y)` for thresholds, zeros for gain.
    pub index: (usize, usize, usize),
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckEntry {
    pub group: ParamGroup,
    pub index: (usize, usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    /// Compares analytic gradients against finite-difference estimates.
    pub fn compare(analytic: &GradientBundle, numeric: &[NumericGradient], tolerance: f64) -> Self {
        let entries = numeric
            .iter()
            .map(|n| {
                let (j, x, y) = n.index;
                let a = match n.group {
                    ParamGroup::ThetaPos => analytic.d_theta_pos[[x, y]],
                    ParamGroup::ThetaNeg => analytic.d_theta_neg[[x, y]],
                    ParamGroup::Gain => analytic.d_gain,
                    ParamGroup::Flux => analytic.d_flux[[j, x, y]],
                };
                let scale = a.abs().max(n.value.abs()).max(REL_ERROR_FLOOR);
                GradCheckEntry {
                    group: n.group,
                    index: n.index,
                    analytic: a,
                    numeric: n.value,
                    relative_error: (a - n.value).abs() / scale,
                }
            })
            .collect();
        Self { entries, tolerance }
    }

    pub fn max_relative_error(&self) -> f64 {
        self.entries.iter().map(|e| e.relative_error).fold(0.0, f64::max)
    }

    /// Largest error within `group`, `None` when the group was not checked.
    pub fn group_max(&self, group: ParamGroup) -> Option<f64> {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.relative_error)
            .reduce(f64::max)
    }

    pub fn group_passed(&self, group: ParamGroup) -> bool {
        self.group_max(group).is_some_and(|e| e < self.tolerance)
    }

    pub fn passed(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.relative_error < self.tolerance)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "group,checked,max_relative_error,tolerance,status")?;
        for group in ParamGroup::ALL {
            let checked = self.entries.iter().filter(|e| e.group == group).count();
            if let Some(err) = self.group_max(group) {
                let status = if err < self.tolerance { "pass" } else { "FAIL" };
                writeln!(f, "{},{checked},{err:.3e},{:.1e},{status}", group.name(), self.tolerance)?;
            }
        }
        write!(
            f,
            "overall,{},{:.3e},{:.1e},{}",
            self.entries.len(),
            self.max_relative_error(),
            self.tolerance,
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

/// Central differences of `sum(output^2)` for every threshold, the gain, and
/// [`FLUX_SAMPLES`] flux entries chosen with `seed`.
pub fn numeric_gradients(
    config: &SensorConfig,
    relax: &RelaxationConfig,
    params: &RelaxedParams,
    seed: u64,
) -> Result<Vec<NumericGradient>> {
    let loss = |p: &RelaxedParams| relaxed_forward_with(config, relax, p).map(|pass| pass.squared_loss());
    let central = |get: &dyn Fn(&mut RelaxedParams) -> &mut f64| -> Result<f64> {
        let mut p = params.clone();
        let x0 = *get(&mut p);
        let step = FD_STEP * x0.abs().max(1.0);
        *get(&mut p) = x0 + step;
        let up = loss(&p)?;
        *get(&mut p) = x0 - step;
        let down = loss(&p)?;
        Ok((up - down) / (2.0 * step))
    };

    let (n, w, h) = params.flux.dim();
    let mut out = Vec::new();
    for x in 0..w {
        for y in 0..h {
            out.push(NumericGradient {
                group: ParamGroup::ThetaPos,
                index: (0, x, y),
                value: central(&|p| &mut p.theta_pos[[x, y]])?,
            });
            out.push(NumericGradient {
                group: ParamGroup::ThetaNeg,
                index: (0, x, y),
                value: central(&|p| &mut p.theta_neg[[x, y]])?,
            });
        }
    }
    out.push(NumericGradient {
        group: ParamGroup::Gain,
        index: (0, 0, 0),
        value: central(&|p| &mut p.gain)?,
    });
    let total = n * w * h;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for flat in sample(&mut rng, total, FLUX_SAMPLES.min(total)).into_iter() {
        let (j, x, y) = (flat / (w * h), (flat / h) % w, flat % h);
        out.push(NumericGradient {
            group: ParamGroup::Flux,
            index: (j, x, y),
            value: central(&|p| &mut p.flux[[j, x, y]])?,
        });
    }
    Ok(out)
}

/// Checks the backward pass against central finite differences of `sum(output^2)`.
///
/// Runs on a noise-free copy of `config` in soft-forward mode regardless of
/// the settings passed in.
pub fn grad_check(
    config: &SensorConfig,
    flux: &FluxSequence,
    relax: &RelaxationConfig,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let config = config.without_noise();
    let relax = RelaxationConfig {
        use_hard_forward: false,
        ..*relax
    };
    let params = RelaxedParams::from_config(&config, flux);
    let pass = relaxed_forward_with(&config, &relax, &params)?;
    let upstream = pass.output().mapv(|o| 2.0 * o);
    let analytic = pass.backward(upstream.view())?;
    let numeric = numeric_gradients(&config, &relax, &params, config.seed)?;
    Ok(GradCheckReport::compare(&analytic, &numeric, tolerance))
}

/// A smooth travelling-wave flux sequence with values in `[75, 225]` photons.
pub fn smooth_flux_sequence(width: u16, height: u16, n_frames: usize, dt: u64, seed: u64) -> Result<FluxSequence> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kx: f64 = rng.gen_range(0.3..1.2);
    let ky: f64 = rng.gen_range(0.3..1.2);
    let omega: f64 = rng.gen_range(0.3..0.8);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let frames = Array3::from_shape_fn((n_frames, width as usize, height as usize), |(j, x, y)| {
        150.0 * (1.0 + 0.5 * (kx * x as f64 + ky * y as f64 + omega * j as f64 + phase).sin())
    });
    FluxSequence::new(frames, 0, dt)
}

/// Monte-Carlo score-function estimate of `d/dlambda E[loss(N)]`, `N ~ Pois(lambda)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreEstimate {
    pub estimate: f64,
    /// Sample standard error of `estimate`.
    pub std_error: f64,
    pub n_samples: usize,
}

/// Averages `loss(N) * (N / lambda - 1)` over `n_samples` seeded Poisson draws.
pub fn poisson_score_gradient<F: Fn(f64) -> f64>(
    loss: F,
    lambda: f64,
    n_samples: usize,
    seed: u64,
) -> Result<ScoreEstimate> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::NonPositiveLambda(lambda));
    }
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
    }
    let dist = Poisson::new(lambda).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Welford accumulation
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for i in 0..n_samples {
        let count: f64 = dist.sample(&mut rng);
        let term = loss(count) * (count / lambda - 1.0);
        let delta = term - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (term - mean);
    }
    let var = if n_samples > 1 { m2 / (n_samples - 1) as f64 } else { 0.0 };
    Ok(ScoreEstimate {
        estimate: mean,
        std_error: (var / n_samples as f64).sqrt(),
        n_samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn safe_log_branches() {
        assert_eq!(safe_log(0.5), 0.0);
        assert_eq!(safe_log_grad(0.5), 0.0);
        assert_eq!(safe_log(1.0), 0.0);
        assert_eq!(safe_log(-3.0), 0.0);
        let e = std::f64::consts::E;
        assert!((safe_log(e) - 1.0).abs() < 1e-15);
        assert!((safe_log_grad(e) - 1.0 / e).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(soft_indicator(0.0, 3.0), 0.5);
        assert_eq!(soft_indicator(1e6, 10.0), 1.0);
        assert_eq!(soft_indicator(-1e6, 10.0), 0.0);
        // 1 / (1 + e^-1)
        assert!((soft_indicator(0.1, 10.0) - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!(soft_indicator_grad(-1e6, 10.0).is_finite());
    }

    #[test]
    fn sigmoid_grad_matches_closed_form() {
        for &u in &[-0.3, -0.01, 0.0, 0.02, 0.4] {
            let k = 17.0;
            let s = soft_indicator(u, k);
            let g = soft_indicator_grad(u, k);
            assert!((g - k * s * (1.0 - s)).abs() <= 1e-14 * k);
        }
    }

    fn one_pixel(theta: f64) -> SensorConfig {
        SensorConfig {
            width: 1,
            height: 1,
            dt: 1,
            theta_pos_mean: theta,
            theta_neg_mean: -theta,
            well_capacity: 1e8,
            ..SensorConfig::default()
        }
    }

    #[test]
    fn at_threshold_positive_branch_is_half() {
        // contrast = ln 2 exactly at the threshold
        let cfg = one_pixel(std::f64::consts::LN_2);
        let flux = FluxSequence::new(Array3::from_shape_vec((2, 1, 1), vec![100.0, 200.0]).unwrap(), 0, 1).unwrap();
        let relax = RelaxationConfig::default();
        let pass = relaxed_forward(&cfg, &flux, &relax).unwrap();
        let lw = cfg.log_well_capacity();
        let contrast = (200f64.ln() / lw - 100f64.ln() / lw) * lw;
        let sp = soft_indicator(contrast - std::f64::consts::LN_2, relax.steepness);
        assert!((sp - 0.5).abs() < 1e-12);
        let sn = soft_indicator(-std::f64::consts::LN_2 - contrast, relax.steepness);
        assert!((pass.output()[[0, 0, 0, 0]] - (sp - sn)).abs() < 1e-15);
    }

    #[test]
    fn steep_sigmoid_saturates() {
        let cfg = one_pixel(0.1);
        let flux = FluxSequence::new(Array3::from_shape_vec((2, 1, 1), vec![100.0, 300.0]).unwrap(), 0, 1).unwrap();
        let relax = RelaxationConfig {
            steepness: 1e4,
            ..Default::default()
        };
        let pass = relaxed_forward(&cfg, &flux, &relax).unwrap();
        assert!((pass.output()[[0, 0, 0, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cfg = SensorConfig {
            width: 3,
            height: 2,
            dt: 5,
            theta_pos_mean: 0.1,
            theta_neg_mean: -0.1,
            ..SensorConfig::default()
        };
        let flux = smooth_flux_sequence(3, 2, 4, 5, 1).unwrap();
        let pass = relaxed_forward(&cfg, &flux, &RelaxationConfig::default()).unwrap();
        let g = pass.backward(Array4::zeros(pass.output().dim()).view()).unwrap();
        assert_eq!(g.d_gain, 0.0);
        assert!(g.d_theta_pos.iter().chain(g.d_theta_neg.iter()).all(|v| *v == 0.0));
        assert!(g.d_flux.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_node_threshold_derivative() {
        let theta = 0.3;
        let cfg = one_pixel(theta);
        let flux = FluxSequence::new(Array3::from_shape_vec((2, 1, 1), vec![100.0, 140.0]).unwrap(), 0, 1).unwrap();
        let relax = RelaxationConfig {
            steepness: 20.0,
            ..Default::default()
        };
        let pass = relaxed_forward(&cfg, &flux, &relax).unwrap();
        let g = pass.backward(Array4::ones((1, 1, 1, 1)).view()).unwrap();
        let lw = cfg.log_well_capacity();
        let contrast = (140f64.ln() / lw - 100f64.ln() / lw) * lw;
        let s = soft_indicator(contrast - theta, 20.0);
        let expected = -20.0 * s * (1.0 - s);
        assert!((g.d_theta_pos[[0, 0]] - expected).abs() < 1e-12 * expected.abs());
    }

    #[test]
    fn missing_tape_is_reported() {
        let model = RelaxedModel::new(one_pixel(0.1), RelaxationConfig::default());
        assert!(matches!(
            model.backward(Array4::zeros((1, 1, 1, 1)).view()),
            Err(Error::MissingTape)
        ));
    }

    #[test]
    fn model_runs_forward_then_backward() {
        let mut model = RelaxedModel::new(one_pixel(0.1), RelaxationConfig::default());
        let flux = FluxSequence::new(Array3::from_shape_vec((3, 1, 1), vec![100.0, 130.0, 90.0]).unwrap(), 0, 1).unwrap();
        let dim = model.forward(&flux).unwrap().dim();
        let g = model.backward(Array4::ones(dim).view()).unwrap();
        assert!(g.is_finite());
        assert!(matches!(
            model.backward(Array4::ones((5, 1, 1, 1)).view()),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn single_sigmoid_grad_check_is_tight() {
        let cfg = one_pixel(0.3);
        let flux = FluxSequence::new(Array3::from_shape_vec((2, 1, 1), vec![100.0, 140.0]).unwrap(), 0, 1).unwrap();
        let report = grad_check(&cfg, &flux, &RelaxationConfig::default(), 1e-6).unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn corrupted_gradient_fails() {
        let cfg = SensorConfig {
            width: 4,
            height: 4,
            dt: 1,
            theta_pos_mean: 0.1,
            theta_neg_mean: -0.1,
            ..SensorConfig::default()
        };
        let flux = smooth_flux_sequence(4, 4, 5, 1, 2).unwrap();
        let relax = RelaxationConfig::default();
        let params = RelaxedParams::from_config(&cfg, &flux);
        let pass = relaxed_forward_with(&cfg, &relax, &params).unwrap();
        let analytic = pass.backward(pass.output().mapv(|o| 2.0 * o).view()).unwrap();
        let numeric = numeric_gradients(&cfg, &relax, &params, 0).unwrap();
        assert!(GradCheckReport::compare(&analytic, &numeric, 1e-3).passed());
        assert!(!GradCheckReport::compare(&analytic.scaled(1.1), &numeric, 1e-3).passed());
    }

    #[test]
    fn score_gradient_rejects_bad_rate() {
        assert!(matches!(
            poisson_score_gradient(|n| n, 0.0, 10, 0),
            Err(Error::NonPositiveLambda(_))
        ));
    }

    #[test]
    fn score_of_constant_loss_is_zero_mean() {
        let est = poisson_score_gradient(|_| 3.0, 7.0, 200_000, 4).unwrap();
        assert!(est.estimate.abs() < 3.0 * est.std_error, "{est:?}");
    }

    #[test]
    fn score_of_square_matches_moment() {
        // d/dl (l^2 + l) = 2l + 1
        let est = poisson_score_gradient(|n| n * n, 10.0, 1_000_000, 8).unwrap();
        assert!((est.estimate - 21.0).abs() < 3.0 * est.std_error, "{est:?}");
    }
}
