use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};

use evtwin_core::analysis::{self, NoiseSources};
use evtwin_core::diff::{grad_check, smooth_flux_sequence};
use evtwin_core::events::{events_to_frames, events_to_frames_binned, frames_to_events, FrameBinning};
use evtwin_core::filters::{self, PolaritySelection};
use evtwin_core::io::{self as evio, ConfigDocument};
use evtwin_core::repr::{self, PolarityMode, ReconstructionMode, Smoothing, SurfaceMode, TimeSurfaceSpec, Window};
use evtwin_core::{simulate, EventStream, FluxSequence, FrameMode};

use crate::args::*;

/// A bad invocation that parsed but cannot run; exits with status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

pub const SEED_ENV: &str = "EVTWIN_SEED";

fn set<T>(doc: &mut ConfigDocument, key: &str, value: Option<T>, field: impl FnOnce(&mut ConfigDocument) -> &mut T) {
    if let Some(v) = value {
        *field(doc) = v;
        doc.explicit.insert(key.to_string());
    }
}

/// Config file, then flags, then the seed fallback chain.
pub fn load_config(common: &Common) -> Result<ConfigDocument> {
    let mut doc = match &common.config {
        Some(path) => evio::read_config(path).with_context(|| format!("reading config {}", path.display()))?,
        None => ConfigDocument::default(),
    };
    let s = common.sensor.clone();
    set(&mut doc, "width", s.width, |d| &mut d.sensor.width);
    set(&mut doc, "height", s.height, |d| &mut d.sensor.height);
    set(&mut doc, "dt", s.dt, |d| &mut d.sensor.dt);
    set(&mut doc, "gain", s.gain, |d| &mut d.sensor.gain);
    set(&mut doc, "qe", s.qe, |d| &mut d.sensor.qe);
    set(&mut doc, "quantum_efficiency", s.quantum_efficiency, |d| &mut d.sensor.quantum_efficiency);
    set(&mut doc, "theta_pos_mean", s.tpos, |d| &mut d.sensor.theta_pos_mean);
    set(&mut doc, "theta_neg_mean", s.tneg, |d| &mut d.sensor.theta_neg_mean);
    set(&mut doc, "theta_sigma", s.tsigma, |d| &mut d.sensor.theta_sigma);
    set(&mut doc, "sigma_dark", s.sigma_dark, |d| &mut d.sensor.sigma_dark);
    set(&mut doc, "leak_chance", s.leak, |d| &mut d.sensor.leak_chance);
    set(&mut doc, "refractory", s.refractory, |d| &mut d.sensor.refractory);
    set(&mut doc, "hot_pixel_fraction", s.hot_fraction, |d| &mut d.sensor.hot_pixel_fraction);
    set(&mut doc, "well_capacity", s.well_capacity, |d| &mut d.sensor.well_capacity);
    set(&mut doc, "shot_noise", s.shot_noise, |d| &mut d.sensor.shot_noise);

    if let Some(seed) = common.seed {
        doc.sensor.seed = seed;
        doc.explicit.insert("seed".into());
    } else if !doc.is_explicit("seed") {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            match raw.trim().parse() {
                Ok(seed) => doc.sensor.seed = seed,
                Err(_) => return usage(format!("{SEED_ENV}={raw:?} is not an unsigned integer")),
            }
        }
    }
    Ok(doc)
}

fn apply_filter_args(doc: &mut ConfigDocument, a: &FilterParamArgs) {
    let a = a.clone();
    set(doc, "baf_dt", a.baf_dt, |d| &mut d.filters.baf_dt);
    set(doc, "baf_radius", a.baf_radius, |d| &mut d.filters.baf_radius);
    set(doc, "ief_t_minus", a.ief_t_minus, |d| &mut d.filters.ief_t_minus);
    set(doc, "ief_t_plus", a.ief_t_plus, |d| &mut d.filters.ief_t_plus);
    set(doc, "ief_polarity_agnostic", a.ief_agnostic, |d| &mut d.filters.ief_polarity_agnostic);
    set(doc, "ynoise_dt", a.ynoise_dt, |d| &mut d.filters.ynoise_dt);
    set(doc, "ynoise_radius", a.ynoise_radius, |d| &mut d.filters.ynoise_radius);
    set(doc, "ynoise_coarse_min", a.coarse_min, |d| &mut d.filters.ynoise_coarse_min);
    set(doc, "ynoise_hot_max", a.hot_max, |d| &mut d.filters.ynoise_hot_max);
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default()
}

fn read_events(path: &Path, doc: &ConfigDocument) -> Result<EventStream> {
    let s = &doc.sensor;
    let stream = if extension(path) == "csv" {
        evio::read_events_csv(path, s.width, s.height, s.dt)?
    } else {
        evio::read_events_bin(path)?
    };
    Ok(stream)
}

fn write_events(stream: &EventStream, path: &Path) -> Result<()> {
    if extension(path) == "csv" {
        evio::write_events_csv(stream, path)?;
    } else {
        evio::write_events_bin(stream, path)?;
    }
    Ok(())
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

pub fn simulate_cmd(a: &SimulateArgs) -> Result<()> {
    let mut doc = load_config(&a.common)?;
    let flux = evio::read_flux_volume(&a.flux)?;
    if !doc.is_explicit("width") {
        doc.sensor.width = flux.width();
    }
    if !doc.is_explicit("height") {
        doc.sensor.height = flux.height();
    }
    if !doc.is_explicit("dt") {
        doc.sensor.dt = flux.dt();
    }
    let out = simulate(&doc.sensor, &flux, a.frames.is_some())?;
    write_events(&out.stream, &a.out)?;
    if let (Some(path), Some(frames)) = (&a.frames, &out.frames) {
        evio::write_frames(frames, path)?;
    }
    Ok(())
}

pub fn filter_cmd(a: &FilterArgs) -> Result<()> {
    let mut doc = load_config(&a.common)?;
    apply_filter_args(&mut doc, &a.params);
    let params = doc.filters;
    if extension(&a.input) == "frm" {
        if a.method != FilterMethod::Baf {
            return usage("frame volumes support only --method baf");
        }
        let volume = evio::read_frames(&a.input)?;
        evio::write_frames(&filters::filter_baf_frames(&volume, &params)?, &a.out)?;
        return Ok(());
    }
    let stream = read_events(&a.input, &doc)?;
    let out = match a.method {
        FilterMethod::Polarity => filters::filter_polarity(
            &stream,
            match a.keep {
                Keep::Positive => PolaritySelection::Positive,
                Keep::Negative => PolaritySelection::Negative,
                Keep::Both => PolaritySelection::Both,
            },
        ),
        FilterMethod::Baf => filters::filter_baf(&stream, &params)?,
        FilterMethod::Ief => filters::filter_ief(&stream, &params)?,
        FilterMethod::Ynoise => filters::filter_ynoise(&stream, &params)?,
    };
    write_events(&out, &a.out)
}

pub fn surface_cmd(a: &SurfaceArgs) -> Result<()> {
    let doc = load_config(&a.common)?;
    let stream = read_events(&a.input, &doc)?;
    let mode = match a.mode {
        SurfaceKind::Exponential => SurfaceMode::Exponential,
        SurfaceKind::Count => SurfaceMode::Count,
        SurfaceKind::Average => SurfaceMode::Average,
        SurfaceKind::AverageAbs => SurfaceMode::AverageAbs,
    };
    let t_eval = a
        .t_eval
        .unwrap_or_else(|| stream.records().last().map_or(0, |r| r.t));
    let mut spec = TimeSurfaceSpec::new(mode, t_eval);
    spec.tau = a.tau;
    if a.agnostic {
        spec.polarity = PolarityMode::Agnostic;
    }
    if a.window.as_ref().is_some_and(|w| w.len() != 4) {
        return usage("--window takes x0,y0,width,height");
    }
    spec.window = a.window.as_deref().map(|w| Window {
        x0: w[0],
        y0: w[1],
        width: w[2],
        height: w[3],
    });
    let surface = repr::time_surface(&stream, &spec)?;
    let mut out = sink(a.out.as_deref())?;
    writeln!(out, "x,y,value")?;
    for ((x, y), v) in surface.indexed_iter() {
        writeln!(out, "{x},{y},{v}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn reconstruct_cmd(a: &ReconstructArgs) -> Result<()> {
    let doc = load_config(&a.common)?;
    let stream = read_events(&a.input, &doc)?;
    let (tp, tn) = (doc.sensor.theta_pos_mean, doc.sensor.theta_neg_mean);
    let mode = match a.interval {
        Some(interval) => ReconstructionMode::FixedRate { interval },
        None => ReconstructionMode::EventDriven,
    };
    let smoothing = match a.smoothing {
        SmoothingKind::None => Smoothing::None,
        SmoothingKind::Gaussian => Smoothing::Gaussian { sigma: a.sigma },
        SmoothingKind::Bilateral => Smoothing::bilateral(tp),
    };
    let frames = repr::reconstruct_intensity(&stream, tp, tn, a.alpha, mode, smoothing)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let mut times = sink(Some(&a.out_dir.join("times.csv")))?;
    writeln!(times, "index,t")?;
    for (i, frame) in frames.iter().enumerate() {
        writeln!(times, "{i},{}", frame.t)?;
        let mut out = sink(Some(&a.out_dir.join(format!("frame_{i:05}.csv"))))?;
        for row in frame.image.t().rows() {
            let line: Vec<String> = row.iter().map(f64::to_string).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        out.flush()?;
    }
    times.flush()?;
    Ok(())
}

fn required<T: Clone>(value: &Option<T>, flag: &str, task: &str) -> Result<T> {
    match value {
        Some(v) => Ok(v.clone()),
        None => usage(format!("--task {task} requires {flag}")),
    }
}

pub fn analyze_cmd(a: &AnalyzeArgs) -> Result<()> {
    let doc = load_config(&a.common)?;
    let cfg = &doc.sensor;
    let background = match &a.time_of_day {
        Some(label) => match analysis::background_for_label(&analysis::example_profile(), label)? {
            Some(b) => b,
            None => return usage(format!("unknown time of day {label:?}")),
        },
        None => a.background,
    };
    let bg = analysis::uniform_background(cfg, background);
    let mut out = sink(a.out.as_deref())?;
    match a.task {
        Task::Sensitivity => {
            let phi = required(&a.phi, "--phi", "sensitivity")?;
            let r = analysis::sensitivity_threshold(phi, cfg.theta_pos_mean, cfg.theta_neg_mean, cfg.gain)?;
            writeln!(out, "phi,theta_pos,theta_neg,gain,delta_phi_pos,delta_phi_neg")?;
            writeln!(
                out,
                "{phi},{},{},{},{},{}",
                cfg.theta_pos_mean, cfg.theta_neg_mean, cfg.gain, r.delta_phi_pos, r.delta_phi_neg
            )?;
        }
        Task::Falarm => {
            let single = |f: fn(&mut NoiseSources)| {
                let mut s = NoiseSources::default();
                f(&mut s);
                s
            };
            let combos = [
                NoiseSources::default(),
                single(|s| s.shot = true),
                single(|s| s.dark = true),
                single(|s| s.leak = true),
                single(|s| s.hot = true),
                NoiseSources::ALL,
            ];
            writeln!(out, "sources,rate")?;
            for r in analysis::false_alarm_rate(cfg, bg.view(), a.steps, &combos)? {
                writeln!(out, "{},{}", r.sources.label(), r.rate)?;
            }
        }
        Task::Latency => {
            let values = required(&a.refractories, "--refractories", "latency")?;
            let scaling = analysis::latency_scaling(cfg, bg.view(), &values, a.steps)?;
            writeln!(out, "refractory,rate,ratio,expected")?;
            for (&(r, rate), ratio) in scaling.rates.iter().zip(&scaling.ratios) {
                let ratio = ratio.map_or(String::new(), |q| q.to_string());
                writeln!(out, "{r},{rate},{ratio},{}", cfg.dt as f64 / r as f64)?;
            }
        }
        Task::Detection => {
            let impulses = required(&a.impulses, "--impulses", "detection")?;
            writeln!(out, "impulse,probability")?;
            for i in impulses {
                writeln!(out, "{i},{}", analysis::detection_probability(cfg, bg.view(), i, a.trials)?)?;
            }
        }
        Task::Roc => {
            let impulse = required(&a.impulse, "--impulse", "roc")?;
            let sweep = required(&a.thresholds, "--thresholds", "roc")?;
            let curve = analysis::roc_curve(cfg, bg.view(), impulse, &sweep, a.trials)?;
            let area = analysis::auc(&curve)?;
            writeln!(out, "threshold,false_alarm,detection,auc")?;
            for (t, (fa, pd)) in curve.sweep_values.iter().zip(&curve.points[1..]) {
                writeln!(out, "{t},{fa},{pd},{area}")?;
            }
        }
        Task::Aucgrid | Task::Optimum => {
            let impulses = required(&a.impulses, "--impulses", "aucgrid")?;
            let thresholds = required(&a.thresholds, "--thresholds", "aucgrid")?;
            let levels = a.backgrounds.clone().unwrap_or_else(|| vec![background]);
            let grid = analysis::auc_grid(cfg, &levels, &impulses, &thresholds, a.trials)?;
            writeln!(out, "impulse,threshold,auc")?;
            if a.task == Task::Aucgrid {
                for ((i, t), v) in grid.auc.indexed_iter() {
                    writeln!(out, "{},{},{v}", grid.impulse_values[i], grid.threshold_values[t])?;
                }
            } else {
                let targets = match a.impulse {
                    Some(i) => vec![i],
                    None => impulses,
                };
                for target in targets {
                    let best = analysis::optimal_operating_point(&grid, target)?;
                    writeln!(out, "{},{},{}", best.impulse, best.threshold, best.auc)?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn is_flux(path: &Path) -> bool {
    path.is_dir() || extension(path) == "flx"
}

pub fn convert_cmd(a: &ConvertArgs) -> Result<()> {
    let doc = load_config(&a.common)?;
    if is_flux(&a.input) {
        let flux: FluxSequence = evio::read_flux_volume(&a.input)?;
        if extension(&a.out) == "flx" {
            evio::write_flux_raw(&flux, &a.out)?;
        } else {
            evio::write_flux_pgm_dir(&flux, &a.out)?;
        }
        return Ok(());
    }
    let stream = if extension(&a.input) == "frm" {
        frames_to_events(&evio::read_frames(&a.input)?)?
    } else {
        read_events(&a.input, &doc)?
    };
    if a.cloud {
        repr::export_point_cloud(&stream, &a.out)?;
    } else if extension(&a.out) == "frm" {
        let mode = match a.frame_mode {
            FrameKind::Polarity => FrameMode::Polarity,
            FrameKind::Count => FrameMode::Count,
        };
        let volume = match (a.bins, a.dt_bin) {
            (Some(n), None) => events_to_frames(&stream, n, mode)?,
            (None, Some(dt_bin)) => {
                let last = stream.records().last().map_or(a.t0, |r| r.t);
                if dt_bin == 0 || last < a.t0 {
                    return usage("--dt-bin must be positive and --t0 must not follow the last event");
                }
                let n_bins = ((last - a.t0) / dt_bin + 1) as usize;
                events_to_frames_binned(&stream, FrameBinning { t0: a.t0, dt_bin, n_bins }, mode)?
            }
            _ => return usage("converting to frames needs exactly one of --bins or --dt-bin"),
        };
        evio::write_frames(&volume, &a.out)?;
    } else {
        write_events(&stream, &a.out)?;
    }
    Ok(())
}

pub fn gradcheck_cmd(a: &GradcheckArgs) -> Result<()> {
    let mut doc = load_config(&a.common)?;
    if let Some(k) = a.steepness {
        doc.relax.steepness = k;
    }
    let flux = match &a.flux {
        Some(path) => evio::read_flux_volume(path)?,
        None => {
            let w = if doc.is_explicit("width") { doc.sensor.width } else { 4 };
            let h = if doc.is_explicit("height") { doc.sensor.height } else { 4 };
            smooth_flux_sequence(w, h, a.n_frames, doc.sensor.dt, doc.sensor.seed)?
        }
    };
    doc.sensor.width = flux.width();
    doc.sensor.height = flux.height();
    doc.sensor.dt = flux.dt();
    let report = grad_check(&doc.sensor, &flux, &doc.relax, a.tol)?;
    let mut out = sink(a.out.as_deref())?;
    writeln!(out, "{report}")?;
    out.flush()?;
    if !report.passed() {
        anyhow::bail!(
            "gradient check failed: max relative error {:e} exceeds {:e}",
            report.max_relative_error(),
            a.tol
        );
    }
    Ok(())
}
