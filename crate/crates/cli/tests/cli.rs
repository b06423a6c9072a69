use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ndarray::{Array2, Array3};

use evtwin_core::io;
use evtwin_core::{EventRecord, EventStream, FluxSequence};

fn evtwin(args: &[&str]) -> Output {
    evtwin_env(args, None)
}

fn evtwin_env(args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_evtwin"));
    cmd.args(args).env_remove("EVTWIN_SEED");
    if let Some(v) = seed_env {
        cmd.env("EVTWIN_SEED", v);
    }
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn flux_file(dir: &Path, frames: Array3<f64>) -> PathBuf {
    let path = dir.join("scene.flx");
    io::write_flux_raw(&FluxSequence::new(frames, 0, 1000).unwrap(), &path).unwrap();
    path
}

fn varying_flux(dir: &Path) -> PathBuf {
    let frames = Array3::from_shape_fn((20, 6, 5), |(j, x, y)| 300.0 + 150.0 * ((j + x) as f64 * 0.7 + y as f64).sin());
    flux_file(dir, frames)
}

fn sample_stream() -> EventStream {
    let recs = vec![
        EventRecord::new(0, 0, 0, 1),
        EventRecord::new(100, 1, 0, -1),
        EventRecord::new(200, 1, 1, 1),
        EventRecord::new(900, 3, 2, -1),
        EventRecord::new(1500, 0, 0, 1),
    ];
    EventStream::new(4, 3, 100, recs).unwrap()
}

#[test]
fn sensitivity_task_prints_the_threshold_flux() {
    let out = evtwin(&["analyze", "--task", "sensitivity", "--phi", "1000", "--tpos", "0.01", "--gain", "1"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("phi,theta_pos,theta_neg,gain,delta_phi_pos,delta_phi_neg"));
    let cols: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    let expected: f64 = 1000.0 * (1..20).map(|k| 0.01f64.powi(k) / (1..=k).map(f64::from).product::<f64>()).sum::<f64>();
    assert!((cols[4] - expected).abs() < 1e-9);
    assert!((cols[4] - 10.0502).abs() < 1e-4);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = evtwin(&["simulate", "--no-such-flag"]);
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage: evtwin"), "{err}");
    assert!(out.stdout.is_empty());

    assert_eq!(code(&evtwin(&[])), 1);
    assert_eq!(code(&evtwin(&["analyze", "--task", "roc"])), 1);
    assert_eq!(code(&evtwin(&["--help"])), 0);
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.evt");
    let out = evtwin(&["filter", "--input", p(&missing), "--out", p(&dir.path().join("o.evt")), "--method", "baf"]);
    assert_eq!(code(&out), 2);

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "t,x,y,p\n0,0,0,3\n").unwrap();
    let out = evtwin(&["convert", "--input", p(&bad), "--out", p(&dir.path().join("o.evt"))]);
    assert_eq!(code(&out), 2);

    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let out = evtwin(&["analyze", "--task", "sensitivity", "--phi", "1", "--config", p(&cfg)]);
    assert_eq!(code(&out), 2);

    let out = evtwin(&["analyze", "--task", "sensitivity", "--phi", "-5"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn static_noiseless_scene_is_silent() {
    let dir = tempfile::tempdir().unwrap();
    let flux = flux_file(dir.path(), Array3::from_elem((50, 16, 16), 500.0));
    let events = dir.path().join("e.evt");
    let out = evtwin(&["simulate", "--flux", p(&flux), "--out", p(&events)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stream = io::read_events_bin(&events).unwrap();
    assert!(stream.is_empty());
    assert_eq!((stream.width(), stream.height()), (16, 16));
}

fn noisy_sim(dir: &Path, name: &str, extra: &[&str], env: Option<&str>) -> Vec<u8> {
    let flux = varying_flux(dir);
    let events = dir.join(name);
    let mut args = vec![
        "simulate", "--flux", p(&flux), "--out", p(&events), "--shot-noise", "--sigma-dark", "5", "--leak", "0.05",
        "--tsigma", "0.02", "--tpos", "0.05", "--tneg", "-0.05",
    ];
    args.extend_from_slice(extra);
    let out = evtwin_env(&args, env);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    fs::read(events).unwrap()
}

#[test]
fn seeded_runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = noisy_sim(dir.path(), "a.evt", &["--seed", "42"], None);
    let b = noisy_sim(dir.path(), "b.evt", &["--seed", "42"], None);
    let c = noisy_sim(dir.path(), "c.evt", &["--seed", "43"], None);
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.len() > 24);

    let from_env = noisy_sim(dir.path(), "d.evt", &[], Some("42"));
    assert_eq!(a, from_env);
    let flag_wins = noisy_sim(dir.path(), "e.evt", &["--seed", "43"], Some("42"));
    assert_eq!(c, flag_wins);

    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "seed = 43\n").unwrap();
    let config_wins = noisy_sim(dir.path(), "f.evt", &["--config", p(&cfg)], Some("42"));
    assert_eq!(c, config_wins);

    let out = evtwin_env(&["analyze", "--task", "falarm"], Some("not-a-number"));
    assert_eq!(code(&out), 1);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "theta_pos_mean = 0.5\ngain = 2.0\n").unwrap();
    let out = evtwin(&["analyze", "--task", "sensitivity", "--phi", "1000", "--config", p(&cfg), "--gain", "1", "--tpos", "0.01"]);
    assert_eq!(code(&out), 0);
    let row = stdout(&out).lines().nth(1).unwrap().to_string();
    assert!(row.starts_with("1000,0.01,-0.2,1,10.0501"), "{row}");
}

#[test]
fn event_formats_convert_losslessly() {
    let dir = tempfile::tempdir().unwrap();
    let stream = sample_stream();
    let csv = dir.path().join("e.csv");
    io::write_events_csv(&stream, &csv).unwrap();
    let bin = dir.path().join("e.evt");
    let back = dir.path().join("back.csv");
    let size = ["--width", "4", "--height", "3", "--dt", "100"];

    let mut args = vec!["convert", "--input", p(&csv), "--out", p(&bin)];
    args.extend_from_slice(&size);
    assert_eq!(code(&evtwin(&args)), 0);
    assert_eq!(code(&evtwin(&["convert", "--input", p(&bin), "--out", p(&back)])), 0);
    assert_eq!(fs::read(&csv).unwrap(), fs::read(&back).unwrap());
    assert_eq!(io::read_events_bin(&bin).unwrap(), stream);

    let frm = dir.path().join("e.frm");
    let from_frames = dir.path().join("f.evt");
    let out = evtwin(&["convert", "--input", p(&bin), "--out", p(&frm), "--dt-bin", "100"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(io::read_frames(&frm).unwrap().n_bins(), 16);
    assert_eq!(code(&evtwin(&["convert", "--input", p(&frm), "--out", p(&from_frames)])), 0);
    assert_eq!(io::read_events_bin(&from_frames).unwrap(), stream);

    let out = evtwin(&["convert", "--input", p(&bin), "--out", p(&frm)]);
    assert_eq!(code(&out), 1);

    let cloud = dir.path().join("cloud.csv");
    assert_eq!(code(&evtwin(&["convert", "--input", p(&bin), "--out", p(&cloud), "--cloud"])), 0);
    let text = fs::read_to_string(cloud).unwrap();
    assert_eq!(text.lines().next(), Some("t,x,y,p,r,g,b"));
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn flux_converts_between_raw_and_pgm() {
    let dir = tempfile::tempdir().unwrap();
    let frames = Array3::from_shape_fn((3, 4, 2), |(j, x, y)| (100 * j + 10 * x + y) as f64);
    let raw = flux_file(dir.path(), frames.clone());
    let pgm = dir.path().join("pgm");
    let again = dir.path().join("again.flx");
    assert_eq!(code(&evtwin(&["convert", "--input", p(&raw), "--out", p(&pgm)])), 0);
    assert!(pgm.join("frame_00000.pgm").exists());
    assert_eq!(code(&evtwin(&["convert", "--input", p(&pgm), "--out", p(&again)])), 0);
    let flux = io::read_flux_volume(&again).unwrap();
    assert_eq!(flux.frames(), &frames);
    assert_eq!(flux.dt(), 1000);
}

#[test]
fn polarity_filter_keeps_one_sign() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.evt");
    io::write_events_bin(&sample_stream(), &input).unwrap();
    let output = dir.path().join("out.evt");
    let out = evtwin(&["filter", "--input", p(&input), "--out", p(&output), "--method", "polarity", "--keep", "positive"]);
    assert_eq!(code(&out), 0);
    let kept = io::read_events_bin(&output).unwrap();
    assert_eq!(kept.len(), 3);
    assert!(kept.iter().all(|r| r.p == 1));

    for method in ["baf", "ief", "ynoise"] {
        let out = evtwin(&["filter", "--input", p(&input), "--out", p(&output), "--method", method, "--baf-dt", "500"]);
        assert_eq!(code(&out), 0, "{method}");
        assert!(io::read_events_bin(&output).unwrap().len() <= 5);
    }
}

#[test]
fn count_surface_sums_to_event_count() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.evt");
    io::write_events_bin(&sample_stream(), &input).unwrap();
    let out = evtwin(&["surface", "--input", p(&input), "--mode", "count"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert_eq!(text.lines().next(), Some("x,y,value"));
    let mut grid = Array2::<f64>::zeros((4, 3));
    for line in text.lines().skip(1) {
        let v: Vec<&str> = line.split(',').collect();
        grid[[v[0].parse().unwrap(), v[1].parse().unwrap()]] = v[2].parse().unwrap();
    }
    assert_eq!(grid.sum(), 5.0);
    assert_eq!(grid[[0, 0]], 2.0);

    let file = dir.path().join("s.csv");
    let out = evtwin(&["surface", "--input", p(&input), "--out", p(&file), "--window", "0,0,2,2"]);
    assert_eq!(code(&out), 0);
    assert!(out.stdout.is_empty());
    assert_eq!(fs::read_to_string(file).unwrap().lines().count(), 13);
}

#[test]
fn reconstruction_writes_one_frame_per_event() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.evt");
    io::write_events_bin(&sample_stream(), &input).unwrap();
    let frames = dir.path().join("frames");
    let out = evtwin(&["reconstruct", "--input", p(&input), "--out-dir", p(&frames), "--tpos", "0.5", "--tneg", "-0.25"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let times = fs::read_to_string(frames.join("times.csv")).unwrap();
    assert_eq!(times.lines().count(), 6);
    let last = fs::read_to_string(frames.join("frame_00004.csv")).unwrap();
    let rows: Vec<Vec<f64>> = last.lines().map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0], vec![1.0, -0.25, 0.0, 0.0]);
    assert_eq!(rows[1], vec![0.0, 0.5, 0.0, 0.0]);
    assert_eq!(rows[2], vec![0.0, 0.0, 0.0, -0.25]);
}

#[test]
fn analysis_tables_go_to_stdout_or_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = evtwin(&["analyze", "--task", "falarm", "--width", "4", "--height", "4", "--leak", "0.1", "--steps", "200"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "sources,rate");
    assert!(rows.contains(&"none,0"));
    assert_eq!(rows.len(), 7);

    let file = dir.path().join("roc.csv");
    let out = evtwin(&[
        "analyze", "--task", "roc", "--width", "2", "--height", "2", "--shot-noise", "--impulse", "40",
        "--thresholds", "0.005,0.01,0.05", "--trials", "50", "--out", p(&file), "--threads", "2",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stdout.is_empty());
    assert_eq!(fs::read_to_string(&file).unwrap().lines().count(), 4);

    let out = evtwin(&[
        "analyze", "--task", "optimum", "--width", "2", "--height", "2", "--shot-noise", "--impulses", "20,40",
        "--thresholds", "0.005,0.01", "--trials", "30", "--impulse", "39",
    ]);
    assert_eq!(code(&out), 0);
    let row = stdout(&out).lines().nth(1).unwrap().to_string();
    assert!(row.starts_with("40,"), "{row}");

    let out = evtwin(&["analyze", "--task", "latency", "--width", "2", "--height", "2", "--leak", "0.4", "--refractories", "1000,4000", "--steps", "400"]);
    assert_eq!(code(&out), 0);
    assert_eq!(stdout(&out).lines().count(), 3);
    let out = evtwin(&["analyze", "--task", "latency", "--refractories", "10"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn gradcheck_passes_on_the_default_sequence() {
    let out = evtwin(&["gradcheck", "--seed", "3"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).lines().last().unwrap().ends_with("pass"));
}
