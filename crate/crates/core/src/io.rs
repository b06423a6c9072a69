//! Event, flux, frame-volume and configuration files.
//!
//! Binary layouts, all little-endian:
//!
//! Events (`EVT1`): 24-byte header `magic[4] version:u16 width:u16 height:u16
//! dt:u32 count:u64 reserved[2]`, then `count` records of 16 bytes
//! `t:u64 x:u16 y:u16 p:i8 pad[3]`.
//!
//! Flux (`FLX1`): 32-byte header `magic[4] version:u16 width:u16 height:u16
//! reserved:u16 n:u32 t0:u64 dt:u32 reserved:u32`, then `n * width * height`
//! `f32` samples, frame by frame, `x`-major (`index = x * height + y`).
//!
//! Frames (`FRM1`): 32-byte header `magic[4] version:u16 mode:u8 reserved:u8
//! width:u16 height:u16 n:u32 t0:u64 dt_bin:u64`, then `n * width * height`
//! `i32` cells in the same order. Mode 0 is polarity, 1 is count.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::codecs::pnm::{GraymapHeader, PnmEncoder, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageFormat};
use ndarray::{Array3, Array4};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::diff::RelaxationConfig;
use crate::error::{Error, Result};
use crate::events::{sort_and_validate, EventFrameVolume, EventRecord, EventStream, FluxSequence, FrameMode};
use crate::filters::FilterParams;
use crate::repr::csv_error;
use crate::sim::SensorConfig;

pub const FORMAT_VERSION: u16 = 1;
pub const EVENT_HEADER_LEN: usize = 24;
pub const EVENT_RECORD_LEN: usize = 16;
pub const FLUX_HEADER_LEN: usize = 32;
pub const FRAME_HEADER_LEN: usize = 32;

/// Sidecar file naming `t0` and `dt` for a graymap directory.
pub const TIMING_FILE: &str = "timing.txt";

pub fn write_events_csv(stream: &EventStream, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(["t", "x", "y", "p"]).map_err(csv_error)?;
    for r in stream {
        w.serialize((r.t, r.x, r.y, r.p)).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `t,x,y,p` rows (extra trailing columns are ignored) and sorts them.
pub fn read_events_csv(path: impl AsRef<Path>, width: u16, height: u16, dt: u64) -> Result<EventStream> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_error)?;
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(csv_error)?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |i: usize, name: &str| -> Result<i128> {
            let raw = row.get(i).ok_or_else(|| Error::Parse {
                line,
                message: format!("missing column `{name}`"),
            })?;
            raw.parse::<i128>().map_err(|e| Error::Parse {
                line,
                message: format!("column `{name}`: {e} ({raw:?})"),
            })
        };
        let (t, x, y, p) = (field(0, "t")?, field(1, "x")?, field(2, "y")?, field(3, "p")?);
        let Ok(t) = u64::try_from(t) else {
            return Err(Error::Parse {
                line,
                message: format!("timestamp {t} out of range"),
            });
        };
        if p != 1 && p != -1 {
            return Err(Error::Parse {
                line,
                message: format!("polarity must be +1 or -1, got {p}"),
            });
        }
        if !(0..i128::from(width)).contains(&x) || !(0..i128::from(height)).contains(&y) {
            return Err(Error::OutOfBounds {
                x: x.clamp(0, u32::MAX.into()) as u32,
                y: y.clamp(0, u32::MAX.into()) as u32,
                width,
                height,
            });
        }
        records.push(EventRecord::new(t, x as u16, y as u16, p as i8));
    }
    sort_and_validate(width, height, dt, records)
}

fn u32_field(value: u64, name: &str) -> Result<u32> {
    u32::try_from(value).map_err(|_| Error::InvalidArgument(format!("{name}={value} does not fit in 32 bits")))
}

pub fn write_events_bin(stream: &EventStream, path: impl AsRef<Path>) -> Result<()> {
    let dt = u32_field(stream.dt(), "dt")?;
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(b"EVT1")?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&stream.width().to_le_bytes())?;
    out.write_all(&stream.height().to_le_bytes())?;
    out.write_all(&dt.to_le_bytes())?;
    out.write_all(&(stream.len() as u64).to_le_bytes())?;
    out.write_all(&[0; 2])?;
    for r in stream {
        out.write_all(&r.t.to_le_bytes())?;
        out.write_all(&r.x.to_le_bytes())?;
        out.write_all(&r.y.to_le_bytes())?;
        out.write_all(&r.p.to_le_bytes())?;
        out.write_all(&[0; 3])?;
    }
    out.flush()?;
    Ok(())
}

/// Little-endian cursor over a byte slice.
struct Bytes<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Bytes<'a> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out = self.data[self.pos..self.pos + N].try_into().expect("length checked");
        self.pos += N;
        out
    }

    fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.take())
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }

    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }
}

fn check_magic(data: &[u8], magic: &'static str, header_len: usize) -> Result<()> {
    if data.len() >= 4 && &data[..4] != magic.as_bytes() {
        return Err(Error::BadMagic { expected: magic });
    }
    if data.len() < header_len {
        return Err(Error::TruncatedFile(format!(
            "{} bytes is shorter than the {header_len}-byte header",
            data.len()
        )));
    }
    Ok(())
}

fn check_payload(data: &[u8], header_len: usize, items: u64, item_len: usize) -> Result<()> {
    let expected = items
        .checked_mul(item_len as u64)
        .and_then(|n| n.checked_add(header_len as u64))
        .ok_or_else(|| Error::TruncatedFile(format!("header declares {items} items")))?;
    let actual = data.len() as u64;
    if actual < expected {
        return Err(Error::TruncatedFile(format!("expected {expected} bytes, found {actual}")));
    }
    if actual > expected {
        return Err(Error::InvariantViolation(format!(
            "{} trailing bytes after the declared payload",
            actual - expected
        )));
    }
    Ok(())
}

pub fn read_events_bin(path: impl AsRef<Path>) -> Result<EventStream> {
    let data = fs::read(path)?;
    check_magic(&data, "EVT1", EVENT_HEADER_LEN)?;
    let mut b = Bytes { data: &data, pos: 4 };
    let _version = b.u16();
    let width = b.u16();
    let height = b.u16();
    let dt = b.u32();
    let count = b.u64();
    check_payload(&data, EVENT_HEADER_LEN, count, EVENT_RECORD_LEN)?;
    b.pos = EVENT_HEADER_LEN;
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let t = b.u64();
        let x = b.u16();
        let y = b.u16();
        let [p] = b.take::<1>();
        let p = p as i8;
        b.pos += 3;
        if p != 1 && p != -1 {
            return Err(Error::BadPolarity(p.into()));
        }
        records.push(EventRecord::new(t, x, y, p));
    }
    sort_and_validate(width, height, u64::from(dt), records)
}

pub fn write_flux_raw(flux: &FluxSequence, path: impl AsRef<Path>) -> Result<()> {
    let n = u32::try_from(flux.n_frames()).map_err(|_| Error::InvalidArgument("too many frames".into()))?;
    let dt = u32_field(flux.dt(), "dt")?;
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(b"FLX1")?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&flux.width().to_le_bytes())?;
    out.write_all(&flux.height().to_le_bytes())?;
    out.write_all(&[0; 2])?;
    out.write_all(&n.to_le_bytes())?;
    out.write_all(&flux.t0().to_le_bytes())?;
    out.write_all(&dt.to_le_bytes())?;
    out.write_all(&[0; 4])?;
    for v in flux.frames().iter() {
        out.write_all(&(*v as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

fn read_flux_raw(path: &Path) -> Result<FluxSequence> {
    let data = fs::read(path)?;
    check_magic(&data, "FLX1", FLUX_HEADER_LEN)?;
    let mut b = Bytes { data: &data, pos: 4 };
    let _version = b.u16();
    let width = b.u16() as usize;
    let height = b.u16() as usize;
    b.pos += 2;
    let n = b.u32() as usize;
    let t0 = b.u64();
    let dt = b.u32();
    check_payload(&data, FLUX_HEADER_LEN, (n * width * height) as u64, 4)?;
    b.pos = FLUX_HEADER_LEN;
    let values = (0..n * width * height)
        .map(|_| f64::from(f32::from_le_bytes(b.take())))
        .collect();
    let frames = Array3::from_shape_vec((n, width, height), values)
        .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
    FluxSequence::new(frames, t0, u64::from(dt))
}

/// Reads a raw `FLX1` file, or a directory of graymap frames with a timing sidecar.
pub fn read_flux_volume(path: impl AsRef<Path>) -> Result<FluxSequence> {
    let path = path.as_ref();
    if path.is_dir() {
        read_flux_pgm_dir(path)
    } else {
        read_flux_raw(path)
    }
}

/// Writes `frame_NNNNN.pgm` (16-bit) plus the timing sidecar. Values must be
/// integers in `[0, 65535]`.
pub fn write_flux_pgm_dir(flux: &FluxSequence, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let (w, h) = (flux.width() as usize, flux.height() as usize);
    for j in 0..flux.n_frames() {
        let frame = flux.frame(j);
        let mut samples = vec![0u16; w * h];
        for ((x, y), &v) in frame.indexed_iter() {
            if !(0.0..=65535.0).contains(&v) || v.fract() != 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "graymap frames hold integers in [0, 65535], got {v}"
                )));
            }
            samples[y * w + x] = v as u16;
        }
        let file = BufWriter::new(fs::File::create(dir.join(format!("frame_{j:05}.pgm")))?);
        PnmEncoder::new(file)
            .with_header(
                GraymapHeader {
                    encoding: SampleEncoding::Binary,
                    width: w as u32,
                    height: h as u32,
                    maxwhite: 65535,
                }
                .into(),
            )
            .encode(&samples[..], w as u32, h as u32, ExtendedColorType::L16)
            .map_err(image_error)?;
    }
    fs::write(dir.join(TIMING_FILE), format!("t0={}\ndt={}\n", flux.t0(), flux.dt()))?;
    Ok(())
}

fn image_error(e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::InvalidArgument(other.to_string()),
    }
}

fn read_timing(path: &Path) -> Result<(u64, u64)> {
    let text = fs::read_to_string(path)?;
    let (mut t0, mut dt) = (None, None);
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            line: i as u64 + 1,
            message,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| parse_err(format!("expected key=value, got {line:?}")))?;
        let value: u64 = value
            .trim()
            .parse()
            .map_err(|e| parse_err(format!("{}: {e}", key.trim())))?;
        match key.trim() {
            "t0" => t0 = Some(value),
            "dt" => dt = Some(value),
            other => return Err(Error::UnknownKey(other.to_string())),
        }
    }
    match (t0, dt) {
        (Some(t0), Some(dt)) => Ok((t0, dt)),
        _ => Err(Error::Parse {
            line: 0,
            message: format!("{} must define t0 and dt", path.display()),
        }),
    }
}

fn read_flux_pgm_dir(dir: &Path) -> Result<FluxSequence> {
    let (t0, dt) = read_timing(&dir.join(TIMING_FILE))?;
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::DimensionMismatch(format!("no .pgm frames in {}", dir.display())));
    }
    let mut dims = None;
    let mut values = Vec::new();
    for file in &files {
        let reader = std::io::BufReader::new(fs::File::open(file)?);
        let img = image::load(reader, ImageFormat::Pnm).map_err(image_error)?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        if *dims.get_or_insert((w, h)) != (w, h) {
            return Err(Error::DimensionMismatch(format!(
                "{} is {w}x{h}, earlier frames are {:?}",
                file.display(),
                dims.unwrap()
            )));
        }
        let samples: Vec<f64> = match img {
            DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(f64::from).collect(),
            DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(f64::from).collect(),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "{} is not a grayscale graymap",
                    file.display()
                )))
            }
        };
        // image rows are y, columns x
        for x in 0..w {
            for y in 0..h {
                values.push(samples[y * w + x]);
            }
        }
    }
    let (w, h) = dims.expect("at least one frame");
    let frames = Array3::from_shape_vec((files.len(), w, h), values)
        .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
    FluxSequence::new(frames, t0, dt)
}

pub fn write_frames(volume: &EventFrameVolume, path: impl AsRef<Path>) -> Result<()> {
    let n = u32::try_from(volume.n_bins()).map_err(|_| Error::InvalidArgument("too many bins".into()))?;
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(b"FRM1")?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&[match volume.mode() {
        FrameMode::Polarity => 0,
        FrameMode::Count => 1,
    }])?;
    out.write_all(&[0])?;
    out.write_all(&volume.width().to_le_bytes())?;
    out.write_all(&volume.height().to_le_bytes())?;
    out.write_all(&n.to_le_bytes())?;
    out.write_all(&volume.t0().to_le_bytes())?;
    out.write_all(&volume.dt_bin().to_le_bytes())?;
    for v in volume.data().iter() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_frames(path: impl AsRef<Path>) -> Result<EventFrameVolume> {
    let data = fs::read(path)?;
    check_magic(&data, "FRM1", FRAME_HEADER_LEN)?;
    let mut b = Bytes { data: &data, pos: 4 };
    let _version = b.u16();
    let [mode, _] = b.take::<2>();
    let mode = match mode {
        0 => FrameMode::Polarity,
        1 => FrameMode::Count,
        other => return Err(Error::InvalidArgument(format!("unknown frame mode {other}"))),
    };
    let width = b.u16() as usize;
    let height = b.u16() as usize;
    let n = b.u32() as usize;
    let t0 = b.u64();
    let dt_bin = b.u64();
    check_payload(&data, FRAME_HEADER_LEN, (n * width * height) as u64, 4)?;
    let cells = (0..n * width * height).map(|_| i32::from_le_bytes(b.take())).collect();
    let arr = Array4::from_shape_vec((n, 1, width, height), cells)
        .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
    EventFrameVolume::new(arr, mode, t0, dt_bin)
}

/// Sensor, filter and relaxation settings from one flat key-value document.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConfigDocument {
    pub sensor: SensorConfig,
    pub filters: FilterParams,
    pub relax: RelaxationConfig,
    /// Keys present in the source document.
    pub explicit: BTreeSet<String>,
}

impl ConfigDocument {
    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    pub fn validate(&self) -> Result<()> {
        self.sensor.validate()?;
        self.filters.validate()?;
        self.relax.validate()
    }
}

fn keys_of<T: Serialize>(value: &T) -> BTreeSet<String> {
    toml::Table::try_from(value)
        .expect("config structs serialize to tables")
        .keys()
        .cloned()
        .collect()
}

fn section<T: DeserializeOwned>(table: toml::Table) -> Result<T> {
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::TypeMismatch(e.message().to_string()))
}

/// Parses a flat TOML document. Missing keys take defaults; unknown keys are rejected.
pub fn parse_config(text: &str) -> Result<ConfigDocument> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse {
        line: e
            .span()
            .map_or(0, |s| text[..s.start].matches('\n').count() as u64 + 1),
        message: e.message().to_string(),
    })?;
    let sensor_keys = keys_of(&SensorConfig::default());
    let filter_keys = keys_of(&FilterParams::default());
    let relax_keys = keys_of(&RelaxationConfig::default());
    let (mut sensor, mut filters, mut relax) = (toml::Table::new(), toml::Table::new(), toml::Table::new());
    let mut explicit = BTreeSet::new();
    for (key, value) in table {
        let target = if sensor_keys.contains(&key) {
            &mut sensor
        } else if filter_keys.contains(&key) {
            &mut filters
        } else if relax_keys.contains(&key) {
            &mut relax
        } else {
            return Err(Error::UnknownKey(key));
        };
        explicit.insert(key.clone());
        target.insert(key, value);
    }
    let doc = ConfigDocument {
        sensor: section(sensor)?,
        filters: section(filters)?,
        relax: section(relax)?,
        explicit,
    };
    doc.validate()?;
    Ok(doc)
}

pub fn read_config(path: impl AsRef<Path>) -> Result<ConfigDocument> {
    parse_config(&fs::read_to_string(path)?)
}

/// Renders every key of the document.
pub fn render_config(doc: &ConfigDocument) -> Result<String> {
    let mut table = toml::Table::new();
    let render = |e: toml::ser::Error| Error::InvalidArgument(e.to_string());
    table.extend(toml::Table::try_from(&doc.sensor).map_err(render)?);
    table.extend(toml::Table::try_from(doc.filters).map_err(render)?);
    table.extend(toml::Table::try_from(doc.relax).map_err(render)?);
    toml::to_string(&table).map_err(render)
}

pub fn write_config(doc: &ConfigDocument, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, render_config(doc)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(t: u64, x: u16, y: u16, p: i8) -> EventRecord {
        EventRecord::new(t, x, y, p)
    }

    #[test]
    fn csv_round_trip_and_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        let empty = EventStream::empty(4, 4, 10);
        write_events_csv(&empty, &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "t,x,y,p\n");
        assert!(read_events_csv(&path, 4, 4, 10).unwrap().is_empty());
        let s = EventStream::new(4, 4, 10, vec![ev(3, 1, 2, -1), ev(1, 3, 3, 1)]).unwrap();
        write_events_csv(&s, &path).unwrap();
        assert_eq!(read_events_csv(&path, 4, 4, 10).unwrap(), s);
    }

    #[test]
    fn csv_bad_polarity_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        fs::write(&path, "t,x,y,p\n5,1,2,0\n").unwrap();
        assert!(matches!(read_events_csv(&path, 4, 4, 1), Err(Error::Parse { line: 2, .. })));
        fs::write(&path, "t,x,y,p\n5,9,2,1\n").unwrap();
        assert!(matches!(read_events_csv(&path, 4, 4, 1), Err(Error::OutOfBounds { .. })));
        fs::write(&path, "t,x,y,p\n1,0,0,1\nx,1,2,1\n").unwrap();
        assert!(matches!(read_events_csv(&path, 4, 4, 1), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn csv_extra_columns_are_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.csv");
        fs::write(&path, "t,x,y,p,r,g,b\n1,0,0,1,255,0,0\n").unwrap();
        assert_eq!(read_events_csv(&path, 2, 2, 1).unwrap().records(), &[ev(1, 0, 0, 1)]);
    }

    #[test]
    fn binary_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        let s = EventStream::new(640, 480, 1000, vec![ev(7, 1, 2, -1), ev(9, 639, 479, 1)]).unwrap();
        write_events_bin(&s, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), EVENT_HEADER_LEN + 2 * EVENT_RECORD_LEN);
        assert_eq!(&bytes[..4], b"EVT1");
        assert_eq!(u16::from_le_bytes([bytes[6], bytes[7]]), 640);
        assert_eq!(bytes[EVENT_HEADER_LEN + 12] as i8, -1);
        assert_eq!(read_events_bin(&path).unwrap(), s);
    }

    #[test]
    fn binary_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        let s = EventStream::new(4, 4, 1, vec![ev(7, 1, 2, 1)]).unwrap();
        write_events_bin(&s, &path).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(read_events_bin(&path), Err(Error::BadMagic { .. })));

        fs::write(&path, &good[..good.len() - 1]).unwrap();
        assert!(matches!(read_events_bin(&path), Err(Error::TruncatedFile(_))));

        let mut bad = good.clone();
        bad[EVENT_HEADER_LEN + 12] = 0;
        fs::write(&path, &bad).unwrap();
        assert!(matches!(read_events_bin(&path), Err(Error::BadPolarity(0))));
    }

    #[test]
    fn flux_raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.flx");
        let frames = Array3::from_shape_fn((1, 3, 2), |(_, x, y)| (x * 10 + y) as f64 + 0.5);
        let flux = FluxSequence::new(frames, 100, 250).unwrap();
        write_flux_raw(&flux, &path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), (FLUX_HEADER_LEN + 6 * 4) as u64);
        let back = read_flux_volume(&path).unwrap();
        assert_eq!(back.n_frames(), 1);
        assert_eq!(back, flux);
    }

    #[test]
    fn flux_raw_rejects_negative() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.flx");
        let flux = FluxSequence::new(Array3::from_elem((1, 1, 1), 1.0), 0, 1).unwrap();
        write_flux_raw(&flux, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[FLUX_HEADER_LEN..].copy_from_slice(&(-1.0f32).to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_flux_volume(&path), Err(Error::NegativeFlux(_))));
    }

    #[test]
    fn pgm_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let frames = Array3::from_shape_fn((2, 3, 2), |(j, x, y)| if x == 2 && y == 1 { 65535.0 } else { (j * 100 + x * 10 + y) as f64 });
        let flux = FluxSequence::new(frames, 5, 40).unwrap();
        write_flux_pgm_dir(&flux, dir.path()).unwrap();
        let back = read_flux_volume(dir.path()).unwrap();
        assert_eq!(back, flux);
        assert_eq!(back.frames()[[1, 2, 1]], 65535.0);
    }

    #[test]
    fn frame_volume_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.frm");
        let data = Array4::from_shape_fn((3, 1, 2, 2), |(n, _, x, y)| (n as i32 + x as i32 - y as i32) - 1);
        let vol = EventFrameVolume::new(data, FrameMode::Count, 10, 5).unwrap();
        write_frames(&vol, &path).unwrap();
        assert_eq!(read_frames(&path).unwrap(), vol);
    }

    #[test]
    fn config_defaults_and_errors() {
        let doc = parse_config("").unwrap();
        assert_eq!(doc.sensor, SensorConfig::default());
        assert!(doc.explicit.is_empty());
        assert!(matches!(parse_config("theta_neg_mean = 0.01"), Err(Error::InvariantViolation(_))));
        assert!(matches!(parse_config("bogus = 1"), Err(Error::UnknownKey(k)) if k == "bogus"));
        assert!(matches!(parse_config("gain = \"high\""), Err(Error::TypeMismatch(_))));
        let doc = parse_config("seed = \"18446744073709551615\"\nbaf_dt = 50\nsteepness = 5.0").unwrap();
        assert_eq!(doc.sensor.seed, u64::MAX);
        assert_eq!(doc.filters.baf_dt, 50);
        assert_eq!(doc.relax.steepness, 5.0);
        assert!(doc.is_explicit("baf_dt"));
    }

    #[test]
    fn config_round_trip() {
        let mut doc = ConfigDocument::default();
        doc.sensor.gain = 1.0 / 3.0;
        doc.sensor.seed = u64::MAX - 1;
        doc.sensor.leak_chance = 0.001;
        doc.filters.ief_polarity_agnostic = true;
        doc.relax.use_hard_forward = true;
        let text = render_config(&doc).unwrap();
        let back = parse_config(&text).unwrap();
        assert_eq!(back.sensor, doc.sensor);
        assert_eq!(back.filters, doc.filters);
        assert_eq!(back.relax, doc.relax);
    }
}
