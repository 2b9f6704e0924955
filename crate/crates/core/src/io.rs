//! File formats: binary image series, CSV tables and PGM renders.

use std::fs;
use std::path::Path;

use crate::analysis::{RocPoint, SegmentImage, SliceLevel};
use crate::curve::{CurveKind, SampledCurve};
use crate::error::{Error, Result};
use crate::image::{ImageSeries, Mask};
use crate::moco::MotionEstimate;

pub const MAGIC: &[u8; 4] = b"PQIS";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 26;

/// Encodes a series as `PQIS` bytes. Samples are stored as f32.
pub fn encode_series(series: &ImageSeries) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * series.data().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in [series.nt(), series.ny(), series.nx()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let (sy, sx) = series.spacing();
    out.extend_from_slice(&(sy as f32).to_le_bytes());
    out.extend_from_slice(&(sx as f32).to_le_bytes());
    for &v in series.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn f32_at(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

pub fn decode_series(bytes: &[u8]) -> Result<ImageSeries> {
    if bytes.len() < 4 {
        return Err(format_err(bytes.len(), "truncated magic"));
    }
    if let Some(k) = (0..4).find(|&k| bytes[k] != MAGIC[k]) {
        return Err(format_err(k, "bad magic, expected \"PQIS\""));
    }
    if bytes.len() < HEADER_LEN {
        return Err(format_err(bytes.len(), "truncated header"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let (nt, ny, nx) = (
        u32_at(bytes, 6) as usize,
        u32_at(bytes, 10) as usize,
        u32_at(bytes, 14) as usize,
    );
    let spacing = (f32_at(bytes, 18) as f64, f32_at(bytes, 22) as f64);
    let n = nt
        .checked_mul(ny)
        .and_then(|v| v.checked_mul(nx))
        .ok_or_else(|| format_err(6, "dimensions overflow"))?;
    let expect = HEADER_LEN + 4 * n;
    if bytes.len() != expect {
        return Err(format_err(
            bytes.len().min(expect),
            format!(
                "file length {} does not match dimensions {nt}x{ny}x{nx} ({expect} bytes)",
                bytes.len()
            ),
        ));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    ImageSeries::new(nt, ny, nx, spacing, data).map_err(|e| format_err(6, e.to_string()))
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        e => e,
    })
}

pub fn write_series(path: &Path, series: &ImageSeries) -> Result<()> {
    with_path(path, fs::write(path, encode_series(series)).map_err(Error::from))
}

pub fn read_series(path: &Path) -> Result<ImageSeries> {
    let bytes = with_path(path, fs::read(path).map_err(Error::from))?;
    with_path(path, decode_series(&bytes))
}

/// Single-frame map with the given spacing.
pub fn map_series(values: &[f64], ny: usize, nx: usize, spacing: (f64, f64)) -> Result<ImageSeries> {
    ImageSeries::new(1, ny, nx, spacing, values.to_vec())
}

pub fn read_map(path: &Path) -> Result<ImageSeries> {
    let s = read_series(path)?;
    if s.nt() != 1 {
        return Err(format_err(
            6,
            format!(
                "{}: expected a single-frame map, found {} frames",
                path.display(),
                s.nt()
            ),
        ));
    }
    Ok(s)
}

pub fn mask_to_series(mask: &Mask, spacing: (f64, f64)) -> Result<ImageSeries> {
    let v: Vec<f64> = mask.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    map_series(&v, mask.ny(), mask.nx(), spacing)
}

pub fn series_to_mask(s: &ImageSeries) -> Result<Mask> {
    Mask::new(s.ny(), s.nx(), s.frame(0).iter().map(|&v| v != 0.0).collect())
}

pub fn segments_to_series(seg: &SegmentImage, spacing: (f64, f64)) -> Result<ImageSeries> {
    let v: Vec<f64> = seg.labels.iter().map(|&l| l as f64).collect();
    map_series(&v, seg.ny, seg.nx, spacing)
}

pub fn series_to_segments(s: &ImageSeries, level: SliceLevel) -> Result<SegmentImage> {
    let labels = s
        .frame(0)
        .iter()
        .map(|&v| {
            if (0.0..=32.0).contains(&v) && v.fract() == 0.0 {
                Ok(v as u8)
            } else {
                Err(Error::InvalidArgument(format!("invalid segment label {v}")))
            }
        })
        .collect::<Result<_>>()?;
    Ok(SegmentImage {
        ny: s.ny(),
        nx: s.nx(),
        level,
        labels,
    })
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        kind => Error::Format {
            offset,
            message: format!("{}: {kind:?}", path.display()),
        },
    }
}

/// Numeric rows of a CSV file with the given header.
fn read_rows(path: &Path, header: &[&str]) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let found = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if found.iter().collect::<Vec<_>>() != header {
        return Err(format_err(
            0,
            format!("{}: expected header {}", path.display(), header.join(",")),
        ));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let offset = rec.position().map_or(0, |p| p.byte()) as usize;
        let row = rec
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| format_err(offset, format!("{}: not a number: {f:?}", path.display())))
            })
            .collect::<Result<Vec<f64>>>()?;
        if row.len() != header.len() {
            return Err(format_err(
                offset,
                format!("{}: expected {} fields", path.display(), header.len()),
            ));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_curve(path: &Path, curve: &SampledCurve) -> Result<()> {
    let rows = curve
        .times()
        .iter()
        .zip(curve.values())
        .map(|(t, v)| vec![t.to_string(), v.to_string()]);
    write_rows(path, &["t", "value"], rows)
}

pub fn read_curve(path: &Path, kind: CurveKind) -> Result<SampledCurve> {
    let rows = read_rows(path, &["t", "value"])?;
    let (t, v) = rows.into_iter().map(|r| (r[0], r[1])).unzip();
    SampledCurve::new(t, v, kind)
}

pub fn write_motion(path: &Path, motion: &MotionEstimate) -> Result<()> {
    let rows = motion
        .shifts
        .iter()
        .enumerate()
        .map(|(k, (dy, dx))| vec![k.to_string(), dy.to_string(), dx.to_string()]);
    write_rows(path, &["frame", "dy_px", "dx_px"], rows)
}

pub fn read_motion(path: &Path) -> Result<MotionEstimate> {
    let rows = read_rows(path, &["frame", "dy_px", "dx_px"])?;
    for (k, r) in rows.iter().enumerate() {
        if r[0] != k as f64 {
            return Err(format_err(
                0,
                format!("{}: frame {} out of order", path.display(), r[0]),
            ));
        }
    }
    Ok(MotionEstimate {
        shifts: rows.into_iter().map(|r| (r[1], r[2])).collect(),
    })
}

pub fn write_roc(path: &Path, points: &[RocPoint]) -> Result<()> {
    let rows = points.iter().map(|p| {
        vec![
            p.threshold.to_string(),
            p.sensitivity.to_string(),
            p.specificity.to_string(),
        ]
    });
    write_rows(path, &["threshold", "sensitivity", "specificity"], rows)
}

/// Grey level of `v` in the window `[wmin, wmax]`; NaN maps to black.
pub fn grey_level(v: f64, wmin: f64, wmax: f64) -> u8 {
    if !v.is_finite() {
        return if v.is_nan() || v < 0.0 { 0 } else { 255 };
    }
    let s = ((v - wmin) / (wmax - wmin)).clamp(0.0, 1.0);
    (255.0 * s).round() as u8
}

/// Binary 8-bit PGM (P5) render of one frame.
pub fn encode_pgm(frame: &[f64], ny: usize, nx: usize, wmin: f64, wmax: f64) -> Result<Vec<u8>> {
    if frame.len() != ny * nx {
        return Err(Error::InvalidArgument("frame size does not match dimensions".into()));
    }
    if !(wmax > wmin) || !wmin.is_finite() || !wmax.is_finite() {
        return Err(Error::InvalidArgument(format!("window [{wmin}, {wmax}] is empty")));
    }
    let mut out = format!("P5\n{nx} {ny}\n255\n").into_bytes();
    out.extend(frame.iter().map(|&v| grey_level(v, wmin, wmax)));
    Ok(out)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    with_path(path, fs::write(path, s).map_err(Error::from))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let s = with_path(path, fs::read_to_string(path).map_err(Error::from))?;
    serde_json::from_str(&s).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ImageSeries {
        let data = (0..24).map(|k| k as f64 * 0.25 - 1.0).collect();
        ImageSeries::new(2, 3, 4, (1.5, 2.0), data).unwrap()
    }

    #[test]
    fn series_round_trip() {
        let s = sample();
        let b = encode_series(&s);
        assert_eq!(b.len(), HEADER_LEN + 4 * 24);
        let d = decode_series(&b).unwrap();
        assert_eq!(d, s);
        assert_eq!(encode_series(&d), b);
    }

    #[test]
    fn bad_magic_reports_offset() {
        let mut b = encode_series(&sample());
        b[2] = b'X';
        match decode_series(&b) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let mut b = encode_series(&sample());
        b.pop();
        assert!(matches!(decode_series(&b), Err(Error::Format { .. })));
        assert!(matches!(decode_series(b"PQ"), Err(Error::Format { offset: 2, .. })));
    }

    #[test]
    fn pgm_window() {
        let p = encode_pgm(&[f64::NAN, 0.0, 1.0, 2.0], 2, 2, 0.0, 2.0).unwrap();
        assert_eq!(&p[..11], b"P5\n2 2\n255\n");
        assert_eq!(&p[11..], &[0, 0, 128, 255]);
        assert!(encode_pgm(&[0.0], 1, 1, 1.0, 1.0).is_err());
    }
}
