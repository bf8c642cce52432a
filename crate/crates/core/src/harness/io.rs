//! Metric CSVs and binary PPM frames.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::frame::Frame;

/// One scored frame of a stream.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub frame_index: u64,
    pub scene_id: usize,
    pub ssim_ensemble: f64,
    pub ssim_pretrained: f64,
    pub ssim_continuous: f64,
    pub ssim_repeat: f64,
    pub psnr_ensemble: f64,
    pub psnr_pretrained: f64,
    pub psnr_continuous: f64,
    pub psnr_repeat: f64,
    pub updated: bool,
    pub loss: Option<f64>,
}

pub const CSV_HEADER: [&str; 12] = [
    "frame_index",
    "scene_id",
    "ssim_ensemble",
    "ssim_pretrained",
    "ssim_continuous",
    "ssim_repeat",
    "psnr_ensemble",
    "psnr_pretrained",
    "psnr_continuous",
    "psnr_repeat",
    "updated",
    "loss",
];

fn fixed(v: f64) -> String {
    format!("{v:.6}")
}

impl MetricRecord {
    pub fn ssim(&self) -> [f64; 4] {
        [
            self.ssim_ensemble,
            self.ssim_pretrained,
            self.ssim_continuous,
            self.ssim_repeat,
        ]
    }

    pub fn psnr(&self) -> [f64; 4] {
        [
            self.psnr_ensemble,
            self.psnr_pretrained,
            self.psnr_continuous,
            self.psnr_repeat,
        ]
    }

    fn to_row(&self) -> Vec<String> {
        let mut row = vec![self.frame_index.to_string(), self.scene_id.to_string()];
        row.extend(self.ssim().into_iter().chain(self.psnr()).map(fixed));
        row.push(u8::from(self.updated).to_string());
        row.push(self.loss.map(fixed).unwrap_or_default());
        row
    }

    fn from_row(row: &csv::StringRecord, path: &Path, line: usize) -> Result<Self> {
        let bad = |what: &str| Error::format(path, format!("line {line}: bad {what}"));
        if row.len() != CSV_HEADER.len() {
            return Err(bad("column count"));
        }
        let real = |i: usize| row[i].parse::<f64>().map_err(|_| bad(CSV_HEADER[i]));
        Ok(MetricRecord {
            frame_index: row[0].parse().map_err(|_| bad("frame_index"))?,
            scene_id: row[1].parse().map_err(|_| bad("scene_id"))?,
            ssim_ensemble: real(2)?,
            ssim_pretrained: real(3)?,
            ssim_continuous: real(4)?,
            ssim_repeat: real(5)?,
            psnr_ensemble: real(6)?,
            psnr_pretrained: real(7)?,
            psnr_continuous: real(8)?,
            psnr_repeat: real(9)?,
            updated: match &row[10] {
                "1" => true,
                "0" => false,
                _ => return Err(bad("updated")),
            },
            loss: if row[11].is_empty() { None } else { Some(real(11)?) },
        })
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}

/// Writes records with a fixed header; reals use 6 decimals.
pub fn write_csv(records: &[MetricRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(CSV_HEADER).map_err(|e| csv_err(path, e))?;
    for r in records {
        w.write_record(r.to_row()).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?;
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::format(path, "unexpected header"));
    }
    r.records()
        .enumerate()
        .map(|(i, row)| MetricRecord::from_row(&row.map_err(|e| csv_err(path, e))?, path, i + 2))
        .collect()
}

/// Writes any table of reals with the given header, 6 decimals per value.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn fmt6(v: f64) -> String {
    fixed(v)
}

/// Encodes a frame as binary PPM (P6, maxval 255), rounding to nearest.
pub fn write_ppm(frame: &Frame, path: &Path) -> Result<()> {
    let (h, w) = frame.dims();
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.reserve(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                bytes.push((frame.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Decodes an 8-bit binary PPM, mapping `v` to `v / 255`.
pub fn read_ppm(path: &Path) -> Result<Frame> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |d: &str| Error::format(path, d.to_string());
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PPM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII PPM header"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("not a binary PPM (expected magic P6)"));
    }
    let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad PPM {what} {s:?}")));
    let (w, h, maxval) = (
        num(fields[1], "width")?,
        num(fields[2], "height")?,
        num(fields[3], "maxval")?,
    );
    if maxval != 255 {
        return Err(bad(&format!("only 8-bit PPM is supported, maxval is {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(bad("PPM has zero size"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != 3 * w * h {
        return Err(bad(&format!(
            "expected {} raster bytes, found {}",
            3 * w * h,
            raster.len()
        )));
    }
    Ok(Frame::from_fn(h, w, |c, y, x| {
        raster[(y * w + x) * 3 + c] as f32 / 255.0
    }))
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:06}.ppm")
}

/// Reads `frame_%06d.ppm` files from `dir`. Indices must be contiguous
/// from the smallest one present, and every frame must have the same size.
pub fn read_sequence(dir: &Path) -> Result<Vec<Frame>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut indexed: Vec<(usize, PathBuf)> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(num) = name.strip_prefix("frame_").and_then(|n| n.strip_suffix(".ppm")) else {
            continue;
        };
        if num.len() != 6 || !num.bytes().all(|b| b.is_ascii_digit()) {
            return Err(Error::format(&path, "frame files must be named frame_%06d.ppm"));
        }
        indexed.push((num.parse().unwrap(), path));
    }
    if indexed.is_empty() {
        return Err(Error::format(dir, "no frame_%06d.ppm files"));
    }
    indexed.sort();
    let first = indexed[0].0;
    let mut frames: Vec<Frame> = Vec::with_capacity(indexed.len());
    for (i, (idx, path)) in indexed.iter().enumerate() {
        if *idx != first + i {
            return Err(Error::format(
                path,
                format!(
                    "frame indices are not contiguous: expected {}",
                    frame_file_name(first + i)
                ),
            ));
        }
        let f = read_ppm(path)?;
        if let Some(prev) = frames.last() {
            if prev.dims() != f.dims() {
                return Err(Error::format(
                    path,
                    format!("size {:?} differs from {:?}", f.dims(), prev.dims()),
                ));
            }
        }
        frames.push(f);
    }
    Ok(frames)
}
