//! Image planes, the raw `.f32` + `.meta` storage format, standardization and
//! 8-bit display export.
//!
//! A raw image `name.f32` holds `height * width` little-endian `f32` values in
//! row-major order. The sidecar `name.meta` is a single line of
//! `key=value` pairs separated by commas:
//!
//! ```text
//! height=128,width=128,pixel_size_nm=8.7
//! ```
//!
//! `pixel_size_nm` is optional.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

/// A 2-D real-valued grayscale image with optional pixel-size metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImagePlane {
    pub height: usize,
    pub width: usize,
    /// Row-major pixel values.
    pub pixels: Vec<f64>,
    pub pixel_size_nm: Option<f64>,
    pub label: String,
}

impl ImagePlane {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>, label: impl Into<String>) -> Result<Self> {
        if pixels.len() != height * width {
            return config_err(format!("image {height}x{width} needs {} pixels, got {}", height * width, pixels.len()));
        }
        if let Some(i) = pixels.iter().position(|v| !v.is_finite()) {
            return config_err(format!("image pixel {i} is not finite"));
        }
        Ok(ImagePlane { height, width, pixels, pixel_size_nm: None, label: label.into() })
    }

    pub fn from_fn(height: usize, width: usize, label: impl Into<String>, f: impl Fn(usize, usize) -> f64) -> Self {
        let pixels = (0..height * width).map(|k| f(k / width, k % width)).collect();
        ImagePlane { height, width, pixels, pixel_size_nm: None, label: label.into() }
    }

    pub fn with_pixel_size(mut self, nm: Option<f64>) -> Self {
        self.pixel_size_nm = nm;
        self
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn same_shape(&self, other: &ImagePlane) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.pixels.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.pixels.len() as f64).sqrt()
    }
}

/// Mean and standard deviation removed by [`standardize`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRecord {
    pub mean: f64,
    pub std: f64,
}

/// Shift and scale to zero mean, unit (population) standard deviation.
pub fn standardize(img: &ImagePlane) -> Result<(ImagePlane, NormalizationRecord)> {
    let rec = NormalizationRecord { mean: img.mean(), std: img.std() };
    if rec.std.is_nan() || rec.std <= 0.0 || rec.std <= f64::EPSILON * rec.mean.abs() {
        return config_err(format!("cannot standardize constant image `{}`", img.label));
    }
    let mut out = img.clone();
    out.pixels.iter_mut().for_each(|v| *v = (*v - rec.mean) / rec.std);
    Ok((out, rec))
}

pub fn destandardize(img: &ImagePlane, rec: &NormalizationRecord) -> ImagePlane {
    let mut out = img.clone();
    out.pixels.iter_mut().for_each(|v| *v = *v * rec.std + rec.mean);
    out
}

/// Sidecar path belonging to a raw image path.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta")
}

/// Write `img` as `path` (raw `f32`) plus its `.meta` sidecar.
pub fn save_raw(img: &ImagePlane, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(img.pixels.len() * 4);
    for &v in &img.pixels {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let mut meta = format!("height={},width={}", img.height, img.width);
    if let Some(nm) = img.pixel_size_nm {
        meta.push_str(&format!(",pixel_size_nm={nm}"));
    }
    meta.push('\n');
    let side = sidecar_path(path);
    fs::write(&side, meta).map_err(|e| Error::io(&side, e))
}

fn parse_meta(side: &Path, text: &str) -> Result<(usize, usize, Option<f64>)> {
    let bad = |reason: String| Error::Format { path: side.to_path_buf(), reason };
    let (mut h, mut w, mut nm) = (None, None, None);
    for field in text.trim().split(',').filter(|f| !f.trim().is_empty()) {
        let (k, v) = field.split_once('=').ok_or_else(|| bad(format!("field `{field}` is not key=value")))?;
        let v = v.trim();
        match k.trim() {
            "height" => h = Some(v.parse::<usize>().map_err(|e| bad(format!("height: {e}")))?),
            "width" => w = Some(v.parse::<usize>().map_err(|e| bad(format!("width: {e}")))?),
            "pixel_size_nm" => nm = Some(v.parse::<f64>().map_err(|e| bad(format!("pixel_size_nm: {e}")))?),
            other => return Err(bad(format!("unknown key `{other}`"))),
        }
    }
    match (h, w) {
        (Some(h), Some(w)) => Ok((h, w, nm)),
        _ => Err(bad("missing height or width".into())),
    }
}

/// Read a raw image, taking its shape from the `.meta` sidecar.
pub fn load_raw(path: &Path) -> Result<ImagePlane> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let (h, w, nm) = parse_meta(&side, &text)?;
    load_raw_sized(path, h, w).map(|img| img.with_pixel_size(nm))
}

/// Read a raw image of known shape, checking the byte count.
pub fn load_raw_sized(path: &Path, height: usize, width: usize) -> Result<ImagePlane> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = (height * width * 4) as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch { path: path.to_path_buf(), expected, actual: bytes.len() as u64 });
    }
    let pixels = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    ImagePlane::new(height, width, pixels, label).map_err(|e| match e {
        Error::Config(reason) => Error::Format { path: path.to_path_buf(), reason },
        other => other,
    })
}

/// Map `img` to 8-bit gray levels over `[mean - 4 std, mean + 4 std]`, clamped.
pub fn display_levels(img: &ImagePlane) -> Vec<u8> {
    let (m, s) = (img.mean(), img.std());
    let (lo, hi) = (m - 4.0 * s, m + 4.0 * s);
    img.pixels
        .iter()
        .map(|&v| if hi <= lo { 128 } else { (((v - lo) / (hi - lo)) * 255.0).round().clamp(0.0, 255.0) as u8 })
        .collect()
}

/// Write a binary 8-bit portable graymap (`P5`) of [`display_levels`].
pub fn export_display(img: &ImagePlane, path: &Path) -> Result<()> {
    write_pgm(path, img.height, img.width, &display_levels(img))
}

pub(crate) fn write_pgm(path: &Path, height: usize, width: usize, levels: &[u8]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    write!(f, "P5\n{width} {height}\n255\n").map_err(io)?;
    f.write_all(levels).map_err(io)?;
    f.flush().map_err(io)
}
