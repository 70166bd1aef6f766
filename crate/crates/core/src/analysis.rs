//! Power spectra, oriented streak energy, the depth-of-field relation and
//! per-pixel statistics over stacks of repeated runs.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::imaging::ImagePlane;

/// In-place iterative radix-2 FFT; `data.len()` must be a power of two.
pub fn fft_in_place(data: &mut [Complex64]) {
    let n = data.len();
    assert!(n.is_power_of_two(), "fft length {n} is not a power of two");
    if n < 2 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            data.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let step = Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI / len as f64);
        for chunk in data.chunks_mut(len) {
            let mut tw = Complex64::new(1.0, 0.0);
            let (lo, hi) = chunk.split_at_mut(len / 2);
            for (a, b) in lo.iter_mut().zip(hi.iter_mut()) {
                let t = *b * tw;
                *b = *a - t;
                *a += t;
                tw *= step;
            }
        }
        len <<= 1;
    }
}

/// 2-D row-column FFT of a row-major `h x w` buffer (both powers of two).
pub fn fft2(data: &mut [Complex64], h: usize, w: usize) {
    assert_eq!(data.len(), h * w);
    for row in data.chunks_mut(w) {
        fft_in_place(row);
    }
    let mut column = vec![Complex64::default(); h];
    for c in 0..w {
        for r in 0..h {
            column[r] = data[r * w + c];
        }
        fft_in_place(&mut column);
        for r in 0..h {
            data[r * w + c] = column[r];
        }
    }
}

/// Energy-normalized, DC-centered power spectrum.
///
/// Bin `(r, c)` holds frequency `(v, u) = (r - height / 2, c - width / 2)`
/// in units of cycles per padded image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerSpectrum {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub dc_centered: bool,
    /// `sum |F|^2` before normalization.
    pub raw_energy: f64,
}

impl PowerSpectrum {
    pub fn get(&self, v: isize, u: isize) -> f64 {
        let r = (v + (self.height / 2) as isize).rem_euclid(self.height as isize) as usize;
        let c = (u + (self.width / 2) as isize).rem_euclid(self.width as isize) as usize;
        self.values[r * self.width + c]
    }

    /// `log10` of the spectrum as an image, for display export.
    pub fn log_image(&self) -> ImagePlane {
        let floor = self.values.iter().copied().filter(|&v| v > 0.0).fold(f64::INFINITY, f64::min);
        let floor = if floor.is_finite() { floor } else { 1.0 };
        ImagePlane::from_fn(self.height, self.width, "log_power_spectrum", |r, c| {
            self.values[r * self.width + c].max(floor).log10()
        })
    }
}

/// Squared DFT magnitude of `img` zero-padded to powers of two, DC-centered
/// and normalized to unit total energy.
pub fn power_spectrum(img: &ImagePlane) -> Result<PowerSpectrum> {
    let (h, w) = (img.height.next_power_of_two(), img.width.next_power_of_two());
    let mut buf = vec![Complex64::default(); h * w];
    for r in 0..img.height {
        for c in 0..img.width {
            buf[r * w + c] = Complex64::new(img.get(r, c), 0.0);
        }
    }
    fft2(&mut buf, h, w);
    let raw: Vec<f64> = buf.iter().map(|z| z.norm_sqr()).collect();
    let raw_energy: f64 = raw.iter().sum();
    if raw_energy.is_nan() || raw_energy <= 0.0 {
        return Err(Error::Domain(format!("power spectrum of all-zero image `{}` cannot be normalized", img.label)));
    }
    let mut values = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let (sr, sc) = ((r + h / 2) % h, (c + w / 2) % w);
            values[sr * w + sc] = raw[r * w + c] / raw_energy;
        }
    }
    Ok(PowerSpectrum { height: h, width: w, values, dc_centered: true, raw_energy })
}

/// Fraction of spectral energy inside a band through the origin.
///
/// The band runs along direction `(u, v) = (cos t, sin t)` with `t =
/// direction_deg`, `u` pointing right and `v` pointing down; a bin is inside
/// when its perpendicular distance from the band axis is at most
/// `half_width_bins + 0.5`. The DC bin is always excluded.
pub fn streak_energy(spec: &PowerSpectrum, direction_deg: f64, half_width_bins: usize) -> Result<f64> {
    streak_energy_beyond(spec, direction_deg, half_width_bins, 0.0)
}

/// [`streak_energy`] restricted to bins at radius `>= min_radius_bins` from
/// DC, so that bulk low-frequency content does not mask a periodic streak.
pub fn streak_energy_beyond(
    spec: &PowerSpectrum,
    direction_deg: f64,
    half_width_bins: usize,
    min_radius_bins: f64,
) -> Result<f64> {
    if !(0.0..180.0).contains(&direction_deg) {
        return config_err(format!("streak direction {direction_deg} outside [0, 180)"));
    }
    let (s, c) = direction_deg.to_radians().sin_cos();
    let limit = half_width_bins as f64 + 0.5;
    let (mut inside, mut count, mut total) = (0.0, 0usize, 0.0);
    for r in 0..spec.height {
        for col in 0..spec.width {
            let v = r as f64 - (spec.height / 2) as f64;
            let u = col as f64 - (spec.width / 2) as f64;
            let val = spec.values[r * spec.width + col];
            total += val;
            if u == 0.0 && v == 0.0 {
                continue;
            }
            if (u * s - v * c).abs() <= limit && u.hypot(v) >= min_radius_bins {
                inside += val;
                count += 1;
            }
        }
    }
    if count + 1 >= spec.height * spec.width {
        return config_err(format!("streak band of half-width {half_width_bins} covers the whole spectrum"));
    }
    Ok(if total > 0.0 { inside / total } else { 0.0 })
}

/// Transverse resolution and wavelength for the depth-of-field relation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DofParams {
    pub delta_t_nm: f64,
    pub wavelength_nm: f64,
}

/// `hc` in keV nm.
pub const HC_KEV_NM: f64 = 1.23984;

impl DofParams {
    pub fn from_energy_kev(delta_t_nm: f64, energy_kev: f64) -> Result<Self> {
        if energy_kev.is_nan() || energy_kev <= 0.0 {
            return Err(Error::Domain(format!("photon energy must be positive, got {energy_kev} keV")));
        }
        Ok(DofParams { delta_t_nm, wavelength_nm: HC_KEV_NM / energy_kev })
    }
}

/// Depth of field `z = (2 / 0.61^2) delta_t^2 / lambda`, in micrometers.
pub fn depth_of_field(p: DofParams) -> Result<f64> {
    if [p.delta_t_nm, p.wavelength_nm].iter().any(|v| v.is_nan() || *v <= 0.0) {
        return Err(Error::Domain(format!(
            "depth of field needs positive resolution and wavelength, got {} nm and {} nm",
            p.delta_t_nm, p.wavelength_nm
        )));
    }
    let z_nm = 2.0 / (0.61 * 0.61) * p.delta_t_nm * p.delta_t_nm / p.wavelength_nm;
    Ok(z_nm * 1e-3)
}

/// Per-pixel sample standard deviation over a stack of same-shape images.
pub fn std_map(stack: &[ImagePlane]) -> Result<ImagePlane> {
    let Some(first) = stack.first() else {
        return config_err("std map needs at least two images, got 0");
    };
    if stack.len() < 2 {
        return config_err("std map needs at least two images, got 1");
    }
    if let Some(bad) = stack.iter().find(|img| !img.same_shape(first)) {
        return config_err(format!(
            "std map shape mismatch: {}x{} vs {}x{}",
            first.height, first.width, bad.height, bad.width
        ));
    }
    let n = stack.len() as f64;
    Ok(ImagePlane::from_fn(first.height, first.width, "std_map", |r, c| {
        // Shifted by the first sample, so identical stacks give exactly zero.
        let x0 = first.get(r, c);
        let mean = stack.iter().map(|img| img.get(r, c) - x0).sum::<f64>() / n;
        let ss: f64 = stack.iter().map(|img| (img.get(r, c) - x0 - mean).powi(2)).sum();
        (ss / (n - 1.0)).sqrt()
    })
    .with_pixel_size(first.pixel_size_nm))
}

/// Spatial mean of the [`std_map`] of `stack`.
pub fn mean_std(stack: &[ImagePlane]) -> Result<f64> {
    std_map(stack).map(|m| m.mean())
}
