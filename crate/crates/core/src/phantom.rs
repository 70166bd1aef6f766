//! Synthetic crosstalk phantoms with known ground truth, and the metrics that
//! score a separation against them.
//!
//! Slice 1 holds strongly scattering disks and, optionally, a patch of linear
//! grating. Slice 2 holds a large smooth blob with internal texture. The
//! observations follow the blending model
//!
//! ```text
//! I1 = a1 * y1 + (1 - a1) * lowpass(y2)
//! I2 = a2 * highpass(y1) + (1 - a2) * y2
//! ```
//!
//! with `lowpass` a 7x7 box filter and `highpass = identity - lowpass`, both
//! with reflection at the borders, plus white Gaussian noise. So slice 2
//! shows sharp ghost disks and a ghost grating, and slice 1 a faint, smooth
//! ghost of the blob.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::analysis::{power_spectrum, streak_energy_beyond};
use crate::error::{config_err, Result};
use crate::imaging::ImagePlane;
use crate::rng::RunSeed;
use crate::tensor::conv::reflect_index;

/// Box size of the phantom's band-loss filters.
pub const PHANTOM_FILTER: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiskScene {
    pub count: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub amplitude: f64,
}

/// A circular patch of sinusoidal grating, the zone-plate analogue.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GratingScene {
    pub period: f64,
    /// Direction of the grating wave vector, degrees in `[0, 180)`, measured
    /// from the column axis towards increasing row index.
    pub orientation_deg: f64,
    pub amplitude: f64,
    /// Patch center and radius as fractions of the image size.
    pub center: (f64, f64),
    pub radius: f64,
}

/// Smooth elliptical blob with a random band-limited internal texture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobScene {
    /// Semi-axes as fractions of the image size.
    pub semi_axes: (f64, f64),
    pub edge_px: f64,
    pub amplitude: f64,
    pub texture_amplitude: f64,
    pub texture_components: usize,
    pub texture_period_min: f64,
    pub texture_period_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlendSpec {
    pub alpha1: f64,
    pub alpha2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub size: usize,
    pub disks: DiskScene,
    pub grating: Option<GratingScene>,
    pub blob: BlobScene,
    pub blend: BlendSpec,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            size: 128,
            disks: DiskScene { count: 10, radius_min: 3.0, radius_max: 8.0, amplitude: 1.0 },
            grating: Some(GratingScene {
                period: 6.0,
                orientation_deg: 30.0,
                amplitude: 0.6,
                center: (0.3, 0.7),
                radius: 0.2,
            }),
            blob: BlobScene {
                semi_axes: (0.3, 0.22),
                edge_px: 3.0,
                amplitude: 1.0,
                texture_amplitude: 0.3,
                texture_components: 8,
                texture_period_min: 10.0,
                texture_period_max: 32.0,
            },
            blend: BlendSpec { alpha1: 0.85, alpha2: 0.3 },
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.size as f64;
        if self.size < 8 {
            return config_err(format!("phantom size {} is below 8", self.size));
        }
        for (name, a) in [("alpha1", self.blend.alpha1), ("alpha2", self.blend.alpha2)] {
            if !(0.0..=1.0).contains(&a) {
                return config_err(format!("{name} = {a} outside [0, 1]"));
            }
        }
        let d = &self.disks;
        if !(d.radius_min > 0.0 && d.radius_min <= d.radius_max) {
            return config_err(format!("disk radius range [{}, {}] is invalid", d.radius_min, d.radius_max));
        }
        if 2.0 * d.radius_max > n {
            return config_err(format!("disk radius {} does not fit a {}-pixel phantom", d.radius_max, self.size));
        }
        if let Some(g) = &self.grating {
            if g.period < 4.0 {
                return config_err(format!("grating period {} is below 4 px", g.period));
            }
            if !(0.0..180.0).contains(&g.orientation_deg) {
                return config_err(format!("grating orientation {} outside [0, 180)", g.orientation_deg));
            }
            if !(g.radius > 0.0 && g.radius <= 0.5) {
                return config_err(format!("grating radius fraction {} outside (0, 0.5]", g.radius));
            }
        }
        let b = &self.blob;
        if !(b.semi_axes.0 > 0.0 && b.semi_axes.1 > 0.0 && b.semi_axes.0 <= 0.5 && b.semi_axes.1 <= 0.5) {
            return config_err(format!("blob semi-axes {:?} outside (0, 0.5]", b.semi_axes));
        }
        if !(b.texture_period_min >= 2.0 && b.texture_period_min <= b.texture_period_max) {
            return config_err("blob texture period range is invalid");
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return config_err(format!("noise_sigma {} is negative", self.noise_sigma));
        }
        Ok(())
    }
}

/// Ground truth, observations and the parameters that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomBundle {
    pub spec: PhantomSpec,
    pub y1_true: ImagePlane,
    pub y2_true: ImagePlane,
    pub i1_obs: ImagePlane,
    pub i2_obs: ImagePlane,
}

/// `k x k` box mean with reflection at the borders.
pub fn box_lowpass(img: &ImagePlane, k: usize) -> ImagePlane {
    let r = (k / 2) as isize;
    let norm = (k * k) as f64;
    ImagePlane::from_fn(img.height, img.width, format!("lowpass({})", img.label), |y, x| {
        let mut acc = 0.0;
        for dy in -r..=r {
            let sy = reflect_index(y as isize + dy, img.height);
            for dx in -r..=r {
                acc += img.get(sy, reflect_index(x as isize + dx, img.width));
            }
        }
        acc / norm
    })
}

/// `identity - box_lowpass`.
pub fn box_highpass(img: &ImagePlane, k: usize) -> ImagePlane {
    let low = box_lowpass(img, k);
    ImagePlane::from_fn(img.height, img.width, format!("highpass({})", img.label), |y, x| img.get(y, x) - low.get(y, x))
}

fn blend(a: f64, x: &ImagePlane, b: f64, y: &ImagePlane, label: &str) -> ImagePlane {
    ImagePlane::from_fn(x.height, x.width, label, |r, c| a * x.get(r, c) + b * y.get(r, c))
}

/// Build the phantom described by `spec`; the same spec always yields the
/// same bundle.
pub fn generate(spec: &PhantomSpec) -> Result<PhantomBundle> {
    spec.validate()?;
    let n = spec.size;
    let nf = n as f64;
    let seed = RunSeed(spec.seed);

    let mut rng = seed.stream(1);
    let d = &spec.disks;
    let disks: Vec<(f64, f64, f64)> = (0..d.count)
        .map(|_| {
            let rad = rng.random_range(d.radius_min..=d.radius_max);
            let cy = rng.random_range(rad..=nf - rad);
            let cx = rng.random_range(rad..=nf - rad);
            (cy, cx, rad)
        })
        .collect();

    let mut rng = seed.stream(2);
    let b = &spec.blob;
    let texture: Vec<(f64, f64, f64, f64)> = (0..b.texture_components)
        .map(|_| {
            let period = rng.random_range(b.texture_period_min..=b.texture_period_max);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = rng.random_range(0.5..=1.0);
            (std::f64::consts::TAU / period, theta, phase, amp)
        })
        .collect();
    let texture_norm: f64 = texture.iter().map(|t| t.3).sum::<f64>().max(1e-12);

    let y1_true = ImagePlane::from_fn(n, n, "slice1_true", |r, c| {
        let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
        let mut v = 0.0;
        for &(cy, cx, rad) in &disks {
            let dist = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
            v += d.amplitude * (rad - dist + 0.5).clamp(0.0, 1.0);
        }
        if let Some(g) = &spec.grating {
            let (gy, gx) = (g.center.0 * nf, g.center.1 * nf);
            let dist = ((y - gy).powi(2) + (x - gx).powi(2)).sqrt();
            let window = (g.radius * nf - dist + 0.5).clamp(0.0, 1.0);
            let (s, co) = g.orientation_deg.to_radians().sin_cos();
            let phase = std::f64::consts::TAU * (c as f64 * co + r as f64 * s) / g.period;
            v += g.amplitude * window * phase.cos();
        }
        v
    });

    let y2_true = ImagePlane::from_fn(n, n, "slice2_true", |r, c| {
        let (y, x) = (r as f64 + 0.5 - nf / 2.0, c as f64 + 0.5 - nf / 2.0);
        let (ay, ax) = (b.semi_axes.0 * nf, b.semi_axes.1 * nf);
        // approximate signed distance to the ellipse boundary, in pixels
        let rho = ((y / ay).powi(2) + (x / ax).powi(2)).sqrt();
        let sd = (1.0 - rho) * ay.min(ax);
        let inside = 1.0 / (1.0 + (-sd / b.edge_px.max(1e-9)).exp());
        let tex: f64 =
            texture.iter().map(|&(k, th, ph, amp)| amp * (k * (x * th.cos() + y * th.sin()) + ph).cos()).sum::<f64>()
                / texture_norm;
        inside * (b.amplitude + b.texture_amplitude * tex)
    });

    let (a1, a2) = (spec.blend.alpha1, spec.blend.alpha2);
    let mut i1_obs = blend(a1, &y1_true, 1.0 - a1, &box_lowpass(&y2_true, PHANTOM_FILTER), "i1_obs");
    let mut i2_obs = blend(a2, &box_highpass(&y1_true, PHANTOM_FILTER), 1.0 - a2, &y2_true, "i2_obs");
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        for (img, stream) in [(&mut i1_obs, 3), (&mut i2_obs, 4)] {
            let mut rng = seed.stream(stream);
            img.pixels.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
        }
    }
    Ok(PhantomBundle { spec: spec.clone(), y1_true, y2_true, i1_obs, i2_obs })
}

/// Zero-mean normalized cross-correlation; `None` when either image is
/// constant.
pub fn ncc(a: &ImagePlane, b: &ImagePlane) -> Option<f64> {
    assert!(a.same_shape(b), "ncc shape mismatch");
    let (ma, mb) = (a.mean(), b.mean());
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.pixels.iter().zip(&b.pixels) {
        let (x, y) = (x - ma, y - mb);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    (aa > 0.0 && bb > 0.0).then(|| ab / (aa * bb).sqrt())
}

/// Half-width, in bins, of the band used to measure ghost-grating energy.
pub const STREAK_HALF_WIDTH: usize = 2;

/// Separation quality against a phantom's ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationMetrics {
    pub ncc1: f64,
    pub ncc2: f64,
    pub ncc1_input_baseline: f64,
    pub ncc2_input_baseline: f64,
    /// `NCC(y1_rec, y2_true)`: high values indicate swapped slices.
    pub ncc1_cross: f64,
    pub ncc2_cross: f64,
    /// Set when a recovered image was constant and an NCC was reported as 0.
    pub degenerate: bool,
    /// Ghost-grating band energy fraction in `I2` and in `y2_rec`.
    pub streak_input: Option<f64>,
    pub streak_output: Option<f64>,
    /// `streak_output / streak_input`.
    pub streak_reduction: Option<f64>,
}

impl SeparationMetrics {
    /// Recovered slice 1 resembles true slice 1 more than true slice 2.
    pub fn slices_confused(&self) -> bool {
        self.ncc1 <= self.ncc1_cross
    }
}

/// Band inner radius as a fraction of the grating frequency. The band then
/// skips the blob and its texture, whose periods are longer.
pub const STREAK_MIN_RADIUS: f64 = 0.75;

/// Energy fraction of the mean-removed image in the band along the grating
/// direction, from `STREAK_MIN_RADIUS` times the grating frequency outwards.
pub fn grating_streak(img: &ImagePlane, grating: &GratingScene) -> Result<f64> {
    let m = img.mean();
    let centered = ImagePlane::from_fn(img.height, img.width, img.label.clone(), |r, c| img.get(r, c) - m);
    let spec = power_spectrum(&centered)?;
    let freq_bins = spec.height.min(spec.width) as f64 / grating.period;
    streak_energy_beyond(&spec, grating.orientation_deg, STREAK_HALF_WIDTH, STREAK_MIN_RADIUS * freq_bins)
}

pub fn score(bundle: &PhantomBundle, y1_rec: &ImagePlane, y2_rec: &ImagePlane) -> Result<SeparationMetrics> {
    for img in [y1_rec, y2_rec] {
        if !img.same_shape(&bundle.y1_true) {
            return config_err(format!(
                "recovered image {}x{} does not match phantom {}x{}",
                img.height, img.width, bundle.y1_true.height, bundle.y1_true.width
            ));
        }
    }
    let mut degenerate = false;
    let mut corr = |a: &ImagePlane, b: &ImagePlane| {
        ncc(a, b).unwrap_or_else(|| {
            degenerate = true;
            0.0
        })
    };
    let ncc1 = corr(y1_rec, &bundle.y1_true);
    let ncc2 = corr(y2_rec, &bundle.y2_true);
    let ncc1_cross = corr(y1_rec, &bundle.y2_true);
    let ncc2_cross = corr(y2_rec, &bundle.y1_true);
    let ncc1_input_baseline = corr(&bundle.i1_obs, &bundle.y1_true);
    let ncc2_input_baseline = corr(&bundle.i2_obs, &bundle.y2_true);
    let (streak_input, streak_output, streak_reduction) = match &bundle.spec.grating {
        Some(g) => {
            let s_in = grating_streak(&bundle.i2_obs, g)?;
            let s_out = grating_streak(y2_rec, g).unwrap_or(0.0);
            (Some(s_in), Some(s_out), Some(s_out / s_in))
        }
        None => (None, None, None),
    };
    Ok(SeparationMetrics {
        ncc1,
        ncc2,
        ncc1_input_baseline,
        ncc2_input_baseline,
        ncc1_cross,
        ncc2_cross,
        degenerate,
        streak_input,
        streak_output,
        streak_reduction,
    })
}
