//! Blending forward model, band-loss filters, mixing weights and the
//! three-term separation loss.
//!
//! The two generated slices `y1`, `y2` are re-blended as
//!
//! ```text
//! I1 = a1 * y1 + (1 - a1) * f1(y2)
//! I2 = a2 * f2(y1) + (1 - a2) * y2
//! ```
//!
//! where `f1`, `f2` model the spectral band loss a ghost suffers on its way
//! into the other slice. They are either single trainable 7x7 kernels or
//! shallow DIP networks.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::nn::{DipNetwork, NetworkSpec, Parameter};
use crate::rng::{NetSlot, RunSeed};
use crate::tensor::{Axis, PaddingMode, Real, Tape, Tensor, Var};

pub const FILTER_KERNEL: usize = 7;
pub const EXCLUSION_SCALES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    SingleKernel,
    ShallowDip,
}

impl std::str::FromStr for FilterMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "single_kernel" => Ok(FilterMode::SingleKernel),
            "shallow_dip" => Ok(FilterMode::ShallowDip),
            _ => Err(format!("unknown filter mode `{s}` (expected single_kernel or shallow_dip)")),
        }
    }
}

impl std::fmt::Display for FilterMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FilterMode::SingleKernel => "single_kernel",
            FilterMode::ShallowDip => "shallow_dip",
        })
    }
}

/// 7x7 uniform low-pass `k1` and a 7x7 kernel holding a centered 5-point
/// Laplacian `k2`, both shaped `[1, 1, 7, 7]`.
pub fn make_single_kernels<T: Real>() -> (Tensor<T>, Tensor<T>) {
    let n = FILTER_KERNEL;
    let k1 = Tensor::full(&[1, 1, n, n], T::lit(1.0 / (n * n) as f64));
    let c = n / 2;
    let k2 = Tensor::from_fn(&[1, 1, n, n], |idx| {
        let (r, col) = (idx / n, idx % n);
        match (r.abs_diff(c), col.abs_diff(c)) {
            (0, 0) => T::lit(-4.0),
            (0, 1) | (1, 0) => T::one(),
            _ => T::zero(),
        }
    });
    (k1, k2)
}

/// Band-loss filters `f1` (applied to `y2`) and `f2` (applied to `y1`).
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)] // one per model; boxing buys nothing
pub enum Filters<T> {
    SingleKernel { k1: Parameter<T>, k2: Parameter<T> },
    ShallowDip { f1: DipNetwork<T>, f2: DipNetwork<T> },
}

/// Filter parameters recorded on a tape.
#[derive(Clone, Debug)]
pub enum BoundFilters {
    SingleKernel { k1: Var, k2: Var },
    ShallowDip { f1: Vec<Var>, f2: Vec<Var> },
}

impl<T: Real> Filters<T> {
    /// `lowpass_slice` selects which slice's synthesis receives the low-pass
    /// initialized kernel (1: `f1` is low-pass, 2: `f2` is low-pass).
    pub fn single_kernel(lowpass_slice: u8) -> Result<Self> {
        let (lp, hp) = make_single_kernels::<T>();
        let (k1, k2) = match lowpass_slice {
            1 => (lp, hp),
            2 => (hp, lp),
            s => return config_err(format!("lowpass_slice must be 1 or 2, got {s}")),
        };
        Ok(Filters::SingleKernel { k1: Parameter::new("f1.kernel", k1), k2: Parameter::new("f2.kernel", k2) })
    }

    pub fn shallow(h: usize, w: usize, seed: RunSeed) -> Result<Self> {
        let mut f1 = DipNetwork::build(NetworkSpec::shallow(), h, w, seed, NetSlot::Filter1)?;
        let mut f2 = DipNetwork::build(NetworkSpec::shallow(), h, w, seed, NetSlot::Filter2)?;
        prefix_names(&mut f1.parameters, "f1");
        prefix_names(&mut f2.parameters, "f2");
        Ok(Filters::ShallowDip { f1, f2 })
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundFilters {
        match self {
            Filters::SingleKernel { k1, k2 } => BoundFilters::SingleKernel { k1: k1.bind(tape), k2: k2.bind(tape) },
            Filters::ShallowDip { f1, f2 } => BoundFilters::ShallowDip { f1: f1.bind(tape), f2: f2.bind(tape) },
        }
    }

    /// `f1(x)`.
    pub fn apply_f1(&self, tape: &mut Tape<T>, bound: &BoundFilters, x: Var) -> Result<Var> {
        match (self, bound) {
            (Filters::SingleKernel { .. }, BoundFilters::SingleKernel { k1, .. }) => {
                tape.conv2d(x, *k1, None, 1, PaddingMode::Reflect)
            }
            (Filters::ShallowDip { f1, .. }, BoundFilters::ShallowDip { f1: v, .. }) => f1.forward_on(tape, v, x),
            _ => config_err("filter binding does not match filter mode"),
        }
    }

    /// `f2(x)`.
    pub fn apply_f2(&self, tape: &mut Tape<T>, bound: &BoundFilters, x: Var) -> Result<Var> {
        match (self, bound) {
            (Filters::SingleKernel { .. }, BoundFilters::SingleKernel { k2, .. }) => {
                tape.conv2d(x, *k2, None, 1, PaddingMode::Reflect)
            }
            (Filters::ShallowDip { f2, .. }, BoundFilters::ShallowDip { f2: v, .. }) => f2.forward_on(tape, v, x),
            _ => config_err("filter binding does not match filter mode"),
        }
    }

    pub fn pull_grads(&mut self, tape: &Tape<T>, bound: &BoundFilters) {
        match (self, bound) {
            (Filters::SingleKernel { k1, k2 }, BoundFilters::SingleKernel { k1: v1, k2: v2 }) => {
                k1.pull_grad(tape, *v1);
                k2.pull_grad(tape, *v2);
            }
            (Filters::ShallowDip { f1, f2 }, BoundFilters::ShallowDip { f1: v1, f2: v2 }) => {
                f1.pull_grads(tape, v1);
                f2.pull_grads(tape, v2);
            }
            _ => unreachable!("filter binding does not match filter mode"),
        }
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        match self {
            Filters::SingleKernel { k1, k2 } => vec![k1, k2],
            Filters::ShallowDip { f1, f2 } => f1.parameters.iter_mut().chain(f2.parameters.iter_mut()).collect(),
        }
    }
}

fn prefix_names<T>(params: &mut [Parameter<T>], prefix: &str) {
    for p in params {
        p.name = format!("{prefix}.{}", p.name);
    }
}

/// Blending weights on the tape, each squashed into (0, 1).
#[derive(Clone, Copy, Debug)]
pub struct MixingWeights {
    pub alpha1: Var,
    pub alpha2: Var,
}

impl MixingWeights {
    pub fn values<T: Real>(&self, tape: &Tape<T>) -> (f64, f64) {
        (tape.value(self.alpha1).item().to_f64().unwrap(), tape.value(self.alpha2).item().to_f64().unwrap())
    }
}

/// `alpha_i = sigmoid(channel_i[H / 2, W / 2])` of the weight network output.
pub fn alpha_from_dip3<T: Real>(tape: &mut Tape<T>, dip3_output: Var) -> Result<MixingWeights> {
    let (c, h, w) = match *tape.shape(dip3_output) {
        [c, h, w] => (c, h, w),
        ref s => return config_err(format!("weight network output must be [2, H, W], got {s:?}")),
    };
    if c != 2 {
        return config_err(format!("weight network must have 2 output channels, got {c}"));
    }
    let center = (h / 2) * w + w / 2;
    let r1 = tape.pixel(dip3_output, center)?;
    let r2 = tape.pixel(dip3_output, h * w + center)?;
    Ok(MixingWeights { alpha1: tape.sigmoid(r1), alpha2: tape.sigmoid(r2) })
}

/// Blend generated slices into synthetic observations `(I1, I2)`.
pub fn synthesize<T: Real>(
    tape: &mut Tape<T>,
    y1: Var,
    y2: Var,
    alphas: &MixingWeights,
    filters: &Filters<T>,
    bound: &BoundFilters,
) -> Result<(Var, Var)> {
    if tape.shape(y1) != tape.shape(y2) {
        return config_err(format!("synthesize: y1 {:?} vs y2 {:?}", tape.shape(y1), tape.shape(y2)));
    }
    let f1y2 = filters.apply_f1(tape, bound, y2)?;
    let f2y1 = filters.apply_f2(tape, bound, y1)?;
    let i1 = blend(tape, alphas.alpha1, y1, f1y2)?;
    let i2 = blend(tape, alphas.alpha2, f2y1, y2)?;
    Ok((i1, i2))
}

/// `a * p + (1 - a) * q`.
fn blend<T: Real>(tape: &mut Tape<T>, a: Var, p: Var, q: Var) -> Result<Var> {
    let ap = tape.mul(a, p)?;
    let one_minus = tape.rsub_scalar(T::one(), a);
    let bq = tape.mul(one_minus, q)?;
    tape.add(ap, bq)
}

/// Number of exclusion-loss scales usable for an `h x w` image: scale `j`
/// downsamples by `2^(j-1)` and must still span at least 2x2 pixels, so that
/// a gradient is defined there. Images under 2 pixels keep one scale.
pub fn exclusion_scales(h: usize, w: usize) -> usize {
    let m = h.min(w).max(2);
    let feasible = (usize::BITS - 1 - m.leading_zeros()) as usize;
    feasible.min(EXCLUSION_SCALES)
}

/// Multi-scale gradient-correlation penalty
/// `sum_j sum_{l in x,y} mean(|D_j(grad_l y1)| * |D_j(grad_l y2)|)`.
pub fn exclusion_loss<T: Real>(tape: &mut Tape<T>, y1: Var, y2: Var) -> Result<Var> {
    let shape = tape.shape(y1).to_vec();
    if shape != tape.shape(y2) {
        return config_err(format!("exclusion_loss: y1 {:?} vs y2 {:?}", shape, tape.shape(y2)));
    }
    let (h, w) = match shape.as_slice() {
        [_, h, w] => (*h, *w),
        s => return config_err(format!("exclusion_loss: expected [C, H, W], got {s:?}")),
    };
    let scales = exclusion_scales(h, w);
    if scales < EXCLUSION_SCALES {
        log::warn!("exclusion loss: {h}x{w} image supports only {scales} of {EXCLUSION_SCALES} scales");
    }
    let mut terms = Vec::with_capacity(2 * scales);
    for axis in [Axis::X, Axis::Y] {
        let mut g1 = tape.spatial_gradient(y1, axis)?;
        let mut g2 = tape.spatial_gradient(y2, axis)?;
        for j in 0..scales {
            if j > 0 {
                g1 = tape.downsample2(g1)?;
                g2 = tape.downsample2(g2)?;
            }
            let a1 = tape.abs(g1);
            let a2 = tape.abs(g2);
            let prod = tape.mul(a1, a2)?;
            terms.push(tape.mean(prod));
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

/// Per-term values of the separation loss at one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub data_term: f64,
    /// Unweighted exclusion penalty.
    pub exclusion_term: f64,
    pub alpha_anchor_term: f64,
    pub total: f64,
}

/// Pull of the mixing weights toward 0.5 during the first epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSchedule {
    pub epochs: usize,
    pub weight: f64,
}

impl Default for AnchorSchedule {
    fn default() -> Self {
        AnchorSchedule { epochs: 100, weight: 1.0 }
    }
}

impl AnchorSchedule {
    pub fn active(&self, epoch: usize) -> bool {
        epoch >= 1 && epoch <= self.epochs
    }
}

/// Inputs to [`total_loss`].
#[derive(Clone, Copy, Debug)]
pub struct LossInputs {
    pub i1: Var,
    pub i2: Var,
    pub i1_obs: Var,
    pub i2_obs: Var,
    pub y1: Var,
    pub y2: Var,
    pub alphas: MixingWeights,
}

/// `sum_i mean((I_i - I_i^0)^2) + gamma * exclusion + [epoch in anchor] * sum_i (alpha_i - 0.5)^2`.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    x: &LossInputs,
    gamma_excl: f64,
    epoch: usize,
    anchor: AnchorSchedule,
) -> Result<(Var, LossBreakdown)> {
    let mut data = None;
    for (i, obs) in [(x.i1, x.i1_obs), (x.i2, x.i2_obs)] {
        let d = tape.sub(i, obs)?;
        let sq = tape.square(d);
        let m = tape.mean(sq);
        data = Some(match data {
            None => m,
            Some(acc) => tape.add(acc, m)?,
        });
    }
    let data = data.unwrap();
    let excl = exclusion_loss(tape, x.y1, x.y2)?;
    let weighted = tape.scalar_mul(excl, T::lit(gamma_excl));
    let mut total = tape.add(data, weighted)?;

    let mut anchor_value = 0.0;
    if anchor.active(epoch) {
        let mut acc = None;
        for a in [x.alphas.alpha1, x.alphas.alpha2] {
            let d = tape.add_scalar(a, T::lit(-0.5));
            let sq = tape.square(d);
            acc = Some(match acc {
                None => sq,
                Some(prev) => tape.add(prev, sq)?,
            });
        }
        let term = tape.scalar_mul(acc.unwrap(), T::lit(anchor.weight));
        anchor_value = scalar(tape, term);
        total = tape.add(total, term)?;
    }
    let breakdown = LossBreakdown {
        data_term: scalar(tape, data),
        exclusion_term: scalar(tape, excl),
        alpha_anchor_term: anchor_value,
        total: scalar(tape, total),
    };
    Ok((total, breakdown))
}

fn scalar<T: Real>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).item().to_f64().unwrap()
}

/// Model hyperparameters shared by every network of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Architecture of the image generators; the weight generator uses the
    /// same schedule with two input and output channels.
    pub network: NetworkSpec,
    pub filter_mode: FilterMode,
    pub lowpass_slice: u8,
    pub anchor: AnchorSchedule,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            network: NetworkSpec::deep(1, 1),
            filter_mode: FilterMode::ShallowDip,
            lowpass_slice: 1,
            anchor: AnchorSchedule::default(),
        }
    }
}

/// DIP-1, DIP-2, the weight network DIP-3 and the band-loss filters.
#[derive(Clone, Debug)]
pub struct DdipModel<T> {
    pub config: ModelConfig,
    pub dip1: DipNetwork<T>,
    pub dip2: DipNetwork<T>,
    pub dip3: DipNetwork<T>,
    pub filters: Filters<T>,
}

#[derive(Clone, Debug)]
pub struct BoundModel {
    pub dip1: Vec<Var>,
    pub dip2: Vec<Var>,
    pub dip3: Vec<Var>,
    pub filters: BoundFilters,
}

/// Graph handles produced by one forward pass of the model.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutputs {
    pub y1: Var,
    pub y2: Var,
    pub dip3: Var,
    pub alphas: MixingWeights,
    pub i1: Var,
    pub i2: Var,
}

impl<T: Real> DdipModel<T> {
    pub fn build(config: ModelConfig, h: usize, w: usize, seed: RunSeed) -> Result<Self> {
        let mut gen_spec = config.network.clone();
        gen_spec.in_channels = 1;
        gen_spec.out_channels = 1;
        let mut weight_spec = gen_spec.clone();
        weight_spec.in_channels = 2;
        weight_spec.out_channels = 2;

        let mut dip1 = DipNetwork::build(gen_spec.clone(), h, w, seed, NetSlot::Dip1)?;
        let mut dip2 = DipNetwork::build(gen_spec, h, w, seed, NetSlot::Dip2)?;
        let mut dip3 = DipNetwork::build(weight_spec, h, w, seed, NetSlot::Dip3)?;
        prefix_names(&mut dip1.parameters, "dip1");
        prefix_names(&mut dip2.parameters, "dip2");
        prefix_names(&mut dip3.parameters, "dip3");
        let filters = match config.filter_mode {
            FilterMode::SingleKernel => Filters::single_kernel(config.lowpass_slice)?,
            FilterMode::ShallowDip => {
                if !matches!(config.lowpass_slice, 1 | 2) {
                    return config_err(format!("lowpass_slice must be 1 or 2, got {}", config.lowpass_slice));
                }
                Filters::shallow(h, w, seed)?
            }
        };
        Ok(DdipModel { config, dip1, dip2, dip3, filters })
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundModel {
        BoundModel {
            dip1: self.dip1.bind(tape),
            dip2: self.dip2.bind(tape),
            dip3: self.dip3.bind(tape),
            filters: self.filters.bind(tape),
        }
    }

    /// Forward pass with the networks' own fixed inputs.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &BoundModel) -> Result<ModelOutputs> {
        let z: Vec<Var> = [&self.dip1, &self.dip2, &self.dip3]
            .iter()
            .map(|n| tape.constant(n.fixed_input.clone().expect("generator networks carry z")))
            .collect();
        self.forward_with_inputs(tape, bound, [z[0], z[1], z[2]])
    }

    /// Forward pass with explicit inputs for DIP-1, DIP-2 and DIP-3.
    pub fn forward_with_inputs(&self, tape: &mut Tape<T>, bound: &BoundModel, z: [Var; 3]) -> Result<ModelOutputs> {
        let y1 = self.dip1.forward_on(tape, &bound.dip1, z[0])?;
        let y2 = self.dip2.forward_on(tape, &bound.dip2, z[1])?;
        let dip3 = self.dip3.forward_on(tape, &bound.dip3, z[2])?;
        let alphas = alpha_from_dip3(tape, dip3)?;
        let (i1, i2) = synthesize(tape, y1, y2, &alphas, &self.filters, &bound.filters)?;
        Ok(ModelOutputs { y1, y2, dip3, alphas, i1, i2 })
    }

    pub fn pull_grads(&mut self, tape: &Tape<T>, bound: &BoundModel) {
        self.dip1.pull_grads(tape, &bound.dip1);
        self.dip2.pull_grads(tape, &bound.dip2);
        self.dip3.pull_grads(tape, &bound.dip3);
        self.filters.pull_grads(tape, &bound.filters);
    }

    /// Every trainable tensor in a fixed order (one optimizer group).
    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out: Vec<&mut Parameter<T>> = Vec::new();
        out.extend(self.dip1.parameters.iter_mut());
        out.extend(self.dip2.parameters.iter_mut());
        out.extend(self.dip3.parameters.iter_mut());
        out.extend(self.filters.parameters_mut());
        out
    }

    pub fn parameter_count(&mut self) -> usize {
        self.parameters_mut().iter().map(|p| p.value.len()).sum()
    }
}
