//! Encoder-decoder deep image prior networks.
//!
//! Both network kinds share one layout. Encoder level `i` halves the spatial
//! size with a stride-2 5x5 convolution and also emits a 1x1 skip branch from
//! its input. The decoder mirrors it: bilinear upsampling, concatenation with
//! the skip branch of the same scale, a 5x5 convolution. A final 1x1
//! convolution with identity activation maps to the output channels. Every
//! other convolution is followed by a leaky ReLU.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::rng::{NetSlot, RunSeed};
use crate::tensor::{PaddingMode, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkKind {
    DeepDip,
    ShallowDip,
}

/// Declarative description of a DIP network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub kind: NetworkKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub depth: usize,
    pub channels_per_level: Vec<usize>,
    pub skip_channels: usize,
    pub main_kernel: usize,
    pub skip_kernel: usize,
    pub leaky_slope: f64,
}

pub const DEFAULT_CHANNELS: [usize; 4] = [16, 32, 64, 64];
pub const DEFAULT_SKIP_CHANNELS: usize = 4;
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

impl NetworkSpec {
    pub fn deep(in_channels: usize, out_channels: usize) -> Self {
        NetworkSpec {
            kind: NetworkKind::DeepDip,
            in_channels,
            out_channels,
            depth: DEFAULT_CHANNELS.len(),
            channels_per_level: DEFAULT_CHANNELS.to_vec(),
            skip_channels: DEFAULT_SKIP_CHANNELS,
            main_kernel: 5,
            skip_kernel: 1,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    /// Three levels, single-channel everywhere.
    pub fn shallow() -> Self {
        NetworkSpec {
            kind: NetworkKind::ShallowDip,
            in_channels: 1,
            out_channels: 1,
            depth: 3,
            channels_per_level: vec![1; 3],
            skip_channels: 1,
            main_kernel: 5,
            skip_kernel: 1,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    pub fn with_channels(mut self, channels: Vec<usize>, skip_channels: usize) -> Self {
        self.depth = channels.len();
        self.channels_per_level = channels;
        self.skip_channels = skip_channels;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.channels_per_level.len() != self.depth {
            return config_err(format!(
                "network depth {} does not match channel schedule {:?}",
                self.depth, self.channels_per_level
            ));
        }
        if self.channels_per_level.contains(&0) || self.in_channels == 0 || self.out_channels == 0 {
            return config_err("network channel counts must be positive");
        }
        if self.main_kernel.is_multiple_of(2) || self.skip_kernel.is_multiple_of(2) {
            return config_err("network kernel sizes must be odd");
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return config_err(format!("leaky slope {} not in (0, 1)", self.leaky_slope));
        }
        if self.kind == NetworkKind::ShallowDip
            && (self.depth != 3 || self.channels_per_level.iter().any(|&c| c != 1) || self.skip_channels != 1)
        {
            return config_err("shallow DIP must have depth 3 and single-channel intermediates");
        }
        Ok(())
    }

    pub fn min_size(&self) -> usize {
        1 << self.depth
    }
}

/// A trainable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = vec![T::zero(); value.len()];
        Parameter { name: name.into(), value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    /// Record this parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Var {
        tape.param(self.value.clone())
    }

    /// Add the gradient reached at `var` by the last backward pass.
    pub fn pull_grad(&mut self, tape: &Tape<T>, var: Var) {
        if let Some(g) = tape.grad(var) {
            for (a, &b) in self.grad.iter_mut().zip(g) {
                *a = *a + b;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvRef {
    weight: usize,
    bias: usize,
    stride: usize,
}

#[derive(Clone, Debug)]
struct Level {
    down: ConvRef,
    skip: ConvRef,
    up: ConvRef,
}

/// Instantiated network: parameters plus the fixed random input `z`.
#[derive(Clone, Debug)]
pub struct DipNetwork<T> {
    pub spec: NetworkSpec,
    pub parameters: Vec<Parameter<T>>,
    /// `z`, drawn once per run; absent for filter networks that take an image.
    pub fixed_input: Option<Tensor<T>>,
    levels: Vec<Level>,
    head: ConvRef,
}

fn uniform_tensor<T: Real>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..=bound)))
}

impl<T: Real> DipNetwork<T> {
    /// Build a network for `h x w` images. Each parameter tensor draws from its
    /// own stream of `seed`, keyed by `slot`.
    pub fn build(spec: NetworkSpec, h: usize, w: usize, seed: RunSeed, slot: NetSlot) -> Result<Self> {
        spec.validate()?;
        if h < spec.min_size() || w < spec.min_size() {
            return config_err(format!(
                "image {h}x{w} smaller than 2^depth = {} required by the network",
                spec.min_size()
            ));
        }
        let (k, ks) = (spec.main_kernel, spec.skip_kernel);
        let mut parameters: Vec<Parameter<T>> = Vec::new();
        let mut add_conv = |name: String, c_out: usize, c_in: usize, ksz: usize, stride: usize| {
            let fan_in = (c_in * ksz * ksz) as f64;
            let (wb, bb) = match spec.kind {
                NetworkKind::DeepDip => ((1.0 / fan_in).sqrt(), (1.0 / fan_in).sqrt()),
                NetworkKind::ShallowDip => (0.5, 0.5),
            };
            let idx = parameters.len();
            let mut rng = seed.stream(slot.param_stream(idx));
            parameters
                .push(Parameter::new(format!("{name}.weight"), uniform_tensor(&[c_out, c_in, ksz, ksz], wb, &mut rng)));
            let mut rng = seed.stream(slot.param_stream(idx + 1));
            parameters.push(Parameter::new(format!("{name}.bias"), uniform_tensor(&[c_out], bb, &mut rng)));
            ConvRef { weight: idx, bias: idx + 1, stride }
        };

        let ch = &spec.channels_per_level;
        let mut downs = Vec::new();
        let mut skips = Vec::new();
        for i in 0..spec.depth {
            let c_prev = if i == 0 { spec.in_channels } else { ch[i - 1] };
            downs.push(add_conv(format!("down{}", i + 1), ch[i], c_prev, k, 2));
            skips.push(add_conv(format!("skip{}", i + 1), spec.skip_channels, c_prev, ks, 1));
        }
        let mut ups = vec![None; spec.depth];
        for i in (0..spec.depth).rev() {
            let c_below = if i + 1 == spec.depth { ch[i] } else { ch[i + 1] };
            ups[i] = Some(add_conv(format!("up{}", i + 1), ch[i], c_below + spec.skip_channels, k, 1));
        }
        let head = add_conv("head".into(), spec.out_channels, ch[0], 1, 1);

        let levels = downs
            .into_iter()
            .zip(skips)
            .zip(ups)
            .map(|((down, skip), up)| Level { down, skip, up: up.unwrap() })
            .collect();

        let fixed_input = match spec.kind {
            NetworkKind::DeepDip => {
                let mut rng = seed.stream(slot.input_stream());
                Some(Tensor::from_fn(&[spec.in_channels, h, w], |_| T::lit(rng.random_range(-0.5..0.5))))
            }
            NetworkKind::ShallowDip => None,
        };
        Ok(DipNetwork { spec, parameters, fixed_input, levels, head })
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters.iter().map(|p| p.value.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.parameters.iter().map(|p| p.bind(tape)).collect()
    }

    pub fn pull_grads(&mut self, tape: &Tape<T>, vars: &[Var]) {
        for (p, &v) in self.parameters.iter_mut().zip(vars) {
            p.pull_grad(tape, v);
        }
    }

    fn conv(&self, tape: &mut Tape<T>, vars: &[Var], c: ConvRef, x: Var) -> Result<Var> {
        tape.conv2d(x, vars[c.weight], Some(vars[c.bias]), c.stride, PaddingMode::Reflect)
    }

    /// Run the network on an arbitrary `[in_channels, H, W]` input.
    pub fn forward_on(&self, tape: &mut Tape<T>, vars: &[Var], input: Var) -> Result<Var> {
        let slope = T::lit(self.spec.leaky_slope);
        let mut skips = Vec::with_capacity(self.spec.depth);
        let mut sizes = Vec::with_capacity(self.spec.depth);
        let mut x = input;
        for level in &self.levels {
            let s = self.conv(tape, vars, level.skip, x)?;
            skips.push(tape.leaky_relu(s, slope));
            let shape = tape.shape(x);
            sizes.push((shape[1], shape[2]));
            let d = self.conv(tape, vars, level.down, x)?;
            x = tape.leaky_relu(d, slope);
        }
        for (i, level) in self.levels.iter().enumerate().rev() {
            let (h, w) = sizes[i];
            let u = tape.upsample2_to(x, h, w)?;
            let cat = tape.concat_channels(&[u, skips[i]])?;
            let c = self.conv(tape, vars, level.up, cat)?;
            x = tape.leaky_relu(c, slope);
        }
        self.conv(tape, vars, self.head, x)
    }

    /// Map the fixed input through the network.
    pub fn forward(&self, tape: &mut Tape<T>, vars: &[Var]) -> Result<Var> {
        let z = match &self.fixed_input {
            Some(z) => tape.constant(z.clone()),
            None => return config_err("network has no fixed input; use forward_on"),
        };
        self.forward_on(tape, vars, z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> NetworkSpec {
        NetworkSpec::deep(1, 1).with_channels(vec![2, 3], 1)
    }

    #[test]
    fn output_shape_matches_input() {
        let net = DipNetwork::<f32>::build(toy(), 12, 20, RunSeed(3), NetSlot::Dip1).unwrap();
        let mut tape = Tape::new();
        let vars = net.bind(&mut tape);
        let y = net.forward(&mut tape, &vars).unwrap();
        assert_eq!(tape.shape(y), &[1, 12, 20]);
    }

    #[test]
    fn odd_sizes_round_trip() {
        let net = DipNetwork::<f64>::build(toy(), 9, 7, RunSeed(3), NetSlot::Dip1).unwrap();
        let mut tape = Tape::new();
        let vars = net.bind(&mut tape);
        let y = net.forward(&mut tape, &vars).unwrap();
        assert_eq!(tape.shape(y), &[1, 9, 7]);
    }

    #[test]
    fn too_small_image_is_rejected() {
        let spec = NetworkSpec::deep(1, 1);
        assert!(DipNetwork::<f32>::build(spec, 8, 64, RunSeed(0), NetSlot::Dip1).is_err());
        assert!(DipNetwork::<f32>::build(NetworkSpec::shallow(), 7, 8, RunSeed(0), NetSlot::Filter1).is_err());
    }

    #[test]
    fn fixed_input_is_uniform_half_range() {
        let net = DipNetwork::<f64>::build(toy(), 32, 32, RunSeed(9), NetSlot::Dip3).unwrap();
        let z = net.fixed_input.unwrap();
        assert!(z.data().iter().all(|&v| (-0.5..0.5).contains(&v)));
        let mean: f64 = z.data().iter().sum::<f64>() / z.len() as f64;
        assert!(mean.abs() < 0.05);
    }

    #[test]
    fn shallow_spec_is_enforced() {
        let mut spec = NetworkSpec::shallow();
        spec.channels_per_level = vec![1, 2, 1];
        assert!(spec.validate().is_err());
        assert!(NetworkSpec::shallow().validate().is_ok());
    }

    #[test]
    fn shallow_init_is_uniform_half() {
        let net = DipNetwork::<f64>::build(NetworkSpec::shallow(), 8, 8, RunSeed(1), NetSlot::Filter2).unwrap();
        assert!(net.fixed_input.is_none());
        for p in &net.parameters {
            assert!(p.value.data().iter().all(|v| v.abs() <= 0.5));
        }
    }
}
