use super::conv::{ConvGeom, PaddingMode};
use super::resample::{self, Taps};
use super::{Real, Tensor};
use crate::error::{config_err, Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial direction for [`Tape::spatial_gradient`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Along the width (column index).
    X,
    /// Along the height (row index).
    Y,
}

/// Operation tags, used for reporting and fault injection in gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    ScalarMul,
    AddScalar,
    Mean,
    Sum,
    Square,
    Abs,
    Sigmoid,
    LeakyRelu,
    ConcatChannels,
    SpatialGradient,
    Conv2d,
    Downsample2,
    Upsample2,
    Pixel,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 17] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::ScalarMul,
        OpKind::AddScalar,
        OpKind::Mean,
        OpKind::Sum,
        OpKind::Square,
        OpKind::Abs,
        OpKind::Sigmoid,
        OpKind::LeakyRelu,
        OpKind::ConcatChannels,
        OpKind::SpatialGradient,
        OpKind::Conv2d,
        OpKind::Downsample2,
        OpKind::Upsample2,
        OpKind::Pixel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::ScalarMul => "scalar_mul",
            OpKind::AddScalar => "add_scalar",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::Square => "square",
            OpKind::Abs => "abs",
            OpKind::Sigmoid => "sigmoid",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::SpatialGradient => "spatial_gradient",
            OpKind::Conv2d => "conv2d",
            OpKind::Downsample2 => "downsample2",
            OpKind::Upsample2 => "upsample2",
            OpKind::Pixel => "pixel",
        }
    }

    pub fn from_name(s: &str) -> Option<OpKind> {
        OpKind::DIFFERENTIABLE.into_iter().find(|k| k.name() == s)
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, T),
    AddScalar(Var),
    Mean(Var),
    Sum(Var),
    Square(Var),
    Abs(Var),
    Sigmoid(Var),
    LeakyRelu(Var, T),
    ConcatChannels(Vec<Var>),
    SpatialGradient(Var, Axis),
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, geom: ConvGeom },
    Downsample2(Var),
    Upsample2 { x: Var, ty: Taps, tx: Taps },
    Pixel(Var, usize),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::ScalarMul(..) => OpKind::ScalarMul,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Mean(..) => OpKind::Mean,
            Op::Sum(..) => OpKind::Sum,
            Op::Square(..) => OpKind::Square,
            Op::Abs(..) => OpKind::Abs,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::LeakyRelu(..) => OpKind::LeakyRelu,
            Op::ConcatChannels(..) => OpKind::ConcatChannels,
            Op::SpatialGradient(..) => OpKind::SpatialGradient,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Downsample2(..) => OpKind::Downsample2,
            Op::Upsample2 { .. } => OpKind::Upsample2,
            Op::Pixel(..) => OpKind::Pixel,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    // accumulated gradient, leaves only
    grad: Option<Vec<T>>,
}

/// Record of a forward pass. Values are owned by the tape; dropping or
/// [`clear`](Tape::clear)ing it frees every intermediate buffer.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    corrupt: Option<OpKind>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn chw(op: &str, s: &[usize]) -> Result<(usize, usize, usize)> {
    match *s {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok((c, h, w)),
        _ => config_err(format!("{op}: expected non-empty [C, H, W] tensor, got {s:?}")),
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), corrupt: None }
    }

    /// Scale the backward rule of one operation kind by 1.5. Only meant as a
    /// negative control for the gradient-check suite.
    #[doc(hidden)]
    pub fn with_corrupted_backward(kind: OpKind) -> Self {
        Tape { nodes: Vec::new(), corrupt: Some(kind) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every recorded node.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Reset accumulated leaf gradients.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let xv = &self.nodes[x.0].value;
        let out = Tensor { shape: xv.shape.clone(), data: xv.data.iter().map(|&a| f(a)).collect() };
        let rg = self.rg(&[x]);
        self.push(out, op, rg)
    }

    /// Elementwise binary op; one side may be a single-element tensor that is
    /// broadcast over the other.
    fn binary(&mut self, name: &str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = if av.shape == bv.shape {
            Tensor { shape: av.shape.clone(), data: av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect() }
        } else if bv.len() == 1 {
            let s = bv.data[0];
            Tensor { shape: av.shape.clone(), data: av.data.iter().map(|&x| f(x, s)).collect() }
        } else if av.len() == 1 {
            let s = av.data[0];
            Tensor { shape: bv.shape.clone(), data: bv.data.iter().map(|&y| f(s, y)).collect() }
        } else {
            return config_err(format!("{name}: shape mismatch {:?} vs {:?}", av.shape, bv.shape));
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scalar_mul(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::ScalarMul(x, c), |a| a * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::AddScalar(x), |a| a + c)
    }

    /// `c - x`.
    pub fn rsub_scalar(&mut self, c: T, x: Var) -> Var {
        let neg = self.scalar_mul(x, -T::one());
        self.add_scalar(neg, c)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |a| a * a)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), |a| a.abs())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(x, Op::LeakyRelu(x, slope), |a| if a >= T::zero() { a } else { a * slope })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s: T = d.iter().copied().sum::<T>() / T::from_usize(d.len()).unwrap();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Single element `x[flat]` as a scalar.
    pub fn pixel(&mut self, x: Var, flat: usize) -> Result<Var> {
        let n = self.data(x).len();
        if flat >= n {
            return config_err(format!("pixel: index {flat} out of range for {n} elements"));
        }
        let v = self.data(x)[flat];
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(v), Op::Pixel(x, flat), rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return config_err("concat_channels: no inputs");
        }
        let (_, h, w) = chw("concat_channels", self.shape(parts[0]))?;
        let mut c_total = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (c, ph, pw) = chw("concat_channels", self.shape(p))?;
            if (ph, pw) != (h, w) {
                return config_err(format!("concat_channels: spatial size {ph}x{pw} vs {h}x{w}"));
            }
            c_total += c;
            data.extend_from_slice(self.data(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor { shape: vec![c_total, h, w], data }, Op::ConcatChannels(parts.to_vec()), rg))
    }

    /// Forward difference along `axis`; the last row/column is zero so the
    /// output keeps the input shape.
    pub fn spatial_gradient(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let (c, h, w) = chw("spatial_gradient", self.shape(x))?;
        let d = self.data(x);
        let mut out = vec![T::zero(); c * h * w];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let idx = (ch * h + i) * w + j;
                    out[idx] = match axis {
                        Axis::X if j + 1 < w => d[idx + 1] - d[idx],
                        Axis::Y if i + 1 < h => d[idx + w] - d[idx],
                        _ => T::zero(),
                    };
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape: vec![c, h, w], data: out }, Op::SpatialGradient(x, axis), rg))
    }

    /// Cross-correlation of `[C_in, H, W]` input with a `[C_out, C_in, kH, kW]`
    /// kernel. Output is `ceil(H / stride) x ceil(W / stride)`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: PaddingMode,
    ) -> Result<Var> {
        let (c_in, h, w) = chw("conv2d", self.shape(input))?;
        let (c_out, kc, kh, kw) = match *self.shape(kernel) {
            [a, b, c, d] => (a, b, c, d),
            ref s => return config_err(format!("conv2d: kernel must be 4-D, got {s:?}")),
        };
        if kc != c_in {
            return config_err(format!("conv2d: kernel expects {kc} input channels, input has {c_in}"));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return config_err(format!("conv2d: kernel size {kh}x{kw} must be odd"));
        }
        if !(1..=2).contains(&stride) {
            return config_err(format!("conv2d: stride {stride} not in {{1, 2}}"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return config_err(format!("conv2d: bias shape {:?} != [{c_out}]", self.shape(b)));
            }
        }
        let geom = ConvGeom::new(c_in, h, w, c_out, kh, kw, stride, padding);
        let out = geom.forward(self.data(input), self.data(kernel), bias.map(|b| self.data(b)));
        let shape = vec![c_out, geom.out_h, geom.out_w];
        let mut parents = vec![input, kernel];
        parents.extend(bias);
        let rg = self.rg(&parents);
        let op = Op::Conv2d { input, kernel, bias, geom };
        Ok(self.push(Tensor { shape, data: out }, op, rg))
    }

    /// 2x2 mean pooling (reflection-padded to even size first).
    pub fn downsample2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = chw("downsample2", self.shape(x))?;
        let out = resample::downsample2(self.data(x), c, h, w);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape: vec![c, h.div_ceil(2), w.div_ceil(2)], data: out }, Op::Downsample2(x), rg))
    }

    /// Bilinear factor-2 upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (_, h, w) = chw("upsample2", self.shape(x))?;
        self.upsample2_to(x, 2 * h, 2 * w)
    }

    /// Bilinear factor-2 upsampling cropped to `out_h x out_w`, which must lie
    /// in `2n - 1 ..= 2n` per axis.
    pub fn upsample2_to(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = chw("upsample2", self.shape(x))?;
        if !(2 * h - 1..=2 * h).contains(&out_h) || !(2 * w - 1..=2 * w).contains(&out_w) {
            return config_err(format!("upsample2: cannot map {h}x{w} to {out_h}x{out_w}"));
        }
        let (ty, tx) = (Taps::new(h, out_h), Taps::new(w, out_w));
        let out = resample::upsample2(self.data(x), c, h, w, &ty, &tx);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape: vec![c, out_h, out_w], data: out }, Op::Upsample2 { x, ty, tx }, rg))
    }

    /// Reverse sweep from a scalar `loss`. Gradients of leaves accumulate
    /// across calls; intermediate gradients are local to the call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if self.corrupt == Some(node.op.kind()) {
                let k = T::lit(1.5);
                g.iter_mut().for_each(|v| *v = *v * k);
            }
            if let Op::Leaf = node.op {
                let n = &mut self.nodes[i];
                match &mut n.grad {
                    Some(acc) => add_into(acc, &g),
                    None => n.grad = Some(g),
                }
                continue;
            }
            for (parent, pg) in self.vjp(i, &g) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => add_into(acc, &pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(())
    }

    /// Contributions of node `i`'s upstream gradient `g` to each parent.
    fn vjp(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                if needs(*a) {
                    out.push((*a, reduce_broadcast(g, self.data(*a).len(), |v, _| v)));
                }
                if needs(*b) {
                    out.push((*b, reduce_broadcast(g, self.data(*b).len(), |v, _| v * sign)));
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if needs(*a) {
                    out.push((*a, reduce_broadcast(g, ad.len(), |v, k| v * bd[if bd.len() == 1 { 0 } else { k }])));
                }
                if needs(*b) {
                    out.push((*b, reduce_broadcast(g, bd.len(), |v, k| v * ad[if ad.len() == 1 { 0 } else { k }])));
                }
            }
            Op::ScalarMul(x, c) => out.push((*x, g.iter().map(|&v| v * *c).collect())),
            Op::AddScalar(x) => out.push((*x, g.to_vec())),
            Op::Sum(x) => out.push((*x, vec![g[0]; self.data(*x).len()])),
            Op::Mean(x) => {
                let n = self.data(*x).len();
                out.push((*x, vec![g[0] / T::from_usize(n).unwrap(); n]))
            }
            Op::Square(x) => {
                let two = T::lit(2.0);
                out.push((*x, g.iter().zip(self.data(*x)).map(|(&v, &a)| v * two * a).collect()))
            }
            Op::Abs(x) => out.push((
                *x,
                g.iter()
                    .zip(self.data(*x))
                    .map(|(&v, &a)| {
                        if a > T::zero() {
                            v
                        } else if a < T::zero() {
                            -v
                        } else {
                            T::zero()
                        }
                    })
                    .collect(),
            )),
            Op::Sigmoid(x) => {
                out.push((*x, g.iter().zip(node.value.data()).map(|(&v, &s)| v * s * (T::one() - s)).collect()))
            }
            Op::LeakyRelu(x, slope) => out.push((
                *x,
                g.iter().zip(self.data(*x)).map(|(&v, &a)| if a >= T::zero() { v } else { v * *slope }).collect(),
            )),
            Op::Pixel(x, flat) => {
                let mut d = vec![T::zero(); self.data(*x).len()];
                d[*flat] = g[0];
                out.push((*x, d));
            }
            Op::ConcatChannels(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.data(*p).len();
                    if needs(*p) {
                        out.push((*p, g[off..off + n].to_vec()));
                    }
                    off += n;
                }
            }
            Op::SpatialGradient(x, axis) => {
                let (c, h, w) = self.nodes[x.0].value.chw();
                let mut d = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for r in 0..h {
                        for col in 0..w {
                            let idx = (ch * h + r) * w + col;
                            let (valid, step) = match axis {
                                Axis::X => (col + 1 < w, 1),
                                Axis::Y => (r + 1 < h, w),
                            };
                            if valid {
                                d[idx + step] = d[idx + step] + g[idx];
                                d[idx] = d[idx] - g[idx];
                            }
                        }
                    }
                }
                out.push((*x, d));
            }
            Op::Conv2d { input, kernel, bias, geom } => {
                let mut dx = needs(*input).then(|| vec![T::zero(); self.data(*input).len()]);
                let mut dk = needs(*kernel).then(|| vec![T::zero(); self.data(*kernel).len()]);
                geom.backward(self.data(*input), self.data(*kernel), g, dx.as_deref_mut(), dk.as_deref_mut());
                out.extend(dx.map(|d| (*input, d)));
                out.extend(dk.map(|d| (*kernel, d)));
                if let Some(b) = bias.filter(|b| needs(*b)) {
                    let n = geom.out_len();
                    out.push((b, g.chunks(n).map(|row| row.iter().copied().sum()).collect()));
                }
            }
            Op::Downsample2(x) => {
                let (c, h, w) = self.nodes[x.0].value.chw();
                let mut d = vec![T::zero(); c * h * w];
                resample::downsample2_backward(g, c, h, w, &mut d);
                out.push((*x, d));
            }
            Op::Upsample2 { x, ty, tx } => {
                let (c, h, w) = self.nodes[x.0].value.chw();
                let mut d = vec![T::zero(); c * h * w];
                resample::upsample2_backward(g, c, h, w, ty, tx, &mut d);
                out.push((*x, d));
            }
        }
        out
    }
}

/// Map upstream gradient `g` through `f(g[k], k)`, summing to one element when
/// the target was broadcast.
fn reduce_broadcast<T: Real>(g: &[T], target_len: usize, f: impl Fn(T, usize) -> T) -> Vec<T> {
    if target_len == g.len() {
        g.iter().enumerate().map(|(k, &v)| f(v, k)).collect()
    } else {
        vec![g.iter().enumerate().map(|(k, &v)| f(v, k)).sum()]
    }
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
