//! Finite-difference verification of every backward rule and of the
//! composed separation loss.
//!
//! Each operation is exercised on small random double-precision inputs. The
//! scalar objective is `sum(W * op(inputs))` with a fixed random weight `W`,
//! which probes every output element with a distinct weight. Analytic
//! gradients from the tape are compared with central differences at
//! `h = 1e-4` using the norm-wise relative error
//! `|g_tape - g_fd| / max(|g_tape|, |g_fd|)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{total_loss, AnchorSchedule, DdipModel, FilterMode, LossInputs, ModelConfig};
use crate::nn::NetworkSpec;
use crate::rng::RunSeed;
use crate::tensor::{Axis, OpKind, PaddingMode, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-4;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const COMPOSED_TOLERANCE: f64 = 1e-3;

/// Result for one operation (over all of its cases) or one composed graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub name: String,
    pub cases: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn entry(&self, name: &str) -> Option<&GradcheckEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// One line per entry: name, max relative error, tolerance, verdict.
    pub fn table(&self) -> String {
        let mut s = format!("{:<34} {:>12} {:>10}  result\n", "check", "max_rel_err", "tolerance");
        for e in &self.entries {
            s.push_str(&format!(
                "{:<34} {:>12.3e} {:>10.0e}  {}\n",
                e.name,
                e.max_rel_error,
                e.tolerance,
                if e.passed { "ok" } else { "FAIL" }
            ));
        }
        s
    }
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    op: OpKind,
    inputs: Vec<Tensor<f64>>,
    build: Build,
}

/// Uniform values in `±[0.1, 1]`, kept off the kinks of `abs` and leaky ReLU.
fn random_input(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn case(op: OpKind, shapes: &[&[usize]], rng: &mut impl Rng, build: Build) -> Case {
    Case { op, inputs: shapes.iter().map(|s| random_input(s, rng)).collect(), build }
}

fn op_cases(rng: &mut impl Rng) -> Vec<Case> {
    let t = [2, 3, 4];
    let one: &[usize] = &[1];
    let conv = |stride: usize, pad: PaddingMode| -> Build {
        Box::new(move |tp: &mut Tape<f64>, v: &[Var]| tp.conv2d(v[0], v[1], v.get(2).copied(), stride, pad))
    };
    vec![
        case(OpKind::Add, &[&t, &t], rng, Box::new(|tp, v| tp.add(v[0], v[1]))),
        case(OpKind::Add, &[&t, one], rng, Box::new(|tp, v| tp.add(v[0], v[1]))),
        case(OpKind::Sub, &[&t, &t], rng, Box::new(|tp, v| tp.sub(v[0], v[1]))),
        case(OpKind::Sub, &[one, &t], rng, Box::new(|tp, v| tp.sub(v[0], v[1]))),
        case(OpKind::Mul, &[&t, &t], rng, Box::new(|tp, v| tp.mul(v[0], v[1]))),
        case(OpKind::Mul, &[&t, one], rng, Box::new(|tp, v| tp.mul(v[0], v[1]))),
        case(OpKind::ScalarMul, &[&t], rng, Box::new(|tp, v| Ok(tp.scalar_mul(v[0], -1.7)))),
        case(OpKind::AddScalar, &[&t], rng, Box::new(|tp, v| Ok(tp.add_scalar(v[0], 0.3)))),
        case(OpKind::Mean, &[&t], rng, Box::new(|tp, v| Ok(tp.mean(v[0])))),
        case(OpKind::Sum, &[&t], rng, Box::new(|tp, v| Ok(tp.sum(v[0])))),
        case(OpKind::Square, &[&t], rng, Box::new(|tp, v| Ok(tp.square(v[0])))),
        case(OpKind::Abs, &[&t], rng, Box::new(|tp, v| Ok(tp.abs(v[0])))),
        case(OpKind::Sigmoid, &[&t], rng, Box::new(|tp, v| Ok(tp.sigmoid(v[0])))),
        case(OpKind::LeakyRelu, &[&t], rng, Box::new(|tp, v| Ok(tp.leaky_relu(v[0], 0.2)))),
        case(
            OpKind::ConcatChannels,
            &[&[1, 3, 4], &[2, 3, 4]],
            rng,
            Box::new(|tp, v| tp.concat_channels(&[v[0], v[1]])),
        ),
        case(OpKind::SpatialGradient, &[&[2, 5, 6]], rng, Box::new(|tp, v| tp.spatial_gradient(v[0], Axis::X))),
        case(OpKind::SpatialGradient, &[&[2, 5, 6]], rng, Box::new(|tp, v| tp.spatial_gradient(v[0], Axis::Y))),
        case(OpKind::Conv2d, &[&[2, 7, 6], &[3, 2, 5, 5], &[3]], rng, conv(1, PaddingMode::Reflect)),
        case(OpKind::Conv2d, &[&[2, 9, 7], &[2, 2, 5, 5], &[2]], rng, conv(2, PaddingMode::Reflect)),
        case(OpKind::Conv2d, &[&[1, 5, 5], &[1, 1, 3, 3]], rng, conv(1, PaddingMode::Zero)),
        case(OpKind::Conv2d, &[&[3, 6, 6], &[2, 3, 1, 1], &[2]], rng, conv(1, PaddingMode::Reflect)),
        case(OpKind::Conv2d, &[&[1, 8, 8], &[1, 1, 7, 7]], rng, conv(1, PaddingMode::Reflect)),
        case(OpKind::Downsample2, &[&[2, 6, 8]], rng, Box::new(|tp, v| tp.downsample2(v[0]))),
        case(OpKind::Downsample2, &[&[1, 5, 7]], rng, Box::new(|tp, v| tp.downsample2(v[0]))),
        case(OpKind::Upsample2, &[&[2, 3, 4]], rng, Box::new(|tp, v| tp.upsample2(v[0]))),
        case(OpKind::Upsample2, &[&[1, 3, 4]], rng, Box::new(|tp, v| tp.upsample2_to(v[0], 5, 7))),
        case(OpKind::Pixel, &[&[2, 4, 4]], rng, Box::new(|tp, v| tp.pixel(v[0], 16 + 2 * 4 + 2))),
    ]
}

/// `sum(w * out)` on `tape`; `w` is recorded as a constant.
fn weighted_sum(tape: &mut Tape<f64>, out: Var, w: &Tensor<f64>) -> Result<Var> {
    let wv = tape.constant(w.clone());
    let prod = tape.mul(out, wv)?;
    Ok(tape.sum(prod))
}

fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn new_tape(corrupt: Option<OpKind>) -> Tape<f64> {
    match corrupt {
        Some(k) => Tape::with_corrupted_backward(k),
        None => Tape::new(),
    }
}

fn check_case(c: &Case, weight_seed: u64, corrupt: Option<OpKind>) -> Result<f64> {
    let objective = |inputs: &[Tensor<f64>],
                     tape: &mut Tape<f64>,
                     w: Option<&Tensor<f64>>|
     -> Result<(Var, Vec<Var>, Tensor<f64>)> {
        let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let out = (c.build)(tape, &vars)?;
        let w = match w {
            Some(w) => w.clone(),
            None => {
                let mut rng = RunSeed(weight_seed).stream(0);
                Tensor::from_fn(tape.shape(out), |_| rng.random_range(-1.0..1.0))
            }
        };
        Ok((weighted_sum(tape, out, &w)?, vars, w))
    };

    let mut tape = new_tape(corrupt);
    let (loss, vars, w) = objective(&c.inputs, &mut tape, None)?;
    tape.backward(loss)?;
    let analytic: Vec<f64> = vars
        .iter()
        .zip(&c.inputs)
        .flat_map(|(&v, x)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]))
        .collect();

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut inputs = c.inputs.clone();
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let (l, _, _) = objective(inputs, &mut t, Some(&w))?;
        Ok(t.value(l).item())
    };
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            inputs[i].data_mut()[j] = x0 + FD_STEP;
            let up = eval(&inputs)?;
            inputs[i].data_mut()[j] = x0 - FD_STEP;
            let down = eval(&inputs)?;
            inputs[i].data_mut()[j] = x0;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    Ok(rel_error(&analytic, &numeric))
}

/// Network schedule used for the composed check: depth 3, two channels.
pub fn toy_network() -> NetworkSpec {
    NetworkSpec::deep(1, 1).with_channels(vec![2, 2, 2], 2)
}

/// Gradient of the full separation loss with respect to every trainable
/// parameter, on 8x8 images.
fn check_composed(mode: FilterMode, epoch: usize, corrupt: Option<OpKind>) -> Result<f64> {
    let (h, w) = (8, 8);
    let config = ModelConfig { network: toy_network(), filter_mode: mode, ..ModelConfig::default() };
    let mut model = DdipModel::<f64>::build(config, h, w, RunSeed(11))?;
    let mut rng = RunSeed(12).stream(0);
    let obs: Vec<Tensor<f64>> = (0..2).map(|_| Tensor::from_fn(&[1, h, w], |_| rng.random_range(-1.0..1.0))).collect();
    let gamma = 0.2;
    let anchor = AnchorSchedule::default();

    let loss_on = |model: &DdipModel<f64>, tape: &mut Tape<f64>| -> Result<(Var, crate::model::BoundModel)> {
        let bound = model.bind(tape);
        let out = model.forward(tape, &bound)?;
        let i1_obs = tape.constant(obs[0].clone());
        let i2_obs = tape.constant(obs[1].clone());
        let inputs = LossInputs { i1: out.i1, i2: out.i2, i1_obs, i2_obs, y1: out.y1, y2: out.y2, alphas: out.alphas };
        Ok((total_loss(tape, &inputs, gamma, epoch, anchor)?.0, bound))
    };

    let mut tape = new_tape(corrupt);
    let (loss, bound) = loss_on(&model, &mut tape)?;
    tape.backward(loss)?;
    model.pull_grads(&tape, &bound);
    let analytic: Vec<f64> = model.parameters_mut().iter().flat_map(|p| p.grad.clone()).collect();

    let mut numeric = Vec::with_capacity(analytic.len());
    let n_params = model.parameters_mut().len();
    for i in 0..n_params {
        let len = model.parameters_mut()[i].value.len();
        for j in 0..len {
            let x0 = model.parameters_mut()[i].value.data()[j];
            let mut at = |x: f64| -> Result<f64> {
                model.parameters_mut()[i].value.data_mut()[j] = x;
                let mut t = Tape::new();
                let (l, _) = loss_on(&model, &mut t)?;
                Ok(t.value(l).item())
            };
            let up = at(x0 + FD_STEP)?;
            let down = at(x0 - FD_STEP)?;
            at(x0)?;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    Ok(rel_error(&analytic, &numeric))
}

/// Run the whole suite. With `corrupt` set, that operation's backward rule
/// is deliberately scaled so the suite must fail (negative control).
pub fn run_gradcheck(corrupt: Option<OpKind>) -> Result<GradcheckReport> {
    let mut rng = RunSeed(2024).stream(0);
    let cases = op_cases(&mut rng);
    let mut entries: Vec<GradcheckEntry> = Vec::new();
    for (idx, c) in cases.iter().enumerate() {
        let err = check_case(c, idx as u64 + 1, corrupt)?;
        match entries.iter_mut().find(|e| e.name == c.op.name()) {
            Some(e) => {
                e.cases += 1;
                e.max_rel_error = e.max_rel_error.max(err);
            }
            None => entries.push(GradcheckEntry {
                name: c.op.name().to_string(),
                cases: 1,
                max_rel_error: err,
                tolerance: OP_TOLERANCE,
                passed: false,
            }),
        }
    }
    for (mode, epoch) in [(FilterMode::ShallowDip, 1), (FilterMode::SingleKernel, 1), (FilterMode::ShallowDip, 101)] {
        let err = check_composed(mode, epoch, corrupt)?;
        entries.push(GradcheckEntry {
            name: format!("ddip_loss[{mode},epoch={epoch}]"),
            cases: 1,
            max_rel_error: err,
            tolerance: COMPOSED_TOLERANCE,
            passed: false,
        });
    }
    for e in &mut entries {
        e.passed = e.max_rel_error <= e.tolerance;
    }
    Ok(GradcheckReport { entries })
}
