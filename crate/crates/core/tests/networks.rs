//! Network construction, initialization streams and gradient flow.

use ddip::model::{total_loss, AnchorSchedule, DdipModel, FilterMode, Filters, LossInputs, ModelConfig};
use ddip::nn::{DipNetwork, NetworkSpec};
use ddip::rng::{NetSlot, RunSeed};
use ddip::tensor::{Tape, Tensor};
use ddip::train::{adam_step, AdamState};

/// Parameter count of an encoder-decoder DIP, layer by layer: per level a
/// strided main convolution, a skip convolution and a decoder convolution on
/// the concatenation, plus the 1x1 output head. Every convolution has a bias.
fn layer_count_formula(spec: &NetworkSpec) -> usize {
    let conv = |c_out: usize, c_in: usize, k: usize| c_out * c_in * k * k + c_out;
    let ch = &spec.channels_per_level;
    let (k, ks, s) = (spec.main_kernel, spec.skip_kernel, spec.skip_channels);
    let mut total = 0;
    for i in 0..ch.len() {
        let below_in = if i == 0 { spec.in_channels } else { ch[i - 1] };
        let from_deeper = if i + 1 == ch.len() { ch[i] } else { ch[i + 1] };
        total += conv(ch[i], below_in, k);
        total += conv(s, below_in, ks);
        total += conv(ch[i], from_deeper + s, k);
    }
    total + conv(spec.out_channels, ch[0], 1)
}

#[test]
fn parameter_count_matches_layer_formula() {
    let spec = NetworkSpec::deep(1, 1);
    assert_eq!(spec.channels_per_level, vec![16, 32, 64, 64]);
    let net = DipNetwork::<f64>::build(spec.clone(), 64, 64, RunSeed(3), NetSlot::Dip1).unwrap();
    // 416 + 8 + 14416 | 12832 + 68 + 54432 | 51264 + 132 + 108864 | 102464 + 260 + 108864 | 17
    assert_eq!(layer_count_formula(&spec), 454_037);
    assert_eq!(net.parameter_count(), 454_037);

    let weights = DipNetwork::<f64>::build(NetworkSpec::deep(2, 2), 64, 64, RunSeed(3), NetSlot::Dip3).unwrap();
    assert_eq!(weights.parameter_count(), layer_count_formula(&NetworkSpec::deep(2, 2)));
    let shallow = DipNetwork::<f64>::build(NetworkSpec::shallow(), 64, 64, RunSeed(3), NetSlot::Filter1).unwrap();
    assert_eq!(shallow.parameter_count(), layer_count_formula(&NetworkSpec::shallow()));

    let mut model = DdipModel::<f64>::build(ModelConfig::default(), 64, 64, RunSeed(3)).unwrap();
    let expected = 2 * layer_count_formula(&NetworkSpec::deep(1, 1))
        + layer_count_formula(&NetworkSpec::deep(2, 2))
        + 2 * layer_count_formula(&NetworkSpec::shallow());
    assert_eq!(model.parameter_count(), expected);
}

fn forward_shape(spec: NetworkSpec, h: usize, w: usize) -> Vec<usize> {
    let net = DipNetwork::<f32>::build(spec, h, w, RunSeed(9), NetSlot::Dip1).unwrap();
    let mut tape = Tape::new();
    let vars = net.bind(&mut tape);
    let out = net.forward(&mut tape, &vars).unwrap();
    tape.shape(out).to_vec()
}

#[test]
fn generator_output_matches_image_size() {
    assert_eq!(forward_shape(NetworkSpec::deep(1, 1), 64, 64), vec![1, 64, 64]);
    assert_eq!(forward_shape(NetworkSpec::deep(1, 1), 272, 272), vec![1, 272, 272]);
}

#[test]
fn same_seed_same_parameters() {
    let a = DipNetwork::<f64>::build(NetworkSpec::deep(1, 1), 32, 32, RunSeed(5), NetSlot::Dip2).unwrap();
    let b = DipNetwork::<f64>::build(NetworkSpec::deep(1, 1), 32, 32, RunSeed(5), NetSlot::Dip2).unwrap();
    for (p, q) in a.parameters.iter().zip(&b.parameters) {
        assert_eq!(p.value, q.value);
    }
    assert_eq!(a.fixed_input, b.fixed_input);
}

#[test]
fn networks_draw_from_isolated_streams() {
    let seed = RunSeed(17);
    let shallow = ModelConfig { filter_mode: FilterMode::ShallowDip, ..ModelConfig::default() };
    let kernels = ModelConfig { filter_mode: FilterMode::SingleKernel, ..ModelConfig::default() };
    let a = DdipModel::<f64>::build(shallow, 32, 32, seed).unwrap();
    let b = DdipModel::<f64>::build(kernels, 32, 32, seed).unwrap();
    // Swapping the filter networks for fixed kernels leaves the generators alone.
    for (na, nb) in [(&a.dip1, &b.dip1), (&a.dip2, &b.dip2), (&a.dip3, &b.dip3)] {
        assert_eq!(na.fixed_input, nb.fixed_input);
        for (p, q) in na.parameters.iter().zip(&nb.parameters) {
            assert_eq!(p.value, q.value);
        }
    }
    // Each generator equals a standalone build on its own slot.
    let solo = DipNetwork::<f64>::build(NetworkSpec::deep(1, 1), 32, 32, seed, NetSlot::Dip2).unwrap();
    assert_eq!(solo.fixed_input, a.dip2.fixed_input);
    assert_eq!(solo.parameters[0].value, a.dip2.parameters[0].value);
    // ... and different slots give different draws.
    assert_ne!(a.dip1.fixed_input, a.dip2.fixed_input);
    assert_ne!(a.dip1.parameters[0].value, a.dip2.parameters[0].value);
    let Filters::ShallowDip { f1, f2 } = &a.filters else { panic!("shallow filters expected") };
    assert_ne!(f1.parameters[0].value, f2.parameters[0].value);
}

fn shallow_output(net: &DipNetwork<f64>, input: &Tensor<f64>) -> Vec<f64> {
    let mut tape = Tape::new();
    let vars = net.bind(&mut tape);
    let x = tape.constant(input.clone());
    let out = net.forward_on(&mut tape, &vars, x).unwrap();
    tape.value(out).data().to_vec()
}

fn test_image(h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn(&[1, h, w], |i| ((i * 37 % 23) as f64 / 23.0 - 0.5) + 0.01 * i as f64)
}

#[test]
fn shallow_filter_with_zero_kernels_emits_its_bias() {
    let mut net = DipNetwork::<f64>::build(NetworkSpec::shallow(), 16, 16, RunSeed(2), NetSlot::Filter1).unwrap();
    let img = test_image(16, 16);
    assert_eq!(shallow_output(&net, &img).len(), 16 * 16);
    for p in net.parameters.iter_mut().filter(|p| p.name.ends_with("weight")) {
        p.value.data_mut().fill(0.0);
    }
    let out = shallow_output(&net, &img);
    let head_bias = net.parameters.iter().find(|p| p.name == "head.bias").unwrap().value.data()[0];
    assert!(out.iter().all(|&v| v == head_bias));
}

#[test]
fn shallow_filter_gradient_matches_finite_differences() {
    let net = DipNetwork::<f64>::build(NetworkSpec::shallow(), 12, 12, RunSeed(4), NetSlot::Filter2).unwrap();
    let img = test_image(12, 12);
    let mut tape = Tape::new();
    let vars = net.bind(&mut tape);
    let x = tape.constant(img.clone());
    let out = net.forward_on(&mut tape, &vars, x).unwrap();
    let loss = tape.sum(out);
    tape.backward(loss).unwrap();

    // A pre-activation of this net sits within 1e-4 of the leaky-ReLU kink,
    // so the step is kept well below that distance.
    let h = 1e-6;
    for (pi, p) in net.parameters.iter().enumerate() {
        let analytic = tape.grad(vars[pi]).unwrap().to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let eval = |delta: f64| {
                let mut probe = net.clone();
                probe.parameters[pi].value.data_mut()[k] += delta;
                shallow_output(&probe, &img).iter().sum::<f64>()
            };
            *slot = (eval(h) - eval(-h)) / (2.0 * h);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt().max(1e-8);
        assert!(diff / scale < 1e-4, "{}: relative error {}", p.name, diff / scale);
    }
}

fn data_term_step(model: &mut DdipModel<f64>, obs: &Tensor<f64>, epoch: usize) -> (Vec<f64>, f64) {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let out = model.forward(&mut tape, &bound).unwrap();
    let y1 = tape.value(out.y1).data().to_vec();
    let o = tape.constant(obs.clone());
    let x = LossInputs { i1: out.i1, i2: out.i2, i1_obs: o, i2_obs: o, y1: out.y1, y2: out.y2, alphas: out.alphas };
    let (loss, b) = total_loss(&mut tape, &x, 0.0, epoch, AnchorSchedule { epochs: 0, weight: 0.0 }).unwrap();
    tape.backward(loss).unwrap();
    model.pull_grads(&tape, &bound);
    (y1, b.data_term)
}

#[test]
fn every_parameter_receives_gradient_from_the_data_term() {
    for mode in [FilterMode::ShallowDip, FilterMode::SingleKernel] {
        let cfg = ModelConfig { filter_mode: mode, ..ModelConfig::default() };
        let mut model = DdipModel::<f64>::build(cfg, 32, 32, RunSeed(23)).unwrap();
        data_term_step(&mut model, &test_image(32, 32), 1);
        for p in model.parameters_mut() {
            assert!(p.grad.iter().any(|&g| g != 0.0), "{mode}: {} has no gradient", p.name);
        }
    }
}

#[test]
fn forward_is_repeatable_and_moves_after_a_step() {
    let cfg =
        ModelConfig { network: NetworkSpec::deep(1, 1).with_channels(vec![4, 4, 4], 2), ..ModelConfig::default() };
    let mut model = DdipModel::<f64>::build(cfg, 16, 16, RunSeed(8)).unwrap();
    let obs = test_image(16, 16);
    let (first, _) = data_term_step(&mut model, &obs, 1);
    for p in model.parameters_mut() {
        p.zero_grad();
    }
    let (again, _) = data_term_step(&mut model, &obs, 1);
    assert_eq!(first, again);

    let mut params = model.parameters_mut();
    let mut adam = AdamState::for_parameters(1e-3, &params);
    adam_step(&mut params, &mut adam, 1).unwrap();
    let (moved, _) = data_term_step(&mut model, &obs, 2);
    assert_ne!(first, moved);
}
