//! Adam updates against the closed form at step one and a plain reference loop.

use ddip::nn::Parameter;
use ddip::tensor::Tensor;
use ddip::train::{adam_step, AdamState};

fn scalar_param(v: f64) -> Parameter<f64> {
    Parameter::new("w", Tensor::new(vec![1], vec![v]).unwrap())
}

#[test]
fn first_step_moves_by_the_learning_rate() {
    for (g, lr) in [(1.0, 1e-3), (1.0, 0.05), (-3.0, 1e-2), (1e-6, 1e-3)] {
        let mut p = scalar_param(0.25);
        p.grad[0] = g;
        let mut state = AdamState::new(lr, [1]);
        state.eps = 0.0;
        adam_step(&mut [&mut p], &mut state, 1).unwrap();
        // m_hat = g and v_hat = g^2, so the step is lr * sign(g).
        let step = 0.25 - p.value.data()[0];
        assert!((step - lr * g.signum()).abs() < 1e-15, "g={g}, lr={lr}: step {step}");
        assert_eq!(state.step_count, 1);
    }
}

/// Adam written out for a single vector, straight from the update rule.
fn reference(x0: &[f64], grads: &[Vec<f64>], lr: f64) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut x = x0.to_vec();
    let mut m = vec![0.0; x.len()];
    let mut v = vec![0.0; x.len()];
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        for i in 0..x.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            x[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    x
}

#[test]
fn two_steps_with_constant_gradient_match_reference() {
    let x0 = [0.5, -1.0, 2.0, 0.0];
    let g = vec![0.3, -2.0, 1e-3, 5.0];
    let lr = 0.01;
    let mut a = Parameter::new("a", Tensor::new(vec![2], x0[..2].to_vec()).unwrap());
    let mut b = Parameter::new("b", Tensor::new(vec![2], x0[2..].to_vec()).unwrap());
    let mut state = AdamState::new(lr, [2, 2]);
    for epoch in 1..=2 {
        a.grad.copy_from_slice(&g[..2]);
        b.grad.copy_from_slice(&g[2..]);
        adam_step(&mut [&mut a, &mut b], &mut state, epoch).unwrap();
        assert!(a.grad.iter().chain(&b.grad).all(|&v| v == 0.0), "gradients are consumed");
    }
    let expected = reference(&x0, &[g.clone(), g], lr);
    let got: Vec<f64> = a.value.data().iter().chain(b.value.data()).copied().collect();
    for (e, x) in expected.iter().zip(&got) {
        assert!((e - x).abs() < 1e-15, "{expected:?} vs {got:?}");
    }
    assert_eq!(state.step_count, 2);
}

#[test]
fn non_finite_gradient_aborts_without_touching_parameters() {
    let mut a = scalar_param(1.0);
    let mut b = scalar_param(2.0);
    a.grad[0] = 0.5;
    b.grad[0] = f64::INFINITY;
    b.name = "dip2.up1.bias".into();
    let mut state = AdamState::new(1e-3, [1, 1]);
    let err = adam_step(&mut [&mut a, &mut b], &mut state, 42).unwrap_err().to_string();
    assert!(err.contains("42") && err.contains("dip2.up1.bias"), "{err}");
    assert_eq!((a.value.data()[0], b.value.data()[0], state.step_count), (1.0, 2.0, 0));
}
