//! Randomized invariants of the loss, the spectrum and the depth of field.

use ddip::analysis::{depth_of_field, power_spectrum, streak_energy, DofParams};
use ddip::imaging::ImagePlane;
use ddip::model::exclusion_loss;
use ddip::tensor::{Tape, Tensor};
use proptest::prelude::*;

fn image(max_side: usize) -> impl Strategy<Value = ImagePlane> {
    (2..=max_side, 2..=max_side).prop_flat_map(|(h, w)| {
        prop::collection::vec(-10.0f64..10.0, h * w).prop_map(move |px| ImagePlane::new(h, w, px, "p").unwrap())
    })
}

fn pair(max_side: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, usize, usize)> {
    (2..=max_side, 2..=max_side).prop_flat_map(|(h, w)| {
        (prop::collection::vec(-5.0f64..5.0, h * w), prop::collection::vec(-5.0f64..5.0, h * w), Just(h), Just(w))
    })
}

fn exclusion(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let mut tape = Tape::<f64>::new();
    let va = tape.constant(Tensor::new(vec![1, h, w], a.to_vec()).unwrap());
    let vb = tape.constant(Tensor::new(vec![1, h, w], b.to_vec()).unwrap());
    let l = exclusion_loss(&mut tape, va, vb).unwrap();
    tape.value(l).item()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exclusion_is_symmetric_and_non_negative((a, b, h, w) in pair(24)) {
        let ab = exclusion(&a, &b, h, w);
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, exclusion(&b, &a, h, w));
    }

    #[test]
    fn exclusion_ignores_offsets((a, b, h, w) in pair(16), shift in -3.0f64..3.0) {
        let shifted: Vec<f64> = a.iter().map(|v| v + shift).collect();
        let base = exclusion(&a, &b, h, w);
        prop_assert!((exclusion(&shifted, &b, h, w) - base).abs() <= 1e-9 * base.max(1.0));
    }

    #[test]
    fn spectrum_is_normalized_and_hermitian(img in image(20)) {
        prop_assume!(img.pixels.iter().any(|&v| v != 0.0));
        let spec = power_spectrum(&img).unwrap();
        prop_assert!((spec.values.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let (h, w) = (spec.height as isize, spec.width as isize);
        for v in -h / 2..h / 2 {
            for u in -w / 2..w / 2 {
                let (p, q) = (spec.get(v, u), spec.get(-v, -u));
                prop_assert!((p - q).abs() <= 1e-12 * p.abs().max(1e-3), "bin ({}, {})", v, u);
            }
        }
    }

    #[test]
    fn streak_fraction_is_a_fraction(img in image(20), deg in 0.0f64..180.0, hw in 0usize..3) {
        prop_assume!(img.pixels.iter().any(|&v| v != 0.0));
        let spec = power_spectrum(&img).unwrap();
        if let Ok(f) = streak_energy(&spec, deg, hw) {
            prop_assert!((0.0..=1.0).contains(&f));
        }
    }

    #[test]
    fn depth_of_field_grows_with_resolution_and_shrinks_with_wavelength(
        dt in 0.5f64..50.0, lambda in 0.01f64..1.0, k in 1.01f64..3.0,
    ) {
        let z = depth_of_field(DofParams { delta_t_nm: dt, wavelength_nm: lambda }).unwrap();
        prop_assert!(z > 0.0);
        let coarser = DofParams { delta_t_nm: dt * k, wavelength_nm: lambda };
        let longer = DofParams { delta_t_nm: dt, wavelength_nm: lambda * k };
        prop_assert!(depth_of_field(coarser).unwrap() > z);
        prop_assert!(depth_of_field(longer).unwrap() < z);
    }
}
