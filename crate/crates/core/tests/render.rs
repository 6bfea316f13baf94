use std::rc::Rc;

use hgs_autodiff::gradcheck::{check_gradients, GradCheckOptions};
use hgs_autodiff::Tensor;
use hgs_core::camera::{Camera, Intrinsics, Pose};
use hgs_core::render::{render, render_reference, render_var, RenderSettings, SplatVars, Splats};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn camera(w: usize, h: usize) -> Camera {
    Camera {
        intrinsics: Intrinsics::new(1.1 * w as f64, 1.1 * w as f64, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap(),
        pose: Pose::look_at(
            Vector3::new(0.3, -0.2, -0.1),
            Vector3::new(0.0, 0.0, 3.0),
            Vector3::new(0.0, 1.0, 0.0),
        )
        .unwrap(),
    }
}

fn random_inputs(m: usize, deg: usize, seed: u64) -> [Tensor; 5] {
    random_inputs_scaled(m, deg, seed, 0.03..0.15)
}

fn random_inputs_scaled(m: usize, deg: usize, seed: u64, scales: std::ops::Range<f64>) -> [Tensor; 5] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kc = 3 * (deg + 1) * (deg + 1);
    [
        Tensor::from_fn(&[m, 3], |i| match i % 3 {
            2 => rng.gen_range(2.0..4.0),
            _ => rng.gen_range(-0.8..0.8),
        }),
        Tensor::from_fn(&[m, 3], |_| rng.gen_range(scales.clone())),
        Tensor::from_fn(&[m, 4], |_| rng.gen_range(-1.0..1.0)),
        Tensor::from_fn(&[m], |_| rng.gen_range(0.05..0.95)),
        Tensor::from_fn(&[m, kc], |_| rng.gen_range(-0.3..0.3)),
    ]
}

fn splats(t: &[Tensor; 5], deg: usize) -> Splats {
    Splats::new(
        Rc::new(t[0].clone()),
        Rc::new(t[1].clone()),
        Rc::new(t[2].clone()),
        Rc::new(t[3].clone()),
        Rc::new(t[4].clone()),
        deg,
    )
    .unwrap()
}

#[test]
fn tiled_matches_brute_force() {
    let inputs = random_inputs(1000, 1, 7);
    let s = splats(&inputs, 1);
    let cam = camera(64, 64);
    let settings = RenderSettings {
        background: [0.1, 0.2, 0.3],
        ..Default::default()
    };
    let a = render(&s, &cam, &settings).unwrap();
    let b = render_reference(&s, &cam, &settings).unwrap();
    assert!(a.color.max_abs_diff(&b.color) < 1e-5);
    assert!(a.alpha.max_abs_diff(&b.alpha) < 1e-5);
    assert_eq!(a.contributors, b.contributors);
}

#[test]
fn alpha_is_one_minus_product_of_transmittances() {
    let inputs = random_inputs(40, 0, 8);
    let s = splats(&inputs, 0);
    let cam = camera(24, 24);
    let settings = RenderSettings::smooth();
    let out = render(&s, &cam, &settings).unwrap();
    let state = out.state.as_ref().unwrap();
    for y in 0..24 {
        for x in 0..24 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut prod = 1.0;
            for p in state.projected().iter().flatten() {
                let (dx, dy) = (px - p.mean2d[0], py - p.mean2d[1]);
                let q = p.conic[0] * dx * dx + 2.0 * p.conic[1] * dx * dy + p.conic[2] * dy * dy;
                prod *= 1.0 - p.opacity * (-0.5 * q).exp();
            }
            assert!((out.alpha.get(&[y, x]) - (1.0 - prod)).abs() < 1e-9);
        }
    }
}

#[test]
fn repeated_renders_are_bit_identical() {
    let inputs = random_inputs(300, 1, 9);
    let s = splats(&inputs, 1);
    let cam = camera(40, 40);
    let a = render(&s, &cam, &RenderSettings::default()).unwrap();
    let b = render(&s, &cam, &RenderSettings::default()).unwrap();
    assert_eq!(a.color.data(), b.color.data());
}

// Central differences carry an O((h/s)²) truncation error in the scale
// entries, so scales stay well above the step.
fn gradcheck(m: usize, deg: usize, seed: u64, size: usize) -> f64 {
    let inputs = random_inputs_scaled(m, deg, seed, 0.1..0.3);
    let cam = camera(size, size);
    let report = check_gradients(
        &inputs,
        |_, v| {
            let sv = SplatVars {
                means: &v[0],
                scales: &v[1],
                rotations: &v[2],
                opacities: &v[3],
                sh: &v[4],
                sh_degree: deg,
            };
            render_var(&sv, &cam, &RenderSettings::smooth())
                .map(|r| r.0)
                .map_err(|e| hgs_autodiff::TensorError::invalid("render", e.to_string()))
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    eprintln!("render gradcheck m={m} deg={deg}: {:e} per input {:?}", report.max_rel_err, report.per_input);
    report.max_rel_err
}

#[test]
fn single_primitive_gradients() {
    assert!(gradcheck(1, 1, 10, 12) < 1e-6);
}

#[test]
fn overlapping_primitives_gradients() {
    assert!(gradcheck(6, 3, 11, 12) < 1e-6);
}
