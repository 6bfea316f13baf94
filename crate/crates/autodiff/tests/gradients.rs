//! Finite-difference checks for every primitive, in float64.

use hgs_autodiff::gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
use hgs_autodiff::{attention_block, Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from zero so kinks (relu, abs) are not straddled.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn check(inputs: &[Tensor], f: impl Fn(&Graph, &[Var]) -> Result<Var>) -> GradCheckReport {
    let report = check_gradients(inputs, f, &GradCheckOptions::default()).unwrap();
    assert!(
        report.passes(TOL),
        "max rel err {:e}, worst {:?}",
        report.max_rel_err,
        report.worst
    );
    report
}

#[test]
fn conv2d_random_4x4x2() {
    check(&[random(&[1, 4, 4, 2], 1), random(&[3, 3, 2, 3], 2)], |_, v| {
        v[0].conv2d(&v[1], 1, 1)
    });
}

#[test]
fn conv2d_strided_batched() {
    check(&[random(&[2, 6, 5, 3], 3), random(&[3, 3, 3, 2], 4)], |_, v| {
        v[0].conv2d(&v[1], 2, 1)
    });
}

#[test]
fn conv2d_pointwise() {
    check(&[random(&[2, 3, 3, 4], 5), random(&[1, 1, 4, 2], 6)], |_, v| {
        v[0].conv2d(&v[1], 1, 0)
    });
}

#[test]
fn matmul_plain_and_batched() {
    check(&[random(&[3, 4], 7), random(&[4, 2], 8)], |_, v| v[0].matmul(&v[1]));
    check(&[random(&[2, 3, 4], 9), random(&[2, 4, 5], 10)], |_, v| v[0].matmul(&v[1]));
}

#[test]
fn broadcasting_arithmetic() {
    let a = random(&[2, 3, 4], 11);
    let b = random(&[3, 1], 12);
    check(&[a.clone(), b.clone()], |_, v| v[0].add(&v[1]));
    check(&[a.clone(), b.clone()], |_, v| v[0].sub(&v[1]));
    check(&[a, b], |_, v| v[0].mul(&v[1]));
}

#[test]
fn pointwise_nonlinearities() {
    let x = away_from_zero(&[3, 5], 13);
    check(&[x.clone()], |_, v| v[0].abs());
    check(&[x.clone()], |_, v| v[0].relu());
    check(&[x.clone()], |_, v| v[0].sigmoid());
    check(&[x.clone()], |_, v| v[0].softplus());
    check(&[x.clone()], |_, v| v[0].exp());
    let positive = x.map(|v| v.abs() + 0.5);
    check(&[positive], |_, v| v[0].log());
}

#[test]
fn softmax_random_vector() {
    let x = random(&[7], 14);
    check(&[x.clone()], |_, v| v[0].softmax(0));
    let g = Graph::new();
    let y = g.constant(x).softmax(0).unwrap();
    assert!((y.value().sum() - 1.0).abs() < 1e-12);
    check(&[random(&[2, 3, 4], 15)], |_, v| v[0].softmax(1));
}

#[test]
fn resampling() {
    check(&[random(&[2, 3, 4, 2], 16)], |_, v| v[0].bilinear_resize(7, 5));
    check(&[random(&[1, 8, 8, 3], 17)], |_, v| v[0].bilinear_resize(3, 4));
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let pts = Tensor::from_fn(&[2, 3, 3, 2], |_| rng.gen_range(-0.5..5.5));
    check(&[random(&[2, 5, 5, 3], 19)], move |_, v| v[0].grid_sample(&[1, 0], &pts));
}

#[test]
fn shape_ops() {
    let a = random(&[2, 3, 2], 20);
    let b = random(&[2, 1, 2], 21);
    check(&[a.clone(), b], |_, v| Var::concat(&[v[0].clone(), v[1].clone()], 1));
    check(&[a.clone()], |_, v| v[0].slice(1, 1, 3));
    check(&[a.clone()], |_, v| v[0].transpose(&[2, 0, 1]));
    check(&[a], |_, v| v[0].reshape(&[3, 4]));
}

#[test]
fn reductions() {
    let a = random(&[3, 4, 2], 22);
    check(&[a.clone()], |_, v| Ok(v[0].sum_all()));
    check(&[a.clone()], |_, v| Ok(v[0].mean_all()));
    check(&[a.clone()], |_, v| v[0].sum_axis(1, false));
    check(&[a.clone()], |_, v| v[0].mean_axis(2, true));
    check(&[a], |_, v| v[0].max_axis(0, false));
}

#[test]
fn layer_norm() {
    check(&[random(&[4, 6], 23)], |_, v| v[0].layer_norm(1e-5));
}

#[test]
fn attention() {
    let q = random(&[2, 3, 4], 24);
    let k = random(&[2, 5, 4], 25);
    let v = random(&[2, 5, 4], 26);
    check(&[q, k, v], |_, x| attention_block(&x[0], &x[1], &x[2], 2));
}

#[test]
fn attention_weights_sum_to_one() {
    // With v = identity rows, the output row is exactly the weight vector.
    let g = Graph::new();
    let q = g.constant(random(&[1, 4, 5], 27));
    let k = g.constant(random(&[1, 5, 5], 28));
    let v = g.constant(Tensor::from_fn(&[1, 5, 5], |i| if i / 5 == i % 5 { 1.0 } else { 0.0 }));
    let out = attention_block(&q, &k, &v, 1).unwrap();
    for t in 0..4 {
        let s: f64 = (0..5).map(|c| out.value().get(&[0, t, c])).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn attention_dominant_key() {
    let g = Graph::new();
    let mut kd = Tensor::zeros(&[1, 3, 2]);
    kd.set(&[0, 1, 0], 50.0);
    let q = g.constant(Tensor::new(&[1, 1, 2], vec![1.0, 0.0]).unwrap());
    let k = g.constant(kd);
    let v = g.constant(Tensor::new(&[1, 3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap());
    // logit margin 50 / sqrt(2) > 30
    let out = attention_block(&q, &k, &v, 1).unwrap();
    assert!((out.value().get(&[0, 0, 0]) - 3.0).abs() < 1e-9);
    assert!((out.value().get(&[0, 0, 1]) - 4.0).abs() < 1e-9);
}

#[test]
fn checkerboard_upsample_matches_hand_oracle() {
    let g = Graph::new();
    let x = g.constant(Tensor::new(&[1, 2, 2, 1], vec![0.0, 1.0, 1.0, 0.0]).unwrap());
    let y = x.bilinear_resize(4, 4).unwrap();
    #[rustfmt::skip]
    let expected = [
        0.0, 0.25, 0.75, 1.0,
        0.25, 0.375, 0.625, 0.75,
        0.75, 0.625, 0.375, 0.25,
        1.0, 0.75, 0.25, 0.0,
    ];
    for (a, b) in y.value().data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-15, "{a} vs {b}");
    }
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let g = Graph::new();
        let x = g.param(random(&[1, 6, 6, 3], 29));
        let k = g.param(random(&[3, 3, 3, 4], 30));
        let y = x
            .conv2d(&k, 1, 1)
            .unwrap()
            .relu()
            .unwrap()
            .bilinear_resize(4, 4)
            .unwrap()
            .softmax(3)
            .unwrap()
            .square()
            .unwrap()
            .sum_all();
        let grads = g.backward(&y, None).unwrap();
        (y.value().clone(), grads.get(&k).unwrap().clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.data(), b.data());
    assert_eq!(ga.data(), gb.data());
}

#[test]
fn shared_input_accumulates() {
    // f(x) = x * x + x  =>  f' = 2x + 1
    let g = Graph::new();
    let x = g.param(Tensor::new(&[2], vec![1.5, -3.0]).unwrap());
    let y = x.mul(&x).unwrap().add(&x).unwrap().sum_all();
    let grads = g.backward(&y, None).unwrap();
    assert_eq!(grads.get(&x).unwrap().data(), &[4.0, -5.0]);
}
