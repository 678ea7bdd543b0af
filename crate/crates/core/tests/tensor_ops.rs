mod common;

use common::gradcheck::{check_layer, LAYERS};
use common::oracles::*;
use proptest::prelude::*;
use scarceops::rng::seeded;
use scarceops::tensor::{AdamConfig, AdamState, BatchNormMode, BatchNormStats, Parameter, Tape, Tensor};

fn t32(shape: &[usize], data: &[f64]) -> Tensor<f32> {
    Tensor::new(shape.to_vec(), data.iter().map(|&v| v as f32).collect()).unwrap()
}

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn conv2d_matches_direct_loops() {
    let mut rng = seeded(11);
    let x = random_vec(&mut rng, 2 * 3 * 8 * 8);
    let k = random_vec(&mut rng, 4 * 3 * 3 * 3);
    let b = random_vec(&mut rng, 4);
    let (want, shape) = conv2d_direct(&x, [2, 3, 8, 8], &k, [4, 3, 3, 3], &b, 2, 1);

    let mut tape = Tape::new();
    let xv = tape.constant(t32(&[2, 3, 8, 8], &x));
    let kv = tape.constant(t32(&[4, 3, 3, 3], &k));
    let bv = tape.constant(t32(&[4], &b));
    let y = tape.conv2d(xv, kv, Some(bv), 2, 1).unwrap();
    assert_eq!(tape.shape(y), &shape);
    assert!(max_abs_diff(tape.value(y).data(), &want) < 1e-5);
}

#[test]
fn conv_transpose2d_matches_scatter_oracle() {
    let mut rng = seeded(12);
    let x = random_vec(&mut rng, 2 * 3 * 5 * 4);
    let k = random_vec(&mut rng, 3 * 2 * 4 * 4);
    let b = random_vec(&mut rng, 2);
    let (want, shape) = conv_transpose2d_direct(&x, [2, 3, 5, 4], &k, [3, 2, 4, 4], &b, 2, 1);

    let mut tape = Tape::new();
    let xv = tape.constant(t32(&[2, 3, 5, 4], &x));
    let kv = tape.constant(t32(&[3, 2, 4, 4], &k));
    let bv = tape.constant(t32(&[2], &b));
    let y = tape.conv_transpose2d(xv, kv, Some(bv), 2, 1).unwrap();
    assert_eq!(tape.shape(y), &shape);
    assert!(max_abs_diff(tape.value(y).data(), &want) < 1e-5);
}

#[test]
fn conv_transpose2d_is_the_input_gradient_of_conv2d() {
    // d<conv(z), x>/dz equals convT(x) with the same kernel.
    let mut rng = seeded(13);
    let (n, c, f, h, w) = (2, 3, 2, 7, 5);
    let z = random_vec(&mut rng, n * c * h * w);
    let k = random_vec(&mut rng, f * c * 3 * 3);
    let mut tape = Tape::<f64>::new();
    let zv = tape.leaf(t64(&[n, c, h, w], &z).requires_grad(true));
    let kv = tape.constant(t64(&[f, c, 3, 3], &k));
    let y = tape.conv2d(zv, kv, None, 2, 1).unwrap();
    let ys = tape.shape(y).to_vec();
    let x = random_vec(&mut rng, ys.iter().product());
    let xv = tape.constant(t64(&ys, &x));
    let p = tape.mul(y, xv).unwrap();
    let s = tape.sum(p).unwrap();
    tape.backward(s).unwrap();
    let grad = tape.grad(zv).unwrap().to_vec();

    let (ct, shape) = conv_transpose2d_direct(&x, [n, f, ys[2], ys[3]], &k, [f, c, 3, 3], &[0.0; 3], 2, 1);
    assert_eq!(shape, [n, c, h, w]);
    assert!(max_abs_diff(&grad, &ct) < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn conv_pair_is_adjoint(seed in any::<u64>(), n in 1usize..3, c in 1usize..4, f in 1usize..4,
                            hw in 2usize..6, stride in 1usize..3, pad in 0usize..2) {
        let k = 3usize.max(pad + 1);
        let mut rng = seeded(seed);
        let kernel = random_vec(&mut rng, f * c * k * k);
        // convT input y: [n, f, hw, hw]; its output matches conv2d's input size.
        let y = random_vec(&mut rng, n * f * hw * hw);
        let mut tape = Tape::<f32>::new();
        let kv = tape.constant(t32(&[f, c, k, k], &kernel));
        let yv = tape.constant(t32(&[n, f, hw, hw], &y));
        let xt = tape.conv_transpose2d(yv, kv, None, stride, pad).unwrap();
        let xs = tape.shape(xt).to_vec();
        let x = random_vec(&mut rng, xs.iter().product());
        let xv = tape.constant(t32(&xs, &x));
        let cx = tape.conv2d(xv, kv, None, stride, pad).unwrap();
        prop_assert_eq!(tape.shape(cx), &[n, f, hw, hw]);
        let lhs: f64 = tape.value(cx).data().iter().zip(&y).map(|(&a, &b)| a as f64 * b).sum();
        let rhs: f64 = tape.value(xt).data().iter().zip(&x).map(|(&a, &b)| a as f64 * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-4, "{} vs {}", lhs, rhs);
    }
}

#[test]
fn linear_matches_dot_products() {
    let mut rng = seeded(14);
    let x = random_vec(&mut rng, 12);
    let w = random_vec(&mut rng, 8);
    let b = random_vec(&mut rng, 2);
    let want = linear_loops(&x, 3, 4, &w, 2, &b);
    let mut tape = Tape::new();
    let xv = tape.constant(t32(&[3, 4], &x));
    let wv = tape.constant(t32(&[2, 4], &w));
    let bv = tape.constant(t32(&[2], &b));
    let y = tape.linear(xv, wv, Some(bv)).unwrap();
    assert!(max_abs_diff(tape.value(y).data(), &want) < 1e-6);
}

#[test]
fn mse_matches_loop() {
    let mut rng = seeded(15);
    let a = random_vec(&mut rng, 257);
    let b = random_vec(&mut rng, 257);
    let mut tape = Tape::new();
    let av = tape.constant(t64(&[257], &a));
    let bv = tape.constant(t64(&[257], &b));
    let l = tape.mse_loss(av, bv).unwrap();
    assert!((tape.value(l).data()[0] - mse_loop(&a, &b)).abs() < 1e-7);

    let mut tape = Tape::new();
    let av = tape.constant(t32(&[257], &a));
    let bv = tape.constant(t32(&[257], &b));
    let l = tape.mse_loss(av, bv).unwrap();
    assert!((tape.value(l).data()[0] as f64 - mse_loop(&a, &b)).abs() < 1e-6);
}

#[test]
fn batch_norm_output_statistics() {
    let mut rng = seeded(16);
    let (n, c, h, w) = (4, 3, 5, 5);
    let x: Vec<f64> = random_vec(&mut rng, n * c * h * w).iter().map(|v| 3.0 * v + 1.5).collect();
    let gamma = [0.5, 2.0, 1.25];
    let beta = [-1.0, 0.0, 0.75];
    let mut tape = Tape::new();
    let xv = tape.constant(t32(&[n, c, h, w], &x));
    let gv = tape.constant(t32(&[c], &gamma));
    let bv = tape.constant(t32(&[c], &beta));
    let mut stats = BatchNormStats::new(c);
    let y = tape
        .batch_norm2d(xv, gv, bv, &mut stats, BatchNormMode::Train { update_running: true })
        .unwrap();
    let out = tape.value(y).data();
    let l = h * w;
    for ch in 0..c {
        let vals: Vec<f64> = (0..n).flat_map(|b| out[(b * c + ch) * l..(b * c + ch + 1) * l].iter().map(|&v| v as f64)).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        assert!((mean - beta[ch]).abs() < 1e-4, "channel {ch} mean {mean}");
        assert!((std - gamma[ch]).abs() < 1e-4, "channel {ch} std {std}");
    }
    // Running stats moved 10% of the way toward the batch statistics.
    assert!(stats.mean.iter().all(|m| m.abs() > 0.0));
}

#[test]
fn every_layer_passes_finite_differences_f32() {
    for layer in LAYERS {
        let stats = check_layer::<f32>(layer, 20, 1e-3, 1e-2, 100);
        assert!(stats.passes(), "{layer}: {stats:?}");
    }
}

#[test]
fn every_layer_passes_finite_differences_f64() {
    for layer in LAYERS {
        let stats = check_layer::<f64>(layer, 20, 1e-5, 1e-5, 200);
        assert!(stats.passes() && stats.failures == 0, "{layer}: {stats:?}");
    }
}

#[test]
fn adam_two_steps_match_hand_recurrence() {
    let (lr, b1, b2, eps) = (1e-3, 0.9, 0.999, 1e-8);
    let mut theta = 1.0f64;
    let (mut m, mut v) = (0.0f64, 0.0f64);
    for t in 1..=2 {
        let g = 1.0;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t));
        let v_hat = v / (1.0 - b2.powi(t));
        theta -= lr * m_hat / (v_hat.sqrt() + eps);
    }

    let mut params = vec![Parameter::new("theta", Tensor::scalar(1.0f64).requires_grad(true))];
    let mut adam = AdamState::new(&params, AdamConfig::default());
    for _ in 0..2 {
        params[0].tensor.set_grad(Some(vec![1.0])).unwrap();
        adam.step(&mut params).unwrap();
    }
    assert_eq!(adam.steps(), 2);
    assert!((params[0].tensor.data()[0] - theta).abs() < 1e-10);
    assert!((theta - (1.0 - 2.0 * 0.001 / (1.0 + 1e-8))).abs() < 1e-12);
}
