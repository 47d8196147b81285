use landmark_tensor::gradcheck::check_gradients;
use landmark_tensor::{Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Weighted sum so every output entry contributes a distinct gradient.
fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let w = random(tape.value(y).shape(), seed);
    let mask = Tensor::full(w.shape(), 1.0);
    tape.masked_mse(y, &w, &mask).unwrap()
}

#[test]
fn conv2d_strided_padded_with_bias() {
    let inputs = [random(&[2, 2, 5, 5], 1), random(&[3, 2, 3, 3], 2), random(&[3], 3)];
    let r = check_gradients(&inputs, 1e-6, |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
        Ok(probe(t, y, 4))
    })
    .unwrap();
    assert!(r.relative_error < TOL, "{r:?}");
}

#[test]
fn conv2d_pointwise() {
    let inputs = [random(&[4, 3, 2, 3], 5), random(&[2, 4, 1, 1], 6)];
    let r = check_gradients(&inputs, 1e-6, |t, v| {
        let y = t.conv2d(v[0], v[1], None, 1, 0)?;
        Ok(probe(t, y, 7))
    })
    .unwrap();
    assert!(r.relative_error < TOL, "{r:?}");
}

#[test]
fn batch_norm_train_and_eval() {
    let inputs = [random(&[3, 4, 2, 2], 8), random(&[3], 9), random(&[3], 10)];
    let r = check_gradients(&inputs, 1e-6, |t, v| {
        let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
        Ok(probe(t, y, 11))
    })
    .unwrap();
    assert!(r.relative_error < TOL, "{r:?}");
    let r = check_gradients(&inputs, 1e-6, |t, v| {
        let y = t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0], 1e-5)?;
        Ok(probe(t, y, 12))
    })
    .unwrap();
    assert!(r.relative_error < TOL, "{r:?}");
}

#[test]
fn linear_relu_pool_concat_resize_normalize() {
    let inputs = [random(&[2, 3, 3, 3], 13), random(&[1, 3, 3, 3], 14), random(&[4, 3], 15), random(&[4], 16)];
    let r = check_gradients(&inputs, 1e-6, |t, v| {
        let cat = t.concat_channels(&[v[0], v[1]])?;
        let up = t.resize_bilinear(cat, 5, 4)?;
        let n = t.l2_normalize_channels(up);
        let r = t.relu(n);
        let p = t.global_avg_pool(r)?;
        let y = t.linear(p, v[2], Some(v[3]))?;
        let s = t.scale(y, 0.7);
        Ok(probe(t, s, 17))
    })
    .unwrap();
    assert!(r.relative_error < TOL, "{r:?}");
}

#[test]
fn add_and_mean() {
    let inputs = [random(&[3, 2], 18), random(&[3, 2], 19)];
    let r = check_gradients(&inputs, 1e-6, |t, v| {
        let a = t.add(v[0], v[1])?;
        let sq = probe(t, a, 20);
        let m = t.mean(a);
        t.add(sq, m)
    })
    .unwrap();
    assert!(r.relative_error < TOL, "{r:?}");
}

#[test]
fn detach_blocks_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::full(&[2], 3.0), true);
    let d = tape.detach(x);
    let y = tape.add(x, d).unwrap();
    let m = tape.mean(y);
    let g = tape.backward(m).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.5, 0.5]);
    assert!(g.get(d).is_none());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// f32 and f64 evaluations of the same convolution agree.
    #[test]
    fn conv_is_scalar_generic(seed in 0u64..1000, stride in 1usize..3, pad in 0usize..2) {
        let x = random(&[2, 2, 6, 5], seed);
        let w = random(&[3, 2, 3, 3], seed + 1);
        let y64 = landmark_tensor::ops::conv2d_forward(&x, &w, None, stride, pad).unwrap();
        let y32 = landmark_tensor::ops::conv2d_forward(&x.cast::<f32>(), &w.cast::<f32>(), None, stride, pad).unwrap();
        prop_assert!(y64.max_abs_diff(&y32.cast::<f64>()) < 1e-5);
    }
}
