use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tel_core::tensor::{grad_check_many, Tape, Tensor};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Direct 7-deep loop over batch, output channel, output pixel, input
/// channel and kernel taps.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[b, cout, ho, wo]);
    for n in 0..b {
        for o in 0..cout {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for di in 0..kh {
                            for dj in 0..kw {
                                let (y, xx) = (
                                    (i * stride + di) as isize - pad as isize,
                                    (j * stride + dj) as isize - pad as isize,
                                );
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                let xv =
                                    x.data()[((n * cin + c) * h + y as usize) * wd + xx as usize];
                                acc += xv * w.data()[((o * cin + c) * kh + di) * kw + dj];
                            }
                        }
                    }
                    out.data_mut()[((n * cout + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv2d_matches_direct_loops(
        seed in any::<u64>(), b in 1usize..3, cin in 1usize..3, cout in 1usize..4,
        h in 3usize..8, w in 3usize..8, k in 1usize..4, stride in 1usize..3, pad in 0usize..2,
    ) {
        prop_assume!(h + 2 * pad >= k && w + 2 * pad >= k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[b, cin, h, w], &mut rng);
        let kern = random(&[cout, cin, k, k], &mut rng);
        let mut tape = Tape::new();
        let (xv, kv) = (tape.leaf(x.clone(), false), tape.leaf(kern.clone(), false));
        let y = tape.conv2d(xv, kv, stride, pad).unwrap();
        let expected = naive_conv(&x, &kern, stride, pad);
        prop_assert_eq!(tape.shape(y), expected.shape());
        for (a, e) in tape.value(y).data().iter().zip(expected.data()) {
            prop_assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let x = tape.leaf(random(&[2, 3], &mut rng), true);
    let w = tape.leaf(random(&[3, 4], &mut rng), true);
    let y = tape.matmul(x, w).unwrap();
    let z = tape.relu(y).unwrap();
    tape.backward_with(z, Tensor::zeros(&[2, 4])).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 0.0));
    assert!(tape.grad(w).unwrap().data().iter().all(|&g| g == 0.0));
}

#[test]
fn reused_variable_accumulates_gradient() {
    // f(x) = Σ x² + Σ x, so ∂f/∂x = 2x + 1.
    let x0: Tensor<f64> = Tensor::new(vec![4], vec![0.3, -1.2, 2.5, 0.0]).unwrap();
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone(), true);
    let sq = tape.mul(x, x).unwrap();
    let both = tape.add(sq, x).unwrap();
    let f = tape.sum_all(both).unwrap();
    tape.backward(f).unwrap();
    for (g, v) in tape.grad(x).unwrap().data().iter().zip(x0.data()) {
        assert!((g - (2.0 * v + 1.0)).abs() < 1e-12);
    }
}

#[test]
fn two_layer_network_passes_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let points = vec![
        random(&[5, 4], &mut rng),
        random(&[4, 6], &mut rng),
        random(&[6], &mut rng),
        random(&[6, 3], &mut rng),
        random(&[3], &mut rng),
    ];
    let labels = [0usize, 2, 1, 1, 0];
    let report = grad_check_many(
        |tape, v| {
            let h = tape.linear(v[0], v[1], v[2])?;
            let h = tape.relu(h)?;
            let logits = tape.linear(h, v[3], v[4])?;
            let lp = tape.log_softmax(logits)?;
            let picked = tape.pick(lp, &labels)?;
            let s = tape.sum_all(picked)?;
            tape.scale(s, -1.0)
        },
        &points,
        1e-5,
        1e-5,
    )
    .unwrap();
    assert!(report.passed, "worst {:?}", report.worst());
}

#[test]
fn conv_pool_stack_passes_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let points = vec![
        random(&[2, 2, 6, 6], &mut rng),
        random(&[3, 2, 3, 3], &mut rng),
    ];
    let report = grad_check_many(
        |tape, v| {
            let c = tape.conv2d(v[0], v[1], 1, 1)?;
            let p = tape.max_pool2d(c, 2)?;
            let g = tape.global_avg_pool(p)?;
            let n = tape.l2_normalize_rows(g)?;
            let sq = tape.mul(n, g)?;
            tape.sum_all(sq)
        },
        &points,
        1e-6,
        1e-5,
    )
    .unwrap();
    assert!(report.passed, "worst {:?}", report.worst());
}
