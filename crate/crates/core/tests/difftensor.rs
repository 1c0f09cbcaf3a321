use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specden_core::tensor::gradcheck::check_gradients;
use specden_core::tensor::{BatchNormMode, ConvSpec, Graph, Padding, Tensor4};

const H: f64 = 1e-5;
const SEEDS: u64 = 20;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values with magnitude in [0.1, 1] so kinks (ReLU, max) stay out of reach of `H`.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn assert_grad_ok(name: &str, seed: u64, err: f64, tol: f64) {
    assert!(err < tol, "{name} seed {seed}: max rel err {err:e} >= {tol:e}");
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dilation = 1 + (seed % 2) as usize;
        let spec = ConvSpec::same3x3(2, 3, dilation);
        let x = rand_tensor(&mut rng, [1, 2, 6, 6]);
        let w = rand_tensor(&mut rng, [3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, [1, 3, 1, 1]);
        let probe = rand_tensor(&mut rng, [1, 3, 6, 6]);
        let r = check_gradients(&[x, w, b], H, |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), &spec)?;
            g.weighted_sum(y, probe.clone())
        })
        .unwrap();
        assert_grad_ok("conv2d", seed, r.max_rel_err, 1e-4);
    }
}

#[test]
fn strided_valid_conv_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let spec = ConvSpec {
            kernel: (3, 3),
            stride: (2, 2),
            padding: Padding::Valid,
            ..ConvSpec::same3x3(3, 2, 1)
        };
        let x = rand_tensor(&mut rng, [2, 3, 7, 7]);
        let w = rand_tensor(&mut rng, [2, 3, 3, 3]);
        let probe = rand_tensor(&mut rng, [2, 2, 3, 3]);
        let r = check_gradients(&[x, w], H, |g, v| {
            let y = g.conv2d(v[0], v[1], None, &spec)?;
            g.weighted_sum(y, probe.clone())
        })
        .unwrap();
        assert_grad_ok("strided conv2d", seed, r.max_rel_err, 1e-4);
    }
}

#[test]
fn separable_conv_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let dilation = 1 + (seed % 3) as usize;
        let spec = ConvSpec::same3x3(3, 2, dilation).separable();
        let x = rand_tensor(&mut rng, [2, 3, 8, 8]);
        let dw = rand_tensor(&mut rng, [3, 1, 3, 3]);
        let dwb = rand_tensor(&mut rng, [1, 3, 1, 1]);
        let pw = rand_tensor(&mut rng, [2, 3, 1, 1]);
        let pwb = rand_tensor(&mut rng, [1, 2, 1, 1]);
        let probe = rand_tensor(&mut rng, [2, 2, 8, 8]);
        let r = check_gradients(&[x, dw, dwb, pw, pwb], H, |g, v| {
            let y = g.separable_conv2d(v[0], v[1], Some(v[2]), v[3], Some(v[4]), &spec)?;
            g.weighted_sum(y, probe.clone())
        })
        .unwrap();
        assert_grad_ok("separable", seed, r.max_rel_err, 1e-4);
    }
}

#[test]
fn transposed_conv_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let x = rand_tensor(&mut rng, [2, 3, 4, 4]);
        let w = rand_tensor(&mut rng, [3, 2, 2, 2]);
        let b = rand_tensor(&mut rng, [1, 2, 1, 1]);
        let probe = rand_tensor(&mut rng, [2, 2, 8, 8]);
        let r = check_gradients(&[x, w, b], H, |g, v| {
            let y = g.conv_transpose2x2(v[0], v[1], Some(v[2]))?;
            g.weighted_sum(y, probe.clone())
        })
        .unwrap();
        assert_grad_ok("conv_transpose2x2", seed, r.max_rel_err, 1e-4);
    }
}

#[test]
fn max_pool_gradient_matches_argmax_oracle() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let xv = rand_tensor(&mut rng, [1, 2, 4, 4]);
        let probe = rand_tensor(&mut rng, [1, 2, 2, 2]);
        let mut g = Graph::new();
        let x = g.param(xv.clone());
        let y = g.max_pool2(x).unwrap();
        let loss = g.weighted_sum(y, probe.clone()).unwrap();
        let grads = g.backward(loss).unwrap();

        // brute-force: route each window's upstream weight to its largest entry
        let mut expect = Tensor4::<f64>::zeros([1, 2, 4, 4]);
        for c in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    let mut best = (2 * i, 2 * j);
                    for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let (r, s) = (2 * i + di, 2 * j + dj);
                        if xv.at([0, c, r, s]) > xv.at([0, c, best.0, best.1]) {
                            best = (r, s);
                        }
                    }
                    expect.set([0, c, best.0, best.1], probe.at([0, c, i, j]));
                }
            }
        }
        assert_eq!(grads.get(x).unwrap(), &expect, "seed {seed}");
    }
}

#[test]
fn batch_norm_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let x = rand_tensor(&mut rng, [2, 3, 4, 4]);
        let gamma = rand_tensor(&mut rng, [1, 3, 1, 1]);
        let beta = rand_tensor(&mut rng, [1, 3, 1, 1]);
        let probe = rand_tensor(&mut rng, [2, 3, 4, 4]);
        let r = check_gradients(&[x.clone(), gamma.clone(), beta.clone()], H, |g, v| {
            let (y, _) = g.batch_norm(v[0], v[1], v[2], BatchNormMode::Train { eps: 1e-5 })?;
            g.weighted_sum(y, probe.clone())
        })
        .unwrap();
        assert_grad_ok("batch_norm train", seed, r.max_rel_err, 1e-3);

        let mean = [0.1, -0.2, 0.3];
        let var = [0.5, 1.5, 2.0];
        let r = check_gradients(&[x, gamma, beta], H, |g, v| {
            let mode = BatchNormMode::Eval {
                mean: &mean,
                var: &var,
                eps: 1e-5,
            };
            let (y, _) = g.batch_norm(v[0], v[1], v[2], mode)?;
            g.weighted_sum(y, probe.clone())
        })
        .unwrap();
        assert_grad_ok("batch_norm eval", seed, r.max_rel_err, 1e-4);
    }
}

#[test]
fn batch_norm_eval_with_unit_stats_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let xv = rand_tensor(&mut rng, [1, 2, 4, 4]);
    let mut g = Graph::new();
    let x = g.input(xv.clone());
    let gamma = g.input(Tensor4::full([1, 2, 1, 1], 1.0));
    let beta = g.input(Tensor4::zeros([1, 2, 1, 1]));
    let mode = BatchNormMode::Eval {
        mean: &[0.0, 0.0],
        var: &[1.0, 1.0],
        eps: 1e-5,
    };
    let (y, _) = g.batch_norm(x, gamma, beta, mode).unwrap();
    for (a, b) in g.value(y).data().iter().zip(xv.data()) {
        assert!((a - b).abs() < 1e-5 * b.abs().max(1.0));
    }
}

#[test]
fn prelu_gradients_including_slope() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let x = rand_away_from_zero(&mut rng, [2, 3, 4, 4]);
        let a = rand_tensor(&mut rng, [1, 3, 1, 1]);
        let probe = rand_tensor(&mut rng, [2, 3, 4, 4]);
        let r = check_gradients(&[x, a], H, |g, v| {
            let y = g.prelu(v[0], v[1])?;
            g.weighted_sum(y, probe.clone())
        })
        .unwrap();
        assert_grad_ok("prelu", seed, r.max_rel_err, 1e-4);
    }
}

#[test]
fn variational_and_loss_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let mu = rand_tensor(&mut rng, [2, 3, 2, 2]);
        let lv = rand_tensor(&mut rng, [2, 3, 2, 2]);
        let noise = rand_tensor(&mut rng, [2, 3, 2, 2]);
        let target = rand_tensor(&mut rng, [2, 3, 2, 2]);
        let r = check_gradients(&[mu, lv], H, |g, v| {
            let z = g.reparameterize_with_noise(v[0], v[1], noise.clone())?;
            let t = g.input(target.clone());
            let rec = g.mse(z, t)?;
            let kl = g.kl_standard_normal(v[0], v[1])?;
            g.add_scaled(rec, kl, 0.3)
        })
        .unwrap();
        assert_grad_ok("reparameterize+mse+kl", seed, r.max_rel_err, 1e-4);
    }
}

#[test]
fn concat_slice_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
        let a = rand_tensor(&mut rng, [2, 2, 4, 4]);
        let b = rand_tensor(&mut rng, [2, 1, 4, 4]);
        let probe = rand_tensor(&mut rng, [2, 2, 4, 4]);
        let r = check_gradients(&[a, b], H, |g, v| {
            let c = g.concat_channels(v[0], v[1])?;
            let s = g.slice_channels(c, 1, 2)?;
            g.weighted_sum(s, probe.clone())
        })
        .unwrap();
        assert_grad_ok("concat/slice", seed, r.max_rel_err, 1e-4);
    }
}

/// Reference: convolution with the dilated kernel spelled out as a zero-inflated dense kernel.
fn inflate(w: &Tensor4<f64>, d: usize) -> Tensor4<f64> {
    let [o, i, kh, kw] = w.shape();
    let (eh, ew) = (kh + (kh - 1) * (d - 1), kw + (kw - 1) * (d - 1));
    let mut out = Tensor4::zeros([o, i, eh, ew]);
    for a in 0..o {
        for b in 0..i {
            for r in 0..kh {
                for s in 0..kw {
                    out.set([a, b, r * d, s * d], w.at([a, b, r, s]));
                }
            }
        }
    }
    out
}

#[test]
fn dilated_conv_equals_zero_inflated_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in 1..=2 {
        for cin in 1..=3 {
            for size in [5usize, 8] {
                for d in 1..=2 {
                    let xv = rand_tensor(&mut rng, [n, cin, size, size]);
                    let wv = rand_tensor(&mut rng, [2, cin, 3, 3]);
                    let mut g = Graph::new();
                    let x = g.input(xv);
                    let w = g.input(wv.clone());
                    let wi = g.input(inflate(&wv, d));
                    let y = g.conv2d(x, w, None, &ConvSpec::same3x3(cin, 2, d)).unwrap();
                    let ek = 2 * d + 1;
                    let dense = ConvSpec {
                        kernel: (ek, ek),
                        ..ConvSpec::same3x3(cin, 2, 1)
                    };
                    let y2 = g.conv2d(x, wi, None, &dense).unwrap();
                    for (a, b) in g.value(y).data().iter().zip(g.value(y2).data()) {
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn separable_equals_its_two_stages() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let spec = ConvSpec::same3x3(3, 4, 2).separable();
    let mut g = Graph::new();
    let x = g.input(rand_tensor(&mut rng, [2, 3, 8, 8]));
    let dw = g.input(rand_tensor(&mut rng, [3, 1, 3, 3]));
    let dwb = g.input(rand_tensor(&mut rng, [1, 3, 1, 1]));
    let pw = g.input(rand_tensor(&mut rng, [4, 3, 1, 1]));
    let pwb = g.input(rand_tensor(&mut rng, [1, 4, 1, 1]));
    let y = g.separable_conv2d(x, dw, Some(dwb), pw, Some(pwb), &spec).unwrap();
    let mid = g.depthwise_conv2d(x, dw, Some(dwb), (2, 2)).unwrap();
    let y2 = g.conv2d(mid, pw, Some(pwb), &ConvSpec::pointwise(3, 4)).unwrap();
    for (a, b) in g.value(y).data().iter().zip(g.value(y2).data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn identity_depthwise_and_pointwise_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let xv = rand_tensor(&mut rng, [1, 3, 6, 6]);
    let mut g = Graph::new();
    let x = g.input(xv.clone());
    let dw = g.input(Tensor4::from_fn(
        [3, 1, 3, 3],
        |[_, _, i, j]| {
            if (i, j) == (1, 1) {
                1.0
            } else {
                0.0
            }
        },
    ));
    let pw = g.input(Tensor4::from_fn(
        [3, 3, 1, 1],
        |[o, i, _, _]| {
            if o == i {
                1.0
            } else {
                0.0
            }
        },
    ));
    let y = g
        .separable_conv2d(x, dw, None, pw, None, &ConvSpec::same3x3(3, 3, 1).separable())
        .unwrap();
    assert_eq!(g.value(y), &xv);
}

#[test]
fn transposed_conv_is_adjoint_of_strided_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..10 {
        let w = rand_tensor(&mut rng, [3, 2, 2, 2]);
        let small = rand_tensor(&mut rng, [2, 3, 4, 4]);
        let big = rand_tensor(&mut rng, [2, 2, 8, 8]);
        let down = ConvSpec {
            in_channels: 2,
            out_channels: 3,
            kernel: (2, 2),
            dilation: (1, 1),
            stride: (2, 2),
            padding: Padding::Valid,
            depthwise_separable: false,
        };
        let mut g = Graph::new();
        let wv = g.input(w);
        let s = g.input(small.clone());
        let bg = g.input(big.clone());
        let conv = g.conv2d(bg, wv, None, &down).unwrap();
        let up = g.conv_transpose2x2(s, wv, None).unwrap();
        let lhs: f64 = g.value(conv).data().iter().zip(small.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = big.data().iter().zip(g.value(up).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }
}

#[test]
fn reparameterize_gradient_matches_affine_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mu = rand_tensor(&mut rng, [1, 2, 3, 3]);
    let lv = rand_tensor(&mut rng, [1, 2, 3, 3]);
    let noise = rand_tensor(&mut rng, [1, 2, 3, 3]);
    let probe = rand_tensor(&mut rng, [1, 2, 3, 3]);
    let mut g = Graph::new();
    let m = g.param(mu.clone());
    let l = g.param(lv.clone());
    let z = g.reparameterize_with_noise(m, l, noise.clone()).unwrap();
    for i in 0..mu.numel() {
        let expect = mu.data()[i] + (0.5 * lv.data()[i]).exp() * noise.data()[i];
        assert!((g.value(z).data()[i] - expect).abs() < 1e-12);
    }
    let loss = g.weighted_sum(z, probe.clone()).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(m).unwrap(), &probe);
    for i in 0..mu.numel() {
        let expect = probe.data()[i] * noise.data()[i] * 0.5 * (0.5 * lv.data()[i]).exp();
        assert!((grads.get(l).unwrap().data()[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn reparameterize_monte_carlo_moments() {
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut g = Graph::new();
    let mu = g.input(Tensor4::zeros([1, 1, 1, n]));
    let lv = g.input(Tensor4::zeros([1, 1, 1, n]));
    let z = g.reparameterize(mu, lv, &mut rng).unwrap();
    let d = g.value(z).data();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    assert!(mean.abs() < 0.02, "mean {mean}");
    assert!((0.97..=1.03).contains(&var), "var {var}");

    let mut rng2 = ChaCha8Rng::seed_from_u64(16);
    let z2 = g.reparameterize(mu, lv, &mut rng2).unwrap();
    assert_eq!(g.value(z), g.value(z2));
}

#[test]
fn mse_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let a = rand_tensor(&mut rng, [2, 3, 5, 5]);
    let b = rand_tensor(&mut rng, [2, 3, 5, 5]);
    let mut direct = 0.0;
    for i in 0..a.numel() {
        direct += (a.data()[i] - b.data()[i]) * (a.data()[i] - b.data()[i]);
    }
    direct /= a.numel() as f64;
    let mut g = Graph::new();
    let (x, y) = (g.input(a), g.input(b));
    let l = g.mse(x, y).unwrap();
    assert!((g.value(l).item_value() - direct).abs() < 1e-12);
}

#[test]
fn shape_errors_are_reported() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor4::zeros([1, 2, 4, 4]));
    let w = g.input(Tensor4::zeros([3, 1, 3, 3]));
    assert!(g.conv2d(x, w, None, &ConvSpec::same3x3(2, 3, 1)).is_err());
    let p = g.input(Tensor4::zeros([1, 2, 4, 4]));
    let t = g.input(Tensor4::zeros([1, 2, 4, 2]));
    assert!(g.mse(p, t).is_err());
    let odd = g.input(Tensor4::zeros([1, 1, 5, 4]));
    assert!(g.max_pool2(odd).is_err());
}
