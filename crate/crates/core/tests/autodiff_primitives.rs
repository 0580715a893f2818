use hydroseg::autodiff::{
    analytic_gradient, gradient_check, max_relative_error, numeric_gradient, Real, Tape, Tensor, Var,
};
use hydroseg::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::c(rng.random_range(lo..hi)))
}

/// Projection weights bounded away from zero so no gradient coordinate is tiny.
fn weights<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.5..1.5);
        T::c(if rng.random_bool(0.5) { m } else { -m })
    })
}

/// Reduces `y` to a scalar via a fixed random projection.
fn project<T: Real>(tape: &mut Tape<T>, y: Var, w: &Tensor<T>) -> Result<Var> {
    let wv = tape.constant(w.clone());
    let p = tape.mul(y, wv)?;
    Ok(tape.sum(p))
}

struct Case {
    name: &'static str,
    shape: Vec<usize>,
    lo: f64,
    hi: f64,
}

/// Runs `op` through gradient_check at both precisions on 10 random inputs.
fn check<F32, F64>(case: Case, op32: F32, op64: F64)
where
    F32: Fn(&mut Tape<f32>, Var, &mut ChaCha8Rng) -> Result<Var> + Copy,
    F64: Fn(&mut Tape<f64>, Var, &mut ChaCha8Rng) -> Result<Var> + Copy,
{
    for trial in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let x64: Tensor<f64> = random(&mut rng, &case.shape, case.lo, case.hi);
        let seed = rng.random::<u64>();
        let f64fn = |t: &mut Tape<f64>, x: Var| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let y = op64(t, x, &mut r)?;
            let w: Tensor<f64> = weights(&mut r, t.value(y).shape());
            project(t, y, &w)
        };
        let err = gradient_check(f64fn, &x64, 1e-5).unwrap();
        assert!(err <= 1e-6, "{} (f64) trial {trial}: rel err {err:e}", case.name);

        // 32-bit: f32 tape gradient against f64 central differences at the same point
        let x32: Tensor<f32> = x64.cast();
        let f32fn = |t: &mut Tape<f32>, x: Var| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let y = op32(t, x, &mut r)?;
            let w: Tensor<f32> = weights(&mut r, t.value(y).shape());
            project(t, y, &w)
        };
        let (_, analytic) = analytic_gradient(&f32fn, &x32).unwrap();
        let numeric = numeric_gradient(&f64fn, &x32.cast::<f64>(), 1e-5).unwrap();
        let err = max_relative_error(&analytic.cast::<f64>(), &numeric);
        assert!(err <= 1e-3, "{} (f32) trial {trial}: rel err {err:e}", case.name);
    }
}

macro_rules! both {
    ($case:expr, |$t:ident, $x:ident, $r:ident| $body:expr) => {
        check(
            $case,
            |$t: &mut Tape<f32>, $x: Var, $r: &mut ChaCha8Rng| $body,
            |$t: &mut Tape<f64>, $x: Var, $r: &mut ChaCha8Rng| $body,
        )
    };
}

fn case(name: &'static str, shape: &[usize]) -> Case {
    Case {
        name,
        shape: shape.to_vec(),
        lo: -1.0,
        hi: 1.0,
    }
}

#[test]
fn gradcheck_add_sub_mul_div() {
    both!(case("add", &[3, 4]), |t, x, r| {
        let c = t.constant(random(r, &[3, 4], -1.0, 1.0));
        t.add(x, c)
    });
    both!(case("sub", &[3, 4]), |t, x, r| {
        let c = t.constant(random(r, &[3, 4], -1.0, 1.0));
        t.sub(c, x)
    });
    both!(case("mul", &[3, 4]), |t, x, r| {
        let c = t.constant(random(r, &[3, 4], -1.0, 1.0));
        let y = t.mul(x, c)?;
        t.mul(y, x)
    });
    both!(
        Case {
            lo: 0.5,
            hi: 2.0,
            ..case("div", &[5])
        },
        |t, x, r| {
            let c = t.constant(random(r, &[5], 0.5, 2.0));
            let a = t.div(c, x)?;
            t.div(a, c)
        }
    );
}

#[test]
fn gradcheck_scalar_ops() {
    both!(case("scale", &[6]), |t, x, _r| {
        let y = t.scale(x, Real::c(-2.5));
        Ok(t.add_scalar(y, Real::c(0.75)))
    });
}

#[test]
fn gradcheck_matmul() {
    both!(case("matmul shared", &[2, 3, 4]), |t, x, r| {
        let w = t.constant(random(r, &[4, 5], -1.0, 1.0));
        t.matmul(x, w)
    });
    both!(case("matmul batched lhs", &[2, 3, 4]), |t, x, r| {
        let w = t.constant(random(r, &[2, 4, 2], -1.0, 1.0));
        t.matmul(x, w)
    });
    both!(case("matmul batched rhs", &[2, 4, 2]), |t, x, r| {
        let a = t.constant(random(r, &[2, 3, 4], -1.0, 1.0));
        t.matmul(a, x)
    });
}

#[test]
fn gradcheck_bias_and_layer_norm() {
    both!(case("add_bias", &[4]), |t, x, r| {
        let a = t.constant(random(r, &[3, 4], -1.0, 1.0));
        t.add_bias(a, x)
    });
    both!(case("layer_norm x", &[3, 6]), |t, x, r| {
        let g = t.constant(random(r, &[6], 0.5, 1.5));
        let b = t.constant(random(r, &[6], -0.5, 0.5));
        t.layer_norm(x, g, b)
    });
    both!(case("layer_norm gamma", &[6]), |t, x, r| {
        let a = t.constant(random(r, &[3, 6], -1.0, 1.0));
        let b = t.constant(random(r, &[6], -0.5, 0.5));
        t.layer_norm(a, x, b)
    });
}

#[test]
fn gradcheck_conv() {
    both!(case("conv2d input", &[2, 2, 5, 5]), |t, x, r| {
        let w = t.constant(random(r, &[3, 2, 3, 3], -1.0, 1.0));
        let b = t.constant(random(r, &[3], -1.0, 1.0));
        t.conv2d(x, w, Some(b), 2, 1)
    });
    both!(case("conv2d weight", &[3, 2, 3, 3]), |t, x, r| {
        let a = t.constant(random(r, &[2, 2, 5, 5], -1.0, 1.0));
        t.conv2d(a, x, None, 1, 0)
    });
    both!(case("depthwise input", &[1, 3, 4, 5]), |t, x, r| {
        let w = t.constant(random(r, &[3, 1, 3, 3], -1.0, 1.0));
        let b = t.constant(random(r, &[3], -1.0, 1.0));
        t.depthwise_conv3(x, w, b)
    });
    both!(case("depthwise weight", &[3, 1, 3, 3]), |t, x, r| {
        let a = t.constant(random(r, &[2, 3, 4, 4], -1.0, 1.0));
        let b = t.constant(random(r, &[3], -1.0, 1.0));
        t.depthwise_conv3(a, x, b)
    });
}

#[test]
fn gradcheck_activations() {
    both!(case("softmax", &[3, 5]), |t, x, _r| t.softmax(x));
    both!(case("gelu", &[10]), |t, x, _r| Ok(t.gelu(x)));
    both!(case("sigmoid", &[10]), |t, x, _r| Ok(t.sigmoid(x)));
    both!(
        Case {
            lo: 0.2,
            hi: 3.0,
            ..case("log", &[10])
        },
        |t, x, _r| t.log(x)
    );
}

#[test]
fn gradcheck_relu_and_clamp_away_from_kinks() {
    // inputs kept at least 0.05 from every kink
    for trial in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(77 + trial);
        let x: Tensor<f64> = Tensor::from_fn(&[12], |_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        });
        let w: Tensor<f64> = weights(&mut rng, &[12]);
        let relu = |t: &mut Tape<f64>, v: Var| {
            let y = t.relu(v);
            project(t, y, &w)
        };
        assert!(gradient_check(relu, &x, 1e-5).unwrap() <= 1e-6);
        let clamp = |t: &mut Tape<f64>, v: Var| {
            let y = t.clamp(v, -0.5, 0.5);
            project(t, y, &w)
        };
        // push coordinates near the clamp bounds further inside
        let x_off: Tensor<f64> = Tensor::from_fn(&[12], |i| {
            let v = x.data()[i];
            if (v.abs() - 0.5).abs() < 0.05 {
                v * 0.5
            } else {
                v
            }
        });
        assert!(gradient_check(clamp, &x_off, 1e-5).unwrap() <= 1e-6);

        let x32: Tensor<f32> = x.cast();
        let w32: Tensor<f32> = w.cast();
        let relu32 = |t: &mut Tape<f32>, v: Var| {
            let y = t.relu(v);
            project(t, y, &w32)
        };
        let (_, analytic) = analytic_gradient(&relu32, &x32).unwrap();
        let numeric = numeric_gradient(&relu, &x32.cast::<f64>(), 1e-5).unwrap();
        assert!(max_relative_error(&analytic.cast::<f64>(), &numeric) <= 1e-3);
    }
}

#[test]
fn gradcheck_shape_ops() {
    both!(case("resize up", &[1, 2, 3, 4]), |t, x, _r| t.resize_bilinear(x, 7, 5));
    both!(case("resize down", &[1, 1, 8, 6]), |t, x, _r| t.resize_bilinear(x, 3, 4));
    both!(case("reshape", &[2, 6]), |t, x, _r| t.reshape(x, &[3, 4]));
    both!(case("permute", &[2, 3, 4]), |t, x, _r| t.permute(x, &[1, 2, 0]));
    both!(case("concat", &[2, 3, 2]), |t, x, r| {
        let c = t.constant(random(r, &[2, 1, 2], -1.0, 1.0));
        t.concat(&[c, x, x], 1)
    });
    both!(case("avg_pool", &[1, 2, 5, 4]), |t, x, _r| t.avg_pool(x, 2));
    both!(case("sum", &[7]), |t, x, _r| {
        let s = t.sum(x);
        t.reshape(s, &[1])
    });
    both!(case("mean", &[7]), |t, x, _r| {
        let s = t.mean(x);
        t.reshape(s, &[1])
    });
}

#[test]
fn backward_sum_gives_ones() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::new(vec![3], vec![0.3, -1.0, 2.0]).unwrap());
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(&tape, x).data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_sum_of_squares() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(&tape, x).data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::zeros(&[2]));
    assert!(tape.backward(x).is_err());
}

#[test]
fn unused_parameter_gets_zero_gradient() {
    let mut tape = Tape::<f32>::new();
    let x = tape.param(Tensor::full(&[2], 1.0));
    let unused = tape.param(Tensor::full(&[4], 1.0));
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert!(g.get(unused).is_none());
    assert_eq!(g.wrt(&tape, unused).data(), &[0.0; 4]);
}

#[test]
fn gradcheck_of_sum_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Tensor<f64> = random(&mut rng, &[9], -3.0, 3.0);
    let err = gradient_check(|t: &mut Tape<f64>, v| Ok(t.sum(v)), &x, 1e-5).unwrap();
    assert!(err < 1e-9);
}

#[test]
fn gradcheck_mean_sigmoid_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x: Tensor<f64> = random(&mut rng, &[32], -4.0, 4.0);
    let f = |t: &mut Tape<f64>, v: Var| {
        let s = t.sigmoid(v);
        Ok(t.mean(s))
    };
    assert!(gradient_check(f, &x, 1e-5).unwrap() <= 1e-6);
}

/// Plain six-nested-loop convolution used as the reference.
#[allow(clippy::too_many_arguments)]
fn naive_conv(
    x: &[f64],
    (n, ci, h, w): (usize, usize, usize, usize),
    k: &[f64],
    (co, kh, kw): (usize, usize, usize),
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * co * ho * wo];
    for b in 0..n {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias[o];
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += k[((o * ci + c) * kh + ky) * kw + kx]
                                        * x[((b * ci + c) * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    out[((b * co + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_naive_loops_exactly_for_integer_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let n = rng.random_range(1..3);
        let ci = rng.random_range(1..4);
        let co = rng.random_range(1..4);
        let k = rng.random_range(1..5);
        let stride = rng.random_range(1..4);
        let pad = rng.random_range(0..3);
        let h = rng.random_range(k..k + 6);
        let w = rng.random_range(k..k + 6);
        // small integers keep every partial sum exact, so any summation order agrees
        let x: Vec<f64> = (0..n * ci * h * w).map(|_| rng.random_range(-4..5) as f64).collect();
        let kern: Vec<f64> = (0..co * ci * k * k).map(|_| rng.random_range(-4..5) as f64).collect();
        let bias: Vec<f64> = (0..co).map(|_| rng.random_range(-4..5) as f64).collect();
        let want = naive_conv(&x, (n, ci, h, w), &kern, (co, k, k), &bias, stride, pad);

        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(Tensor::new(vec![n, ci, h, w], x).unwrap());
        let kv = tape.constant(Tensor::new(vec![co, ci, k, k], kern).unwrap());
        let bv = tape.constant(Tensor::new(vec![co], bias).unwrap());
        let y = tape.conv2d(xv, kv, Some(bv), stride, pad).unwrap();
        assert_eq!(tape.value(y).data(), &want[..]);
    }
}

#[test]
fn conv2d_matches_naive_loops_on_random_reals() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (n, ci, h, w, co, k) = (2, 3, 9, 7, 4, 3);
    let x: Vec<f64> = (0..n * ci * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    let kern: Vec<f64> = (0..co * ci * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let bias = vec![0.25; co];
    let want = naive_conv(&x, (n, ci, h, w), &kern, (co, k, k), &bias, 2, 1);
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(Tensor::new(vec![n, ci, h, w], x).unwrap());
    let kv = tape.constant(Tensor::new(vec![co, ci, k, k], kern).unwrap());
    let bv = tape.constant(Tensor::new(vec![co], bias).unwrap());
    let y = tape.conv2d(xv, kv, Some(bv), 2, 1).unwrap();
    for (a, b) in tape.value(y).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn resize_constant_stays_constant_and_same_size_is_identity() {
    let mut tape = Tape::<f64>::new();
    let c = tape.constant(Tensor::full(&[1, 2, 5, 3], 0.7));
    let up = tape.resize_bilinear(c, 13, 8).unwrap();
    assert!(tape.value(up).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x: Tensor<f64> = random(&mut rng, &[2, 3, 6, 4], -1.0, 1.0);
    let xv = tape.constant(x.clone());
    let same = tape.resize_bilinear(xv, 6, 4).unwrap();
    assert_eq!(tape.value(same), &x);
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(random(&mut rng, &[2, 3, 8, 8], -1.0, 1.0));
        let w = tape.constant(random(&mut rng, &[4, 3, 3, 3], -1.0, 1.0));
        let y = tape.conv2d(x, w, None, 1, 1).unwrap();
        let y = tape.gelu(y);
        let y = tape.avg_pool(y, 2).unwrap();
        tape.value(y).clone()
    };
    assert_eq!(run(), run());
}
