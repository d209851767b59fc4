use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rrelu::gradcheck::{central_diff, check_op, rel_err, Tolerance, OPS};
use rrelu::kernels::{batchnorm_forward, conv2d_forward, BnMode};
use rrelu::{Graph, Tensor};

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Six nested loops, accumulating in the same (c_in, ky, kx) order.
fn naive_conv(x: &Tensor, f: &Tensor, stride: usize, pad: usize) -> Vec<f32> {
    let (n, ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (f.shape()[0], f.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0f32; n * co * oh * ow];
    for s in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0f32;
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x.data()[((s * ci + c) * h + iy as usize) * w + ix as usize]
                                    * f.data()[((o * ci + c) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((s * co + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn conv_matches_naive_loops(
        n in 1usize..3, ci in 1usize..4, co in 1usize..4,
        h in 3usize..9, w in 3usize..9,
        k in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..3, pad in 0usize..2,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rand = |len| (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect::<Vec<_>>();
        let x = Tensor::new(vec![n, ci, h, w], rand(n * ci * h * w)).unwrap();
        let f = Tensor::new(vec![co, ci, k, k], rand(co * ci * k * k)).unwrap();
        let (out, _, _) = conv2d_forward(&x, &f, stride, pad, false).unwrap();
        prop_assert_eq!(out.data(), &naive_conv(&x, &f, stride, pad)[..]);
    }
}

#[test]
fn gradient_suite_small() {
    for op in OPS {
        let a = check_op::<f32>(op, 20, Tolerance::for_f32(), 3).unwrap();
        let b = check_op::<f64>(op, 20, Tolerance::for_f64(), 3).unwrap();
        assert!(a.max_rel_err < 1e-3, "{op} f32 {}", a.max_rel_err);
        assert!(b.max_rel_err < 1e-6, "{op} f64 {}", b.max_rel_err);
    }
}

/// linear → relu → linear (+bias) → cross-entropy, all leaves checked.
#[test]
fn composed_two_layer_network_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut checked = 0;
    while checked < 10 {
        let x = normal(&[4, 5], &mut rng);
        let w1 = normal(&[5, 6], &mut rng);
        let w2 = normal(&[6, 3], &mut rng);
        let b2 = normal(&[3], &mut rng);
        let labels = [0usize, 2, 1, 2];
        let loss_of = |ins: &[Tensor<f64>], g: &mut Graph<f64>, grad: bool| {
            let v: Vec<_> = ins.iter().map(|t| g.leaf(t.clone(), grad)).collect();
            let z = g.matmul(v[0], v[1]).unwrap();
            let pre = g.value(z).clone();
            let a = g.relu(z);
            let o = g.linear(a, v[2], Some(v[3])).unwrap();
            (v, g.softmax_cross_entropy(o, &labels).unwrap(), pre)
        };
        let inputs = vec![x, w1, w2, b2];
        let mut g = Graph::new();
        let (vars, loss, pre) = loss_of(&inputs, &mut g, true);
        if pre.data().iter().any(|v| v.abs() < 0.2) {
            continue;
        }
        g.backward(loss).unwrap();
        let mut worst = 0f64;
        for (i, &v) in vars.iter().enumerate() {
            let analytic = g.grad_or_zeros(v);
            for j in 0..inputs[i].numel() {
                let mut xs = inputs.clone();
                let numeric = central_diff(inputs[i].data()[j], 1e-2, |val| {
                    xs[i].data_mut()[j] = val;
                    let mut g = Graph::new();
                    let (_, l, _) = loss_of(&xs, &mut g, false);
                    Ok(g.value(l).data()[0])
                })
                .unwrap();
                worst = worst.max(rel_err(analytic.data()[j], numeric, Tolerance::for_f64().floor));
            }
        }
        assert!(worst < 1e-7, "worst {worst}");
        checked += 1;
    }
}

#[test]
fn batchnorm_standardizes_large_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (n, c, h, w) = (16, 2, 16, 16);
    let x = normal(&[n, c, h, w], &mut rng).map(|v| 3.0 * v + 1.5).cast::<f32>();
    let fwd = batchnorm_forward(&x, &[1.0; 2], &[0.0; 2], BnMode::Train { eps: 1e-5 }).unwrap();
    let inner = h * w;
    for ch in 0..c {
        let vals: Vec<f64> = (0..n)
            .flat_map(|s| fwd.out.data()[(s * c + ch) * inner..(s * c + ch + 1) * inner].to_vec())
            .map(f64::from)
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-2 && (v - 1.0).abs() < 1e-2, "mean {m} var {v}");
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x = normal(&[3, 2, 6, 6], &mut rng).cast::<f32>();
        let f = normal(&[4, 2, 3, 3], &mut rng).cast::<f32>();
        let mut g = Graph::new();
        let xv = g.param(x);
        let fv = g.param(f);
        let y = g.conv2d(xv, fv, 1, 1).unwrap();
        let p = g.global_avg_pool(y).unwrap();
        let l = g.softmax_cross_entropy(p, &[0, 1, 3]).unwrap();
        g.backward(l).unwrap();
        (g.value(l).clone(), g.grad_or_zeros(fv))
    };
    assert_eq!(run(), run());
}
