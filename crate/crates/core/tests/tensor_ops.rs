use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sinuscl::tensor::gradcheck::check_gradients;
use sinuscl::tensor::{conv3d_output_extent, Graph, Tensor, TensorError};

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn t32(shape: &[usize], data: &[f32]) -> Tensor<f32> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

/// Direct six-nested-loop cross-correlation.
fn conv3d_oracle(
    input: &Tensor<f64>,
    kernel: &Tensor<f64>,
    stride: usize,
    padding: usize,
) -> (Vec<usize>, Vec<f64>) {
    let [b, cin, d, h, w] = input.shape().try_into().unwrap();
    let [cout, _, kd, kh, kw] = kernel.shape().try_into().unwrap();
    let (od, oh, ow) = (
        conv3d_output_extent(d, kd, stride, padding),
        conv3d_output_extent(h, kh, stride, padding),
        conv3d_output_extent(w, kw, stride, padding),
    );
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0; b * cout * od * oh * ow];
    for n in 0..b {
        for o in 0..cout {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..cin {
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for e in 0..kw {
                                        let iz = (z * stride + a) as isize - padding as isize;
                                        let iy = (y * stride + bb) as isize - padding as isize;
                                        let ix = (xx * stride + e) as isize - padding as isize;
                                        if iz < 0 || iy < 0 || ix < 0 {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                        if iz >= d || iy >= h || ix >= w {
                                            continue;
                                        }
                                        acc += x[(((n * cin + c) * d + iz) * h + iy) * w + ix]
                                            * k[(((o * cin + c) * kd + a) * kh + bb) * kw + e];
                                    }
                                }
                            }
                        }
                        out[(((n * cout + o) * od + z) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
    }
    (vec![b, cout, od, oh, ow], out)
}

#[test]
fn elementwise_add_hand_case() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(t32(&[2], &[1.0, 2.0]));
    let b = g.constant(t32(&[2], &[3.0, 4.0]));
    let c = g.add(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[4.0, 6.0]);
}

#[test]
fn multiply_by_one_is_identity_with_unit_gradient() {
    let mut g = Graph::<f32>::new();
    let x = g.param(t32(&[3], &[0.5, -2.0, 7.0]));
    let one = g.constant(Tensor::ones([3]));
    let y = g.mul(x, one).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());
    let loss = g.sum(y);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn broadcast_matches_explicit_tiling_bitwise() {
    let a = random(&[2, 3], 1).cast::<f32>();
    let b = random(&[3], 2).cast::<f32>();
    let mut tiled = Vec::new();
    for _ in 0..2 {
        tiled.extend_from_slice(b.data());
    }
    let tiled = t32(&[2, 3], &tiled);
    let mut g = Graph::<f32>::new();
    let (va, vb, vt) = (g.constant(a.clone()), g.constant(b), g.constant(tiled));
    for (op, name) in [(0, "add"), (1, "sub"), (2, "mul"), (3, "div")] {
        let (x, y) = match op {
            0 => (g.add(va, vb).unwrap(), g.add(va, vt).unwrap()),
            1 => (g.sub(va, vb).unwrap(), g.sub(va, vt).unwrap()),
            2 => (g.mul(va, vb).unwrap(), g.mul(va, vt).unwrap()),
            _ => (g.div(va, vb).unwrap(), g.div(va, vt).unwrap()),
        };
        let (xv, yv) = (g.value(x).data(), g.value(y).data());
        assert!(xv.iter().zip(yv).all(|(p, q)| p.to_bits() == q.to_bits()), "{name}");
        // loop oracle
        for i in 0..2 {
            for j in 0..3 {
                let av = a.data()[i * 3 + j];
                let bv = g.value(vb).data()[j];
                let want = match op {
                    0 => av + bv,
                    1 => av - bv,
                    2 => av * bv,
                    _ => av / bv,
                };
                assert_eq!(xv[i * 3 + j], want);
            }
        }
    }
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([2]));
    let err = g.mul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[2]"), "{msg}");
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(t32(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let i = g.constant(t32(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let c = g.matmul(a, i).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    let c = g.matmul(i, a).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let a = random(&[4, 5], 3);
    let b = random(&[5, 3], 4);
    let mut want = vec![0.0; 12];
    for i in 0..4 {
        for j in 0..3 {
            for k in 0..5 {
                want[i * 3 + j] += a.data()[i * 5 + k] * b.data()[k * 3 + j];
            }
        }
    }
    let mut g = Graph::<f32>::new();
    let (va, vb) = (g.constant(a.cast()), g.constant(b.cast()));
    let c = g.matmul(va, vb).unwrap();
    assert_close(&g.value(c).to_f64_vec(), &want, 1e-5);
}

#[test]
fn matmul_rejects_inner_mismatch() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([2, 3]));
    assert!(matches!(g.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
}

#[test]
fn conv3d_unit_kernel_is_identity() {
    let x = random(&[1, 1, 4, 5, 3], 5).cast::<f32>();
    let mut g = Graph::<f32>::new();
    let vx = g.constant(x.clone());
    let k = g.constant(Tensor::ones([1, 1, 1, 1, 1]));
    let y = g.conv3d(vx, k, None, 1, 0).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv3d_all_ones_stride_two() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::ones([1, 1, 4, 4, 4]));
    let k = g.constant(Tensor::ones([1, 1, 2, 2, 2]));
    let y = g.conv3d(x, k, None, 2, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 2, 2]);
    assert!(g.value(y).data().iter().all(|&v| v == 8.0));
}

#[test]
fn conv3d_matches_loop_oracle() {
    for (stride, padding, seed) in [(1, 0, 10), (1, 1, 11), (2, 1, 12)] {
        let x = random(&[2, 2, 6, 6, 6], seed);
        let k = random(&[3, 2, 3, 3, 3], seed + 100);
        let (shape, want) = conv3d_oracle(&x, &k, stride, padding);
        let mut g = Graph::<f32>::new();
        let (vx, vk) = (g.constant(x.cast()), g.constant(k.cast()));
        let y = g.conv3d(vx, vk, None, stride, padding).unwrap();
        assert_eq!(g.shape(y), shape.as_slice());
        assert_close(&g.value(y).to_f64_vec(), &want, 1e-4);
    }
}

#[test]
fn conv3d_rejects_oversized_kernel_and_zero_stride() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros([1, 1, 2, 2, 2]));
    let k = g.constant(Tensor::zeros([1, 1, 3, 3, 3]));
    assert!(matches!(g.conv3d(x, k, None, 1, 0), Err(TensorError::KernelTooLarge { .. })));
    assert!(g.conv3d(x, k, None, 1, 1).is_ok());
    assert!(matches!(g.conv3d(x, k, None, 0, 1), Err(TensorError::ZeroStride)));
}

#[test]
fn relu_values_and_zero_subgradient() {
    let mut g = Graph::<f32>::new();
    let x = g.param(t32(&[3], &[-1.0, 0.0, 2.0]));
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    let loss = g.sum(y);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn mean_gradient_is_one_over_n() {
    let mut g = Graph::<f64>::new();
    let x = g.param(random(&[7], 6));
    let m = g.mean(x);
    g.backward(m).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| (v - 1.0 / 7.0).abs() < 1e-15));
}

#[test]
fn log_rejects_non_positive() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(t32(&[3], &[1.0, 0.0, 2.0]));
    assert!(matches!(g.log(x), Err(TensorError::Domain { op: "log", index: 1, .. })));
    let x = g.constant(t32(&[1], &[-1.0]));
    assert!(matches!(g.sqrt(x), Err(TensorError::Domain { op: "sqrt", .. })));
}

#[test]
fn l2_normalize_cases() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(t32(&[2, 2], &[3.0, 4.0, 0.6, 0.8]));
    let y = g.l2_normalize(x).unwrap();
    let v = g.value(y).data();
    assert!((v[0] - 0.6).abs() < 1e-7 && (v[1] - 0.8).abs() < 1e-7);
    assert!((v[2] - 0.6).abs() < 1e-7 && (v[3] - 0.8).abs() < 1e-7);
    let z = g.constant(Tensor::zeros([1, 3]));
    assert!(matches!(g.l2_normalize(z), Err(TensorError::DegenerateRow { row: 0, .. })));
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::zeros([2]));
    assert!(matches!(g.backward(x), Err(TensorError::NotScalar(_))));
}

#[test]
fn backward_linear_and_quadratic() {
    let x0 = random(&[5], 7);
    let mut g = Graph::<f64>::new();
    let x = g.param(x0.clone());
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));

    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    let want: Vec<f64> = x0.data().iter().map(|v| 2.0 * v).collect();
    assert_close(g.grad(x).unwrap().data(), &want, 1e-15);
}

#[test]
fn fan_out_accumulates_exactly() {
    let mut g = Graph::<f32>::new();
    let x = g.param(t32(&[3], &[0.1, 0.2, 0.3]));
    let y = g.add(x, x).unwrap();
    let w = g.constant(t32(&[3], &[1.5, -2.0, 0.25]));
    let z = g.mul(y, w).unwrap();
    let loss = g.sum(z);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[3.0, -4.0, 0.5]);
}

#[test]
fn unreachable_leaf_gets_zero_gradient() {
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::ones([2]));
    let unused = g.param(Tensor::ones([3]));
    let loss = g.sum(x);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let x = g.param(random(&[2, 2, 6, 6, 6], 20).cast());
        let k = g.param(random(&[4, 2, 3, 3, 3], 21).cast());
        let y = g.conv3d(x, k, None, 2, 1).unwrap();
        let y = g.relu(y);
        let loss = g.mean(y);
        g.backward(loss).unwrap();
        (g.value(loss).clone(), g.grad(x).unwrap().clone(), g.grad(k).unwrap().clone())
    };
    assert_eq!(run(), run());
}

fn assert_gradcheck<F>(inputs: &[Tensor<f64>], f: F)
where
    F: Fn(&mut Graph<f64>, &[sinuscl::Var]) -> sinuscl::tensor::Result<sinuscl::Var>,
{
    let report = check_gradients(inputs, 1e-3, f).unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn gradcheck_binary_ops_with_broadcast() {
    let a = random(&[2, 3], 30);
    let b = random(&[3], 31).map(|v| v.abs() + 0.5);
    let w = random(&[2, 3], 32);
    for op in 0..4 {
        assert_gradcheck(&[a.clone(), b.clone()], |g, v| {
            let y = match op {
                0 => g.add(v[0], v[1])?,
                1 => g.sub(v[0], v[1])?,
                2 => g.mul(v[0], v[1])?,
                _ => g.div(v[0], v[1])?,
            };
            let w = g.constant(w.clone());
            let y = g.mul(y, w)?;
            Ok(g.sum(y))
        });
    }
}

#[test]
fn gradcheck_matmul_transpose_reshape() {
    let a = random(&[3, 4], 33);
    let b = random(&[4, 2], 34);
    assert_gradcheck(&[a, b], |g, v| {
        let c = g.matmul(v[0], v[1])?;
        let ct = g.transpose(c)?;
        let r = g.reshape(ct, [6])?;
        let sq = g.mul(r, r)?;
        Ok(g.sum(sq))
    });
}

#[test]
fn gradcheck_unary_ops() {
    let x = random(&[2, 5], 35);
    let pos = x.map(|v| v.abs() + 0.2);
    let w = random(&[2, 5], 36);
    assert_gradcheck(std::slice::from_ref(&x), |g, v| {
        let y = g.relu(v[0]);
        let w = g.constant(w.clone());
        let y = g.mul(y, w)?;
        Ok(g.sum(y))
    });
    assert_gradcheck(std::slice::from_ref(&x), |g, v| {
        let y = g.exp(v[0]);
        let y = g.mul_scalar(y, 0.5);
        let y = g.add_scalar(y, 1.0);
        Ok(g.mean(y))
    });
    assert_gradcheck(std::slice::from_ref(&pos), |g, v| {
        let y = g.log(v[0])?;
        let w = g.constant(w.clone());
        let y = g.mul(y, w)?;
        Ok(g.sum(y))
    });
    assert_gradcheck(&[pos], |g, v| {
        let y = g.sqrt(v[0])?;
        let w = g.constant(w.clone());
        let y = g.mul(y, w)?;
        Ok(g.sum(y))
    });
}

#[test]
fn gradcheck_exp_log_composite_is_identity() {
    let x = random(&[6], 37).map(|v| v.abs() + 0.1);
    let mut g = Graph::<f64>::new();
    let vx = g.param(x);
    let e = g.log(vx).unwrap();
    let y = g.exp(e);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_close(g.grad(vx).unwrap().data(), &[1.0; 6], 1e-12);
}

#[test]
fn gradcheck_reductions() {
    let x = random(&[3, 4, 2], 38);
    let w = random(&[3, 2], 39);
    let w2 = random(&[3, 1, 2], 40);
    assert_gradcheck(std::slice::from_ref(&x), |g, v| {
        let s = g.sum_axis(v[0], 1, false)?;
        let w = g.constant(w.clone());
        let y = g.mul(s, w)?;
        Ok(g.sum(y))
    });
    assert_gradcheck(std::slice::from_ref(&x), |g, v| {
        let m = g.max_along(v[0], 1, true)?;
        let w = g.constant(w2.clone());
        let y = g.mul(m, w)?;
        Ok(g.sum(y))
    });
}

#[test]
fn gradcheck_pool_normalize_groupnorm() {
    let x = random(&[2, 4, 2, 3, 2], 41);
    let w = random(&[2, 4], 42);
    assert_gradcheck(std::slice::from_ref(&x), |g, v| {
        let p = g.global_avg_pool(v[0])?;
        let n = g.l2_normalize(p)?;
        let w = g.constant(w.clone());
        let y = g.mul(n, w)?;
        Ok(g.sum(y))
    });
    let gamma = random(&[4], 43);
    let beta = random(&[4], 44);
    let wx = random(&[2, 4, 2, 3, 2], 45);
    assert_gradcheck(&[x, gamma, beta], |g, v| {
        let y = g.group_norm(v[0], v[1], v[2], 2)?;
        let w = g.constant(wx.clone());
        let y = g.mul(y, w)?;
        Ok(g.sum(y))
    });
}

#[test]
fn gradcheck_conv3d_with_bias() {
    let x = random(&[2, 2, 5, 4, 4], 46);
    let k = random(&[3, 2, 3, 2, 3], 47);
    let b = random(&[3], 48);
    for (stride, padding) in [(1, 0), (2, 1)] {
        assert_gradcheck(&[x.clone(), k.clone(), b.clone()], |g, v| {
            let y = g.conv3d(v[0], v[1], Some(v[2]), stride, padding)?;
            let sq = g.mul(y, y)?;
            Ok(g.mean(sq))
        });
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gradcheck_random_elementwise_chain(seed in any::<u64>(), n in 1usize..6) {
        let a = random(&[n, 3], seed);
        let b = random(&[3], seed ^ 0x9e37);
        let report = check_gradients(&[a, b], 1e-3, |g, v| {
            let y = g.mul(v[0], v[1])?;
            let e = g.exp(y);
            let s = g.sub(e, v[0])?;
            let t = g.add(s, v[1])?;
            let sq = g.mul(t, t)?;
            Ok::<_, TensorError>(g.mean(sq))
        }).unwrap();
        prop_assert!(report.passed(), "{:?}", report);
    }

    #[test]
    fn broadcast_add_equals_tiled(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
        let a = random(&[rows, cols], seed).cast::<f32>();
        let b = random(&[cols], seed.wrapping_add(1)).cast::<f32>();
        let tiled: Vec<f32> = (0..rows).flat_map(|_| b.data().to_vec()).collect();
        let mut g = Graph::<f32>::new();
        let (va, vb) = (g.constant(a), g.constant(b));
        let vt = g.constant(Tensor::new([rows, cols], tiled).unwrap());
        let x = g.add(va, vb).unwrap();
        let y = g.add(va, vt).unwrap();
        prop_assert_eq!(g.value(x), g.value(y));
    }
}
