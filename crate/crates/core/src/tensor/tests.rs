use super::*;
use crate::error::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Direct six-nested-loop convolution.
fn conv_oracle(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (bn, ci, h, wd) = x.shape().bchw().unwrap();
    let (co, _, kh, kw) = w.shape().bchw().unwrap();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; bn * co * ho * wo];
    for n in 0..bn {
        for o in 0..co {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for c in 0..ci {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xx * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.data()[((o * ci + c) * kh + i) * kw + j]
                                    * x.data()[((n * ci + c) * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out[((n * co + o) * ho + y) * wo + xx] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[bn, co, ho, wo], out).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn test_shape_invariants() {
    assert!(Shape::new(&[2, 0]).is_err());
    assert!(Shape::new(&[1, 1, 1, 1, 1]).is_err());
    assert_eq!(Shape::new(&[2, 3, 4]).unwrap().numel(), 24);
    assert!(Tensor::from_vec(&[2, 2], vec![1.0; 3]).is_err());
}

#[test]
fn test_conv2d_identity_kernel() {
    let mut r = rng(1);
    let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut r).unwrap();
    let mut w = Tensor::zeros(&[3, 3, 1, 1]).unwrap();
    for c in 0..3 {
        w.data_mut()[c * 3 + c] = 1.0;
    }
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w));
    let y = tape.conv2d(xv, wv, None, 1, 0).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn test_conv2d_ones_window_count() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]).unwrap());
    let w = tape.constant(Tensor::ones(&[1, 1, 2, 2]).unwrap());
    let y = tape.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(tape.value(y).dims(), &[1, 1, 2, 2]);
    assert!(tape.value(y).data().iter().all(|&v| v == 4.0));
}

#[test]
fn test_conv2d_matches_loop_oracle() {
    let mut r = rng(7);
    for &(dims, wdims, stride, pad) in &[
        ([1, 2, 5, 5], [3, 2, 3, 3], 1, 0),
        ([2, 3, 6, 6], [4, 3, 3, 3], 1, 1),
        ([2, 3, 8, 8], [4, 3, 4, 4], 2, 1),
        ([4, 8, 16, 16], [8, 8, 3, 3], 1, 1),
        ([1, 2, 6, 6], [3, 2, 2, 2], 2, 0),
    ] {
        let x = Tensor::randn(&dims, 1.0, &mut r).unwrap();
        let w = Tensor::randn(&wdims, 1.0, &mut r).unwrap();
        let b = Tensor::randn(&[wdims[0]], 1.0, &mut r).unwrap();
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let expected = conv_oracle(&x, &w, Some(&b), stride, pad);
        assert_eq!(tape.value(y).dims(), expected.dims());
        assert!(max_abs_diff(tape.value(y).data(), expected.data()) < 1e-12);
    }
}

#[test]
fn test_conv2d_errors() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::ones(&[1, 2, 5, 5]).unwrap());
    let w = tape.constant(Tensor::ones(&[1, 3, 3, 3]).unwrap());
    match tape.conv2d(x, w, None, 1, 0) {
        Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![1, 2, 5, 5]);
            assert_eq!(rhs, vec![1, 3, 3, 3]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
    let x = tape.constant(Tensor::ones(&[1, 1, 6, 6]).unwrap());
    let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]).unwrap());
    assert!(matches!(tape.conv2d(x, w, None, 2, 1), Err(Error::Config(_))));
}

#[test]
fn test_linear_cases() {
    let mut r = rng(3);
    let x = Tensor::randn(&[4, 3], 1.0, &mut r).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let mut eye = Tensor::zeros(&[3, 3]).unwrap();
    for i in 0..3 {
        eye.data_mut()[i * 3 + i] = 1.0;
    }
    let ev = tape.constant(eye);
    let zb = tape.constant(Tensor::zeros(&[3]).unwrap());
    let y = tape.linear(xv, ev, Some(zb)).unwrap();
    assert_eq!(tape.value(y), &x);

    let zw = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
    let bias = tape.constant(Tensor::from_vec(&[2], vec![0.5, -1.5]).unwrap());
    let y = tape.linear(xv, zw, Some(bias)).unwrap();
    for row in tape.value(y).data().chunks(2) {
        assert_eq!(row, &[0.5, -1.5]);
    }

    let w = Tensor::randn(&[2, 3], 1.0, &mut r).unwrap();
    let wv = tape.constant(w.clone());
    let y = tape.linear(xv, wv, None).unwrap();
    for i in 0..4 {
        for o in 0..2 {
            let mut acc = 0.0;
            for k in 0..3 {
                acc += x.data()[i * 3 + k] * w.data()[o * 3 + k];
            }
            assert!((tape.value(y).data()[i * 2 + o] - acc).abs() < 1e-12);
        }
    }
    let bad = tape.constant(Tensor::zeros(&[2, 4]).unwrap());
    assert!(matches!(tape.linear(xv, bad, None), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn test_activations() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    let z = tape.constant(Tensor::scalar(0.0));
    let s = tape.sigmoid(z).unwrap();
    assert_eq!(tape.value(s).item(), 0.5);

    let mut r = rng(11);
    for _ in 0..20 {
        let p = Tensor::randn(&[5], 2.0, &mut r).unwrap();
        let err = grad_check(
            |t, v| {
                let s = t.sigmoid(v)?;
                t.sum(s)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "sigmoid grad err {err}");
    }
}

#[test]
fn test_relu_subgradient_at_zero_is_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap(), true);
    let y = tape.relu(x).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn test_global_avg_pool() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[2, 3, 4, 5], 1.75).unwrap());
    let z = tape.global_avg_pool(x).unwrap();
    assert!(tape.value(z).data().iter().all(|&v| v == 1.75));

    let mut r = rng(5);
    let single = Tensor::randn(&[2, 3, 1, 1], 1.0, &mut r).unwrap();
    let sv = tape.constant(single.clone());
    let z = tape.global_avg_pool(sv).unwrap();
    assert_eq!(tape.value(z).data(), single.data());

    let x = Tensor::randn(&[4, 8, 16, 16], 1.0, &mut r).unwrap();
    let xv = tape.constant(x.clone());
    let z = tape.global_avg_pool(xv).unwrap();
    for b in 0..4 {
        for c in 0..8 {
            let mut acc = 0.0;
            for h in 0..16 {
                for w in 0..16 {
                    acc += x.data()[((b * 8 + c) * 16 + h) * 16 + w];
                }
            }
            assert!((tape.value(z).data()[b * 8 + c] - acc / 256.0).abs() < 1e-14);
        }
    }
}

#[test]
fn test_loss_values() {
    let mut tape = Tape::new();
    let logits = tape.constant(Tensor::from_vec(&[2, 2], vec![30.0, -30.0, -30.0, 30.0]).unwrap());
    let target = Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap();
    let l = tape.loss(logits, &target, LossKind::CrossEntropy, None).unwrap();
    assert!(tape.value(l).item() < 1e-10);

    let mut r = rng(21);
    let p = Tensor::randn(&[6, 4], 1.5, &mut r).unwrap();
    let t = Tensor::from_vec(&[6], vec![0.0, 1.0, 2.0, 3.0, 1.0, 2.0]).unwrap();
    let pv = tape.constant(p);
    let ce = tape.loss(pv, &t, LossKind::CrossEntropy, None).unwrap();
    let fl = tape
        .loss(pv, &t, LossKind::Focal { gamma: 0.0 }, Some(&[1.0; 4]))
        .unwrap();
    assert!((tape.value(ce).item() - tape.value(fl).item()).abs() < 1e-12);

    let bad = Tensor::from_vec(&[6], vec![0.0, 1.0, 2.0, 4.0, 1.0, 2.0]).unwrap();
    assert!(tape.loss(pv, &bad, LossKind::CrossEntropy, None).is_err());
}

#[test]
fn test_loss_gradients_match_finite_differences() {
    let mut r = rng(99);
    let classes = Tensor::from_vec(&[5], vec![0.0, 2.0, 1.0, 2.0, 0.0]).unwrap();
    let weights = [0.5, 1.0, 2.0];
    let mut multi = Tensor::zeros(&[5, 3]).unwrap();
    for (i, v) in multi.data_mut().iter_mut().enumerate() {
        *v = if (i * 7) % 3 == 0 { 1.0 } else { 0.0 };
    }
    for _ in 0..20 {
        let p = Tensor::randn(&[5, 3], 1.0, &mut r).unwrap();
        for kind in [LossKind::CrossEntropy, LossKind::Focal { gamma: 2.0 }, LossKind::Focal { gamma: 0.5 }] {
            let err = grad_check(|t, v| t.loss(v, &classes, kind, Some(&weights)), &p, 1e-5).unwrap();
            assert!(err < 1e-5, "{kind:?}: {err}");
        }
        let err = grad_check(|t, v| t.loss(v, &multi, LossKind::Bce, Some(&weights)), &p, 1e-5).unwrap();
        assert!(err < 1e-5, "bce: {err}");
    }
}

#[test]
fn test_backward_basics() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(&[3], vec![1.0, -2.0, 3.0]).unwrap(), true);
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    assert!(matches!(tape.backward(s), Err(Error::Tape(_))));

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap(), true);
    let z = tape.scale(x, 0.0).unwrap();
    let s = tape.sum(z).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0]);

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap(), true);
    assert!(matches!(tape.backward(x), Err(Error::Tape(_))));
}

#[test]
fn test_shared_subexpression_accumulates() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0), true);
    let y = tape.add(x, x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap().item(), 2.0);
}

#[test]
fn test_grad_check_examples() {
    let p = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
    let sq = |t: &mut Tape, v: Var| {
        let m = t.mul(v, v)?;
        t.sum(m)
    };
    let mut tape = Tape::new();
    let x = tape.leaf(p.clone(), true);
    let r = sq(&mut tape, x).unwrap();
    tape.backward(r).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    assert!(grad_check(sq, &p, 1e-5).unwrap() < 1e-8);

    let p = Tensor::from_vec(&[4], vec![-1.0, 0.5, 2.0, -0.3]).unwrap();
    let err = grad_check(
        |t, v| {
            let r = t.relu(v)?;
            t.sum(r)
        },
        &p,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8);
    assert!(grad_check(sq, &p, 0.0).is_err());
}

/// conv -> relu -> gap -> linear -> cross-entropy; every parameter gradient
/// checked against central differences.
#[test]
fn test_composite_graph_gradients() {
    let mut r = rng(2024);
    let x = Tensor::randn(&[2, 2, 5, 5], 1.0, &mut r).unwrap();
    let w = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut r).unwrap();
    let cb = Tensor::randn(&[3], 0.1, &mut r).unwrap();
    let lw = Tensor::randn(&[4, 3], 0.5, &mut r).unwrap();
    let lb = Tensor::randn(&[4], 0.1, &mut r).unwrap();
    let target = Tensor::from_vec(&[2], vec![1.0, 3.0]).unwrap();
    let params = [x.clone(), w.clone(), cb.clone(), lw.clone(), lb.clone()];
    for which in 0..params.len() {
        let f = |t: &mut Tape, v: Var| {
            let mut vars: Vec<Var> = params.iter().map(|p| t.constant(p.clone())).collect();
            vars[which] = v;
            let c = t.conv2d(vars[0], vars[1], Some(vars[2]), 1, 1)?;
            let a = t.relu(c)?;
            let z = t.global_avg_pool(a)?;
            let o = t.linear(z, vars[3], Some(vars[4]))?;
            t.loss(o, &target, LossKind::CrossEntropy, None)
        };
        let err = grad_check(f, &params[which], 1e-5).unwrap();
        assert!(err < 1e-4, "param {which}: {err}");
    }
}

#[test]
fn test_op_gradients_on_random_points() {
    let mut r = rng(77);
    let fixed = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut r).unwrap();
    let wsum = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut r).unwrap();
    for _ in 0..20 {
        let p = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut r).unwrap();
        let s = Tensor::randn(&[2, 3], 1.0, &mut r).unwrap();
        let m = Tensor::randn(&[2, 1, 4, 4], 1.0, &mut r).unwrap();
        // Weighted sum keeps gradients non-uniform.
        let weighted = |t: &mut Tape, v: Var| -> crate::Result<Var> {
            let wv = t.constant(Tensor::from_vec(t.value(v).dims(), wsum.data()[..t.value(v).numel()].to_vec())?);
            let prod = t.mul(v, wv)?;
            t.sum(prod)
        };
        let cases: Vec<Box<dyn Fn(&mut Tape, Var) -> crate::Result<Var>>> = vec![
            Box::new(|t, v| {
                let y = t.global_max_pool(v)?;
                let q = t.mul(y, y)?;
                t.sum(q)
            }),
            Box::new(|t, v| {
                let y = t.channel_mean(v)?;
                weighted(t, y)
            }),
            Box::new(|t, v| {
                let y = t.channel_max(v)?;
                weighted(t, y)
            }),
            Box::new(|t, v| {
                let c = t.constant(fixed.clone());
                let y = t.concat_channels(v, c)?;
                let q = t.mul(y, y)?;
                t.sum(q)
            }),
            Box::new(|t, v| {
                let sv = t.constant(s.clone());
                let y = t.channel_scale(v, sv)?;
                weighted(t, y)
            }),
            Box::new(|t, v| {
                let mv = t.constant(m.clone());
                let y = t.spatial_scale(v, mv)?;
                weighted(t, y)
            }),
            Box::new(|t, v| {
                let y = t.reshape(v, &[2, 48])?;
                let q = t.mul(y, y)?;
                t.sum(q)
            }),
        ];
        for (i, f) in cases.iter().enumerate() {
            let err = grad_check(f, &p, 1e-5).unwrap();
            assert!(err < 1e-4, "case {i}: {err}");
        }
        // Gradients w.r.t. the scale operands.
        let xv = p.clone();
        let err = grad_check(
            |t, v| {
                let x = t.constant(xv.clone());
                let y = t.channel_scale(x, v)?;
                weighted(t, y)
            },
            &s,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4);
        let err = grad_check(
            |t, v| {
                let x = t.constant(xv.clone());
                let y = t.spatial_scale(x, v)?;
                weighted(t, y)
            },
            &m,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4);
    }
}

#[test]
fn test_normalize_and_standardize_gradients() {
    let mut r = rng(31);
    let wsum = Tensor::randn(&[3, 4, 3, 3], 1.0, &mut r).unwrap();
    for _ in 0..20 {
        let x = Tensor::randn(&[3, 4, 3, 3], 1.0, &mut r).unwrap();
        let gamma = Tensor::randn(&[4], 1.0, &mut r).unwrap();
        let beta = Tensor::randn(&[4], 1.0, &mut r).unwrap();
        for axes in [NormAxes::Batch, NormAxes::Group(2), NormAxes::Group(1)] {
            for which in 0..3 {
                let pts = [x.clone(), gamma.clone(), beta.clone()];
                let f = |t: &mut Tape, v: Var| {
                    let mut vars: Vec<Var> = pts.iter().map(|p| t.constant(p.clone())).collect();
                    vars[which] = v;
                    let (y, _) = t.normalize(vars[0], vars[1], vars[2], axes, 1e-5)?;
                    let wv = t.constant(wsum.clone());
                    let prod = t.mul(y, wv)?;
                    t.sum(prod)
                };
                let err = grad_check(f, &pts[which], 1e-5).unwrap();
                assert!(err < 1e-4, "{axes:?} input {which}: {err}");
            }
        }
        let mean = [0.1, -0.2, 0.3, 0.0];
        let var = [1.0, 0.5, 2.0, 0.7];
        let err = grad_check(
            |t, v| {
                let g = t.constant(gamma.clone());
                let b = t.constant(beta.clone());
                let y = t.frozen_norm(v, g, b, &mean, &var, 1e-5)?;
                let wv = t.constant(wsum.clone());
                let prod = t.mul(y, wv)?;
                t.sum(prod)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4);

        let w = Tensor::randn(&[3, 4, 3, 3], 1.0, &mut r).unwrap();
        let gain = Tensor::randn(&[3], 1.0, &mut r).unwrap();
        for which in 0..2 {
            let pts = [w.clone(), gain.clone()];
            let f = |t: &mut Tape, v: Var| {
                let mut vars: Vec<Var> = pts.iter().map(|p| t.constant(p.clone())).collect();
                vars[which] = v;
                let y = t.standardize_weight(vars[0], vars[1], 1.7, 1e-5)?;
                let wv = t.constant(wsum.clone());
                let prod = t.mul(y, wv)?;
                t.sum(prod)
            };
            let err = grad_check(f, &pts[which], 1e-5).unwrap();
            assert!(err < 1e-4, "standardize input {which}: {err}");
        }
    }
}

#[test]
fn test_channel_conv1d_gradients_and_errors() {
    let mut r = rng(8);
    for _ in 0..20 {
        let z = Tensor::randn(&[2, 6], 1.0, &mut r).unwrap();
        let k = Tensor::randn(&[3], 1.0, &mut r).unwrap();
        for which in 0..2 {
            let pts = [z.clone(), k.clone()];
            let f = |t: &mut Tape, v: Var| {
                let mut vars: Vec<Var> = pts.iter().map(|p| t.constant(p.clone())).collect();
                vars[which] = v;
                let y = t.channel_conv1d(vars[0], vars[1])?;
                let q = t.mul(y, y)?;
                t.sum(q)
            };
            assert!(grad_check(f, &pts[which], 1e-5).unwrap() < 1e-4);
        }
    }
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[1, 4]).unwrap());
    let k = tape.constant(Tensor::zeros(&[2]).unwrap());
    assert!(matches!(tape.channel_conv1d(z, k), Err(Error::Config(_))));
}

#[test]
fn test_forward_determinism() {
    let build = || {
        let mut r = rng(42);
        let x = Tensor::randn(&[2, 3, 6, 6], 1.0, &mut r).unwrap();
        let w = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut r).unwrap();
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x), tape.constant(w));
        let y = tape.conv2d(xv, wv, None, 1, 1).unwrap();
        tape.value(y).clone()
    };
    let (a, b) = (build(), build());
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}
