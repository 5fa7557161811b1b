use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use strokeseg_tensor::{BatchNormMode, Conv2dSpec, RunningStats, Tape, Tensor, TensorError, UpsampleMode};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Direct loop convolution used as the reference implementation.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&[f64]>, spec: Conv2dSpec) -> Tensor<f64> {
    let [n, c, h, wd] = x.shape()[..] else { panic!() };
    let [k, cg, kh, kw] = w.shape()[..] else { panic!() };
    let kg = k / spec.groups;
    let ho = (h + 2 * spec.padding - kh) / spec.stride + 1;
    let wo = (wd + 2 * spec.padding - kw) / spec.stride + 1;
    let mut out = Tensor::zeros([n, k, ho, wo]);
    for bi in 0..n {
        for ko in 0..k {
            let grp = ko / kg;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b[ko]);
                    for ci in 0..cg {
                        let cin = grp * cg + ci;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                                let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((bi * c + cin) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((ko * cg + ci) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out.data_mut()[((bi * k + ko) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    assert_eq!(c, cg * spec.groups);
    out
}

fn conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, spec: Conv2dSpec) -> Tensor<f64> {
    let mut tape = Tape::new();
    let (xv, wv) = (tape.leaf(x.clone()), tape.leaf(w.clone()));
    let bv = b.map(|b| tape.leaf(b.clone()));
    let out = tape.conv2d(xv, wv, bv, spec).unwrap();
    tape.value(out).clone()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn conv_same_padding_keeps_shape() {
    let x = Tensor::<f64>::ones([1, 1, 4, 4]);
    let w = Tensor::<f64>::ones([1, 1, 3, 3]);
    assert_eq!(conv(&x, &w, None, Conv2dSpec::same3x3()).shape(), &[1, 1, 4, 4]);
}

#[test]
fn conv_center_tap_is_identity() {
    let x = Tensor::<f64>::rand_uniform([2, 1, 5, 6], -1.0, 1.0, &mut rng(1));
    let mut w = Tensor::<f64>::zeros([1, 1, 3, 3]);
    w.data_mut()[4] = 1.0;
    let b = Tensor::<f64>::zeros([1]);
    assert_eq!(conv(&x, &w, Some(&b), Conv2dSpec::same3x3()).data(), x.data());
}

#[test]
fn conv_matches_loop_oracle() {
    let mut r = rng(2);
    let x = Tensor::<f64>::rand_uniform([2, 3, 5, 5], -1.0, 1.0, &mut r);
    let w = Tensor::<f64>::rand_uniform([4, 3, 3, 3], -1.0, 1.0, &mut r);
    let b = Tensor::<f64>::rand_uniform([4], -1.0, 1.0, &mut r);
    for spec in [
        Conv2dSpec::same3x3(),
        Conv2dSpec { stride: 2, padding: 1, groups: 1 },
        Conv2dSpec { stride: 1, padding: 0, groups: 1 },
        Conv2dSpec { stride: 3, padding: 2, groups: 1 },
    ] {
        let got = conv(&x, &w, Some(&b), spec);
        let want = naive_conv(&x, &w, Some(b.data()), spec);
        assert_eq!(got.shape(), want.shape());
        assert!(max_abs_diff(got.data(), want.data()) < 1e-6, "{spec:?}");
    }
    // pointwise fast path
    let w1 = Tensor::<f64>::rand_uniform([4, 3, 1, 1], -1.0, 1.0, &mut r);
    let got = conv(&x, &w1, None, Conv2dSpec::pointwise());
    let want = naive_conv(&x, &w1, None, Conv2dSpec::pointwise());
    assert!(max_abs_diff(got.data(), want.data()) < 1e-6);
}

#[test]
fn conv_f32_agrees_with_f64_oracle() {
    let mut r = rng(3);
    let x = Tensor::<f64>::rand_uniform([2, 3, 8, 8], -1.0, 1.0, &mut r);
    let w = Tensor::<f64>::rand_uniform([5, 3, 3, 3], -1.0, 1.0, &mut r);
    let want = naive_conv(&x, &w, None, Conv2dSpec::same3x3());
    let mut tape = Tape::<f32>::new();
    let (xv, wv) = (tape.leaf(x.cast()), tape.leaf(w.cast()));
    let out = tape.conv2d(xv, wv, None, Conv2dSpec::same3x3()).unwrap();
    let got: Vec<f64> = tape.value(out).data().iter().map(|&v| v as f64).collect();
    assert!(max_abs_diff(&got, want.data()) < 1e-5);
}

#[test]
fn depthwise_and_grouped_match_per_channel_oracle() {
    let mut r = rng(4);
    let x = Tensor::<f64>::rand_uniform([2, 4, 6, 6], -1.0, 1.0, &mut r);
    let dw = Tensor::<f64>::rand_uniform([4, 1, 3, 3], -1.0, 1.0, &mut r);
    let got = conv(&x, &dw, None, Conv2dSpec::depthwise3x3(4));
    // each channel convolved on its own
    for ch in 0..4 {
        let mut xc = Tensor::<f64>::zeros([2, 1, 6, 6]);
        for b in 0..2 {
            xc.data_mut()[b * 36..(b + 1) * 36].copy_from_slice(&x.data()[(b * 4 + ch) * 36..(b * 4 + ch + 1) * 36]);
        }
        let wc = Tensor::from_vec([1, 1, 3, 3], dw.data()[ch * 9..(ch + 1) * 9].to_vec()).unwrap();
        let want = naive_conv(&xc, &wc, None, Conv2dSpec::same3x3());
        for b in 0..2 {
            let g = &got.data()[(b * 4 + ch) * 36..(b * 4 + ch + 1) * 36];
            assert!(max_abs_diff(g, &want.data()[b * 36..(b + 1) * 36]) < 1e-6);
        }
    }
    let gw = Tensor::<f64>::rand_uniform([6, 2, 3, 3], -1.0, 1.0, &mut r);
    let spec = Conv2dSpec { stride: 1, padding: 1, groups: 2 };
    assert!(max_abs_diff(conv(&x, &gw, None, spec).data(), naive_conv(&x, &gw, None, spec).data()) < 1e-6);
}

#[test]
fn conv_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::zeros([1, 3, 4, 4]));
    let w = tape.leaf(Tensor::zeros([2, 4, 3, 3]));
    let err = tape.conv2d(x, w, None, Conv2dSpec::same3x3()).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[1, 3, 4, 4]") && msg.contains("[2, 4, 3, 3]"), "{msg}");
}

fn bn_params(tape: &mut Tape<f64>, c: usize, gamma: f64, beta: f64) -> (strokeseg_tensor::Var, strokeseg_tensor::Var) {
    (tape.leaf(Tensor::full([c], gamma)), tape.leaf(Tensor::full([c], beta)))
}

#[test]
fn batchnorm_constant_input_is_zero() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::full([2, 3, 4, 4], 5.0));
    let (g, b) = bn_params(&mut tape, 3, 1.0, 0.0);
    let mut rs = RunningStats::new(3);
    let y = tape.batchnorm2d(x, g, b, &mut rs, BatchNormMode::Train, 1e-5, 0.1).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    // running mean moved 10% toward 5, running var decayed toward 0
    assert!((rs.mean[0] - 0.5).abs() < 1e-12);
    assert!((rs.var[0] - 0.9).abs() < 1e-12);
}

#[test]
fn batchnorm_train_standardizes_each_channel() {
    let mut tape = Tape::<f64>::new();
    let mut t = Tensor::<f64>::rand_uniform([4, 3, 5, 5], -2.0, 7.0, &mut rng(5));
    t.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v *= 1.0 + (i % 7) as f64);
    let x = tape.leaf(t);
    let (g, b) = bn_params(&mut tape, 3, 1.0, 0.0);
    let (y, _) = tape.batchnorm2d_train(x, g, b, 1e-5).unwrap();
    let ys = tape.value(y).data();
    for ch in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|n| ys[(n * 3 + ch) * 25..(n * 3 + ch + 1) * 25].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-4, "{var}");
    }
}

#[test]
fn batchnorm_eval_is_affine() {
    let mut tape = Tape::<f64>::new();
    let data = Tensor::<f64>::rand_uniform([2, 2, 3, 3], -1.0, 1.0, &mut rng(6));
    let x = tape.leaf(data.clone());
    let (g, b) = bn_params(&mut tape, 2, 2.0, 1.0);
    let rs = RunningStats::new(2);
    let y = tape.batchnorm2d_eval(x, g, b, &rs, 0.0).unwrap();
    for (o, i) in tape.value(y).data().iter().zip(data.data()) {
        assert!((o - (2.0 * i + 1.0)).abs() < 1e-12);
    }
}

#[test]
fn batchnorm_train_rejects_single_value_per_channel() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::ones([1, 2, 1, 1]));
    let (g, b) = bn_params(&mut tape, 2, 1.0, 0.0);
    assert!(tape.batchnorm2d_train(x, g, b, 1e-5).is_err());
    assert!(tape.batchnorm2d_eval(x, g, b, &RunningStats::new(2), 1e-5).is_ok());
}

#[test]
fn nearest_upsample_replicates_blocks() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = tape.upsample(x, 2, UpsampleMode::Nearest).unwrap();
    #[rustfmt::skip]
    let want = [
        1.0, 1.0, 2.0, 2.0,
        1.0, 1.0, 2.0, 2.0,
        3.0, 3.0, 4.0, 4.0,
        3.0, 3.0, 4.0, 4.0,
    ];
    assert_eq!(tape.value(y).data(), &want);
    assert!(tape.upsample(x, 0, UpsampleMode::Nearest).is_err());
}

#[test]
fn upsample_factor_one_is_identity() {
    let mut tape = Tape::<f64>::new();
    let data = Tensor::<f64>::rand_uniform([2, 3, 4, 5], -1.0, 1.0, &mut rng(7));
    let x = tape.leaf(data.clone());
    for mode in [UpsampleMode::Nearest, UpsampleMode::Bilinear] {
        let y = tape.upsample(x, 1, mode).unwrap();
        assert_eq!(tape.value(y).data(), data.data());
    }
}

#[test]
fn bilinear_reproduces_linear_ramp_in_interior() {
    let (h, w, f) = (4, 6, 2);
    let ramp = |y: f64, x: f64| 0.75 * x - 0.5 * y + 2.0;
    let data: Vec<f64> = (0..h * w).map(|i| ramp((i / w) as f64, (i % w) as f64)).collect();
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_vec([1, 1, h, w], data).unwrap());
    let y = tape.upsample(x, f, UpsampleMode::Bilinear).unwrap();
    let out = tape.value(y).data();
    let src = |o: usize| (o as f64 + 0.5) / f as f64 - 0.5;
    for oy in 0..h * f {
        for ox in 0..w * f {
            let (sy, sx) = (src(oy), src(ox));
            if sy < 0.0 || sx < 0.0 || sy > (h - 1) as f64 || sx > (w - 1) as f64 {
                continue;
            }
            assert!((out[oy * w * f + ox] - ramp(sy, sx)).abs() < 1e-6);
        }
    }
}

#[test]
fn concat_and_errors() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(Tensor::from_vec([1, 1, 1, 2], vec![1.0, 2.0]).unwrap());
    let b = tape.leaf(Tensor::from_vec([1, 2, 1, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
    let c = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(tape.shape(c), &[1, 3, 1, 2]);
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let last = tape.concat(&[a, a], 3).unwrap();
    assert_eq!(tape.value(last).data(), &[1.0, 2.0, 1.0, 2.0]);
    assert!(tape.concat(&[a, b], 4).is_err());
    assert!(tape.concat(&[a, b], 3).is_err());
    assert!(tape.add(a, b).is_err());
}

#[test]
fn pooling_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_vec([1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, -1.0, 7.0]).unwrap());
    let m = tape.maxpool2d(x).unwrap();
    assert_eq!(tape.value(m).data(), &[5.0, 7.0]);
    let g = tape.global_avg_pool(x).unwrap();
    assert_eq!(tape.value(g).data(), &[21.0 / 8.0]);
}

fn focal(z: f64, y: f64, gamma: f64, alpha: f64) -> f64 {
    let mut tape = Tape::<f64>::new();
    let l = tape.leaf(Tensor::full([1, 1, 1, 1], z));
    let t = Tensor::full([1, 1, 1, 1], y);
    let loss = tape.focal_loss(l, &t, gamma, alpha).unwrap();
    tape.value(loss).item()
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[test]
fn focal_with_zero_gamma_is_half_cross_entropy() {
    let mut r = rng(8);
    for _ in 0..50 {
        let z: f64 = r.random_range(-6.0..6.0);
        let y = if r.random_bool(0.5) { 1.0 } else { 0.0 };
        let p = 1.0 / (1.0 + (-z).exp());
        let bce = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        assert!((focal(z, y, 0.0, 0.5) - 0.5 * bce).abs() < 1e-12);
    }
}

#[test]
fn focal_known_value_and_limits() {
    let v = focal(0.0, 1.0, 2.0, 1.0);
    assert!((v - 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
    assert!((v - 0.17329).abs() < 1e-5);
    assert!(focal(30.0, 1.0, 2.0, 0.25) < 1e-12);
    assert!(focal(logit(0.999999), 1.0, 2.0, 0.25) < 1e-12);
    // saturated wrong prediction stays finite through the log clamp
    let mut tape = Tape::<f32>::new();
    let l = tape.leaf(Tensor::full([1, 1, 1, 1], 200.0f32));
    let loss = tape.focal_loss(l, &Tensor::full([1, 1, 1, 1], 0.0), 2.0, 0.25).unwrap();
    assert!(tape.value(loss).item().is_finite());
}

#[test]
fn focal_rejects_bad_arguments() {
    let mut tape = Tape::<f64>::new();
    let l = tape.leaf(Tensor::zeros([1, 2, 2, 2]));
    assert!(tape.focal_loss(l, &Tensor::zeros([1, 2, 2, 2]), -0.5, 0.25).is_err());
    assert!(tape.focal_loss(l, &Tensor::full([1, 2, 2, 2], 0.5), 2.0, 0.25).is_err());
    assert!(tape.focal_loss(l, &Tensor::zeros([1, 2, 2, 1]), 2.0, 0.25).is_err());
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::rand_uniform([2, 3], -1.0, 1.0, &mut rng(9)));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
}

#[test]
fn backward_of_square_and_accumulation() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::full([1], 3.0));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[12.0]);
    tape.zero_grads();
    assert!(tape.grad(x).is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::ones([2]));
    let y = tape.scale(x, 2.0);
    assert!(matches!(tape.backward(y), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn constant_leaves_receive_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::ones([3]));
    let w = tape.param(Tensor::full([3], 2.0));
    let p = tape.mul(x, w).unwrap();
    let s = tape.sum(p);
    tape.backward(s).unwrap();
    assert!(tape.grad(x).is_none());
    assert_eq!(tape.grad(w).unwrap(), &[1.0; 3]);
}

#[test]
fn narrow_selects_channel_range() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_vec([2, 3, 1, 1], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
    let y = tape.narrow(x, 1, 1, 2).unwrap();
    assert_eq!(tape.shape(y), &[2, 2, 1, 1]);
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 4.0, 5.0]);
    assert!(tape.narrow(x, 1, 2, 2).is_err());
    assert!(tape.narrow(x, 4, 0, 1).is_err());
}
