use super::*;
use crate::gradcheck::probe_tensor;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;
use proptest::prelude::*;

fn tape_with<S: crate::Scalar>(t: Tensor<S>) -> (Tape<S>, TensorId) {
    let mut tape = Tape::new();
    let id = tape.leaf(t, false);
    (tape, id)
}

// -- broadcast machinery ----------------------------------------------------

#[test]
fn broadcast_rejects_non_singleton_mismatch() {
    let err = broadcast_shape("add", &[2, 3], &[2, 4]).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("axis 1"), "error should name the axis: {msg}");
}

#[test]
fn broadcast_rejects_rank_mismatch() {
    assert!(broadcast_shape("mul", &[2, 3], &[2, 3, 1]).is_err());
}

#[test]
fn broadcast_zip_channel_gate() {
    // [1,2,1,1] gate against [1,2,2,2] map: the fuse-op pattern.
    let gate = Tensor::<f64>::new([1, 2, 1, 1], vec![2.0, 3.0]).unwrap();
    let x = Tensor::<f64>::new([1, 2, 2, 2], (1..=8).map(f64::from).collect()).unwrap();
    let y = broadcast_zip(&gate, &x, &[1, 2, 2, 2], |g, v| g * v);
    assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0, 15.0, 18.0, 21.0, 24.0]);
}

#[test]
fn reduce_to_shape_sums_broadcast_axes() {
    let g = Tensor::<f64>::new([1, 2, 2, 2], vec![1.0; 8]).unwrap();
    let r = reduce_to_shape(&g, &[1, 2, 1, 1]);
    assert_eq!(r.data(), &[4.0, 4.0]);
}

// -- conv2d -----------------------------------------------------------------

/// Direct six-nested-loop convolution; the independent oracle the fast
/// kernel is checked against.
fn conv2d_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (n, cin, h, wi) = x.dims4("oracle").unwrap();
    let (cout, _, kh, kw) = w.dims4("oracle").unwrap();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wi + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros([n, cout, ho, wo]);
    for ni in 0..n {
        for co in 0..cout {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let ih = (oh * stride + ky) as isize - pad as isize;
                                let iw = (ow * stride + kx) as isize - pad as isize;
                                if ih < 0 || ih >= h as isize || iw < 0 || iw >= wi as isize {
                                    continue;
                                }
                                acc += w.data()[((co * cin + ci) * kh + ky) * kw + kx]
                                    * x.data()[((ni * cin + ci) * h + ih as usize) * wi + iw as usize];
                            }
                        }
                    }
                    out.data_mut()[((ni * cout + co) * ho + oh) * wo + ow] = acc;
                }
            }
        }
    }
    out
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .fold(0.0f64, |m, (&x, &y)| m.max((x - y).abs()))
}

#[test]
fn conv2d_all_ones_counts_overlap() {
    let x = Tensor::<f64>::ones([1, 1, 3, 3]);
    let w = Tensor::<f64>::ones([1, 1, 3, 3]);
    let b = Tensor::<f64>::zeros([1]);
    let mut tape = Tape::new();
    let (x, w, b) = (tape.leaf(x, false), tape.leaf(w, false), tape.leaf(b, false));
    let y = conv2d(&mut tape, x, w, b, 1, 1).unwrap();
    let out = tape.value(y);
    assert_eq!(out.data()[4], 9.0, "center overlaps all nine taps");
    assert_eq!(out.data()[0], 4.0, "corner overlaps four taps");
}

#[test]
fn conv2d_identity_kernel_is_identity() {
    let x = probe_tensor(&[2, 3, 5, 5], 3);
    let mut w = Tensor::<f64>::zeros([3, 3, 1, 1]);
    for c in 0..3 {
        w.data_mut()[c * 3 + c] = 1.0;
    }
    let b = Tensor::zeros([3]);
    let mut tape = Tape::new();
    let (xi, wi, bi) = (tape.leaf(x.clone(), false), tape.leaf(w, false), tape.leaf(b, false));
    let y = conv2d(&mut tape, xi, wi, bi, 1, 0).unwrap();
    assert_eq!(tape.value(y).data(), x.data());
}

#[test]
fn conv2d_matches_naive_loop_oracle() {
    let x = probe_tensor(&[2, 3, 8, 8], 10);
    let w = probe_tensor(&[4, 3, 3, 3], 11);
    let b = probe_tensor(&[4], 12);
    let mut tape = Tape::new();
    let (xi, wi, bi) = (tape.leaf(x.clone(), false), tape.leaf(w.clone(), false), tape.leaf(b.clone(), false));
    let y = conv2d(&mut tape, xi, wi, bi, 1, 1).unwrap();
    assert!(max_abs_diff(tape.value(y), &conv2d_oracle(&x, &w, &b, 1, 1)) <= 1e-6);
}

#[test]
fn conv2d_stride2_matches_naive_loop_oracle() {
    let x = probe_tensor(&[1, 4, 8, 8], 13);
    let w = probe_tensor(&[8, 4, 3, 3], 14);
    let b = probe_tensor(&[8], 15);
    let mut tape = Tape::new();
    let (xi, wi, bi) = (tape.leaf(x.clone(), false), tape.leaf(w.clone(), false), tape.leaf(b.clone(), false));
    let y = conv2d(&mut tape, xi, wi, bi, 2, 1).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 8, 4, 4]);
    assert!(max_abs_diff(tape.value(y), &conv2d_oracle(&x, &w, &b, 2, 1)) <= 1e-6);
}

#[test]
fn conv2d_shape_error_names_the_dimension() {
    let x = Tensor::<f64>::zeros([1, 3, 5, 5]);
    let w = Tensor::<f64>::zeros([4, 2, 3, 3]); // wrong Cin
    let b = Tensor::<f64>::zeros([4]);
    let mut tape = Tape::new();
    let (xi, wi, bi) = (tape.leaf(x, false), tape.leaf(w, false), tape.leaf(b, false));
    let err = conv2d(&mut tape, xi, wi, bi, 1, 1).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("channels"), "error should name the offending dimension: {msg}");
}

// -- depthwise conv ---------------------------------------------------------

#[test]
fn depthwise_channels_are_independent() {
    let x = probe_tensor(&[1, 3, 6, 6], 20);
    let w = probe_tensor(&[3, 1, 3, 3], 21);
    let b = probe_tensor(&[3], 22);

    let run = |input: &Tensor<f64>| {
        let mut tape = Tape::new();
        let (xi, wi, bi) = (tape.leaf(input.clone(), false), tape.leaf(w.clone(), false), tape.leaf(b.clone(), false));
        let y = depthwise_conv2d(&mut tape, xi, wi, bi, 1).unwrap();
        tape.value(y).clone()
    };

    let base = run(&x);
    let mut perturbed = x.clone();
    perturbed.data_mut()[5] += 1.0; // channel 0 only
    let out = run(&perturbed);
    assert_ne!(&base.data()[0..36], &out.data()[0..36], "channel 0 must change");
    assert_eq!(&base.data()[36..], &out.data()[36..], "channels 1 and 2 must be bit-identical");
}

#[test]
fn depthwise_zero_weight_gives_bias() {
    let x = probe_tensor(&[1, 2, 4, 4], 23);
    let w = Tensor::zeros([2, 1, 3, 3]);
    let b = Tensor::new([2], vec![0.5, -1.25]).unwrap();
    let mut tape = Tape::new();
    let (xi, wi, bi) = (tape.leaf(x, false), tape.leaf(w, false), tape.leaf(b, false));
    let y = depthwise_conv2d(&mut tape, xi, wi, bi, 1).unwrap();
    let out = tape.value(y);
    assert!(out.data()[0..16].iter().all(|&v| v == 0.5));
    assert!(out.data()[16..].iter().all(|&v| v == -1.25));
}

#[test]
fn depthwise_matches_per_channel_oracle() {
    let x = probe_tensor(&[2, 4, 7, 6], 24);
    let w = probe_tensor(&[4, 1, 3, 3], 25);
    let b = probe_tensor(&[4], 26);
    let mut tape = Tape::new();
    let (xi, wi, bi) = (tape.leaf(x.clone(), false), tape.leaf(w.clone(), false), tape.leaf(b.clone(), false));
    let y = depthwise_conv2d(&mut tape, xi, wi, bi, 1).unwrap();

    // oracle: one single-channel full conv per channel
    let (n, c, h, wd) = x.dims4("t").unwrap();
    let mut expected = Tensor::zeros([n, c, h, wd]);
    for ci in 0..c {
        let xc = Tensor::new(
            [n, 1, h, wd],
            (0..n)
                .flat_map(|ni| x.data()[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd].to_vec())
                .collect(),
        )
        .unwrap();
        let wc = Tensor::new([1, 1, 3, 3], w.data()[ci * 9..(ci + 1) * 9].to_vec()).unwrap();
        let bc = Tensor::new([1], vec![b.data()[ci]]).unwrap();
        let yc = conv2d_oracle(&xc, &wc, &bc, 1, 1);
        for ni in 0..n {
            expected.data_mut()[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd]
                .copy_from_slice(&yc.data()[ni * h * wd..(ni + 1) * h * wd]);
        }
    }
    assert!(max_abs_diff(tape.value(y), &expected) <= 1e-6);
}

// -- pooling and softmax ----------------------------------------------------

#[test]
fn gap_constant_plane() {
    let (mut tape, x) = tape_with(Tensor::<f64>::full([1, 2, 4, 4], 0.75));
    let y = global_avg_pool(&mut tape, x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.75, 0.75]);
}

#[test]
fn gap_half_zeros_half_ones() {
    let mut data = vec![0.0; 16];
    data[8..].fill(1.0);
    let (mut tape, x) = tape_with(Tensor::<f64>::new([1, 1, 4, 4], data).unwrap());
    let y = global_avg_pool(&mut tape, x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5]);
}

#[test]
fn gap_matches_summation_oracle() {
    let x = probe_tensor(&[2, 4, 7, 5], 30);
    let (mut tape, xi) = tape_with(x.clone());
    let y = global_avg_pool(&mut tape, xi).unwrap();
    for (plane, &got) in tape.value(y).data().iter().enumerate() {
        let expected: f64 = x.data()[plane * 35..(plane + 1) * 35].iter().sum::<f64>() / 35.0;
        assert!((got - expected).abs() <= 1e-6);
    }
}

#[test]
fn softmax_equal_logits_split_evenly() {
    let (mut tape, x) = tape_with(Tensor::<f64>::full([1, 2], 3.7));
    let y = softmax(&mut tape, x, 1).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn softmax_survives_huge_logits() {
    let (mut tape, x) = tape_with(Tensor::<f64>::new([1, 2], vec![1000.0, 0.0]).unwrap());
    let y = softmax(&mut tape, x, 1).unwrap();
    let out = tape.value(y);
    assert!(out.all_finite());
    assert!((out.data()[0] - 1.0).abs() < 1e-12);
    assert!(out.data()[1] < 1e-12);
}

#[test]
fn softmax_matches_direct_formula_oracle() {
    let x = probe_tensor(&[1, 9], 31);
    let (mut tape, xi) = tape_with(x.clone());
    let y = softmax(&mut tape, xi, 1).unwrap();
    let exps: Vec<f64> = x.data().iter().map(|&v| v.exp()).collect();
    let total: f64 = exps.iter().sum();
    for (&got, &e) in tape.value(y).data().iter().zip(&exps) {
        assert!((got - e / total).abs() <= 1e-9);
    }
}

// -- backward basics --------------------------------------------------------

#[test]
fn backward_of_sum_is_ones() {
    let x = probe_tensor(&[2, 3], 40);
    let mut tape = Tape::new();
    let xi = tape.leaf(x, true);
    let loss = sum_all(&mut tape, xi).unwrap();
    tape.backward(loss).unwrap();
    assert!(tape.grad(xi).unwrap().data().iter().all(|&g| g == 1.0));
}

#[test]
fn backward_of_sum_of_squares_is_2x() {
    let x = probe_tensor(&[2, 5], 41);
    let mut tape = Tape::new();
    let xi = tape.leaf(x.clone(), true);
    let sq = mul(&mut tape, xi, xi).unwrap();
    let loss = sum_all(&mut tape, sq).unwrap();
    tape.backward(loss).unwrap();
    for (&g, &v) in tape.grad(xi).unwrap().data().iter().zip(x.data()) {
        assert!((g - 2.0 * v).abs() <= 1e-12);
    }
}

// -- determinism ------------------------------------------------------------

#[test]
fn forward_composition_is_bit_identical_across_runs() {
    let run = || -> Vec<u32> {
        let x = probe_tensor(&[2, 4, 8, 8], 50).cast::<f32>();
        let w = probe_tensor(&[4, 4, 3, 3], 51).cast::<f32>();
        let b = probe_tensor(&[4], 52).cast::<f32>();
        let mut tape = Tape::new();
        let (xi, wi, bi) = (tape.leaf(x, false), tape.leaf(w, false), tape.leaf(b, false));
        let y = conv2d(&mut tape, xi, wi, bi, 1, 1).unwrap();
        let y = relu(&mut tape, y).unwrap();
        let y = global_avg_pool(&mut tape, y).unwrap();
        let y = softmax(&mut tape, y, 1).unwrap();
        tape.value(y).data().iter().map(|v| v.to_bits()).collect()
    };
    assert_eq!(run(), run());
}

// -- property tests ---------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn concat_then_narrow_is_identity(seed in 0u64..1000, split in 1usize..5) {
        let total = split + 3;
        let x = probe_tensor(&[2, total, 3, 3], seed);
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone(), false);
        let a = narrow(&mut tape, xi, 1, 0, split).unwrap();
        let b = narrow(&mut tape, xi, 1, split, total - split).unwrap();
        let back = concat(&mut tape, &[a, b], 1).unwrap();
        prop_assert_eq!(tape.value(back).data(), x.data());
    }

    #[test]
    fn softmax_rows_are_nonnegative_and_sum_to_one(seed in 0u64..1000) {
        let x = probe_tensor(&[3, 7], seed).map(|v| v * 5.0);
        let mut tape = Tape::new();
        let xi = tape.leaf(x, false);
        let y = softmax(&mut tape, xi, 1).unwrap();
        let out = tape.value(y);
        for row in out.data().chunks(7) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn upsample_then_pool_recovers_input(seed in 0u64..1000) {
        // nearest x2 repeats each value 4 times; pooling averages them back.
        let x = probe_tensor(&[1, 2, 3, 3], seed);
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone(), false);
        let up = upsample_nearest2(&mut tape, xi).unwrap();
        let up_val = tape.value(up);
        for c in 0..2 {
            for h in 0..6 {
                for w in 0..6 {
                    let src = x.data()[(c * 3 + h / 2) * 3 + w / 2];
                    prop_assert_eq!(up_val.data()[(c * 6 + h) * 6 + w], src);
                }
            }
        }
    }
}
