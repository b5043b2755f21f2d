use super::*;
use crate::gradcheck::{self, probe_tensor, DEFAULT_TOLERANCE};
use crate::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;

fn run_vsa(x: &Tensor<f64>, a: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let (xi, ai) = (tape.leaf(x.clone(), false), tape.leaf(a.clone(), false));
    let y = vsa_apply(&mut tape, xi, ai).unwrap();
    tape.value(y).clone()
}

fn run_hsa(x: &Tensor<f64>, a: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let (xi, ai) = (tape.leaf(x.clone(), false), tape.leaf(a.clone(), false));
    let y = hsa_apply(&mut tape, xi, ai).unwrap();
    tape.value(y).clone()
}

/// Quadruple-nested-loop strip aggregation straight from the index formula.
fn strip_oracle(x: &Tensor<f64>, a: &Tensor<f64>, vertical: bool) -> Tensor<f64> {
    let (n, c, h, w) = x.dims4("oracle").unwrap();
    let k = a.shape()[1];
    let half = (k / 2) as isize;
    let mut out = Tensor::zeros([n, c, h, w]);
    for ni in 0..n {
        for ci in 0..c {
            for oh in 0..h {
                for ow in 0..w {
                    let mut acc = 0.0;
                    for tap in 0..k {
                        let (ih, iw) = if vertical {
                            (oh as isize + tap as isize - half, ow as isize)
                        } else {
                            (oh as isize, ow as isize + tap as isize - half)
                        };
                        if ih < 0 || ih >= h as isize || iw < 0 || iw >= w as isize {
                            continue;
                        }
                        acc += a.data()[ni * k + tap]
                            * x.data()[((ni * c + ci) * h + ih as usize) * w + iw as usize];
                    }
                    out.data_mut()[((ni * c + ci) * h + oh) * w + ow] = acc;
                }
            }
        }
    }
    out
}

fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).fold(0.0f64, |m, (&x, &y)| m.max((x - y).abs()))
}

// -- strip_weights ----------------------------------------------------------

#[test]
fn strip_weights_zero_params_give_half() {
    let x = probe_tensor(&[2, 3, 4, 4], 1);
    let mut tape = Tape::new();
    let xi = tape.leaf(x, false);
    let p = StripWeightParams {
        proj_weight: tape.leaf(Tensor::zeros([5, 3]), false),
        proj_bias: tape.leaf(Tensor::zeros([5]), false),
        direction: Direction::Vertical,
    };
    let w = strip_weights(&mut tape, xi, &p).unwrap();
    assert!(tape.value(w).data().iter().all(|&v| v == 0.5), "sigmoid(0) = 0.5 for any input");
}

#[test]
fn strip_weights_saturate_with_large_bias() {
    let x = probe_tensor(&[1, 3, 4, 4], 2);
    let mut tape = Tape::new();
    let xi = tape.leaf(x, false);
    let p = StripWeightParams {
        proj_weight: tape.leaf(Tensor::zeros([3, 3]), false),
        proj_bias: tape.leaf(Tensor::full([3], 20.0), false),
        direction: Direction::Horizontal,
    };
    let w = strip_weights(&mut tape, xi, &p).unwrap();
    assert!(tape.value(w).data().iter().all(|&v| v > 0.9999999));
}

#[test]
fn strip_weights_match_direct_formula_oracle() {
    let x = probe_tensor(&[2, 4, 5, 6], 3);
    let pw = probe_tensor(&[7, 4], 4);
    let pb = probe_tensor(&[7], 5);
    let mut tape = Tape::new();
    let xi = tape.leaf(x.clone(), false);
    let p = StripWeightParams {
        proj_weight: tape.leaf(pw.clone(), false),
        proj_bias: tape.leaf(pb.clone(), false),
        direction: Direction::Vertical,
    };
    let got = strip_weights(&mut tape, xi, &p).unwrap();

    // oracle: pool -> matvec -> sigmoid at 64-bit
    let (n, c, h, w) = x.dims4("t").unwrap();
    for ni in 0..n {
        let mut pooled = vec![0.0f64; c];
        for (ci, pv) in pooled.iter_mut().enumerate() {
            *pv = x.data()[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w].iter().sum::<f64>() / (h * w) as f64;
        }
        for tap in 0..7 {
            let logit: f64 = (0..c).map(|ci| pw.data()[tap * c + ci] * pooled[ci]).sum::<f64>() + pb.data()[tap];
            let expected = 1.0 / (1.0 + (-logit).exp());
            let diff = (tape.value(got).data()[ni * 7 + tap] - expected).abs();
            assert!(diff <= 1e-9, "tap {tap} of item {ni}: diff {diff}");
        }
    }
}

// -- vsa / hsa --------------------------------------------------------------

#[test]
fn vsa_single_tap_scales_input() {
    let x = probe_tensor(&[1, 2, 4, 4], 10);
    let a = Tensor::new([1, 1], vec![0.7]).unwrap();
    let out = run_vsa(&x, &a);
    for (&o, &v) in out.data().iter().zip(x.data()) {
        assert_eq!(o, 0.7 * v);
    }
}

#[test]
fn vsa_border_rows_lose_missing_neighbors() {
    // K=3 all-ones taps: interior rows sum a 3-pixel vertical neighborhood;
    // at h=0 the h=-1 neighbor contributes zero.
    let x = probe_tensor(&[1, 1, 5, 3], 11);
    let a = Tensor::new([1, 3], vec![1.0, 1.0, 1.0]).unwrap();
    let out = run_vsa(&x, &a);
    let at = |h: usize, w: usize| x.data()[h * 3 + w];
    for w in 0..3 {
        assert!((out.data()[3 + w] - (at(0, w) + at(1, w) + at(2, w))).abs() <= 1e-12);
        assert!((out.data()[w] - (at(0, w) + at(1, w))).abs() <= 1e-12);
    }
}

#[test]
fn hsa_single_unit_tap_is_identity() {
    let x = probe_tensor(&[2, 3, 4, 5], 12);
    let a = Tensor::new([2, 1], vec![1.0, 1.0]).unwrap();
    assert_eq!(run_hsa(&x, &a).data(), x.data());
}

#[test]
fn strip_kernels_match_quad_loop_oracle() {
    let x = probe_tensor(&[1, 4, 16, 16], 13);
    let a = probe_tensor(&[1, 5], 14);
    assert!(max_abs_diff(&run_vsa(&x, &a), &strip_oracle(&x, &a, true)) <= 1e-6);
    assert!(max_abs_diff(&run_hsa(&x, &a), &strip_oracle(&x, &a, false)) <= 1e-6);
}

#[test]
fn oversized_strips_clamp_to_the_zero_padded_formula() {
    // K=9 on a 3-row image: taps beyond the image can never land inside, so
    // the clamped kernel must still equal the plain zero-padding formula.
    let x = probe_tensor(&[2, 2, 3, 3], 15);
    let a = probe_tensor(&[2, 9], 16);
    assert!(max_abs_diff(&run_vsa(&x, &a), &strip_oracle(&x, &a, true)) <= 1e-12);
    assert!(max_abs_diff(&run_hsa(&x, &a), &strip_oracle(&x, &a, false)) <= 1e-12);
}

#[test]
fn even_strip_length_is_rejected() {
    let x = probe_tensor(&[1, 1, 4, 4], 17);
    let a = probe_tensor(&[1, 4], 18);
    let mut tape = Tape::new();
    let (xi, ai) = (tape.leaf(x, false), tape.leaf(a, false));
    assert!(vsa_apply(&mut tape, xi, ai).is_err());
}

#[test]
fn hsa_is_vsa_under_transpose_bit_exactly() {
    let x = probe_tensor(&[2, 3, 6, 9], 19).cast::<f32>();
    let a = probe_tensor(&[2, 5], 20).cast::<f32>();

    let mut tape = Tape::new();
    let (xi, ai) = (tape.leaf(x.clone(), false), tape.leaf(a.clone(), false));
    let direct = hsa_apply(&mut tape, xi, ai).unwrap();

    let xt = tape.leaf(x.transpose_hw().unwrap(), false);
    let at = tape.leaf(a, false);
    let via_vsa = vsa_apply(&mut tape, xt, at).unwrap();
    let via_vsa = tape.value(via_vsa).transpose_hw().unwrap();

    let direct_bits: Vec<u32> = tape.value(direct).data().iter().map(|v| v.to_bits()).collect();
    let transposed_bits: Vec<u32> = via_vsa.data().iter().map(|v| v.to_bits()).collect();
    assert_eq!(direct_bits, transposed_bits);
}

// -- fuse ---------------------------------------------------------------------

fn build_fusion(tape: &mut Tape<f64>, c: usize, seed: u64, zero_expand: bool) -> FusionParams<TensorId> {
    let hidden = FusionParams::<TensorId>::hidden_width(c, 4);
    let expand_w = if zero_expand { Tensor::zeros([2 * c, hidden, 1, 1]) } else { probe_tensor(&[2 * c, hidden, 1, 1], seed + 2) };
    let expand_b = if zero_expand { Tensor::zeros([2 * c]) } else { probe_tensor(&[2 * c], seed + 3) };
    FusionParams {
        reduce_weight: tape.leaf(probe_tensor(&[hidden, c, 1, 1], seed), false),
        reduce_bias: tape.leaf(probe_tensor(&[hidden], seed + 1), false),
        expand_weight: tape.leaf(expand_w, false),
        expand_bias: tape.leaf(expand_b, false),
    }
}

#[test]
fn fuse_with_zero_gate_averages_branches() {
    let v = probe_tensor(&[2, 4, 5, 5], 30);
    let h = probe_tensor(&[2, 4, 5, 5], 31);
    let mut tape = Tape::new();
    let (vi, hi) = (tape.leaf(v.clone(), false), tape.leaf(h.clone(), false));
    let p = build_fusion(&mut tape, 4, 32, true);
    let out = fuse(&mut tape, vi, hi, &p).unwrap();
    for ((&o, &a), &b) in tape.value(out).data().iter().zip(v.data()).zip(h.data()) {
        assert!((o - 0.5 * (a + b)).abs() <= 1e-12);
    }
}

#[test]
fn fuse_saturated_logits_select_one_branch() {
    let v = probe_tensor(&[1, 3, 4, 4], 33);
    let h = probe_tensor(&[1, 3, 4, 4], 34);
    let mut tape = Tape::new();
    let (vi, hi) = (tape.leaf(v.clone(), false), tape.leaf(h.clone(), false));
    // zero weights; bias +20 on the v logits, -20 on the h logits
    let hidden = FusionParams::<TensorId>::hidden_width(3, 4);
    let mut bias = vec![-20.0; 6];
    bias[..3].fill(20.0);
    let p = FusionParams {
        reduce_weight: tape.leaf(Tensor::zeros([hidden, 3, 1, 1]), false),
        reduce_bias: tape.leaf(Tensor::zeros([hidden]), false),
        expand_weight: tape.leaf(Tensor::zeros([6, hidden, 1, 1]), false),
        expand_bias: tape.leaf(Tensor::new([6], bias).unwrap(), false),
    };
    let out = fuse(&mut tape, vi, hi, &p).unwrap();
    for (&o, &a) in tape.value(out).data().iter().zip(v.data()) {
        assert!((o - a).abs() <= 1e-8, "saturated gate must pass branch v through");
    }
}

#[test]
fn fuse_matches_step_by_step_oracle() {
    let c = 4;
    let v = probe_tensor(&[2, c, 5, 5], 40);
    let h = probe_tensor(&[2, c, 5, 5], 41);
    let rw = probe_tensor(&[4, c, 1, 1], 42);
    let rb = probe_tensor(&[4], 43);
    let ew = probe_tensor(&[2 * c, 4, 1, 1], 44);
    let eb = probe_tensor(&[2 * c], 45);

    let mut tape = Tape::new();
    let (vi, hi) = (tape.leaf(v.clone(), false), tape.leaf(h.clone(), false));
    let p = FusionParams {
        reduce_weight: tape.leaf(rw.clone(), false),
        reduce_bias: tape.leaf(rb.clone(), false),
        expand_weight: tape.leaf(ew.clone(), false),
        expand_bias: tape.leaf(eb.clone(), false),
    };
    let got = fuse(&mut tape, vi, hi, &p).unwrap();

    // step-by-step 64-bit composition oracle
    let (n, _, hh, ww) = v.dims4("t").unwrap();
    let hw = (hh * ww) as f64;
    for ni in 0..n {
        // pooled branch sum
        let mut pooled = vec![0.0f64; c];
        for (ci, pv) in pooled.iter_mut().enumerate() {
            let base = (ni * c + ci) * hh * ww;
            *pv = (0..hh * ww).map(|s| v.data()[base + s] + h.data()[base + s]).sum::<f64>() / hw;
        }
        // reduce 1x1 conv + relu
        let mut hid = vec![0.0f64; 4];
        for (j, hv) in hid.iter_mut().enumerate() {
            let z: f64 = (0..c).map(|ci| rw.data()[j * c + ci] * pooled[ci]).sum::<f64>() + rb.data()[j];
            *hv = z.max(0.0);
        }
        // expand to [2, C] logits, softmax over the branch axis
        let mut logits = vec![0.0f64; 2 * c];
        for (j, lv) in logits.iter_mut().enumerate() {
            *lv = (0..4).map(|q| ew.data()[j * 4 + q] * hid[q]).sum::<f64>() + eb.data()[j];
        }
        for ci in 0..c {
            let (lv, lh) = (logits[ci], logits[c + ci]);
            let m = lv.max(lh);
            let (evx, ehx) = ((lv - m).exp(), (lh - m).exp());
            let wv = evx / (evx + ehx);
            let wh = ehx / (evx + ehx);
            for s in 0..hh * ww {
                let idx = (ni * c + ci) * hh * ww + s;
                let expected = wv * v.data()[idx] + wh * h.data()[idx];
                assert!((tape.value(got).data()[idx] - expected).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn fusion_weights_sum_to_one() {
    // With v = h = 1 the output is wv + wh per channel, which must be 1.
    let mut tape = Tape::new();
    let ones = Tensor::<f64>::ones([2, 6, 4, 4]);
    let (vi, hi) = (tape.leaf(ones.clone(), false), tape.leaf(ones, false));
    let p = build_fusion(&mut tape, 6, 50, false);
    let out = fuse(&mut tape, vi, hi, &p).unwrap();
    for &o in tape.value(out).data() {
        assert!((o - 1.0).abs() <= 1e-6);
    }
}

// -- pcsa / pcsam / pcsab -----------------------------------------------------

struct TestInit {
    rng: rand_chacha::ChaCha8Rng,
}

impl TestInit {
    fn new(seed: u64) -> Self {
        TestInit { rng: rand_chacha::ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl ParamVisitor<Tensor<f64>> for TestInit {
    fn param(&mut self, _name: &str, shape: &[usize], init: Init) -> crate::Result<Tensor<f64>> {
        Ok(match init {
            Init::KaimingUniform { fan_in } => {
                let bound = (6.0 / fan_in as f64).sqrt();
                Tensor::from_rng_uniform(shape.to_vec(), -bound, bound, &mut self.rng)
            }
            Init::Zero => Tensor::zeros(shape.to_vec()),
            Init::One => Tensor::ones(shape.to_vec()),
        })
    }
}

struct TapeInit<'a> {
    tape: &'a mut Tape<f64>,
    inner: TestInit,
}

impl ParamVisitor<TensorId> for TapeInit<'_> {
    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> crate::Result<TensorId> {
        let t = self.inner.param(name, shape, init)?;
        Ok(self.tape.leaf(t, false))
    }
}

fn test_group(k: usize, dw: usize) -> StripGroupConfig {
    StripGroupConfig { k1: k, k2: k, dw_kernel: dw }
}

#[test]
fn pcsa_preserves_shape() {
    let mut tape = Tape::new();
    let x = tape.leaf(probe_tensor(&[2, 4, 7, 9], 60), false);
    let p = PcsaParams::build(
        &mut TapeInit { tape: &mut tape, inner: TestInit::new(61) },
        "t",
        4,
        &test_group(5, 3),
        4,
    )
    .unwrap();
    let y = pcsa_forward(&mut tape, x, &p).unwrap();
    assert_eq!(tape.value(y).shape(), &[2, 4, 7, 9]);
}

#[test]
fn pcsa_degenerate_params_match_hand_composition() {
    // identity depthwise kernel, zero strip projections (all taps 0.5), zero
    // fusion gate (weights 0.5 each): output = 0.5*(vsa_u + hsa_u) where both
    // use constant 0.5 taps.
    let c = 2;
    let k = 3;
    let x = probe_tensor(&[1, c, 6, 6], 62);
    let mut tape = Tape::new();
    let xi = tape.leaf(x.clone(), false);

    let mut dw = Tensor::zeros([c, 1, 3, 3]);
    for ci in 0..c {
        dw.data_mut()[ci * 9 + 4] = 1.0; // center tap
    }
    let hidden = FusionParams::<TensorId>::hidden_width(c, 4);
    let p = PcsaParams {
        dw_weight: tape.leaf(dw, false),
        dw_bias: tape.leaf(Tensor::zeros([c]), false),
        vsa: StripWeightParams {
            proj_weight: tape.leaf(Tensor::zeros([k, c]), false),
            proj_bias: tape.leaf(Tensor::zeros([k]), false),
            direction: Direction::Vertical,
        },
        hsa: StripWeightParams {
            proj_weight: tape.leaf(Tensor::zeros([k, c]), false),
            proj_bias: tape.leaf(Tensor::zeros([k]), false),
            direction: Direction::Horizontal,
        },
        fusion: FusionParams {
            reduce_weight: tape.leaf(Tensor::zeros([hidden, c, 1, 1]), false),
            reduce_bias: tape.leaf(Tensor::zeros([hidden]), false),
            expand_weight: tape.leaf(Tensor::zeros([2 * c, hidden, 1, 1]), false),
            expand_bias: tape.leaf(Tensor::zeros([2 * c]), false),
        },
    };
    let got = pcsa_forward(&mut tape, xi, &p).unwrap();

    let taps = Tensor::new([1, k], vec![0.5; k]).unwrap();
    let expected_v = strip_oracle(&x, &taps, true);
    let expected_h = strip_oracle(&x, &taps, false);
    for i in 0..x.numel() {
        let expected = 0.5 * (expected_v.data()[i] + expected_h.data()[i]);
        assert!((tape.value(got).data()[i] - expected).abs() <= 1e-9);
    }
}

#[test]
fn pcsa_single_thread_and_threaded_runs_are_bit_identical() {
    let run = || -> Vec<u64> {
        let mut tape = Tape::new();
        // big enough to cross the parallelism threshold
        let x = tape.leaf(probe_tensor(&[1, 8, 96, 96], 63), false);
        let p = PcsaParams::build(
            &mut TapeInit { tape: &mut tape, inner: TestInit::new(64) },
            "t",
            8,
            &test_group(7, 3),
            4,
        )
        .unwrap();
        let y = pcsa_forward(&mut tape, x, &p).unwrap();
        tape.value(y).data().iter().map(|v| v.to_bits()).collect()
    };
    let single = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(run);
    assert_eq!(single, run(), "branch kernels must not depend on thread scheduling");
}

#[test]
fn pcsam_splits_evenly_and_preserves_shape() {
    let cfg = PcsamConfig::new(8, test_group(3, 3), test_group(5, 5), 4).unwrap();
    let mut tape = Tape::new();
    let x = tape.leaf(probe_tensor(&[1, 8, 6, 6], 70), false);
    let mut init = TapeInit { tape: &mut tape, inner: TestInit::new(71) };
    let params = (
        PcsaParams::build(&mut init, "g1", 4, &cfg.group1, 4).unwrap(),
        PcsaParams::build(&mut init, "g2", 4, &cfg.group2, 4).unwrap(),
    );
    let y = pcsam_forward(&mut tape, x, &cfg, &params).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 8, 6, 6]);
}

#[test]
fn pcsam_groups_are_independent() {
    let cfg = PcsamConfig::new(8, test_group(3, 3), test_group(5, 5), 4).unwrap();
    let x = probe_tensor(&[1, 8, 6, 6], 72);
    let run = |input: &Tensor<f64>| -> (Vec<u64>, Vec<u64>) {
        let mut tape = Tape::new();
        let xi = tape.leaf(input.clone(), false);
        let mut init = TapeInit { tape: &mut tape, inner: TestInit::new(73) };
        let params = (
            PcsaParams::build(&mut init, "g1", 4, &cfg.group1, 4).unwrap(),
            PcsaParams::build(&mut init, "g2", 4, &cfg.group2, 4).unwrap(),
        );
        let y = pcsam_forward(&mut tape, xi, &cfg, &params).unwrap();
        let data = tape.value(y).data();
        (
            data[..4 * 36].iter().map(|v| v.to_bits()).collect(),
            data[4 * 36..].iter().map(|v| v.to_bits()).collect(),
        )
    };
    let (lo_base, _hi_base) = run(&x);
    let mut perturbed = x.clone();
    perturbed.data_mut()[4 * 36 + 7] += 0.25; // group-2 channel
    let (lo_pert, hi_pert) = run(&perturbed);
    assert_eq!(lo_base, lo_pert, "group-1 outputs must be bit-identical");
    let (_lo, hi_base) = run(&x);
    assert_ne!(hi_base, hi_pert, "group-2 outputs must change");
}

#[test]
fn pcsam_equals_manual_split_compose_concat() {
    let cfg = PcsamConfig::new(8, test_group(3, 3), test_group(5, 5), 4).unwrap();
    let x = probe_tensor(&[2, 8, 5, 5], 74);

    let mut tape = Tape::new();
    let xi = tape.leaf(x.clone(), false);
    let mut init = TapeInit { tape: &mut tape, inner: TestInit::new(75) };
    let params = (
        PcsaParams::build(&mut init, "g1", 4, &cfg.group1, 4).unwrap(),
        PcsaParams::build(&mut init, "g2", 4, &cfg.group2, 4).unwrap(),
    );
    let fused = pcsam_forward(&mut tape, xi, &cfg, &params).unwrap();

    let lo = crate::ops::narrow(&mut tape, xi, 1, 0, 4).unwrap();
    let hi = crate::ops::narrow(&mut tape, xi, 1, 4, 4).unwrap();
    let lo_out = pcsa_forward(&mut tape, lo, &params.0).unwrap();
    let hi_out = pcsa_forward(&mut tape, hi, &params.1).unwrap();
    let manual = crate::ops::concat(&mut tape, &[lo_out, hi_out], 1).unwrap();

    let fused_bits: Vec<u64> = tape.value(fused).data().iter().map(|v| v.to_bits()).collect();
    let manual_bits: Vec<u64> = tape.value(manual).data().iter().map(|v| v.to_bits()).collect();
    assert_eq!(fused_bits, manual_bits);
}

#[test]
fn pcsam_rejects_odd_channel_count() {
    let err = PcsamConfig::new(7, test_group(3, 3), test_group(5, 5), 4).unwrap_err();
    assert!(err.to_string().contains("even"));
}

fn pcsab_fixture(tape: &mut Tape<f64>, seed: u64) -> (PcsamConfig, PcsabParams<TensorId>) {
    let cfg = PcsamConfig::new(8, test_group(3, 3), test_group(5, 5), 4).unwrap();
    let params = PcsabParams::build(&mut TapeInit { tape, inner: TestInit::new(seed) }, "blk", &cfg).unwrap();
    (cfg, params)
}

#[test]
fn pcsab_zero_residual_scales_is_identity() {
    let x = probe_tensor(&[1, 8, 6, 6], 80);
    let mut tape = Tape::new();
    let xi = tape.leaf(x.clone(), false);
    let (cfg, mut params) = pcsab_fixture(&mut tape, 81);
    params.alpha1 = tape.leaf(Tensor::zeros([8]), false);
    params.alpha2 = tape.leaf(Tensor::zeros([8]), false);
    let y = pcsab_forward(&mut tape, xi, &cfg, &params).unwrap();
    assert_eq!(tape.value(y).data(), x.data(), "alpha = 0 must reduce the block to identity");
}

#[test]
fn pcsab_preserves_arbitrary_shapes() {
    for (h, w) in [(1, 1), (3, 8), (12, 12)] {
        let mut tape = Tape::new();
        let xi = tape.leaf(probe_tensor(&[1, 8, h, w], 82), false);
        let (cfg, params) = pcsab_fixture(&mut tape, 83);
        let y = pcsab_forward(&mut tape, xi, &cfg, &params).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 8, h, w]);
    }
}

#[test]
fn pcsab_gradients_match_finite_differences() {
    // end-to-end gradient of sum(PCSAB(x)) wrt all params and the input
    let cfg = PcsamConfig::new(8, test_group(3, 3), test_group(5, 5), 4).unwrap();
    let mut collect = TestInit::new(90);
    struct Collector<'a> {
        inner: &'a mut TestInit,
        out: Vec<Tensor<f64>>,
    }
    impl ParamVisitor<Tensor<f64>> for Collector<'_> {
        fn param(&mut self, name: &str, shape: &[usize], init: Init) -> crate::Result<Tensor<f64>> {
            let t = self.inner.param(name, shape, init)?;
            self.out.push(t.clone());
            Ok(t)
        }
    }
    let mut collector = Collector { inner: &mut collect, out: Vec::new() };
    PcsabParams::build(&mut collector, "blk", &cfg).unwrap();
    let mut inputs = collector.out;
    inputs.push(probe_tensor(&[1, 8, 12, 12], 91));

    let cfg_ref = &cfg;
    let result = gradcheck::check_gradients("pcsab", &inputs, 1e-5, DEFAULT_TOLERANCE, move |tape, ids| {
        let mut seq = ids.iter().copied();
        struct Seq<'a, I: Iterator<Item = TensorId>> {
            it: &'a mut I,
        }
        impl<I: Iterator<Item = TensorId>> ParamVisitor<TensorId> for Seq<'_, I> {
            fn param(&mut self, _n: &str, _s: &[usize], _i: Init) -> crate::Result<TensorId> {
                Ok(self.it.next().expect("enough ids"))
            }
        }
        let params = PcsabParams::build(&mut Seq { it: &mut seq }, "blk", cfg_ref)?;
        let x = seq.next().expect("input id");
        let y = pcsab_forward(tape, x, cfg_ref, &params)?;
        crate::ops::sum_all(tape, y)
    })
    .unwrap();
    assert!(result.passed, "{}", result.format_line());
}

#[test]
fn attention_gradcheck_suite_passes() {
    for result in attention_suite(7, 1e-5, DEFAULT_TOLERANCE).unwrap() {
        assert!(result.passed, "{}", result.format_line());
    }
}

// -- properties ---------------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn strip_apply_is_linear_in_x(seed in 0u64..500, alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
        let x = probe_tensor(&[1, 2, 6, 6], seed).cast::<f32>();
        let y = probe_tensor(&[1, 2, 6, 6], seed + 1).cast::<f32>();
        let a = probe_tensor(&[1, 3], seed + 2).cast::<f32>();
        let (alpha, beta) = (alpha as f32, beta as f32);

        let run = |input: &Tensor<f32>| {
            let mut tape = Tape::new();
            let (xi, ai) = (tape.leaf(input.clone(), false), tape.leaf(a.clone(), false));
            let out = vsa_apply(&mut tape, xi, ai).unwrap();
            tape.value(out).clone()
        };
        let mut combined = x.clone();
        for (c, (&xv, &yv)) in combined.data_mut().iter_mut().zip(x.data().iter().zip(y.data())) {
            *c = alpha * xv + beta * yv;
        }
        let lhs = run(&combined);
        let (rx, ry) = (run(&x), run(&y));
        for ((&l, &gx), &gy) in lhs.data().iter().zip(rx.data()).zip(ry.data()) {
            prop_assert!((l - (alpha * gx + beta * gy)).abs() <= 1e-5);
        }
    }
}

#[test]
fn pcsab_per_group_gradcheck_passes() {
    let results = pcsab_gradcheck(5, 1e-6, DEFAULT_TOLERANCE).unwrap();
    assert!(results.len() > 10, "one result per parameter group plus the input");
    for r in &results {
        assert!(r.passed, "{}", r.format_line());
    }
}
