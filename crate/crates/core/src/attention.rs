//! Parallel cross strip attention.
//!
//! The building blocks, bottom up:
//!
//! * [`strip_weights`] — pool the input, project to K logits, sigmoid: one
//!   shared weight per strip tap.
//! * [`vsa_apply`] / [`hsa_apply`] — aggregate a length-K vertical or
//!   horizontal strip around every pixel with those weights. O(N*C*H*W*K),
//!   never quadratic in the pixel count.
//! * [`fuse`] — softmax-gated per-channel blend of the two branch maps.
//! * [`pcsa_forward`] — depthwise conv, both strip branches, fusion.
//! * [`pcsam_forward`] — two channel groups with different strip lengths and
//!   depthwise kernel sizes, concatenated back.
//! * [`pcsab_forward`] — the residual block: norm -> PCSAM -> scaled skip,
//!   then norm -> conv FFN -> scaled skip.
//!
//! Branch aggregations are independent; kernels parallelize over (n, c)
//! planes with a single writer per plane, so threaded and sequential runs
//! are bit-identical.

use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tape::{Tape, TapeOp, TensorId};
use crate::tensor::Tensor;
use rayon::prelude::*;

// ---------------------------------------------------------------------------
// Parameter containers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Vertical,
    Horizontal,
}

/// How a parameter tensor is initialized.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in `[-b, b]` with `b = sqrt(6 / fan_in)`.
    KaimingUniform { fan_in: usize },
    Zero,
    One,
}

/// Supplies parameter payloads by hierarchical name. Implemented once over
/// owned tensors (fresh initialization) and once over tape ids (forward
/// passes), so the name/shape/init schema lives in exactly one place: the
/// `build` constructors below.
pub trait ParamVisitor<P> {
    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<P>;
}

/// Pooled-descriptor projection producing the K strip weights for one
/// direction. Vertical and horizontal branches hold distinct instances.
#[derive(Debug, Clone)]
pub struct StripWeightParams<P> {
    /// `[K, C]` map from pooled channel descriptor to K logits.
    pub proj_weight: P,
    /// `[K]`
    pub proj_bias: P,
    pub direction: Direction,
}

impl<P> StripWeightParams<P> {
    pub fn build(
        v: &mut impl ParamVisitor<P>,
        prefix: &str,
        k: usize,
        c: usize,
        direction: Direction,
    ) -> Result<Self> {
        if k == 0 || k % 2 == 0 {
            return Err(Error::invalid(format!("strip length must be odd and >= 1, got {k}")));
        }
        Ok(StripWeightParams {
            proj_weight: v.param(&format!("{prefix}.proj_weight"), &[k, c], Init::KaimingUniform { fan_in: c })?,
            proj_bias: v.param(&format!("{prefix}.proj_bias"), &[k], Init::Zero)?,
            direction,
        })
    }
}

/// The squeeze-style gate that blends the two strip branches.
#[derive(Debug, Clone)]
pub struct FusionParams<P> {
    /// `[Ch, C, 1, 1]` with `Ch = max(C/r, 4)`.
    pub reduce_weight: P,
    pub reduce_bias: P,
    /// `[2C, Ch, 1, 1]`: one logit per branch per channel.
    pub expand_weight: P,
    pub expand_bias: P,
}

impl<P> FusionParams<P> {
    pub fn hidden_width(c: usize, reduction: usize) -> usize {
        (c / reduction).max(4)
    }

    pub fn build(v: &mut impl ParamVisitor<P>, prefix: &str, c: usize, reduction: usize) -> Result<Self> {
        let hidden = Self::hidden_width(c, reduction);
        Ok(FusionParams {
            reduce_weight: v.param(
                &format!("{prefix}.reduce.weight"),
                &[hidden, c, 1, 1],
                Init::KaimingUniform { fan_in: c },
            )?,
            reduce_bias: v.param(&format!("{prefix}.reduce.bias"), &[hidden], Init::Zero)?,
            expand_weight: v.param(
                &format!("{prefix}.expand.weight"),
                &[2 * c, hidden, 1, 1],
                Init::KaimingUniform { fan_in: hidden },
            )?,
            expand_bias: v.param(&format!("{prefix}.expand.bias"), &[2 * c], Init::Zero)?,
        })
    }
}

/// Strip lengths and depthwise kernel size for one channel group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StripGroupConfig {
    /// Vertical strip length.
    pub k1: usize,
    /// Horizontal strip length.
    pub k2: usize,
    /// Depthwise kernel extent (3 for group 1, 5 for group 2).
    pub dw_kernel: usize,
}

impl StripGroupConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, k) in [("k1", self.k1), ("k2", self.k2), ("dw_kernel", self.dw_kernel)] {
            if k == 0 || k % 2 == 0 {
                return Err(Error::invalid(format!("{name} must be odd and >= 1, got {k}")));
            }
        }
        Ok(())
    }
}

/// One full PCSA instance: depthwise conv, two strip branches, fusion gate.
#[derive(Debug, Clone)]
pub struct PcsaParams<P> {
    /// `[C, 1, k, k]` depthwise kernel shared by both branches.
    pub dw_weight: P,
    pub dw_bias: P,
    pub vsa: StripWeightParams<P>,
    pub hsa: StripWeightParams<P>,
    pub fusion: FusionParams<P>,
}

impl<P> PcsaParams<P> {
    pub fn build(
        v: &mut impl ParamVisitor<P>,
        prefix: &str,
        c: usize,
        group: &StripGroupConfig,
        reduction: usize,
    ) -> Result<Self> {
        group.validate()?;
        let k = group.dw_kernel;
        Ok(PcsaParams {
            dw_weight: v.param(
                &format!("{prefix}.dw.weight"),
                &[c, 1, k, k],
                Init::KaimingUniform { fan_in: k * k },
            )?,
            dw_bias: v.param(&format!("{prefix}.dw.bias"), &[c], Init::Zero)?,
            vsa: StripWeightParams::build(v, &format!("{prefix}.vsa"), group.k1, c, Direction::Vertical)?,
            hsa: StripWeightParams::build(v, &format!("{prefix}.hsa"), group.k2, c, Direction::Horizontal)?,
            fusion: FusionParams::build(v, &format!("{prefix}.fusion"), c, reduction)?,
        })
    }
}

/// Channel-split multi-scale configuration: group 1 covers channels
/// `[0, C/2)` with short strips and a 3x3 depthwise kernel, group 2 covers
/// `[C/2, C)` with longer strips and a 5x5 kernel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PcsamConfig {
    pub channels: usize,
    pub group1: StripGroupConfig,
    pub group2: StripGroupConfig,
    pub fusion_reduction: usize,
}

impl PcsamConfig {
    pub fn new(channels: usize, group1: StripGroupConfig, group2: StripGroupConfig, fusion_reduction: usize) -> Result<Self> {
        let cfg = PcsamConfig { channels, group1, group2, fusion_reduction };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels % 2 != 0 {
            return Err(Error::invalid(format!("channel count must be even, got {}", self.channels)));
        }
        self.group1.validate()?;
        self.group2.validate()?;
        if self.fusion_reduction == 0 {
            return Err(Error::invalid("fusion reduction must be >= 1"));
        }
        Ok(())
    }
}

/// The residual block around PCSAM.
#[derive(Debug, Clone)]
pub struct PcsabParams<P> {
    pub norm1_gamma: P,
    pub norm1_beta: P,
    pub pcsam: (PcsaParams<P>, PcsaParams<P>),
    /// `[C]` residual scale on the attention branch.
    pub alpha1: P,
    pub norm2_gamma: P,
    pub norm2_beta: P,
    /// `[2C, C, 1, 1]` FFN expansion.
    pub ffn_w1: P,
    pub ffn_b1: P,
    /// `[C, 2C, 1, 1]` FFN projection back.
    pub ffn_w2: P,
    pub ffn_b2: P,
    /// `[C]` residual scale on the FFN branch.
    pub alpha2: P,
}

impl<P> PcsabParams<P> {
    pub fn build(v: &mut impl ParamVisitor<P>, prefix: &str, cfg: &PcsamConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let half = c / 2;
        Ok(PcsabParams {
            norm1_gamma: v.param(&format!("{prefix}.norm1.gamma"), &[c], Init::One)?,
            norm1_beta: v.param(&format!("{prefix}.norm1.beta"), &[c], Init::Zero)?,
            pcsam: (
                PcsaParams::build(v, &format!("{prefix}.pcsam.g1"), half, &cfg.group1, cfg.fusion_reduction)?,
                PcsaParams::build(v, &format!("{prefix}.pcsam.g2"), half, &cfg.group2, cfg.fusion_reduction)?,
            ),
            alpha1: v.param(&format!("{prefix}.alpha1"), &[c], Init::One)?,
            norm2_gamma: v.param(&format!("{prefix}.norm2.gamma"), &[c], Init::One)?,
            norm2_beta: v.param(&format!("{prefix}.norm2.beta"), &[c], Init::Zero)?,
            ffn_w1: v.param(&format!("{prefix}.ffn.conv1.weight"), &[2 * c, c, 1, 1], Init::KaimingUniform { fan_in: c })?,
            ffn_b1: v.param(&format!("{prefix}.ffn.conv1.bias"), &[2 * c], Init::Zero)?,
            ffn_w2: v.param(&format!("{prefix}.ffn.conv2.weight"), &[c, 2 * c, 1, 1], Init::KaimingUniform { fan_in: 2 * c })?,
            ffn_b2: v.param(&format!("{prefix}.ffn.conv2.bias"), &[c], Init::Zero)?,
            alpha2: v.param(&format!("{prefix}.alpha2"), &[c], Init::One)?,
        })
    }
}

// ---------------------------------------------------------------------------
// Strip weight generation
// ---------------------------------------------------------------------------

/// Sigmoid-squashed strip weights: `sigmoid(proj_weight * GAP(x) + bias)`
/// per batch item, shape `[N, K]`. The weights are shared across channels
/// and spatial positions; channel adaptivity lives in the projection.
pub fn strip_weights<S: Scalar>(tape: &mut Tape<S>, x: TensorId, p: &StripWeightParams<TensorId>) -> Result<TensorId> {
    let (n, c, _, _) = tape.value(x).dims4("strip_weights")?;
    let wc = tape.value(p.proj_weight).shape().get(1).copied().unwrap_or(0);
    if wc != c {
        return Err(Error::shape(
            "strip_weights",
            format!("input has {c} channels, projection expects {wc}"),
        ));
    }
    let pooled = ops::global_avg_pool(tape, x)?;
    let flat = ops::reshape(tape, pooled, [n, c])?;
    let logits = ops::linear(tape, flat, p.proj_weight, p.proj_bias)?;
    ops::sigmoid(tape, logits)
}

// ---------------------------------------------------------------------------
// Strip aggregation kernels
// ---------------------------------------------------------------------------

/// Tap offsets that can ever land inside an extent of `dim`; taps beyond
/// `2*dim - 1` never contribute through zero padding, so they are skipped.
/// Returns the inclusive live tap range.
fn live_taps(k: usize, dim: usize, op: &'static str) -> Result<(usize, usize)> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::invalid(format!("{op}: strip length must be odd and >= 1, got {k}")));
    }
    let half = k / 2;
    if k > 2 * dim - 1 {
        log::warn!("{op}: strip length {k} exceeds 2*{dim}-1; clamping to the valid tap range");
    }
    let lo = half.saturating_sub(dim - 1);
    let hi = (half + (dim - 1)).min(k - 1);
    Ok((lo, hi))
}

fn strip_shapes<S: Scalar>(x: &Tensor<S>, a: &Tensor<S>, op: &'static str) -> Result<(usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4(op)?;
    let k = match a.shape()[..] {
        [an, k] if an == n => k,
        _ => {
            return Err(Error::shape(
                op,
                format!("weights shape {:?}, expected [{n}, K]", a.shape()),
            ))
        }
    };
    Ok((n, c, h, w, k))
}

/// out[n,c,h,w] = sum_k a[n,k] * x[n,c,h - K/2 + k, w], zero outside.
fn vsa_kernel<S: Scalar>(x: &Tensor<S>, a: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c, h, w, k) = strip_shapes(x, a, "vsa_apply")?;
    let (tap_lo, tap_hi) = live_taps(k, h, "vsa_apply")?;
    let half = (k / 2) as isize;
    let xd = x.data();
    let ad = a.data();
    let mut out = Tensor::zeros([n, c, h, w]);
    let work = n * c * h * w * (tap_hi - tap_lo + 1);
    ops::for_each_plane(out.data_mut(), h * w, work, |plane, out_plane| {
        let ni = plane / c;
        let x_plane = &xd[plane * h * w..(plane + 1) * h * w];
        let taps = &ad[ni * k..(ni + 1) * k];
        for oh in 0..h {
            let out_row = &mut out_plane[oh * w..(oh + 1) * w];
            for (tap, &av) in taps.iter().enumerate().take(tap_hi + 1).skip(tap_lo) {
                let ih = oh as isize + tap as isize - half;
                if ih < 0 || ih >= h as isize {
                    continue;
                }
                let x_row = &x_plane[ih as usize * w..(ih as usize + 1) * w];
                for (o, &xv) in out_row.iter_mut().zip(x_row) {
                    *o = *o + av * xv;
                }
            }
        }
    });
    Ok(out)
}

/// out[n,c,h,w] = sum_k a[n,k] * x[n,c,h,w - K/2 + k], zero outside.
fn hsa_kernel<S: Scalar>(x: &Tensor<S>, a: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c, h, w, k) = strip_shapes(x, a, "hsa_apply")?;
    let (tap_lo, tap_hi) = live_taps(k, w, "hsa_apply")?;
    let half = (k / 2) as isize;
    let xd = x.data();
    let ad = a.data();
    let mut out = Tensor::zeros([n, c, h, w]);
    let work = n * c * h * w * (tap_hi - tap_lo + 1);
    ops::for_each_plane(out.data_mut(), h * w, work, |plane, out_plane| {
        let ni = plane / c;
        let x_plane = &xd[plane * h * w..(plane + 1) * h * w];
        let taps = &ad[ni * k..(ni + 1) * k];
        for oh in 0..h {
            let x_row = &x_plane[oh * w..(oh + 1) * w];
            let out_row = &mut out_plane[oh * w..(oh + 1) * w];
            for (tap, &av) in taps.iter().enumerate().take(tap_hi + 1).skip(tap_lo) {
                let off = tap as isize - half;
                let dst_lo = (-off).max(0) as usize;
                let dst_hi = (w as isize - off).min(w as isize) as usize;
                if dst_lo >= dst_hi {
                    continue;
                }
                let src = &x_row[(dst_lo as isize + off) as usize..(dst_hi as isize + off) as usize];
                for (o, &xv) in out_row[dst_lo..dst_hi].iter_mut().zip(src) {
                    *o = *o + av * xv;
                }
            }
        }
    });
    Ok(out)
}

/// d(loss)/d(a)[n,k] = sum_{c,h,w} g[n,c,h,w] * x[n, c, shifted by tap k].
/// `vertical` picks which spatial axis the strip runs along.
fn strip_weight_grad<S: Scalar>(x: &Tensor<S>, g: &Tensor<S>, k: usize, vertical: bool) -> Tensor<S> {
    let (n, c, h, w) = x.dims4("strip_grad").expect("checked in forward");
    let dim = if vertical { h } else { w };
    let (tap_lo, tap_hi) = live_taps(k, dim, if vertical { "vsa_apply" } else { "hsa_apply" }).expect("checked in forward");
    let half = (k / 2) as isize;
    let xd = x.data();
    let gd = g.data();

    // One [K] partial per (n, c) plane, reduced in plane order afterwards so
    // the result does not depend on scheduling.
    let plane_partials: Vec<Vec<S>> = (0..n * c)
        .into_par_iter()
        .map(|plane| {
            let x_plane = &xd[plane * h * w..(plane + 1) * h * w];
            let g_plane = &gd[plane * h * w..(plane + 1) * h * w];
            let mut partial = vec![S::ZERO; k];
            for (tap, p) in partial.iter_mut().enumerate().take(tap_hi + 1).skip(tap_lo) {
                let off = tap as isize - half;
                let mut acc = S::ZERO;
                if vertical {
                    for oh in 0..h {
                        let ih = oh as isize + off;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let g_row = &g_plane[oh * w..(oh + 1) * w];
                        let x_row = &x_plane[ih as usize * w..(ih as usize + 1) * w];
                        for (&gv, &xv) in g_row.iter().zip(x_row) {
                            acc = acc + gv * xv;
                        }
                    }
                } else {
                    for oh in 0..h {
                        let g_row = &g_plane[oh * w..(oh + 1) * w];
                        let x_row = &x_plane[oh * w..(oh + 1) * w];
                        let dst_lo = (-off).max(0) as usize;
                        let dst_hi = (w as isize - off).min(w as isize) as usize;
                        if dst_lo >= dst_hi {
                            continue;
                        }
                        let src = &x_row[(dst_lo as isize + off) as usize..(dst_hi as isize + off) as usize];
                        for (&gv, &xv) in g_row[dst_lo..dst_hi].iter().zip(src) {
                            acc = acc + gv * xv;
                        }
                    }
                }
                *p = acc;
            }
            partial
        })
        .collect();

    let mut da = Tensor::zeros([n, k]);
    let da_data = da.data_mut();
    for (plane, partial) in plane_partials.iter().enumerate() {
        let ni = plane / c;
        for (tap, &v) in partial.iter().enumerate() {
            da_data[ni * k + tap] += v;
        }
    }
    da
}

fn reversed_taps<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let mut rev = Tensor::zeros([n, k]);
    let rd = rev.data_mut();
    let ad = a.data();
    for ni in 0..n {
        for tap in 0..k {
            rd[ni * k + tap] = ad[ni * k + (k - 1 - tap)];
        }
    }
    rev
}

struct StripApplyOp {
    vertical: bool,
}

impl<S: Scalar> TapeOp<S> for StripApplyOp {
    fn name(&self) -> &'static str {
        if self.vertical {
            "vsa_apply"
        } else {
            "hsa_apply"
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        g: &Tensor<S>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<S>>> {
        let (x, a) = (inputs[0], inputs[1]);
        let k = a.shape()[1];
        // For odd K the adjoint of the strip sum is the same aggregation
        // with the tap order reversed.
        let dx = needs[0].then(|| {
            let rev = reversed_taps(a);
            if self.vertical {
                vsa_kernel(g, &rev).expect("shapes already validated")
            } else {
                hsa_kernel(g, &rev).expect("shapes already validated")
            }
        });
        let da = needs[1].then(|| strip_weight_grad(x, g, k, self.vertical));
        vec![dx, da]
    }
}

/// Vertical strip aggregation: each output pixel is the weighted sum of the
/// K pixels stacked above and below it, out-of-range rows contributing zero.
pub fn vsa_apply<S: Scalar>(tape: &mut Tape<S>, x: TensorId, a: TensorId) -> Result<TensorId> {
    let out = vsa_kernel(tape.value(x), tape.value(a))?;
    tape.record(Box::new(StripApplyOp { vertical: true }), &[x, a], out)
}

/// Horizontal mirror of [`vsa_apply`], aggregating along the width axis.
pub fn hsa_apply<S: Scalar>(tape: &mut Tape<S>, x: TensorId, a: TensorId) -> Result<TensorId> {
    let out = hsa_kernel(tape.value(x), tape.value(a))?;
    tape.record(Box::new(StripApplyOp { vertical: false }), &[x, a], out)
}

/// Tape-free vertical aggregation on plain tensors; the inference/benchmark
/// entry point for the raw kernel.
pub fn vsa_aggregate<S: Scalar>(x: &Tensor<S>, a: &Tensor<S>) -> Result<Tensor<S>> {
    vsa_kernel(x, a)
}

/// Tape-free horizontal aggregation on plain tensors.
pub fn hsa_aggregate<S: Scalar>(x: &Tensor<S>, a: &Tensor<S>) -> Result<Tensor<S>> {
    hsa_kernel(x, a)
}

// ---------------------------------------------------------------------------
// Fusion and the composed modules
// ---------------------------------------------------------------------------

/// Blend the two branch maps with per-channel softmax weights:
/// pool the branch sum, squeeze-expand to `[N, 2, C]` logits, softmax over
/// the branch axis, then `wv*v + wh*h` broadcast over H and W.
pub fn fuse<S: Scalar>(tape: &mut Tape<S>, v: TensorId, h: TensorId, p: &FusionParams<TensorId>) -> Result<TensorId> {
    if tape.value(v).shape() != tape.value(h).shape() {
        return Err(Error::shape(
            "fuse",
            format!("branch shapes differ: {:?} vs {:?}", tape.value(v).shape(), tape.value(h).shape()),
        ));
    }
    let (n, c, _, _) = tape.value(v).dims4("fuse")?;
    let s = ops::add(tape, v, h)?;
    let pooled = ops::global_avg_pool(tape, s)?;
    let hidden = ops::conv2d(tape, pooled, p.reduce_weight, p.reduce_bias, 1, 0)?;
    let hidden = ops::relu(tape, hidden)?;
    let logits = ops::conv2d(tape, hidden, p.expand_weight, p.expand_bias, 1, 0)?;
    let logits = ops::reshape(tape, logits, [n, 2, c])?;
    let weights = ops::softmax(tape, logits, 1)?;
    let wv = ops::narrow(tape, weights, 1, 0, 1)?;
    let wv = ops::reshape(tape, wv, [n, c, 1, 1])?;
    let wh = ops::narrow(tape, weights, 1, 1, 1)?;
    let wh = ops::reshape(tape, wh, [n, c, 1, 1])?;
    let v_gated = ops::mul(tape, wv, v)?;
    let h_gated = ops::mul(tape, wh, h)?;
    ops::add(tape, v_gated, h_gated)
}

/// One PCSA: depthwise local mixing, the two strip branches on its output,
/// softmax fusion. Output shape equals input shape.
pub fn pcsa_forward<S: Scalar>(tape: &mut Tape<S>, x: TensorId, p: &PcsaParams<TensorId>) -> Result<TensorId> {
    let k = tape.value(p.dw_weight).shape()[2];
    let y = ops::depthwise_conv2d(tape, x, p.dw_weight, p.dw_bias, (k - 1) / 2)?;
    let av = strip_weights(tape, y, &p.vsa)?;
    let v = vsa_apply(tape, y, av)?;
    let ah = strip_weights(tape, y, &p.hsa)?;
    let h = hsa_apply(tape, y, ah)?;
    fuse(tape, v, h, &p.fusion)
}

/// Multi-scale PCSA: split channels in half, run PCSA with the group-1
/// settings on the first half and group-2 on the second, concatenate.
pub fn pcsam_forward<S: Scalar>(
    tape: &mut Tape<S>,
    x: TensorId,
    cfg: &PcsamConfig,
    params: &(PcsaParams<TensorId>, PcsaParams<TensorId>),
) -> Result<TensorId> {
    let (_, c, _, _) = tape.value(x).dims4("pcsam_forward")?;
    if c % 2 != 0 {
        return Err(Error::shape("pcsam_forward", format!("channel count {c} is odd, cannot split evenly")));
    }
    if c != cfg.channels {
        return Err(Error::shape(
            "pcsam_forward",
            format!("input has {c} channels, config expects {}", cfg.channels),
        ));
    }
    let half = c / 2;
    let lo = ops::narrow(tape, x, 1, 0, half)?;
    let hi = ops::narrow(tape, x, 1, half, half)?;
    let out_lo = pcsa_forward(tape, lo, &params.0)?;
    let out_hi = pcsa_forward(tape, hi, &params.1)?;
    ops::concat(tape, &[out_lo, out_hi], 1)
}

/// The PCSAB residual block:
/// `u = x + alpha1 * PCSAM(norm(x))`, then `u + alpha2 * ConvFFN(norm(u))`.
pub fn pcsab_forward<S: Scalar>(
    tape: &mut Tape<S>,
    x: TensorId,
    cfg: &PcsamConfig,
    p: &PcsabParams<TensorId>,
) -> Result<TensorId> {
    let (_, c, _, _) = tape.value(x).dims4("pcsab_forward")?;
    let normed = ops::channel_norm(tape, x, p.norm1_gamma, p.norm1_beta)?;
    let attended = pcsam_forward(tape, normed, cfg, &p.pcsam)?;
    let a1 = ops::reshape(tape, p.alpha1, [1, c, 1, 1])?;
    let scaled = ops::mul(tape, a1, attended)?;
    let u = ops::add(tape, x, scaled)?;

    let normed2 = ops::channel_norm(tape, u, p.norm2_gamma, p.norm2_beta)?;
    let expanded = ops::conv2d(tape, normed2, p.ffn_w1, p.ffn_b1, 1, 0)?;
    let activated = ops::relu(tape, expanded)?;
    let projected = ops::conv2d(tape, activated, p.ffn_w2, p.ffn_b2, 1, 0)?;
    let a2 = ops::reshape(tape, p.alpha2, [1, c, 1, 1])?;
    let scaled2 = ops::mul(tape, a2, projected)?;
    ops::add(tape, u, scaled2)
}

// ---------------------------------------------------------------------------
// Gradient-check suites
// ---------------------------------------------------------------------------

/// Per-parameter-group finite-difference check of one PCSAB on a
/// `1x8x12x12` input.
pub fn pcsab_gradcheck(seed: u64, eps: f64, tol: f64) -> Result<Vec<crate::gradcheck::GroupResult>> {
    use crate::gradcheck::{self, GroupResult};
    use rand::SeedableRng;

    let cfg = PcsamConfig::new(
        8,
        StripGroupConfig { k1: 3, k2: 3, dw_kernel: 3 },
        StripGroupConfig { k1: 5, k2: 5, dw_kernel: 5 },
        4,
    )?;

    struct Collect {
        rng: rand_chacha::ChaCha8Rng,
        out: Vec<(String, Tensor<f64>)>,
    }
    impl ParamVisitor<Tensor<f64>> for Collect {
        fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor<f64>> {
            let t = match init {
                Init::KaimingUniform { fan_in } => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    Tensor::from_rng_uniform(shape.to_vec(), -bound, bound, &mut self.rng)
                }
                Init::Zero => Tensor::zeros(shape.to_vec()),
                Init::One => Tensor::ones(shape.to_vec()),
            };
            self.out.push((name.to_string(), t.clone()));
            Ok(t)
        }
    }
    struct Seq<'a> {
        ids: &'a [TensorId],
        pos: usize,
    }
    impl ParamVisitor<TensorId> for Seq<'_> {
        fn param(&mut self, _n: &str, _s: &[usize], _i: Init) -> Result<TensorId> {
            let id = self.ids[self.pos];
            self.pos += 1;
            Ok(id)
        }
    }

    let mut collect = Collect { rng: rand_chacha::ChaCha8Rng::seed_from_u64(seed), out: Vec::new() };
    PcsabParams::build(&mut collect, "pcsab", &cfg)?;
    let ordered = collect.out;
    let x = gradcheck::probe_tensor(&[1, 8, 12, 12], seed ^ 0xb10c);

    let build_loss = |tape: &mut Tape<f64>, ids: &[TensorId], x_id: TensorId| -> Result<TensorId> {
        let params = PcsabParams::build(&mut Seq { ids, pos: 0 }, "pcsab", &cfg)?;
        let y = pcsab_forward(tape, x_id, &cfg, &params)?;
        gradcheck::weighted_sum_loss(tape, y, seed ^ 0x10ff)
    };

    let mut tape = Tape::new();
    let ids: Vec<TensorId> = ordered.iter().map(|(_, t)| tape.leaf(t.clone(), true)).collect();
    let x_id = tape.leaf(x.clone(), true);
    let loss = build_loss(&mut tape, &ids, x_id)?;
    tape.backward(loss)?;

    let mut results = Vec::new();
    let mut groups: Vec<(String, Tensor<f64>, TensorId)> = ordered
        .iter()
        .zip(&ids)
        .map(|((n, t), &id)| (n.clone(), t.clone(), id))
        .collect();
    groups.push(("input".to_string(), x.clone(), x_id));
    for (check_idx, (name, tensor, id)) in groups.iter().enumerate() {
        let analytic = tape
            .grad(*id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tensor.shape().to_vec()));
        let numeric = gradcheck::finite_diff_grad(
            |perturbed| {
                let mut t = Tape::new();
                let ids: Vec<TensorId> = ordered
                    .iter()
                    .enumerate()
                    .map(|(i, (_, v))| t.leaf(if i == check_idx { perturbed.clone() } else { v.clone() }, false))
                    .collect();
                let xi = t.leaf(if check_idx == ordered.len() { perturbed.clone() } else { x.clone() }, false);
                let loss = build_loss(&mut t, &ids, xi)?;
                t.value(loss).item()
            },
            tensor,
            eps,
        )?;
        let mut max_rel: f64 = 0.0;
        for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
            max_rel = max_rel.max(gradcheck::relative_error(a, n));
        }
        results.push(GroupResult { name: name.clone(), max_rel_err: max_rel, passed: max_rel <= tol });
    }
    Ok(results)
}

/// Gradient checks for the strip kernels and their compositions; the
/// gradcheck CLI runs this after the primitive-op suite.
pub fn attention_suite(seed: u64, eps: f64, tol: f64) -> Result<Vec<crate::gradcheck::GroupResult>> {
    use crate::gradcheck::{check_gradients, probe_tensor, weighted_sum_loss};

    let mut results = Vec::new();
    let loss_seed = seed ^ 0xa77e;

    let x = probe_tensor(&[2, 3, 6, 5], seed);
    for (name, vertical) in [("vsa_apply", true), ("hsa_apply", false)] {
        let a = probe_tensor(&[2, 5], seed + 1);
        results.push(check_gradients(name, &[x.clone(), a], eps, tol, |t, ids| {
            let y = if vertical {
                vsa_apply(t, ids[0], ids[1])?
            } else {
                hsa_apply(t, ids[0], ids[1])?
            };
            weighted_sum_loss(t, y, loss_seed)
        })?);
    }

    // strip_weights through its full composition
    {
        let w = probe_tensor(&[5, 3], seed + 2);
        let b = probe_tensor(&[5], seed + 3);
        results.push(check_gradients("strip_weights", &[x.clone(), w, b], eps, tol, |t, ids| {
            let p = StripWeightParams {
                proj_weight: ids[1],
                proj_bias: ids[2],
                direction: Direction::Vertical,
            };
            let y = strip_weights(t, ids[0], &p)?;
            weighted_sum_loss(t, y, loss_seed)
        })?);
    }

    // fuse over all four gate parameters plus both branches
    {
        let v = probe_tensor(&[2, 4, 5, 5], seed + 4);
        let h = probe_tensor(&[2, 4, 5, 5], seed + 5);
        let rw = probe_tensor(&[4, 4, 1, 1], seed + 6);
        let rb = probe_tensor(&[4], seed + 7);
        let ew = probe_tensor(&[8, 4, 1, 1], seed + 8);
        let eb = probe_tensor(&[8], seed + 9);
        results.push(check_gradients("fuse", &[v, h, rw, rb, ew, eb], eps, tol, |t, ids| {
            let p = FusionParams {
                reduce_weight: ids[2],
                reduce_bias: ids[3],
                expand_weight: ids[4],
                expand_bias: ids[5],
            };
            let y = fuse(t, ids[0], ids[1], &p)?;
            weighted_sum_loss(t, y, loss_seed)
        })?);
    }

    Ok(results)
}

#[cfg(test)]
mod tests;
