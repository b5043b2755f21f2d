//! Direct convolution kernels: full conv2d, depthwise conv2d, and the
//! pooled-descriptor linear map.
//!
//! All loops keep the innermost axis unit-stride on both sides so they
//! vectorize; parallelism is over independent output planes only.

use super::for_each_plane;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, TapeOp, TensorId};
use crate::tensor::Tensor;

// floor((input + 2*pad - k) / stride) + 1, the usual convention; a stride-2
// 3x3 pad-1 conv then halves even extents exactly.
fn out_extent(op: &'static str, axis: &str, input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return Err(Error::shape(
            op,
            format!("{axis}={input} with kernel {k} and pad {pad} leaves no output extent"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

/// Valid `ow` range so that `iw = ow*stride + kw - pad` lands in `[0, w)`.
#[inline]
fn ow_bounds(w: usize, wo: usize, kw: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if kw >= pad { 0 } else { (pad - kw).div_ceil(stride) };
    let hi_inclusive = (w as isize - 1 + pad as isize - kw as isize) / stride as isize;
    if hi_inclusive < lo as isize {
        return (0, 0);
    }
    (lo, (hi_inclusive as usize + 1).min(wo))
}

fn conv2d_forward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    let (n, cin, h, wi) = x.dims4("conv2d")?;
    let (cout, wcin, kh, kw) = w.dims4("conv2d")?;
    if wcin != cin {
        return Err(Error::shape("conv2d", format!("input has {cin} channels, weight expects {wcin}")));
    }
    if b.shape() != [cout] {
        return Err(Error::shape("conv2d", format!("bias shape {:?}, expected [{cout}]", b.shape())));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape("conv2d", format!("kernel extents must be odd, got {kh}x{kw}")));
    }
    let ho = out_extent("conv2d", "H", h, kh, stride, pad)?;
    let wo = out_extent("conv2d", "W", wi, kw, stride, pad)?;

    let mut out = Tensor::zeros([n, cout, ho, wo]);
    let work = n * cout * cin * kh * kw * ho * wo;
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    for_each_plane(out.data_mut(), ho * wo, work, |plane, out_plane| {
        let (ni, co) = (plane / cout, plane % cout);
        out_plane.fill(bd[co]);
        for ci in 0..cin {
            let x_plane = &xd[(ni * cin + ci) * h * wi..(ni * cin + ci + 1) * h * wi];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wd[((co * cin + ci) * kh + ky) * kw + kx];
                    let (lo, hi) = ow_bounds(wi, wo, kx, stride, pad);
                    if lo >= hi {
                        continue;
                    }
                    for oh in 0..ho {
                        let ih = (oh * stride + ky) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let x_row = &x_plane[ih as usize * wi..(ih as usize + 1) * wi];
                        let out_row = &mut out_plane[oh * wo..(oh + 1) * wo];
                        let base = kx as isize - pad as isize;
                        if stride == 1 {
                            // unit-stride fma loop
                            let src = &x_row[(lo as isize + base) as usize..(hi as isize + base) as usize];
                            for (o, &xv) in out_row[lo..hi].iter_mut().zip(src) {
                                *o = *o + wv * xv;
                            }
                        } else {
                            for (ow, o) in out_row.iter_mut().enumerate().take(hi).skip(lo) {
                                let iw = (ow * stride) as isize + base;
                                *o = *o + wv * x_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

struct Conv2dOp {
    stride: usize,
    pad: usize,
}

impl<S: Scalar> TapeOp<S> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        g: &Tensor<S>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<S>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (stride, pad) = (self.stride, self.pad);
        let (n, cin, h, wi) = x.dims4("conv2d").expect("checked in forward");
        let (cout, _, kh, kw) = w.dims4("conv2d").expect("checked in forward");
        let (_, _, ho, wo) = g.dims4("conv2d").expect("grad shape");
        let xd = x.data();
        let wd = w.data();
        let gd = g.data();

        let dx = needs[0].then(|| {
            let mut dx = Tensor::zeros([n, cin, h, wi]);
            let work = n * cout * cin * kh * kw * ho * wo;
            for_each_plane(dx.data_mut(), h * wi, work, |plane, dx_plane| {
                let (ni, ci) = (plane / cin, plane % cin);
                for co in 0..cout {
                    let g_plane = &gd[(ni * cout + co) * ho * wo..(ni * cout + co + 1) * ho * wo];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = wd[((co * cin + ci) * kh + ky) * kw + kx];
                            let (lo, hi) = ow_bounds(wi, wo, kx, stride, pad);
                            if lo >= hi {
                                continue;
                            }
                            for oh in 0..ho {
                                let ih = (oh * stride + ky) as isize - pad as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let dx_row = &mut dx_plane[ih as usize * wi..(ih as usize + 1) * wi];
                                let g_row = &g_plane[oh * wo..(oh + 1) * wo];
                                let base = kx as isize - pad as isize;
                                if stride == 1 {
                                    let dst = &mut dx_row[(lo as isize + base) as usize..(hi as isize + base) as usize];
                                    for (d, &gv) in dst.iter_mut().zip(&g_row[lo..hi]) {
                                        *d = *d + wv * gv;
                                    }
                                } else {
                                    for (ow, &gv) in g_row.iter().enumerate().take(hi).skip(lo) {
                                        let iw = (ow * stride) as isize + base;
                                        dx_row[iw as usize] = dx_row[iw as usize] + wv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            });
            dx
        });

        let dw = needs[1].then(|| {
            let mut dw = Tensor::zeros([cout, cin, kh, kw]);
            let work = n * cout * cin * kh * kw * ho * wo;
            for_each_plane(dw.data_mut(), cin * kh * kw, work, |co, dw_oc| {
                for ni in 0..n {
                    let g_plane = &gd[(ni * cout + co) * ho * wo..(ni * cout + co + 1) * ho * wo];
                    for ci in 0..cin {
                        let x_plane = &xd[(ni * cin + ci) * h * wi..(ni * cin + ci + 1) * h * wi];
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let (lo, hi) = ow_bounds(wi, wo, kx, stride, pad);
                                if lo >= hi {
                                    continue;
                                }
                                let mut acc = S::ZERO;
                                for oh in 0..ho {
                                    let ih = (oh * stride + ky) as isize - pad as isize;
                                    if ih < 0 || ih >= h as isize {
                                        continue;
                                    }
                                    let x_row = &x_plane[ih as usize * wi..(ih as usize + 1) * wi];
                                    let g_row = &g_plane[oh * wo..(oh + 1) * wo];
                                    let base = kx as isize - pad as isize;
                                    if stride == 1 {
                                        let src = &x_row[(lo as isize + base) as usize..(hi as isize + base) as usize];
                                        for (&gv, &xv) in g_row[lo..hi].iter().zip(src) {
                                            acc = acc + gv * xv;
                                        }
                                    } else {
                                        for (ow, &gv) in g_row.iter().enumerate().take(hi).skip(lo) {
                                            let iw = (ow * stride) as isize + base;
                                            acc = acc + gv * x_row[iw as usize];
                                        }
                                    }
                                }
                                dw_oc[(ci * kh + ky) * kw + kx] = dw_oc[(ci * kh + ky) * kw + kx] + acc;
                            }
                        }
                    }
                }
            });
            dw
        });

        let db = needs[2].then(|| {
            let mut db = Tensor::zeros([cout]);
            let db_data = db.data_mut();
            for ni in 0..n {
                for (co, dbv) in db_data.iter_mut().enumerate() {
                    let g_plane = &gd[(ni * cout + co) * ho * wo..(ni * cout + co + 1) * ho * wo];
                    for &gv in g_plane {
                        *dbv += gv;
                    }
                }
            }
            db
        });

        vec![dx, dw, db]
    }
}

/// Standard cross-correlation `[N,Cin,H,W] * [Cout,Cin,Kh,Kw] -> [N,Cout,H',W']`
/// with zero padding. Kernel extents must be odd and the output extent must
/// divide exactly.
pub fn conv2d<S: Scalar>(
    tape: &mut Tape<S>,
    x: TensorId,
    weight: TensorId,
    bias: TensorId,
    stride: usize,
    pad: usize,
) -> Result<TensorId> {
    if stride == 0 {
        return Err(Error::invalid("conv2d: stride must be positive"));
    }
    let out = conv2d_forward(tape.value(x), tape.value(weight), tape.value(bias), stride, pad)?;
    tape.record(Box::new(Conv2dOp { stride, pad }), &[x, weight, bias], out)
}

fn depthwise_forward<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>, pad: usize) -> Result<Tensor<S>> {
    let (n, c, h, wi) = x.dims4("depthwise_conv2d")?;
    let (wc, one, kh, kw) = w.dims4("depthwise_conv2d")?;
    if wc != c || one != 1 {
        return Err(Error::shape(
            "depthwise_conv2d",
            format!("weight shape {:?}, expected [{c},1,Kh,Kw]", w.shape()),
        ));
    }
    if b.shape() != [c] {
        return Err(Error::shape("depthwise_conv2d", format!("bias shape {:?}, expected [{c}]", b.shape())));
    }
    if kh % 2 == 0 || kw % 2 == 0 || pad != (kh - 1) / 2 || kh != kw {
        return Err(Error::shape(
            "depthwise_conv2d",
            format!("kernel {kh}x{kw} with pad {pad} does not preserve shape"),
        ));
    }

    let mut out = Tensor::zeros([n, c, h, wi]);
    let work = n * c * kh * kw * h * wi;
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    for_each_plane(out.data_mut(), h * wi, work, |plane, out_plane| {
        let ci = plane % c;
        out_plane.fill(bd[ci]);
        let x_plane = &xd[plane * h * wi..(plane + 1) * h * wi];
        for ky in 0..kh {
            for kx in 0..kw {
                let wv = wd[(ci * kh + ky) * kw + kx];
                let (lo, hi) = ow_bounds(wi, wi, kx, 1, pad);
                if lo >= hi {
                    continue;
                }
                for oh in 0..h {
                    let ih = (oh + ky) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let x_row = &x_plane[ih as usize * wi..(ih as usize + 1) * wi];
                    let out_row = &mut out_plane[oh * wi..(oh + 1) * wi];
                    let base = kx as isize - pad as isize;
                    let src = &x_row[(lo as isize + base) as usize..(hi as isize + base) as usize];
                    for (o, &xv) in out_row[lo..hi].iter_mut().zip(src) {
                        *o = *o + wv * xv;
                    }
                }
            }
        }
    });
    Ok(out)
}

struct DepthwiseConv2dOp {
    pad: usize,
}

impl<S: Scalar> TapeOp<S> for DepthwiseConv2dOp {
    fn name(&self) -> &'static str {
        "depthwise_conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        g: &Tensor<S>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<S>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let pad = self.pad;
        let (n, c, h, wi) = x.dims4("depthwise_conv2d").expect("checked in forward");
        let (_, _, kh, kw) = w.dims4("depthwise_conv2d").expect("checked in forward");
        let xd = x.data();
        let wd = w.data();
        let gd = g.data();

        // dx is a correlation of g with the flipped kernel.
        let dx = needs[0].then(|| {
            let mut dx = Tensor::zeros([n, c, h, wi]);
            let work = n * c * kh * kw * h * wi;
            for_each_plane(dx.data_mut(), h * wi, work, |plane, dx_plane| {
                let ci = plane % c;
                let g_plane = &gd[plane * h * wi..(plane + 1) * h * wi];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wd[(ci * kh + (kh - 1 - ky)) * kw + (kw - 1 - kx)];
                        let (lo, hi) = ow_bounds(wi, wi, kx, 1, pad);
                        if lo >= hi {
                            continue;
                        }
                        for oh in 0..h {
                            let ih = (oh + ky) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let g_row = &g_plane[ih as usize * wi..(ih as usize + 1) * wi];
                            let dx_row = &mut dx_plane[oh * wi..(oh + 1) * wi];
                            let base = kx as isize - pad as isize;
                            let src = &g_row[(lo as isize + base) as usize..(hi as isize + base) as usize];
                            for (o, &gv) in dx_row[lo..hi].iter_mut().zip(src) {
                                *o = *o + wv * gv;
                            }
                        }
                    }
                }
            });
            dx
        });

        let dw = needs[1].then(|| {
            let mut dw = Tensor::zeros([c, 1, kh, kw]);
            let work = n * c * kh * kw * h * wi;
            for_each_plane(dw.data_mut(), kh * kw, work, |ci, dw_c| {
                for ni in 0..n {
                    let plane = ni * c + ci;
                    let x_plane = &xd[plane * h * wi..(plane + 1) * h * wi];
                    let g_plane = &gd[plane * h * wi..(plane + 1) * h * wi];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let (lo, hi) = ow_bounds(wi, wi, kx, 1, pad);
                            if lo >= hi {
                                continue;
                            }
                            let mut acc = S::ZERO;
                            for oh in 0..h {
                                let ih = (oh + ky) as isize - pad as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let x_row = &x_plane[ih as usize * wi..(ih as usize + 1) * wi];
                                let g_row = &g_plane[oh * wi..(oh + 1) * wi];
                                let base = kx as isize - pad as isize;
                                let src = &x_row[(lo as isize + base) as usize..(hi as isize + base) as usize];
                                for (&gv, &xv) in g_row[lo..hi].iter().zip(src) {
                                    acc = acc + gv * xv;
                                }
                            }
                            dw_c[ky * kw + kx] = dw_c[ky * kw + kx] + acc;
                        }
                    }
                }
            });
            dw
        });

        let db = needs[2].then(|| {
            let mut db = Tensor::zeros([c]);
            let db_data = db.data_mut();
            for plane in 0..n * c {
                let ci = plane % c;
                for &gv in &gd[plane * h * wi..(plane + 1) * h * wi] {
                    db_data[ci] += gv;
                }
            }
            db
        });

        vec![dx, dw, db]
    }
}

/// Per-channel (groups = C) convolution, shape preserving: pad must be
/// `(K-1)/2`. Channel `c` of the output depends only on channel `c` of the
/// input.
pub fn depthwise_conv2d<S: Scalar>(
    tape: &mut Tape<S>,
    x: TensorId,
    weight: TensorId,
    bias: TensorId,
    pad: usize,
) -> Result<TensorId> {
    let out = depthwise_forward(tape.value(x), tape.value(weight), tape.value(bias), pad)?;
    tape.record(Box::new(DepthwiseConv2dOp { pad }), &[x, weight, bias], out)
}

struct LinearOp;

impl<S: Scalar> TapeOp<S> for LinearOp {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        g: &Tensor<S>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<S>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let k = w.shape()[0];
        let xd = x.data();
        let wd = w.data();
        let gd = g.data();

        let dx = needs[0].then(|| {
            let mut dx = Tensor::zeros([n, c]);
            let dx_data = dx.data_mut();
            for ni in 0..n {
                for ki in 0..k {
                    let gv = gd[ni * k + ki];
                    let w_row = &wd[ki * c..(ki + 1) * c];
                    let dx_row = &mut dx_data[ni * c..(ni + 1) * c];
                    for (d, &wv) in dx_row.iter_mut().zip(w_row) {
                        *d += gv * wv;
                    }
                }
            }
            dx
        });

        let dw = needs[1].then(|| {
            let mut dw = Tensor::zeros([k, c]);
            let dw_data = dw.data_mut();
            for ni in 0..n {
                let x_row = &xd[ni * c..(ni + 1) * c];
                for ki in 0..k {
                    let gv = gd[ni * k + ki];
                    let dw_row = &mut dw_data[ki * c..(ki + 1) * c];
                    for (d, &xv) in dw_row.iter_mut().zip(x_row) {
                        *d += gv * xv;
                    }
                }
            }
            dw
        });

        let db = needs[2].then(|| {
            let mut db = Tensor::zeros([k]);
            let db_data = db.data_mut();
            for ni in 0..n {
                for (d, &gv) in db_data.iter_mut().zip(&gd[ni * k..(ni + 1) * k]) {
                    *d += gv;
                }
            }
            db
        });

        vec![dx, dw, db]
    }
}

/// `[N,C] x [K,C] + [K] -> [N,K]`; the projection from pooled channel
/// descriptors to strip logits.
pub fn linear<S: Scalar>(tape: &mut Tape<S>, x: TensorId, weight: TensorId, bias: TensorId) -> Result<TensorId> {
    let xv = tape.value(x);
    let wv = tape.value(weight);
    let bv = tape.value(bias);
    let (n, c) = match xv.shape()[..] {
        [n, c] => (n, c),
        _ => return Err(Error::shape("linear", format!("input shape {:?}, expected [N,C]", xv.shape()))),
    };
    let (k, wc) = match wv.shape()[..] {
        [k, wc] => (k, wc),
        _ => return Err(Error::shape("linear", format!("weight shape {:?}, expected [K,C]", wv.shape()))),
    };
    if wc != c {
        return Err(Error::shape("linear", format!("input has {c} channels, weight expects {wc}")));
    }
    if bv.shape() != [k] {
        return Err(Error::shape("linear", format!("bias shape {:?}, expected [{k}]", bv.shape())));
    }
    let xd = xv.data();
    let wd = wv.data();
    let bd = bv.data();
    let mut out = Tensor::zeros([n, k]);
    let out_data = out.data_mut();
    for ni in 0..n {
        let x_row = &xd[ni * c..(ni + 1) * c];
        for ki in 0..k {
            let w_row = &wd[ki * c..(ki + 1) * c];
            let mut acc = bd[ki];
            for (&wv, &xv) in w_row.iter().zip(x_row) {
                acc = acc + wv * xv;
            }
            out_data[ni * k + ki] = acc;
        }
    }
    tape.record(Box::new(LinearOp), &[x, weight, bias], out)
}
