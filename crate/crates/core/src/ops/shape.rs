//! Shape ops: concat, narrow (the channel-split primitive), reshape,
//! spatial zero padding, and nearest-neighbor x2 upsampling.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, TapeOp, TensorId};
use crate::tensor::Tensor;

struct ConcatOp {
    axis: usize,
    extents: Vec<usize>,
}

impl<S: Scalar> TapeOp<S> for ConcatOp {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        output: &Tensor<S>,
        g: &Tensor<S>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<S>>> {
        let out_shape = output.shape();
        let inner: usize = out_shape[self.axis + 1..].iter().product();
        let outer: usize = out_shape[..self.axis].iter().product();
        let total_axis = out_shape[self.axis];
        let gd = g.data();
        let mut offset = 0;
        let mut grads = Vec::with_capacity(inputs.len());
        for (idx, &extent) in self.extents.iter().enumerate() {
            if !needs[idx] {
                offset += extent;
                grads.push(None);
                continue;
            }
            let mut gi = Tensor::zeros(inputs[idx].shape().to_vec());
            let gi_data = gi.data_mut();
            for o in 0..outer {
                let src = (o * total_axis + offset) * inner;
                let dst = o * extent * inner;
                gi_data[dst..dst + extent * inner].copy_from_slice(&gd[src..src + extent * inner]);
            }
            offset += extent;
            grads.push(Some(gi));
        }
        grads
    }
}

/// Concatenate along `axis`; all other extents must agree.
pub fn concat<S: Scalar>(tape: &mut Tape<S>, parts: &[TensorId], axis: usize) -> Result<TensorId> {
    if parts.is_empty() {
        return Err(Error::invalid("concat: no inputs"));
    }
    let first_shape = tape.value(parts[0]).shape().to_vec();
    if axis >= first_shape.len() {
        return Err(Error::shape("concat", format!("axis {axis} out of range for shape {first_shape:?}")));
    }
    let mut extents = Vec::with_capacity(parts.len());
    let mut total_axis = 0;
    for &p in parts {
        let shape = tape.value(p).shape();
        if shape.len() != first_shape.len() {
            return Err(Error::shape("concat", format!("rank mismatch: {shape:?} vs {first_shape:?}")));
        }
        for (ax, (&a, &b)) in shape.iter().zip(first_shape.iter()).enumerate() {
            if ax != axis && a != b {
                return Err(Error::shape("concat", format!("axis {ax} has extents {a} vs {b}")));
            }
        }
        extents.push(shape[axis]);
        total_axis += shape[axis];
    }
    let mut out_shape = first_shape.clone();
    out_shape[axis] = total_axis;
    let inner: usize = out_shape[axis + 1..].iter().product();
    let outer: usize = out_shape[..axis].iter().product();
    let mut out = Tensor::zeros(out_shape);
    let out_data = out.data_mut();
    let mut offset = 0;
    for (&p, &extent) in parts.iter().zip(&extents) {
        let src_data = tape.value(p).data();
        for o in 0..outer {
            let dst = (o * total_axis + offset) * inner;
            let src = o * extent * inner;
            out_data[dst..dst + extent * inner].copy_from_slice(&src_data[src..src + extent * inner]);
        }
        offset += extent;
    }
    tape.record(Box::new(ConcatOp { axis, extents }), parts, out)
}

struct NarrowOp {
    axis: usize,
    start: usize,
}

impl<S: Scalar> TapeOp<S> for NarrowOp {
    fn name(&self) -> &'static str {
        "narrow"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        output: &Tensor<S>,
        g: &Tensor<S>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<S>>> {
        let in_shape = inputs[0].shape();
        let len = output.shape()[self.axis];
        let inner: usize = in_shape[self.axis + 1..].iter().product();
        let outer: usize = in_shape[..self.axis].iter().product();
        let total_axis = in_shape[self.axis];
        let gd = g.data();
        let mut dx = Tensor::zeros(in_shape.to_vec());
        let dx_data = dx.data_mut();
        for o in 0..outer {
            let dst = (o * total_axis + self.start) * inner;
            let src = o * len * inner;
            dx_data[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
        }
        vec![Some(dx)]
    }
}

/// Slice `len` extents starting at `start` along `axis`. Splitting a tensor
/// into channel groups is two narrows.
pub fn narrow<S: Scalar>(tape: &mut Tape<S>, x: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
    let xv = tape.value(x);
    let shape = xv.shape().to_vec();
    if axis >= shape.len() {
        return Err(Error::shape("narrow", format!("axis {axis} out of range for shape {shape:?}")));
    }
    if start + len > shape[axis] || len == 0 {
        return Err(Error::shape(
            "narrow",
            format!("range {start}..{} out of bounds for axis {axis} extent {}", start + len, shape[axis]),
        ));
    }
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let total_axis = shape[axis];
    let mut out_shape = shape.clone();
    out_shape[axis] = len;
    let xd = xv.data();
    let mut out = Tensor::zeros(out_shape);
    let out_data = out.data_mut();
    for o in 0..outer {
        let src = (o * total_axis + start) * inner;
        let dst = o * len * inner;
        out_data[dst..dst + len * inner].copy_from_slice(&xd[src..src + len * inner]);
    }
    tape.record(Box::new(NarrowOp { axis, start }), &[x], out)
}

struct ReshapeOp;

impl<S: Scalar> TapeOp<S> for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        g: &Tensor<S>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<S>>> {
        let dx = Tensor::new(inputs[0].shape().to_vec(), g.data().to_vec()).expect("same numel");
        vec![Some(dx)]
    }
}

pub fn reshape<S: Scalar>(tape: &mut Tape<S>, x: TensorId, new_shape: impl Into<Vec<usize>>) -> Result<TensorId> {
    let new_shape = new_shape.into();
    let xv = tape.value(x);
    let new_numel: usize = new_shape.iter().product();
    if new_numel != xv.numel() {
        return Err(Error::shape(
            "reshape",
            format!("cannot reshape {:?} ({} elements) to {new_shape:?} ({new_numel})", xv.shape(), xv.numel()),
        ));
    }
    let out = Tensor::new(new_shape, xv.data().to_vec())?;
    tape.record(Box::new(ReshapeOp), &[x], out)
}

struct Pad2dOp {
    pad: usize,
}

impl<S: Scalar> TapeOp<S> for Pad2dOp {
    fn name(&self) -> &'static str {
        "pad2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        g: &Tensor<S>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<S>>> {
        let (n, c, h, w) = inputs[0].dims4("pad2d").expect("checked in forward");
        let p = self.pad;
        let (hp, wp) = (h + 2 * p, w + 2 * p);
        let gd = g.data();
        let mut dx = Tensor::zeros([n, c, h, w]);
        let dx_data = dx.data_mut();
        for plane in 0..n * c {
            for ih in 0..h {
                let src = plane * hp * wp + (ih + p) * wp + p;
                let dst = plane * h * w + ih * w;
                dx_data[dst..dst + w].copy_from_slice(&gd[src..src + w]);
            }
        }
        vec![Some(dx)]
    }
}

/// Zero-pad the two spatial axes by `pad` on every side.
pub fn pad2d<S: Scalar>(tape: &mut Tape<S>, x: TensorId, pad: usize) -> Result<TensorId> {
    let xv = tape.value(x);
    let (n, c, h, w) = xv.dims4("pad2d")?;
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let xd = xv.data();
    let mut out = Tensor::zeros([n, c, hp, wp]);
    let out_data = out.data_mut();
    for plane in 0..n * c {
        for ih in 0..h {
            let src = plane * h * w + ih * w;
            let dst = plane * hp * wp + (ih + pad) * wp + pad;
            out_data[dst..dst + w].copy_from_slice(&xd[src..src + w]);
        }
    }
    tape.record(Box::new(Pad2dOp { pad }), &[x], out)
}

struct UpsampleNearest2Op;

impl<S: Scalar> TapeOp<S> for UpsampleNearest2Op {
    fn name(&self) -> &'static str {
        "upsample_nearest2"
    }

    // Each input pixel fans out to a 2x2 block; its gradient is the block sum.
    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        g: &Tensor<S>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<S>>> {
        let (n, c, h, w) = inputs[0].dims4("upsample_nearest2").expect("checked in forward");
        let (h2, w2) = (2 * h, 2 * w);
        let gd = g.data();
        let mut dx = Tensor::zeros([n, c, h, w]);
        let dx_data = dx.data_mut();
        for plane in 0..n * c {
            for ih in 0..h {
                let dst = plane * h * w + ih * w;
                let top = plane * h2 * w2 + (2 * ih) * w2;
                let bottom = top + w2;
                for iw in 0..w {
                    dx_data[dst + iw] =
                        gd[top + 2 * iw] + gd[top + 2 * iw + 1] + gd[bottom + 2 * iw] + gd[bottom + 2 * iw + 1];
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Nearest-neighbor x2 upsample: `[N,C,H,W] -> [N,C,2H,2W]`.
pub fn upsample_nearest2<S: Scalar>(tape: &mut Tape<S>, x: TensorId) -> Result<TensorId> {
    let xv = tape.value(x);
    let (n, c, h, w) = xv.dims4("upsample_nearest2")?;
    let (h2, w2) = (2 * h, 2 * w);
    let xd = xv.data();
    let mut out = Tensor::zeros([n, c, h2, w2]);
    let out_data = out.data_mut();
    for plane in 0..n * c {
        for ih in 0..h {
            let src = plane * h * w + ih * w;
            let top = plane * h2 * w2 + (2 * ih) * w2;
            for iw in 0..w {
                let v = xd[src + iw];
                out_data[top + 2 * iw] = v;
                out_data[top + 2 * iw + 1] = v;
                out_data[top + w2 + 2 * iw] = v;
                out_data[top + w2 + 2 * iw + 1] = v;
            }
        }
    }
    tape.record(Box::new(UpsampleNearest2Op), &[x], out)
}
