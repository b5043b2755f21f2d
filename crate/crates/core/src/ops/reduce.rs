//! Reductions: global average pooling, stabilized softmax, and the scalar
//! reductions losses end in.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, TapeOp, TensorId};
use crate::tensor::Tensor;

struct GlobalAvgPoolOp;

impl<S: Scalar> TapeOp<S> for GlobalAvgPoolOp {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        g: &Tensor<S>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<S>>> {
        let x = inputs[0];
        let (n, c, h, w) = x.dims4("global_avg_pool").expect("checked in forward");
        let inv = S::from_f64(1.0 / (h * w) as f64);
        let mut dx = Tensor::zeros([n, c, h, w]);
        let dx_data = dx.data_mut();
        for (plane, &gv) in g.data().iter().enumerate() {
            let v = gv * inv;
            dx_data[plane * h * w..(plane + 1) * h * w].fill(v);
        }
        vec![Some(dx)]
    }
}

/// Spatial mean per channel: `[N,C,H,W] -> [N,C,1,1]`.
pub fn global_avg_pool<S: Scalar>(tape: &mut Tape<S>, x: TensorId) -> Result<TensorId> {
    let xv = tape.value(x);
    let (n, c, h, w) = xv.dims4("global_avg_pool")?;
    let inv = 1.0 / (h * w) as f64;
    let xd = xv.data();
    let mut out = Tensor::zeros([n, c, 1, 1]);
    for (plane, o) in out.data_mut().iter_mut().enumerate() {
        let mut acc = S::ZERO;
        for &v in &xd[plane * h * w..(plane + 1) * h * w] {
            acc += v;
        }
        *o = acc * S::from_f64(inv);
    }
    tape.record(Box::new(GlobalAvgPoolOp), &[x], out)
}

struct SoftmaxOp {
    axis: usize,
}

impl<S: Scalar> TapeOp<S> for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax"
    }

    // dx_i = y_i * (g_i - sum_j g_j y_j) per slice.
    fn backward(
        &self,
        _inputs: &[&Tensor<S>],
        y: &Tensor<S>,
        g: &Tensor<S>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<S>>> {
        let shape = y.shape();
        let axis_len = shape[self.axis];
        let inner: usize = shape[self.axis + 1..].iter().product();
        let outer: usize = shape[..self.axis].iter().product();
        let yd = y.data();
        let gd = g.data();
        let mut dx = Tensor::zeros(shape.to_vec());
        let dx_data = dx.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                let mut dot = S::ZERO;
                for a in 0..axis_len {
                    let idx = base + a * inner;
                    dot += gd[idx] * yd[idx];
                }
                for a in 0..axis_len {
                    let idx = base + a * inner;
                    dx_data[idx] = yd[idx] * (gd[idx] - dot);
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Softmax along `axis`, computed with max subtraction so large logits do
/// not overflow.
pub fn softmax<S: Scalar>(tape: &mut Tape<S>, x: TensorId, axis: usize) -> Result<TensorId> {
    let xv = tape.value(x);
    let shape = xv.shape().to_vec();
    if axis >= shape.len() {
        return Err(Error::shape("softmax", format!("axis {axis} out of range for shape {shape:?}")));
    }
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let xd = xv.data();
    let mut out = Tensor::zeros(shape.clone());
    let out_data = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * axis_len * inner + i;
            let mut max = xd[base];
            for a in 1..axis_len {
                max = max.max(xd[base + a * inner]);
            }
            let mut sum = S::ZERO;
            for a in 0..axis_len {
                let idx = base + a * inner;
                let e = (xd[idx] - max).exp();
                out_data[idx] = e;
                sum += e;
            }
            let inv = S::ONE / sum;
            for a in 0..axis_len {
                out_data[base + a * inner] = out_data[base + a * inner] * inv;
            }
        }
    }
    tape.record(Box::new(SoftmaxOp { axis }), &[x], out)
}

struct SumAllOp;

impl<S: Scalar> TapeOp<S> for SumAllOp {
    fn name(&self) -> &'static str {
        "sum_all"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        g: &Tensor<S>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<S>>> {
        vec![Some(Tensor::full(inputs[0].shape().to_vec(), g.data()[0]))]
    }
}

/// Sum of all elements as a 1-element tensor. Fixed accumulation order.
pub fn sum_all<S: Scalar>(tape: &mut Tape<S>, x: TensorId) -> Result<TensorId> {
    let mut acc = S::ZERO;
    for &v in tape.value(x).data() {
        acc += v;
    }
    tape.record(Box::new(SumAllOp), &[x], Tensor::scalar(acc))
}

struct MeanAllOp {
    numel: usize,
}

impl<S: Scalar> TapeOp<S> for MeanAllOp {
    fn name(&self) -> &'static str {
        "mean_all"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        g: &Tensor<S>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<S>>> {
        let v = g.data()[0] * S::from_f64(1.0 / self.numel as f64);
        vec![Some(Tensor::full(inputs[0].shape().to_vec(), v))]
    }
}

/// Arithmetic mean of all elements as a 1-element tensor.
pub fn mean_all<S: Scalar>(tape: &mut Tape<S>, x: TensorId) -> Result<TensorId> {
    let numel = tape.value(x).numel();
    let mut acc = S::ZERO;
    for &v in tape.value(x).data() {
        acc += v;
    }
    let mean = acc * S::from_f64(1.0 / numel as f64);
    tape.record(Box::new(MeanAllOp { numel }), &[x], Tensor::scalar(mean))
}
