//! Differentiable operation library.
//!
//! Every function here executes its forward kernel eagerly, then records the
//! op and its backward rule on the tape. Kernels may parallelize over
//! independent output planes; each plane is written by exactly one task with
//! a fixed-order inner loop, so results are bit-identical to sequential
//! execution.

mod conv;
mod elementwise;
mod norm;
mod reduce;
mod shape;

pub use conv::{conv2d, depthwise_conv2d, linear};
pub use elementwise::{abs, add, add_scalar, div, mul, neg, relu, scale, sigmoid, sub};
pub use norm::channel_norm;
pub use reduce::{global_avg_pool, mean_all, softmax, sum_all};
pub use shape::{concat, narrow, pad2d, reshape, upsample_nearest2};

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rayon::prelude::*;

/// Below this many scalar ops a kernel stays sequential; thread dispatch
/// would cost more than it saves.
pub(crate) const MIN_PAR_WORK: usize = 1 << 18;

/// Run `f(plane_index, plane)` over consecutive `plane_len` chunks of
/// `data`, in parallel when `work` is large enough. Each chunk has a single
/// writer, so scheduling cannot change the result.
pub(crate) fn for_each_plane<S, F>(data: &mut [S], plane_len: usize, work: usize, f: F)
where
    S: Send,
    F: Fn(usize, &mut [S]) + Sync + Send,
{
    debug_assert_eq!(data.len() % plane_len, 0);
    if work < MIN_PAR_WORK || data.len() / plane_len < 2 {
        for (i, chunk) in data.chunks_mut(plane_len).enumerate() {
            f(i, chunk);
        }
    } else {
        data.par_chunks_mut(plane_len).enumerate().for_each(|(i, chunk)| f(i, chunk));
    }
}

/// Shape produced by broadcasting `a` against `b`: ranks must match and each
/// axis must agree or be 1 on one side. Anything else fails loudly.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> crate::Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(crate::Error::shape(op, format!("rank mismatch: {a:?} vs {b:?}")));
    }
    a.iter()
        .zip(b.iter())
        .enumerate()
        .map(|(axis, (&da, &db))| {
            if da == db || da == 1 || db == 1 {
                Ok(da.max(db))
            } else {
                Err(crate::Error::shape(
                    op,
                    format!("axis {axis} has extents {da} vs {db} (only singleton axes broadcast)"),
                ))
            }
        })
        .collect()
}

/// Row-major strides with 0 on broadcast (extent-1) axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i] = acc;
        }
        acc *= shape[i];
    }
    for (i, s) in strides.iter_mut().enumerate() {
        if shape[i] == 1 && out_shape[i] != 1 {
            *s = 0;
        }
    }
    strides
}

/// Elementwise combine with singleton-axis broadcasting. The inner loop runs
/// over the last axis, specialised for the contiguous/broadcast cases.
pub(crate) fn broadcast_zip<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    out_shape: &[usize],
    f: impl Fn(S, S) -> S,
) -> Tensor<S> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(out_shape.to_vec(), data).expect("equal-shape zip");
    }
    let rank = out_shape.len();
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let numel: usize = out_shape.iter().product();
    let mut out = vec![S::ZERO; numel];
    let last = out_shape[rank - 1];
    let rows = numel / last;
    let mut index = vec![0usize; rank.saturating_sub(1)];
    let ad = a.data();
    let bd = b.data();
    for (row, out_row) in out.chunks_mut(last).enumerate() {
        let mut off_a = 0;
        let mut off_b = 0;
        for (axis, &i) in index.iter().enumerate() {
            off_a += i * sa[axis];
            off_b += i * sb[axis];
        }
        match (sa[rank - 1], sb[rank - 1]) {
            (1, 1) => {
                for (o, (x, y)) in out_row.iter_mut().zip(ad[off_a..off_a + last].iter().zip(&bd[off_b..off_b + last])) {
                    *o = f(*x, *y);
                }
            }
            (1, 0) => {
                let y = bd[off_b];
                for (o, &x) in out_row.iter_mut().zip(&ad[off_a..off_a + last]) {
                    *o = f(x, y);
                }
            }
            (0, 1) => {
                let x = ad[off_a];
                for (o, &y) in out_row.iter_mut().zip(&bd[off_b..off_b + last]) {
                    *o = f(x, y);
                }
            }
            (0, 0) => {
                let v = f(ad[off_a], bd[off_b]);
                out_row.fill(v);
            }
            _ => unreachable!("last-axis stride is always 0 or 1"),
        }
        // advance the multi-index over the leading axes
        if row + 1 < rows {
            for axis in (0..rank - 1).rev() {
                index[axis] += 1;
                if index[axis] < out_shape[axis] {
                    break;
                }
                index[axis] = 0;
            }
        }
    }
    Tensor::new(out_shape.to_vec(), out).expect("broadcast zip shape")
}

/// Sum `grad` down to `target_shape` over the axes that were broadcast.
pub(crate) fn reduce_to_shape<S: Scalar>(grad: &Tensor<S>, target_shape: &[usize]) -> Tensor<S> {
    if grad.shape() == target_shape {
        return grad.clone();
    }
    let strides = broadcast_strides(target_shape, grad.shape());
    let rank = grad.shape().len();
    let mut out = Tensor::zeros(target_shape.to_vec());
    let out_data = out.data_mut();
    let mut index = vec![0usize; rank];
    for &g in grad.data() {
        let mut off = 0;
        for (axis, &i) in index.iter().enumerate() {
            off += i * strides[axis];
        }
        out_data[off] += g;
        for axis in (0..rank).rev() {
            index[axis] += 1;
            if index[axis] < grad.shape()[axis] {
                break;
            }
            index[axis] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests;
