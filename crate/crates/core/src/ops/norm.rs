//! Channel normalization: per spatial position, normalize across the channel
//! axis, then apply a learned per-channel scale and shift.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, TapeOp, TensorId};
use crate::tensor::Tensor;

const EPS: f64 = 1e-6;

struct ChannelNormOp;

impl<S: Scalar> TapeOp<S> for ChannelNormOp {
    fn name(&self) -> &'static str {
        "channel_norm"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        g: &Tensor<S>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<S>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let (n, c, h, w) = x.dims4("channel_norm").expect("checked in forward");
        let hw = h * w;
        let inv_c = S::from_f64(1.0 / c as f64);
        let eps = S::from_f64(EPS);
        let xd = x.data();
        let gd = g.data();
        let gam = gamma.data();

        let mut dx = needs[0].then(|| Tensor::zeros([n, c, h, w]));
        let mut dgamma = needs[1].then(|| Tensor::zeros([c]));
        let mut dbeta = needs[2].then(|| Tensor::zeros([c]));

        for ni in 0..n {
            let base = ni * c * hw;
            for s in 0..hw {
                // recompute mean / rstd for this column
                let mut mean = S::ZERO;
                for ci in 0..c {
                    mean += xd[base + ci * hw + s];
                }
                mean = mean * inv_c;
                let mut var = S::ZERO;
                for ci in 0..c {
                    let d = xd[base + ci * hw + s] - mean;
                    var += d * d;
                }
                var = var * inv_c;
                let rstd = S::ONE / (var + eps).sqrt();

                // dy = g * gamma; dx = rstd * (dy - mean(dy) - y * mean(dy * y))
                let mut mean_dy = S::ZERO;
                let mut mean_dyy = S::ZERO;
                for ci in 0..c {
                    let idx = base + ci * hw + s;
                    let y = (xd[idx] - mean) * rstd;
                    let gv = gd[idx];
                    let dy = gv * gam[ci];
                    mean_dy += dy;
                    mean_dyy += dy * y;
                    if let Some(dg) = dgamma.as_mut() {
                        dg.data_mut()[ci] += gv * y;
                    }
                    if let Some(db) = dbeta.as_mut() {
                        db.data_mut()[ci] += gv;
                    }
                }
                mean_dy = mean_dy * inv_c;
                mean_dyy = mean_dyy * inv_c;
                if let Some(dx) = dx.as_mut() {
                    let dxd = dx.data_mut();
                    for ci in 0..c {
                        let idx = base + ci * hw + s;
                        let y = (xd[idx] - mean) * rstd;
                        let dy = gd[idx] * gam[ci];
                        dxd[idx] = rstd * (dy - mean_dy - y * mean_dyy);
                    }
                }
            }
        }
        vec![dx, dgamma, dbeta]
    }
}

/// Normalize across channels at every spatial position, then scale and shift:
/// `out[n,c,h,w] = gamma[c] * (x - mean_c) / sqrt(var_c + eps) + beta[c]`.
pub fn channel_norm<S: Scalar>(tape: &mut Tape<S>, x: TensorId, gamma: TensorId, beta: TensorId) -> Result<TensorId> {
    let xv = tape.value(x);
    let (n, c, h, w) = xv.dims4("channel_norm")?;
    if tape.value(gamma).shape() != [c] || tape.value(beta).shape() != [c] {
        return Err(Error::shape(
            "channel_norm",
            format!(
                "gamma/beta shapes {:?}/{:?}, expected [{c}]",
                tape.value(gamma).shape(),
                tape.value(beta).shape()
            ),
        ));
    }
    let hw = h * w;
    let inv_c = S::from_f64(1.0 / c as f64);
    let eps = S::from_f64(EPS);
    let xd = xv.data();
    let gam = tape.value(gamma).data();
    let bet = tape.value(beta).data();
    let mut out = Tensor::zeros([n, c, h, w]);
    let out_data = out.data_mut();
    for ni in 0..n {
        let base = ni * c * hw;
        for s in 0..hw {
            let mut mean = S::ZERO;
            for ci in 0..c {
                mean += xd[base + ci * hw + s];
            }
            mean = mean * inv_c;
            let mut var = S::ZERO;
            for ci in 0..c {
                let d = xd[base + ci * hw + s] - mean;
                var += d * d;
            }
            var = var * inv_c;
            let rstd = S::ONE / (var + eps).sqrt();
            for ci in 0..c {
                let idx = base + ci * hw + s;
                out_data[idx] = gam[ci] * (xd[idx] - mean) * rstd + bet[ci];
            }
        }
    }
    tape.record(Box::new(ChannelNormOp), &[x, gamma, beta], out)
}
