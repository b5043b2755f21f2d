//! Elementwise ops: arithmetic with singleton-axis broadcasting, scalar
//! variants, and the activations the network uses.

use super::{broadcast_shape, broadcast_zip, reduce_to_shape};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::{Tape, TapeOp, TensorId};
use crate::tensor::Tensor;

macro_rules! binary_op {
    ($fn_name:ident, $op_struct:ident, $name:literal, $fwd:expr, $bwd:expr) => {
        struct $op_struct;

        impl<S: Scalar> TapeOp<S> for $op_struct {
            fn name(&self) -> &'static str {
                $name
            }
            fn backward(
                &self,
                inputs: &[&Tensor<S>],
                _output: &Tensor<S>,
                out_grad: &Tensor<S>,
                needs: &[bool],
            ) -> Vec<Option<Tensor<S>>> {
                let (a, b) = (inputs[0], inputs[1]);
                let (ga, gb): (Option<Tensor<S>>, Option<Tensor<S>>) = $bwd(a, b, out_grad, needs);
                vec![
                    ga.map(|g| reduce_to_shape(&g, a.shape())),
                    gb.map(|g| reduce_to_shape(&g, b.shape())),
                ]
            }
        }

        pub fn $fn_name<S: Scalar>(tape: &mut Tape<S>, a: TensorId, b: TensorId) -> Result<TensorId> {
            let (av, bv) = (tape.value(a), tape.value(b));
            let out_shape = broadcast_shape($name, av.shape(), bv.shape())?;
            let out = broadcast_zip(av, bv, &out_shape, $fwd);
            tape.record(Box::new($op_struct), &[a, b], out)
        }
    };
}

binary_op!(add, AddOp, "add", |x, y| x + y, |a: &Tensor<S>,
                                            b: &Tensor<S>,
                                            g: &Tensor<S>,
                                            needs: &[bool]| {
    let _ = (a, b);
    (
        needs[0].then(|| g.clone()),
        needs[1].then(|| g.clone()),
    )
});

binary_op!(sub, SubOp, "sub", |x, y| x - y, |a: &Tensor<S>,
                                             b: &Tensor<S>,
                                             g: &Tensor<S>,
                                             needs: &[bool]| {
    let _ = (a, b);
    (
        needs[0].then(|| g.clone()),
        needs[1].then(|| g.map(|v| -v)),
    )
});

binary_op!(mul, MulOp, "mul", |x, y| x * y, |a: &Tensor<S>,
                                             b: &Tensor<S>,
                                             g: &Tensor<S>,
                                             needs: &[bool]| {
    (
        needs[0].then(|| broadcast_zip(g, b, g.shape(), |gv, bv| gv * bv)),
        needs[1].then(|| broadcast_zip(g, a, g.shape(), |gv, av| gv * av)),
    )
});

binary_op!(div, DivOp, "div", |x, y| x / y, |a: &Tensor<S>,
                                             b: &Tensor<S>,
                                             g: &Tensor<S>,
                                             needs: &[bool]| {
    (
        needs[0].then(|| broadcast_zip(g, b, g.shape(), |gv, bv| gv / bv)),
        needs[1].then(|| {
            let quotient = broadcast_zip(a, b, g.shape(), |av, bv| av / (bv * bv));
            broadcast_zip(g, &quotient, g.shape(), |gv, qv| -gv * qv)
        }),
    )
});

macro_rules! unary_op {
    ($fn_name:ident, $op_struct:ident, $name:literal, $fwd:expr, $bwd:expr) => {
        struct $op_struct;

        impl<S: Scalar> TapeOp<S> for $op_struct {
            fn name(&self) -> &'static str {
                $name
            }
            fn backward(
                &self,
                inputs: &[&Tensor<S>],
                output: &Tensor<S>,
                out_grad: &Tensor<S>,
                _needs: &[bool],
            ) -> Vec<Option<Tensor<S>>> {
                vec![Some($bwd(inputs[0], output, out_grad))]
            }
        }

        pub fn $fn_name<S: Scalar>(tape: &mut Tape<S>, x: TensorId) -> Result<TensorId> {
            let out = tape.value(x).map($fwd);
            tape.record(Box::new($op_struct), &[x], out)
        }
    };
}

unary_op!(neg, NegOp, "neg", |v: S| -v, |_x: &Tensor<S>, _y: &Tensor<S>, g: &Tensor<S>| g
    .map(|v| -v));

unary_op!(relu, ReluOp, "relu", |v: S| v.max(S::ZERO), |x: &Tensor<S>,
                                                        _y: &Tensor<S>,
                                                        g: &Tensor<S>| {
    let mut out = g.clone();
    for (o, &xv) in out.data_mut().iter_mut().zip(x.data()) {
        if xv <= S::ZERO {
            *o = S::ZERO;
        }
    }
    out
});

// Subgradient 0 at the kink, matching relu.
unary_op!(abs, AbsOp, "abs", |v: S| v.abs(), |x: &Tensor<S>, _y: &Tensor<S>, g: &Tensor<S>| {
    let mut out = g.clone();
    for (o, &xv) in out.data_mut().iter_mut().zip(x.data()) {
        if xv < S::ZERO {
            *o = -*o;
        } else if xv == S::ZERO {
            *o = S::ZERO;
        }
    }
    out
});

// 1/(1+e^-x), derivative y(1-y) taken from the saved output.
unary_op!(sigmoid, SigmoidOp, "sigmoid", |v: S| sigmoid_scalar(v), |_x: &Tensor<S>,
                                                                    y: &Tensor<S>,
                                                                    g: &Tensor<S>| {
    let mut out = g.clone();
    for (o, &yv) in out.data_mut().iter_mut().zip(y.data()) {
        *o = *o * yv * (S::ONE - yv);
    }
    out
});

#[inline]
pub(crate) fn sigmoid_scalar<S: Scalar>(v: S) -> S {
    if v >= S::ZERO {
        S::ONE / (S::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::ONE + e)
    }
}

struct ScaleOp<S> {
    factor: S,
}

impl<S: Scalar> TapeOp<S> for ScaleOp<S> {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(
        &self,
        _inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        out_grad: &Tensor<S>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<S>>> {
        let f = self.factor;
        vec![Some(out_grad.map(|g| g * f))]
    }
}

/// Multiply every element by a constant.
pub fn scale<S: Scalar>(tape: &mut Tape<S>, x: TensorId, factor: f64) -> Result<TensorId> {
    let f = S::from_f64(factor);
    let out = tape.value(x).map(|v| v * f);
    tape.record(Box::new(ScaleOp { factor: f }), &[x], out)
}

struct AddScalarOp;

impl<S: Scalar> TapeOp<S> for AddScalarOp {
    fn name(&self) -> &'static str {
        "add_scalar"
    }
    fn backward(
        &self,
        _inputs: &[&Tensor<S>],
        _output: &Tensor<S>,
        out_grad: &Tensor<S>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<S>>> {
        vec![Some(out_grad.clone())]
    }
}

/// Add a constant to every element.
pub fn add_scalar<S: Scalar>(tape: &mut Tape<S>, x: TensorId, value: f64) -> Result<TensorId> {
    let v = S::from_f64(value);
    let out = tape.value(x).map(|e| e + v);
    tape.record(Box::new(AddScalarOp), &[x], out)
}
