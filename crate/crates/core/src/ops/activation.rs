use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Softmax { axis: usize },
}

/// Leaky ReLU slope used throughout both architectures.
pub const LEAKY_ALPHA: f64 = 0.3;

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidAxis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub fn activation<T: Real>(x: &Tensor<T>, kind: Activation) -> Result<Tensor<T>> {
    match kind {
        Activation::LeakyRelu(alpha) => {
            if alpha < 0.0 {
                return Err(Error::invalid("leaky relu slope must be >= 0"));
            }
            let a = T::lit(alpha);
            Ok(x.map(|v| if v >= T::zero() { v } else { a * v }))
        }
        Activation::Sigmoid => Ok(x.map(sigmoid)),
        Activation::Tanh => Ok(x.map(|v| v.tanh())),
        Activation::Softmax { axis } => {
            let (outer, n, inner) = axis_split(x.shape(), axis)?;
            let mut y = x.clone();
            let d = y.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let max = (0..n).map(|j| d[at(j)]).fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for j in 0..n {
                        let e = (d[at(j)] - max).exp();
                        d[at(j)] = e;
                        sum = sum + e;
                    }
                    for j in 0..n {
                        d[at(j)] = d[at(j)] / sum;
                    }
                }
            }
            Ok(y)
        }
    }
}

/// Gradient of [`activation`] given its input `x` and output `y`.
pub fn activation_backward<T: Real>(
    upstream: &Tensor<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    kind: Activation,
) -> Result<Tensor<T>> {
    if upstream.shape() != x.shape() || y.shape() != x.shape() {
        return Err(Error::shape(
            "activation_backward",
            "upstream",
            format!("{:?}", x.shape()),
            format!("{:?}", upstream.shape()),
        ));
    }
    let mut g = upstream.clone();
    let gd = g.data_mut();
    match kind {
        Activation::LeakyRelu(alpha) => {
            let a = T::lit(alpha);
            for (gv, &xv) in gd.iter_mut().zip(x.data()) {
                if xv < T::zero() {
                    *gv = *gv * a;
                }
            }
        }
        Activation::Sigmoid => {
            for (gv, &yv) in gd.iter_mut().zip(y.data()) {
                *gv = *gv * yv * (T::one() - yv);
            }
        }
        Activation::Tanh => {
            for (gv, &yv) in gd.iter_mut().zip(y.data()) {
                *gv = *gv * (T::one() - yv * yv);
            }
        }
        Activation::Softmax { axis } => {
            let (outer, n, inner) = axis_split(x.shape(), axis)?;
            let yd = y.data();
            let ud = upstream.data();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let dot: T = (0..n).map(|j| ud[at(j)] * yd[at(j)]).sum();
                    for j in 0..n {
                        gd[at(j)] = yd[at(j)] * (ud[at(j)] - dot);
                    }
                }
            }
        }
    }
    Ok(g)
}

/// In-place leaky ReLU on a raw buffer.
pub(crate) fn leaky_relu_inplace<T: Real>(data: &mut [T], alpha: T) {
    for v in data {
        if *v < T::zero() {
            *v = *v * alpha;
        }
    }
}
