use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Per-channel spatial mean: `[B,H,W,C] -> [B,1,1,C]`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, h, w, c] = dims4("global_avg_pool", x.shape())?;
    let area = T::from_usize(h * w).unwrap();
    let mut out = Tensor::zeros(&[b, 1, 1, c]);
    for n in 0..b {
        let dst = &mut out.data_mut()[n * c..(n + 1) * c];
        for px in x.data()[n * h * w * c..(n + 1) * h * w * c].chunks(c) {
            for (d, &v) in dst.iter_mut().zip(px) {
                *d = *d + v;
            }
        }
        dst.iter_mut().for_each(|d| *d = *d / area);
    }
    Ok(out)
}

pub fn global_avg_pool_backward<T: Real>(upstream: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
    let [b, h, w, c] = dims4("global_avg_pool_backward", input_shape)?;
    if upstream.len() != b * c {
        return Err(Error::shape(
            "global_avg_pool_backward",
            "upstream",
            b * c,
            upstream.len(),
        ));
    }
    let area = T::from_usize(h * w).unwrap();
    let mut dx = Tensor::zeros(input_shape);
    for n in 0..b {
        let g = &upstream.data()[n * c..(n + 1) * c];
        for px in dx.data_mut()[n * h * w * c..(n + 1) * h * w * c].chunks_mut(c) {
            for (d, &u) in px.iter_mut().zip(g) {
                *d = u / area;
            }
        }
    }
    Ok(dx)
}

pub(crate) fn dims4(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        &[b, h, w, c] => Ok([b, h, w, c]),
        _ => Err(Error::shape(op, "rank", 4, shape.len())),
    }
}
