use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::batchnorm::Mode;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Inverted dropout. Returns the output and, in TRAIN mode with a positive
/// rate, the scaled keep-mask needed by [`dropout_backward`].
pub fn dropout<T: Real>(x: &Tensor<T>, rate: f64, seed: u64, mode: Mode) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate {rate} not in [0, 1)")));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = T::lit(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..x.len())
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let mut y = x.clone();
    for (v, &m) in y.data_mut().iter_mut().zip(&mask) {
        *v = *v * m;
    }
    Ok((y, Some(mask)))
}

pub fn dropout_backward<T: Real>(upstream: &Tensor<T>, mask: Option<&[T]>) -> Tensor<T> {
    match mask {
        None => upstream.clone(),
        Some(mask) => {
            let mut g = upstream.clone();
            for (v, &m) in g.data_mut().iter_mut().zip(mask) {
                *v = *v * m;
            }
            g
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;

    #[test]
    fn zero_rate_and_inference_are_identity() {
        let x = Tensor::<f32>::from_fn(&[10], |i| i as f32);
        assert_eq!(dropout(&x, 0.0, 1, Mode::Train).unwrap().0, x);
        assert_eq!(dropout(&x, 0.25, 1, Mode::Infer).unwrap().0, x);
        assert!(dropout(&x, 1.0, 1, Mode::Train).is_err());
    }

    #[test]
    fn preserves_expected_value() {
        let x = Tensor::<f64>::full(&[1_000_000], 1.0);
        let (y, _) = dropout(&x, 0.25, 42, Mode::Train).unwrap();
        let mean = y.sum() / 1e6;
        assert!((0.99..=1.01).contains(&mean), "{mean}");
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e6;
        assert!((zeros - 0.25).abs() < 0.005);
    }

    #[test]
    fn same_seed_same_mask() {
        let x = Tensor::<f32>::full(&[64], 1.0);
        assert_eq!(
            dropout(&x, 0.5, 7, Mode::Train).unwrap().0,
            dropout(&x, 0.5, 7, Mode::Train).unwrap().0
        );
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = Tensor::<f64>::from_fn(&[40], |i| (i as f64).cos());
        let r = Tensor::<f64>::from_fn(&[40], |i| (i as f64 * 0.3).sin());
        let (_, mask) = dropout(&x, 0.25, 5, Mode::Train).unwrap();
        let g = dropout_backward(&r, mask.as_deref());
        let err = finite_diff_check(
            |p| {
                let (y, _) = dropout(p, 0.25, 5, Mode::Train)?;
                Ok(Tensor::scalar(y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()))
            },
            &x,
            &g,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }
}
