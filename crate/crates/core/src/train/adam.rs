//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::models::{Network, Record};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments<T> {
    name: String,
    m: Vec<T>,
    v: Vec<T>,
}

/// First and second moment buffers, created lazily in parameter visit order.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    moments: Vec<Moments<T>>,
}

type Visitor<'a, T> = &'a mut dyn FnMut(&mut dyn FnMut(&str, &mut Tensor<T>));

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// One update over every tensor yielded by `visit`.
    ///
    /// Nothing changes if any gradient is missing or non-finite.
    pub fn step_with(&mut self, lr: f64, visit: Visitor<'_, T>) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {lr} must be positive")));
        }
        let mut problem = None;
        let mut shapes = Vec::new();
        visit(&mut |name, t| {
            if problem.is_some() {
                return;
            }
            match t.grad() {
                None => problem = Some(Error::invalid(format!("`{name}` has no gradient slot"))),
                Some(g) if !g.iter().all(|v| v.is_finite()) => {
                    problem = Some(Error::NonFinite {
                        layer: format!("gradient of {name}"),
                    })
                }
                Some(_) => shapes.push((name.to_string(), t.len())),
            }
        });
        if let Some(e) = problem {
            return Err(e);
        }
        if self.moments.is_empty() {
            self.moments = shapes
                .iter()
                .map(|(name, n)| Moments {
                    name: name.clone(),
                    m: vec![T::zero(); *n],
                    v: vec![T::zero(); *n],
                })
                .collect();
        } else if self.moments.len() != shapes.len()
            || self
                .moments
                .iter()
                .zip(&shapes)
                .any(|(m, (n, len))| &m.name != n || m.m.len() != *len)
        {
            return Err(Error::invalid("optimizer state does not match the parameters"));
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let corr1 = T::lit(1.0 - c.beta1.powi(t));
        let corr2 = T::lit(1.0 - c.beta2.powi(t));
        let lr = T::lit(lr);
        let eps = T::lit(c.epsilon);
        let mut slot = 0;
        visit(&mut |_, tensor| {
            let mo = &mut self.moments[slot];
            slot += 1;
            let (data, grad) = tensor.data_and_grad_mut();
            for (((p, &g), m), v) in data.iter_mut().zip(grad.iter()).zip(&mut mo.m).zip(&mut mo.v) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let m_hat = *m / corr1;
                let v_hat = *v / corr2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
        Ok(())
    }

    pub fn step_network(&mut self, net: &mut Network<T>, lr: f64) -> Result<()> {
        self.step_with(lr, &mut |f| net.visit_params_mut(f))
    }

    pub fn step_tensors(&mut self, tensors: &mut [Tensor<T>], lr: f64) -> Result<()> {
        self.step_with(lr, &mut |f| {
            for (i, t) in tensors.iter_mut().enumerate() {
                f(&format!("tensor{i}"), t);
            }
        })
    }

    /// Moment buffers as checkpoint records named `adam.m.<param>` / `adam.v.<param>`.
    pub fn to_records(&self) -> Vec<Record> {
        let mut out = Vec::with_capacity(2 * self.moments.len());
        for mo in &self.moments {
            for (kind, buf) in [("m", &mo.m), ("v", &mo.v)] {
                out.push(Record {
                    name: format!("adam.{kind}.{}", mo.name),
                    shape: vec![buf.len()],
                    data: buf.iter().map(|x| x.to_f32().unwrap_or(f32::NAN)).collect(),
                });
            }
        }
        out
    }

    /// Restores moment buffers for the parameters of `net`.
    pub fn restore(&mut self, step: u64, net: &Network<T>, records: &[Record]) -> Result<()> {
        let find = |name: &str, len: usize| -> Result<Vec<T>> {
            let r = records
                .iter()
                .find(|r| r.name == name)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks `{name}`")))?;
            if r.data.len() != len {
                return Err(Error::shape("adam restore", name.to_string(), len, r.data.len()));
            }
            Ok(r.data.iter().map(|&x| T::lit(x as f64)).collect())
        };
        let mut moments = Vec::new();
        let mut result = Ok(());
        net.visit_params(&mut |name, t| {
            if result.is_err() || step == 0 {
                return;
            }
            match (
                find(&format!("adam.m.{name}"), t.len()),
                find(&format!("adam.v.{name}"), t.len()),
            ) {
                (Ok(m), Ok(v)) => moments.push(Moments {
                    name: name.to_string(),
                    m,
                    v,
                }),
                (Err(e), _) | (_, Err(e)) => result = Err(e),
            }
        });
        result?;
        self.step = step;
        self.moments = moments;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Tensor<f64> {
        let mut t = Tensor::full(&[1], v).with_grad();
        t.grad_mut().unwrap()[0] = g;
        t
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut ps = vec![param(1.5, 0.0)];
        let mut s = AdamState::new(AdamConfig::default());
        for _ in 0..5 {
            s.step_tensors(&mut ps, 1e-2).unwrap();
        }
        assert_eq!(ps[0].data()[0], 1.5);
        assert_eq!(s.step, 5);
    }

    #[test]
    fn constant_gradient_moves_about_lr_per_step() {
        let lr = 1e-3;
        let mut ps = vec![param(0.0, 0.7)];
        let mut s = AdamState::new(AdamConfig::default());
        let mut prev = 0.0;
        for i in 0..1000 {
            s.step_tensors(&mut ps, lr).unwrap();
            let x = ps[0].data()[0];
            let step = (x - prev).abs();
            prev = x;
            if i >= 10 {
                assert!((0.9 * lr..=1.0 * lr).contains(&step), "step {i}: {step}");
            }
        }
    }

    #[test]
    fn quadratic_bowl() {
        let mut ps = vec![param(1.0, 0.0)];
        let mut s = AdamState::new(AdamConfig::default());
        let mut converged = None;
        for i in 0..2000 {
            let x = ps[0].data()[0];
            ps[0].grad_mut().unwrap()[0] = 2.0 * x;
            s.step_tensors(&mut ps, 1e-2).unwrap();
            if ps[0].data()[0].abs() < 1e-3 && converged.is_none() {
                converged = Some(i);
            }
        }
        assert!(converged.is_some());
        assert!(ps[0].data()[0].abs() < 1e-3);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut ps = vec![param(1.0, f64::NAN)];
        let mut s = AdamState::new(AdamConfig::default());
        assert!(matches!(s.step_tensors(&mut ps, 1e-3), Err(Error::NonFinite { .. })));
        assert_eq!((ps[0].data()[0], s.step), (1.0, 0));
    }
}
