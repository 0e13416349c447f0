//! Central-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::{
    activation, activation_backward, batch_norm, batch_norm_backward, conv2d, conv2d_backward, dropout,
    dropout_backward, global_avg_pool, global_avg_pool_backward, softmax_cross_entropy, Activation, BatchNormState,
    ConvSpec, Mode, Padding, LEAKY_ALPHA,
};
use crate::recurrent::{
    convlstm_backward, run_sequence, run_sequence_cached, ConvLstmParams, ConvLstmState, ReturnMode,
};
use crate::tensor::Tensor;

/// Compares `analytic` against central differences of `loss` at `point`.
///
/// Returns the maximum over coordinates of `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check<F>(loss: F, point: &Tensor<f64>, analytic: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: FnMut(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    finite_diff_check_floored(loss, point, analytic, step, 1e-8)
}

/// Like [`finite_diff_check`] with `floor` in place of `1e-8`.
///
/// A central difference of an O(1) loss resolves gradients only to about
/// 1e-11 in double precision, so coordinates whose gradient is itself tiny
/// show large relative errors that say nothing about the derivative.
pub fn finite_diff_check_floored<F>(
    mut loss: F,
    point: &Tensor<f64>,
    analytic: &Tensor<f64>,
    step: f64,
    floor: f64,
) -> Result<f64>
where
    F: FnMut(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    if step <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    if analytic.shape() != point.shape() {
        return Err(Error::shape(
            "finite_diff_check",
            "analytic gradient",
            format!("{:?}", point.shape()),
            format!("{:?}", analytic.shape()),
        ));
    }
    let mut eval = |p: &Tensor<f64>| -> Result<f64> {
        let l = loss(p)?;
        if l.len() != 1 {
            return Err(Error::NonScalarLoss(l.shape().to_vec()));
        }
        Ok(l.data()[0])
    };
    let mut probe = point.clone();
    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let x0 = point.data()[i];
        probe.data_mut()[i] = x0 + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = x0 - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = x0;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(err);
    }
    Ok(worst)
}

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Denominator floor used by the suite.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Worst relative error of one operation at one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub op: &'static str,
    pub seed: u64,
    pub max_rel_error: f64,
}

impl CheckRow {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Operation names covered by [`check_op`], in suite order.
pub const SUITE_OPS: [&str; 10] = [
    "conv2d_valid_s2",
    "conv2d_same_s1",
    "leaky_relu",
    "sigmoid",
    "tanh",
    "batch_norm",
    "dropout",
    "global_avg_pool",
    "softmax_cross_entropy",
    "convlstm",
];

/// Runs every op in [`SUITE_OPS`] at every seed.
pub fn run_suite(seeds: impl IntoIterator<Item = u64>, floor: f64) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for seed in seeds {
        for op in SUITE_OPS {
            rows.push(CheckRow {
                op,
                seed,
                max_rel_error: check_op(op, seed, floor)?,
            });
        }
    }
    Ok(rows)
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Loss for every check is `<r, op(x)>` with a random projection `r`, so no
/// gradient vanishes by symmetry.
pub fn check_op(op: &str, seed: u64, floor: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = GRADCHECK_STEP;
    macro_rules! finite_diff_check {
        ($f:expr, $p:expr, $a:expr, $h:expr $(,)?) => {
            finite_diff_check_floored($f, $p, $a, $h, floor)
        };
    }
    match op {
        "conv2d_valid_s2" | "conv2d_same_s1" => {
            let spec = if op == "conv2d_valid_s2" {
                ConvSpec::square(3, 2, Padding::Valid, 2, 3)
            } else {
                ConvSpec::square(3, 1, Padding::Same, 2, 3)
            };
            let x = uniform(&[2, 5, 5, 2], &mut rng, -1.0, 1.0);
            let k = uniform(&spec.kernel_shape(), &mut rng, -1.0, 1.0);
            let b = uniform(&[3], &mut rng, -1.0, 1.0);
            let r = uniform(conv2d(&x, &k, &b, &spec)?.shape(), &mut rng, -1.0, 1.0);
            let g = conv2d_backward(&r, &x, &k, &spec)?;
            let ex = finite_diff_check!(
                |p| Ok(Tensor::scalar(dot(&conv2d(p, &k, &b, &spec)?, &r))),
                &x,
                &g.input,
                h
            )?;
            let ek = finite_diff_check!(
                |p| Ok(Tensor::scalar(dot(&conv2d(&x, p, &b, &spec)?, &r))),
                &k,
                &g.kernel,
                h
            )?;
            let eb = finite_diff_check!(
                |p| Ok(Tensor::scalar(dot(&conv2d(&x, &k, p, &spec)?, &r))),
                &b,
                &g.bias,
                h
            )?;
            Ok(ex.max(ek).max(eb))
        }
        "leaky_relu" | "sigmoid" | "tanh" => {
            let kind = match op {
                "leaky_relu" => Activation::LeakyRelu(LEAKY_ALPHA),
                "sigmoid" => Activation::Sigmoid,
                _ => Activation::Tanh,
            };
            // Keep points clear of the leaky-ReLU kink.
            let x = Tensor::from_fn(&[3, 4], |_| {
                let v: f64 = rng.gen_range(0.05..2.0);
                if rng.gen::<bool>() {
                    v
                } else {
                    -v
                }
            });
            let r = uniform(x.shape(), &mut rng, -1.0, 1.0);
            let y = activation(&x, kind)?;
            let dx = activation_backward(&r, &x, &y, kind)?;
            finite_diff_check!(|p| Ok(Tensor::scalar(dot(&activation(p, kind)?, &r))), &x, &dx, h)
        }
        "batch_norm" => {
            let x = uniform(&[3, 2, 2, 3], &mut rng, -2.0, 2.0);
            let r = uniform(x.shape(), &mut rng, -1.0, 1.0);
            let mut st = BatchNormState::<f64>::new(3);
            st.gamma = uniform(&[3], &mut rng, 0.5, 1.5).with_grad();
            st.beta = uniform(&[3], &mut rng, -0.5, 0.5).with_grad();
            let base = st.clone();
            let (_, cache) = batch_norm(&x, &mut st, Mode::Train)?;
            let cache = cache.ok_or(Error::MissingCache("batch_norm"))?;
            let dx = batch_norm_backward(&r, &cache, &mut st)?;
            let run = |x: &Tensor<f64>, s: &mut BatchNormState<f64>| -> Result<Tensor<f64>> {
                Ok(Tensor::scalar(dot(&batch_norm(x, s, Mode::Train)?.0, &r)))
            };
            let ex = finite_diff_check!(|p| run(p, &mut base.clone()), &x, &dx, h)?;
            let gg = Tensor::new(&[3], st.gamma.grad().unwrap_or(&[]).to_vec())?;
            let eg = finite_diff_check!(
                |p| run(
                    &x,
                    &mut BatchNormState {
                        gamma: p.clone(),
                        ..base.clone()
                    }
                ),
                &base.gamma,
                &gg,
                h,
            )?;
            let gb = Tensor::new(&[3], st.beta.grad().unwrap_or(&[]).to_vec())?;
            let eb = finite_diff_check!(
                |p| run(
                    &x,
                    &mut BatchNormState {
                        beta: p.clone(),
                        ..base.clone()
                    }
                ),
                &base.beta,
                &gb,
                h,
            )?;
            Ok(ex.max(eg).max(eb))
        }
        "dropout" => {
            let x = uniform(&[4, 5], &mut rng, -1.0, 1.0);
            let r = uniform(x.shape(), &mut rng, -1.0, 1.0);
            let mask_seed = rng.gen();
            let (_, mask) = dropout(&x, 0.3, mask_seed, Mode::Train)?;
            let dx = dropout_backward(&r, mask.as_deref());
            finite_diff_check!(
                |p| Ok(Tensor::scalar(dot(&dropout(p, 0.3, mask_seed, Mode::Train)?.0, &r))),
                &x,
                &dx,
                h,
            )
        }
        "global_avg_pool" => {
            let x = uniform(&[2, 3, 3, 4], &mut rng, -1.0, 1.0);
            let r = uniform(&[2, 4], &mut rng, -1.0, 1.0);
            let dx = global_avg_pool_backward(&r, x.shape())?;
            finite_diff_check!(|p| Ok(Tensor::scalar(dot(&global_avg_pool(p)?, &r))), &x, &dx, h)
        }
        "softmax_cross_entropy" => {
            let x = uniform(&[3, 5], &mut rng, -2.0, 2.0);
            let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..5)).collect();
            let (_, dx) = softmax_cross_entropy(&x, &labels)?;
            finite_diff_check!(|p| Ok(Tensor::scalar(softmax_cross_entropy(p, &labels)?.0)), &x, &dx, h)
        }
        "convlstm" => check_convlstm(&mut rng, floor),
        other => Err(Error::invalid(format!("unknown gradient check `{other}`"))),
    }
}

/// Full BPTT check from an attached non-zero initial state over three steps,
/// once for a stride-1 cell returning every step and once for a stride-2
/// peephole cell returning the last step.
fn check_convlstm(rng: &mut ChaCha8Rng, floor: f64) -> Result<f64> {
    macro_rules! finite_diff_check {
        ($f:expr, $p:expr, $a:expr, $h:expr $(,)?) => {
            finite_diff_check_floored($f, $p, $a, $h, floor)
        };
    }
    let mut worst: f64 = 0.0;
    for (stride, peephole, mode) in [(1, false, ReturnMode::Full), (2, true, ReturnMode::Last)] {
        let spec = ConvSpec::square(
            3,
            stride,
            if stride == 1 { Padding::Same } else { Padding::Valid },
            2,
            2,
        );
        let xs = uniform(&[2, 3, 5, 5, 2], rng, -1.0, 1.0);
        let mut params = ConvLstmParams::<f64>::zeros(spec);
        let grid = params.grid(5, 5)?;
        if peephole {
            params = params.with_peephole(grid);
        }
        params.visit_mut(&mut |_, t| {
            for v in t.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        });
        let init = ConvLstmState {
            h: uniform(&[2, grid.0, grid.1, 2], rng, -0.5, 0.5),
            c: uniform(&[2, grid.0, grid.1, 2], rng, -0.5, 0.5),
            attached: true,
        };
        let (out, cache) = run_sequence_cached(&xs, &init, &params, mode)?;
        let r = uniform(out.outputs.shape(), rng, -1.0, 1.0);
        let g = convlstm_backward(&r, &cache, &params)?;
        let loss = |xs: &Tensor<f64>, init: &ConvLstmState<f64>, p: &ConvLstmParams<f64>| -> Result<Tensor<f64>> {
            Ok(Tensor::scalar(dot(&run_sequence(xs, init, p, mode)?.outputs, &r)))
        };
        let mut analytic: Vec<(&str, Tensor<f64>)> = vec![("wx", g.wx), ("wh", g.wh), ("bias", g.bias)];
        if let Some([gi, gf, go]) = g.peephole {
            analytic.extend([("peep_i", gi), ("peep_f", gf), ("peep_o", go)]);
        }
        for (name, grad) in &analytic {
            let mut point = None;
            params.visit(&mut |n, t| {
                if n == *name {
                    point = Some(t.clone());
                }
            });
            let point = point.ok_or_else(|| Error::invalid(format!("no parameter {name}")))?;
            let e = finite_diff_check!(
                |t| {
                    let mut q = params.clone();
                    q.visit_mut(&mut |n, slot| {
                        if n == *name {
                            *slot = t.clone();
                        }
                    });
                    loss(&xs, &init, &q)
                },
                &point,
                grad,
                GRADCHECK_STEP,
            )?;
            worst = worst.max(e);
        }
        worst = worst.max(finite_diff_check!(
            |t| loss(t, &init, &params),
            &xs,
            &g.input,
            GRADCHECK_STEP
        )?);
        let (dh0, dc0) = g.init_state.ok_or(Error::MissingCache("initial state gradient"))?;
        worst = worst.max(finite_diff_check!(
            |t| loss(
                &xs,
                &ConvLstmState {
                    h: t.clone(),
                    ..init.clone()
                },
                &params
            ),
            &init.h,
            &dh0,
            GRADCHECK_STEP,
        )?);
        worst = worst.max(finite_diff_check!(
            |t| loss(
                &xs,
                &ConvLstmState {
                    c: t.clone(),
                    ..init.clone()
                },
                &params
            ),
            &init.c,
            &dc0,
            GRADCHECK_STEP,
        )?);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{activation, activation_backward, conv2d, conv2d_backward, Activation, ConvSpec, Padding};

    #[test]
    fn linear_sum_is_exact() {
        let x = Tensor::from_fn(&[5, 3], |i| i as f64 * 0.1 - 0.4);
        let err = finite_diff_check(|p| Ok(Tensor::scalar(p.sum())), &x, &Tensor::full(&[5, 3], 1.0), 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    fn composite(
        x: &Tensor<f64>,
        k: &Tensor<f64>,
        b: &Tensor<f64>,
        spec: &ConvSpec,
        flip_sign: bool,
    ) -> (f64, Tensor<f64>) {
        let z = conv2d(x, k, b, spec).unwrap();
        let y = activation(&z, Activation::Sigmoid).unwrap();
        let up = Tensor::full(y.shape(), 1.0);
        let dz = activation_backward(&up, &z, &y, Activation::Sigmoid).unwrap();
        let mut gk = conv2d_backward(&dz, x, k, spec).unwrap().kernel;
        if flip_sign {
            gk = gk.map(|v| -v);
        }
        (y.sum(), gk)
    }

    #[test]
    fn conv_sigmoid_composite_and_mutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = ConvSpec::square(3, 1, Padding::Same, 2, 2);
        let x = Tensor::from_fn(&[1, 4, 4, 2], |_| rng.gen_range(-1.0..1.0));
        let k = Tensor::from_fn(&spec.kernel_shape(), |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::from_fn(&[2], |_| rng.gen_range(-1.0..1.0));
        let f = |p: &Tensor<f64>| Ok(Tensor::scalar(composite(&x, p, &b, &spec, false).0));

        let (_, good) = composite(&x, &k, &b, &spec, false);
        assert!(finite_diff_check(f, &k, &good, 1e-5).unwrap() < 1e-4);

        let (_, corrupted) = composite(&x, &k, &b, &spec, true);
        assert!(finite_diff_check(f, &k, &corrupted, 1e-5).unwrap() > 0.5);
    }

    #[test]
    fn suite_passes_on_a_few_seeds() {
        for row in run_suite(0..3, GRADCHECK_FLOOR).unwrap() {
            assert!(row.passed(GRADCHECK_TOLERANCE), "{row:?}");
        }
        assert!(check_op("nope", 0, GRADCHECK_FLOOR).is_err());
    }

    #[test]
    fn rejects_non_scalar_loss() {
        let x = Tensor::zeros(&[2]);
        let err = finite_diff_check(|p| Ok(p.clone()), &x, &x, 1e-5).unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss(_)));
    }
}
