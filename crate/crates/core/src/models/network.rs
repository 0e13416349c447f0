use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::spec::{Architecture, LayerKind, NetworkSpec, SymShape, TraceRow};
use crate::error::{Error, Result};
use crate::ops::activation::leaky_relu_inplace;
use crate::ops::{
    activation, batch_norm, batch_norm_backward, conv2d, conv2d_backward, dropout, dropout_backward, global_avg_pool,
    global_avg_pool_backward, Activation, BatchNormCache, BatchNormState, ConvSpec, Mode,
};
use crate::recurrent::{
    convlstm_backward, detach_state, run_sequence, run_sequence_cached, ConvLstmParams, ConvLstmState, ReturnMode,
    SequenceCache,
};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// How a forward pass runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pass {
    pub mode: Mode,
    /// Keep activations for [`Network::backward`]. Requires TRAIN mode.
    pub record: bool,
    /// Seeds the dropout mask.
    pub seed: u64,
}

impl Pass {
    pub fn train(seed: u64) -> Self {
        Pass {
            mode: Mode::Train,
            record: true,
            seed,
        }
    }

    pub fn infer() -> Self {
        Pass {
            mode: Mode::Infer,
            record: false,
            seed: 0,
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    ConvLstm {
        params: ConvLstmParams<T>,
        mode: ReturnMode,
        state: Option<ConvLstmState<T>>,
        cache: Option<SequenceCache<T>>,
    },
    Conv2d {
        spec: ConvSpec,
        kernel: Tensor<T>,
        bias: Tensor<T>,
        input: Option<Tensor<T>>,
        in_shape: Vec<usize>,
    },
    BatchNorm {
        state: BatchNormState<T>,
        cache: Option<BatchNormCache<T>>,
    },
    LeakyRelu {
        alpha: f64,
        output: Option<Tensor<T>>,
    },
    Dropout {
        rate: f64,
        mask: Option<Option<Vec<T>>>,
    },
    Gap {
        in_shape: Vec<usize>,
    },
    /// Fusion and softmax are handled by the executor itself.
    Structural,
}

#[derive(Debug)]
struct Layer<T> {
    name: String,
    op: Op<T>,
}

/// Executable network: parameters, running statistics, recurrent state and
/// the activations of the last recorded pass.
#[derive(Debug)]
pub struct Network<T> {
    spec: NetworkSpec,
    main: Vec<Layer<T>>,
    support: Vec<Layer<T>>,
    head: Vec<Layer<T>>,
}

fn build_branch<T: Real>(
    prefix: &str,
    layers: &[super::spec::LayerSpec],
    input: SymShape,
    trace: &[TraceRow],
    peephole: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Layer<T>>> {
    let rows: Vec<&TraceRow> = trace.iter().filter(|r| r.branch == prefix).collect();
    let mut prev = input;
    let mut out = Vec::with_capacity(layers.len());
    for (spec, row) in layers.iter().zip(rows) {
        let cin = prev.channels();
        let op = match spec.kind {
            LayerKind::ConvLstm {
                filters,
                kernel,
                stride,
                padding,
                return_mode,
            } => {
                let conv = ConvSpec::square(kernel, stride, padding, cin, filters);
                let mut params = ConvLstmParams::init(conv, rng);
                if peephole {
                    let SymShape::Seq([_, h, w, _]) = row.shape else {
                        unreachable!("trace yields sequences for recurrent layers")
                    };
                    params = params.with_peephole((h, w));
                }
                Op::ConvLstm {
                    params,
                    mode: return_mode,
                    state: None,
                    cache: None,
                }
            }
            LayerKind::Conv2d {
                filters,
                kernel,
                stride,
                padding,
            } => {
                let conv = ConvSpec::square(kernel, stride, padding, cin, filters);
                let limit = (3.0 / conv.fan_in() as f64).sqrt();
                let kernel = Tensor::from_fn(&conv.kernel_shape(), |_| {
                    T::lit(rand::Rng::gen_range(rng, -limit..limit))
                });
                Op::Conv2d {
                    spec: conv,
                    kernel: kernel.with_grad(),
                    bias: Tensor::zeros(&[filters]).with_grad(),
                    input: None,
                    in_shape: Vec::new(),
                }
            }
            LayerKind::BatchNorm => Op::BatchNorm {
                state: BatchNormState::new(cin),
                cache: None,
            },
            LayerKind::LeakyRelu(alpha) => Op::LeakyRelu { alpha, output: None },
            LayerKind::Dropout(rate) => Op::Dropout { rate, mask: None },
            LayerKind::GlobalAvgPool => Op::Gap { in_shape: Vec::new() },
            LayerKind::Add | LayerKind::Softmax => Op::Structural,
        };
        out.push(Layer {
            name: format!("{prefix}.{}", spec.name),
            op,
        });
        prev = row.shape;
    }
    Ok(out)
}

fn seq_dims<T: Real>(x: &Tensor<T>, layer: &str) -> Result<[usize; 5]> {
    match *x.shape() {
        [b, t, h, w, c] => Ok([b, t, h, w, c]),
        _ => Err(Error::shape("network", layer.to_string(), "rank 5", x.rank())),
    }
}

impl<T: Real> Layer<T> {
    fn forward(&mut self, mut x: Tensor<T>, pass: Pass, stateful: bool) -> Result<Tensor<T>> {
        let record = pass.record;
        let y = match &mut self.op {
            Op::ConvLstm {
                params,
                mode,
                state,
                cache,
            } => {
                let [b, _, h, w, _] = seq_dims(&x, &self.name)?;
                let (gh, gw) = params.grid(h, w)?;
                let shape = [b, gh, gw, params.hidden()];
                let init = match state.take() {
                    Some(s) if stateful => {
                        if s.shape() != shape {
                            return Err(Error::shape(
                                "network",
                                format!("{} state", self.name),
                                format!("{shape:?}"),
                                format!("{:?}", s.shape()),
                            ));
                        }
                        detach_state(&s)
                    }
                    _ => ConvLstmState::zeros(b, gh, gw, params.hidden()),
                };
                let out = if record {
                    let (out, c) = run_sequence_cached(&x, &init, params, *mode)?;
                    *cache = Some(c);
                    out
                } else {
                    *cache = None;
                    run_sequence(&x, &init, params, *mode)?
                };
                if stateful {
                    *state = Some(detach_state(&out.final_state));
                }
                out.outputs
            }
            Op::Conv2d {
                spec,
                kernel,
                bias,
                input,
                in_shape,
            } => {
                *in_shape = x.shape().to_vec();
                if let [b, 1, h, w, c] = *x.shape() {
                    x = x.reshape(&[b, h, w, c])?;
                }
                let y = conv2d(&x, kernel, bias, spec)?;
                *input = record.then_some(x);
                y
            }
            Op::BatchNorm { state, cache } => {
                let (y, c) = batch_norm(&x, state, pass.mode)?;
                *cache = if record { c } else { None };
                y
            }
            Op::LeakyRelu { alpha, output } => {
                leaky_relu_inplace(x.data_mut(), T::lit(*alpha));
                *output = record.then(|| x.clone());
                x
            }
            Op::Dropout { rate, mask } => {
                let (y, m) = dropout(&x, *rate, pass.seed, pass.mode)?;
                *mask = record.then_some(m);
                y
            }
            Op::Gap { in_shape } => {
                *in_shape = x.shape().to_vec();
                global_avg_pool(&x)?
            }
            Op::Structural => x,
        };
        if !y.is_finite() {
            return Err(Error::NonFinite {
                layer: self.name.clone(),
            });
        }
        Ok(y)
    }

    fn backward(&mut self, g: Tensor<T>) -> Result<Tensor<T>> {
        let missing = Error::MissingCache("no recorded forward pass");
        match &mut self.op {
            Op::ConvLstm { params, cache, .. } => {
                let cache = cache.take().ok_or(missing)?;
                let grads = convlstm_backward(&g, &cache, params)?;
                grads.accumulate_into(params);
                Ok(grads.input)
            }
            Op::Conv2d {
                spec,
                kernel,
                bias,
                input,
                in_shape,
            } => {
                let x = input.take().ok_or(missing)?;
                let grads = conv2d_backward(&g, &x, kernel, spec)?;
                kernel.accumulate_grad(grads.kernel.data());
                bias.accumulate_grad(grads.bias.data());
                grads.input.reshape(in_shape)
            }
            Op::BatchNorm { state, cache } => {
                let cache = cache.take().ok_or(missing)?;
                batch_norm_backward(&g, &cache, state)
            }
            Op::LeakyRelu { alpha, output } => {
                let y = output.take().ok_or(missing)?;
                let alpha = T::lit(*alpha);
                let mut g = g;
                for (d, &v) in g.data_mut().iter_mut().zip(y.data()) {
                    if v <= T::zero() {
                        *d = *d * alpha;
                    }
                }
                Ok(g)
            }
            Op::Dropout { mask, .. } => {
                let mask = mask.take().ok_or(missing)?;
                Ok(dropout_backward(&g, mask.as_deref()))
            }
            Op::Gap { in_shape } => global_avg_pool_backward(&g, in_shape),
            Op::Structural => Ok(g),
        }
    }

    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        match &self.op {
            Op::ConvLstm { params, .. } => params.visit(&mut |n, t| f(&format!("{}.{n}", self.name), t)),
            Op::Conv2d { kernel, bias, .. } => {
                f(&format!("{}.kernel", self.name), kernel);
                f(&format!("{}.bias", self.name), bias);
            }
            Op::BatchNorm { state, .. } => {
                f(&format!("{}.gamma", self.name), &state.gamma);
                f(&format!("{}.beta", self.name), &state.beta);
            }
            _ => {}
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        let name = &self.name;
        match &mut self.op {
            Op::ConvLstm { params, .. } => params.visit_mut(&mut |n, t| f(&format!("{name}.{n}"), t)),
            Op::Conv2d { kernel, bias, .. } => {
                f(&format!("{name}.kernel"), kernel);
                f(&format!("{name}.bias"), bias);
            }
            Op::BatchNorm { state, .. } => {
                f(&format!("{name}.gamma"), &mut state.gamma);
                f(&format!("{name}.beta"), &mut state.beta);
            }
            _ => {}
        }
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        if let Op::BatchNorm { state, .. } = &mut self.op {
            f(&format!("{}.running_mean", self.name), &mut state.running_mean);
            f(&format!("{}.running_var", self.name), &mut state.running_var);
        }
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        if let Op::BatchNorm { state, .. } = &self.op {
            f(&format!("{}.running_mean", self.name), &state.running_mean);
            f(&format!("{}.running_var", self.name), &state.running_var);
        }
    }

    fn count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.len());
        n
    }
}

impl<T: Real> Network<T> {
    /// Instantiates `spec` with parameters drawn from a seeded generator.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let trace = spec.trace()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let peep = spec.config.peephole;
        let input = spec.input_shape();
        let main = build_branch("main", &spec.main, input, &trace, peep, &mut rng)?;
        let support = build_branch("support", &spec.support, input, &trace, peep, &mut rng)?;
        let fused = trace
            .iter()
            .rfind(|r| r.branch == "main")
            .map(|r| r.shape)
            .unwrap_or(input);
        let head = build_branch("head", &spec.head, fused, &trace, peep, &mut rng)?;
        Ok(Network {
            spec,
            main,
            support,
            head,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn architecture(&self) -> Architecture {
        self.spec.architecture
    }

    pub fn num_classes(&self) -> usize {
        self.spec.config.num_classes
    }

    fn stateful(&self) -> bool {
        self.spec.architecture == Architecture::Stateful
    }

    fn layers(&self) -> impl Iterator<Item = &Layer<T>> {
        self.main.iter().chain(&self.support).chain(&self.head)
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer<T>> {
        self.main.iter_mut().chain(&mut self.support).chain(&mut self.head)
    }

    /// Raw class scores `[B,K]` for clips `[B,T,H,W,1]`.
    pub fn forward_logits(&mut self, clips: &Tensor<T>, pass: Pass) -> Result<Tensor<T>> {
        if pass.record && pass.mode != Mode::Train {
            return Err(Error::invalid("recording activations requires TRAIN mode"));
        }
        let [b, t, h, w, c] = seq_dims(clips, "input")?;
        let want = self.spec.input_shape();
        if SymShape::Seq([t, h, w, c]) != want {
            return Err(Error::shape("network", "input", want, SymShape::Seq([t, h, w, c])));
        }
        let stateful = self.stateful();
        let mut x = clips.clone();
        for layer in &mut self.main {
            x = layer.forward(x, pass, stateful)?;
        }
        if !self.support.is_empty() {
            let mut s = clips.clone();
            for layer in &mut self.support {
                s = layer.forward(s, pass, stateful)?;
            }
            for (a, &v) in x.data_mut().iter_mut().zip(s.data()) {
                *a = *a + v;
            }
        }
        for layer in &mut self.head {
            x = layer.forward(x, pass, stateful)?;
        }
        x.reshape(&[b, self.num_classes()])
    }

    /// Class probabilities `[B,K]`.
    pub fn forward(&mut self, clips: &Tensor<T>, pass: Pass) -> Result<Tensor<T>> {
        let logits = self.forward_logits(clips, pass)?;
        activation(&logits, Activation::Softmax { axis: 1 })
    }

    /// Inference-mode probabilities.
    pub fn predict(&mut self, clips: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(clips, Pass::infer())
    }

    /// Backpropagates `dL/dlogits [B,K]` through the last recorded pass,
    /// accumulating into every parameter's gradient slot.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<()> {
        let &[b, k] = grad_logits.shape() else {
            return Err(Error::shape("backward", "rank", 2, grad_logits.rank()));
        };
        let mut g = grad_logits.clone().reshape(&[b, 1, 1, k])?;
        for layer in self.head.iter_mut().rev() {
            g = layer.backward(g)?;
        }
        if !self.support.is_empty() {
            let mut s = g.clone();
            for layer in self.support.iter_mut().rev() {
                s = layer.backward(s)?;
            }
        }
        for layer in self.main.iter_mut().rev() {
            g = layer.backward(g)?;
        }
        Ok(())
    }

    /// Drops any activations kept by a recorded pass.
    pub fn clear_caches(&mut self) {
        for layer in self.layers_mut() {
            match &mut layer.op {
                Op::ConvLstm { cache, .. } => *cache = None,
                Op::Conv2d { input, .. } => *input = None,
                Op::BatchNorm { cache, .. } => *cache = None,
                Op::LeakyRelu { output, .. } => *output = None,
                Op::Dropout { mask, .. } => *mask = None,
                _ => {}
            }
        }
    }

    /// Forgets all carried recurrent state.
    pub fn reset_states(&mut self) {
        for layer in self.layers_mut() {
            if let Op::ConvLstm { state, .. } = &mut layer.op {
                *state = None;
            }
        }
    }

    /// Zeroes carried state for the flagged batch rows.
    pub fn reset_rows(&mut self, rows: &[bool]) -> Result<()> {
        for layer in self.layers_mut() {
            if let Op::ConvLstm { state: Some(s), .. } = &mut layer.op {
                if s.batch() != rows.len() {
                    return Err(Error::shape("reset_rows", layer.name.clone(), s.batch(), rows.len()));
                }
                s.reset_rows(rows);
            }
        }
        Ok(())
    }

    /// Carried state per recurrent layer, in execution order.
    pub fn states(&self) -> Vec<(&str, Option<&ConvLstmState<T>>)> {
        self.layers()
            .filter_map(|l| match &l.op {
                Op::ConvLstm { state, .. } => Some((l.name.as_str(), state.as_ref())),
                _ => None,
            })
            .collect()
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for layer in self.layers() {
            layer.visit_params(f);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for layer in self.layers_mut() {
            layer.visit_params_mut(f);
        }
    }

    /// Batch-norm running statistics.
    pub fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for layer in self.layers() {
            layer.visit_buffers(f);
        }
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for layer in self.layers_mut() {
            layer.visit_buffers_mut(f);
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |_, t| t.zero_grad());
    }

    /// Trainable scalar count.
    pub fn count_parameters(&self) -> usize {
        self.layers().map(Layer::count).sum()
    }

    /// Trainable scalars per layer, skipping parameter-free layers.
    pub fn layer_parameters(&self) -> Vec<(String, usize)> {
        self.layers()
            .map(|l| (l.name.clone(), l.count()))
            .filter(|&(_, n)| n > 0)
            .collect()
    }
}

/// Reference stateless network for `num_classes`.
pub fn build_stateless<T: Real>(num_classes: usize, seed: u64) -> Result<Network<T>> {
    Network::new(NetworkSpec::stateless(super::ArchConfig::stateless(num_classes))?, seed)
}

/// Reference stateful network for `num_classes`.
pub fn build_stateful<T: Real>(num_classes: usize, seed: u64) -> Result<Network<T>> {
    Network::new(NetworkSpec::stateful(super::ArchConfig::stateful(num_classes))?, seed)
}
