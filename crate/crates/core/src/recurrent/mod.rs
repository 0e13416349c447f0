//! Convolutional LSTM cell and sequence runner.
//!
//! Gate pre-activations are computed by two convolutions: the input kernel
//! (carrying the layer's stride and padding) and the recurrent kernel, which
//! always runs at stride 1 with SAME padding on the post-stride grid so that
//! `h` and `c` keep their shape. The four gates are packed along the channel
//! axis in the order input, forget, output, candidate:
//!
//! ```text
//! i = σ(Wxi*x + Whi*h + bi)      f = σ(Wxf*x + Whf*h + bf)
//! g = tanh(Wxg*x + Whg*h + bg)   c' = f∘c + i∘g
//! o = σ(Wxo*x + Who*h + bo)      h' = o∘tanh(c')
//! ```
//!
//! With peepholes enabled, `i` and `f` also see `wci∘c`, `wcf∘c` and `o`
//! sees `wco∘c'`.

mod state;

use rand::Rng;

pub use state::{detach_state, reset_state, ConvLstmState};

use crate::error::{Error, Result};
use crate::ops::activation::sigmoid;
use crate::ops::conv::{conv_backward_chunked, conv_forward_chunked, Geometry};
use crate::ops::{ConvSpec, Padding};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReturnMode {
    /// Every time step: `[B,T,H',W',C]`.
    Full,
    /// Only the final step: `[B,1,H',W',C]`.
    Last,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Input = 0,
    Forget = 1,
    Output = 2,
    Candidate = 3,
}

pub const GATES: [Gate; 4] = [Gate::Input, Gate::Forget, Gate::Output, Gate::Candidate];

/// Per-position peephole weights, each `[H',W',C]`.
#[derive(Clone, Debug)]
pub struct Peephole<T> {
    pub input: Tensor<T>,
    pub forget: Tensor<T>,
    pub output: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ConvLstmParams<T> {
    /// Geometry of the input convolution; `out_channels` is the hidden width.
    pub spec: ConvSpec,
    /// `[kh,kw,Cin,4C]`
    pub wx: Tensor<T>,
    /// `[kh,kw,C,4C]`
    pub wh: Tensor<T>,
    /// `[4C]`
    pub bias: Tensor<T>,
    pub peephole: Option<Peephole<T>>,
}

impl<T: Real> ConvLstmParams<T> {
    /// All-zero parameters.
    pub fn zeros(spec: ConvSpec) -> Self {
        let c = spec.out_channels;
        ConvLstmParams {
            spec,
            wx: Tensor::zeros(&[spec.kernel.0, spec.kernel.1, spec.in_channels, 4 * c]).with_grad(),
            wh: Tensor::zeros(&[spec.kernel.0, spec.kernel.1, c, 4 * c]).with_grad(),
            bias: Tensor::zeros(&[4 * c]).with_grad(),
            peephole: None,
        }
    }

    /// Uniform fan-in initialization with forget-gate bias 1.
    pub fn init(spec: ConvSpec, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(spec);
        let c = spec.out_channels;
        let fill = |t: &mut Tensor<T>, fan_in: usize, rng: &mut dyn rand::RngCore| {
            let limit = (3.0 / fan_in as f64).sqrt();
            for v in t.data_mut() {
                *v = T::lit(rng.gen_range(-limit..limit));
            }
        };
        fill(&mut p.wx, spec.fan_in(), rng);
        fill(&mut p.wh, spec.kernel.0 * spec.kernel.1 * c, rng);
        p.bias.data_mut()[c..2 * c].fill(T::one());
        p
    }

    /// Adds zero-initialized peephole weights for an `h × w` state grid.
    pub fn with_peephole(mut self, grid: (usize, usize)) -> Self {
        let shape = [grid.0, grid.1, self.spec.out_channels];
        self.peephole = Some(Peephole {
            input: Tensor::zeros(&shape).with_grad(),
            forget: Tensor::zeros(&shape).with_grad(),
            output: Tensor::zeros(&shape).with_grad(),
        });
        self
    }

    pub fn hidden(&self) -> usize {
        self.spec.out_channels
    }

    pub fn input_spec(&self) -> ConvSpec {
        ConvSpec {
            out_channels: 4 * self.hidden(),
            ..self.spec
        }
    }

    pub fn recurrent_spec(&self) -> ConvSpec {
        ConvSpec::new(
            self.spec.kernel,
            (1, 1),
            Padding::Same,
            self.hidden(),
            4 * self.hidden(),
        )
    }

    /// Extracts one gate's `(Wx, Wh, b)` slices.
    pub fn gate(&self, gate: Gate) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let c = self.hidden();
        let g = gate as usize;
        let slice = |t: &Tensor<T>| {
            let rows = t.len() / (4 * c);
            let mut shape = t.shape().to_vec();
            *shape.last_mut().unwrap() = c;
            let data = (0..rows)
                .flat_map(|r| t.data()[r * 4 * c + g * c..r * 4 * c + (g + 1) * c].iter().copied())
                .collect();
            Tensor::new(&shape, data).unwrap()
        };
        (slice(&self.wx), slice(&self.wh), slice(&self.bias))
    }

    /// Trainable scalars.
    pub fn count(&self) -> usize {
        self.wx.len()
            + self.wh.len()
            + self.bias.len()
            + self
                .peephole
                .as_ref()
                .map_or(0, |p| p.input.len() + p.forget.len() + p.output.len())
    }

    /// Visits every trainable tensor with a stable name suffix.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("wx", &mut self.wx);
        f("wh", &mut self.wh);
        f("bias", &mut self.bias);
        if let Some(p) = self.peephole.as_mut() {
            f("peep_i", &mut p.input);
            f("peep_f", &mut p.forget);
            f("peep_o", &mut p.output);
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f("wx", &self.wx);
        f("wh", &self.wh);
        f("bias", &self.bias);
        if let Some(p) = self.peephole.as_ref() {
            f("peep_i", &p.input);
            f("peep_f", &p.forget);
            f("peep_o", &p.output);
        }
    }

    /// Post-stride grid for an `h × w` input.
    pub fn grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.spec.output_hw(h, w)
    }

    fn check_peephole(&self, grid: (usize, usize)) -> Result<()> {
        if let Some(p) = &self.peephole {
            let want = [grid.0, grid.1, self.hidden()];
            if p.input.shape() != want {
                return Err(Error::shape(
                    "convlstm",
                    "peephole grid",
                    format!("{want:?}"),
                    format!("{:?}", p.input.shape()),
                ));
            }
        }
        Ok(())
    }
}

/// Result of running a sequence.
#[derive(Clone, Debug)]
pub struct SequenceOutput<T> {
    pub outputs: Tensor<T>,
    pub final_state: ConvLstmState<T>,
}

/// Activations saved for backpropagation through time.
#[derive(Clone, Debug)]
pub struct SequenceCache<T> {
    input: Tensor<T>,
    mode: ReturnMode,
    init_attached: bool,
    steps: usize,
    /// Post-activation gates per step, `[B,H',W',4C]` each.
    gates: Vec<Vec<T>>,
    /// `c` before each step (index t) and after the last (index T).
    cells: Vec<Vec<T>>,
    /// `h` before each step.
    hiddens: Vec<Vec<T>>,
    /// `tanh(c')` per step.
    tanh_cells: Vec<Vec<T>>,
    state_shape: [usize; 4],
}

/// Gradients of a sequence run.
#[derive(Clone, Debug)]
pub struct ConvLstmGrads<T> {
    pub wx: Tensor<T>,
    pub wh: Tensor<T>,
    pub bias: Tensor<T>,
    pub peephole: Option<[Tensor<T>; 3]>,
    pub input: Tensor<T>,
    /// `(dh₀, dc₀)`; `None` when the initial state was detached.
    pub init_state: Option<(Tensor<T>, Tensor<T>)>,
}

impl<T: Real> ConvLstmGrads<T> {
    /// Adds parameter gradients into the parameters' gradient slots.
    pub fn accumulate_into(&self, params: &mut ConvLstmParams<T>) {
        params.wx.accumulate_grad(self.wx.data());
        params.wh.accumulate_grad(self.wh.data());
        params.bias.accumulate_grad(self.bias.data());
        if let (Some(p), Some([gi, gf, go])) = (params.peephole.as_mut(), self.peephole.as_ref()) {
            p.input.accumulate_grad(gi.data());
            p.forget.accumulate_grad(gf.data());
            p.output.accumulate_grad(go.data());
        }
    }
}

fn seq_dims(xs: &Tensor<impl Real>) -> Result<[usize; 5]> {
    match *xs.shape() {
        [b, t, h, w, c] => Ok([b, t, h, w, c]),
        _ => Err(Error::shape("run_sequence", "rank", 5, xs.rank())),
    }
}

fn check_state<T: Real>(state: &ConvLstmState<T>, want: [usize; 4]) -> Result<()> {
    if state.h.shape() != want || state.c.shape() != want {
        return Err(Error::shape(
            "convlstm",
            "state grid",
            format!("{want:?}"),
            format!("{:?}", state.h.shape()),
        ));
    }
    Ok(())
}

struct Runner<'a, T> {
    params: &'a ConvLstmParams<T>,
    rec_geom: Geometry,
    pixels: usize,
    hidden: usize,
}

impl<'a, T: Real> Runner<'a, T> {
    fn new(params: &'a ConvLstmParams<T>, b: usize, grid: (usize, usize)) -> Result<Self> {
        let rec_geom = params
            .recurrent_spec()
            .geometry(&[b, grid.0, grid.1, params.hidden()])?;
        Ok(Runner {
            params,
            rec_geom,
            pixels: b * grid.0 * grid.1,
            hidden: params.hidden(),
        })
    }

    /// One step from the input pre-activation `a` (already holding `Wx*x + b`).
    /// Overwrites `a` with post-activation gates and updates `h`, `c`.
    fn step(&self, a: &mut [T], h: &mut [T], c: &mut [T], tanh_out: &mut [T]) {
        let p = self.params;
        let k = self.hidden;
        conv_forward_chunked(h, p.wh.data(), None, &self.rec_geom, a, true);
        let per_image = self.pixels / self.rec_geom.b * k;
        for px in 0..self.pixels {
            let gates = &mut a[px * 4 * k..(px + 1) * 4 * k];
            for ch in 0..k {
                let idx = px * k + ch;
                let peep_at = idx % per_image;
                let c_prev = c[idx];
                let (mut ai, mut af) = (gates[ch], gates[k + ch]);
                if let Some(pp) = &p.peephole {
                    ai = ai + pp.input.data()[peep_at] * c_prev;
                    af = af + pp.forget.data()[peep_at] * c_prev;
                }
                let i = sigmoid(ai);
                let f = sigmoid(af);
                let g = gates[3 * k + ch].tanh();
                let c_new = f * c_prev + i * g;
                let mut ao = gates[2 * k + ch];
                if let Some(pp) = &p.peephole {
                    ao = ao + pp.output.data()[peep_at] * c_new;
                }
                let o = sigmoid(ao);
                let tc = c_new.tanh();
                gates[ch] = i;
                gates[k + ch] = f;
                gates[2 * k + ch] = o;
                gates[3 * k + ch] = g;
                c[idx] = c_new;
                h[idx] = o * tc;
                tanh_out[idx] = tc;
            }
        }
    }
}

fn input_preactivations<T: Real>(xs: &Tensor<T>, params: &ConvLstmParams<T>) -> Result<(Vec<T>, Geometry)> {
    let [b, t, h, w, cin] = seq_dims(xs)?;
    let geom = params.input_spec().geometry(&[b * t, h, w, cin])?;
    let mut ax = vec![T::zero(); geom.rows() * geom.cout];
    conv_forward_chunked(
        xs.data(),
        params.wx.data(),
        Some(params.bias.data()),
        &geom,
        &mut ax,
        false,
    );
    Ok((ax, geom))
}

fn run<T: Real>(
    xs: &Tensor<T>,
    init: &ConvLstmState<T>,
    params: &ConvLstmParams<T>,
    mode: ReturnMode,
    keep_cache: bool,
) -> Result<(SequenceOutput<T>, Option<SequenceCache<T>>)> {
    let [b, steps, ..] = seq_dims(xs)?;
    if steps == 0 {
        return Err(Error::invalid("sequence length must be >= 1"));
    }
    let (ax, geom) = input_preactivations(xs, params)?;
    let grid = (geom.ho, geom.wo);
    let k = params.hidden();
    let state_shape = [b, grid.0, grid.1, k];
    check_state(init, state_shape)?;
    params.check_peephole(grid)?;
    let runner = Runner::new(params, b, grid)?;

    let plane = grid.0 * grid.1 * 4 * k;
    let state_len = b * grid.0 * grid.1 * k;
    let mut h = init.h.data().to_vec();
    let mut c = init.c.data().to_vec();
    let mut tanh_c = vec![T::zero(); state_len];
    let out_steps = if mode == ReturnMode::Full { steps } else { 1 };
    let mut outputs = Tensor::zeros(&[b, out_steps, grid.0, grid.1, k]);
    let mut cache = keep_cache.then(|| SequenceCache {
        input: xs.clone(),
        mode,
        init_attached: init.attached,
        steps,
        gates: Vec::with_capacity(steps),
        cells: Vec::with_capacity(steps + 1),
        hiddens: Vec::with_capacity(steps),
        tanh_cells: Vec::with_capacity(steps),
        state_shape,
    });

    let hw = grid.0 * grid.1 * k;
    for t in 0..steps {
        // Gather this step's input pre-activations: samples are laid out b-major.
        let mut a = Vec::with_capacity(b * plane);
        for n in 0..b {
            a.extend_from_slice(&ax[(n * steps + t) * plane..(n * steps + t + 1) * plane]);
        }
        if let Some(cache) = cache.as_mut() {
            cache.cells.push(c.clone());
            cache.hiddens.push(h.clone());
        }
        runner.step(&mut a, &mut h, &mut c, &mut tanh_c);
        if let Some(cache) = cache.as_mut() {
            cache.gates.push(a);
            cache.tanh_cells.push(tanh_c.clone());
        }
        let slot = match mode {
            ReturnMode::Full => Some(t),
            ReturnMode::Last => (t + 1 == steps).then_some(0),
        };
        if let Some(slot) = slot {
            let od = outputs.data_mut();
            for n in 0..b {
                od[(n * out_steps + slot) * hw..(n * out_steps + slot + 1) * hw]
                    .copy_from_slice(&h[n * hw..(n + 1) * hw]);
            }
        }
    }
    if let Some(cache) = cache.as_mut() {
        cache.cells.push(c.clone());
    }
    let final_state = ConvLstmState {
        h: Tensor::new(&state_shape, h)?,
        c: Tensor::new(&state_shape, c)?,
        attached: true,
    };
    Ok((SequenceOutput { outputs, final_state }, cache))
}

/// Runs the cell over `xs [B,T,H,W,Cin]` starting from `init`.
pub fn run_sequence<T: Real>(
    xs: &Tensor<T>,
    init: &ConvLstmState<T>,
    params: &ConvLstmParams<T>,
    mode: ReturnMode,
) -> Result<SequenceOutput<T>> {
    Ok(run(xs, init, params, mode, false)?.0)
}

/// Like [`run_sequence`], also returning the activations needed by
/// [`convlstm_backward`].
pub fn run_sequence_cached<T: Real>(
    xs: &Tensor<T>,
    init: &ConvLstmState<T>,
    params: &ConvLstmParams<T>,
    mode: ReturnMode,
) -> Result<(SequenceOutput<T>, SequenceCache<T>)> {
    let (out, cache) = run(xs, init, params, mode, true)?;
    Ok((out, cache.expect("cache requested")))
}

/// Single step on `x_t [B,H,W,Cin]`; returns `h_t` and the new state.
pub fn convlstm_step<T: Real>(
    x_t: &Tensor<T>,
    state: &ConvLstmState<T>,
    params: &ConvLstmParams<T>,
) -> Result<(Tensor<T>, ConvLstmState<T>)> {
    let &[b, h, w, c] = x_t.shape() else {
        return Err(Error::shape("convlstm_step", "rank", 4, x_t.rank()));
    };
    let xs = x_t.clone().reshape(&[b, 1, h, w, c])?;
    let out = run_sequence(&xs, state, params, ReturnMode::Last)?;
    let h_t = out.final_state.h.clone();
    Ok((h_t, out.final_state))
}

/// Backpropagation through time over one cached run.
///
/// `upstream` has the shape of the run's outputs. Gradients reach the
/// initial state only if it was attached.
pub fn convlstm_backward<T: Real>(
    upstream: &Tensor<T>,
    cache: &SequenceCache<T>,
    params: &ConvLstmParams<T>,
) -> Result<ConvLstmGrads<T>> {
    let [b, gh, gw, k] = cache.state_shape;
    let steps = cache.steps;
    if cache.gates.len() != steps || cache.cells.len() != steps + 1 {
        return Err(Error::MissingCache("convlstm step activations"));
    }
    let out_steps = if cache.mode == ReturnMode::Full { steps } else { 1 };
    let want = [b, out_steps, gh, gw, k];
    if upstream.shape() != want {
        return Err(Error::shape(
            "convlstm_backward",
            "upstream",
            format!("{want:?}"),
            format!("{:?}", upstream.shape()),
        ));
    }
    let runner = Runner::new(params, b, (gh, gw))?;
    let hw = gh * gw * k;
    let plane = gh * gw * 4 * k;
    let state_len = b * hw;

    let mut grad_wh = params.wh.zeros_like();
    let mut peep_grads = params
        .peephole
        .as_ref()
        .map(|p| [p.input.zeros_like(), p.forget.zeros_like(), p.output.zeros_like()]);
    // Pre-activation gradients, b-major like the batched input convolution.
    let mut d_pre = vec![T::zero(); b * steps * plane];
    let mut dh_next = vec![T::zero(); state_len];
    let mut dc_next = vec![T::zero(); state_len];
    let mut da = vec![T::zero(); b * plane];
    let one = T::one();

    for t in (0..steps).rev() {
        let slot = match cache.mode {
            ReturnMode::Full => Some(t),
            ReturnMode::Last => (t + 1 == steps).then_some(0),
        };
        if let Some(slot) = slot {
            let ud = upstream.data();
            for n in 0..b {
                let src = &ud[(n * out_steps + slot) * hw..(n * out_steps + slot + 1) * hw];
                for (d, &u) in dh_next[n * hw..(n + 1) * hw].iter_mut().zip(src) {
                    *d = *d + u;
                }
            }
        }
        let gates = &cache.gates[t];
        let c_prev = &cache.cells[t];
        let c_new = &cache.cells[t + 1];
        let tanh_c = &cache.tanh_cells[t];
        for px in 0..runner.pixels {
            let gv = &gates[px * 4 * k..(px + 1) * 4 * k];
            let dv = &mut da[px * 4 * k..(px + 1) * 4 * k];
            for ch in 0..k {
                let idx = px * k + ch;
                let peep_at = idx % hw;
                let (i, f, o, g) = (gv[ch], gv[k + ch], gv[2 * k + ch], gv[3 * k + ch]);
                let dh = dh_next[idx];
                let tc = tanh_c[idx];
                let dao = dh * tc * o * (one - o);
                let mut dc = dc_next[idx] + dh * o * (one - tc * tc);
                if let (Some(pp), Some(pg)) = (&params.peephole, peep_grads.as_mut()) {
                    dc = dc + dao * pp.output.data()[peep_at];
                    pg[2].data_mut()[peep_at] = pg[2].data()[peep_at] + dao * c_new[idx];
                }
                let dai = dc * g * i * (one - i);
                let daf = dc * c_prev[idx] * f * (one - f);
                let dag = dc * i * (one - g * g);
                let mut dcp = dc * f;
                if let (Some(pp), Some(pg)) = (&params.peephole, peep_grads.as_mut()) {
                    dcp = dcp + dai * pp.input.data()[peep_at] + daf * pp.forget.data()[peep_at];
                    pg[0].data_mut()[peep_at] = pg[0].data()[peep_at] + dai * c_prev[idx];
                    pg[1].data_mut()[peep_at] = pg[1].data()[peep_at] + daf * c_prev[idx];
                }
                dv[ch] = dai;
                dv[k + ch] = daf;
                dv[2 * k + ch] = dao;
                dv[3 * k + ch] = dag;
                dc_next[idx] = dcp;
            }
        }
        dh_next.fill(T::zero());
        conv_backward_chunked(
            &da,
            &cache.hiddens[t],
            params.wh.data(),
            &runner.rec_geom,
            grad_wh.data_mut(),
            None,
            Some(&mut dh_next),
        );
        for n in 0..b {
            d_pre[(n * steps + t) * plane..(n * steps + t + 1) * plane]
                .copy_from_slice(&da[n * plane..(n + 1) * plane]);
        }
    }

    let [_, _, h, w, cin] = seq_dims(&cache.input)?;
    let geom = params.input_spec().geometry(&[b * steps, h, w, cin])?;
    let mut grad_wx = params.wx.zeros_like();
    let mut grad_bias = params.bias.zeros_like();
    let mut grad_input = cache.input.zeros_like();
    conv_backward_chunked(
        &d_pre,
        cache.input.data(),
        params.wx.data(),
        &geom,
        grad_wx.data_mut(),
        Some(grad_bias.data_mut()),
        Some(grad_input.data_mut()),
    );
    let init_state = if cache.init_attached {
        Some((
            Tensor::new(&cache.state_shape, dh_next)?,
            Tensor::new(&cache.state_shape, dc_next)?,
        ))
    } else {
        None
    };
    Ok(ConvLstmGrads {
        wx: grad_wx,
        wh: grad_wh,
        bias: grad_bias,
        peephole: peep_grads,
        input: grad_input,
        init_state,
    })
}
