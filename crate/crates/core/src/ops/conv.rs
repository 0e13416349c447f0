//! 2D cross-correlation over NHWC tensors with kernels laid out `[kh, kw, Cin, Cout]`.

use std::borrow::Cow;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gemm, MatRef};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding so that the output extent is `ceil(n / s)`; an odd
    /// padding total puts the extra pixel on the bottom/right.
    Same,
    /// No padding; output extent is `floor((n - k) / s) + 1`.
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: Padding,
    pub in_channels: usize,
    pub out_channels: usize,
}

/// Output extent along one spatial axis, or `None` when no window fits.
pub fn output_extent(n: usize, k: usize, s: usize, padding: Padding) -> Option<usize> {
    if n == 0 || k == 0 || s == 0 {
        return None;
    }
    match padding {
        Padding::Same => Some(n.div_ceil(s)),
        Padding::Valid => (n >= k).then(|| (n - k) / s + 1),
    }
}

impl ConvSpec {
    pub fn new(
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
        in_channels: usize,
        out_channels: usize,
    ) -> Self {
        ConvSpec {
            kernel,
            stride,
            padding,
            in_channels,
            out_channels,
        }
    }

    /// Square kernel and stride shorthand.
    pub fn square(k: usize, s: usize, padding: Padding, cin: usize, cout: usize) -> Self {
        Self::new((k, k), (s, s), padding, cin, cout)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ho = output_extent(h, self.kernel.0, self.stride.0, self.padding).ok_or(Error::DegenerateOutput {
            op: "conv2d",
            axis: "height",
            extent: h,
            kernel: self.kernel.0,
            stride: self.stride.0,
        })?;
        let wo = output_extent(w, self.kernel.1, self.stride.1, self.padding).ok_or(Error::DegenerateOutput {
            op: "conv2d",
            axis: "width",
            extent: w,
            kernel: self.kernel.1,
            stride: self.stride.1,
        })?;
        Ok((ho, wo))
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.kernel.0, self.kernel.1, self.in_channels, self.out_channels]
    }

    /// Number of inputs feeding one output scalar.
    pub fn fan_in(&self) -> usize {
        self.kernel.0 * self.kernel.1 * self.in_channels
    }

    pub(crate) fn geometry(&self, input_shape: &[usize]) -> Result<Geometry> {
        if input_shape.len() != 4 {
            return Err(Error::shape("conv2d", "rank", 4, input_shape.len()));
        }
        let [b, h, w, cin] = [input_shape[0], input_shape[1], input_shape[2], input_shape[3]];
        if cin != self.in_channels {
            return Err(Error::shape("conv2d", "input channels", self.in_channels, cin));
        }
        let (ho, wo) = self.output_hw(h, w)?;
        let pad = |n: usize, k: usize, s: usize, o: usize| match self.padding {
            Padding::Valid => 0,
            Padding::Same => ((o - 1) * s + k).saturating_sub(n) / 2,
        };
        Ok(Geometry {
            b,
            h,
            w,
            cin,
            ho,
            wo,
            cout: self.out_channels,
            kh: self.kernel.0,
            kw: self.kernel.1,
            sh: self.stride.0,
            sw: self.stride.1,
            pt: pad(h, self.kernel.0, self.stride.0, ho),
            pl: pad(w, self.kernel.1, self.stride.1, wo),
        })
    }
}

/// Resolved extents of one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub ho: usize,
    pub wo: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub pt: usize,
    pub pl: usize,
}

impl Geometry {
    pub fn rows(&self) -> usize {
        self.b * self.ho * self.wo
    }

    pub fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.b, self.ho, self.wo, self.cout]
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1
    }

    /// Input coordinate for output `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn source(o: usize, k: usize, s: usize, pad: usize, n: usize) -> Option<usize> {
        (o * s + k).checked_sub(pad).filter(|&i| i < n)
    }
}

/// Unfolds receptive fields into rows (`[b·ho·wo, kh·kw·cin]`).
pub(crate) fn im2col<'a, T: Real>(x: &'a [T], g: &Geometry) -> Cow<'a, [T]> {
    if g.is_pointwise() {
        return Cow::Borrowed(x);
    }
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.rows() * patch];
    let image = g.h * g.w * g.cin;
    cols.par_chunks_mut(g.ho * g.wo * patch)
        .enumerate()
        .for_each(|(n, out)| {
            let xs = &x[n * image..(n + 1) * image];
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let row = &mut out[(oy * g.wo + ox) * patch..][..patch];
                    for ky in 0..g.kh {
                        let Some(iy) = Geometry::source(oy, ky, g.sh, g.pt, g.h) else {
                            continue;
                        };
                        for kx in 0..g.kw {
                            let Some(ix) = Geometry::source(ox, kx, g.sw, g.pl, g.w) else {
                                continue;
                            };
                            row[(ky * g.kw + kx) * g.cin..][..g.cin]
                                .copy_from_slice(&xs[(iy * g.w + ix) * g.cin..][..g.cin]);
                        }
                    }
                }
            }
        });
    Cow::Owned(cols)
}

/// Scatter-adds unfolded rows back onto the image grid.
pub(crate) fn col2im_add<T: Real>(cols: &[T], g: &Geometry, dx: &mut [T]) {
    if g.is_pointwise() {
        for (d, &c) in dx.iter_mut().zip(cols) {
            *d = *d + c;
        }
        return;
    }
    let patch = g.patch();
    let image = g.h * g.w * g.cin;
    dx.par_chunks_mut(image).enumerate().for_each(|(n, xs)| {
        let rows = &cols[n * g.ho * g.wo * patch..(n + 1) * g.ho * g.wo * patch];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = &rows[(oy * g.wo + ox) * patch..][..patch];
                for ky in 0..g.kh {
                    let Some(iy) = Geometry::source(oy, ky, g.sh, g.pt, g.h) else {
                        continue;
                    };
                    for kx in 0..g.kw {
                        let Some(ix) = Geometry::source(ox, kx, g.sw, g.pl, g.w) else {
                            continue;
                        };
                        let dst = &mut xs[(iy * g.w + ix) * g.cin..][..g.cin];
                        let src = &row[(ky * g.kw + kx) * g.cin..][..g.cin];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
            }
        }
    });
}

/// Raw forward: `out[rows, cout] = cols · kernel (+ out if accumulate) (+ bias)`.
pub(crate) fn conv_forward_raw<T: Real>(
    x: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    g: &Geometry,
    out: &mut [T],
    accumulate: bool,
) {
    let cols = im2col(x, g);
    gemm(
        MatRef::row_major(&cols, g.rows(), g.patch()),
        MatRef::row_major(kernel, g.patch(), g.cout),
        out,
        accumulate,
    );
    if let Some(bias) = bias {
        for row in out.chunks_mut(g.cout) {
            for (o, &b) in row.iter_mut().zip(bias) {
                *o = *o + b;
            }
        }
    }
}

/// Raw backward; every gradient buffer is accumulated into.
pub(crate) fn conv_backward_raw<T: Real>(
    upstream: &[T],
    x: &[T],
    kernel: &[T],
    g: &Geometry,
    grad_kernel: &mut [T],
    grad_bias: Option<&mut [T]>,
    grad_input: Option<&mut [T]>,
) {
    let (rows, patch) = (g.rows(), g.patch());
    let cols = im2col(x, g);
    gemm(
        MatRef::transposed(&cols, rows, patch),
        MatRef::row_major(upstream, rows, g.cout),
        grad_kernel,
        true,
    );
    if let Some(gb) = grad_bias {
        for row in upstream.chunks(g.cout) {
            for (b, &u) in gb.iter_mut().zip(row) {
                *b = *b + u;
            }
        }
    }
    if let Some(dx) = grad_input {
        let mut dcols = vec![T::zero(); rows * patch];
        gemm(
            MatRef::row_major(upstream, rows, g.cout),
            MatRef::transposed(kernel, patch, g.cout),
            &mut dcols,
            false,
        );
        col2im_add(&dcols, g, dx);
    }
}

/// Upper bound on unfolded elements per GEMM call; larger batches are split.
const MAX_COLS: usize = 1 << 24;

fn batch_chunk(g: &Geometry) -> usize {
    (MAX_COLS / (g.ho * g.wo * g.patch()).max(1)).clamp(1, g.b.max(1))
}

/// [`conv_forward_raw`] split over batch chunks to bound im2col memory.
pub(crate) fn conv_forward_chunked<T: Real>(
    x: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    g: &Geometry,
    out: &mut [T],
    accumulate: bool,
) {
    let chunk = batch_chunk(g);
    let (image, result) = (g.h * g.w * g.cin, g.ho * g.wo * g.cout);
    for start in (0..g.b).step_by(chunk) {
        let n = chunk.min(g.b - start);
        let sub = Geometry { b: n, ..*g };
        conv_forward_raw(
            &x[start * image..(start + n) * image],
            kernel,
            bias,
            &sub,
            &mut out[start * result..(start + n) * result],
            accumulate,
        );
    }
}

/// [`conv_backward_raw`] split over batch chunks. Chunks are visited in a
/// fixed order so kernel gradients are reduced deterministically.
pub(crate) fn conv_backward_chunked<T: Real>(
    upstream: &[T],
    x: &[T],
    kernel: &[T],
    g: &Geometry,
    grad_kernel: &mut [T],
    mut grad_bias: Option<&mut [T]>,
    mut grad_input: Option<&mut [T]>,
) {
    let chunk = batch_chunk(g);
    let (image, result) = (g.h * g.w * g.cin, g.ho * g.wo * g.cout);
    for start in (0..g.b).step_by(chunk) {
        let n = chunk.min(g.b - start);
        let sub = Geometry { b: n, ..*g };
        conv_backward_raw(
            &upstream[start * result..(start + n) * result],
            &x[start * image..(start + n) * image],
            kernel,
            &sub,
            grad_kernel,
            grad_bias.as_deref_mut(),
            grad_input
                .as_deref_mut()
                .map(|dx| &mut dx[start * image..(start + n) * image]),
        );
    }
}

fn check_params<T: Real>(kernel: &Tensor<T>, bias: &Tensor<T>, spec: &ConvSpec) -> Result<()> {
    let want = spec.kernel_shape();
    if kernel.shape() != want {
        return Err(Error::shape(
            "conv2d",
            "kernel",
            format!("{want:?}"),
            format!("{:?}", kernel.shape()),
        ));
    }
    if bias.shape() != [spec.out_channels] {
        return Err(Error::shape(
            "conv2d",
            "bias",
            format!("[{}]", spec.out_channels),
            format!("{:?}", bias.shape()),
        ));
    }
    Ok(())
}

/// Cross-correlation of `input [B,H,W,Cin]` with `kernel [kh,kw,Cin,Cout]` plus bias.
pub fn conv2d<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
    check_params(kernel, bias, spec)?;
    let g = spec.geometry(input.shape())?;
    let mut out = Tensor::zeros(&g.output_shape());
    conv_forward_raw(
        input.data(),
        kernel.data(),
        Some(bias.data()),
        &g,
        out.data_mut(),
        false,
    );
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Analytic gradients of [`conv2d`] given the forward input and kernel.
pub fn conv2d_backward<T: Real>(
    upstream: &Tensor<T>,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<ConvGrads<T>> {
    let g = spec.geometry(input.shape())?;
    if upstream.shape() != g.output_shape() {
        return Err(Error::shape(
            "conv2d_backward",
            "upstream",
            format!("{:?}", g.output_shape()),
            format!("{:?}", upstream.shape()),
        ));
    }
    let mut gi = input.zeros_like();
    let mut gk = kernel.zeros_like();
    let mut gb = Tensor::zeros(&[spec.out_channels]);
    conv_backward_raw(
        upstream.data(),
        input.data(),
        kernel.data(),
        &g,
        gk.data_mut(),
        Some(gb.data_mut()),
        Some(gi.data_mut()),
    );
    Ok(ConvGrads {
        input: gi,
        kernel: gk,
        bias: gb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct nested-loop cross-correlation.
    fn brute_force(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, spec: &ConvSpec) -> Tensor<f64> {
        let g = spec.geometry(x.shape()).unwrap();
        let mut out = Tensor::zeros(&g.output_shape());
        for n in 0..g.b {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    for co in 0..g.cout {
                        let mut acc = b.data()[co];
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = (oy * g.sh + ky) as isize - g.pt as isize;
                                let ix = (ox * g.sw + kx) as isize - g.pl as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                for ci in 0..g.cin {
                                    let xv = x.data()[((n * g.h + iy as usize) * g.w + ix as usize) * g.cin + ci];
                                    let kv = k.data()[((ky * g.kw + kx) * g.cin + ci) * g.cout + co];
                                    acc += xv * kv;
                                }
                            }
                        }
                        out.data_mut()[((n * g.ho + oy) * g.wo + ox) * g.cout + co] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn table_row_extent() {
        let spec = ConvSpec::square(7, 2, Padding::Valid, 1, 8);
        assert_eq!(spec.output_hw(64, 64).unwrap(), (29, 29));
    }

    #[test]
    fn identity_kernel() {
        let spec = ConvSpec::square(1, 1, Padding::Valid, 1, 1);
        let x = Tensor::<f64>::new(&[3, 1, 1, 1], vec![1.5, -2.0, 0.25]).unwrap();
        let y = conv2d(&x, &Tensor::full(&[1, 1, 1, 1], 1.0), &Tensor::zeros(&[1]), &spec).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn ones_kernel_sums_window() {
        let spec = ConvSpec::square(3, 1, Padding::Valid, 1, 1);
        let x = Tensor::<f32>::full(&[1, 4, 4, 1], 1.0);
        let y = conv2d(&x, &Tensor::full(&[3, 3, 1, 1], 1.0), &Tensor::zeros(&[1]), &spec).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 1]);
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn errors_name_the_axis() {
        let spec = ConvSpec::square(3, 1, Padding::Valid, 2, 1);
        let x = Tensor::<f32>::zeros(&[1, 4, 4, 1]);
        let err = conv2d(&x, &Tensor::zeros(&[3, 3, 2, 1]), &Tensor::zeros(&[1]), &spec).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");

        let spec = ConvSpec::new((5, 1), (1, 1), Padding::Valid, 1, 1);
        let x = Tensor::<f32>::zeros(&[1, 4, 4, 1]);
        let err = conv2d(&x, &Tensor::zeros(&[5, 1, 1, 1]), &Tensor::zeros(&[1]), &spec).unwrap_err();
        assert!(matches!(err, Error::DegenerateOutput { axis: "height", .. }), "{err}");
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, s, pad) in &[
            (3, 1, Padding::Same),
            (3, 2, Padding::Same),
            (3, 2, Padding::Valid),
            (2, 1, Padding::Same),
            (5, 3, Padding::Valid),
            (1, 1, Padding::Valid),
        ] {
            let spec = ConvSpec::square(k, s, pad, 3, 4);
            let x = random(&[2, 7, 6, 3], &mut rng);
            let kern = random(&spec.kernel_shape(), &mut rng);
            let b = random(&[4], &mut rng);
            let fast = conv2d(&x, &kern, &b, &spec).unwrap();
            let slow = brute_force(&x, &kern, &b, &spec);
            assert!(fast.max_abs_diff(&slow) < 1e-12, "k={k} s={s} {pad:?}");
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = ConvSpec::square(3, 2, Padding::Same, 2, 3);
        let x = random(&[2, 5, 5, 2], &mut rng);
        let k = random(&spec.kernel_shape(), &mut rng);
        let up = Tensor::zeros(&[2, 3, 3, 3]);
        let g = conv2d_backward(&up, &x, &k, &spec).unwrap();
        assert!(g
            .input
            .data()
            .iter()
            .chain(g.kernel.data())
            .chain(g.bias.data())
            .all(|&v| v == 0.0));
    }

    #[test]
    fn kernel_grad_of_sum_is_patch_overlap() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = ConvSpec::square(2, 1, Padding::Valid, 1, 1);
        let x = random(&[1, 3, 3, 1], &mut rng);
        let k = random(&[2, 2, 1, 1], &mut rng);
        let up = Tensor::full(&[1, 2, 2, 1], 1.0);
        let g = conv2d_backward(&up, &x, &k, &spec).unwrap();
        // d(sum out)/dk[i,j] = sum of x over the 2×2 block starting at (i,j).
        let xd = x.data();
        for i in 0..2 {
            for j in 0..2 {
                let overlap: f64 = (0..2)
                    .flat_map(|a| (0..2).map(move |b| (a, b)))
                    .map(|(a, b)| xd[(i + a) * 3 + (j + b)])
                    .sum();
                assert!((g.kernel.data()[i * 2 + j] - overlap).abs() < 1e-12);
            }
        }
        assert_eq!(g.bias.data(), &[4.0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let pad = if seed % 2 == 0 { Padding::Same } else { Padding::Valid };
            let spec = ConvSpec::square(3, 1 + (seed as usize % 2), pad, 2, 3);
            let x = random(&[2, 5, 6, 2], &mut rng);
            let k = random(&spec.kernel_shape(), &mut rng);
            let b = random(&[3], &mut rng);
            let out_shape = conv2d(&x, &k, &b, &spec).unwrap().shape().to_vec();
            let r = random(&out_shape, &mut rng);
            let loss = |y: &Tensor<f64>| y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>();

            let grads = conv2d_backward(&r, &x, &k, &spec).unwrap();
            let ex = finite_diff_check(
                |p| Ok(Tensor::scalar(loss(&conv2d(p, &k, &b, &spec)?))),
                &x,
                &grads.input,
                1e-5,
            )
            .unwrap();
            let ek = finite_diff_check(
                |p| Ok(Tensor::scalar(loss(&conv2d(&x, p, &b, &spec)?))),
                &k,
                &grads.kernel,
                1e-5,
            )
            .unwrap();
            let eb = finite_diff_check(
                |p| Ok(Tensor::scalar(loss(&conv2d(&x, &k, p, &spec)?))),
                &b,
                &grads.bias,
                1e-5,
            )
            .unwrap();
            assert!(ex < 1e-6 && ek < 1e-6 && eb < 1e-6, "seed {seed}: {ex} {ek} {eb}");
        }
    }

    /// Extent by sliding a window and counting placements.
    fn enumerate_valid(n: usize, k: usize, s: usize) -> usize {
        (0..n).step_by(s).filter(|&start| start + k <= n).count()
    }

    fn enumerate_same(n: usize, s: usize) -> usize {
        (0..n).step_by(s).count()
    }

    proptest! {
        #[test]
        fn extent_formulas_match_enumeration(n in 1usize..=64, k in 1usize..=64, s in 1usize..=64) {
            let valid = output_extent(n, k, s, Padding::Valid);
            let counted = enumerate_valid(n, k, s);
            prop_assert_eq!(valid.unwrap_or(0), counted);
            prop_assert_eq!(output_extent(n, k, s, Padding::Same), Some(enumerate_same(n, s)));
        }
    }
}
