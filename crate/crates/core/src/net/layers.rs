//! 3×3 same-padding convolution, 2×2 max pooling and ReLU, forward and backward.

use super::tensor::{gemm, MatRef, Scalar, Tensor};
use super::NetError;

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

/// Unfolds one CHW sample into a `(c·9) × (h·w)` matrix of zero-padded taps.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, col: &mut [T]) {
    let plane = h * w;
    for ch in 0..c {
        let src_plane = &x[ch * plane..(ch + 1) * plane];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut col[(ch * TAPS + ky * KERNEL + kx) * plane..][..plane];
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::ZERO);
                        continue;
                    }
                    let src = &src_plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = T::ZERO;
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = T::ZERO;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters tap gradients back onto the sample.
fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, x: &mut [T]) {
    let plane = h * w;
    x.fill(T::ZERO);
    for ch in 0..c {
        let dst_plane = &mut x[ch * plane..(ch + 1) * plane];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &col[(ch * TAPS + ky * KERNEL + kx) * plane..][..plane];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut dst_plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            for (d, &s) in dst[..w - 1].iter_mut().zip(&src[1..]) {
                                *d += s;
                            }
                        }
                        1 => {
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                        _ => {
                            for (d, &s) in dst[1..].iter_mut().zip(&src[..w - 1]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Inputs with at most this many channels use the direct kernels below;
/// wider ones go through im2col + GEMM.
const DIRECT_MAX_CHANNELS: usize = 8;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum ConvPath {
    Direct,
    Gemm,
}

fn pick_path(in_c: usize) -> ConvPath {
    if in_c <= DIRECT_MAX_CHANNELS {
        ConvPath::Direct
    } else {
        ConvPath::Gemm
    }
}

/// `dst[x] += v * src[x + kx - 1]` over the columns where the source exists.
#[inline]
fn axpy_shifted<T: Scalar>(dst: &mut [T], src: &[T], v: T, kx: usize) {
    let w = dst.len();
    match kx {
        0 => {
            for (d, &s) in dst[1..].iter_mut().zip(&src[..w - 1]) {
                *d += v * s;
            }
        }
        1 => {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += v * s;
            }
        }
        _ => {
            for (d, &s) in dst[..w - 1].iter_mut().zip(&src[1..]) {
                *d += v * s;
            }
        }
    }
}

/// Adjoint of [`axpy_shifted`]: `dst[x + kx - 1] += v * src[x]`.
#[inline]
fn axpy_shifted_adjoint<T: Scalar>(dst: &mut [T], src: &[T], v: T, kx: usize) {
    axpy_shifted(dst, src, v, 2 - kx);
}

/// Dot product with eight independent partial sums.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::ZERO; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut total = T::ZERO;
    for (&x, &y) in ra.iter().zip(rb) {
        total += x * y;
    }
    for v in acc {
        total += v;
    }
    total
}

/// `Σ_x g[x] * src[x + kx - 1]` over valid columns.
#[inline]
fn dot_shifted<T: Scalar>(g: &[T], src: &[T], kx: usize) -> T {
    let w = g.len();
    match kx {
        0 => dot(&g[1..], &src[..w - 1]),
        1 => dot(g, src),
        _ => dot(&g[..w - 1], &src[1..]),
    }
}

fn conv_direct_sample<T: Scalar>(x: &[T], weight: &[T], bias: &[T], c: usize, h: usize, w: usize, out: &mut [T]) {
    let plane = h * w;
    for (o, &b) in bias.iter().enumerate() {
        let dst_plane = &mut out[o * plane..(o + 1) * plane];
        let wo = &weight[o * c * TAPS..(o + 1) * c * TAPS];
        for y in 0..h {
            let dst = &mut dst_plane[y * w..(y + 1) * w];
            dst.fill(b);
            for ch in 0..c {
                for ky in 0..KERNEL {
                    let Some(sy) = (y + ky).checked_sub(1).filter(|&sy| sy < h) else { continue };
                    let src = &x[ch * plane + sy * w..][..w];
                    for kx in 0..KERNEL {
                        axpy_shifted(dst, src, wo[ch * TAPS + ky * KERNEL + kx], kx);
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_direct_backward_sample<T: Scalar>(
    g: &[T],
    x: &[T],
    weight: &[T],
    c: usize,
    h: usize,
    w: usize,
    grad_w: &mut [T],
    grad_in: Option<&mut [T]>,
) {
    let plane = h * w;
    let out_c = g.len() / plane;
    for o in 0..out_c {
        let go = &g[o * plane..(o + 1) * plane];
        let gw = &mut grad_w[o * c * TAPS..(o + 1) * c * TAPS];
        for y in 0..h {
            let grow = &go[y * w..(y + 1) * w];
            for ch in 0..c {
                for ky in 0..KERNEL {
                    let Some(sy) = (y + ky).checked_sub(1).filter(|&sy| sy < h) else { continue };
                    let src = &x[ch * plane + sy * w..][..w];
                    for kx in 0..KERNEL {
                        gw[ch * TAPS + ky * KERNEL + kx] += dot_shifted(grow, src, kx);
                    }
                }
            }
        }
    }
    if let Some(gi) = grad_in {
        gi.fill(T::ZERO);
        for ch in 0..c {
            let gi_plane = &mut gi[ch * plane..(ch + 1) * plane];
            for sy in 0..h {
                let dst = &mut gi_plane[sy * w..(sy + 1) * w];
                for o in 0..out_c {
                    let wo = &weight[(o * c + ch) * TAPS..][..TAPS];
                    for ky in 0..KERNEL {
                        // output row y reads source row y + ky - 1
                        let Some(y) = (sy + 1).checked_sub(ky).filter(|&y| y < h) else { continue };
                        let grow = &g[o * plane + y * w..][..w];
                        for kx in 0..KERNEL {
                            axpy_shifted_adjoint(dst, grow, wo[ky * KERNEL + kx], kx);
                        }
                    }
                }
            }
        }
    }
}

fn check_conv_shapes<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias_len: usize,
) -> Result<(), NetError> {
    let [out_c, in_c, kh, kw] = weight.shape();
    if kh != KERNEL || kw != KERNEL {
        return Err(NetError::Shape(format!("conv kernel must be 3x3, got {kh}x{kw}")));
    }
    if input.channels() != in_c {
        return Err(NetError::Shape(format!(
            "conv expects {in_c} input channels, got {}",
            input.channels()
        )));
    }
    if bias_len != out_c {
        return Err(NetError::Shape(format!(
            "conv bias has {bias_len} entries for {out_c} output channels"
        )));
    }
    if input.height() == 0 || input.width() == 0 {
        return Err(NetError::Shape("conv input has zero spatial extent".into()));
    }
    Ok(())
}

/// Cross-correlation with a 3×3 kernel, zero padding 1 and stride 1.
/// `weight` is `(out, in, 3, 3)`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &[T],
) -> Result<Tensor<T>, NetError> {
    conv2d_via(input, weight, bias, pick_path(input.channels()))
}

fn conv2d_via<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &[T],
    path: ConvPath,
) -> Result<Tensor<T>, NetError> {
    check_conv_shapes(input, weight, bias.len())?;
    let [n, c, h, w] = input.shape();
    let out_c = weight.shape()[0];
    let plane = h * w;
    let mut out = Tensor::zeros([n, out_c, h, w]);
    if path == ConvPath::Direct {
        for s in 0..n {
            conv_direct_sample(input.sample(s), weight.data(), bias, c, h, w, out.sample_mut(s));
        }
        return Ok(out);
    }
    let mut col = vec![T::ZERO; c * TAPS * plane];
    let wmat = MatRef::row_major(weight.data(), out_c, c * TAPS);
    for s in 0..n {
        im2col(input.sample(s), c, h, w, &mut col);
        let dst = out.sample_mut(s);
        for (o, &b) in bias.iter().enumerate() {
            dst[o * plane..(o + 1) * plane].fill(b);
        }
        gemm(wmat, MatRef::row_major(&col, c * TAPS, plane), T::ONE, dst);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T: Scalar> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

/// Analytic gradients of [`conv2d`] given the upstream gradient and the
/// forward input. `grad_input` may be skipped for the first layer.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>, NetError> {
    conv2d_backward_via(grad_out, input, weight, need_input_grad, pick_path(input.channels()))
}

fn conv2d_backward_via<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    need_input_grad: bool,
    path: ConvPath,
) -> Result<ConvGrads<T>, NetError> {
    let [out_c, in_c, _, _] = weight.shape();
    check_conv_shapes(input, weight, out_c)?;
    let [n, c, h, w] = input.shape();
    if grad_out.shape() != [n, out_c, h, w] {
        return Err(NetError::Shape(format!(
            "conv backward: gradient {:?} vs expected {:?}",
            grad_out.shape(),
            [n, out_c, h, w]
        )));
    }
    let plane = h * w;
    let k = in_c * TAPS;
    let mut grad_w = Tensor::zeros(weight.shape());
    let mut grad_b = vec![T::ZERO; out_c];
    let mut grad_in = need_input_grad.then(|| Tensor::zeros(input.shape()));
    let mut col = match path {
        ConvPath::Gemm => vec![T::ZERO; k * plane],
        ConvPath::Direct => Vec::new(),
    };
    let wmat = MatRef::row_major(weight.data(), out_c, k);
    for s in 0..n {
        let g = grad_out.sample(s);
        for (o, gb) in grad_b.iter_mut().enumerate() {
            let mut acc = T::ZERO;
            for &v in &g[o * plane..(o + 1) * plane] {
                acc += v;
            }
            *gb += acc;
        }
        if path == ConvPath::Direct {
            let gi = grad_in.as_mut().map(|t| t.sample_mut(s));
            conv_direct_backward_sample(g, input.sample(s), weight.data(), c, h, w, grad_w.data_mut(), gi);
            continue;
        }
        let gmat = MatRef::row_major(g, out_c, plane);
        im2col(input.sample(s), c, h, w, &mut col);
        // dW += G · colᵀ
        gemm(gmat, MatRef::row_major(&col, k, plane).t(), T::ONE, grad_w.data_mut());
        if let Some(gi) = grad_in.as_mut() {
            // dcol = Wᵀ · G
            gemm(wmat.t(), gmat, T::ZERO, &mut col);
            col2im(&col, c, h, w, gi.sample_mut(s));
        }
    }
    Ok(ConvGrads {
        input: grad_in,
        weight: grad_w,
        bias: grad_b,
    })
}

/// 2×2 max pooling with stride 2. Also returns, per output element, the
/// flat input index it was taken from (first position on ties).
pub fn maxpool2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>), NetError> {
    let [n, c, h, w] = input.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(NetError::Shape(format!(
            "max pooling needs even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut argmax = vec![0u32; n * c * oh * ow];
    let src = input.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        let base = p * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let candidates = [
                    base + 2 * y * w + 2 * x,
                    base + 2 * y * w + 2 * x + 1,
                    base + (2 * y + 1) * w + 2 * x,
                    base + (2 * y + 1) * w + 2 * x + 1,
                ];
                let mut best = candidates[0];
                for &i in &candidates[1..] {
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                let o = p * oh * ow + y * ow + x;
                dst[o] = src[best];
                argmax[o] = best as u32;
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &[u32],
    input_shape: [usize; 4],
) -> Tensor<T> {
    let mut grad_in = Tensor::zeros(input_shape);
    let gi = grad_in.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        gi[i as usize] += g;
    }
    grad_in
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let mut out = input.clone();
    relu_in_place(&mut out);
    out
}

pub fn relu_in_place<T: Scalar>(t: &mut Tensor<T>) {
    for v in t.data_mut() {
        if !(*v > T::ZERO) {
            *v = T::ZERO;
        }
    }
}

/// Masks `grad` where the forward output was not positive (subgradient 0 at 0).
pub fn relu_backward_in_place<T: Scalar>(grad: &mut Tensor<T>, output: &Tensor<T>) {
    for (g, &o) in grad.data_mut().iter_mut().zip(output.data()) {
        if !(o > T::ZERO) {
            *g = T::ZERO;
        }
    }
}
