//! Layer primitives: convolution, pooling, fully connected, activation,
//! normalization and loss, each with its exact adjoint.

use crate::exec::Exec;
use crate::scalar::Scalar;
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, mismatch, Matrix, ShapeError, Tensor4};

/// Geometry of a single-image convolution without bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        c: usize,
        h: usize,
        w: usize,
        f: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self, ShapeError> {
        if stride == 0 || k == 0 {
            return Err(ShapeError::Invalid {
                op: "conv2d",
                msg: format!("stride {stride} and kernel size {k} must be positive"),
            });
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(ShapeError::Invalid {
                op: "conv2d",
                msg: format!("input {h}x{w} with pad {pad} is smaller than kernel {k}x{k}"),
            });
        }
        Ok(Self {
            c,
            h,
            w,
            f,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        })
    }

    /// Geometry for `input` (n, c, h, w) against `kernel` (f, c, k, k).
    pub fn for_tensors<T: Scalar>(
        input: &Tensor4<T>,
        kernel: &Tensor4<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Self, ShapeError> {
        let [_, c, h, w] = input.dims();
        let [f, kc, kh, kw] = kernel.dims();
        if kc != c || kh != kw {
            return Err(mismatch("conv2d", &input.dims(), &kernel.dims()));
        }
        Self::new(c, h, w, f, kh, stride, pad)
    }

    pub fn patch_len(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }

    pub fn in_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn out_len(&self) -> usize {
        self.f * self.oh * self.ow
    }

    pub fn kernel_len(&self) -> usize {
        self.f * self.patch_len()
    }
}

/// Unfolds one image into a (c·k·k) × (oh·ow) patch matrix; padded taps are zero.
fn im2col<T: Scalar>(img: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.positions();
    let mut col = vec![T::zero(); g.patch_len() * p];
    for ci in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let r = (ci * g.k + ki) * g.k + kj;
                let row = &mut col[r * p..(r + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &img[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            row[oy * g.ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im_add<T: Scalar>(col: &[T], g: &ConvGeom, img: &mut [T]) {
    let p = g.positions();
    for ci in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let r = (ci * g.k + ki) * g.k + kj;
                let row = &col[r * p..(r + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut img[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += row[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of one (c, h, w) image with a (f, c, k, k) kernel.
pub fn conv_image_forward<T: Scalar>(img: &[T], kernel: &[T], g: &ConvGeom) -> Vec<T> {
    debug_assert_eq!(img.len(), g.in_len());
    debug_assert_eq!(kernel.len(), g.kernel_len());
    let col = im2col(img, g);
    let mut out = vec![T::zero(); g.out_len()];
    gemm_acc(g.f, g.patch_len(), g.positions(), kernel, &col, &mut out);
    out
}

/// Adjoint of [`conv_image_forward`]: returns (grad_image, grad_kernel).
pub fn conv_image_backward<T: Scalar>(grad_out: &[T], img: &[T], kernel: &[T], g: &ConvGeom) -> (Vec<T>, Vec<T>) {
    debug_assert_eq!(grad_out.len(), g.out_len());
    let col = im2col(img, g);
    let mut grad_kernel = vec![T::zero(); g.kernel_len()];
    gemm_nt_acc(g.f, g.positions(), g.patch_len(), grad_out, &col, &mut grad_kernel);
    let mut grad_col = vec![T::zero(); col.len()];
    gemm_tn_acc(g.patch_len(), g.f, g.positions(), kernel, grad_out, &mut grad_col);
    let mut grad_img = vec![T::zero(); g.in_len()];
    col2im_add(&grad_col, g, &mut grad_img);
    (grad_img, grad_kernel)
}

/// Batched 2-D convolution, no bias. Output spatial size is
/// `⌊(h + 2·pad − k)/stride⌋ + 1`.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor4<T>,
    kernel: &Tensor4<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor4<T>, ShapeError> {
    conv2d_forward_exec(input, kernel, stride, pad, Exec::default())
}

pub fn conv2d_forward_exec<T: Scalar>(
    input: &Tensor4<T>,
    kernel: &Tensor4<T>,
    stride: usize,
    pad: usize,
    exec: Exec,
) -> Result<Tensor4<T>, ShapeError> {
    let g = ConvGeom::for_tensors(input, kernel, stride, pad)?;
    let n = input.dims()[0];
    let outs = exec.map(n, |i| conv_image_forward(input.item(i), kernel.data(), &g));
    Tensor4::new([n, g.f, g.oh, g.ow], outs.concat())
}

/// Adjoint of [`conv2d_forward`]: returns (grad_input, grad_kernel).
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor4<T>,
    input: &Tensor4<T>,
    kernel: &Tensor4<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor4<T>, Tensor4<T>), ShapeError> {
    let g = ConvGeom::for_tensors(input, kernel, stride, pad)?;
    let n = input.dims()[0];
    let expect = [n, g.f, g.oh, g.ow];
    if grad_out.dims() != expect {
        return Err(mismatch("conv2d_backward", &grad_out.dims(), &expect));
    }
    let parts = Exec::default().map(n, |i| {
        conv_image_backward(grad_out.item(i), input.item(i), kernel.data(), &g)
    });
    let mut grad_input = Vec::with_capacity(input.len());
    let mut grad_kernel = Tensor4::zeros(kernel.dims());
    for (gi, gk) in parts {
        grad_input.extend_from_slice(&gi);
        for (a, b) in grad_kernel.data_mut().iter_mut().zip(&gk) {
            *a += *b;
        }
    }
    Ok((Tensor4::new(input.dims(), grad_input)?, grad_kernel))
}

/// Channel-wise mean over all spatial positions: (n, c, h, w) → n × c.
pub fn global_avg_pool<T: Scalar>(input: &Tensor4<T>) -> Result<Matrix<T>, ShapeError> {
    let [n, c, h, w] = input.dims();
    if h * w == 0 {
        return Err(ShapeError::Invalid {
            op: "global_avg_pool",
            msg: "empty spatial extent".into(),
        });
    }
    let hw = h * w;
    let scale = T::of(1.0 / hw as f64);
    let mut out = Matrix::zeros(n, c);
    for b in 0..n {
        let item = input.item(b);
        for ch in 0..c {
            let s: T = item[ch * hw..(ch + 1) * hw].iter().copied().sum();
            out.data[b * c + ch] = s * scale;
        }
    }
    Ok(out)
}

pub fn global_avg_pool_backward<T: Scalar>(grad: &Matrix<T>, dims: [usize; 4]) -> Result<Tensor4<T>, ShapeError> {
    let [n, c, h, w] = dims;
    if grad.rows != n || grad.cols != c {
        return Err(mismatch("global_avg_pool_backward", &[grad.rows, grad.cols], &[n, c]));
    }
    let hw = h * w;
    let scale = T::of(1.0 / hw as f64);
    let mut out = Tensor4::zeros(dims);
    for b in 0..n {
        let item = out.item_mut(b);
        for ch in 0..c {
            let v = grad.data[b * c + ch] * scale;
            item[ch * hw..(ch + 1) * hw].iter_mut().for_each(|x| *x = v);
        }
    }
    Ok(out)
}

/// `weights · input + bias` with `weights` shaped out × in.
pub fn fc_forward<T: Scalar>(input: &[T], weights: &Matrix<T>, bias: &[T]) -> Result<Vec<T>, ShapeError> {
    if input.len() != weights.cols || bias.len() != weights.rows {
        return Err(mismatch(
            "fc_forward",
            &[input.len(), bias.len()],
            &[weights.cols, weights.rows],
        ));
    }
    let mut out = bias.to_vec();
    gemm_acc(weights.rows, weights.cols, 1, &weights.data, input, &mut out);
    Ok(out)
}

/// (grad_input, grad_weights, grad_bias) of a fully connected layer.
pub type FcGrads<T> = (Vec<T>, Matrix<T>, Vec<T>);

/// Gradients of [`fc_forward`].
pub fn fc_backward<T: Scalar>(grad_out: &[T], input: &[T], weights: &Matrix<T>) -> Result<FcGrads<T>, ShapeError> {
    if grad_out.len() != weights.rows || input.len() != weights.cols {
        return Err(mismatch(
            "fc_backward",
            &[grad_out.len(), input.len()],
            &[weights.rows, weights.cols],
        ));
    }
    let mut grad_in = vec![T::zero(); weights.cols];
    gemm_tn_acc(weights.cols, weights.rows, 1, &weights.data, grad_out, &mut grad_in);
    let mut grad_w = Matrix::zeros(weights.rows, weights.cols);
    gemm_acc(weights.rows, 1, weights.cols, grad_out, input, &mut grad_w.data);
    Ok((grad_in, grad_w, grad_out.to_vec()))
}

pub fn relu<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
}

/// Passes gradient where the forward input was strictly positive.
pub fn relu_backward<T: Scalar>(grad: &[T], x: &[T]) -> Vec<T> {
    grad.iter()
        .zip(x)
        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
        .collect()
}

/// Softmax cross-entropy of one logit row against a class label.
pub fn cross_entropy<T: Scalar>(logits: &[T], label: usize) -> Result<T, ShapeError> {
    if label >= logits.len() {
        return Err(ShapeError::Invalid {
            op: "cross_entropy",
            msg: format!("label {label} out of range for {} logits", logits.len()),
        });
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
    Ok(lse - logits[label])
}

/// Gradient of [`cross_entropy`] with respect to the logits: softmax − onehot.
pub fn cross_entropy_backward<T: Scalar>(logits: &[T], label: usize) -> Result<Vec<T>, ShapeError> {
    if label >= logits.len() {
        return Err(ShapeError::Invalid {
            op: "cross_entropy_backward",
            msg: format!("label {label} out of range for {} logits", logits.len()),
        });
    }
    let mut p = softmax(logits);
    p[label] -= T::one();
    Ok(p)
}

pub fn softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = z.iter().map(|&v| (v - max).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub const BN_EPS: f64 = 1e-5;

/// Saved state from a batch-statistics normalization pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    dims: [usize; 4],
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

/// Per-channel normalization over (batch, rows, cols) using the current
/// batch statistics, followed by a learned affine map.
pub fn batch_norm_forward<T: Scalar>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
) -> Result<(Tensor4<T>, BatchNormCache<T>), ShapeError> {
    let [n, c, h, w] = x.dims();
    if gamma.len() != c || beta.len() != c {
        return Err(mismatch("batch_norm", &x.dims(), &[gamma.len(), beta.len()]));
    }
    let hw = h * w;
    let count = T::of((n * hw) as f64);
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); c];
    let mut y = Tensor4::zeros(x.dims());
    for ch in 0..c {
        let mut mean = T::zero();
        for b in 0..n {
            mean += x.item(b)[ch * hw..(ch + 1) * hw].iter().copied().sum::<T>();
        }
        mean = mean / count;
        let mut var = T::zero();
        for b in 0..n {
            for &v in &x.item(b)[ch * hw..(ch + 1) * hw] {
                var += (v - mean) * (v - mean);
            }
        }
        var = var / count;
        let is = T::one() / (var + T::of(BN_EPS)).sqrt();
        inv_std[ch] = is;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in 0..hw {
                let xh = (x.data()[base + i] - mean) * is;
                xhat[base + i] = xh;
                y.data_mut()[base + i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    Ok((
        y,
        BatchNormCache {
            dims: x.dims(),
            xhat,
            inv_std,
        },
    ))
}

/// (grad_x, grad_gamma, grad_beta) of batch normalization.
pub type BatchNormGrads<T> = (Tensor4<T>, Vec<T>, Vec<T>);

pub fn batch_norm_backward<T: Scalar>(
    grad_y: &Tensor4<T>,
    cache: &BatchNormCache<T>,
    gamma: &[T],
) -> Result<BatchNormGrads<T>, ShapeError> {
    if grad_y.dims() != cache.dims {
        return Err(mismatch("batch_norm_backward", &grad_y.dims(), &cache.dims));
    }
    let [n, c, h, w] = cache.dims;
    let hw = h * w;
    let count = T::of((n * hw) as f64);
    let mut gx = Tensor4::zeros(cache.dims);
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xh = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in 0..hw {
                let dy = grad_y.data()[base + i];
                sum_dy += dy;
                sum_dy_xh += dy * cache.xhat[base + i];
            }
        }
        gg[ch] = sum_dy_xh;
        gb[ch] = sum_dy;
        let scale = gamma[ch] * cache.inv_std[ch] / count;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in 0..hw {
                let dy = grad_y.data()[base + i];
                gx.data_mut()[base + i] = scale * (count * dy - sum_dy - cache.xhat[base + i] * sum_dy_xh);
            }
        }
    }
    Ok((gx, gg, gb))
}
