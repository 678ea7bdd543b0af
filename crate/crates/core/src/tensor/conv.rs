//! im2col-based convolution kernels.
//!
//! Columns for a whole batch are laid out as `[C·kh·kw, N·L]` where `L` is the
//! number of output positions per sample, so one product covers the batch.

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::{dim_err, Result};
use crate::scalar::Scalar;

/// Geometry of a convolution reading a `[C, H, W]` image and producing
/// `[F, OH, OW]` per sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn conv2d(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        const OP: &str = "conv2d";
        if input.len() != 4 || kernel.len() != 4 {
            return dim_err(OP, format!("expected 4-d input and kernel, got {input:?} and {kernel:?}"));
        }
        if stride == 0 {
            return dim_err(OP, "stride must be >= 1");
        }
        let [n, c, h, w] = [input[0], input[1], input[2], input[3]];
        let [f, kc, kh, kw] = [kernel[0], kernel[1], kernel[2], kernel[3]];
        if kc != c {
            return dim_err(OP, format!("axis 1: input has {c} channels, kernel expects {kc}"));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return dim_err(
                OP,
                format!("axes 2,3: kernel {kh}x{kw} exceeds padded input {}x{}", h + 2 * padding, w + 2 * padding),
            );
        }
        Ok(ConvGeometry {
            batch: n,
            in_channels: c,
            in_h: h,
            in_w: w,
            out_channels: f,
            kh,
            kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        })
    }

    /// Geometry of the convolution whose input-gradient is the given transposed
    /// convolution: it reads the `[F, H', W']` output and produces `[C, H, W]`.
    pub fn conv_transpose2d(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        const OP: &str = "conv_transpose2d";
        if input.len() != 4 || kernel.len() != 4 {
            return dim_err(OP, format!("expected 4-d input and kernel, got {input:?} and {kernel:?}"));
        }
        if stride == 0 {
            return dim_err(OP, "stride must be >= 1");
        }
        let [n, c, h, w] = [input[0], input[1], input[2], input[3]];
        let [kc, f, kh, kw] = [kernel[0], kernel[1], kernel[2], kernel[3]];
        if kc != c {
            return dim_err(OP, format!("axis 1: input has {c} channels, kernel expects {kc}"));
        }
        if padding >= kh || padding >= kw {
            return dim_err(OP, format!("axes 2,3: padding {padding} must be < kernel {kh}x{kw}"));
        }
        let oh = ((h - 1) * stride + kh).checked_sub(2 * padding);
        let ow = ((w - 1) * stride + kw).checked_sub(2 * padding);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return dim_err(OP, "axes 2,3: output would be empty");
        };
        if oh == 0 || ow == 0 {
            return dim_err(OP, "axes 2,3: output would be empty");
        }
        // The forward conv of the adjoint pair maps [F, oh, ow] -> [C, h, w].
        Ok(ConvGeometry {
            batch: n,
            in_channels: f,
            in_h: oh,
            in_w: ow,
            out_channels: c,
            kh,
            kw,
            stride,
            padding,
            out_h: h,
            out_w: w,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    fn out_len(&self) -> usize {
        self.out_channels * self.positions()
    }

    /// Offsets `(row, col)` for `(ki, oy)` pairs, or `None` when the tap falls in padding.
    #[inline]
    fn tap(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + k).checked_sub(self.padding)?;
        (i < extent).then_some(i)
    }

    /// `[N, C, H, W]` -> `[C·kh·kw, N·L]`
    pub fn im2col<T: Scalar>(&self, input: &[T]) -> Vec<T> {
        let l = self.positions();
        let nl = self.batch * l;
        let mut col = vec![T::zero(); self.col_rows() * nl];
        for n in 0..self.batch {
            let src = &input[n * self.in_len()..(n + 1) * self.in_len()];
            for c in 0..self.in_channels {
                let plane = &src[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
                for ki in 0..self.kh {
                    for kj in 0..self.kw {
                        let row = (c * self.kh + ki) * self.kw + kj;
                        let dst = &mut col[row * nl + n * l..row * nl + (n + 1) * l];
                        for oy in 0..self.out_h {
                            let Some(iy) = self.tap(oy, ki, self.in_h) else { continue };
                            for ox in 0..self.out_w {
                                if let Some(ix) = self.tap(ox, kj, self.in_w) {
                                    dst[oy * self.out_w + ox] = plane[iy * self.in_w + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        col
    }

    /// Scatter-adds `[C·kh·kw, N·L]` columns back into `[N, C, H, W]`.
    pub fn col2im<T: Scalar>(&self, col: &[T], out: &mut [T]) {
        let l = self.positions();
        let nl = self.batch * l;
        let in_len = self.in_len();
        for n in 0..self.batch {
            let dst = &mut out[n * in_len..(n + 1) * in_len];
            for c in 0..self.in_channels {
                let plane = &mut dst[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
                for ki in 0..self.kh {
                    for kj in 0..self.kw {
                        let row = (c * self.kh + ki) * self.kw + kj;
                        let src = &col[row * nl + n * l..row * nl + (n + 1) * l];
                        for oy in 0..self.out_h {
                            let Some(iy) = self.tap(oy, ki, self.in_h) else { continue };
                            for ox in 0..self.out_w {
                                if let Some(ix) = self.tap(ox, kj, self.in_w) {
                                    plane[iy * self.in_w + ix] += src[oy * self.out_w + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// `[F, N·L]` -> `[N, F, L]`
    fn unpack<T: Scalar>(&self, packed: &[T]) -> Vec<T> {
        let l = self.positions();
        let nl = self.batch * l;
        let mut out = vec![T::zero(); self.batch * self.out_len()];
        for f in 0..self.out_channels {
            for n in 0..self.batch {
                out[(n * self.out_channels + f) * l..(n * self.out_channels + f + 1) * l]
                    .copy_from_slice(&packed[f * nl + n * l..f * nl + (n + 1) * l]);
            }
        }
        out
    }

    /// `[N, F, L]` -> `[F, N·L]`
    fn pack<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let l = self.positions();
        let nl = self.batch * l;
        let mut packed = vec![T::zero(); self.out_channels * nl];
        for f in 0..self.out_channels {
            for n in 0..self.batch {
                packed[f * nl + n * l..f * nl + (n + 1) * l]
                    .copy_from_slice(&x[(n * self.out_channels + f) * l..(n * self.out_channels + f + 1) * l]);
            }
        }
        packed
    }

    /// Convolution: `[N,C,H,W] * [F,C,kh,kw] -> [N,F,OH,OW]`, bias added per `F`.
    pub fn forward<T: Scalar>(&self, input: &[T], kernel: &[T], bias: Option<&[T]>) -> Vec<T> {
        let col = self.im2col(input);
        let nl = self.batch * self.positions();
        let mut packed = vec![T::zero(); self.out_channels * nl];
        gemm_nn(kernel, &col, &mut packed, self.out_channels, self.col_rows(), nl);
        let mut out = self.unpack(&packed);
        if let Some(b) = bias {
            add_channel_bias(&mut out, b, self.positions());
        }
        out
    }

    /// Gradient of `forward` with respect to its input.
    pub fn backward_input<T: Scalar>(&self, grad_out: &[T], kernel: &[T]) -> Vec<T> {
        let nl = self.batch * self.positions();
        let packed = self.pack(grad_out);
        let mut dcol = vec![T::zero(); self.col_rows() * nl];
        gemm_tn(kernel, &packed, &mut dcol, self.col_rows(), self.out_channels, nl);
        let mut dx = vec![T::zero(); self.batch * self.in_len()];
        self.col2im(&dcol, &mut dx);
        dx
    }

    /// Gradient of `forward` with respect to the `[F, C·kh·kw]` kernel.
    pub fn backward_kernel<T: Scalar>(&self, grad_out: &[T], input: &[T]) -> Vec<T> {
        let nl = self.batch * self.positions();
        let packed = self.pack(grad_out);
        let col = self.im2col(input);
        let mut dk = vec![T::zero(); self.out_channels * self.col_rows()];
        gemm_nt(&packed, &col, &mut dk, self.out_channels, nl, self.col_rows());
        dk
    }

    /// Sum of a `[N, F, L]` gradient over everything but `F`.
    pub fn backward_bias<T: Scalar>(&self, grad_out: &[T]) -> Vec<T> {
        channel_sums(grad_out, self.out_channels, self.positions())
    }
}

pub(crate) fn add_channel_bias<T: Scalar>(x: &mut [T], bias: &[T], plane: usize) {
    let c = bias.len();
    for (i, chunk) in x.chunks_mut(plane).enumerate() {
        let b = bias[i % c];
        for v in chunk {
            *v += b;
        }
    }
}

pub(crate) fn channel_sums<T: Scalar>(x: &[T], channels: usize, plane: usize) -> Vec<T> {
    let mut s = vec![T::zero(); channels];
    for (i, chunk) in x.chunks(plane).enumerate() {
        s[i % channels] += chunk.iter().copied().sum::<T>();
    }
    s
}
