// Forward and backward compute kernels. Convolution lowers each sample to a
// GEMM through an im2col buffer; reductions run in a fixed order so results
// are reproducible run to run. Output extents use floor division, so input
// rows a strided window cannot reach are ignored.

use super::Scalar;
use crate::error::{KmError, Result};

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 {
        return Err(KmError::dim(
            "matmul",
            format!("expected two matrices, got shapes {a:?} and {b:?}"),
        ));
    }
    if a[1] != b[0] {
        return Err(KmError::dim(
            "matmul",
            format!("inner dimensions differ: {a:?} x {b:?}"),
        ));
    }
    Ok((a[0], a[1], b[1]))
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn out_extent(axis: &str, extent: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = extent + 2 * padding;
    if padded < k {
        return Err(KmError::dim(
            "conv2d",
            format!("kernel {axis} {k} exceeds padded input {axis} {padded}"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 {
            return Err(KmError::dim(
                "conv2d",
                format!("input must be [B, C, H, W], got {input:?}"),
            ));
        }
        if weight.len() != 4 {
            return Err(KmError::dim(
                "conv2d",
                format!("weight must be [k_n, k_c, k_h, k_w], got {weight:?}"),
            ));
        }
        if stride == 0 {
            return Err(KmError::Contract("conv2d stride must be at least 1".into()));
        }
        if input[1] != weight[1] {
            return Err(KmError::dim(
                "conv2d",
                format!(
                    "input channel axis ({}) differs from weight channel axis ({})",
                    input[1], weight[1]
                ),
            ));
        }
        let out_h = out_extent("height", input[2], weight[2], stride, padding)?;
        let out_w = out_extent("width", input[3], weight[3], stride, padding)?;
        Ok(ConvGeometry {
            batch: input[0],
            channels: input[1],
            height: input[2],
            width: input[3],
            kernels: weight[0],
            kh: weight[2],
            kw: weight[3],
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.kernels, self.out_h, self.out_w]
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_sample(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// A 1x1, stride-1, unpadded convolution reads the input as its own
    /// column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

fn im2col<T: Scalar>(g: &ConvGeometry, x: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.channels {
        let xc = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &mut cols[((c * g.kh + i) * g.kw + j) * plane..][..plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + i) as isize - g.padding as isize;
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], dx: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.channels {
        let dxc = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &cols[((c * g.kh + i) * g.kw + j) * plane..][..plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + i) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut dxc[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + j) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] = dst[ix as usize] + row[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeometry, x: &[T], w: &[T]) -> Vec<T> {
    let plane = g.out_plane();
    let k = g.patch_len();
    let mut out = vec![T::zero(); g.batch * g.kernels * plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * plane]
    };
    for b in 0..g.batch {
        let xb = &x[b * g.in_sample()..(b + 1) * g.in_sample()];
        let col_view: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(g, xb, &mut cols);
            &cols
        };
        let ob = &mut out[b * g.kernels * plane..(b + 1) * g.kernels * plane];
        T::gemm(g.kernels, k, plane, w, false, col_view, false, ob, false);
    }
    out
}

/// Gradients of a convolution. Either output may be skipped when the
/// corresponding operand does not need a gradient.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let plane = g.out_plane();
    let k = g.patch_len();
    let mut cols = vec![T::zero(); k * plane];
    let mut dcols = vec![T::zero(); k * plane];
    for b in 0..g.batch {
        let xb = &x[b * g.in_sample()..(b + 1) * g.in_sample()];
        let dyb = &dy[b * g.kernels * plane..(b + 1) * g.kernels * plane];
        if let Some(dw) = dw.as_deref_mut() {
            let col_view: &[T] = if g.is_pointwise() {
                xb
            } else {
                im2col(g, xb, &mut cols);
                &cols
            };
            // dW[kn, K] += dY[kn, P] * cols[K, P]^T
            T::gemm(g.kernels, plane, k, dyb, false, col_view, true, dw, true);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * g.in_sample()..(b + 1) * g.in_sample()];
            if g.is_pointwise() {
                T::gemm(k, g.kernels, plane, w, true, dyb, false, dxb, true);
            } else {
                // dcols[K, P] = W[kn, K]^T * dY[kn, P]
                T::gemm(k, g.kernels, plane, w, true, dyb, false, &mut dcols, false);
                col2im(g, &dcols, dxb);
            }
        }
    }
}
