//! Convolution kernels via im2col and a dense GEMM.
//!
//! Transposed convolution is implemented as the exact adjoint of the forward
//! convolution with the same geometry, so both share `im2col`/`col2im`.

use crate::{Shape, Tensor, TensorError};

/// Kernel geometry shared by convolution and transposed convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn new(kernel: usize, stride: usize, pad: usize, dilation: usize) -> Self {
        ConvGeom {
            kernel,
            stride,
            pad,
            dilation,
        }
    }

    /// Stride-1 geometry that preserves spatial size for odd kernels.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        ConvGeom::new(kernel, 1, dilation * (kernel - 1) / 2, dilation)
    }

    fn span(&self) -> usize {
        self.dilation * (self.kernel - 1) + 1
    }

    /// Output extent of a forward convolution over `len` input samples.
    pub fn out_len(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.pad;
        if padded < self.span() {
            return None;
        }
        Some((padded - self.span()) / self.stride + 1)
    }

    /// Output extent of the transposed convolution over `len` input samples.
    pub fn transposed_out_len(&self, len: usize) -> Option<usize> {
        ((len - 1) * self.stride + self.span()).checked_sub(2 * self.pad)
    }
}

/// `cols[(c*k + ky)*k + kx][oy*wo + ox] = x[c][oy*s - p + ky*d][ox*s - p + kx*d]`.
#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], c: usize, h: usize, w: usize, g: ConvGeom, ho: usize, wo: usize, cols: &mut [f64]) {
    let k = g.kernel;
    let plane_out = ho * wo;
    for ci in 0..c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane_out..(row + 1) * plane_out];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `x`.
#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, g: ConvGeom, ho: usize, wo: usize, x: &mut [f64]) {
    let k = g.kernel;
    let plane_out = ho * wo;
    for ci in 0..c {
        let xc = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane_out..(row + 1) * plane_out];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut xc[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    for (ox, v) in srow.iter().enumerate() {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Matrix operand: data plus row/column strides.
#[derive(Clone, Copy)]
struct Mat<'a> {
    data: &'a [f64],
    rs: isize,
    cs: isize,
}

impl<'a> Mat<'a> {
    /// Row-major `rows × cols` matrix.
    fn rm(data: &'a [f64], cols: usize) -> Self {
        Mat {
            data,
            rs: cols as isize,
            cs: 1,
        }
    }

    fn t(self) -> Self {
        Mat {
            data: self.data,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = a·b + beta·c` with `a: m×k`, `b: k×n`, `c: m×n` row-major.
fn gemm(m: usize, k: usize, n: usize, a: Mat, b: Mat, beta: f64, c: &mut [f64]) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c[..m * n].fill(0.0);
        }
        return;
    }
    // SAFETY: callers size every buffer to the stated dimensions and the
    // strides address elements strictly inside those buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_bias(op: &'static str, bias: Option<&Tensor>, channels: usize) -> Result<(), TensorError> {
    if let Some(b) = bias {
        if b.len() != channels {
            return Err(TensorError::ShapeMismatch {
                op,
                left: Shape::new(1, channels, 1, 1),
                right: b.shape(),
            });
        }
    }
    Ok(())
}

fn add_bias(y: &mut Tensor, bias: Option<&Tensor>) {
    if let Some(b) = bias {
        let s = y.shape();
        let plane = s.plane();
        let data = y.data_mut();
        for n in 0..s.n() {
            for c in 0..s.c() {
                let off = (n * s.c() + c) * plane;
                let bc = b.data()[c];
                data[off..off + plane].iter_mut().for_each(|v| *v += bc);
            }
        }
    }
}

fn bias_grad(dy: &Tensor) -> Tensor {
    let s = dy.shape();
    let plane = s.plane();
    let mut db = vec![0.0; s.c()];
    for n in 0..s.n() {
        for (c, acc) in db.iter_mut().enumerate() {
            let off = (n * s.c() + c) * plane;
            *acc += dy.data()[off..off + plane].iter().sum::<f64>();
        }
    }
    Tensor::from_vec(Shape::new(1, s.c(), 1, 1), db).expect("bias length")
}

/// 2-D convolution. `w` is `[out, in, k, k]`.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, g: ConvGeom) -> Result<Tensor, TensorError> {
    let xs = x.shape();
    let ws = w.shape();
    if ws.c() != xs.c() || ws.h() != g.kernel || ws.w() != g.kernel {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            left: xs,
            right: ws,
        });
    }
    check_bias("conv2d bias", bias, ws.n())?;
    let (ho, wo) = match (g.out_len(xs.h()), g.out_len(xs.w())) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(TensorError::Geometry { shape: xs, geom: g }),
    };
    let cout = ws.n();
    let kk = xs.c() * g.kernel * g.kernel;
    let mut y = Tensor::zeros(Shape::new(xs.n(), cout, ho, wo));
    let mut cols = vec![0.0; kk * ho * wo];
    let out_len = cout * ho * wo;
    for n in 0..xs.n() {
        im2col(x.item_slice(n), xs.c(), xs.h(), xs.w(), g, ho, wo, &mut cols);
        let dst = &mut y.data_mut()[n * out_len..(n + 1) * out_len];
        gemm(cout, kk, ho * wo, Mat::rm(w.data(), kk), Mat::rm(&cols, ho * wo), 0.0, dst);
    }
    add_bias(&mut y, bias);
    Ok(y)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(x: &Tensor, w: &Tensor, dy: &Tensor, g: ConvGeom) -> (Tensor, Tensor, Tensor) {
    let xs = x.shape();
    let ys = dy.shape();
    let cout = w.shape().n();
    let kk = xs.c() * g.kernel * g.kernel;
    let plane_out = ys.plane();
    let mut dx = Tensor::zeros(xs);
    let mut dw = Tensor::zeros(w.shape());
    let mut cols = vec![0.0; kk * plane_out];
    let mut dcols = vec![0.0; kk * plane_out];
    let in_len = xs.item_len();
    for n in 0..xs.n() {
        let dyn_ = dy.item_slice(n);
        im2col(x.item_slice(n), xs.c(), xs.h(), xs.w(), g, ys.h(), ys.w(), &mut cols);
        // dW += dy · colsᵀ
        gemm(
            cout,
            plane_out,
            kk,
            Mat::rm(dyn_, plane_out),
            Mat::rm(&cols, plane_out).t(),
            1.0,
            dw.data_mut(),
        );
        // dcols = Wᵀ · dy
        gemm(
            kk,
            cout,
            plane_out,
            Mat::rm(w.data(), kk).t(),
            Mat::rm(dyn_, plane_out),
            0.0,
            &mut dcols,
        );
        let dxn = &mut dx.data_mut()[n * in_len..(n + 1) * in_len];
        col2im(&dcols, xs.c(), xs.h(), xs.w(), g, ys.h(), ys.w(), dxn);
    }
    (dx, dw, bias_grad(dy))
}

/// Transposed convolution (fractionally strided). `w` is `[in, out, k, k]`.
pub fn conv_transpose2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    g: ConvGeom,
) -> Result<Tensor, TensorError> {
    let xs = x.shape();
    let ws = w.shape();
    if ws.n() != xs.c() || ws.h() != g.kernel || ws.w() != g.kernel {
        return Err(TensorError::ShapeMismatch {
            op: "conv_transpose2d",
            left: xs,
            right: ws,
        });
    }
    let cout = ws.c();
    check_bias("conv_transpose2d bias", bias, cout)?;
    let (ho, wo) = match (g.transposed_out_len(xs.h()), g.transposed_out_len(xs.w())) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(TensorError::Geometry { shape: xs, geom: g }),
    };
    // The forward conv from (ho, wo) must land exactly on the input grid.
    if g.out_len(ho) != Some(xs.h()) || g.out_len(wo) != Some(xs.w()) {
        return Err(TensorError::Geometry { shape: xs, geom: g });
    }
    let kk = cout * g.kernel * g.kernel;
    let plane_in = xs.plane();
    let mut y = Tensor::zeros(Shape::new(xs.n(), cout, ho, wo));
    let mut cols = vec![0.0; kk * plane_in];
    let out_len = cout * ho * wo;
    for n in 0..xs.n() {
        // cols = Wᵀ · x
        gemm(
            kk,
            xs.c(),
            plane_in,
            Mat::rm(w.data(), kk).t(),
            Mat::rm(x.item_slice(n), plane_in),
            0.0,
            &mut cols,
        );
        let dst = &mut y.data_mut()[n * out_len..(n + 1) * out_len];
        col2im(&cols, cout, ho, wo, g, xs.h(), xs.w(), dst);
    }
    add_bias(&mut y, bias);
    Ok(y)
}

/// Gradients of [`conv_transpose2d`] with respect to input, weight and bias.
pub fn conv_transpose2d_backward(x: &Tensor, w: &Tensor, dy: &Tensor, g: ConvGeom) -> (Tensor, Tensor, Tensor) {
    let xs = x.shape();
    let ys = dy.shape();
    let cout = ys.c();
    let kk = cout * g.kernel * g.kernel;
    let plane_in = xs.plane();
    let mut dx = Tensor::zeros(xs);
    let mut dw = Tensor::zeros(w.shape());
    let mut dcols = vec![0.0; kk * plane_in];
    let in_len = xs.item_len();
    for n in 0..xs.n() {
        im2col(dy.item_slice(n), cout, ys.h(), ys.w(), g, xs.h(), xs.w(), &mut dcols);
        // dx = W · dcols
        let dxn = &mut dx.data_mut()[n * in_len..(n + 1) * in_len];
        gemm(
            xs.c(),
            kk,
            plane_in,
            Mat::rm(w.data(), kk),
            Mat::rm(&dcols, plane_in),
            0.0,
            dxn,
        );
        // dW += x · dcolsᵀ
        gemm(
            xs.c(),
            plane_in,
            kk,
            Mat::rm(x.item_slice(n), plane_in),
            Mat::rm(&dcols, plane_in).t(),
            1.0,
            dw.data_mut(),
        );
    }
    (dx, dw, bias_grad(dy))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, w: &Tensor, g: ConvGeom) -> Tensor {
        let xs = x.shape();
        let ws = w.shape();
        let ho = g.out_len(xs.h()).unwrap();
        let wo = g.out_len(xs.w()).unwrap();
        let mut y = Tensor::zeros(Shape::new(xs.n(), ws.n(), ho, wo));
        for n in 0..xs.n() {
            for co in 0..ws.n() {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..xs.c() {
                            for ky in 0..g.kernel {
                                for kx in 0..g.kernel {
                                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < xs.h() && (ix as usize) < xs.w() {
                                        acc += x.at(n, ci, iy as usize, ix as usize) * w.at(co, ci, ky, kx);
                                    }
                                }
                            }
                        }
                        y.set(n, co, oy, ox, acc);
                    }
                }
            }
        }
        y
    }

    fn ramp(shape: Shape, scale: f64) -> Tensor {
        let data = (0..shape.numel())
            .map(|i| ((i * 7919) % 23) as f64 * scale - 0.3)
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn conv_matches_direct_summation() {
        for g in [ConvGeom::new(4, 2, 1, 1), ConvGeom::same(3, 2), ConvGeom::same(1, 1)] {
            let x = ramp(Shape::new(2, 3, 8, 6), 0.05);
            let w = ramp(Shape::new(4, 3, g.kernel, g.kernel), 0.03);
            let fast = conv2d(&x, &w, None, g).unwrap();
            let slow = naive_conv(&x, &w, g);
            assert!(fast.max_abs_diff(&slow) < 1e-12, "{g:?}");
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> with shared weights laid out [in, out].
        let g = ConvGeom::new(4, 2, 1, 1);
        let x = ramp(Shape::new(1, 3, 8, 8), 0.05);
        let w = ramp(Shape::new(5, 3, 4, 4), 0.02);
        let y = ramp(Shape::new(1, 5, 4, 4), 0.07);
        let cx = conv2d(&x, &w, None, g).unwrap();
        // For the transposed op the weight tensor [5, 3, k, k] reads as [in=5, out=3].
        let ty = conv_transpose2d(&y, &w, None, g).unwrap();
        assert_eq!(ty.shape(), x.shape());
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn strided_shapes() {
        let g = ConvGeom::new(4, 2, 1, 1);
        assert_eq!(g.out_len(32), Some(16));
        assert_eq!(g.transposed_out_len(16), Some(32));
        assert_eq!(g.out_len(1), None);
        assert_eq!(ConvGeom::same(3, 4).out_len(17), Some(17));
    }
}
