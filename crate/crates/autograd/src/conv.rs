//! im2col convolution kernels and the fixed depthwise filter bank.

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Resolved dimensions of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input: Shape,
        weight: Shape,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<Self, TensorError> {
        let [_, in_c, h, w] = input.0;
        let [out_c, w_in, kh, kw] = weight.0;
        if w_in != in_c {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                dim: "input channels",
                left: input,
                right: weight,
            });
        }
        if stride == 0 || dilation == 0 || kh == 0 || kw == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: format!("stride {stride}, dilation {dilation}, kernel {kh}x{kw} must be positive"),
            });
        }
        let span_h = dilation * (kh - 1) + 1;
        let span_w = dilation * (kw - 1) + 1;
        if h + 2 * padding < span_h || w + 2 * padding < span_w {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: format!(
                    "dilated kernel {span_h}x{span_w} exceeds padded input {}x{}",
                    h + 2 * padding,
                    w + 2 * padding
                ),
            });
        }
        Ok(ConvGeometry {
            in_c,
            h,
            w,
            out_c,
            kh,
            kw,
            stride,
            dilation,
            padding,
            out_h: (h + 2 * padding - span_h) / stride + 1,
            out_w: (w + 2 * padding - span_w) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// 1x1, stride 1, no padding: the input sample already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Output positions `[lo, hi)` whose tap `k` lands inside `0..len`, and the
/// input offset of tap `k` at output position 0.
#[inline]
fn valid_range(g: &ConvGeometry, k: usize, len: usize, out: usize) -> (usize, usize, isize) {
    let off = (k * g.dilation) as isize - g.padding as isize;
    let s = g.stride as isize;
    // smallest o with o*s + off >= 0
    let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
    // smallest o with o*s + off >= len
    let end = len as isize - off;
    let hi = if end <= 0 { 0 } else { ((end + s - 1) / s) as usize };
    (lo.min(out), hi.min(out).max(lo.min(out)), off)
}

fn im2col<T: Scalar>(g: &ConvGeometry, x: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.in_c {
        let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (ylo, yhi, yoff) = valid_range(g, ky, g.h, g.out_h);
            for kx in 0..g.kw {
                let (xlo, xhi, xoff) = valid_range(g, kx, g.w, g.out_w);
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                dst[..ylo * g.out_w].fill(T::zero());
                dst[yhi * g.out_w..].fill(T::zero());
                for oy in ylo..yhi {
                    let iy = (oy as isize * g.stride as isize + yoff) as usize;
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    out_row[..xlo].fill(T::zero());
                    out_row[xhi..].fill(T::zero());
                    if xlo == xhi {
                        continue;
                    }
                    let in_row = &src[iy * g.w..(iy + 1) * g.w];
                    let first = (xlo as isize * g.stride as isize + xoff) as usize;
                    if g.stride == 1 {
                        out_row[xlo..xhi].copy_from_slice(&in_row[first..first + (xhi - xlo)]);
                    } else {
                        for (v, &s) in out_row[xlo..xhi]
                            .iter_mut()
                            .zip(in_row[first..].iter().step_by(g.stride))
                        {
                            *v = s;
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], dx: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.in_c {
        let dst = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (ylo, yhi, yoff) = valid_range(g, ky, g.h, g.out_h);
            for kx in 0..g.kw {
                let (xlo, xhi, xoff) = valid_range(g, kx, g.w, g.out_w);
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                if xlo == xhi {
                    continue;
                }
                for oy in ylo..yhi {
                    let iy = (oy as isize * g.stride as isize + yoff) as usize;
                    let first = (xlo as isize * g.stride as isize + xoff) as usize;
                    let out_row = &mut dst[iy * g.w..(iy + 1) * g.w];
                    let in_row = &src[oy * g.out_w + xlo..oy * g.out_w + xhi];
                    if g.stride == 1 {
                        for (d, &v) in out_row[first..first + in_row.len()].iter_mut().zip(in_row) {
                            *d = *d + v;
                        }
                    } else {
                        for (i, &v) in in_row.iter().enumerate() {
                            let d = &mut out_row[first + i * g.stride];
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    g: &ConvGeometry,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Tensor<T> {
    let n = x.shape().n();
    let out_shape = Shape::new(n, g.out_c, g.out_h, g.out_w);
    let mut out = Tensor::zeros(out_shape);
    let (k, plane) = (g.patch_len(), g.out_plane());
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * plane]
    };
    let in_per = x.shape().per_sample();
    let out_per = out_shape.per_sample();
    for s in 0..n {
        let xs = &x.data()[s * in_per..(s + 1) * in_per];
        let ys = &mut out.data_mut()[s * out_per..(s + 1) * out_per];
        if let Some(b) = bias {
            for (o, chunk) in ys.chunks_mut(plane).enumerate() {
                chunk.fill(b.data()[o]);
            }
        }
        let cols_ref: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(g, xs, &mut cols);
            &cols
        };
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            g.out_c,
            k,
            plane,
            T::one(),
            weight.data(),
            (k as isize, 1),
            cols_ref,
            (plane as isize, 1),
            beta,
            ys,
            (plane as isize, 1),
        );
    }
    out
}

/// Gradients of a convolution. `dx`/`dw` are only computed when requested.
pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_dx, need_dw, need_db) = need;
    let n = x.shape().n();
    let (k, plane) = (g.patch_len(), g.out_plane());
    let in_per = x.shape().per_sample();
    let out_per = dy.shape().per_sample();
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(weight.shape()));
    let mut db = need_db.then(|| Tensor::zeros(Shape::new(g.out_c, 1, 1, 1)));
    let pointwise = g.is_pointwise();
    let mut cols = vec![T::zero(); if pointwise { 0 } else { k * plane }];
    let mut dcols = vec![T::zero(); if pointwise || !need_dx { 0 } else { k * plane }];

    for s in 0..n {
        let xs = &x.data()[s * in_per..(s + 1) * in_per];
        let dys = &dy.data()[s * out_per..(s + 1) * out_per];
        if let Some(db) = db.as_mut() {
            for (o, chunk) in dys.chunks(plane).enumerate() {
                let acc: T = chunk.iter().copied().sum();
                db.data_mut()[o] = db.data()[o] + acc;
            }
        }
        if let Some(dw) = dw.as_mut() {
            let cols_ref: &[T] = if pointwise {
                xs
            } else {
                im2col(g, xs, &mut cols);
                &cols
            };
            // dW += dY [out_c x plane] * cols^T [plane x k]
            T::gemm(
                g.out_c,
                plane,
                k,
                T::one(),
                dys,
                (plane as isize, 1),
                cols_ref,
                (1, plane as isize),
                T::one(),
                dw.data_mut(),
                (k as isize, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx.data_mut()[s * in_per..(s + 1) * in_per];
            if pointwise {
                // dX = W^T [k x out_c] * dY [out_c x plane]
                T::gemm(
                    k,
                    g.out_c,
                    plane,
                    T::one(),
                    weight.data(),
                    (1, k as isize),
                    dys,
                    (plane as isize, 1),
                    T::zero(),
                    dxs,
                    (plane as isize, 1),
                );
            } else {
                T::gemm(
                    k,
                    g.out_c,
                    plane,
                    T::one(),
                    weight.data(),
                    (1, k as isize),
                    dys,
                    (plane as isize, 1),
                    T::zero(),
                    &mut dcols,
                    (plane as isize, 1),
                );
                col2im(g, &dcols, dxs);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// A fixed set of square kernels applied to every input channel separately.
///
/// Output channel `c * count + j` holds channel `c` filtered by kernel `j`,
/// at the input resolution. Borders replicate the nearest edge pixel, so a
/// constant plane filtered by a zero-sum kernel is zero everywhere and a
/// constant offset never leaks into the response. The kernels never
/// receive gradients.
///
/// Each response is evaluated as `sum_k w_k (x_k - x_centre) + s x_centre`,
/// where `s` is the coefficient sum, taken as exactly zero when it only
/// differs from zero by rounding. For such kernels a constant shift of the
/// input that is itself exact leaves the output bit-identical.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthwiseBank<T> {
    count: usize,
    size: usize,
    weights: Vec<T>,
    sums: Vec<T>,
}

impl<T: Scalar> DepthwiseBank<T> {
    pub fn new(size: usize, kernels: Vec<Vec<T>>) -> Result<Self, TensorError> {
        if size.is_multiple_of(2) || kernels.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "depthwise_bank",
                reason: format!(
                    "need at least one odd-sized kernel, got {} of size {size}",
                    kernels.len()
                ),
            });
        }
        let mut weights = Vec::with_capacity(kernels.len() * size * size);
        for k in &kernels {
            if k.len() != size * size {
                return Err(TensorError::InvalidArgument {
                    op: "depthwise_bank",
                    reason: format!("kernel has {} coefficients, expected {}", k.len(), size * size),
                });
            }
            weights.extend_from_slice(k);
        }
        let sums = kernels
            .iter()
            .map(|k| {
                let sum: f64 = k.iter().map(|w| w.to_f64_lossy()).sum();
                let l1: f64 = k.iter().map(|w| w.to_f64_lossy().abs()).sum();
                // coefficients that cancel up to their own rounding count as zero-sum
                let tol = T::epsilon().to_f64_lossy() * k.len() as f64 * l1;
                if sum.abs() <= tol {
                    T::zero()
                } else {
                    T::from_f64_lossy(sum)
                }
            })
            .collect();
        Ok(DepthwiseBank {
            count: kernels.len(),
            size,
            weights,
            sums,
        })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn kernel(&self, j: usize) -> &[T] {
        let area = self.size * self.size;
        &self.weights[j * area..(j + 1) * area]
    }

    pub fn output_shape(&self, input: Shape) -> Shape {
        let [n, c, h, w] = input.0;
        Shape::new(n, c * self.count, h, w)
    }

    /// Copies one plane into a buffer with `r` replicated border pixels on every side.
    fn pad_replicate(src: &[T], h: usize, w: usize, r: usize, padded: &mut [T]) {
        let pw = w + 2 * r;
        for py in 0..h + 2 * r {
            let sy = clamp_index(py as isize - r as isize, h);
            let row = &src[sy * w..(sy + 1) * w];
            let dst = &mut padded[py * pw..(py + 1) * pw];
            dst[..r].fill(row[0]);
            dst[r..r + w].copy_from_slice(row);
            dst[r + w..].fill(row[w - 1]);
        }
    }

    pub(crate) fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape().0;
        let mut out = Tensor::zeros(self.output_shape(x.shape()));
        let r = self.size / 2;
        let pw = w + 2 * r;
        let plane = h * w;
        let mut padded = vec![T::zero(); (h + 2 * r) * pw];
        for s in 0..n {
            for ch in 0..c {
                let src = &x.data()[(s * c + ch) * plane..(s * c + ch + 1) * plane];
                Self::pad_replicate(src, h, w, r, &mut padded);
                for j in 0..self.count {
                    let kern = self.kernel(j);
                    let o = ((s * c + ch) * self.count + j) * plane;
                    let dst = &mut out.data_mut()[o..o + plane];
                    for ky in 0..self.size {
                        for kx in 0..self.size {
                            let k = kern[ky * self.size + kx];
                            if k == T::zero() || (ky == r && kx == r) {
                                continue;
                            }
                            for y in 0..h {
                                let p = &padded[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                                let centre = &src[y * w..(y + 1) * w];
                                for ((d, &v), &x0) in dst[y * w..(y + 1) * w].iter_mut().zip(p).zip(centre) {
                                    *d = *d + k * (v - x0);
                                }
                            }
                        }
                    }
                    let sum = self.sums[j];
                    if sum != T::zero() {
                        for (d, &x0) in dst.iter_mut().zip(src) {
                            *d = *d + sum * x0;
                        }
                    }
                }
            }
        }
        out
    }

    pub(crate) fn backward(&self, input_shape: Shape, dy: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = input_shape.0;
        let mut dx = Tensor::zeros(input_shape);
        let r = self.size / 2;
        let pw = w + 2 * r;
        let plane = h * w;
        let mut dpad = vec![T::zero(); (h + 2 * r) * pw];
        for s in 0..n {
            for ch in 0..c {
                dpad.fill(T::zero());
                for j in 0..self.count {
                    let kern = self.kernel(j);
                    let o = ((s * c + ch) * self.count + j) * plane;
                    let g = &dy.data()[o..o + plane];
                    for ky in 0..self.size {
                        for kx in 0..self.size {
                            let k = kern[ky * self.size + kx];
                            if k == T::zero() {
                                continue;
                            }
                            for y in 0..h {
                                let p = &mut dpad[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                                for (d, &v) in p.iter_mut().zip(&g[y * w..(y + 1) * w]) {
                                    *d = *d + k * v;
                                }
                            }
                        }
                    }
                }
                // Fold the replicated border back onto the edge pixels.
                let dst_off = (s * c + ch) * plane;
                let dst = &mut dx.data_mut()[dst_off..dst_off + plane];
                for py in 0..h + 2 * r {
                    let sy = clamp_index(py as isize - r as isize, h);
                    let row = &dpad[py * pw..(py + 1) * pw];
                    let out_row = &mut dst[sy * w..(sy + 1) * w];
                    for (px, &v) in row.iter().enumerate() {
                        let sx = clamp_index(px as isize - r as isize, w);
                        out_row[sx] = out_row[sx] + v;
                    }
                }
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, dilation: usize, padding: usize) -> Tensor<f64> {
        let g = ConvGeometry::new(x.shape(), w.shape(), stride, dilation, padding).unwrap();
        Tensor::from_fn(Shape::new(x.shape().n(), g.out_c, g.out_h, g.out_w), |[n, o, y, xx]| {
            let mut acc = 0.0;
            for c in 0..g.in_c {
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let iy = (y * stride + ky * dilation) as isize - padding as isize;
                        let ix = (xx * stride + kx * dilation) as isize - padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            acc += w.at([o, c, ky, kx]) * x.at([n, c, iy as usize, ix as usize]);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn im2col_path_matches_direct_sum() {
        let x = Tensor::from_fn(Shape::new(2, 3, 7, 6), |[n, c, y, x]| {
            ((n * 31 + c * 7 + y * 3 + x) % 11) as f64 - 5.0
        });
        let w = Tensor::from_fn(Shape::new(4, 3, 3, 3), |[o, c, y, x]| {
            ((o * 13 + c * 5 + y * 2 + x) % 7) as f64 * 0.25 - 0.5
        });
        for &(stride, dilation, padding) in &[
            (1, 1, 1),
            (2, 1, 0),
            (1, 2, 2),
            (2, 3, 3),
            (1, 1, 0),
            (1, 8, 8),
            (2, 5, 6),
        ] {
            let g = ConvGeometry::new(x.shape(), w.shape(), stride, dilation, padding).unwrap();
            let got = conv2d_forward(&g, &x, &w, None);
            let want = direct_conv(&x, &w, stride, dilation, padding);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "{stride}/{dilation}/{padding}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn output_dims_follow_formula() {
        let g = ConvGeometry::new(Shape::new(1, 1, 10, 9), Shape::new(1, 1, 3, 3), 2, 2, 1).unwrap();
        assert_eq!(g.out_h, (10 + 2 - 2 * 2 - 1) / 2 + 1);
        assert_eq!(g.out_w, (9 + 2 - 2 * 2 - 1) / 2 + 1);
    }

    #[test]
    fn kernel_larger_than_input_rejected() {
        let err = ConvGeometry::new(Shape::new(1, 1, 4, 4), Shape::new(1, 1, 3, 3), 1, 4, 0).unwrap_err();
        assert!(matches!(err, TensorError::InvalidArgument { .. }));
    }
}
