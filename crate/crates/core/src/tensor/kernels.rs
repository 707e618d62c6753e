// Raw forward/backward kernels over flat NCHW buffers.

use crate::scalar::{gemm, Mat, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output extent of a convolution along one axis, or `None` when the
/// dilated kernel does not fit.
pub(crate) fn conv_out_len(len: usize, k: usize, stride: usize, dilation: usize, padding: usize) -> Option<usize> {
    let span = dilation * (k - 1) + 1;
    let padded = len + 2 * padding;
    if padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let in_len = g.c * g.h * g.w;
    let out_len = g.o * g.ho * g.wo;
    let mut out = vec![T::zero(); g.n * out_len];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.col_rows() * g.col_cols()] };
    for n in 0..g.n {
        let xb = &x[n * in_len..(n + 1) * in_len];
        let ob = &mut out[n * out_len..(n + 1) * out_len];
        if let Some(b) = b {
            for (o, chunk) in ob.chunks_mut(g.ho * g.wo).enumerate() {
                chunk.fill(b[o]);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        let colm = if g.is_pointwise() {
            Mat::new(xb, g.col_rows(), g.col_cols())
        } else {
            im2col(xb, g, &mut cols);
            Mat::new(&cols[..], g.col_rows(), g.col_cols())
        };
        gemm(Mat::new(w, g.o, g.col_rows()), colm, beta, ob);
    }
    out
}

/// Accumulates gradients of a convolution. Any of the three outputs may be
/// skipped when the corresponding input is not differentiable.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    g: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let in_len = g.c * g.h * g.w;
    let out_len = g.o * g.ho * g.wo;
    let plane = g.ho * g.wo;
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.col_rows() * g.col_cols()] };
    let mut dcols = vec![T::zero(); g.col_rows() * g.col_cols()];
    for n in 0..g.n {
        let xb = &x[n * in_len..(n + 1) * in_len];
        let gb = &dout[n * out_len..(n + 1) * out_len];
        if let Some(db) = db.as_deref_mut() {
            for (o, chunk) in gb.chunks(plane).enumerate() {
                db[o] += chunk.iter().copied().sum();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let colm = if g.is_pointwise() {
                Mat::new(xb, g.col_rows(), g.col_cols())
            } else {
                im2col(xb, g, &mut cols);
                Mat::new(&cols[..], g.col_rows(), g.col_cols())
            };
            gemm(Mat::new(gb, g.o, plane), colm.t(), T::one(), dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[n * in_len..(n + 1) * in_len];
            if g.is_pointwise() {
                gemm(Mat::new(w, g.o, g.col_rows()).t(), Mat::new(gb, g.o, plane), T::one(), dxb);
            } else {
                gemm(Mat::new(w, g.o, g.col_rows()).t(), Mat::new(gb, g.o, plane), T::zero(), &mut dcols);
                col2im_add(&dcols, g, dxb);
            }
        }
    }
}

/// 2x2 average pooling; odd trailing rows/columns average over the pixels
/// that exist.
pub(crate) fn avgpool2_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, usize, usize) {
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = T::zero();
                let mut cnt = 0usize;
                for iy in 2 * oy..(2 * oy + 2).min(h) {
                    for ix in 2 * ox..(2 * ox + 2).min(w) {
                        acc += src[iy * w + ix];
                        cnt += 1;
                    }
                }
                dst[oy * wo + ox] = acc / T::of(cnt as f64);
            }
        }
    }
    (out, ho, wo)
}

pub(crate) fn avgpool2_backward<T: Scalar>(dout: &[T], planes: usize, h: usize, w: usize, dx: &mut [T]) {
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    for p in 0..planes {
        let src = &dout[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let ys = 2 * oy..(2 * oy + 2).min(h);
                let xs = 2 * ox..(2 * ox + 2).min(w);
                let cnt = ys.len() * xs.len();
                let gval = src[oy * wo + ox] / T::of(cnt as f64);
                for iy in ys {
                    for ix in xs.clone() {
                        dst[iy * w + ix] += gval;
                    }
                }
            }
        }
    }
}

#[inline]
fn nearest_src(o: usize, len: usize) -> usize {
    (o / 2).min(len - 1)
}

/// Nearest-neighbour upsampling to `(ho, wo)`; each output pixel reads input
/// pixel `(y/2, x/2)` clamped to the input extent.
pub(crate) fn upsample_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, ho: usize, wo: usize) -> Vec<T> {
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            let iy = nearest_src(oy, h);
            for ox in 0..wo {
                dst[oy * wo + ox] = src[iy * w + nearest_src(ox, w)];
            }
        }
    }
    out
}

pub(crate) fn upsample_backward<T: Scalar>(
    dout: &[T],
    planes: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    for p in 0..planes {
        let src = &dout[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            let iy = nearest_src(oy, h);
            for ox in 0..wo {
                dst[iy * w + nearest_src(ox, w)] += src[oy * wo + ox];
            }
        }
    }
}

/// Four taps and weights of a bilinear lookup at continuous `(x, y)` in the
/// unit square, pixel centres at `(i + 0.5) / w`, borders clamped.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BilinearTaps<T> {
    pub idx: [usize; 4],
    pub wt: [T; 4],
}

pub(crate) fn bilinear_taps<T: Scalar>(x: T, y: T, h: usize, w: usize) -> BilinearTaps<T> {
    let axis = |coord: T, len: usize| -> (usize, usize, T) {
        let max = T::of((len - 1) as f64);
        let mut u = coord * T::of(len as f64) - T::of(0.5);
        if !(u > T::zero()) {
            u = T::zero();
        }
        if u > max {
            u = max;
        }
        let i0 = u.floor().to_usize().unwrap_or(0).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, u - T::of(i0 as f64))
    };
    let (x0, x1, fx) = axis(x, w);
    let (y0, y1, fy) = axis(y, h);
    let one = T::one();
    BilinearTaps {
        idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
        wt: [(one - fx) * (one - fy), fx * (one - fy), (one - fx) * fy, fx * fy],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_len_formula() {
        assert_eq!(conv_out_len(3, 3, 1, 1, 0), Some(1));
        assert_eq!(conv_out_len(8, 3, 1, 2, 2), Some(8));
        assert_eq!(conv_out_len(8, 3, 2, 1, 1), Some(4));
        assert_eq!(conv_out_len(2, 3, 1, 2, 0), None);
    }

    #[test]
    fn avgpool_handles_odd_extent() {
        let x: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let (out, ho, wo) = avgpool2_forward(&x, 1, 3, 3);
        assert_eq!((ho, wo), (2, 2));
        assert_eq!(out, vec![2.0, 3.5, 6.5, 8.0]);
    }

    #[test]
    fn upsample_doubles() {
        let x = vec![1.0f32, 2.0, 3.0, 4.0];
        let out = upsample_forward(&x, 1, 2, 2, 4, 4);
        assert_eq!(&out[..4], &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(&out[12..], &[3.0, 3.0, 4.0, 4.0]);
    }
}
