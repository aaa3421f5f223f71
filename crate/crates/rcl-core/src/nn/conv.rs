//! im2col-based 2-D convolution primitives shared by `Conv2d` and `ConvT2d`.
//!
//! A transposed convolution is the adjoint of a convolution with the same
//! geometry, so all three gradient routines below serve both layer types with
//! their arguments swapped.

use super::Elem;
use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayViewMut2};

/// Geometry of one convolution: `k`×`k` kernel, square stride and padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.k * self.k
    }
}

/// Unfolds one image (C,H,W slice of `x`) into `cols` at column offset
/// `col_base`, one column per output position.
fn im2col_image<F: Elem>(
    x: &[F],
    (h, w): (usize, usize),
    g: &ConvGeom,
    cols: &mut [F],
    cols_width: usize,
    col_base: usize,
) {
    let (oh, ow) = g.out_hw(h, w);
    for c in 0..g.in_ch {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let row_off = row * cols_width + col_base;
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut cols[row_off + oy * ow..row_off + (oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(F::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            F::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds columns back into one image; the adjoint of [`im2col_image`].
fn col2im_add_image<F: Elem>(
    cols: &[F],
    cols_width: usize,
    col_base: usize,
    g: &ConvGeom,
    (h, w): (usize, usize),
    x: &mut [F],
) {
    let (oh, ow) = g.out_hw(h, w);
    for c in 0..g.in_ch {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let row_off = row * cols_width + col_base;
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &cols[row_off + oy * ow..row_off + (oy + 1) * ow];
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, s) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + *s;
                        }
                    }
                }
            }
        }
    }
}

fn im2col_batch<F: Elem>(x: &Array4<F>, g: &ConvGeom) -> (Vec<F>, usize) {
    let (n, _c, h, w) = x.dim();
    let (oh, ow) = g.out_hw(h, w);
    let width = n * oh * ow;
    let mut cols = vec![F::zero(); g.patch_len() * width];
    let xs = x.as_slice().expect("contiguous input");
    let img_len = x.len() / n;
    for i in 0..n {
        im2col_image(
            &xs[i * img_len..(i + 1) * img_len],
            (h, w),
            g,
            &mut cols,
            width,
            i * oh * ow,
        );
    }
    (cols, width)
}

/// Re-layouts a (N, C, oh, ow) tensor as a (C, N*oh*ow) matrix buffer.
fn nchw_to_cmat<F: Elem>(y: &Array4<F>) -> Vec<F> {
    let (n, c, oh, ow) = y.dim();
    let plane = oh * ow;
    let width = n * plane;
    let mut out = vec![F::zero(); c * width];
    let ys = y.as_slice().expect("contiguous");
    for i in 0..n {
        for ch in 0..c {
            let src = &ys[(i * c + ch) * plane..(i * c + ch + 1) * plane];
            out[ch * width + i * plane..ch * width + (i + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

fn cmat_to_nchw<F: Elem>(m: &[F], n: usize, c: usize, oh: usize, ow: usize) -> Array4<F> {
    let plane = oh * ow;
    let width = n * plane;
    let mut out = vec![F::zero(); n * c * plane];
    for i in 0..n {
        for ch in 0..c {
            let src = &m[ch * width + i * plane..ch * width + (i + 1) * plane];
            out[(i * c + ch) * plane..(i * c + ch + 1) * plane].copy_from_slice(src);
        }
    }
    Array4::from_shape_vec((n, c, oh, ow), out).expect("shape")
}

/// Batched convolution forward: `wmat` is `(out_ch, in_ch*k*k)`.
pub fn conv_forward_raw<F: Elem>(
    x: &Array4<F>,
    wmat: &ArrayView2<F>,
    bias: Option<&ArrayView1<F>>,
    g: &ConvGeom,
) -> Array4<F> {
    let (n, _c, h, w) = x.dim();
    let (oh, ow) = g.out_hw(h, w);
    let (cols, width) = im2col_batch(x, g);
    let cols_m = ArrayView2::from_shape((g.patch_len(), width), &cols).expect("cols shape");
    let mut out = vec![F::zero(); g.out_ch * width];
    {
        let mut out_m = ArrayViewMut2::from_shape((g.out_ch, width), &mut out).expect("out shape");
        ndarray::linalg::general_mat_mul(F::one(), wmat, &cols_m, F::zero(), &mut out_m);
    }
    let mut y = cmat_to_nchw(&out, n, g.out_ch, oh, ow);
    if let Some(b) = bias {
        let ys = y.as_slice_mut().expect("contiguous");
        let plane = oh * ow;
        for i in 0..n {
            for oc in 0..g.out_ch {
                let bv = b[oc];
                for v in &mut ys[(i * g.out_ch + oc) * plane..(i * g.out_ch + oc + 1) * plane] {
                    *v = *v + bv;
                }
            }
        }
    }
    y
}

/// Gradient of the convolution output with respect to its input.
pub fn conv_grad_input_raw<F: Elem>(
    gy: &Array4<F>,
    wmat: &ArrayView2<F>,
    g: &ConvGeom,
    (h, w): (usize, usize),
) -> Array4<F> {
    let (n, _oc, oh, ow) = gy.dim();
    let width = n * oh * ow;
    let gy_m = nchw_to_cmat(gy);
    let gy_view = ArrayView2::from_shape((g.out_ch, width), &gy_m).expect("gy shape");
    let mut cols_grad = vec![F::zero(); g.patch_len() * width];
    {
        let mut cg = ArrayViewMut2::from_shape((g.patch_len(), width), &mut cols_grad)
            .expect("cols grad shape");
        ndarray::linalg::general_mat_mul(F::one(), &wmat.t(), &gy_view, F::zero(), &mut cg);
    }
    let mut gx = Array4::zeros((n, g.in_ch, h, w));
    let gxs = gx.as_slice_mut().expect("contiguous");
    let img_len = g.in_ch * h * w;
    for i in 0..n {
        col2im_add_image(
            &cols_grad,
            width,
            i * oh * ow,
            g,
            (h, w),
            &mut gxs[i * img_len..(i + 1) * img_len],
        );
    }
    gx
}

/// Gradients of the convolution with respect to weights and bias.
pub fn conv_grad_weight_raw<F: Elem>(
    x: &Array4<F>,
    gy: &Array4<F>,
    g: &ConvGeom,
) -> (Array2<F>, Array1<F>) {
    let (n, _c, h, w) = x.dim();
    let (oh, ow) = g.out_hw(h, w);
    let width = n * oh * ow;
    let (cols, _) = im2col_batch(x, g);
    let cols_m = ArrayView2::from_shape((g.patch_len(), width), &cols).expect("cols shape");
    let gy_m = nchw_to_cmat(gy);
    let gy_view = ArrayView2::from_shape((g.out_ch, width), &gy_m).expect("gy shape");
    let mut gw = Array2::zeros((g.out_ch, g.patch_len()));
    ndarray::linalg::general_mat_mul(F::one(), &gy_view, &cols_m.t(), F::zero(), &mut gw);
    let mut gb = Array1::zeros(g.out_ch);
    for oc in 0..g.out_ch {
        gb[oc] = gy_view.row(oc).iter().copied().sum();
    }
    (gw, gb)
}
