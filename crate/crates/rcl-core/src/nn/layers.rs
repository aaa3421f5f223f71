//! Layer definitions and their backward passes.

use super::conv::{conv_forward_raw, conv_grad_input_raw, conv_grad_weight_raw, ConvGeom};
use super::{c, Elem, GradBuf, Network, ParamId, ParamSet};
use ndarray::{Array1, Array2, ArrayD, Ix2, Ix4};
use rand::Rng;

/// 3×3 (or 1×1) convolution with square stride and `k/2` padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub geom: ConvGeom,
}

impl Conv2d {
    pub fn new<F: Elem, R: Rng>(
        ps: &mut ParamSet<F>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * k * k;
        let w = ps.add_he(&format!("{name}.weight"), &[out_ch, in_ch, k, k], fan_in, rng);
        let b = ps.add_zeros(&format!("{name}.bias"), &[out_ch]);
        Conv2d {
            w,
            b,
            geom: ConvGeom {
                in_ch,
                out_ch,
                k,
                stride,
                pad: k / 2,
            },
        }
    }
}

/// Transposed 3×3 stride-2 convolution that exactly doubles spatial size
/// (output padding 1). Weight layout is `[in_ch, out_ch, k, k]`.
#[derive(Debug, Clone)]
pub struct ConvT2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl ConvT2d {
    pub fn new<F: Elem, R: Rng>(
        ps: &mut ParamSet<F>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        rng: &mut R,
    ) -> Self {
        let k = 3;
        let fan_in = in_ch * k * k;
        let w = ps.add_he(&format!("{name}.weight"), &[in_ch, out_ch, k, k], fan_in, rng);
        let b = ps.add_zeros(&format!("{name}.bias"), &[out_ch]);
        ConvT2d {
            w,
            b,
            in_ch,
            out_ch,
            k,
            stride: 2,
            pad: 1,
            out_pad: 1,
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h - 1) * self.stride + self.k + self.out_pad - 2 * self.pad,
            (w - 1) * self.stride + self.k + self.out_pad - 2 * self.pad,
        )
    }

    /// The convolution this layer is the adjoint of (maps output → input).
    fn virtual_geom(&self) -> ConvGeom {
        ConvGeom {
            in_ch: self.out_ch,
            out_ch: self.in_ch,
            k: self.k,
            stride: self.stride,
            pad: self.pad,
        }
    }
}

/// Group normalization with learned per-channel scale and shift. Statistics
/// are per sample, so there is no cross-sample coupling.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new<F: Elem>(ps: &mut ParamSet<F>, name: &str, channels: usize, groups: usize) -> Self {
        assert!(channels % groups == 0, "channels must divide into groups");
        let gamma = ps.add(&format!("{name}.gamma"), &[channels], || F::one());
        let beta = ps.add_zeros(&format!("{name}.beta"), &[channels]);
        GroupNorm {
            gamma,
            beta,
            groups,
            eps: 1e-5,
        }
    }
}

/// Fully connected layer, `y = x Wᵀ + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Elem, R: Rng>(
        ps: &mut ParamSet<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w = ps.add_he(&format!("{name}.weight"), &[out_dim, in_dim], in_dim, rng);
        let b = ps.add_zeros(&format!("{name}.bias"), &[out_dim]);
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }
}

/// Two-path residual block: `relu(main(x) + skip(x))`, identity skip when
/// `skip` is empty.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub main: Network,
    pub skip: Network,
    pub final_relu: bool,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv2d(Conv2d),
    ConvT2d(ConvT2d),
    GroupNorm(GroupNorm),
    Relu,
    Flatten,
    Unflatten { channels: usize, h: usize, w: usize },
    Linear(Linear),
    L2Normalize { eps: f64 },
    Residual(Box<ResidualBlock>),
}

/// Saved forward state each layer needs for its backward pass.
pub enum Cache<F> {
    Conv { x: ArrayD<F> },
    ConvT { x: ArrayD<F> },
    GroupNorm { x: ArrayD<F>, mean: Array2<F>, inv_std: Array2<F> },
    Relu { x: ArrayD<F> },
    Flatten { shape: Vec<usize> },
    Unflatten,
    Linear { x: ArrayD<F> },
    L2 { x: ArrayD<F> },
    Residual { main: Vec<Cache<F>>, skip: Vec<Cache<F>>, pre_relu: Option<ArrayD<F>> },
}

impl Layer {
    pub fn forward<F: Elem>(
        &self,
        ps: &ParamSet<F>,
        x: ArrayD<F>,
        caches: Option<&mut Vec<Cache<F>>>,
    ) -> ArrayD<F> {
        match self {
            Layer::Conv2d(l) => {
                let x4 = x.view().into_dimensionality::<Ix4>().expect("conv input 4-d");
                let y = conv_forward_raw(
                    &x4.to_owned(),
                    &ps.view2_flat(l.w),
                    Some(&ps.view1(l.b)),
                    &l.geom,
                );
                if let Some(cs) = caches {
                    cs.push(Cache::Conv { x });
                }
                y.into_dyn()
            }
            Layer::ConvT2d(l) => {
                let x4 = x.view().into_dimensionality::<Ix4>().expect("deconv input 4-d");
                let (_, _, h, w) = x4.dim();
                let (oh, ow) = l.out_hw(h, w);
                let mut y = conv_grad_input_raw(
                    &x4.to_owned(),
                    &ps.view2_flat(l.w),
                    &l.virtual_geom(),
                    (oh, ow),
                );
                let b = ps.view1(l.b);
                let (n, oc, _, _) = y.dim();
                let plane = oh * ow;
                let ys = y.as_slice_mut().expect("contiguous");
                for i in 0..n {
                    for ch in 0..oc {
                        let bv = b[ch];
                        for v in &mut ys[(i * oc + ch) * plane..(i * oc + ch + 1) * plane] {
                            *v = *v + bv;
                        }
                    }
                }
                if let Some(cs) = caches {
                    cs.push(Cache::ConvT { x });
                }
                y.into_dyn()
            }
            Layer::GroupNorm(l) => {
                let x4 = x.view().into_dimensionality::<Ix4>().expect("gn input 4-d");
                let (n, ch, h, w) = x4.dim();
                let cg = ch / l.groups;
                let m = cg * h * w;
                let gamma = ps.view1(l.gamma);
                let beta = ps.view1(l.beta);
                let mut mean = Array2::zeros((n, l.groups));
                let mut inv_std = Array2::zeros((n, l.groups));
                let mut y = x.clone();
                {
                    let xs = x.as_slice().expect("contiguous");
                    let ys = y.as_slice_mut().expect("contiguous");
                    let plane = h * w;
                    for i in 0..n {
                        for g in 0..l.groups {
                            let start = (i * ch + g * cg) * plane;
                            let seg = &xs[start..start + m];
                            let mu: F = seg.iter().copied().sum::<F>() / c(m as f64);
                            let var: F = seg
                                .iter()
                                .map(|&v| (v - mu) * (v - mu))
                                .sum::<F>()
                                / c(m as f64);
                            let istd = F::one() / (var + c(l.eps)).sqrt();
                            mean[(i, g)] = mu;
                            inv_std[(i, g)] = istd;
                            for cc in 0..cg {
                                let gm = gamma[g * cg + cc];
                                let bt = beta[g * cg + cc];
                                let off = start + cc * plane;
                                for (d, &s) in ys[off..off + plane]
                                    .iter_mut()
                                    .zip(xs[off..off + plane].iter())
                                {
                                    *d = gm * (s - mu) * istd + bt;
                                }
                            }
                        }
                    }
                }
                if let Some(cs) = caches {
                    cs.push(Cache::GroupNorm { x, mean, inv_std });
                }
                y
            }
            Layer::Relu => {
                let mut y = x.clone();
                for v in y.iter_mut() {
                    if *v < F::zero() {
                        *v = F::zero();
                    }
                }
                if let Some(cs) = caches {
                    cs.push(Cache::Relu { x });
                }
                y
            }
            Layer::Flatten => {
                let shape = x.shape().to_vec();
                let n = shape[0];
                let rest: usize = shape[1..].iter().product();
                let y = x
                    .to_shape((n, rest))
                    .expect("flatten reshape")
                    .to_owned()
                    .into_dyn();
                if let Some(cs) = caches {
                    cs.push(Cache::Flatten { shape });
                }
                y
            }
            Layer::Unflatten { channels, h, w } => {
                let n = x.shape()[0];
                let y = x
                    .to_shape((n, *channels, *h, *w))
                    .expect("unflatten reshape")
                    .to_owned()
                    .into_dyn();
                if let Some(cs) = caches {
                    cs.push(Cache::Unflatten);
                }
                y
            }
            Layer::Linear(l) => {
                let x2 = x.view().into_dimensionality::<Ix2>().expect("linear input 2-d");
                let w = ps.view2_flat(l.w);
                let b = ps.view1(l.b);
                let n = x2.nrows();
                let mut y = Array2::zeros((n, l.out_dim));
                ndarray::linalg::general_mat_mul(F::one(), &x2, &w.t(), F::zero(), &mut y);
                for mut row in y.rows_mut() {
                    row += &b;
                }
                if let Some(cs) = caches {
                    cs.push(Cache::Linear { x });
                }
                y.into_dyn()
            }
            Layer::L2Normalize { eps } => {
                let x2 = x.view().into_dimensionality::<Ix2>().expect("l2norm input 2-d");
                let mut y = x2.to_owned();
                for mut row in y.rows_mut() {
                    let n: F = row.iter().map(|&v| v * v).sum::<F>().sqrt();
                    let s = n + c(*eps);
                    row.mapv_inplace(|v| v / s);
                }
                if let Some(cs) = caches {
                    cs.push(Cache::L2 { x });
                }
                y.into_dyn()
            }
            Layer::Residual(block) => {
                if let Some(cs) = caches {
                    let (main_y, main_c) = block.main.forward_cached(ps, x.clone());
                    let (skip_y, skip_c) = block.skip.forward_cached(ps, x);
                    let mut sum = main_y + skip_y;
                    let pre_relu = if block.final_relu { Some(sum.clone()) } else { None };
                    if block.final_relu {
                        for v in sum.iter_mut() {
                            if *v < F::zero() {
                                *v = F::zero();
                            }
                        }
                    }
                    cs.push(Cache::Residual {
                        main: main_c,
                        skip: skip_c,
                        pre_relu,
                    });
                    sum
                } else {
                    let main_y = block.main.forward(ps, x.clone());
                    let skip_y = block.skip.forward(ps, x);
                    let mut sum = main_y + skip_y;
                    if block.final_relu {
                        for v in sum.iter_mut() {
                            if *v < F::zero() {
                                *v = F::zero();
                            }
                        }
                    }
                    sum
                }
            }
        }
    }

    pub fn backward<F: Elem>(
        &self,
        ps: &ParamSet<F>,
        cache: &Cache<F>,
        gy: ArrayD<F>,
        grads: &mut GradBuf<F>,
    ) -> ArrayD<F> {
        match (self, cache) {
            (Layer::Conv2d(l), Cache::Conv { x }) => {
                let x4 = x.view().into_dimensionality::<Ix4>().unwrap().to_owned();
                let gy4 = gy.view().into_dimensionality::<Ix4>().unwrap().to_owned();
                let (gw, gb) = conv_grad_weight_raw(&x4, &gy4, &l.geom);
                grads.view2_flat_mut(ps, l.w).scaled_add(F::one(), &gw);
                grads.view_mut1(ps, l.b).scaled_add(F::one(), &gb);
                let (_, _, h, w) = x4.dim();
                conv_grad_input_raw(&gy4, &ps.view2_flat(l.w), &l.geom, (h, w)).into_dyn()
            }
            (Layer::ConvT2d(l), Cache::ConvT { x }) => {
                let x4 = x.view().into_dimensionality::<Ix4>().unwrap().to_owned();
                let gy4 = gy.view().into_dimensionality::<Ix4>().unwrap().to_owned();
                let vg = l.virtual_geom();
                // Weight grad of the adjoint: swap the roles of input and
                // output gradient relative to a plain convolution.
                let (gw, _) = conv_grad_weight_raw(&gy4, &x4, &vg);
                grads.view2_flat_mut(ps, l.w).scaled_add(F::one(), &gw);
                {
                    let (n, oc, oh, ow) = gy4.dim();
                    let plane = oh * ow;
                    let gys = gy4.as_slice().expect("contiguous");
                    let mut gb = Array1::<F>::zeros(oc);
                    for i in 0..n {
                        for ch in 0..oc {
                            gb[ch] = gb[ch]
                                + gys[(i * oc + ch) * plane..(i * oc + ch + 1) * plane]
                                    .iter()
                                    .copied()
                                    .sum::<F>();
                        }
                    }
                    grads.view_mut1(ps, l.b).scaled_add(F::one(), &gb);
                }
                conv_forward_raw(&gy4, &ps.view2_flat(l.w), None, &vg).into_dyn()
            }
            (Layer::GroupNorm(l), Cache::GroupNorm { x, mean, inv_std }) => {
                let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
                let (n, ch, h, w) = x4.dim();
                let cg = ch / l.groups;
                let m = cg * h * w;
                let plane = h * w;
                let gamma = ps.view1(l.gamma);
                let xs = x.as_slice().expect("contiguous");
                let gys = gy.as_slice().expect("contiguous");
                let mut gx = ArrayD::<F>::zeros(x.raw_dim());
                let gxs = gx.as_slice_mut().expect("contiguous");
                let mut ggamma = vec![F::zero(); ch];
                let mut gbeta = vec![F::zero(); ch];
                for i in 0..n {
                    for g in 0..l.groups {
                        let start = (i * ch + g * cg) * plane;
                        let mu = mean[(i, g)];
                        let istd = inv_std[(i, g)];
                        let mut sum1 = F::zero();
                        let mut sum2 = F::zero();
                        for cc in 0..cg {
                            let gm = gamma[g * cg + cc];
                            let off = start + cc * plane;
                            for j in 0..plane {
                                let xhat = (xs[off + j] - mu) * istd;
                                let dxhat = gys[off + j] * gm;
                                sum1 = sum1 + dxhat;
                                sum2 = sum2 + dxhat * xhat;
                                ggamma[g * cg + cc] = ggamma[g * cg + cc] + gys[off + j] * xhat;
                                gbeta[g * cg + cc] = gbeta[g * cg + cc] + gys[off + j];
                            }
                        }
                        let inv_m = F::one() / c(m as f64);
                        for cc in 0..cg {
                            let gm = gamma[g * cg + cc];
                            let off = start + cc * plane;
                            for j in 0..plane {
                                let xhat = (xs[off + j] - mu) * istd;
                                let dxhat = gys[off + j] * gm;
                                gxs[off + j] = istd * (dxhat - inv_m * (sum1 + xhat * sum2));
                            }
                        }
                    }
                }
                {
                    let mut gg = grads.view_mut1(ps, l.gamma);
                    for (d, s) in gg.iter_mut().zip(ggamma.iter()) {
                        *d = *d + *s;
                    }
                    let mut gb = grads.view_mut1(ps, l.beta);
                    for (d, s) in gb.iter_mut().zip(gbeta.iter()) {
                        *d = *d + *s;
                    }
                }
                gx
            }
            (Layer::Relu, Cache::Relu { x }) => {
                let mut gx = gy;
                for (g, &v) in gx.iter_mut().zip(x.iter()) {
                    if v <= F::zero() {
                        *g = F::zero();
                    }
                }
                gx
            }
            (Layer::Flatten, Cache::Flatten { shape }) => {
                gy.to_shape(shape.as_slice()).expect("unflatten").to_owned()
            }
            (Layer::Unflatten { .. }, Cache::Unflatten) => {
                let n = gy.shape()[0];
                let rest: usize = gy.shape()[1..].iter().product();
                gy.to_shape((n, rest)).expect("reflatten").to_owned().into_dyn()
            }
            (Layer::Linear(l), Cache::Linear { x }) => {
                let x2 = x.view().into_dimensionality::<Ix2>().unwrap();
                let gy2 = gy.view().into_dimensionality::<Ix2>().unwrap();
                {
                    let mut gw = grads.view2_flat_mut(ps, l.w);
                    ndarray::linalg::general_mat_mul(F::one(), &gy2.t(), &x2, F::one(), &mut gw);
                    let mut gb = grads.view_mut1(ps, l.b);
                    for row in gy2.rows() {
                        gb.scaled_add(F::one(), &row);
                    }
                }
                let w = ps.view2_flat(l.w);
                let mut gx = Array2::zeros(x2.raw_dim());
                ndarray::linalg::general_mat_mul(F::one(), &gy2, &w, F::zero(), &mut gx);
                gx.into_dyn()
            }
            (Layer::L2Normalize { eps }, Cache::L2 { x }) => {
                let x2 = x.view().into_dimensionality::<Ix2>().unwrap();
                let gy2 = gy.view().into_dimensionality::<Ix2>().unwrap();
                let mut gx = Array2::zeros(x2.raw_dim());
                let eps_f: F = c(*eps);
                for ((xrow, gyrow), mut gxrow) in
                    x2.rows().into_iter().zip(gy2.rows()).zip(gx.rows_mut())
                {
                    let n: F = xrow.iter().map(|&v| v * v).sum::<F>().sqrt();
                    let s = n + eps_f;
                    let n_safe = if n > eps_f { n } else { eps_f };
                    let dot: F = gyrow.iter().zip(xrow.iter()).map(|(&g, &v)| g * v).sum();
                    let coef = dot / (n_safe * s * s);
                    for ((gx_v, &g), &v) in gxrow.iter_mut().zip(gyrow.iter()).zip(xrow.iter()) {
                        *gx_v = g / s - v * coef;
                    }
                }
                gx.into_dyn()
            }
            (Layer::Residual(block), Cache::Residual { main, skip, pre_relu }) => {
                let mut g = gy;
                if let Some(pre) = pre_relu {
                    for (gv, &v) in g.iter_mut().zip(pre.iter()) {
                        if v <= F::zero() {
                            *gv = F::zero();
                        }
                    }
                }
                let g_main = block.main.backward(ps, main, g.clone(), grads);
                let g_skip = block.skip.backward(ps, skip, g, grads);
                g_main + g_skip
            }
            _ => unreachable!("layer/cache variant mismatch"),
        }
    }
}
