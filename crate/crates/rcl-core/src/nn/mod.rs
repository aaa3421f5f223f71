//! Minimal CPU neural-network stack: a flat parameter store, a small set of
//! layers with hand-written backward passes, and sequential networks built
//! from them. Everything is generic over `f32`/`f64` so that training runs in
//! single precision while gradient checks run in double precision.

mod conv;
mod layers;

pub use conv::{conv_forward_raw, conv_grad_input_raw, conv_grad_weight_raw, ConvGeom};
pub use layers::{Cache, Conv2d, ConvT2d, GroupNorm, Layer, Linear, ResidualBlock};

use ndarray::{ArrayD, ArrayView1, ArrayViewD, ArrayViewMut1, ArrayViewMutD};
use rand::Rng;
use rand_distr::StandardNormal;
use std::ops::Range;

/// Scalar element type for all network math.
pub trait Elem: ndarray::NdFloat + num_traits::FromPrimitive + std::iter::Sum {}
impl Elem for f32 {}
impl Elem for f64 {}

/// Shorthand for converting literals into the active element type.
#[inline]
pub fn c<F: Elem>(x: f64) -> F {
    F::from_f64(x).expect("finite literal")
}

/// Handle to one named tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

/// All parameters of a model, stored contiguously so that optimizers,
/// checkpoints, and gradient buffers can treat them as one flat vector.
#[derive(Debug, Clone)]
pub struct ParamSet<F> {
    entries: Vec<ParamEntry>,
    data: Vec<F>,
}

impl<F: Elem> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            data: Vec::new(),
        }
    }

    /// Registers a named tensor filled by `fill` and returns its handle.
    pub fn add(&mut self, name: &str, shape: &[usize], mut fill: impl FnMut() -> F) -> ParamId {
        let len: usize = shape.iter().product();
        let offset = self.data.len();
        self.data.extend(std::iter::repeat_with(&mut fill).take(len));
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset,
            len,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, shape, || F::zero())
    }

    /// He-normal initialization with the given fan-in.
    pub fn add_he<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let std = (2.0 / fan_in as f64).sqrt();
        self.add(name, shape, || {
            let z: f64 = rng.sample(StandardNormal);
            c(z * std)
        })
    }

    pub fn num_tensors(&self) -> usize {
        self.entries.len()
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].shape
    }

    /// Flat range of this tensor inside [`Self::data`].
    pub fn range(&self, id: ParamId) -> Range<usize> {
        let e = &self.entries[id.0];
        e.offset..e.offset + e.len
    }

    pub fn view(&self, id: ParamId) -> ArrayViewD<'_, F> {
        let e = &self.entries[id.0];
        ArrayViewD::from_shape(e.shape.as_slice(), &self.data[e.offset..e.offset + e.len])
            .expect("param shape consistent")
    }

    pub fn view_mut(&mut self, id: ParamId) -> ArrayViewMutD<'_, F> {
        let e = self.entries[id.0].clone();
        ArrayViewMutD::from_shape(
            e.shape.as_slice(),
            &mut self.data[e.offset..e.offset + e.len],
        )
        .expect("param shape consistent")
    }

    pub fn view1(&self, id: ParamId) -> ArrayView1<'_, F> {
        let e = &self.entries[id.0];
        ArrayView1::from(&self.data[e.offset..e.offset + e.len])
    }

    /// 2-D view collapsing all trailing axes, e.g. a conv weight
    /// `[out, in, k, k]` seen as `(out, in*k*k)`.
    pub fn view2_flat(&self, id: ParamId) -> ndarray::ArrayView2<'_, F> {
        let e = &self.entries[id.0];
        let rows = e.shape[0];
        let cols = e.len / rows;
        ndarray::ArrayView2::from_shape((rows, cols), &self.data[e.offset..e.offset + e.len])
            .expect("param shape consistent")
    }

    /// Iterates `(name, shape, flat slice)` in registration order.
    pub fn iter_named(&self) -> impl Iterator<Item = (&str, &[usize], &[F])> {
        self.entries.iter().map(move |e| {
            (
                e.name.as_str(),
                e.shape.as_slice(),
                &self.data[e.offset..e.offset + e.len],
            )
        })
    }

    /// Overwrites the tensor with `name` from a flat slice.
    pub fn load_named(&mut self, name: &str, values: &[F]) -> crate::Result<()> {
        let e = self
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| crate::RclError::Format(format!("unknown parameter `{name}`")))?
            .clone();
        if values.len() != e.len {
            return Err(crate::RclError::Shape(format!(
                "parameter `{name}` expects {} values, got {}",
                e.len,
                values.len()
            )));
        }
        self.data[e.offset..e.offset + e.len].copy_from_slice(values);
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<F: Elem> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient buffer with the same flat layout as a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct GradBuf<F> {
    data: Vec<F>,
}

impl<F: Elem> GradBuf<F> {
    pub fn zeros_like(ps: &ParamSet<F>) -> Self {
        GradBuf {
            data: vec![F::zero(); ps.len()],
        }
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn view_mut(&mut self, ps: &ParamSet<F>, id: ParamId) -> ArrayViewMutD<'_, F> {
        let r = ps.range(id);
        let shape = ps.shape(id).to_vec();
        ArrayViewMutD::from_shape(shape.as_slice(), &mut self.data[r]).expect("grad shape")
    }

    pub fn view_mut1(&mut self, ps: &ParamSet<F>, id: ParamId) -> ArrayViewMut1<'_, F> {
        let r = ps.range(id);
        ArrayViewMut1::from(&mut self.data[r])
    }

    pub fn view2_flat_mut(&mut self, ps: &ParamSet<F>, id: ParamId) -> ndarray::ArrayViewMut2<'_, F> {
        let r = ps.range(id);
        let shape = ps.shape(id);
        let rows = shape[0];
        let cols = (r.end - r.start) / rows;
        ndarray::ArrayViewMut2::from_shape((rows, cols), &mut self.data[r]).expect("grad shape")
    }

    /// Accumulates another buffer; used for the ordered chunk reduction.
    pub fn add_assign(&mut self, other: &GradBuf<F>) {
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + *b;
        }
    }

    pub fn scale(&mut self, s: F) {
        for a in self.data.iter_mut() {
            *a = *a * s;
        }
    }
}

/// A sequential stack of layers. Parameters live in an external [`ParamSet`];
/// the network itself is plain geometry and is cheap to clone.
#[derive(Debug, Clone, Default)]
pub struct Network {
    pub layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Self {
        Network { layers }
    }

    /// Inference-mode forward pass.
    pub fn forward<F: Elem>(&self, ps: &ParamSet<F>, mut x: ArrayD<F>) -> ArrayD<F> {
        for layer in &self.layers {
            x = layer.forward(ps, x, None);
        }
        x
    }

    /// Forward pass that records per-layer caches for [`Self::backward`].
    pub fn forward_cached<F: Elem>(
        &self,
        ps: &ParamSet<F>,
        mut x: ArrayD<F>,
    ) -> (ArrayD<F>, Vec<Cache<F>>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            x = layer.forward(ps, x, Some(&mut caches));
        }
        (x, caches)
    }

    /// Backpropagates `gy`, accumulating parameter gradients into `grads` and
    /// returning the gradient with respect to the network input.
    pub fn backward<F: Elem>(
        &self,
        ps: &ParamSet<F>,
        caches: &[Cache<F>],
        mut gy: ArrayD<F>,
        grads: &mut GradBuf<F>,
    ) -> ArrayD<F> {
        assert_eq!(caches.len(), self.layers.len(), "cache/layer mismatch");
        for (layer, cache) in self.layers.iter().zip(caches.iter()).rev() {
            gy = layer.backward(ps, cache, gy, grads);
        }
        gy
    }
}

#[cfg(test)]
mod tests;
