//! Named parameter storage and the small layers the network is built from.
//!
//! Layers hold [`ParamId`]s into a flat [`ParamSet`]; gradients live in a
//! [`Grads`] with the same indexing. Every layer has a hand-written backward
//! that accumulates into `Grads` and returns the input gradient.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    conv2d, conv2d_backward, depthwise_conv2d, depthwise_conv2d_backward, gelu, gelu_grad,
    layer_norm, layer_norm_backward, matmul_into, LayerNormCache, Scalar, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<S = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&self) -> Grads<S> {
        Grads {
            tensors: self.tensors.iter().map(Tensor::zeros_like).collect(),
        }
    }

    /// Replaces a tensor, keeping its name and requiring the same shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<S>) -> Result<()> {
        if value.shape() != self.tensors[id.0].shape() {
            return Err(Error::Shape(format!(
                "parameter {} is {:?}, replacement is {:?}",
                self.names[id.0],
                self.tensors[id.0].shape(),
                value.shape()
            )));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Gradient buffers aligned with a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<S = f32> {
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn acc(&mut self, id: ParamId) -> &mut [S] {
        self.tensors[id.0].data_mut()
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn add_assign(&mut self, other: &Grads<S>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b).expect("aligned gradients");
        }
    }

    pub fn scale(&mut self, s: S) {
        for t in &mut self.tensors {
            t.map_inplace(|v| v * s);
        }
    }

    pub fn global_norm(&self) -> S {
        let sq: Vec<S> = self
            .tensors
            .iter()
            .map(|t| {
                let squares: Vec<S> = t.data().iter().map(|&v| v * v).collect();
                crate::tensor::pairwise_sum(&squares)
            })
            .collect();
        crate::tensor::pairwise_sum(&sq).sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Index of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<ParamId> {
        self.tensors
            .iter()
            .position(|t| !t.all_finite())
            .map(ParamId)
    }
}

fn acc_slice<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Uniform initialiser with variance `gain^2 / fan_in`.
pub fn init_uniform<S: Scalar, R: Rng>(
    rng: &mut R,
    shape: &[usize],
    fan_in: usize,
    gain: f64,
) -> Tensor<S> {
    let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| S::lit(rng.gen_range(-bound..=bound)))
}

/// Per-position affine map over the last axis: `y = x W + b`, `W` is `[Cin, Cout]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng>(
        ps: &mut ParamSet<S>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
    ) -> Self {
        let weight = ps.add(
            format!("{name}.weight"),
            init_uniform(rng, &[cin, cout], cin, 1.0),
        );
        let bias = bias.then(|| ps.add(format!("{name}.bias"), Tensor::zeros([cout])));
        Self {
            weight,
            bias,
            cin,
            cout,
        }
    }

    fn out_shape<S: Scalar>(&self, x: &Tensor<S>) -> Result<(usize, Vec<usize>)> {
        let last = *x.shape().last().expect("rank >= 1");
        if last != self.cin {
            return Err(Error::Shape(format!(
                "linear expects {} input channels, got {:?}",
                self.cin,
                x.shape()
            )));
        }
        let rows = if self.cin == 0 {
            x.shape()[..x.rank() - 1].iter().product()
        } else {
            x.len() / self.cin
        };
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = self.cout;
        Ok((rows, shape))
    }

    pub fn forward<S: Scalar>(&self, ps: &ParamSet<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (rows, shape) = self.out_shape(x)?;
        let mut out = Tensor::zeros(shape);
        let beta = if let Some(b) = self.bias {
            let b = ps.get(b).data();
            for row in out.data_mut().chunks_mut(self.cout.max(1)) {
                row.copy_from_slice(&b[..row.len()]);
            }
            S::one()
        } else {
            S::zero()
        };
        matmul_into(
            rows,
            self.cin,
            self.cout,
            x.data(),
            false,
            ps.get(self.weight).data(),
            false,
            out.data_mut(),
            beta,
        );
        Ok(out)
    }

    pub fn backward<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        x: &Tensor<S>,
        dy: &Tensor<S>,
        grads: &mut Grads<S>,
    ) -> Result<Tensor<S>> {
        let (rows, _) = self.out_shape(x)?;
        matmul_into(
            self.cin,
            rows,
            self.cout,
            x.data(),
            true,
            dy.data(),
            false,
            grads.acc(self.weight),
            S::one(),
        );
        if let Some(b) = self.bias {
            let db = grads.acc(b);
            for row in dy.data().chunks(self.cout.max(1)) {
                acc_slice(db, row);
            }
        }
        let mut dx = x.zeros_like();
        matmul_into(
            rows,
            self.cout,
            self.cin,
            dy.data(),
            false,
            ps.get(self.weight).data(),
            true,
            dx.data_mut(),
            S::zero(),
        );
        Ok(dx)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<S: Scalar>(ps: &mut ParamSet<S>, name: &str, width: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), Tensor::full([width], S::one())),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros([width])),
            eps: LN_EPS,
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        x: &Tensor<S>,
    ) -> Result<(Tensor<S>, LayerNormCache<S>)> {
        layer_norm(
            x,
            ps.get(self.gamma).data(),
            ps.get(self.beta).data(),
            S::lit(self.eps),
        )
    }

    pub fn backward<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        cache: &LayerNormCache<S>,
        dy: &Tensor<S>,
        grads: &mut Grads<S>,
    ) -> Tensor<S> {
        let width = ps.get(self.gamma).len();
        let mut dg = vec![S::zero(); width];
        let mut db = vec![S::zero(); width];
        let dx = layer_norm_backward(cache, ps.get(self.gamma).data(), dy, &mut dg, &mut db);
        acc_slice(grads.acc(self.gamma), &dg);
        acc_slice(grads.acc(self.beta), &db);
        dx
    }
}

/// Dense K x K convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng>(
        ps: &mut ParamSet<S>,
        rng: &mut R,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        Self {
            weight: ps.add(
                format!("{name}.weight"),
                init_uniform(rng, &[k, k, cin, cout], k * k * cin, 1.0),
            ),
            bias: ps.add(format!("{name}.bias"), Tensor::zeros([cout])),
            stride,
        }
    }

    pub fn forward<S: Scalar>(&self, ps: &ParamSet<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        conv2d(
            x,
            ps.get(self.weight),
            Some(ps.get(self.bias).data()),
            self.stride,
        )
    }

    pub fn backward<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        x: &Tensor<S>,
        dy: &Tensor<S>,
        grads: &mut Grads<S>,
    ) -> Result<Tensor<S>> {
        let g = conv2d_backward(x, ps.get(self.weight), dy, self.stride)?;
        acc_slice(grads.acc(self.weight), g.dweight.data());
        acc_slice(grads.acc(self.bias), &g.dbias);
        Ok(g.dx)
    }
}

/// Depthwise K x K convolution with bias.
#[derive(Clone, Debug)]
pub struct DwConv {
    pub kernels: ParamId,
    pub bias: ParamId,
    pub k: usize,
}

impl DwConv {
    pub fn new<S: Scalar, R: Rng>(
        ps: &mut ParamSet<S>,
        rng: &mut R,
        name: &str,
        k: usize,
        channels: usize,
    ) -> Self {
        Self {
            kernels: ps.add(
                format!("{name}.kernels"),
                init_uniform(rng, &[k, k, channels], k * k, 1.0),
            ),
            bias: ps.add(format!("{name}.bias"), Tensor::zeros([channels])),
            k,
        }
    }

    pub fn forward<S: Scalar>(&self, ps: &ParamSet<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        depthwise_conv2d(x, ps.get(self.kernels), Some(ps.get(self.bias).data()), 1)
    }

    pub fn backward<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        x: &Tensor<S>,
        dy: &Tensor<S>,
        grads: &mut Grads<S>,
    ) -> Result<Tensor<S>> {
        let g = depthwise_conv2d_backward(x, ps.get(self.kernels), dy, 1)?;
        acc_slice(grads.acc(self.kernels), g.dkernels.data());
        acc_slice(grads.acc(self.bias), &g.dbias);
        Ok(g.dx)
    }
}

pub fn gelu_forward<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(gelu)
}

pub fn gelu_backward<S: Scalar>(x: &Tensor<S>, dy: &Tensor<S>) -> Tensor<S> {
    x.zip_with(dy, |a, g| g * gelu_grad(a))
        .expect("gelu gradient shape")
}

/// Point-wise feed-forward network `Linear -> GELU -> Linear`.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct FfnCache<S> {
    x: Tensor<S>,
    h: Tensor<S>,
    a: Tensor<S>,
}

impl Ffn {
    pub fn new<S: Scalar, R: Rng>(
        ps: &mut ParamSet<S>,
        rng: &mut R,
        name: &str,
        width: usize,
        hidden: usize,
    ) -> Self {
        Self {
            fc1: Linear::new(ps, rng, &format!("{name}.fc1"), width, hidden, true),
            fc2: Linear::new(ps, rng, &format!("{name}.fc2"), hidden, width, true),
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        x: &Tensor<S>,
    ) -> Result<(Tensor<S>, FfnCache<S>)> {
        let h = self.fc1.forward(ps, x)?;
        let a = gelu_forward(&h);
        let y = self.fc2.forward(ps, &a)?;
        Ok((y, FfnCache { x: x.clone(), h, a }))
    }

    pub fn backward<S: Scalar>(
        &self,
        ps: &ParamSet<S>,
        cache: &FfnCache<S>,
        dy: &Tensor<S>,
        grads: &mut Grads<S>,
    ) -> Result<Tensor<S>> {
        let da = self.fc2.backward(ps, &cache.a, dy, grads)?;
        let dh = gelu_backward(&cache.h, &da);
        self.fc1.backward(ps, &cache.x, &dh, grads)
    }
}
