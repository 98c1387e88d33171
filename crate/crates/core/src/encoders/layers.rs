use rand::Rng;

use crate::error::Result;
use crate::numeric::{Bound, ParamId, ParamStore, Tensor, Var};

/// How a fresh weight matrix is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    Uniform,
    /// Identity weight, zero bias (square layers only).
    Identity,
}

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape matches data length")
}

/// Affine map `x W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = match init {
            Init::Uniform => uniform(rng, &[in_dim, out_dim], 1.0 / (in_dim as f64).sqrt()),
            Init::Identity => {
                if in_dim != out_dim {
                    return Err(crate::Error::shape("Init::Identity", &[in_dim], &[out_dim]));
                }
                Tensor::identity(in_dim)
            }
        };
        let bias = match init {
            Init::Uniform => uniform(rng, &[1, out_dim], 1.0 / (in_dim as f64).sqrt()),
            Init::Identity => Tensor::zeros(&[1, out_dim]),
        };
        Ok(Self {
            weight: store.register(format!("{name}.weight"), weight)?,
            bias: store.register(format!("{name}.bias"), bias)?,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        x.matmul(&p.var(self.weight))?.add_row(&p.var(self.bias))
    }
}

/// Stack of [`Linear`] layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists layer widths including input and output, so an
    /// `n`-layer perceptron takes `n + 1` entries.
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], Init::Uniform, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let mut h = *x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(p, &h)?;
            if i + 1 < self.layers.len() {
                h = h.relu();
            }
        }
        Ok(h)
    }
}

/// Square-kernel convolution followed by ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = (in_channels * kernel * kernel) as f64;
        // He-uniform bound
        let w = uniform(rng, &[out_channels, in_channels, kernel, kernel], (6.0 / fan_in).sqrt());
        let b = uniform(rng, &[out_channels], 1.0 / fan_in.sqrt());
        Ok(Self {
            weight: store.register(format!("{name}.weight"), w)?,
            bias: store.register(format!("{name}.bias"), b)?,
            stride,
            padding,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        Ok(x
            .conv2d(&p.var(self.weight), &p.var(self.bias), self.stride, self.padding)?
            .relu())
    }
}
