//! Parameterised building blocks shared by the coarse and refined nets.

use forgeloc_autograd::{Graph, ParamId, ParamStore, Scalar, Shape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

/// Convolution with "same" padding, He-normal weights and zero bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl Conv {
    pub fn same<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        rng: &mut R,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        dilation: usize,
    ) -> Self {
        let fan_in = (in_c * kernel * kernel) as f32;
        let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).expect("positive std");
        let shape = Shape::new(out_c, in_c, kernel, kernel);
        let w = Tensor::from_fn(shape, |_| normal.sample(rng));
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(Shape::new(out_c, 1, 1, 1)));
        Conv {
            weight,
            bias,
            in_c,
            out_c,
            kernel,
            dilation,
        }
    }

    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        Ok(g.conv2d(x, w, Some(b), 1, self.dilation, self.padding())?)
    }

    pub fn param_count(&self) -> usize {
        self.out_c * self.in_c * self.kernel * self.kernel + self.out_c
    }
}

/// Stacked 3x3 convolutions, each followed by a rectifier.
#[derive(Clone, Debug)]
pub struct VggBlock {
    pub convs: Vec<Conv>,
}

impl VggBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        rng: &mut R,
        name: &str,
        in_c: usize,
        out_c: usize,
        depth: usize,
    ) -> Self {
        let convs = (0..depth)
            .map(|i| {
                let cin = if i == 0 { in_c } else { out_c };
                Conv::same(store, rng, &format!("{name}.conv{i}"), cin, out_c, 3, 1)
            })
            .collect();
        VggBlock { convs }
    }

    pub fn out_c(&self) -> usize {
        self.convs.last().map_or(0, |c| c.out_c)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, mut x: Var) -> Result<Var> {
        for conv in &self.convs {
            let y = conv.forward(g, store, x)?;
            x = g.relu(y);
        }
        Ok(x)
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(Conv::param_count).sum()
    }
}

pub const DILATION_RATES: [usize; 4] = [2, 4, 8, 16];

/// Four 3x3 convolutions with dilation 2, 4, 8, 16 bridging encoder and decoder.
#[derive(Clone, Debug)]
pub struct DilatedModule {
    pub convs: Vec<Conv>,
}

impl DilatedModule {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore<f32>, rng: &mut R, name: &str, channels: usize) -> Self {
        let convs = DILATION_RATES
            .iter()
            .map(|&d| Conv::same(store, rng, &format!("{name}.dil{d}"), channels, channels, 3, d))
            .collect();
        DilatedModule { convs }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, mut x: Var) -> Result<Var> {
        for conv in &self.convs {
            let y = conv.forward(g, store, x)?;
            x = g.relu(y);
        }
        Ok(x)
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(Conv::param_count).sum()
    }
}
