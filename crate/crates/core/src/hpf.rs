//! Fixed SRM high-pass kernels and the channel-wise CW-HPF block.
//!
//! The bank holds three 5x5 residual filters (KB, KV, first-order). The
//! channel-wise block filters every input channel with all three kernels and
//! concatenates the results channel-major, so `C` input channels become `3C`
//! noise channels ordered `S1*k1, S1*k2, S1*k3, S2*k1, ...`. The plain HPF
//! variant instead sums each kernel's response over all input channels and
//! always yields three channels.
//!
//! Kernels are constants of the graph: no gradient ever reaches them.

use std::sync::Arc;

use forgeloc_autograd::{DepthwiseBank, Graph, Scalar, Shape, Tensor, Var};

use crate::error::Result;

pub const KERNEL_SIZE: usize = 5;
pub const KERNEL_COUNT: usize = 3;

const KB: [[i32; 5]; 5] = [
    [0, 0, 0, 0, 0],
    [0, -1, 2, -1, 0],
    [0, 2, -4, 2, 0],
    [0, -1, 2, -1, 0],
    [0, 0, 0, 0, 0],
];

const KV: [[i32; 5]; 5] = [
    [-1, 2, -2, 2, -1],
    [2, -6, 8, -6, 2],
    [-2, 8, -12, 8, -2],
    [2, -6, 8, -6, 2],
    [-1, 2, -2, 2, -1],
];

const FIRST_ORDER: [[i32; 5]; 5] = [
    [0, 0, 0, 0, 0],
    [0, 0, 0, 0, 0],
    [0, 0, -1, 1, 0],
    [0, 0, 0, 0, 0],
    [0, 0, 0, 0, 0],
];

/// The three high-pass kernels, in the order KB, KV, first-order.
#[derive(Clone, Debug, PartialEq)]
pub struct HpfKernelBank {
    kernels: [[f64; KERNEL_SIZE * KERNEL_SIZE]; KERNEL_COUNT],
}

impl Default for HpfKernelBank {
    fn default() -> Self {
        Self::srm()
    }
}

impl HpfKernelBank {
    pub const NAMES: [&'static str; KERNEL_COUNT] = ["KB", "KV", "first_order"];

    /// KB scaled by 1/4, KV by 1/12, first-order unscaled.
    pub fn srm() -> Self {
        fn scaled(k: &[[i32; 5]; 5], div: f64) -> [f64; 25] {
            let mut out = [0.0; 25];
            for (i, v) in k.iter().flatten().enumerate() {
                out[i] = f64::from(*v) / div;
            }
            out
        }
        HpfKernelBank {
            kernels: [scaled(&KB, 4.0), scaled(&KV, 12.0), scaled(&FIRST_ORDER, 1.0)],
        }
    }

    /// Builds a bank from explicit coefficients, e.g. those stored in a checkpoint.
    pub fn from_kernels(kernels: [[f64; 25]; KERNEL_COUNT]) -> Self {
        HpfKernelBank { kernels }
    }

    pub fn kernel(&self, j: usize) -> &[f64; 25] {
        &self.kernels[j]
    }

    pub fn kernels(&self) -> &[[f64; 25]; KERNEL_COUNT] {
        &self.kernels
    }

    pub fn depthwise<T: Scalar>(&self) -> Arc<DepthwiseBank<T>> {
        let ks = self
            .kernels
            .iter()
            .map(|k| k.iter().map(|&v| T::from_f64_lossy(v)).collect())
            .collect();
        Arc::new(DepthwiseBank::new(KERNEL_SIZE, ks).expect("bank dimensions are fixed"))
    }

    /// Weight of the plain HPF layer: `[3, in_c, 5, 5]`, kernel `j`
    /// replicated across every input channel.
    pub fn plain_weight<T: Scalar>(&self, in_c: usize) -> Tensor<T> {
        Tensor::from_fn(
            Shape::new(KERNEL_COUNT, in_c, KERNEL_SIZE, KERNEL_SIZE),
            |[j, _, y, x]| T::from_f64_lossy(self.kernels[j][y * KERNEL_SIZE + x]),
        )
    }
}

/// Single-channel HPF-Conv: one `h x w` plane in, `1 x 3 x h x w` out.
pub fn hpf_conv<T: Scalar>(bank: &HpfKernelBank, plane: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = plane.shape().0;
    if n != 1 || c != 1 {
        return Err(crate::Error::InvalidArgument(format!(
            "hpf_conv takes one channel map, got {}",
            plane.shape()
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(plane.clone());
    let y = g.depthwise(x, &bank.depthwise());
    debug_assert_eq!(g.shape(y), Shape::new(1, KERNEL_COUNT, h, w));
    Ok(g.value(y).clone())
}

/// Channel-wise high-pass block: `n x C x h x w` to `n x 3C x h x w`.
#[derive(Clone, Debug, PartialEq)]
pub struct CwHpfBlock {
    pub bank: HpfKernelBank,
    pub input_channels: usize,
}

impl CwHpfBlock {
    pub fn new(input_channels: usize) -> Self {
        CwHpfBlock {
            bank: HpfKernelBank::srm(),
            input_channels,
        }
    }

    pub fn output_channels(&self) -> usize {
        KERNEL_COUNT * self.input_channels
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Var {
        debug_assert_eq!(g.shape(x).c(), self.input_channels);
        g.depthwise(x, &self.bank.depthwise())
    }
}

/// Convenience wrapper for callers holding a plain tensor.
pub fn cw_hpf<T: Scalar>(bank: &HpfKernelBank, feature: &Tensor<T>) -> Tensor<T> {
    let mut g = Graph::new();
    let x = g.constant(feature.clone());
    let y = g.depthwise(x, &bank.depthwise());
    g.value(y).clone()
}

/// Plain HPF layer: each kernel applied to the sum over input channels.
///
/// Computed as the channel-wise responses summed per kernel, which equals a
/// convolution with [`HpfKernelBank::plain_weight`] but shares the
/// replicated borders of the channel-wise block.
pub fn plain_hpf<T: Scalar>(g: &mut Graph<T>, bank: &HpfKernelBank, x: Var) -> Result<Var> {
    let in_c = g.shape(x).c();
    let responses = g.depthwise(x, &bank.depthwise());
    let sum = Tensor::from_fn(Shape::new(KERNEL_COUNT, KERNEL_COUNT * in_c, 1, 1), |[j, i, _, _]| {
        if i % KERNEL_COUNT == j {
            T::one()
        } else {
            T::zero()
        }
    });
    let w = g.constant(sum);
    Ok(g.conv2d(responses, w, None, 1, 1, 0)?)
}
