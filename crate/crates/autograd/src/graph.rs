//! Recording graph and reverse-mode differentiation.
//!
//! Every op appends one node. Nodes are stored in recording order, which is
//! also a topological order, so `backward` simply walks the list in reverse.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use crate::conv::{self, ConvGeometry, DepthwiseBank};
use crate::error::TensorError;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Lower clamp bound applied to predictions inside [`Graph::bce_loss`].
pub const BCE_CLAMP: f64 = 1e-7;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    Depthwise {
        input: Var,
        bank: Arc<DepthwiseBank<T>>,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2 {
        input: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Transpose {
        input: Var,
    },
    Reshape {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Relu {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    ScaleBy {
        input: Var,
        scale: Var,
    },
    MulConst {
        input: Var,
        factor: T,
    },
    ConcatChannels {
        inputs: Vec<Var>,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
    Bce {
        pred: Var,
        target: Tensor<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Depthwise { .. } => "depthwise",
            Op::MaxPool2 { .. } => "maxpool2d",
            Op::Upsample2 { .. } => "upsample_nearest",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Relu { .. } => "relu",
            Op::Add { .. } => "add",
            Op::ScaleBy { .. } => "scale_by",
            Op::MulConst { .. } => "mul_const",
            Op::ConcatChannels { .. } => "concat_channels",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Bce { .. } => "bce_loss",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// One recorded forward pass.
///
/// A graph is confined to a single thread of execution; independent graphs
/// over disjoint data may be built concurrently.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(ParamId, Var)>,
    consumed: bool,
    freeze_params: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
            consumed: false,
            freeze_params: false,
        }
    }

    /// A graph that binds every parameter as a constant. Used for inference
    /// and for input-gradient attacks, where weight gradients are wasted work.
    pub fn frozen() -> Self {
        Graph {
            freeze_params: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Names reported by [`Graph::op_names`] for every differentiable op.
    pub const OP_NAMES: &'static [&'static str] = &[
        "conv2d",
        "depthwise",
        "maxpool2d",
        "upsample_nearest",
        "matmul",
        "transpose",
        "reshape",
        "sigmoid",
        "relu",
        "add",
        "scale_by",
        "mul_const",
        "concat_channels",
        "sum",
        "mean",
        "bce_loss",
    ];

    /// Op kind of each node, in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    /// Hash of the linear piece every non-smooth op of this pass sits on:
    /// rectifier on/off, pooling winners, and active clamps in sigmoid and BCE.
    ///
    /// Two passes with equal signatures lie on the same smooth piece of the
    /// recorded function, so a finite difference between them is meaningful.
    pub fn piece_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        let (blo, bhi) = bce_bounds::<T>();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu { input } => {
                    i.hash(&mut h);
                    for &x in self.value(*input).data() {
                        (x > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool2 { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                Op::Sigmoid { .. } => {
                    i.hash(&mut h);
                    let hi = T::one() - T::epsilon() / (T::one() + T::one());
                    for &s in node.value.data() {
                        (s <= T::min_positive_value(), s >= hi).hash(&mut h);
                    }
                }
                Op::Bce { pred, .. } => {
                    i.hash(&mut h);
                    for &p in self.value(*pred).data() {
                        (p <= blo, p >= bhi).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf whose gradient will be reported by [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a stored parameter as a leaf. Repeated calls in the same graph
    /// return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.params.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable && !self.freeze_params);
        self.params.push((id, v));
        v
    }

    pub fn bound_params(&self) -> &[(ParamId, Var)] {
        &self.params
    }

    /// 2-D cross-correlation with optional per-output-channel bias.
    ///
    /// `weight` is `[out_c, in_c, kh, kw]`; `bias` is `[out_c, 1, 1, 1]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let geom = ConvGeometry::new(self.shape(input), self.shape(weight), stride, dilation, padding)?;
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs.numel() != geom.out_c {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    dim: "bias length",
                    left: self.shape(weight),
                    right: bs,
                });
            }
        }
        let out = conv::conv2d_forward(
            &geom,
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
        );
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Applies a fixed kernel bank to every channel independently.
    pub fn depthwise(&mut self, input: Var, bank: &Arc<DepthwiseBank<T>>) -> Var {
        let out = bank.forward(self.value(input));
        let rg = self.requires_grad(input);
        self.push(
            out,
            Op::Depthwise {
                input,
                bank: Arc::clone(bank),
            },
            rg,
        )
    }

    /// 2x2 max pooling with stride 2. Odd trailing rows/columns are padded
    /// with negative infinity. Ties resolve to the first cell in row-major order.
    pub fn maxpool2d(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let [n, c, h, w] = x.shape().0;
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let mut out = Tensor::zeros(Shape::new(n, c, oh, ow));
        let mut argmax = Vec::with_capacity(out.len());
        let mut o = 0;
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (iy, ix) = (2 * y + dy, 2 * xx + dx);
                            if iy < h && ix < w {
                                let i = base + iy * w + ix;
                                let v = x.data()[i];
                                if best_i == usize::MAX || v > best {
                                    best = v;
                                    best_i = i;
                                }
                            }
                        }
                    }
                    out.data_mut()[o] = best;
                    argmax.push(best_i);
                    o += 1;
                }
            }
        }
        let rg = self.requires_grad(input);
        self.push(out, Op::MaxPool2 { input, argmax }, rg)
    }

    /// Nearest-neighbour upsampling by a factor of two.
    pub fn upsample2(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let [n, c, h, w] = x.shape().0;
        let out = Tensor::from_fn(Shape::new(n, c, 2 * h, 2 * w), |[a, b, y, xx]| {
            x.at([a, b, y / 2, xx / 2])
        });
        let rg = self.requires_grad(input);
        self.push(out, Op::Upsample2 { input }, rg)
    }

    /// Batched matrix product over the trailing two axes: `[n,c,r,k] x [n,c,k,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.n() != sb.n() || sa.c() != sb.c() {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                dim: "batch",
                left: sa,
                right: sb,
            });
        }
        if sa.w() != sb.h() {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                dim: "inner dimension",
                left: sa,
                right: sb,
            });
        }
        let (r, k, m) = (sa.h(), sa.w(), sb.w());
        let mut out = Tensor::zeros(Shape::new(sa.n(), sa.c(), r, m));
        let (av, bv) = (self.value(a), self.value(b));
        for p in 0..sa.n() * sa.c() {
            T::gemm(
                r,
                k,
                m,
                T::one(),
                &av.data()[p * r * k..(p + 1) * r * k],
                (k as isize, 1),
                &bv.data()[p * k * m..(p + 1) * k * m],
                (m as isize, 1),
                T::zero(),
                &mut out.data_mut()[p * r * m..(p + 1) * r * m],
                (m as isize, 1),
            );
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b }, rg))
    }

    /// Swaps the trailing two axes.
    pub fn transpose(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let [n, c, h, w] = x.shape().0;
        let out = Tensor::from_fn(Shape::new(n, c, w, h), |[a, b, y, xx]| x.at([a, b, xx, y]));
        let rg = self.requires_grad(input);
        self.push(out, Op::Transpose { input }, rg)
    }

    pub fn reshape(&mut self, input: Var, shape: Shape) -> Result<Var, TensorError> {
        let out = self.value(input).clone().reshape(shape)?;
        let rg = self.requires_grad(input);
        Ok(self.push(out, Op::Reshape { input }, rg))
    }

    /// Logistic function. Results are clamped into the open interval (0, 1)
    /// so that saturated inputs never produce an exact 0 or 1.
    pub fn sigmoid(&mut self, input: Var) -> Var {
        let lo = T::min_positive_value();
        let hi = T::one() - T::epsilon() / (T::one() + T::one());
        let out = self.value(input).map(|x| {
            let s = if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            };
            s.max(lo).min(hi)
        });
        let rg = self.requires_grad(input);
        self.push(out, Op::Sigmoid { input }, rg)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|x| x.max(T::zero()));
        let rg = self.requires_grad(input);
        self.push(out, Op::Relu { input }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                dim: "shape",
                left: sa,
                right: sb,
            });
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    /// Multiplies every element by a single-element node.
    pub fn scale_by(&mut self, input: Var, scale: Var) -> Result<Var, TensorError> {
        let ss = self.shape(scale);
        if ss.numel() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "scale_by",
                dim: "scale element count",
                left: self.shape(input),
                right: ss,
            });
        }
        let s = self.value(scale).data()[0];
        let out = self.value(input).map(|x| x * s);
        let rg = self.any_grad(&[input, scale]);
        Ok(self.push(out, Op::ScaleBy { input, scale }, rg))
    }

    pub fn mul_const(&mut self, input: Var, factor: T) -> Var {
        let out = self.value(input).map(|x| x * factor);
        let rg = self.requires_grad(input);
        self.push(out, Op::MulConst { input, factor }, rg)
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var, TensorError> {
        let first = self.shape(*inputs.first().ok_or(TensorError::Empty("concat_channels"))?);
        let mut channels = 0;
        for &v in inputs {
            let s = self.shape(v);
            if (s.n(), s.h(), s.w()) != (first.n(), first.h(), first.w()) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    dim: "batch/spatial",
                    left: first,
                    right: s,
                });
            }
            channels += s.c();
        }
        let shape = Shape::new(first.n(), channels, first.h(), first.w());
        let mut data = Vec::with_capacity(shape.numel());
        for s in 0..first.n() {
            for &v in inputs {
                let t = self.value(v);
                let per = t.shape().per_sample();
                data.extend_from_slice(&t.data()[s * per..(s + 1) * per]);
            }
        }
        let out = Tensor::from_vec(shape, data)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            out,
            Op::ConcatChannels {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        let rg = self.requires_grad(input);
        self.push(out, Op::Sum { input }, rg)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let n = T::from_usize(x.len().max(1)).unwrap_or_else(T::one);
        let out = Tensor::scalar(x.sum() / n);
        let rg = self.requires_grad(input);
        self.push(out, Op::Mean { input }, rg)
    }

    /// Mean binary cross-entropy of `pred` against a `{0,1}` target.
    ///
    /// Predictions are clamped to `[1e-7, 1 - 1e-7]` before the logarithm.
    pub fn bce_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var, TensorError> {
        let sp = self.shape(pred);
        if sp != target.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_loss",
                dim: "shape",
                left: sp,
                right: target.shape(),
            });
        }
        if let Some(&bad) = target.data().iter().find(|&&y| y != T::zero() && y != T::one()) {
            return Err(TensorError::NonBinaryTarget(bad.to_f64_lossy()));
        }
        let (lo, hi) = bce_bounds::<T>();
        let p = self.value(pred);
        let mut total = T::zero();
        for (&pv, &y) in p.data().iter().zip(target.data()) {
            let pc = pv.max(lo).min(hi);
            total = total - if y == T::one() { pc.ln() } else { (T::one() - pc).ln() };
        }
        let n = T::from_usize(p.len().max(1)).unwrap_or_else(T::one);
        let out = Tensor::scalar(total / n);
        let rg = self.requires_grad(pred);
        Ok(self.push(
            out,
            Op::Bce {
                pred,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a single-element `loss`.
    ///
    /// May run once per graph; record a new forward pass to differentiate again.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.consumed {
            return Err(TensorError::BackwardTwice);
        }
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(TensorError::NonScalarLoss(ls));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(ls, T::one()));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients {
            grads,
            shapes,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut accumulate = |v: Var, delta: Tensor<T>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let need = (wants(*input), wants(*weight), bias.is_some_and(wants));
                let cg = conv::conv2d_backward(geom, &nodes[input.0].value, &nodes[weight.0].value, g, need);
                if let Some(dx) = cg.dx {
                    accumulate(*input, dx);
                }
                if let Some(dw) = cg.dw {
                    accumulate(*weight, dw);
                }
                if let (Some(b), Some(db)) = (bias, cg.db) {
                    let db = db
                        .reshape(nodes[b.0].value.shape())
                        .expect("bias element count checked");
                    accumulate(*b, db);
                }
            }
            Op::Depthwise { input, bank } => {
                accumulate(*input, bank.backward(nodes[input.0].value.shape(), g));
            }
            Op::MaxPool2 { input, argmax } => {
                let mut dx = Tensor::zeros(nodes[input.0].value.shape());
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    dx.data_mut()[src] = dx.data()[src] + gv;
                }
                accumulate(*input, dx);
            }
            Op::Upsample2 { input } => {
                let xs = nodes[input.0].value.shape();
                let mut dx = Tensor::zeros(xs);
                let [n, c, h, w] = xs.0;
                for a in 0..n {
                    for b in 0..c {
                        for y in 0..2 * h {
                            for x in 0..2 * w {
                                let o = dx.offset([a, b, y / 2, x / 2]);
                                dx.data_mut()[o] = dx.data()[o] + g.at([a, b, y, x]);
                            }
                        }
                    }
                }
                accumulate(*input, dx);
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (r, k, m) = (av.shape().h(), av.shape().w(), bv.shape().w());
                let planes = av.shape().n() * av.shape().c();
                if wants(*a) {
                    // dA = dC * B^T
                    let mut da = Tensor::zeros(av.shape());
                    for p in 0..planes {
                        T::gemm(
                            r,
                            m,
                            k,
                            T::one(),
                            &g.data()[p * r * m..(p + 1) * r * m],
                            (m as isize, 1),
                            &bv.data()[p * k * m..(p + 1) * k * m],
                            (1, m as isize),
                            T::zero(),
                            &mut da.data_mut()[p * r * k..(p + 1) * r * k],
                            (k as isize, 1),
                        );
                    }
                    accumulate(*a, da);
                }
                if wants(*b) {
                    // dB = A^T * dC
                    let mut db = Tensor::zeros(bv.shape());
                    for p in 0..planes {
                        T::gemm(
                            k,
                            r,
                            m,
                            T::one(),
                            &av.data()[p * r * k..(p + 1) * r * k],
                            (1, k as isize),
                            &g.data()[p * r * m..(p + 1) * r * m],
                            (m as isize, 1),
                            T::zero(),
                            &mut db.data_mut()[p * k * m..(p + 1) * k * m],
                            (m as isize, 1),
                        );
                    }
                    accumulate(*b, db);
                }
            }
            Op::Transpose { input } => {
                let [n, c, h, w] = g.shape().0;
                let dx = Tensor::from_fn(Shape::new(n, c, w, h), |[a, b, y, x]| g.at([a, b, x, y]));
                accumulate(*input, dx);
            }
            Op::Reshape { input } => {
                let dx = g
                    .clone()
                    .reshape(nodes[input.0].value.shape())
                    .expect("reshape preserves element count");
                accumulate(*input, dx);
            }
            Op::Sigmoid { input } => {
                let mut dx = g.clone();
                for (d, &s) in dx.data_mut().iter_mut().zip(out.data()) {
                    *d = *d * s * (T::one() - s);
                }
                accumulate(*input, dx);
            }
            Op::Relu { input } => {
                let mut dx = g.clone();
                for (d, &x) in dx.data_mut().iter_mut().zip(nodes[input.0].value.data()) {
                    if x <= T::zero() {
                        *d = T::zero();
                    }
                }
                accumulate(*input, dx);
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    accumulate(*a, g.clone());
                }
                accumulate(*b, g.clone());
            }
            Op::ScaleBy { input, scale } => {
                let s = nodes[scale.0].value.data()[0];
                if wants(*scale) {
                    let x = &nodes[input.0].value;
                    let ds: T = x.data().iter().zip(g.data()).map(|(&a, &b)| a * b).sum();
                    accumulate(
                        *scale,
                        Tensor::scalar(ds)
                            .reshape(nodes[scale.0].value.shape())
                            .expect("one element"),
                    );
                }
                accumulate(*input, g.map(|v| v * s));
            }
            Op::MulConst { input, factor } => {
                let f = *factor;
                accumulate(*input, g.map(|v| v * f));
            }
            Op::ConcatChannels { inputs } => {
                let n = g.shape().n();
                let per_out = g.shape().per_sample();
                let mut offset = 0;
                for &v in inputs {
                    let s = nodes[v.0].value.shape();
                    let per = s.per_sample();
                    if wants(v) {
                        let mut data = Vec::with_capacity(s.numel());
                        for b in 0..n {
                            let start = b * per_out + offset;
                            data.extend_from_slice(&g.data()[start..start + per]);
                        }
                        accumulate(v, Tensor::from_vec(s, data).expect("slice sizes match"));
                    }
                    offset += per;
                }
            }
            Op::Sum { input } => {
                let gv = g.data()[0];
                accumulate(*input, Tensor::full(nodes[input.0].value.shape(), gv));
            }
            Op::Mean { input } => {
                let s = nodes[input.0].value.shape();
                let n = T::from_usize(s.numel().max(1)).unwrap_or_else(T::one);
                accumulate(*input, Tensor::full(s, g.data()[0] / n));
            }
            Op::Bce { pred, target } => {
                let (lo, hi) = bce_bounds::<T>();
                let p = &nodes[pred.0].value;
                let n = T::from_usize(p.len().max(1)).unwrap_or_else(T::one);
                let scale = g.data()[0] / n;
                let mut dp = Tensor::zeros(p.shape());
                for ((d, &pv), &y) in dp.data_mut().iter_mut().zip(p.data()).zip(target.data()) {
                    let pc = pv.max(lo).min(hi);
                    // Gradient evaluated at the clamped point and passed straight through.
                    *d = scale
                        * if y == T::one() {
                            -T::one() / pc
                        } else {
                            T::one() / (T::one() - pc)
                        };
                }
                accumulate(*pred, dp);
            }
        }
    }
}

fn bce_bounds<T: Scalar>() -> (T, T) {
    let lo = T::from_f64_lossy(BCE_CLAMP);
    (lo, T::one() - lo)
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Shape>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf. Leaves unreachable from the loss report zeros.
    pub fn get(&self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0]))
    }

    /// Gradient for every parameter of `store`, in declaration order.
    /// Parameters that were not bound in the graph get zeros.
    pub fn for_params(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store
            .iter()
            .map(|(id, p)| {
                self.params
                    .iter()
                    .find(|(pid, _)| *pid == id)
                    .and_then(|(_, v)| self.grads[v.0].clone())
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
            })
            .collect()
    }
}
