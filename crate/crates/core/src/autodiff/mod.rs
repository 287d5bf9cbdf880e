//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive applied during a forward pass in
//! program order, which is already a topological order. [`Graph::backward`]
//! walks the tape once in reverse, accumulating gradients additively across
//! fan-out. A graph is built fresh for every optimisation step.
//!
//! Leaves are copies of [`Tensor`] values. A leaf participates in
//! differentiation only when created with `requires_grad`; gradients of
//! leaves are kept on the graph and accumulate across repeated
//! `backward` calls.

pub mod gradcheck;
pub mod kernels;
pub mod real;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};
pub use kernels::{ConvGeom, ConvParams, PoolParams};
pub use real::Real;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Unbiased per-channel variance (used for running estimates).
    pub var_unbiased: Vec<f32>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf { source: Option<usize> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddN(Vec<Var>),
    Scale(Var, T),
    MulConst(Var, Vec<T>),
    BiasChannels(Var, Var),
    Relu(Var),
    Sqrt(Var),
    HardTanh { x: Var, lo: Vec<T>, hi: Vec<T> },
    Softmax { x: Var, axis: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Option<Var>, beta: Option<Var>, xhat: Vec<T>, inv_std: Vec<T> },
    ChannelAffine { x: Var, gamma: Option<Var>, beta: Option<Var>, mean: Vec<T>, inv_std: Vec<T> },
    MaxPool { x: Var, argmax: Vec<u32> },
    AvgPool { x: Var, p: PoolParams },
    GlobalAvgPool(Var),
    Concat(Vec<Var>),
    Crop { x: Var, top: usize, left: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    WeightedSum { terms: Vec<(usize, Var)>, weights: Var },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recorded computation in precision `T`.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
    perturbation: Option<(usize, usize, T)>,
}

fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    let outer = shape[0];
    let c = if shape.len() > 1 { shape[1] } else { 1 };
    let inner = if shape.len() > 2 { numel(&shape[2..]) } else { 1 };
    (outer, c, inner)
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += *b);
}

impl Default for Graph<f32> {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph<f32> {
    pub fn new() -> Self {
        Self::with_precision()
    }
}

impl<T: Real> Graph<T> {
    pub fn with_precision() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            perturbation: None,
        }
    }

    /// Shifts element `index` of every leaf created from `source` by `delta`.
    /// Used by finite-difference oracles.
    pub fn perturb_source(&mut self, source: usize, index: usize, delta: T) {
        self.perturbation = Some((source, index, delta));
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.iter().map(|v| v.to32()).collect()).expect("node shape is consistent")
    }

    /// Records a leaf holding a copy of `t`; differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().iter().map(|&v| T::of32(v)).collect(),
            Op::Leaf { source: None },
            t.requires_grad(),
        )
    }

    /// Leaf from raw values in graph precision.
    pub fn leaf_values(&mut self, shape: &[usize], values: Vec<T>, requires_grad: bool) -> Result<Var> {
        if numel(shape) != values.len() {
            return Err(Error::dim(format!("{} values for shape {shape:?}", values.len())));
        }
        Ok(self.push(shape.to_vec(), values, Op::Leaf { source: None }, requires_grad))
    }

    /// Leaf tagged with an external identifier (e.g. a parameter slot).
    pub fn leaf_from_source(&mut self, t: &Tensor, requires_grad: bool, source: usize) -> Var {
        let mut values: Vec<T> = t.data().iter().map(|&v| T::of32(v)).collect();
        if let Some((src, index, delta)) = self.perturbation {
            if src == source {
                values[index] += delta;
            }
        }
        self.push(
            t.shape().to_vec(),
            values,
            Op::Leaf {
                source: Some(source),
            },
            requires_grad,
        )
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        let values = t.data().iter().map(|&v| T::of32(v)).collect();
        self.push(shape, values, Op::Leaf { source: None }, false)
    }

    /// Same values as `x`, cut from the graph: nothing flows back through it.
    pub fn detach(&mut self, x: Var) -> Var {
        let n = &self.nodes[x.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf { source: None }, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x + *y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x - *y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x * *y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Mul(a, b), rg))
    }

    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::contract("add_n of nothing"))?;
        if xs.len() == 1 {
            return Ok(first);
        }
        let mut v = self.value(first).to_vec();
        for &x in &xs[1..] {
            self.same_shape(first, x, "add_n")?;
            add_into(&mut v, self.value(x));
        }
        let rg = self.rg(xs);
        Ok(self.push(self.shape(first).to_vec(), v, Op::AddN(xs.to_vec()), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).iter().map(|&a| a * c).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), v, Op::Scale(x, c), rg)
    }

    /// Elementwise product with a constant buffer of the same length.
    pub fn mul_const(&mut self, x: Var, c: &[f32]) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return Err(Error::dim(format!(
                "mul_const: {} constants for shape {:?}",
                c.len(),
                self.shape(x)
            )));
        }
        let c: Vec<T> = c.iter().map(|&v| T::of32(v)).collect();
        let v = self.value(x).iter().zip(&c).map(|(&a, &b)| a * b).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), v, Op::MulConst(x, c), rg))
    }

    /// Adds a per-channel (axis 1) bias.
    pub fn bias_channels(&mut self, x: Var, b: Var) -> Result<Var> {
        let (outer, c, inner) = channel_layout(self.shape(x));
        if self.value(b).len() != c {
            return Err(Error::dim(format!("bias of {} for {c} channels", self.value(b).len())));
        }
        let bias = self.value(b);
        let mut v = self.value(x).to_vec();
        for o in 0..outer {
            for (ch, &bv) in bias.iter().enumerate() {
                v[(o * c + ch) * inner..][..inner].iter_mut().for_each(|a| *a += bv);
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(self.shape(x).to_vec(), v, Op::BiasChannels(x, b), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).iter().map(|&a| a.max(T::zero())).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), v, Op::Relu(x), rg)
    }

    /// Elementwise square root; inputs must be non-negative.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).iter().any(|&a| a < T::zero()) {
            return Err(Error::contract("sqrt of a negative value"));
        }
        let v = self.value(x).iter().map(|&a| a.sqrt()).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), v, Op::Sqrt(x), rg))
    }

    /// Clips to `[lo, hi]`; bounds are either scalars (length 1) or per channel.
    pub fn hardtanh(&mut self, x: Var, lo: &[f32], hi: &[f32]) -> Result<Var> {
        let (outer, c, inner) = channel_layout(self.shape(x));
        if lo.len() != hi.len() || (lo.len() != 1 && lo.len() != c) {
            return Err(Error::dim(format!("hardtanh bounds of length {} for {c} channels", lo.len())));
        }
        if lo.iter().zip(hi).any(|(l, h)| l >= h) {
            return Err(Error::contract("hardtanh requires lo < hi"));
        }
        let lo: Vec<T> = lo.iter().map(|&v| T::of32(v)).collect();
        let hi: Vec<T> = hi.iter().map(|&v| T::of32(v)).collect();
        let mut v = self.value(x).to_vec();
        for o in 0..outer {
            for ch in 0..c {
                let (l, h) = if lo.len() == 1 { (lo[0], hi[0]) } else { (lo[ch], hi[ch]) };
                v[(o * c + ch) * inner..][..inner].iter_mut().for_each(|a| *a = a.max(l).min(h));
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            self.shape(x).to_vec(),
            v,
            Op::HardTanh { x, lo, hi },
            rg,
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("softmax axis {axis} for shape {shape:?}")));
        }
        let (outer, len, inner) = (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]));
        let src = self.value(x);
        let mut v = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| src[at(k)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for k in 0..len {
                    let e = (src[at(k)] - m).exp();
                    v[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    v[at(k)] /= z;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(shape, v, Op::Softmax { x, axis }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::dim(format!("cannot reshape {:?} into {shape:?}", self.shape(x))));
        }
        let v = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), v, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().map(|a| a.to_f64().unwrap_or(f64::NAN)).sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![T::of(s)], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s: f64 = self.value(x).iter().map(|a| a.to_f64().unwrap_or(f64::NAN)).sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![T::of(s / n)], Op::Mean(x), rg)
    }

    /// Cross-correlation of `x: [B,C,H,W]` with `w: [O, C/groups, K, K]`.
    pub fn conv2d(&mut self, x: Var, w: Var, p: ConvParams) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), p)?;
        let v = kernels::conv2d_forward(self.value(x), self.value(w), &geom);
        let rg = self.rg(&[x, w]);
        Ok(self.push(geom.out_shape(), v, Op::Conv2d { x, w, geom }, rg))
    }

    /// Transposed convolution of `x: [B,Ci,H,W]` with `w: [Ci, Co, K, K]`:
    /// the adjoint of `conv2d` with the same weight, stride, and padding.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::dim("conv_transpose2d expects 4-D input and weight"));
        }
        if stride == 0 {
            return Err(Error::contract("conv_transpose2d stride must be >= 1"));
        }
        if xs[1] != ws[0] {
            return Err(Error::dim(format!(
                "input has {} channels but transposed weight expects {}",
                xs[1], ws[0]
            )));
        }
        let k = ws[2];
        let full = (xs[2] - 1) * stride + k;
        if full <= 2 * padding || (xs[3] - 1) * stride + k <= 2 * padding {
            return Err(Error::dim("transposed convolution output would be empty"));
        }
        let (ho, wo) = (full - 2 * padding, (xs[3] - 1) * stride + k - 2 * padding);
        // Geometry of the forward convolution this one is the adjoint of.
        let geom = ConvGeom::new(&[xs[0], ws[1], ho, wo], &ws, ConvParams::new(stride, padding))?;
        if geom.ho != xs[2] || geom.wo != xs[3] {
            return Err(Error::dim("inconsistent transposed convolution geometry"));
        }
        let v = kernels::conv2d_backward_input(self.value(x), self.value(w), &geom);
        let rg = self.rg(&[x, w]);
        Ok(self.push(geom.in_shape(), v, Op::ConvTranspose2d { x, w, geom }, rg))
    }

    /// Batch norm over `(B, H, W)` using the batch's own statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        eps: f32,
    ) -> Result<(Var, BatchStats)> {
        if eps <= 0.0 {
            return Err(Error::contract("batch norm eps must be positive"));
        }
        let (outer, c, inner) = channel_layout(self.shape(x));
        self.check_affine(gamma, beta, c)?;
        let n = (outer * inner) as f64;
        let src = self.value(x);
        let mut mean = vec![0.0f32; c];
        let mut var_unbiased = vec![0.0f32; c];
        let mut inv_std = vec![T::zero(); c];
        let mut xhat = vec![T::zero(); src.len()];
        let f = |a: T| a.to_f64().unwrap_or(f64::NAN);
        for ch in 0..c {
            let mut s = 0.0f64;
            for o in 0..outer {
                s += src[(o * c + ch) * inner..][..inner].iter().map(|&a| f(a)).sum::<f64>();
            }
            let m = s / n;
            let mut ss = 0.0f64;
            for o in 0..outer {
                ss += src[(o * c + ch) * inner..][..inner]
                    .iter()
                    .map(|&a| (f(a) - m).powi(2))
                    .sum::<f64>();
            }
            let var = ss / n;
            let istd = 1.0 / (var + eps as f64).sqrt();
            mean[ch] = m as f32;
            var_unbiased[ch] = if n > 1.0 { (ss / (n - 1.0)) as f32 } else { 0.0 };
            inv_std[ch] = T::of(istd);
            for o in 0..outer {
                let off = (o * c + ch) * inner;
                for i in off..off + inner {
                    xhat[i] = T::of((f(src[i]) - m) * istd);
                }
            }
        }
        let v = self.affine_out(&xhat, gamma, beta, c, inner);
        let rg = self.rg(&[x]) || gamma.is_some_and(|g| self.requires_grad(g)) || beta.is_some_and(|b| self.requires_grad(b));
        let shape = self.shape(x).to_vec();
        let out = self.push(
            shape,
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((out, BatchStats { mean, var_unbiased }))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        running_mean: &[f32],
        running_var: &[f32],
        eps: f32,
    ) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::contract("batch norm eps must be positive"));
        }
        let (outer, c, inner) = channel_layout(self.shape(x));
        self.check_affine(gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::dim("running statistics do not match channel count"));
        }
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (T::of32(v) + T::of32(eps)).sqrt()).collect();
        let mean: Vec<T> = running_mean.iter().map(|&v| T::of32(v)).collect();
        let src = self.value(x);
        let mut xhat = vec![T::zero(); src.len()];
        for o in 0..outer {
            for ch in 0..c {
                let off = (o * c + ch) * inner;
                for i in off..off + inner {
                    xhat[i] = (src[i] - mean[ch]) * inv_std[ch];
                }
            }
        }
        let v = self.affine_out(&xhat, gamma, beta, c, inner);
        let rg = self.rg(&[x]) || gamma.is_some_and(|g| self.requires_grad(g)) || beta.is_some_and(|b| self.requires_grad(b));
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            v,
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
            rg,
        ))
    }

    fn check_affine(&self, gamma: Option<Var>, beta: Option<Var>, c: usize) -> Result<()> {
        for p in [gamma, beta].into_iter().flatten() {
            if self.value(p).len() != c {
                return Err(Error::dim(format!(
                    "batch norm affine parameter of length {} for {c} channels",
                    self.value(p).len()
                )));
            }
        }
        Ok(())
    }

    fn affine_out(&self, xhat: &[T], gamma: Option<Var>, beta: Option<Var>, c: usize, inner: usize) -> Vec<T> {
        let mut v = xhat.to_vec();
        if gamma.is_none() && beta.is_none() {
            return v;
        }
        let g = gamma.map(|g| self.value(g).to_vec());
        let b = beta.map(|b| self.value(b).to_vec());
        for (blk, chunk) in v.chunks_mut(inner).enumerate() {
            let ch = blk % c;
            let gv = g.as_ref().map_or(T::one(), |g| g[ch]);
            let bv = b.as_ref().map_or(T::zero(), |b| b[ch]);
            chunk.iter_mut().for_each(|a| *a = *a * gv + bv);
        }
        v
    }

    pub fn max_pool2d(&mut self, x: Var, p: PoolParams) -> Result<Var> {
        let os = kernels::pool_out_shape(self.shape(x), &p)?;
        let (v, argmax) = kernels::max_pool_forward(self.value(x), self.shape(x), &os, &p);
        let rg = self.rg(&[x]);
        Ok(self.push(os, v, Op::MaxPool { x, argmax }, rg))
    }

    pub fn avg_pool2d(&mut self, x: Var, p: PoolParams) -> Result<Var> {
        let os = kernels::pool_out_shape(self.shape(x), &p)?;
        let v = kernels::avg_pool_forward(self.value(x), self.shape(x), &os, &p);
        let rg = self.rg(&[x]);
        Ok(self.push(os, v, Op::AvgPool { x, p }, rg))
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim(format!("global_avg_pool expects 4-D input, got {s:?}")));
        }
        let inner = s[2] * s[3];
        let v = self
            .value(x)
            .chunks(inner)
            .map(|c| c.iter().copied().sum::<T>() / T::of(inner as f64))
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![s[0], s[1]], v, Op::GlobalAvgPool(x), rg))
    }

    /// Concatenation along the channel axis of `[B, C_i, H, W]` tensors.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let s0 = self.shape(first).to_vec();
        if s0.len() != 4 {
            return Err(Error::dim("concat_channels expects 4-D inputs"));
        }
        let mut total_c = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3] {
                return Err(Error::dim(format!("cannot concat {s:?} with {s0:?}")));
            }
            total_c += s[1];
        }
        let (b, plane) = (s0[0], s0[2] * s0[3]);
        let mut v = Vec::with_capacity(b * total_c * plane);
        for bi in 0..b {
            for &x in xs {
                let c = self.shape(x)[1];
                v.extend_from_slice(&self.value(x)[bi * c * plane..][..c * plane]);
            }
        }
        let rg = self.rg(xs);
        Ok(self.push(vec![b, total_c, s0[2], s0[3]], v, Op::Concat(xs.to_vec()), rg))
    }

    /// Spatial window `x[:, :, top.., left..]` keeping the remaining extent.
    pub fn crop(&mut self, x: Var, top: usize, left: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || top >= s[2] || left >= s[3] {
            return Err(Error::dim(format!("crop ({top},{left}) outside {s:?}")));
        }
        let (ho, wo) = (s[2] - top, s[3] - left);
        let src = self.value(x);
        let mut v = Vec::with_capacity(s[0] * s[1] * ho * wo);
        for plane in 0..s[0] * s[1] {
            for y in 0..ho {
                let row = (plane * s[2] + y + top) * s[3] + left;
                v.extend_from_slice(&src[row..row + wo]);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![s[0], s[1], ho, wo], v, Op::Crop { x, top, left }, rg))
    }

    /// `x: [B, F]`, `w: [O, F]`, `b: [O]` -> `x wᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::dim(format!("linear: input {xs:?} vs weight {ws:?}")));
        }
        let (bsz, f, o) = (xs[0], xs[1], ws[0]);
        let mut v = vec![T::zero(); bsz * o];
        kernels::gemm(bsz, f, o, self.value(x), false, self.value(w), true, T::zero(), &mut v);
        if let Some(b) = b {
            if self.value(b).len() != o {
                return Err(Error::dim("linear bias length mismatch"));
            }
            let bias = self.value(b);
            v.chunks_mut(o).for_each(|row| add_into(row, bias));
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(vec![bsz, o], v, Op::Linear { x, w, b }, rg))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim(format!("cross_entropy: logits {s:?} for {} labels", labels.len())));
        }
        let (b, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::contract(format!("label {bad} out of range for {k} classes")));
        }
        let src = self.value(logits);
        let mut probs = vec![T::zero(); b * k];
        let mut loss = 0.0f64;
        let f = |a: T| a.to_f64().unwrap_or(f64::NAN);
        for (i, &label) in labels.iter().enumerate() {
            let row = &src[i * k..(i + 1) * k];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(f(v)));
            let z: f64 = row.iter().map(|&v| (f(v) - m).exp()).sum();
            let lse = m + z.ln();
            loss += lse - f(row[label]);
            for j in 0..k {
                probs[i * k + j] = T::of((f(row[j]) - lse).exp());
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            vec![T::of(loss / b as f64)],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `Σ_j weights[i_j] · x_j` for `terms = [(i_j, x_j)]`; `weights` is a
    /// flat vector of mixing coefficients (e.g. a softmaxed α matrix).
    pub fn weighted_sum(&mut self, terms: &[(usize, Var)], weights: Var) -> Result<Var> {
        let &(_, first) = terms.first().ok_or_else(|| Error::contract("weighted_sum of nothing"))?;
        let wv = self.value(weights);
        let mut v = vec![T::zero(); self.value(first).len()];
        for &(i, x) in terms {
            if self.shape(x) != self.shape(first) {
                return Err(Error::dim("weighted_sum terms differ in shape"));
            }
            let c = *wv.get(i).ok_or_else(|| Error::dim(format!("mixing index {i} out of range")))?;
            v.iter_mut().zip(self.value(x)).for_each(|(a, &b)| *a += c * b);
        }
        let mut deps: Vec<Var> = terms.iter().map(|t| t.1).collect();
        deps.push(weights);
        let rg = self.rg(&deps);
        Ok(self.push(
            self.shape(first).to_vec(),
            v,
            Op::WeightedSum {
                terms: terms.to_vec(),
                weights,
            },
            rg,
        ))
    }

    /// Gradient accumulated on a leaf by previous `backward` calls.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// `(source, gradient)` for every tagged leaf that received a gradient.
    pub fn source_grads(&self) -> impl Iterator<Item = (usize, &[T])> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Leaf { source: Some(s) } => self.grad(Var(i)).map(|g| (s, g)),
            _ => None,
        })
    }

    pub fn clear_grads(&mut self) {
        self.leaf_grads.clear();
    }

    /// Back-propagates from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        if self.leaf_grads.len() < n {
            self.leaf_grads.resize(n, None);
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf { .. } = node.op {
                match &mut self.leaf_grads[idx] {
                    Some(acc) => add_into(acc, &g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let zero = T::zero();
        let mut send = |v: Var, contribution: Vec<T>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => add_into(acc, &contribution),
                slot @ None => *slot = Some(contribution),
            }
        };
        let wants = |v: Var| nodes[v.0].requires_grad;
        let sum_range = |g: &[T], off: usize, len: usize| g[off..off + len].iter().copied().sum::<T>();
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                if wants(*b) {
                    send(*b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    send(*a, g.iter().zip(&nodes[b.0].value).map(|(&x, &y)| x * y).collect());
                }
                if wants(*b) {
                    send(*b, g.iter().zip(&nodes[a.0].value).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::AddN(xs) => {
                for &x in xs {
                    send(x, g.to_vec());
                }
            }
            Op::Scale(x, c) => send(*x, g.iter().map(|&v| v * *c).collect()),
            Op::MulConst(x, c) => send(*x, g.iter().zip(c).map(|(&a, &b)| a * b).collect()),
            Op::BiasChannels(x, b) => {
                send(*x, g.to_vec());
                if wants(*b) {
                    let (outer, c, inner) = channel_layout(&node.shape);
                    let mut gb = vec![zero; c];
                    for o in 0..outer {
                        for (ch, acc) in gb.iter_mut().enumerate() {
                            *acc += sum_range(g, (o * c + ch) * inner, inner);
                        }
                    }
                    send(*b, gb);
                }
            }
            Op::Relu(x) => send(
                *x,
                g.iter()
                    .zip(&nodes[x.0].value)
                    .map(|(&gv, &xv)| if xv > zero { gv } else { zero })
                    .collect(),
            ),
            Op::Sqrt(x) => {
                let half = T::of(0.5);
                send(
                    *x,
                    g.iter()
                        .zip(&node.value)
                        .map(|(&gv, &y)| if y > zero { gv * half / y } else { zero })
                        .collect(),
                );
            }
            Op::HardTanh { x, lo, hi } => {
                let (outer, c, inner) = channel_layout(&node.shape);
                let xv = &nodes[x.0].value;
                let mut gx = g.to_vec();
                for o in 0..outer {
                    for ch in 0..c {
                        let (l, h) = if lo.len() == 1 { (lo[0], hi[0]) } else { (lo[ch], hi[ch]) };
                        let off = (o * c + ch) * inner;
                        for i in off..off + inner {
                            if xv[i] < l || xv[i] > h {
                                gx[i] = zero;
                            }
                        }
                    }
                }
                send(*x, gx);
            }
            Op::Softmax { x, axis } => {
                let s = &node.shape;
                let (outer, len, inner) = (numel(&s[..*axis]), s[*axis], numel(&s[axis + 1..]));
                let y = &node.value;
                let mut gx = vec![zero; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: T = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            gx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                send(*x, gx);
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Sum(x) => send(*x, vec![g[0]; nodes[x.0].value.len()]),
            Op::Mean(x) => {
                let n = nodes[x.0].value.len();
                send(*x, vec![g[0] / T::of(n as f64); n]);
            }
            Op::Conv2d { x, w, geom } => {
                if wants(*x) {
                    send(*x, kernels::conv2d_backward_input(g, &nodes[w.0].value, geom));
                }
                if wants(*w) {
                    send(*w, kernels::conv2d_backward_weight(g, &nodes[x.0].value, geom));
                }
            }
            Op::ConvTranspose2d { x, w, geom } => {
                // This op's output plays the role of the adjoint conv's input.
                if wants(*x) {
                    send(*x, kernels::conv2d_forward(g, &nodes[w.0].value, geom));
                }
                if wants(*w) {
                    send(*w, kernels::conv2d_backward_weight(&nodes[x.0].value, g, geom));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (outer, c, inner) = channel_layout(&node.shape);
                let f = |a: T| a.to_f64().unwrap_or(f64::NAN);
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for o in 0..outer {
                    for ch in 0..c {
                        let off = (o * c + ch) * inner;
                        for i in off..off + inner {
                            sum_g[ch] += f(g[i]);
                            sum_gx[ch] += f(g[i]) * f(xhat[i]);
                        }
                    }
                }
                if let Some(gm) = gamma {
                    send(*gm, sum_gx.iter().map(|&v| T::of(v)).collect());
                }
                if let Some(bt) = beta {
                    send(*bt, sum_g.iter().map(|&v| T::of(v)).collect());
                }
                if wants(*x) {
                    let gvals = gamma.map(|gm| &nodes[gm.0].value);
                    let n = (outer * inner) as f64;
                    let mut gx = vec![zero; g.len()];
                    for o in 0..outer {
                        for ch in 0..c {
                            let gm = gvals.map_or(1.0, |v| f(v[ch]));
                            let scale = gm * f(inv_std[ch]);
                            let (mg, mgx) = (sum_g[ch] / n, sum_gx[ch] / n);
                            let off = (o * c + ch) * inner;
                            for i in off..off + inner {
                                gx[i] = T::of(scale * (f(g[i]) - mg - f(xhat[i]) * mgx));
                            }
                        }
                    }
                    send(*x, gx);
                }
            }
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (outer, c, inner) = channel_layout(&node.shape);
                let xv = &nodes[x.0].value;
                if let Some(gm) = gamma {
                    let mut gg = vec![zero; c];
                    for o in 0..outer {
                        for (ch, acc) in gg.iter_mut().enumerate() {
                            let off = (o * c + ch) * inner;
                            for i in off..off + inner {
                                *acc += g[i] * (xv[i] - mean[ch]) * inv_std[ch];
                            }
                        }
                    }
                    send(*gm, gg);
                }
                if let Some(bt) = beta {
                    let mut gb = vec![zero; c];
                    for o in 0..outer {
                        for (ch, acc) in gb.iter_mut().enumerate() {
                            *acc += sum_range(g, (o * c + ch) * inner, inner);
                        }
                    }
                    send(*bt, gb);
                }
                if wants(*x) {
                    let gvals = gamma.map(|gm| &nodes[gm.0].value);
                    let mut gx = g.to_vec();
                    for (blk, chunk) in gx.chunks_mut(inner).enumerate() {
                        let ch = blk % c;
                        let s = inv_std[ch] * gvals.map_or(T::one(), |v| v[ch]);
                        chunk.iter_mut().for_each(|a| *a *= s);
                    }
                    send(*x, gx);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![zero; nodes[x.0].value.len()];
                for (&gv, &i) in g.iter().zip(argmax) {
                    gx[i as usize] += gv;
                }
                send(*x, gx);
            }
            Op::AvgPool { x, p } => {
                send(*x, kernels::avg_pool_backward(g, &nodes[x.0].shape, &node.shape, p));
            }
            Op::GlobalAvgPool(x) => {
                let s = &nodes[x.0].shape;
                let inner = s[2] * s[3];
                let scale = T::one() / T::of(inner as f64);
                let mut gx = Vec::with_capacity(numel(s));
                for &gv in g {
                    gx.extend(std::iter::repeat_n(gv * scale, inner));
                }
                send(*x, gx);
            }
            Op::Concat(xs) => {
                let (b, plane) = (node.shape[0], node.shape[2] * node.shape[3]);
                let total_c = node.shape[1];
                let mut offset = 0;
                for &x in xs {
                    let c = nodes[x.0].shape[1];
                    if wants(x) {
                        let mut gx = Vec::with_capacity(b * c * plane);
                        for bi in 0..b {
                            gx.extend_from_slice(&g[(bi * total_c + offset) * plane..][..c * plane]);
                        }
                        send(x, gx);
                    }
                    offset += c;
                }
            }
            Op::Crop { x, top, left } => {
                let s = &nodes[x.0].shape;
                let (ho, wo) = (node.shape[2], node.shape[3]);
                let mut gx = vec![zero; numel(s)];
                for plane in 0..s[0] * s[1] {
                    for y in 0..ho {
                        let row = (plane * s[2] + y + top) * s[3] + left;
                        gx[row..row + wo].copy_from_slice(&g[(plane * ho + y) * wo..][..wo]);
                    }
                }
                send(*x, gx);
            }
            Op::Linear { x, w, b } => {
                let (bsz, f) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let o = nodes[w.0].shape[0];
                if wants(*x) {
                    let mut gx = vec![zero; bsz * f];
                    kernels::gemm(bsz, o, f, g, false, &nodes[w.0].value, false, zero, &mut gx);
                    send(*x, gx);
                }
                if wants(*w) {
                    let mut gw = vec![zero; o * f];
                    kernels::gemm(o, bsz, f, g, true, &nodes[x.0].value, false, zero, &mut gw);
                    send(*w, gw);
                }
                if let Some(b) = b {
                    if wants(*b) {
                        let mut gb = vec![zero; o];
                        g.chunks(o).for_each(|row| add_into(&mut gb, row));
                        send(*b, gb);
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let b = labels.len();
                let k = probs.len() / b;
                let scale = g[0] / T::of(b as f64);
                let mut gx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    gx[i * k + l] -= scale;
                }
                send(*logits, gx);
            }
            Op::WeightedSum { terms, weights } => {
                let wv = &nodes[weights.0].value;
                for &(i, x) in terms {
                    if wants(x) {
                        send(x, g.iter().map(|&v| v * wv[i]).collect());
                    }
                }
                if wants(*weights) {
                    let mut gw = vec![zero; wv.len()];
                    for &(i, x) in terms {
                        gw[i] += g.iter().zip(&nodes[x.0].value).map(|(&a, &b)| a * b).sum::<T>();
                    }
                    send(*weights, gw);
                }
            }
        }
    }
}
