//! Parameters and reusable convolutional blocks.
//!
//! Every learnable tensor and batch-norm running statistic lives in a
//! [`ParamStore`] under a hierarchical name. Layers hold [`ParamId`]s only,
//! so two networks built against the same store with the same names share
//! weights. A [`Ctx`] wraps a fresh [`Graph`] for one forward pass.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, ConvParams, Graph, PoolParams, Real, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Trained by gradient descent.
    Weight,
    /// Running statistics; updated outside the optimiser.
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<Param>", into = "Vec<Param>")]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl From<Vec<Param>> for ParamStore {
    fn from(params: Vec<Param>) -> Self {
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Self { params, index }
    }
}

impl From<ParamStore> for Vec<Param> {
    fn from(s: ParamStore) -> Self {
        s.params
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the id registered under `name`, creating it with `init` if absent.
    pub fn get_or_insert(&mut self, name: &str, kind: ParamKind, init: impl FnOnce() -> Tensor) -> ParamId {
        if let Some(&i) = self.index.get(name) {
            return ParamId(i);
        }
        self.params.push(Param {
            name: name.to_string(),
            kind,
            tensor: init(),
        });
        self.index.insert(name.to_string(), self.params.len() - 1);
        ParamId(self.params.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn weight_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.kind == ParamKind::Weight).map(|(id, _)| id).collect()
    }

    pub fn numel(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.get(id).numel()).sum()
    }

    /// Concatenates the values of `ids` into one vector.
    pub fn flatten(&self, ids: &[ParamId]) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.numel(ids));
        for &id in ids {
            out.extend_from_slice(self.get(id).data());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn unflatten(&mut self, ids: &[ParamId], flat: &[f32]) -> Result<()> {
        if flat.len() != self.numel(ids) {
            return Err(Error::dim(format!(
                "flat vector of {} for {} parameters",
                flat.len(),
                self.numel(ids)
            )));
        }
        let mut at = 0;
        for &id in ids {
            let t = self.get_mut(id);
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Folds batch statistics into running estimates with momentum
    /// [`BN_MOMENTUM`]; variance uses the unbiased estimate.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        let m = BN_MOMENTUM;
        for u in updates {
            for (r, &b) in self.get_mut(u.mean).data_mut().iter_mut().zip(&u.stats.mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, &b) in self.get_mut(u.var).data_mut().iter_mut().zip(&u.stats.var_unbiased) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
    }
}

/// Batch-norm layer parameters; `gamma`/`beta` absent for non-affine layers.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Option<ParamId>,
    pub beta: Option<ParamId>,
    pub mean: ParamId,
    pub var: ParamId,
}

#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running estimates are collected as [`BnUpdate`]s.
    Train,
    /// Running statistics.
    Eval,
}

/// Source tags at or above this value are reserved for non-store leaves
/// (architecture parameters).
pub const EXTERNAL_SOURCE: usize = 1 << 40;

/// One forward pass: a graph plus read access to the parameters.
pub struct Ctx<'a, T: Real = f32> {
    pub g: Graph<T>,
    params: &'a ParamStore,
    pub mode: Mode,
    weights_grad: bool,
    cache: HashMap<ParamId, Var>,
    bn_updates: Vec<BnUpdate>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(g: Graph<T>, params: &'a ParamStore, mode: Mode, weights_grad: bool) -> Self {
        Self {
            g,
            params,
            mode,
            weights_grad,
            cache: HashMap::new(),
            bn_updates: Vec::new(),
        }
    }

    pub fn params(&self) -> &ParamStore {
        self.params
    }

    /// Graph leaf for a stored parameter, created once per pass.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.cache.get(&id) {
            return v;
        }
        let p = self.params.param(id);
        let rg = self.weights_grad && p.kind == ParamKind::Weight;
        let v = self.g.leaf_from_source(&p.tensor, rg, id.0);
        self.cache.insert(id, v);
        v
    }

    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    /// Gradients of stored weights after `backward`.
    pub fn weight_grads(&self) -> HashMap<ParamId, Vec<f32>> {
        self.g
            .source_grads()
            .filter(|(s, _)| *s < EXTERNAL_SOURCE)
            .map(|(s, g)| (ParamId(s), g.iter().map(|v| v.to32()).collect()))
            .collect()
    }

    pub fn into_parts(self) -> (Graph<T>, Vec<BnUpdate>) {
        (self.g, self.bn_updates)
    }

    pub fn conv(&mut self, x: Var, w: ParamId, p: ConvParams) -> Result<Var> {
        let wv = self.param(w);
        self.g.conv2d(x, wv, p)
    }

    pub fn conv_bias(&mut self, x: Var, w: ParamId, b: ParamId, p: ConvParams) -> Result<Var> {
        let y = self.conv(x, w, p)?;
        let bv = self.param(b);
        self.g.bias_channels(y, bv)
    }

    pub fn batch_norm(&mut self, x: Var, bn: &BatchNorm) -> Result<Var> {
        let gamma = bn.gamma.map(|id| self.param(id));
        let beta = bn.beta.map(|id| self.param(id));
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.g.batch_norm_train(x, gamma, beta, BN_EPS)?;
                self.bn_updates.push(BnUpdate {
                    mean: bn.mean,
                    var: bn.var,
                    stats,
                });
                Ok(y)
            }
            Mode::Eval => {
                let (m, v) = (self.params.get(bn.mean).data(), self.params.get(bn.var).data());
                self.g.batch_norm_eval(x, gamma, beta, m, v, BN_EPS)
            }
        }
    }
}

/// Registers freshly initialised parameters under a name prefix.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// He-normal weight with fan-in taken from all but the first dimension.
    pub fn conv_weight(&mut self, name: &str, shape: [usize; 4]) -> ParamId {
        let fan_in = (shape[1] * shape[2] * shape[3]) as f32;
        let std = (2.0 / fan_in).sqrt();
        let rng = &mut self.rng;
        self.store
            .get_or_insert(name, ParamKind::Weight, || Tensor::randn(shape.to_vec(), std, rng))
    }

    /// Transposed-conv weight `[Ci, Co, K, K]`, fan-in `Ci * K * K / stride²` approximated by `Ci`.
    pub fn conv_transpose_weight(&mut self, name: &str, shape: [usize; 4]) -> ParamId {
        let fan_in = (shape[0] * shape[2] * shape[3] / 4).max(1) as f32;
        let std = (2.0 / fan_in).sqrt();
        let rng = &mut self.rng;
        self.store
            .get_or_insert(name, ParamKind::Weight, || Tensor::randn(shape.to_vec(), std, rng))
    }

    pub fn linear_weight(&mut self, name: &str, out: usize, inp: usize) -> ParamId {
        let bound = 1.0 / (inp as f32).sqrt();
        let rng = &mut self.rng;
        self.store.get_or_insert(name, ParamKind::Weight, || {
            Tensor::uniform(vec![out, inp], -bound, bound, rng)
        })
    }

    pub fn zeros(&mut self, name: &str, n: usize) -> ParamId {
        self.store.get_or_insert(name, ParamKind::Weight, || Tensor::zeros(vec![n]))
    }

    pub fn batch_norm(&mut self, name: &str, c: usize, affine: bool) -> BatchNorm {
        let (gamma, beta) = if affine {
            (
                Some(self.store.get_or_insert(&format!("{name}.gamma"), ParamKind::Weight, || {
                    Tensor::full(vec![c], 1.0)
                })),
                Some(self.zeros(&format!("{name}.beta"), c)),
            )
        } else {
            (None, None)
        };
        BatchNorm {
            gamma,
            beta,
            mean: self
                .store
                .get_or_insert(&format!("{name}.running_mean"), ParamKind::Buffer, || Tensor::zeros(vec![c])),
            var: self
                .store
                .get_or_insert(&format!("{name}.running_var"), ParamKind::Buffer, || Tensor::full(vec![c], 1.0)),
        }
    }
}

/// ReLU, convolution, batch norm.
#[derive(Clone, Debug)]
pub struct ReluConvBn {
    conv: ParamId,
    p: ConvParams,
    bn: BatchNorm,
}

impl ReluConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new(init: &mut Init, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, affine: bool) -> Self {
        Self {
            conv: init.conv_weight(&format!("{name}.conv"), [c_out, c_in, k, k]),
            p: ConvParams::new(stride, pad),
            bn: init.batch_norm(&format!("{name}.bn"), c_out, affine),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let r = ctx.g.relu(x);
        let y = ctx.conv(r, self.conv, self.p)?;
        ctx.batch_norm(y, &self.bn)
    }
}

/// Halves resolution with two offset 1×1 stride-2 convolutions whose outputs
/// are concatenated, so no input pixel is skipped.
#[derive(Clone, Debug)]
pub struct FactorizedReduce {
    conv1: ParamId,
    conv2: ParamId,
    bn: BatchNorm,
}

impl FactorizedReduce {
    pub fn new(init: &mut Init, name: &str, c_in: usize, c_out: usize, affine: bool) -> Result<Self> {
        if !c_out.is_multiple_of(2) {
            return Err(Error::config("channels", format!("factorized reduce needs even channels, got {c_out}")));
        }
        Ok(Self {
            conv1: init.conv_weight(&format!("{name}.conv1"), [c_out / 2, c_in, 1, 1]),
            conv2: init.conv_weight(&format!("{name}.conv2"), [c_out / 2, c_in, 1, 1]),
            bn: init.batch_norm(&format!("{name}.bn"), c_out, affine),
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let r = ctx.g.relu(x);
        let p = ConvParams::new(2, 0);
        let a = ctx.conv(r, self.conv1, p)?;
        let shifted = ctx.g.crop(r, 1, 1)?;
        let b = ctx.conv(shifted, self.conv2, p)?;
        let cat = ctx.g.concat_channels(&[a, b])?;
        ctx.batch_norm(cat, &self.bn)
    }
}

/// ReLU, depthwise conv, pointwise conv, batch norm.
#[derive(Clone, Debug)]
pub struct DwPw {
    dw: ParamId,
    dw_p: ConvParams,
    pw: ParamId,
    bn: BatchNorm,
}

impl DwPw {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        affine: bool,
    ) -> Self {
        let pad = dilation * (k - 1) / 2;
        Self {
            dw: init.conv_weight(&format!("{name}.dw"), [c_in, 1, k, k]),
            dw_p: ConvParams::new(stride, pad).dilated(dilation).grouped(c_in),
            pw: init.conv_weight(&format!("{name}.pw"), [c_out, c_in, 1, 1]),
            bn: init.batch_norm(&format!("{name}.bn"), c_out, affine),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let r = ctx.g.relu(x);
        let d = ctx.conv(r, self.dw, self.dw_p)?;
        let p = ctx.conv(d, self.pw, ConvParams::new(1, 0))?;
        ctx.batch_norm(p, &self.bn)
    }
}

/// 3×3 pooling with padding 1, optionally followed by batch norm.
#[derive(Clone, Debug)]
pub struct Pool {
    pub max: bool,
    pub p: PoolParams,
    pub bn: Option<BatchNorm>,
}

impl Pool {
    pub fn new(init: &mut Init, name: &str, c: usize, max: bool, stride: usize, bn: Option<bool>) -> Self {
        Self {
            max,
            p: PoolParams {
                kernel: 3,
                stride,
                padding: 1,
            },
            bn: bn.map(|affine| init.batch_norm(&format!("{name}.bn"), c, affine)),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let y = if self.max {
            ctx.g.max_pool2d(x, self.p)?
        } else {
            ctx.g.avg_pool2d(x, self.p)?
        };
        match &self.bn {
            Some(bn) => ctx.batch_norm(y, bn),
            None => Ok(y),
        }
    }
}

/// Stride-2 residual block used at fixed reduction positions of the
/// single-cell space: two ReLU-conv-BN 3×3 layers plus an average-pooled 1×1
/// shortcut.
#[derive(Clone, Debug)]
pub struct ResidualReduce {
    a: ReluConvBn,
    b: ReluConvBn,
    shortcut: ParamId,
}

impl ResidualReduce {
    pub fn new(init: &mut Init, name: &str, c_in: usize, c_out: usize, affine: bool) -> Self {
        Self {
            a: ReluConvBn::new(init, &format!("{name}.a"), c_in, c_out, 3, 2, 1, affine),
            b: ReluConvBn::new(init, &format!("{name}.b"), c_out, c_out, 3, 1, 1, affine),
            shortcut: init.conv_weight(&format!("{name}.shortcut"), [c_out, c_in, 1, 1]),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let y = self.a.forward(ctx, x)?;
        let y = self.b.forward(ctx, y)?;
        let pooled = ctx.g.avg_pool2d(
            x,
            PoolParams {
                kernel: 2,
                stride: 2,
                padding: 0,
            },
        )?;
        let s = ctx.conv(pooled, self.shortcut, ConvParams::new(1, 0))?;
        ctx.g.add(y, s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_shares_by_name_and_round_trips() {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, 1);
        let a = init.conv_weight("x.conv", [2, 3, 3, 3]);
        let b = init.conv_weight("x.conv", [2, 3, 3, 3]);
        assert_eq!(a, b);
        let bn = init.batch_norm("x.bn", 2, true);
        assert_eq!(store.len(), 5);
        assert_eq!(store.weight_ids().len(), 3);
        let json = serde_json::to_string(&store).unwrap();
        let back: ParamStore = serde_json::from_str(&json).unwrap();
        assert_eq!(back, store);
        assert_eq!(back.id("x.bn.running_var"), Some(bn.var));
    }

    #[test]
    fn flatten_inverts_unflatten() {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, 2);
        init.conv_weight("a", [1, 2, 3, 3]);
        init.linear_weight("b", 3, 4);
        let ids = store.weight_ids();
        let flat = store.flatten(&ids);
        let doubled: Vec<f32> = flat.iter().map(|v| v * 2.0).collect();
        store.unflatten(&ids, &doubled).unwrap();
        assert_eq!(store.flatten(&ids), doubled);
        assert!(store.unflatten(&ids, &doubled[1..]).is_err());
    }

    #[test]
    fn running_stats_use_momentum() {
        let mut store = ParamStore::new();
        let bn = Init::new(&mut store, 0).batch_norm("bn", 1, false);
        let x = Tensor::new(vec![2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let mut ctx = Ctx::new(Graph::new(), &store, Mode::Train, true);
        let xv = ctx.g.leaf(&x);
        ctx.batch_norm(xv, &bn).unwrap();
        let (_, updates) = ctx.into_parts();
        store.apply_bn_updates(&updates);
        assert!((store.get(bn.mean).data()[0] - 0.2).abs() < 1e-7);
        // Unbiased variance of (1, 3) is 2.
        assert!((store.get(bn.var).data()[0] - (0.9 + 0.2)).abs() < 1e-6);
    }

    #[test]
    fn factorized_reduce_halves_resolution() {
        let mut store = ParamStore::new();
        let fr = FactorizedReduce::new(&mut Init::new(&mut store, 3), "fr", 3, 6, true).unwrap();
        let rr = ResidualReduce::new(&mut Init::new(&mut store, 4), "rr", 3, 6, true);
        let mut ctx = Ctx::new(Graph::new(), &store, Mode::Train, true);
        let x = ctx.g.leaf(&Tensor::zeros(vec![2, 3, 8, 8]));
        let y = fr.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.g.shape(y), &[2, 6, 4, 4]);
        let y = rr.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.g.shape(y), &[2, 6, 4, 4]);
    }
}
