use super::{alpha::ALPHA_NORMAL_SOURCE, alpha::ALPHA_REDUCE_SOURCE, Alpha, CellTopology, Genotype, OpKind, OperationSet, SpaceKind};
use crate::autodiff::{ConvParams, Graph, Real, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Ctx, DwPw, FactorizedReduce, Init, Pool, ReluConvBn, ResidualReduce};
use crate::tensor::Tensor;

/// Shape of the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub space: SpaceKind,
    pub ops: OperationSet,
    /// Computed nodes per cell.
    pub nodes: usize,
    /// Number of cells (including the two reduction positions).
    pub layers: usize,
    pub c_init: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Learnable batch-norm scale/shift inside cells.
    pub affine: bool,
}

impl NetworkConfig {
    pub fn new(space: SpaceKind, c_init: usize, layers: usize, height: usize, width: usize) -> Self {
        Self {
            space,
            ops: OperationSet::for_space(space),
            nodes: match space {
                SpaceKind::Darts => 4,
                SpaceKind::Nb201 => 3,
            },
            layers,
            c_init,
            in_channels: 3,
            height,
            width,
            affine: false,
        }
    }

    pub fn topology(&self) -> CellTopology {
        CellTopology::for_space(self.space, self.nodes)
    }

    pub fn reduction_positions(&self) -> [usize; 2] {
        [self.layers / 3, 2 * self.layers / 3]
    }

    pub fn validate(&self) -> Result<()> {
        let [r1, r2] = self.reduction_positions();
        if self.layers < 2 || r1 == r2 {
            return Err(Error::config("layers", format!("{} cells cannot hold two reduction cells", self.layers)));
        }
        if !self.height.is_multiple_of(4) || !self.width.is_multiple_of(4) || self.height == 0 || self.width == 0 {
            return Err(Error::config(
                "image_size",
                format!("{}x{} is not divisible by 4", self.height, self.width),
            ));
        }
        if self.nodes == 0 || self.c_init == 0 {
            return Err(Error::config("nodes", "cells need at least one node and one channel"));
        }
        if !self.c_init.is_multiple_of(2) && self.space == SpaceKind::Darts {
            return Err(Error::config("c_init", "factorized reductions need an even channel count"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Candidate {
    Zero,
    Identity,
    Reduce(FactorizedReduce),
    Pool(Pool),
    Sep(DwPw, DwPw),
    Dil(DwPw),
    Conv(ReluConvBn),
}

impl Candidate {
    fn build(init: &mut Init, name: &str, op: OpKind, c: usize, stride: usize, space: SpaceKind, affine: bool) -> Result<Self> {
        let name = format!("{name}.{op}");
        let pool_bn = (space == SpaceKind::Darts).then_some(affine);
        Ok(match op {
            OpKind::None => Candidate::Zero,
            OpKind::SkipConnect if stride == 1 => Candidate::Identity,
            OpKind::SkipConnect => Candidate::Reduce(FactorizedReduce::new(init, &name, c, c, affine)?),
            OpKind::MaxPool3x3 => Candidate::Pool(Pool::new(init, &name, c, true, stride, pool_bn)),
            OpKind::AvgPool3x3 => Candidate::Pool(Pool::new(init, &name, c, false, stride, pool_bn)),
            OpKind::SepConv3x3 | OpKind::SepConv5x5 => {
                let k = if op == OpKind::SepConv3x3 { 3 } else { 5 };
                Candidate::Sep(
                    DwPw::new(init, &format!("{name}.a"), c, c, k, stride, 1, affine),
                    DwPw::new(init, &format!("{name}.b"), c, c, k, 1, 1, affine),
                )
            }
            OpKind::DilConv3x3 | OpKind::DilConv5x5 => {
                let k = if op == OpKind::DilConv3x3 { 3 } else { 5 };
                Candidate::Dil(DwPw::new(init, &name, c, c, k, stride, 2, affine))
            }
            OpKind::Conv1x1 => Candidate::Conv(ReluConvBn::new(init, &name, c, c, 1, stride, 0, affine)),
            OpKind::Conv3x3 => Candidate::Conv(ReluConvBn::new(init, &name, c, c, 3, stride, 1, affine)),
        })
    }

    /// `None` for the zero operation.
    fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Option<Var>> {
        Ok(Some(match self {
            Candidate::Zero => return Ok(None),
            Candidate::Identity => x,
            Candidate::Reduce(fr) => fr.forward(ctx, x)?,
            Candidate::Pool(p) => p.forward(ctx, x)?,
            Candidate::Sep(a, b) => {
                let y = a.forward(ctx, x)?;
                b.forward(ctx, y)?
            }
            Candidate::Dil(d) => d.forward(ctx, x)?,
            Candidate::Conv(c) => c.forward(ctx, x)?,
        }))
    }
}

/// One edge holding every candidate, mixed by softmaxed architecture weights.
#[derive(Clone, Debug)]
pub struct MixedOp {
    candidates: Vec<(usize, Candidate)>,
}

impl MixedOp {
    pub fn new(init: &mut Init, name: &str, ops: &OperationSet, c: usize, stride: usize, space: SpaceKind, affine: bool) -> Result<Self> {
        let candidates = ops
            .ops()
            .iter()
            .enumerate()
            .map(|(k, &op)| Ok((k, Candidate::build(init, name, op, c, stride, space, affine)?)))
            .collect::<Result<_>>()?;
        Ok(Self { candidates })
    }

    /// `Σ_k weights[offset + k] · o_k(x)`; `None` when every candidate is zero.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var, weights: Var, offset: usize) -> Result<Option<Var>> {
        let mut terms = Vec::with_capacity(self.candidates.len());
        for (k, cand) in &self.candidates {
            if let Some(y) = cand.forward(ctx, x)? {
                terms.push((offset + k, y));
            }
        }
        if terms.is_empty() {
            return Ok(None);
        }
        ctx.g.weighted_sum(&terms, weights).map(Some)
    }
}

#[derive(Clone, Debug)]
enum EdgeImpl {
    Mixed(MixedOp),
    Fixed(Candidate),
}

#[derive(Clone, Debug)]
struct Edge {
    node: usize,
    src: usize,
    index: usize,
    imp: EdgeImpl,
}

#[derive(Clone, Debug)]
enum Preprocess {
    Conv(ReluConvBn),
    Reduce(FactorizedReduce),
}

#[derive(Clone, Debug)]
struct Cell {
    reduction: bool,
    /// Two-input cells preprocess both inputs to the cell width.
    pre: Option<(Preprocess, ReluConvBn)>,
    edges: Vec<Edge>,
    topo: CellTopology,
}

impl Cell {
    fn forward<T: Real>(&self, ctx: &mut Ctx<T>, inputs: &[Var], weights: Option<Var>, k: usize) -> Result<Var> {
        let mut states: Vec<Var> = match &self.pre {
            Some((p0, p1)) => {
                let s0 = match p0 {
                    Preprocess::Conv(c) => c.forward(ctx, inputs[0])?,
                    Preprocess::Reduce(r) => r.forward(ctx, inputs[0])?,
                };
                vec![s0, p1.forward(ctx, inputs[1])?]
            }
            None => vec![inputs[inputs.len() - 1]],
        };
        for j in 0..self.topo.nodes {
            let mut parts = Vec::new();
            for e in self.edges.iter().filter(|e| e.node == j) {
                let x = states[e.src];
                let y = match &e.imp {
                    EdgeImpl::Mixed(m) => {
                        let w = weights.ok_or_else(|| Error::contract("supernet forward needs architecture weights"))?;
                        m.forward(ctx, x, w, e.index * k)?
                    }
                    EdgeImpl::Fixed(c) => c.forward(ctx, x)?,
                };
                parts.extend(y);
            }
            let node = if parts.is_empty() {
                let mut shape = ctx.g.shape(states[0]).to_vec();
                if self.reduction {
                    shape[2] /= 2;
                    shape[3] /= 2;
                }
                ctx.g.constant(Tensor::zeros(shape))
            } else {
                ctx.g.add_n(&parts)?
            };
            states.push(node);
        }
        match self.pre {
            Some(_) => ctx.g.concat_channels(&states[self.topo.inputs..]),
            None => Ok(*states.last().expect("at least one node")),
        }
    }
}

#[derive(Clone, Debug)]
enum Stage {
    Cell(Cell),
    Residual(ResidualReduce),
}

/// Softmaxed architecture weights on the graph, flattened to `[edges * ops]`.
#[derive(Clone, Copy, Debug)]
pub struct AlphaVars {
    pub normal: Var,
    pub reduce: Option<Var>,
}

/// Records α as graph leaves (tagged for finite differences) and softmaxes each row.
pub fn alpha_vars<T: Real>(g: &mut Graph<T>, alpha: &Alpha, requires_grad: bool) -> Result<AlphaVars> {
    let normal = g.leaf_from_source(&alpha.normal, requires_grad, ALPHA_NORMAL_SOURCE);
    let reduce = alpha
        .reduce
        .as_ref()
        .map(|r| g.leaf_from_source(r, requires_grad, ALPHA_REDUCE_SOURCE));
    AlphaVars::from_logits(g, normal, reduce)
}

impl AlphaVars {
    /// Row-softmax of `[edges, ops]` logit nodes already on the graph.
    pub fn from_logits<T: Real>(g: &mut Graph<T>, normal: Var, reduce: Option<Var>) -> Result<Self> {
        let mut one = |a: Var| -> Result<Var> {
            let n = g.value(a).len();
            let s = g.softmax(a, 1)?;
            g.reshape(s, &[n])
        };
        let normal = one(normal)?;
        let reduce = reduce.map(&mut one).transpose()?;
        Ok(Self { normal, reduce })
    }
}

/// Flattened α gradient (normal then reduce) after `backward`; zeros where none flowed.
pub fn alpha_grads<T: Real>(g: &Graph<T>, alpha: &Alpha) -> Vec<f32> {
    let mut normal = vec![0.0; alpha.normal.numel()];
    let mut reduce = vec![0.0; alpha.reduce.as_ref().map_or(0, Tensor::numel)];
    for (src, grad) in g.source_grads() {
        let dst = match src {
            ALPHA_NORMAL_SOURCE => &mut normal,
            ALPHA_REDUCE_SOURCE => &mut reduce,
            _ => continue,
        };
        dst.iter_mut().zip(grad).for_each(|(d, v)| *d += v.to32());
    }
    normal.extend(reduce);
    normal
}

/// Encoder: stem convolution followed by a stack of cells. Built either as
/// the weight-sharing supernet or as the discrete network of a genotype.
#[derive(Clone, Debug)]
pub struct Network {
    cfg: NetworkConfig,
    stem: (crate::nn::ParamId, BatchNorm),
    stages: Vec<Stage>,
    out_channels: usize,
}

impl Network {
    /// Every candidate on every edge.
    pub fn supernet(init: &mut Init, cfg: &NetworkConfig) -> Result<Self> {
        Self::build(init, cfg, None)
    }

    /// Only the genotype's operations; parameter names match the supernet's.
    pub fn discrete(init: &mut Init, cfg: &NetworkConfig, genotype: &Genotype) -> Result<Self> {
        if genotype.space != cfg.space {
            return Err(Error::config("genotype", format!("genotype space {} differs from {}", genotype.space, cfg.space)));
        }
        genotype.validate(cfg.nodes, &cfg.ops)?;
        Self::build(init, cfg, Some(genotype))
    }

    fn build(init: &mut Init, cfg: &NetworkConfig, genotype: Option<&Genotype>) -> Result<Self> {
        cfg.validate()?;
        let topo = cfg.topology();
        let reductions = cfg.reduction_positions();
        let c = cfg.c_init;
        let multiplier = match cfg.space {
            SpaceKind::Darts => 3,
            SpaceKind::Nb201 => 1,
        };
        let stem_c = multiplier * c;
        let stem = (
            init.conv_weight("stem.conv", [stem_c, cfg.in_channels, 3, 3]),
            init.batch_norm("stem.bn", stem_c, true),
        );
        let mut stages = Vec::with_capacity(cfg.layers);
        let (mut c_pp, mut c_p, mut c_cur) = (stem_c, stem_c, c);
        let mut reduction_prev = false;
        for i in 0..cfg.layers {
            let name = format!("cells.{i}");
            let reduction = reductions.contains(&i);
            if cfg.space == SpaceKind::Nb201 && reduction {
                stages.push(Stage::Residual(ResidualReduce::new(init, &name, c_p, 2 * c_p, true)));
                c_p *= 2;
                continue;
            }
            if reduction {
                c_cur *= 2;
            }
            let cell_c = if cfg.space == SpaceKind::Darts { c_cur } else { c_p };
            let pre = match cfg.space {
                SpaceKind::Darts => Some((
                    if reduction_prev {
                        Preprocess::Reduce(FactorizedReduce::new(init, &format!("{name}.pre0"), c_pp, cell_c, cfg.affine)?)
                    } else {
                        Preprocess::Conv(ReluConvBn::new(init, &format!("{name}.pre0"), c_pp, cell_c, 1, 1, 0, cfg.affine))
                    },
                    ReluConvBn::new(init, &format!("{name}.pre1"), c_p, cell_c, 1, 1, 0, cfg.affine),
                )),
                SpaceKind::Nb201 => None,
            };
            let chosen = genotype.map(|g| if reduction { &g.reduce } else { &g.normal });
            let mut edges = Vec::new();
            for (node, src, index) in topo.edges() {
                let stride = if reduction && src < topo.inputs { 2 } else { 1 };
                let ename = format!("{name}.edges.{index}");
                let imp = match chosen {
                    None => EdgeImpl::Mixed(MixedOp::new(init, &ename, &cfg.ops, cell_c, stride, cfg.space, cfg.affine)?),
                    Some(cell) => match cell[node].iter().find(|&&(_, s)| s == src) {
                        Some(&(op, _)) => EdgeImpl::Fixed(Candidate::build(init, &ename, op, cell_c, stride, cfg.space, cfg.affine)?),
                        None => continue,
                    },
                };
                edges.push(Edge { node, src, index, imp });
            }
            stages.push(Stage::Cell(Cell {
                reduction,
                pre,
                edges,
                topo,
            }));
            match cfg.space {
                SpaceKind::Darts => {
                    c_pp = c_p;
                    c_p = cfg.nodes * c_cur;
                }
                SpaceKind::Nb201 => {}
            }
            reduction_prev = reduction;
        }
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            stages,
            out_channels: c_p,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    /// Channels of the encoder output.
    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// `[B, C, H, W] -> [B, C', H/4, W/4]`. `alpha` is required for the supernet.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var, alpha: Option<&AlphaVars>) -> Result<Var> {
        let s = ctx.g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.cfg.in_channels || s[2] != self.cfg.height || s[3] != self.cfg.width {
            return Err(Error::dim(format!(
                "encoder expects [B, {}, {}, {}], got {s:?}",
                self.cfg.in_channels, self.cfg.height, self.cfg.width
            )));
        }
        let k = self.cfg.ops.len();
        let y = ctx.conv(x, self.stem.0, ConvParams::new(1, 1))?;
        let stem = ctx.batch_norm(y, &self.stem.1)?;
        let (mut s0, mut s1) = (stem, stem);
        for stage in &self.stages {
            let out = match stage {
                Stage::Residual(r) => r.forward(ctx, s1)?,
                Stage::Cell(cell) => {
                    let w = alpha.map(|a| if cell.reduction { a.reduce.unwrap_or(a.normal) } else { a.normal });
                    if cell.reduction && alpha.is_some_and(|a| a.reduce.is_none()) && cell.pre.is_some() {
                        return Err(Error::contract("reduction cell needs reduce architecture weights"));
                    }
                    cell.forward(ctx, &[s0, s1], w, k)?
                }
            };
            s0 = s1;
            s1 = out;
        }
        Ok(s1)
    }
}
