//! The searchable model: supernet encoder plus the active task heads, and
//! the per-batch joint loss.

use rand::Rng;

use super::config::{InputMode, SearchConfig};
use crate::autodiff::{Graph, Real, Var};
use crate::data::{Batch, Normalization, SplitTag};
use crate::error::{Error, Result};
use crate::heads::{ClassifierHead, Decoder, DecoderConfig};
use crate::losses::{cross_entropy, joint_loss, masked_mse, JointLossReport};
use crate::masking::{MaskPlan, PatchGeometry};
use crate::nn::{BnUpdate, Ctx, Init, Mode, ParamStore};
use crate::search_space::{alpha_grads, alpha_vars, Alpha, Network, NetworkConfig};
use crate::tensor::Tensor;

/// A batch ready for the loss: encoder input, reconstruction target and
/// the pixels the reconstruction loss covers.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub input: Tensor,
    pub target: Tensor,
    pub pixel_mask: Vec<f32>,
    pub labels: Vec<usize>,
    pub tag: SplitTag,
    pub rec: bool,
}

pub struct SearchModel {
    pub network: Network,
    pub classifier: Option<ClassifierHead>,
    pub decoder: Option<Decoder>,
    pub geometry: PatchGeometry,
}

/// One loss evaluation.
pub struct LossEval {
    pub report: JointLossReport,
    pub correct: Option<usize>,
    pub w_grads: Option<Vec<f32>>,
    pub alpha_grads: Option<Vec<f32>>,
    pub bn_updates: Vec<BnUpdate>,
}

impl SearchModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(store: &mut ParamStore, cfg: &SearchConfig, c: usize, h: usize, w: usize, classes: usize, norm: &Normalization, seed: u64) -> Result<Self> {
        let mut net_cfg = NetworkConfig::new(cfg.space, cfg.c_init, cfg.layers, h, w);
        net_cfg.in_channels = c;
        let geometry = PatchGeometry::new(c, h, w, cfg.patch_size).map_err(|e| Error::config("patch_size", e.to_string()))?;
        let mut init = Init::new(store, seed);
        let network = Network::supernet(&mut init, &net_cfg)?;
        let feat = network.out_channels();
        let classifier = cfg.task.cls.then(|| ClassifierHead::new(&mut init, "head.cls", feat, classes));
        let decoder = if cfg.task.rec {
            let dcfg = DecoderConfig::new(cfg.decoder_widths, norm.lo.clone(), norm.hi.clone());
            Some(Decoder::new(&mut init, "head.rec", feat, (h / 4, w / 4), (h, w), &dcfg)?)
        } else {
            None
        };
        Ok(Self {
            network,
            classifier,
            decoder,
            geometry,
        })
    }

    /// Masks (or not) a batch. `rec` enables the reconstruction loss for it.
    pub fn prepare(&self, cfg: &SearchConfig, batch: Batch, rec: bool, rng: &mut impl Rng) -> Result<Prepared> {
        let b = batch.labels.len();
        let masked = cfg.task.input == InputMode::Masked && (batch.tag != SplitTag::SearchVal || cfg.rec_on_val);
        let (input, pixel_mask) = if masked {
            // Keep at least one patch masked when the reconstruction loss needs it.
            let plan = MaskPlan::sample(self.geometry, b, cfg.mask_ratio, rec as usize, rng)?;
            (plan.apply(&batch.images)?, plan.pixel_mask())
        } else {
            // Clean input: the reconstruction target is the whole image.
            (batch.images.clone(), vec![1.0; batch.images.numel()])
        };
        Ok(Prepared {
            input,
            target: batch.images,
            pixel_mask,
            labels: batch.labels,
            tag: batch.tag,
            rec,
        })
    }

    /// Records the joint loss for `p` on `ctx`.
    pub fn loss<T: Real>(&self, ctx: &mut Ctx<T>, alpha: &Alpha, alpha_requires_grad: bool, p: &Prepared, cfg: &SearchConfig) -> Result<(Var, JointLossReport, Option<usize>)> {
        let x = ctx.g.leaf(&p.input);
        let a = alpha_vars(&mut ctx.g, alpha, alpha_requires_grad)?;
        let feat = self.network.forward(ctx, x, Some(&a))?;
        let mut correct = None;
        let l_cls = match &self.classifier {
            Some(head) => {
                let logits = head.forward(ctx, feat)?;
                let k = head.classes;
                let vals = ctx.g.value(logits);
                correct = Some(
                    vals.chunks(k)
                        .zip(&p.labels)
                        .filter(|(row, &y)| argmax(row) == y)
                        .count(),
                );
                Some(cross_entropy(&mut ctx.g, logits, &p.labels)?)
            }
            None => None,
        };
        let l_mse = match (&self.decoder, p.rec) {
            (Some(dec), true) => {
                let rec = dec.forward(ctx, feat)?;
                let target = ctx.g.leaf(&p.target);
                Some(masked_mse(&mut ctx.g, rec, target, &p.pixel_mask, cfg.mse)?)
            }
            _ => None,
        };
        let (total, report) = joint_loss(&mut ctx.g, l_cls, l_mse, cfg.lambda)?;
        Ok((total, report, correct))
    }

    /// Loss and requested gradients at the parameters in `store` and `alpha`.
    pub fn evaluate(&self, store: &ParamStore, alpha: &Alpha, p: &Prepared, cfg: &SearchConfig, want_w: bool, want_alpha: bool) -> Result<LossEval> {
        let mut ctx = Ctx::new(Graph::new(), store, Mode::Train, want_w);
        let (total, report, correct) = self.loss(&mut ctx, alpha, want_alpha, p, cfg)?;
        if want_w || want_alpha {
            ctx.g.backward(total)?;
        }
        let w_grads = want_w.then(|| {
            let grads = ctx.weight_grads();
            let mut flat = Vec::with_capacity(store.numel(&store.weight_ids()));
            for id in store.weight_ids() {
                match grads.get(&id) {
                    Some(g) => flat.extend_from_slice(g),
                    None => flat.extend(std::iter::repeat_n(0.0, store.get(id).numel())),
                }
            }
            flat
        });
        let (g, bn_updates) = ctx.into_parts();
        let alpha_grads = want_alpha.then(|| alpha_grads(&g, alpha));
        Ok(LossEval {
            report,
            correct,
            w_grads,
            alpha_grads,
            bn_updates,
        })
    }
}

pub(crate) fn argmax(row: &[impl PartialOrd + Copy]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
