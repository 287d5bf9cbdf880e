//! Training a discrete architecture from scratch and measuring top-1
//! accuracy on the held-out split.

use serde::{Deserialize, Serialize};

use super::config::EvalConfig;
use super::model::argmax;
use super::run::SearchData;
use crate::autodiff::Graph;
use crate::data::{Augment, Loader, SplitTag};
use crate::error::{Error, Result};
use crate::heads::ClassifierHead;
use crate::losses::cross_entropy;
use crate::nn::{Ctx, Init, Mode, ParamStore};
use crate::optim::{clip_grad_norm, cosine_lr, Sgd};
use crate::rng::{derive_seed, stream, Purpose};
use crate::search_space::{Genotype, Network, NetworkConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEpoch {
    pub epoch: usize,
    pub lr: f32,
    pub train_loss: f64,
    pub train_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub genotype: Genotype,
    pub config: EvalConfig,
    pub epochs: Vec<EvalEpoch>,
    pub test_correct: usize,
    pub test_total: usize,
    pub accuracy: f64,
}

/// Trains `genotype` on the eval-train split (classification, clean
/// images, augmentation `augment`) and tests it on the eval-test split.
pub fn evaluate_genotype(genotype: &Genotype, cfg: &EvalConfig, data: &SearchData, augment: Augment) -> Result<EvalReport> {
    cfg.validate()?;
    let ds = &data.dataset;
    let mut net_cfg = NetworkConfig::new(genotype.space, cfg.c_init, cfg.layers, ds.h, ds.w);
    net_cfg.in_channels = ds.c;
    net_cfg.affine = true;
    genotype.validate(net_cfg.nodes, &net_cfg.ops)?;
    if data.plan.eval_train.len() < cfg.batch_size && cfg.epochs > 0 {
        return Err(Error::config("eval.batch_size", "larger than the eval-train split"));
    }
    let mut store = ParamStore::new();
    let mut init = Init::new(&mut store, derive_seed(cfg.seed, 0, Purpose::Init));
    let network = Network::discrete(&mut init, &net_cfg, genotype)?;
    let head = ClassifierHead::new(&mut init, "head.cls", network.out_channels(), ds.num_classes);
    let ids = store.weight_ids();
    let mut opt = Sgd::new(store.numel(&ids), cfg.momentum, cfg.weight_decay);

    let train = Loader {
        ds,
        norm: &data.norm,
        indices: &data.plan.eval_train,
        tag: SplitTag::EvalTrain,
        batch_size: cfg.batch_size,
        augment: Some(augment),
        drop_last: true,
    };
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for e in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr, cfg.lr_min, e, cfg.epochs);
        let (mut loss_sum, mut correct, mut seen, mut batches) = (0.0, 0usize, 0usize, 0usize);
        let batches_iter = train.epoch(
            Some(&mut stream(cfg.seed, e as u64, Purpose::EvalOrder)),
            Some(stream(cfg.seed, e as u64, Purpose::TrainAugment)),
        );
        for batch in batches_iter {
            let batch = batch?;
            let (grads, bn) = {
                let mut ctx = Ctx::new(Graph::new(), &store, Mode::Train, true);
                let x = ctx.g.leaf(&batch.images);
                let feat = network.forward(&mut ctx, x, None)?;
                let logits = head.forward(&mut ctx, feat)?;
                let vals = ctx.g.value(logits);
                correct += vals.chunks(ds.num_classes).zip(&batch.labels).filter(|(r, &y)| argmax(r) == y).count();
                seen += batch.labels.len();
                let loss = cross_entropy(&mut ctx.g, logits, &batch.labels)?;
                let lv = ctx.g.value(loss)[0] as f64;
                if !lv.is_finite() {
                    return Err(Error::Abort(format!("non-finite training loss in eval epoch {}", e + 1)));
                }
                loss_sum += lv;
                batches += 1;
                ctx.g.backward(loss)?;
                let grads = ctx.weight_grads();
                let mut flat = Vec::with_capacity(store.numel(&ids));
                for id in &ids {
                    match grads.get(id) {
                        Some(g) => flat.extend_from_slice(g),
                        None => flat.extend(std::iter::repeat_n(0.0, store.get(*id).numel())),
                    }
                }
                let (_, bn) = ctx.into_parts();
                (flat, bn)
            };
            let mut g = grads;
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut g, c);
            }
            let mut w = store.flatten(&ids);
            opt.step(&mut w, &g, lr)?;
            store.unflatten(&ids, &w)?;
            store.apply_bn_updates(&bn);
        }
        epochs.push(EvalEpoch {
            epoch: e + 1,
            lr,
            train_loss: loss_sum / batches.max(1) as f64,
            train_acc: correct as f64 / seen.max(1) as f64,
        });
    }

    let test = Loader {
        ds,
        norm: &data.norm,
        indices: &data.plan.eval_test,
        tag: SplitTag::EvalTest,
        batch_size: cfg.batch_size,
        augment: None,
        drop_last: false,
    };
    let (mut test_correct, mut test_total) = (0usize, 0usize);
    for batch in test.epoch(None, None) {
        let batch = batch?;
        let mut ctx = Ctx::new(Graph::<f32>::new(), &store, Mode::Eval, false);
        let x = ctx.g.leaf(&batch.images);
        let feat = network.forward(&mut ctx, x, None)?;
        let logits = head.forward(&mut ctx, feat)?;
        let vals = ctx.g.value(logits);
        test_correct += vals.chunks(ds.num_classes).zip(&batch.labels).filter(|(r, &y)| argmax(r) == y).count();
        test_total += batch.labels.len();
    }
    Ok(EvalReport {
        genotype: genotype.clone(),
        config: cfg.clone(),
        epochs,
        test_correct,
        test_total,
        accuracy: if test_total == 0 { 0.0 } else { test_correct as f64 / test_total as f64 },
    })
}
