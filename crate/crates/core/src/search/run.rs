//! The search loop: alternating architecture and weight steps, per-epoch
//! metrics, α snapshots and resumable state.
//!
//! Random draws come from streams keyed by `(seed, epoch, purpose)`, so a
//! [`SearchState`] saved at an epoch boundary holds everything needed to
//! continue the exact trajectory.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bilevel::{first_order, second_order, Eval, Objective, Split};
use super::config::{Order, SearchConfig};
use super::model::{LossEval, Prepared, SearchModel};
use crate::data::{load_source, ImageDataset, Loader, Normalization, SplitPlan, SplitTag};
use crate::error::{Error, Result};
use crate::losses::JointLossReport;
use crate::nn::{ParamId, ParamStore};
use crate::optim::{clip_grad_norm, cosine_lr, Adam, Sgd};
use crate::rng::{derive_seed, stream, Purpose};
use crate::search::config::DataConfig;
use crate::search_space::{alpha_std_total, discretize, skip_fraction, Alpha, Genotype, NetworkConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Dataset, split and normalisation shared by search and evaluation.
#[derive(Clone, Debug)]
pub struct SearchData {
    pub dataset: ImageDataset,
    pub plan: SplitPlan,
    pub norm: Normalization,
}

impl SearchData {
    pub fn prepare(cfg: &DataConfig) -> Result<Self> {
        cfg.validate()?;
        let dataset = load_source(&cfg.source)?;
        let plan = SplitPlan::new(dataset.len(), cfg.fractions, cfg.split_seed)?;
        let norm = Normalization::fit(&dataset, &plan.training_pool())?;
        Ok(Self { dataset, plan, norm })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Alpha,
    W,
}

/// Loss report of one optimisation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub epoch: usize,
    pub step: usize,
    pub phase: Phase,
    pub tag: SplitTag,
    pub report: JointLossReport,
}

/// Per-epoch metrics. Loss columns average the weight steps of the epoch;
/// `val_acc` is the classification accuracy on the α-step batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_cls: f64,
    pub l_mse: f64,
    pub lambda: f64,
    pub total: f64,
    pub epsilon_guard_triggered: bool,
    pub skip_fraction: f64,
    pub alpha_std_total: f64,
    pub val_acc: Option<f64>,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaSnapshot {
    /// Completed epochs when taken; 0 is the initial α.
    pub epoch: usize,
    pub alpha: Alpha,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub config: SearchConfig,
    pub epochs: Vec<EpochMetrics>,
    pub steps: Vec<StepRow>,
    pub alpha_snapshots: Vec<AlphaSnapshot>,
    pub genotype: Genotype,
    pub abort: Option<String>,
}

/// Everything needed to continue a search at an epoch boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchState {
    pub schema_version: u32,
    pub config: SearchConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub store: ParamStore,
    pub alpha: Alpha,
    pub w_opt: Sgd,
    pub a_opt: Adam,
    pub epochs: Vec<EpochMetrics>,
    pub steps: Vec<StepRow>,
    pub alpha_snapshots: Vec<AlphaSnapshot>,
    pub abort: Option<String>,
}

impl SearchState {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let state: Self = serde_json::from_str(s)?;
        if state.schema_version != SCHEMA_VERSION {
            return Err(Error::Parse {
                offset: 0,
                message: format!("checkpoint schema {} is not {SCHEMA_VERSION}", state.schema_version),
            });
        }
        Ok(state)
    }
}

pub struct Search<'d> {
    data: &'d SearchData,
    model: SearchModel,
    weight_ids: Vec<ParamId>,
    pub state: SearchState,
}

fn network_config(cfg: &SearchConfig, ds: &ImageDataset) -> NetworkConfig {
    let mut n = NetworkConfig::new(cfg.space, cfg.c_init, cfg.layers, ds.h, ds.w);
    n.in_channels = ds.c;
    n
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl<'d> Search<'d> {
    pub fn new(cfg: &SearchConfig, data: &'d SearchData) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let model = Self::build_model(cfg, data, &mut store)?;
        let net = network_config(cfg, &data.dataset);
        let with_reduce = net.space == crate::search_space::SpaceKind::Darts;
        let alpha = Alpha::init(
            net.topology().num_edges(),
            net.ops.len(),
            with_reduce,
            cfg.alpha_init_std,
            &mut stream(cfg.seed, 0, Purpose::Alpha),
        );
        let weight_ids = store.weight_ids();
        let n_w = store.numel(&weight_ids);
        let n_a = alpha.flatten().len();
        let state = SearchState {
            schema_version: SCHEMA_VERSION,
            config: cfg.clone(),
            epoch: 0,
            w_opt: Sgd::new(n_w, cfg.w_momentum, cfg.w_weight_decay),
            a_opt: Adam::new(n_a, cfg.alpha_lr, cfg.alpha_betas, cfg.alpha_weight_decay),
            alpha: alpha.clone(),
            store,
            epochs: Vec::new(),
            steps: Vec::new(),
            alpha_snapshots: vec![AlphaSnapshot { epoch: 0, alpha }],
            abort: None,
        };
        Ok(Self {
            data,
            model,
            weight_ids,
            state,
        })
    }

    /// Continues from a saved state; the parameter layout must match.
    pub fn resume(mut state: SearchState, data: &'d SearchData) -> Result<Self> {
        state.config.validate()?;
        let before = state.store.len();
        let model = Self::build_model(&state.config.clone(), data, &mut state.store)?;
        if state.store.len() != before {
            return Err(Error::contract("checkpoint parameters do not match the configured network"));
        }
        let weight_ids = state.store.weight_ids();
        Ok(Self {
            data,
            model,
            weight_ids,
            state,
        })
    }

    fn build_model(cfg: &SearchConfig, data: &SearchData, store: &mut ParamStore) -> Result<SearchModel> {
        let ds = &data.dataset;
        network_config(cfg, ds).validate()?;
        SearchModel::new(store, cfg, ds.c, ds.h, ds.w, ds.num_classes, &data.norm, derive_seed(cfg.seed, 0, Purpose::Init))
    }

    pub fn model(&self) -> &SearchModel {
        &self.model
    }

    pub fn config(&self) -> &SearchConfig {
        &self.state.config
    }

    pub fn finished(&self) -> bool {
        self.state.epoch >= self.state.config.epochs || self.state.abort.is_some()
    }

    pub fn genotype(&self) -> Genotype {
        let net = self.model.network.config();
        discretize(&self.state.alpha, net.space, net.nodes, &net.ops)
    }

    pub fn record(&self) -> RunRecord {
        RunRecord {
            schema_version: SCHEMA_VERSION,
            config: self.state.config.clone(),
            epochs: self.state.epochs.clone(),
            steps: self.state.steps.clone(),
            alpha_snapshots: self.state.alpha_snapshots.clone(),
            genotype: self.genotype(),
            abort: self.state.abort.clone(),
        }
    }

    fn loader(&self, tag: SplitTag) -> Loader<'d> {
        let cfg = &self.state.config;
        let indices = match tag {
            SplitTag::SearchTrain => &self.data.plan.search_train,
            _ => &self.data.plan.search_val,
        };
        Loader {
            ds: &self.data.dataset,
            norm: &self.data.norm,
            indices,
            tag,
            batch_size: cfg.batch_size,
            augment: Some(cfg.data.augment),
            drop_last: true,
        }
    }

    /// The `index`-th batch of a search split in stored order, without
    /// augmentation, masked with a generator seeded by `mask_seed`.
    pub fn fixed_batch(&self, tag: SplitTag, index: usize, mask_seed: u64) -> Result<Prepared> {
        let cfg = &self.state.config;
        let loader = self.loader(tag);
        let start = index * cfg.batch_size;
        let ids = loader
            .indices
            .get(start..start + cfg.batch_size)
            .ok_or_else(|| Error::config("batch_size", "batch index beyond the split"))?;
        let batch = loader.make_batch(ids, None)?;
        let rec = cfg.task.rec && (tag == SplitTag::SearchTrain || cfg.rec_on_val);
        self.model.prepare(cfg, batch, rec, &mut ChaCha8Rng::seed_from_u64(mask_seed))
    }

    /// Iterations per epoch: the shorter of the two search loaders.
    pub fn iterations(&self) -> usize {
        self.loader(SplitTag::SearchTrain)
            .num_batches()
            .min(self.loader(SplitTag::SearchVal).num_batches())
    }

    /// Runs one epoch. On error the state is left at the previous epoch
    /// boundary and the reason is recorded in `state.abort`.
    pub fn run_epoch(&mut self) -> Result<()> {
        if self.finished() {
            return Ok(());
        }
        let mut next = self.state.clone();
        match self.epoch_into(&mut next) {
            Ok(()) => {
                self.state = next;
                Ok(())
            }
            Err(e) => {
                self.state.abort = Some(e.to_string());
                Err(e)
            }
        }
    }

    fn epoch_into(&self, st: &mut SearchState) -> Result<()> {
        let start = Instant::now();
        let cfg = &st.config.clone();
        let (seed, e) = (cfg.seed, st.epoch as u64);
        let lr = cosine_lr(cfg.w_lr, cfg.w_lr_min, st.epoch, cfg.epochs);
        let xi = cfg.xi.unwrap_or(lr);
        let iters = self.iterations();
        if iters == 0 {
            return Err(Error::config("batch_size", "larger than a search split"));
        }
        let train_loader = self.loader(SplitTag::SearchTrain);
        let val_loader = self.loader(SplitTag::SearchVal);
        let mut train = train_loader.epoch(Some(&mut stream(seed, e, Purpose::TrainOrder)), Some(stream(seed, e, Purpose::TrainAugment)));
        let mut val = val_loader.epoch(Some(&mut stream(seed, e, Purpose::ValOrder)), Some(stream(seed, e, Purpose::ValAugment)));
        let mut train_mask = stream(seed, e, Purpose::TrainMask);
        let mut val_mask = stream(seed, e, Purpose::ValMask);
        let rec_val = cfg.task.rec && cfg.rec_on_val;

        let mut w_reports = Vec::with_capacity(iters);
        let (mut correct, mut seen) = (0usize, 0usize);
        for it in 0..iters {
            let (Some(tb), Some(vb)) = (train.next(), val.next()) else {
                return Err(Error::contract("loader ended early"));
            };
            let pt = self.model.prepare(cfg, tb?, cfg.task.rec, &mut train_mask)?;
            let pv = self.model.prepare(cfg, vb?, rec_val, &mut val_mask)?;

            let (report, c) = self.alpha_step_into(st, &pt, &pv, xi)?;
            if let Some(c) = c {
                correct += c;
                seen += pv.labels.len();
            }
            st.steps.push(StepRow {
                epoch: st.epoch + 1,
                step: it,
                phase: Phase::Alpha,
                tag: pv.tag,
                report,
            });

            let report = self.w_step_into(st, &pt, lr)?;
            st.steps.push(StepRow {
                epoch: st.epoch + 1,
                step: it,
                phase: Phase::W,
                tag: pt.tag,
                report,
            });
            w_reports.push(report);
        }

        st.epoch += 1;
        let net = self.model.network.config();
        let genotype = discretize(&st.alpha, net.space, net.nodes, &net.ops);
        st.epochs.push(EpochMetrics {
            epoch: st.epoch,
            l_cls: mean(w_reports.iter().map(|r| r.l_cls)),
            l_mse: mean(w_reports.iter().map(|r| r.l_mse)),
            lambda: mean(w_reports.iter().map(|r| r.lambda)),
            total: mean(w_reports.iter().map(|r| r.total)),
            epsilon_guard_triggered: w_reports.iter().any(|r| r.epsilon_guard_triggered),
            skip_fraction: skip_fraction(&genotype, false),
            alpha_std_total: alpha_std_total(&st.alpha.normal),
            val_acc: (seen > 0).then(|| correct as f64 / seen as f64),
            wall_clock_s: start.elapsed().as_secs_f64(),
        });
        if st.epoch.is_multiple_of(st.config.snapshot_every) || st.epoch == st.config.epochs {
            st.alpha_snapshots.push(AlphaSnapshot {
                epoch: st.epoch,
                alpha: st.alpha.clone(),
            });
        }
        Ok(())
    }

    /// One α update on the validation batch `pv` (`pt` feeds the
    /// second-order virtual step); weights are left untouched.
    pub fn alpha_step(&mut self, pt: &Prepared, pv: &Prepared, xi: f32) -> Result<JointLossReport> {
        let mut st = self.state.clone();
        let (report, _) = self.alpha_step_into(&mut st, pt, pv, xi)?;
        self.state = st;
        Ok(report)
    }

    /// One weight update on the training batch at learning rate `lr`; α is
    /// left untouched.
    pub fn w_step(&mut self, pt: &Prepared, lr: f32) -> Result<JointLossReport> {
        let mut st = self.state.clone();
        let report = self.w_step_into(&mut st, pt, lr)?;
        self.state = st;
        Ok(report)
    }

    fn alpha_step_into(&self, st: &mut SearchState, pt: &Prepared, pv: &Prepared, xi: f32) -> Result<(JointLossReport, Option<usize>)> {
        let (grad, report, correct) = self.alpha_gradient_at(st, pt, pv, xi)?;
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::Abort("non-finite architecture gradient".into()));
        }
        let mut a = st.alpha.flatten();
        st.a_opt.step(&mut a, &grad)?;
        st.alpha.unflatten(&a)?;
        Ok((report, correct))
    }

    fn alpha_gradient_at(&self, st: &SearchState, pt: &Prepared, pv: &Prepared, xi: f32) -> Result<(Vec<f32>, JointLossReport, Option<usize>)> {
        check_tag(pt, SplitTag::SearchTrain)?;
        check_tag(pv, SplitTag::SearchVal)?;
        let mut obj = SupernetObjective {
            model: &self.model,
            cfg: &st.config,
            ids: &self.weight_ids,
            scratch: st.store.clone(),
            alpha: st.alpha.clone(),
            train: pt,
            val: pv,
            last_val: None,
        };
        let (w, a) = (st.store.flatten(&self.weight_ids), st.alpha.flatten());
        let grad = match st.config.order {
            Order::First => first_order(&mut obj, &w, &a)?,
            Order::Second => second_order(&mut obj, &w, &a, xi)?.grad,
        };
        let (report, correct) = obj.last_val.take().ok_or_else(|| Error::contract("no validation evaluation"))?;
        Ok((grad, report, correct))
    }

    /// The α gradient an update at the current state would use.
    pub fn alpha_gradient(&self, pt: &Prepared, pv: &Prepared, xi: f32) -> Result<Vec<f32>> {
        Ok(self.alpha_gradient_at(&self.state, pt, pv, xi)?.0)
    }

    fn w_step_into(&self, st: &mut SearchState, pt: &Prepared, lr: f32) -> Result<JointLossReport> {
        check_tag(pt, SplitTag::SearchTrain)?;
        let cfg = &st.config;
        let LossEval {
            report, w_grads, bn_updates, ..
        } = self.model.evaluate(&st.store, &st.alpha, pt, cfg, true, false)?;
        let mut g = w_grads.unwrap_or_default();
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::Abort("non-finite weight gradient".into()));
        }
        if let Some(c) = cfg.grad_clip {
            clip_grad_norm(&mut g, c);
        }
        let mut w = st.store.flatten(&self.weight_ids);
        st.w_opt.step(&mut w, &g, lr)?;
        st.store.unflatten(&self.weight_ids, &w)?;
        st.store.apply_bn_updates(&bn_updates);
        Ok(report)
    }
}

fn check_tag(p: &Prepared, want: SplitTag) -> Result<()> {
    if p.tag != want {
        return Err(Error::contract(format!("batch from {:?} where {want:?} is required", p.tag)));
    }
    Ok(())
}

/// The supernet loss as a function of flat weights and α.
struct SupernetObjective<'a> {
    model: &'a SearchModel,
    cfg: &'a SearchConfig,
    ids: &'a [ParamId],
    scratch: ParamStore,
    alpha: Alpha,
    train: &'a Prepared,
    val: &'a Prepared,
    last_val: Option<(JointLossReport, Option<usize>)>,
}

impl Objective for SupernetObjective<'_> {
    fn eval(&mut self, split: Split, w: &[f32], alpha: &[f32], want_w: bool, want_alpha: bool) -> Result<Eval> {
        self.scratch.unflatten(self.ids, w)?;
        self.alpha.unflatten(alpha)?;
        let p = match split {
            Split::Train => self.train,
            Split::Val => self.val,
        };
        let r = self.model.evaluate(&self.scratch, &self.alpha, p, self.cfg, want_w, want_alpha)?;
        if split == Split::Val {
            self.last_val = Some((r.report, r.correct));
        }
        Ok(Eval {
            loss: r.report.total,
            w: r.w_grads,
            alpha: r.alpha_grads,
        })
    }
}

/// Runs a search to completion. `on_epoch` sees the state after every
/// completed epoch (for checkpoints and live metrics). An abort is recorded
/// in the returned record rather than returned as an error.
pub fn run_search(cfg: &SearchConfig, data: &SearchData, on_epoch: impl FnMut(&Search) -> Result<()>) -> Result<RunRecord> {
    drive(Search::new(cfg, data)?, on_epoch)
}

/// Like [`run_search`], continuing from a checkpoint.
pub fn resume_search(state: SearchState, data: &SearchData, on_epoch: impl FnMut(&Search) -> Result<()>) -> Result<RunRecord> {
    drive(Search::resume(state, data)?, on_epoch)
}

/// Runs `search` to completion; see [`run_search`].
pub fn drive(mut search: Search, mut on_epoch: impl FnMut(&Search) -> Result<()>) -> Result<RunRecord> {
    while !search.finished() {
        match search.run_epoch() {
            Ok(()) => on_epoch(&search)?,
            Err(Error::Abort(_)) => break,
            Err(e) => return Err(e),
        }
    }
    Ok(search.record())
}
