//! Hyperparameters of a search run and of genotype evaluation, with
//! string-keyed setters shared by the config file and command-line flags.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Augment, DataSource, SplitFractions, SyntheticSpec};
use crate::error::{Error, Result};
use crate::losses::{LambdaMode, MseReduction};
use crate::search_space::SpaceKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    First,
    Second,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    Clean,
    Masked,
}

/// Which supervision signals are active and what the encoder sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub cls: bool,
    pub rec: bool,
    pub input: InputMode,
}

impl TaskConfig {
    pub const CLS_ONLY: Self = Self {
        cls: true,
        rec: false,
        input: InputMode::Clean,
    };
    pub const REC_CLEAN: Self = Self {
        cls: false,
        rec: true,
        input: InputMode::Clean,
    };
    pub const FULL: Self = Self {
        cls: true,
        rec: true,
        input: InputMode::Masked,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    pub fractions: SplitFractions,
    pub split_seed: u64,
    pub augment: Augment,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic(SyntheticSpec::default()),
            fractions: SplitFractions::default(),
            split_seed: 0,
            augment: Augment { pad: 4, flip: true },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub space: SpaceKind,
    pub layers: usize,
    pub c_init: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub w_lr: f32,
    pub w_lr_min: f32,
    pub w_momentum: f32,
    pub w_weight_decay: f32,
    pub grad_clip: Option<f32>,
    pub alpha_lr: f32,
    pub alpha_betas: (f32, f32),
    pub alpha_weight_decay: f32,
    pub alpha_init_std: f32,
    pub order: Order,
    /// Virtual step size of the second-order update; `None` uses the current w learning rate.
    pub xi: Option<f32>,
    pub patch_size: usize,
    pub mask_ratio: f64,
    pub lambda: LambdaMode,
    pub mse: MseReduction,
    pub task: TaskConfig,
    /// Apply the reconstruction task (and masking) to the α-step loss as well.
    pub rec_on_val: bool,
    pub decoder_widths: [usize; 3],
    pub seed: u64,
    /// Persist α every this many epochs (the final epoch is always kept).
    pub snapshot_every: usize,
    pub data: DataConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            space: SpaceKind::Darts,
            layers: 3,
            c_init: 16,
            epochs: 30,
            batch_size: 64,
            w_lr: 0.025,
            w_lr_min: 0.001,
            w_momentum: 0.9,
            w_weight_decay: 3e-4,
            grad_clip: None,
            alpha_lr: 3e-4,
            alpha_betas: (0.5, 0.999),
            alpha_weight_decay: 1e-3,
            alpha_init_std: 1e-3,
            order: Order::First,
            xi: None,
            patch_size: 8,
            mask_ratio: 0.6,
            lambda: LambdaMode::Adaptive,
            mse: MseReduction::Mean,
            task: TaskConfig::FULL,
            rec_on_val: true,
            decoder_widths: [128, 64, 32],
            seed: 0,
            snapshot_every: 1,
            data: DataConfig::default(),
        }
    }
}

/// Training of a discrete network from scratch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub layers: usize,
    pub c_init: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub lr_min: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub grad_clip: Option<f32>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            c_init: 16,
            epochs: 30,
            batch_size: 64,
            lr: 0.025,
            lr_min: 0.0,
            momentum: 0.9,
            weight_decay: 3e-4,
            grad_clip: Some(5.0),
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::config(key, format!("expected a boolean, got `{v}`"))),
    }
}

fn parse_opt_f32(key: &str, v: &str, none_word: &str) -> Result<Option<f32>> {
    if v.trim() == none_word {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn parse_task(key: &str, v: &str) -> Result<(bool, bool)> {
    let mut cls = false;
    let mut rec = false;
    for part in v.split(['+', ',']).map(str::trim) {
        match part {
            "cls" => cls = true,
            "rec" | "mim" => rec = true,
            _ => return Err(Error::config(key, format!("unknown task `{part}` (use cls, rec, or cls+rec)"))),
        }
    }
    Ok((cls, rec))
}

impl fmt::Display for Order {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Order::First => "first",
            Order::Second => "second",
        })
    }
}

impl SearchConfig {
    /// Updates one field by key; `data.*` keys address the dataset.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let k = key;
        match key {
            "space" => self.space = v.trim().parse()?,
            "layers" => self.layers = parse(k, v)?,
            "c_init" => self.c_init = parse(k, v)?,
            "epochs" => self.epochs = parse(k, v)?,
            "batch_size" => self.batch_size = parse(k, v)?,
            "w_lr" => self.w_lr = parse(k, v)?,
            "w_lr_min" => self.w_lr_min = parse(k, v)?,
            "w_momentum" => self.w_momentum = parse(k, v)?,
            "w_weight_decay" => self.w_weight_decay = parse(k, v)?,
            "grad_clip" => self.grad_clip = parse_opt_f32(k, v, "none")?,
            "alpha_lr" => self.alpha_lr = parse(k, v)?,
            "alpha_beta1" => self.alpha_betas.0 = parse(k, v)?,
            "alpha_beta2" => self.alpha_betas.1 = parse(k, v)?,
            "alpha_weight_decay" => self.alpha_weight_decay = parse(k, v)?,
            "alpha_init_std" => self.alpha_init_std = parse(k, v)?,
            "order" => {
                self.order = match v.trim() {
                    "first" | "1" => Order::First,
                    "second" | "2" => Order::Second,
                    _ => return Err(Error::config(k, format!("expected first or second, got `{v}`"))),
                }
            }
            "xi" => self.xi = parse_opt_f32(k, v, "auto")?,
            "patch_size" => self.patch_size = parse(k, v)?,
            "mask_ratio" => self.mask_ratio = parse(k, v)?,
            "lambda" => self.lambda = v.trim().parse()?,
            "mse" => self.mse = v.trim().parse()?,
            "task" => (self.task.cls, self.task.rec) = parse_task(k, v)?,
            "input" => {
                self.task.input = match v.trim() {
                    "clean" => InputMode::Clean,
                    "masked" | "mask" => InputMode::Masked,
                    _ => return Err(Error::config(k, format!("expected clean or masked, got `{v}`"))),
                }
            }
            "rec_on_val" => self.rec_on_val = parse_bool(k, v)?,
            "decoder_widths" => {
                let w: Vec<usize> = v.split(',').map(|x| parse(k, x)).collect::<Result<_>>()?;
                self.decoder_widths = w
                    .try_into()
                    .map_err(|_| Error::config(k, "expected three comma-separated widths"))?;
            }
            "seed" => self.seed = parse(k, v)?,
            "snapshot_every" => self.snapshot_every = parse(k, v)?,
            _ => match key.strip_prefix("data.") {
                Some(rest) => self.data.set(rest, v)?,
                None => return Err(Error::config(key, "unknown key")),
            },
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: &str| Err(Error::config(k, m));
        if !self.task.cls && !self.task.rec {
            return bad("task", "at least one of cls and rec must be enabled");
        }
        if !self.task.cls && !self.rec_on_val {
            return bad("rec_on_val", "a reconstruction-only search needs the reconstruction loss on validation");
        }
        if self.layers < 2 {
            return bad("layers", "need at least 2 cells");
        }
        if self.c_init == 0 || !self.c_init.is_multiple_of(2) {
            return bad("c_init", "must be a positive even number");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return bad("mask_ratio", "must lie in [0, 1]");
        }
        if self.patch_size == 0 {
            return bad("patch_size", "must be positive");
        }
        if self.snapshot_every == 0 {
            return bad("snapshot_every", "must be positive");
        }
        if let Some(xi) = self.xi {
            if xi < 0.0 {
                return bad("xi", "must be non-negative");
            }
        }
        for (k, v) in [
            ("w_lr", self.w_lr),
            ("w_lr_min", self.w_lr_min),
            ("alpha_lr", self.alpha_lr),
            ("w_weight_decay", self.w_weight_decay),
            ("alpha_weight_decay", self.alpha_weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(k, "must be finite and non-negative");
            }
        }
        if self.decoder_widths.contains(&0) {
            return bad("decoder_widths", "widths must be positive");
        }
        self.data.validate()
    }
}

fn synth<'a>(src: &'a mut DataSource, key: &str) -> Result<&'a mut SyntheticSpec> {
    match src {
        DataSource::Synthetic(s) => Ok(s),
        DataSource::Cifar { .. } => Err(Error::config(key, "only applies to the synthetic dataset")),
    }
}

impl DataConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let k = format!("data.{key}");
        match key {
            // Selecting the current kind keeps its settings.
            "dataset" => match (v.trim(), &self.source) {
                ("synthetic", DataSource::Synthetic(_)) | ("cifar", DataSource::Cifar { .. }) => {}
                ("synthetic", _) => self.source = DataSource::Synthetic(SyntheticSpec::default()),
                ("cifar", _) => self.source = DataSource::Cifar { path: PathBuf::from("cifar") },
                _ => return Err(Error::config(&k, format!("expected synthetic or cifar, got `{v}`"))),
            },
            "path" => match &mut self.source {
                DataSource::Cifar { path } => *path = PathBuf::from(v.trim()),
                DataSource::Synthetic(_) => return Err(Error::config(&k, "only applies to the cifar dataset")),
            },
            "classes" => synth(&mut self.source, &k)?.classes = parse(&k, v)?,
            "n" => synth(&mut self.source, &k)?.n = parse(&k, v)?,
            "image_size" => {
                let s = synth(&mut self.source, &k)?;
                s.height = parse(&k, v)?;
                s.width = s.height;
            }
            "noise" => synth(&mut self.source, &k)?.noise = parse(&k, v)?,
            "separation" => synth(&mut self.source, &k)?.separation = parse(&k, v)?,
            "seed" => synth(&mut self.source, &k)?.seed = parse(&k, v)?,
            "split_seed" => self.split_seed = parse(&k, v)?,
            "search_train" => self.fractions.search_train = parse(&k, v)?,
            "search_val" => self.fractions.search_val = parse(&k, v)?,
            "eval_train" => self.fractions.eval_train = parse(&k, v)?,
            "eval_test" => self.fractions.eval_test = parse(&k, v)?,
            "augment_pad" => self.augment.pad = parse(&k, v)?,
            "augment_flip" => self.augment.flip = parse_bool(&k, v)?,
            _ => return Err(Error::config(k, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.fractions;
        let parts = [f.search_train, f.search_val, f.eval_train, f.eval_test];
        if parts.iter().any(|x| !(0.0..=1.0).contains(x)) || parts.iter().sum::<f64>() > 1.0 + 1e-9 {
            return Err(Error::config("data.fractions", "fractions must lie in [0, 1] and sum to at most 1"));
        }
        Ok(())
    }
}

impl EvalConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let k = format!("eval.{key}");
        match key {
            "layers" => self.layers = parse(&k, v)?,
            "c_init" => self.c_init = parse(&k, v)?,
            "epochs" => self.epochs = parse(&k, v)?,
            "batch_size" => self.batch_size = parse(&k, v)?,
            "lr" => self.lr = parse(&k, v)?,
            "lr_min" => self.lr_min = parse(&k, v)?,
            "momentum" => self.momentum = parse(&k, v)?,
            "weight_decay" => self.weight_decay = parse(&k, v)?,
            "grad_clip" => self.grad_clip = parse_opt_f32(&k, v, "none")?,
            "seed" => self.seed = parse(&k, v)?,
            _ => return Err(Error::config(k, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            return Err(Error::config("eval.layers", "need at least 2 cells"));
        }
        if self.c_init == 0 || !self.c_init.is_multiple_of(2) {
            return Err(Error::config("eval.c_init", "must be a positive even number"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("eval.batch_size", "must be positive"));
        }
        Ok(())
    }
}
