//! Image datasets, standardisation, splits, augmentation and batching.
//!
//! Datasets hold raw pixels in `[0, 1]`. Batches are augmented in raw space
//! (zero-padded random crop, horizontal flip) and then standardised with
//! per-channel statistics fitted on the training pools.

mod cifar;
mod synthetic;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use cifar::{load_cifar_binary, parse_cifar_binary, write_cifar_binary, DatasetMeta, LAYOUT};
pub use synthetic::{make_synthetic, SyntheticSpec, MAX_CLASSES};

#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub num_classes: usize,
    /// `[n, C, H, W]` raw values.
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
}

impl ImageDataset {
    pub fn new(c: usize, h: usize, w: usize, num_classes: usize, images: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() * c * h * w {
            return Err(Error::dim(format!(
                "{} values for {} images of {c}x{h}x{w}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::contract(format!("label {bad} >= num_classes {num_classes}")));
        }
        Ok(Self {
            c,
            h,
            w,
            num_classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * self.image_len()..(i + 1) * self.image_len()]
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().flat_map(|&i| self.image(i).iter().copied()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ..*self
        }
    }

    /// Appends another dataset of the same geometry.
    pub fn extend(&mut self, other: &ImageDataset) -> Result<()> {
        if (other.c, other.h, other.w, other.num_classes) != (self.c, self.h, self.w, self.num_classes) {
            return Err(Error::dim("cannot concatenate datasets of different geometry"));
        }
        self.images.extend_from_slice(&other.images);
        self.labels.extend_from_slice(&other.labels);
        Ok(())
    }
}

/// Per-channel standardisation `(x - mean) / std` plus the range of
/// standardised training values, which bounds reconstructions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub lo: Vec<f32>,
    pub hi: Vec<f32>,
}

impl Normalization {
    pub fn fit(ds: &ImageDataset, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::contract("cannot fit normalisation on no images"));
        }
        let plane = ds.h * ds.w;
        let (mut mean, mut std, mut lo, mut hi) = (vec![], vec![], vec![], vec![]);
        for ch in 0..ds.c {
            let vals = || indices.iter().flat_map(|&i| ds.image(i)[ch * plane..(ch + 1) * plane].iter().map(|&v| v as f64));
            let n = (indices.len() * plane) as f64;
            let m = vals().sum::<f64>() / n;
            let var = vals().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let s = var.sqrt().max(1e-6);
            let (mn, mx) = vals().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            mean.push(m as f32);
            std.push(s as f32);
            lo.push(((mn - m) / s) as f32);
            // Keep a non-empty interval for constant channels.
            hi.push((((mx - m) / s) as f32).max(((mn - m) / s) as f32 + 1e-3));
        }
        Ok(Self { mean, std, lo, hi })
    }

    /// Identity transform with a `[0, 1]` range.
    pub fn identity(c: usize) -> Self {
        Self {
            mean: vec![0.0; c],
            std: vec![1.0; c],
            lo: vec![0.0; c],
            hi: vec![1.0; c],
        }
    }

    pub fn standardize(&self, image: &mut [f32]) {
        let plane = image.len() / self.mean.len();
        for (ch, px) in image.chunks_mut(plane).enumerate() {
            px.iter_mut().for_each(|v| *v = (*v - self.mean[ch]) / self.std[ch]);
        }
    }

    pub fn destandardize(&self, image: &mut [f32]) {
        let plane = image.len() / self.mean.len();
        for (ch, px) in image.chunks_mut(plane).enumerate() {
            px.iter_mut().for_each(|v| *v = *v * self.std[ch] + self.mean[ch]);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub search_train: f64,
    pub search_val: f64,
    pub eval_train: f64,
    pub eval_test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            search_train: 0.25,
            search_val: 0.25,
            eval_train: 0.3,
            eval_test: 0.2,
        }
    }
}

/// Disjoint index sets over one dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub search_train: Vec<usize>,
    pub search_val: Vec<usize>,
    pub eval_train: Vec<usize>,
    pub eval_test: Vec<usize>,
    pub seed: u64,
}

impl SplitPlan {
    /// Shuffles `0..n` with `seed` and cuts it by `fractions`.
    pub fn new(n: usize, fractions: SplitFractions, seed: u64) -> Result<Self> {
        let f = [fractions.search_train, fractions.search_val, fractions.eval_train, fractions.eval_test];
        if f.iter().any(|&x| !(0.0..=1.0).contains(&x)) || f.iter().sum::<f64>() > 1.0 + 1e-9 {
            return Err(Error::config("split", "fractions must be in [0, 1] and sum to at most 1"));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut crate::rng::stream(seed, 0, crate::rng::Purpose::Split));
        let mut parts = Vec::new();
        let mut start = 0;
        for x in f {
            let len = ((x * n as f64 + 1e-9).floor() as usize).min(n - start);
            parts.push(order[start..start + len].to_vec());
            start += len;
        }
        let plan = Self {
            eval_test: parts.pop().unwrap_or_default(),
            eval_train: parts.pop().unwrap_or_default(),
            search_val: parts.pop().unwrap_or_default(),
            search_train: parts.pop().unwrap_or_default(),
            seed,
        };
        plan.validate(n)?;
        Ok(plan)
    }

    pub fn parts(&self) -> [&[usize]; 4] {
        [&self.search_train, &self.search_val, &self.eval_train, &self.eval_test]
    }

    /// Indices in range and no index in two parts.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for part in self.parts() {
            for &i in part {
                if i >= n {
                    return Err(Error::contract(format!("split index {i} out of range for {n} samples")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::contract(format!("sample {i} appears in more than one split")));
                }
            }
        }
        Ok(())
    }

    /// Indices used to fit normalisation: everything except the test part.
    pub fn training_pool(&self) -> Vec<usize> {
        [&self.search_train[..], &self.search_val, &self.eval_train].concat()
    }
}

/// `(search_train, search_val, eval_train, eval_test)`.
pub fn split(ds: &ImageDataset, plan: &SplitPlan) -> Result<(ImageDataset, ImageDataset, ImageDataset, ImageDataset)> {
    plan.validate(ds.len())?;
    Ok((
        ds.subset(&plan.search_train),
        ds.subset(&plan.search_val),
        ds.subset(&plan.eval_train),
        ds.subset(&plan.eval_test),
    ))
}

/// Provenance of a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    SearchTrain,
    SearchVal,
    EvalTrain,
    EvalTest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augment {
    /// Zero padding before the random crop; 0 disables cropping.
    pub pad: usize,
    pub flip: bool,
}

impl Augment {
    pub fn apply(&self, img: &mut [f32], c: usize, h: usize, w: usize, rng: &mut impl Rng) {
        let (dy, dx) = if self.pad > 0 {
            (rng.gen_range(0..=2 * self.pad), rng.gen_range(0..=2 * self.pad))
        } else {
            (self.pad, self.pad)
        };
        let flip = self.flip && rng.gen_bool(0.5);
        if dy == self.pad && dx == self.pad && !flip {
            return;
        }
        let src = img.to_vec();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    // Output (y, x) reads padded (y + dy, x' + dx), x' mirrored when flipping.
                    let xs = if flip { w - 1 - x } else { x };
                    let (py, px) = ((y + dy) as isize - self.pad as isize, (xs + dx) as isize - self.pad as isize);
                    img[(ch * h + y) * w + x] = if py >= 0 && px >= 0 && (py as usize) < h && (px as usize) < w {
                        src[(ch * h + py as usize) * w + px as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    /// Standardised `[B, C, H, W]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub tag: SplitTag,
    /// Dataset indices of the samples.
    pub indices: Vec<usize>,
}

/// Builds batches from a fixed index set.
#[derive(Clone, Debug)]
pub struct Loader<'a> {
    pub ds: &'a ImageDataset,
    pub norm: &'a Normalization,
    pub indices: &'a [usize],
    pub tag: SplitTag,
    pub batch_size: usize,
    pub augment: Option<Augment>,
    pub drop_last: bool,
}

impl<'a> Loader<'a> {
    pub fn num_batches(&self) -> usize {
        if self.drop_last {
            self.indices.len() / self.batch_size
        } else {
            self.indices.len().div_ceil(self.batch_size)
        }
    }

    /// One pass; shuffled when `order` is given, augmented with `aug`.
    pub fn epoch(&self, order: Option<&mut ChaCha8Rng>, aug: Option<ChaCha8Rng>) -> BatchIter<'a> {
        let mut idx = self.indices.to_vec();
        if let Some(r) = order {
            idx.shuffle(r);
        }
        BatchIter {
            loader: self.clone(),
            order: idx,
            pos: 0,
            aug,
        }
    }

    pub fn make_batch(&self, indices: &[usize], aug: Option<&mut ChaCha8Rng>) -> Result<Batch> {
        let ds = self.ds;
        let per = ds.image_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut aug = aug;
        for &i in indices {
            let mut img = ds.image(i).to_vec();
            if let (Some(a), Some(r)) = (self.augment, aug.as_deref_mut()) {
                a.apply(&mut img, ds.c, ds.h, ds.w, r);
            }
            self.norm.standardize(&mut img);
            data.extend_from_slice(&img);
        }
        Ok(Batch {
            images: Tensor::new(vec![indices.len(), ds.c, ds.h, ds.w], data)?,
            labels: indices.iter().map(|&i| ds.labels[i]).collect(),
            tag: self.tag,
            indices: indices.to_vec(),
        })
    }
}

pub struct BatchIter<'a> {
    loader: Loader<'a>,
    order: Vec<usize>,
    pos: usize,
    aug: Option<ChaCha8Rng>,
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        let bs = self.loader.batch_size;
        let remaining = self.order.len() - self.pos;
        if remaining == 0 || (self.loader.drop_last && remaining < bs) {
            return None;
        }
        let end = (self.pos + bs).min(self.order.len());
        let idx = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(self.loader.make_batch(&idx, self.aug.as_mut()))
    }
}

/// Where images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// One binary file or a directory of `*.bin` files, with a `meta.txt`
    /// sidecar (or `<file>.meta`); CIFAR-10 geometry when absent.
    Cifar { path: PathBuf },
}

pub fn load_source(src: &DataSource) -> Result<ImageDataset> {
    match src {
        DataSource::Synthetic(spec) => make_synthetic(spec),
        DataSource::Cifar { path } => load_cifar_path(path),
    }
}

fn load_cifar_path(path: &Path) -> Result<ImageDataset> {
    let (files, meta_path) = if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "bin"))
            .collect();
        files.sort();
        (files, path.join("meta.txt"))
    } else if path.exists() {
        (vec![path.to_path_buf()], path.with_extension("meta"))
    } else {
        return Err(Error::Missing(path.to_path_buf()));
    };
    if files.is_empty() {
        return Err(Error::Missing(path.join("*.bin")));
    }
    let meta = if meta_path.exists() {
        DatasetMeta::load(&meta_path)?
    } else {
        DatasetMeta::default()
    };
    let mut ds = load_cifar_binary(&files[0], &meta)?;
    for f in &files[1..] {
        ds.extend(&load_cifar_binary(f, &meta)?)?;
    }
    Ok(ds)
}
