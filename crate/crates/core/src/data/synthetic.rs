//! Class-conditional structured images for fast deterministic runs.
//!
//! Each class is a spatial pattern family (stripes of two orientations and
//! two frequencies, checkerboard, rings, blob, diagonal cross, plus, dot
//! grid). Every family is closed under horizontal flips, so flip
//! augmentation never changes a label. Per sample the phase, centre, scale,
//! foreground colour and background level are random; Gaussian pixel noise
//! is added last. `separation` adds a class-dependent brightness offset.

use std::f32::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ImageDataset;
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

pub const MAX_CLASSES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Standard deviation of additive pixel noise.
    pub noise: f32,
    /// Brightness offset spread across classes, 0 = none.
    pub separation: f32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            n: 4000,
            height: 32,
            width: 32,
            seed: 0,
            noise: 0.1,
            separation: 0.0,
        }
    }
}

struct Sample {
    cx: f32,
    cy: f32,
    phase: f32,
    phase2: f32,
    scale: f32,
}

/// Pattern intensity in `[0, 1]` at normalised coordinates `(u, v)`.
fn pattern(class: usize, u: f32, v: f32, s: &Sample) -> f32 {
    let (du, dv) = (u - s.cx, v - s.cy);
    let wave = |f: f32, t: f32, ph: f32| 0.5 + 0.5 * (2.0 * PI * f * s.scale * t + ph).sin();
    let bump = |d: f32, w: f32| (-(d * d) / (2.0 * w * w)).exp();
    match class {
        0 => wave(2.0, v, s.phase),
        1 => wave(4.0, v, s.phase),
        2 => wave(2.0, u, s.phase),
        3 => wave(4.0, u, s.phase),
        4 => {
            let a = (2.0 * PI * 2.0 * s.scale * u + s.phase).sin();
            let b = (2.0 * PI * 2.0 * s.scale * v + s.phase2).sin();
            if a * b >= 0.0 {
                1.0
            } else {
                0.0
            }
        }
        5 => wave(3.0, (du * du + dv * dv).sqrt(), s.phase),
        6 => bump((du * du + dv * dv).sqrt(), 0.18 * s.scale),
        7 => bump((du - dv).abs().min((du + dv).abs()) / std::f32::consts::SQRT_2, 0.06),
        8 => bump(du.abs().min(dv.abs()), 0.06),
        9 => {
            let c = |t: f32, ph: f32| 0.5 + 0.5 * (2.0 * PI * 3.0 * t + ph).cos();
            (c(u, s.phase) * c(v, s.phase2)).powi(3)
        }
        _ => unreachable!("class checked by make_synthetic"),
    }
}

pub fn make_synthetic(spec: &SyntheticSpec) -> Result<ImageDataset> {
    if spec.classes < 2 || spec.classes > MAX_CLASSES {
        return Err(Error::config("classes", format!("synthetic data supports 2..={MAX_CLASSES} classes")));
    }
    if spec.n == 0 || spec.height < 4 || spec.width < 4 {
        return Err(Error::config("synthetic", "need n > 0 and images of at least 4x4"));
    }
    let mut rng = stream(spec.seed, 0, Purpose::Synthetic);
    let (h, w) = (spec.height, spec.width);
    let mut images = Vec::with_capacity(spec.n * 3 * h * w);
    let mut labels = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        // Balanced labels in a seeded order.
        let class = i % spec.classes;
        let s = Sample {
            cx: rng.gen_range(0.3..0.7),
            cy: rng.gen_range(0.3..0.7),
            phase: rng.gen_range(0.0..2.0 * PI),
            phase2: rng.gen_range(0.0..2.0 * PI),
            scale: rng.gen_range(0.85..1.15),
        };
        let fg: [f32; 3] = [rng.gen_range(0.4..1.0), rng.gen_range(0.4..1.0), rng.gen_range(0.4..1.0)];
        let bg: f32 = rng.gen_range(0.1..0.3);
        let offset = spec.separation * (class as f32 / (spec.classes - 1) as f32 - 0.5);
        let pat: Vec<f32> = (0..h * w)
            .map(|p| pattern(class, (p % w) as f32 / w as f32, (p / w) as f32 / h as f32, &s))
            .collect();
        for &f in &fg {
            for &v in &pat {
                let noise: f32 = rng.sample(StandardNormal);
                images.push((bg + 0.6 * f * v + offset + spec.noise * noise).clamp(0.0, 1.0));
            }
        }
        labels.push(class);
    }
    // Shuffle so class order carries no information.
    let mut order: Vec<usize> = (0..spec.n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let per = 3 * h * w;
    let images = order.iter().flat_map(|&i| images[i * per..(i + 1) * per].iter().copied()).collect();
    let labels = order.iter().map(|&i| labels[i]).collect();
    ImageDataset::new(3, h, w, spec.classes, images, labels)
}
