//! Patch masking for the reconstruction task.
//!
//! An image `[C, H, W]` is cut into `N = (H/P)·(W/P)` non-overlapping `P×P`
//! patches, numbered row-major over the patch grid. A patch vector has
//! length `P²·C` laid out as `(row-in-patch, col-in-patch, channel)`.
//! Masked patches are set to exactly zero; masking is applied to
//! standardised images, so zero is the per-channel dataset mean.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGeometry {
    pub p: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl PatchGeometry {
    pub fn new(c: usize, h: usize, w: usize, p: usize) -> Result<Self> {
        if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
            return Err(Error::Geometry(format!("{h}x{w} image is not divisible into {p}x{p} patches")));
        }
        Ok(Self { p, c, h, w })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.h / self.p, self.w / self.p)
    }

    /// Patch count `N`.
    pub fn n(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn patch_dim(&self) -> usize {
        self.p * self.p * self.c
    }

    /// Patch holding pixel `(y, x)`.
    pub fn patch_of(&self, y: usize, x: usize) -> usize {
        (y / self.p) * (self.w / self.p) + x / self.p
    }

    fn check_image(&self, shape: &[usize]) -> Result<usize> {
        if shape.len() != 4 || shape[1..] != [self.c, self.h, self.w] {
            return Err(Error::Geometry(format!(
                "image batch {shape:?} does not match geometry {}x{}x{}",
                self.c, self.h, self.w
            )));
        }
        Ok(shape[0])
    }
}

/// Number of masked patches for `n` patches at `ratio`: `floor(ratio·n)`.
/// The tiny offset keeps exact fractions `i/n` from rounding down to `i-1`.
pub fn mask_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64 + 1e-9).floor() as usize).min(n)
}

/// `[B, C, H, W] -> [B, N, P²·C]`.
pub fn patchify(x: &Tensor, p: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Geometry(format!("patchify expects [B, C, H, W], got {s:?}")));
    }
    let geom = PatchGeometry::new(s[1], s[2], s[3], p)?;
    let (b, n, d) = (s[0], geom.n(), geom.patch_dim());
    let mut out = vec![0.0; x.numel()];
    let src = x.data();
    for bi in 0..b {
        for ch in 0..geom.c {
            for y in 0..geom.h {
                for xx in 0..geom.w {
                    let patch = geom.patch_of(y, xx);
                    let within = ((y % p) * p + xx % p) * geom.c + ch;
                    out[(bi * n + patch) * d + within] = src[((bi * geom.c + ch) * geom.h + y) * geom.w + xx];
                }
            }
        }
    }
    Tensor::new(vec![b, n, d], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, geom: &PatchGeometry) -> Result<Tensor> {
    let s = patches.shape();
    if s.len() != 3 || s[1] != geom.n() || s[2] != geom.patch_dim() {
        return Err(Error::Geometry(format!("patch tensor {s:?} does not match geometry {geom:?}")));
    }
    let (b, n, d, p) = (s[0], s[1], s[2], geom.p);
    let mut out = vec![0.0; patches.numel()];
    let src = patches.data();
    for bi in 0..b {
        for ch in 0..geom.c {
            for y in 0..geom.h {
                for xx in 0..geom.w {
                    let patch = geom.patch_of(y, xx);
                    let within = ((y % p) * p + xx % p) * geom.c + ch;
                    out[((bi * geom.c + ch) * geom.h + y) * geom.w + xx] = src[(bi * n + patch) * d + within];
                }
            }
        }
    }
    Tensor::new(vec![b, geom.c, geom.h, geom.w], out)
}

/// Indices of `mask_count(n, ratio)` distinct patches, each subset of that
/// size equally likely.
pub fn sample_mask(n: usize, ratio: f64, rng: &mut impl Rng) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::contract(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let mut m = vec![false; n];
    for i in sample(rng, n, mask_count(n, ratio)) {
        m[i] = true;
    }
    Ok(m)
}

/// Per-image patch masks for one batch (`true` = masked).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub geometry: PatchGeometry,
    pub ratio: f64,
    /// `[B][N]`.
    pub masks: Vec<Vec<bool>>,
}

impl MaskPlan {
    /// Independent mask per image. `min_count` raises the masked count
    /// (used to keep the reconstruction loss defined at tiny ratios).
    pub fn sample(geometry: PatchGeometry, batch: usize, ratio: f64, min_count: usize, rng: &mut impl Rng) -> Result<Self> {
        let n = geometry.n();
        let eff = if mask_count(n, ratio) < min_count {
            min_count.min(n) as f64 / n as f64
        } else {
            ratio
        };
        let masks = (0..batch).map(|_| sample_mask(n, eff, rng)).collect::<Result<_>>()?;
        Ok(Self { geometry, ratio, masks })
    }

    /// Nothing masked.
    pub fn empty(geometry: PatchGeometry, batch: usize) -> Self {
        Self {
            geometry,
            ratio: 0.0,
            masks: vec![vec![false; geometry.n()]; batch],
        }
    }

    pub fn batch(&self) -> usize {
        self.masks.len()
    }

    pub fn masked_patches(&self) -> usize {
        self.masks.iter().flatten().filter(|&&m| m).count()
    }

    /// Pixel-level mask `[B, C, H, W]` with 1.0 on masked pixels.
    pub fn pixel_mask(&self) -> Vec<f32> {
        let g = &self.geometry;
        let mut out = Vec::with_capacity(self.batch() * g.c * g.h * g.w);
        for m in &self.masks {
            for _ in 0..g.c {
                for y in 0..g.h {
                    for x in 0..g.w {
                        out.push(if m[g.patch_of(y, x)] { 1.0 } else { 0.0 });
                    }
                }
            }
        }
        out
    }

    /// `(1 - m) ⊙ x_p` on patch vectors `[B, N, P²·C]`.
    pub fn apply_to_patches(&self, patches: &Tensor) -> Result<Tensor> {
        let s = patches.shape();
        if s.len() != 3 || s[0] != self.batch() || s[1] != self.geometry.n() {
            return Err(Error::Geometry(format!("patch tensor {s:?} does not match mask plan")));
        }
        let mut out = patches.clone();
        let d = s[2];
        for (bi, m) in self.masks.iter().enumerate() {
            for (pi, _) in m.iter().enumerate().filter(|(_, &v)| v) {
                out.data_mut()[(bi * s[1] + pi) * d..][..d].fill(0.0);
            }
        }
        Ok(out)
    }

    /// Masked image batch: patchify, zero masked patches, reshape back.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let b = self.geometry.check_image(x.shape())?;
        if b != self.batch() {
            return Err(Error::Geometry(format!("{b} images for a plan of {}", self.batch())));
        }
        let masked = self.apply_to_patches(&patchify(x, self.geometry.p)?)?;
        unpatchify(&masked, &self.geometry)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn patch_zero_is_top_left_block() {
        let x = Tensor::from_fn(vec![1, 1, 4, 4], |i| i as f32);
        let p = patchify(&x, 2).unwrap();
        assert_eq!(p.shape(), &[1, 4, 4]);
        assert_eq!(&p.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn single_patch_is_whole_image() {
        let x = Tensor::from_fn(vec![1, 1, 4, 4], |i| i as f32);
        let p = patchify(&x, 4).unwrap();
        assert_eq!(p.shape(), &[1, 1, 16]);
        assert_eq!(p.data(), x.data());
    }

    #[test]
    fn indivisible_is_geometry_error() {
        let x = Tensor::zeros(vec![1, 3, 6, 8]);
        assert!(matches!(patchify(&x, 4), Err(Error::Geometry(_))));
        assert!(PatchGeometry::new(3, 6, 8, 0).is_err());
    }

    #[test]
    fn exact_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_mask(16, 0.5, &mut rng).unwrap().iter().filter(|&&m| m).count(), 8);
        assert!(sample_mask(16, 0.0, &mut rng).unwrap().iter().all(|&m| !m));
        assert!(sample_mask(16, 1.0, &mut rng).unwrap().iter().all(|&m| m));
        assert!(sample_mask(16, 1.5, &mut rng).is_err());
        assert_eq!(mask_count(49, 1.0 / 49.0), 1);
        assert_eq!(mask_count(100, 0.29), 29);
    }

    #[test]
    fn full_and_empty_masks() {
        let geom = PatchGeometry::new(3, 8, 8, 4).unwrap();
        let x = Tensor::randn(vec![2, 3, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(MaskPlan::empty(geom, 2).apply(&x).unwrap(), x);
        let all = MaskPlan::sample(geom, 2, 1.0, 0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(all.apply(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn min_count_lifts_zero_ratio() {
        let geom = PatchGeometry::new(1, 8, 8, 4).unwrap();
        let plan = MaskPlan::sample(geom, 3, 0.0, 1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(plan.masks.iter().all(|m| m.iter().filter(|&&v| v).count() == 1));
    }

    #[test]
    fn fixed_seed_gives_fixed_masks() {
        let geom = PatchGeometry::new(3, 16, 16, 4).unwrap();
        let a = MaskPlan::sample(geom, 4, 0.6, 0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = MaskPlan::sample(geom, 4, 0.6, 0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.masks[0], a.masks[1]);
    }

    proptest! {
        #[test]
        fn round_trip_is_exact(b in 1usize..3, c in 1usize..4, gh in 1usize..4, gw in 1usize..4, p in 1usize..5, seed in 0u64..1000) {
            let x = Tensor::randn(vec![b, c, gh * p, gw * p], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
            let geom = PatchGeometry::new(c, gh * p, gw * p, p).unwrap();
            let back = unpatchify(&patchify(&x, p).unwrap(), &geom).unwrap();
            prop_assert_eq!(back.data(), x.data());
        }

        #[test]
        fn pixel_zeroed_iff_patch_masked(c in 1usize..4, gh in 1usize..5, gw in 1usize..5, p in 1usize..4, ratio in 0.0f64..=1.0, seed in 0u64..1000) {
            let (h, w) = (gh * p, gw * p);
            let geom = PatchGeometry::new(c, h, w, p).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Values bounded away from zero so zeroing is observable.
            let x = Tensor::uniform(vec![2, c, h, w], 0.5, 1.5, &mut rng);
            let plan = MaskPlan::sample(geom, 2, ratio, 0, &mut rng).unwrap();
            let y = plan.apply(&x).unwrap();
            let pm = plan.pixel_mask();
            for bi in 0..2 {
                for ch in 0..c {
                    for yy in 0..h {
                        for xx in 0..w {
                            let masked = plan.masks[bi][(yy / p) * gw + xx / p];
                            let i = ((bi * c + ch) * h + yy) * w + xx;
                            prop_assert_eq!(pm[i] == 1.0, masked);
                            if masked {
                                prop_assert_eq!(y.data()[i], 0.0);
                            } else {
                                prop_assert_eq!(y.data()[i].to_bits(), x.data()[i].to_bits());
                            }
                        }
                    }
                }
            }
        }
    }
}
