//! Central finite-difference gradient checking.
//!
//! The checked function is rebuilt from scratch for every evaluation, in
//! `f64`. Checked quantities are graph leaves tagged with a source id (see
//! [`Graph::leaf_from_source`]); the checker perturbs one element of one
//! source per evaluation. A coordinate passes when
//! `|a - n| <= atol + rtol * max(|a|, |n|)`.
//!
//! Piecewise-linear ops (ReLU, max-pool, clipping) have kinks. A coordinate
//! whose perturbation straddles a kink shows up as disagreeing one-sided
//! differences; such coordinates are counted in `skipped_kinks` instead of
//! being scored, and only when the central check failed.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub h: f64,
    pub rtol: f64,
    pub atol: f64,
    /// Check at most this many coordinates per source (sampled); `None` checks all.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-3,
            rtol: 1e-3,
            atol: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failed: usize,
    pub skipped_kinks: usize,
    /// Largest `|a - n| / (atol + rtol * max(|a|, |n|))` among scored coordinates.
    pub worst_ratio: f64,
    /// `(source, index, analytic, numeric)` of the worst scored coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failed == 0
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        self.failed += other.failed;
        self.skipped_kinks += other.skipped_kinks;
        if other.worst_ratio > self.worst_ratio {
            self.worst_ratio = other.worst_ratio;
            self.worst = other.worst;
        }
    }
}

fn evaluate<F>(build: &F, perturb: Option<(usize, usize, f64)>) -> Result<(Graph<f64>, Var)>
where
    F: Fn(Graph<f64>) -> Result<(Graph<f64>, Var)>,
{
    let mut g = Graph::<f64>::with_precision();
    if let Some((src, idx, delta)) = perturb {
        g.perturb_source(src, idx, delta);
    }
    let (g, out) = build(g)?;
    if g.value(out).len() != 1 {
        return Err(Error::contract("gradcheck function must return a scalar"));
    }
    Ok((g, out))
}

/// Checks the gradient with respect to each `(source, numel)` pair. `build`
/// records the function on the graph it is given and returns its scalar.
pub fn check_sources<F>(sources: &[(usize, usize)], build: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(Graph<f64>) -> Result<(Graph<f64>, Var)>,
{
    let (mut g, out) = evaluate(&build, None)?;
    let f0 = g.item(out);
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = sources
        .iter()
        .map(|&(src, n)| {
            let mut acc = vec![0.0; n];
            for (s, grad) in g.source_grads() {
                if s == src {
                    acc.iter_mut().zip(grad).for_each(|(a, b)| *a += b);
                }
            }
            acc
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    let f = |src: usize, idx: usize, d: f64| -> Result<f64> {
        let (g, out) = evaluate(&build, Some((src, idx, d)))?;
        Ok(g.item(out))
    };
    for (&(src, n), grad) in sources.iter().zip(&analytic) {
        let coords: Vec<usize> = match cfg.max_coords {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for idx in coords {
            let (fp, fm) = (f(src, idx, cfg.h)?, f(src, idx, -cfg.h)?);
            let numeric = (fp - fm) / (2.0 * cfg.h);
            let a = grad[idx];
            let bound = cfg.atol + cfg.rtol * a.abs().max(numeric.abs());
            let ratio = (a - numeric).abs() / bound;
            if ratio > 1.0 {
                let (right, left) = ((fp - f0) / cfg.h, (f0 - fm) / cfg.h);
                let jump = (right - left).abs();
                if jump > 0.1 * right.abs().max(left.abs()) && jump > cfg.atol {
                    report.skipped_kinks += 1;
                    continue;
                }
                report.failed += 1;
            }
            report.checked += 1;
            if ratio > report.worst_ratio {
                report.worst_ratio = ratio;
                report.worst = Some((src, idx, a, numeric));
            }
        }
    }
    Ok(report)
}

/// Convenience form: input `i` enters the graph as a leaf tagged `i` and
/// `build` receives the leaves in order.
pub fn check_gradients<F>(inputs: &[Tensor], build: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let sources: Vec<(usize, usize)> = inputs.iter().enumerate().map(|(i, t)| (i, t.numel())).collect();
    check_sources(
        &sources,
        |mut g| {
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(i, t)| g.leaf_from_source(t, true, i))
                .collect();
            let out = build(&mut g, &vars)?;
            Ok((g, out))
        },
        cfg,
    )
}
