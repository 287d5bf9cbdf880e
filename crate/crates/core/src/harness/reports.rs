//! Tables derived from run artifacts: the per-edge α report and the
//! aggregate of an ablation grid.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::search_space::{edge_softmax, Alpha, CellTopology, OperationSet, SpaceKind};

/// Reference totals for the normal cell, printed in the report header as
/// context only: masked-image-guided search versus plain DARTS.
pub const REFERENCE_STD_TOTALS: (f64, f64) = (0.70, 2.19);

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeRow {
    pub cell: &'static str,
    pub edge: usize,
    pub node: usize,
    pub source: usize,
    pub probs: Vec<f64>,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlphaReport {
    pub epoch: usize,
    pub ops: Vec<&'static str>,
    pub rows: Vec<EdgeRow>,
    /// `(cell, Σ per-edge std)`.
    pub totals: Vec<(&'static str, f64)>,
}

fn population_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt()
}

pub fn alpha_report(alpha: &Alpha, epoch: usize, space: SpaceKind, nodes: usize) -> AlphaReport {
    let topo = CellTopology::for_space(space, nodes);
    let ops = OperationSet::for_space(space);
    let mut rows = Vec::new();
    let mut totals = Vec::new();
    let cells = [("normal", Some(&alpha.normal)), ("reduce", alpha.reduce.as_ref())];
    for (cell, t) in cells {
        let Some(t) = t else { continue };
        let probs = edge_softmax(t);
        let mut total = 0.0;
        for (node, source, edge) in topo.edges() {
            let p = probs[edge].clone();
            let std = population_std(&p);
            total += std;
            rows.push(EdgeRow {
                cell,
                edge,
                node,
                source,
                probs: p,
                std,
            });
        }
        totals.push((cell, total));
    }
    AlphaReport {
        epoch,
        ops: ops.ops().iter().map(|o| o.name()).collect(),
        rows,
        totals,
    }
}

impl AlphaReport {
    pub fn total(&self, cell: &str) -> Option<f64> {
        self.totals.iter().find(|(c, _)| *c == cell).map(|(_, v)| *v)
    }

    /// CSV with `#` comment header lines. Edge rows carry the softmaxed
    /// weights and their std; `total` rows carry the per-cell sum in `std`.
    pub fn to_csv(&self) -> String {
        let (mim, plain) = REFERENCE_STD_TOTALS;
        let mut s = String::new();
        let _ = writeln!(s, "# alpha report, epoch {}", self.epoch);
        let _ = writeln!(
            s,
            "# reference context (not a target): normal-cell total std {mim:.2} with masked-image guidance vs {plain:.2} for plain DARTS"
        );
        let _ = write!(s, "cell,kind,edge,node,source");
        for op in &self.ops {
            let _ = write!(s, ",{op}");
        }
        let _ = writeln!(s, ",std");
        for r in &self.rows {
            let _ = write!(s, "{},edge,{},{},{}", r.cell, r.edge, r.node, r.source);
            for p in &r.probs {
                let _ = write!(s, ",{p}");
            }
            let _ = writeln!(s, ",{}", r.std);
        }
        for (cell, total) in &self.totals {
            let _ = write!(s, "{cell},total,,,");
            for _ in &self.ops {
                s.push(',');
            }
            let _ = writeln!(s, "{total}");
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Outcome of one ablation grid cell run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblateRun {
    pub patch_size: usize,
    pub mask_ratio: f64,
    pub seed: u64,
    pub ok: bool,
    pub val_acc: Option<f64>,
    pub skip_fraction: Option<f64>,
    pub error: Option<String>,
}

/// One aggregated grid cell; std is the sample standard deviation (0 for a
/// single run).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblateRow {
    pub patch_size: usize,
    pub mask_ratio: f64,
    pub runs: usize,
    pub failed: usize,
    pub val_acc_mean: Option<f64>,
    pub val_acc_std: Option<f64>,
    pub skip_fraction_mean: Option<f64>,
    pub skip_fraction_std: Option<f64>,
}

pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some((m, var.sqrt()))
}

/// Groups runs by `(patch_size, mask_ratio)` in first-seen order.
pub fn aggregate(runs: &[AblateRun]) -> Vec<AblateRow> {
    let mut keys: Vec<(usize, f64)> = Vec::new();
    for r in runs {
        if !keys.iter().any(|&(p, m)| p == r.patch_size && m == r.mask_ratio) {
            keys.push((r.patch_size, r.mask_ratio));
        }
    }
    keys.into_iter()
        .map(|(p, m)| {
            let cell: Vec<&AblateRun> = runs.iter().filter(|r| r.patch_size == p && r.mask_ratio == m).collect();
            let acc: Vec<f64> = cell.iter().filter_map(|r| r.val_acc).collect();
            let skip: Vec<f64> = cell.iter().filter_map(|r| r.skip_fraction).collect();
            let (am, asd) = mean_std(&acc).unzip();
            let (sm, ssd) = mean_std(&skip).unzip();
            AblateRow {
                patch_size: p,
                mask_ratio: m,
                runs: cell.len(),
                failed: cell.iter().filter(|r| !r.ok).count(),
                val_acc_mean: am,
                val_acc_std: asd,
                skip_fraction_mean: sm,
                skip_fraction_std: ssd,
            }
        })
        .collect()
}
