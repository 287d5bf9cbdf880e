//! In-process implementations of the command-line operations. The binary
//! only parses arguments and maps errors to exit codes.

pub mod config;
pub mod reports;
pub mod rundir;

use std::path::{Path, PathBuf};

pub use config::RunConfig;
pub use reports::{aggregate, alpha_report, AblateRow, AblateRun, AlphaReport};
pub use rundir::{MetricsRow, RunDir, StepCsvRow, METRICS_COLUMNS, STEP_COLUMNS};

use crate::data::{make_synthetic, write_cifar_binary, DatasetMeta, SyntheticSpec};
use crate::error::{Error, Result};
use crate::search::{drive, evaluate_genotype, EvalReport, RunRecord, Search, SearchData};
use crate::search_space::{Genotype, NetworkConfig};

/// Environment variable naming the directory that holds run directories.
pub const RUN_ROOT_ENV: &str = "MASKDARTS_RUN_ROOT";

pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

/// 2 for usage, configuration and input errors; 3 for runtime failures.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Abort(_) | Error::Io(_) => 3,
        _ => 2,
    }
}

/// Default run directory name for a search configuration.
pub fn default_run_name(cfg: &RunConfig) -> String {
    let s = &cfg.search;
    let task = match (s.task.cls, s.task.rec) {
        (true, true) => "cls+rec",
        (true, false) => "cls",
        _ => "rec",
    };
    let input = match s.task.input {
        crate::search::InputMode::Clean => "clean",
        crate::search::InputMode::Masked => "masked",
    };
    format!("search-{}-{task}-{input}-seed{}", s.space, s.seed)
}

fn persist_epoch(dir: &RunDir, search: &Search) -> Result<()> {
    let st = &search.state;
    dir.write_checkpoint(st)?;
    if let Some(m) = st.epochs.last() {
        let steps: Vec<_> = st.steps.iter().filter(|s| s.epoch == m.epoch).cloned().collect();
        dir.append_epoch(m, &steps)?;
    }
    if let Some(s) = st.alpha_snapshots.last().filter(|s| s.epoch == st.epoch) {
        dir.write_snapshot(s)?;
    }
    dir.write_genotype(&search.genotype())
}

fn finish(dir: &RunDir, search: Search) -> Result<RunRecord> {
    let record = drive(search, |s| persist_epoch(dir, s))?;
    dir.write_genotype(&record.genotype)?;
    dir.write_record(&record)?;
    Ok(record)
}

/// Runs a fresh search, writing every artifact into `dir`.
pub fn search_into(dir: &RunDir, cfg: &RunConfig) -> Result<RunRecord> {
    cfg.validate()?;
    dir.write_config(cfg)?;
    let data = SearchData::prepare(&cfg.search.data)?;
    let search = Search::new(&cfg.search, &data)?;
    dir.reset_logs(&[], &[])?;
    persist_epoch(dir, &search)?;
    finish(dir, search)
}

/// Continues the search saved in `dir` from its last checkpoint.
pub fn resume_in(dir: &RunDir) -> Result<RunRecord> {
    let state = dir.read_checkpoint()?;
    let data = SearchData::prepare(&state.config.data)?;
    dir.reset_logs(&state.epochs, &state.steps)?;
    let search = Search::resume(state, &data)?;
    finish(dir, search)
}

pub fn read_genotype(path: &Path) -> Result<Genotype> {
    rundir::read_json(path)
}

/// Evaluates the genotype stored at `path` with the given configuration.
pub fn eval_genotype_file(path: &Path, cfg: &RunConfig) -> Result<EvalReport> {
    let genotype = read_genotype(path)?;
    cfg.validate()?;
    let data = SearchData::prepare(&cfg.search.data)?;
    evaluate_genotype(&genotype, &cfg.eval, &data, cfg.search.data.augment)
}

/// Configuration for evaluating a genotype file: the `config.json` of the
/// run it came from when present, otherwise defaults.
pub fn base_config_for(genotype: &Path) -> Result<RunConfig> {
    let candidate = genotype.parent().map(|p| p.join("config.json"));
    match candidate {
        Some(p) if p.is_file() => rundir::read_json(&p),
        _ => Ok(RunConfig::default()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblateGrid {
    pub patch_sizes: Vec<usize>,
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl AblateGrid {
    pub fn cells(&self) -> impl Iterator<Item = (usize, f64, u64)> + '_ {
        self.patch_sizes.iter().flat_map(move |&p| {
            self.ratios
                .iter()
                .flat_map(move |&r| self.seeds.iter().map(move |&s| (p, r, s)))
        })
    }
}

pub fn ablate_cell_name(p: usize, ratio: f64, seed: u64) -> String {
    format!("p{p}-r{ratio}-s{seed}")
}

/// Runs every grid cell as its own search under `dir/cells`, then writes
/// `runs.csv` and the aggregated `ablate.csv`. A failing cell is recorded
/// and the grid continues.
pub fn ablate(dir: &Path, base: &RunConfig, grid: &AblateGrid, overwrite: bool) -> Result<(Vec<AblateRun>, Vec<AblateRow>)> {
    base.validate()?;
    if grid.patch_sizes.is_empty() || grid.ratios.is_empty() || grid.seeds.is_empty() {
        return Err(Error::config("grid", "patch sizes, ratios and seeds must be non-empty"));
    }
    std::fs::create_dir_all(dir.join("cells"))?;
    let mut runs = Vec::new();
    for (p, r, seed) in grid.cells() {
        let outcome = (|| -> Result<RunRecord> {
            let mut cfg = base.clone();
            cfg.search.patch_size = p;
            cfg.search.mask_ratio = r;
            cfg.search.seed = seed;
            let run = RunDir::create(dir.join("cells").join(ablate_cell_name(p, r, seed)), overwrite)?;
            search_into(&run, &cfg)
        })();
        let mut row = AblateRun {
            patch_size: p,
            mask_ratio: r,
            seed,
            ok: false,
            val_acc: None,
            skip_fraction: None,
            error: None,
        };
        match outcome {
            Ok(rec) if rec.abort.is_none() => {
                row.ok = true;
                if let Some(m) = rec.epochs.last() {
                    row.val_acc = m.val_acc;
                    row.skip_fraction = Some(m.skip_fraction);
                }
            }
            Ok(rec) => row.error = rec.abort,
            Err(e) => row.error = Some(e.to_string()),
        }
        runs.push(row);
    }
    let rows = aggregate(&runs);
    rundir::write_csv(&dir.join("runs.csv"), &RUN_COLUMNS, &runs, false)?;
    rundir::write_csv(&dir.join("ablate.csv"), &ABLATE_COLUMNS, &rows, false)?;
    Ok((runs, rows))
}

pub const RUN_COLUMNS: [&str; 7] = ["patch_size", "mask_ratio", "seed", "ok", "val_acc", "skip_fraction", "error"];
pub const ABLATE_COLUMNS: [&str; 8] = [
    "patch_size",
    "mask_ratio",
    "runs",
    "failed",
    "val_acc_mean",
    "val_acc_std",
    "skip_fraction_mean",
    "skip_fraction_std",
];

/// α report for a snapshot of the run in `dir` (latest when `epoch` is None).
pub fn alpha_report_for(dir: &RunDir, epoch: Option<usize>) -> Result<AlphaReport> {
    let epoch = match epoch {
        Some(e) => e,
        None => *dir
            .snapshot_epochs()?
            .last()
            .ok_or_else(|| Error::Missing(dir.path.join("alpha")))?,
    };
    let snap = dir.read_snapshot(epoch)?;
    let cfg = dir.read_config()?;
    let nodes = NetworkConfig::new(cfg.search.space, 2, 2, 4, 4).nodes;
    Ok(alpha_report(&snap.alpha, epoch, cfg.search.space, nodes))
}

/// Writes a synthetic dataset as `data.bin` plus `meta.txt` in `dir`.
pub fn dataset_gen(dir: &Path, spec: &SyntheticSpec) -> Result<usize> {
    let ds = make_synthetic(spec)?;
    std::fs::create_dir_all(dir)?;
    let meta = DatasetMeta {
        num_classes: ds.num_classes,
        height: ds.h,
        width: ds.w,
        channels: ds.c,
    };
    std::fs::write(dir.join("data.bin"), write_cifar_binary(&ds))?;
    std::fs::write(dir.join("meta.txt"), meta.to_string())?;
    Ok(ds.len())
}
