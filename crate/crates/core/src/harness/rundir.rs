//! Layout of a run directory.
//!
//! ```text
//! config.json            full run configuration
//! metrics.csv            one row per completed epoch
//! steps.csv              one row per optimisation step
//! genotype.json          final (or latest) discrete architecture
//! checkpoint.json        latest resumable state, replaced atomically
//! alpha/epoch-NNNN.json  α snapshots
//! record.json            run record, written when the run ends
//! ```
//!
//! CSV files start with a `schema_version` column.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{read_text, RunConfig};
use crate::data::SplitTag;
use crate::error::{Error, Result};
use crate::search::{AlphaSnapshot, EpochMetrics, Phase, RunRecord, SearchState, StepRow, SCHEMA_VERSION};
use crate::search_space::Genotype;

/// Column order of `metrics.csv`.
pub const METRICS_COLUMNS: [&str; 11] = [
    "schema_version",
    "epoch",
    "l_cls",
    "l_mse",
    "lambda",
    "total",
    "epsilon_guard_triggered",
    "skip_fraction",
    "alpha_std_total",
    "val_acc",
    "wall_clock_s",
];

/// Column order of `steps.csv`.
pub const STEP_COLUMNS: [&str; 10] = [
    "schema_version",
    "epoch",
    "step",
    "phase",
    "tag",
    "l_cls",
    "l_mse",
    "lambda",
    "total",
    "epsilon_guard_triggered",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub schema_version: u32,
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

impl From<&EpochMetrics> for MetricsRow {
    fn from(m: &EpochMetrics) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            epoch: m.epoch,
            l_cls: m.l_cls,
            l_mse: m.l_mse,
            lambda: m.lambda,
            total: m.total,
            epsilon_guard_triggered: m.epsilon_guard_triggered,
            skip_fraction: m.skip_fraction,
            alpha_std_total: m.alpha_std_total,
            val_acc: m.val_acc,
            wall_clock_s: m.wall_clock_s,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepCsvRow {
    pub schema_version: u32,
    pub epoch: usize,
    pub step: usize,
    pub phase: Phase,
    pub tag: SplitTag,
    pub l_cls: f64,
    pub l_mse: f64,
    pub lambda: f64,
    pub total: f64,
    pub epsilon_guard_triggered: bool,
}

impl From<&StepRow> for StepCsvRow {
    fn from(s: &StepRow) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            epoch: s.epoch,
            step: s.step,
            phase: s.phase,
            tag: s.tag,
            l_cls: s.report.l_cls,
            l_mse: s.report.l_mse,
            lambda: s.report.lambda,
            total: s.report.total,
            epsilon_guard_triggered: s.report.epsilon_guard_triggered,
        }
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::Parse {
            offset,
            message: format!("{}: {kind:?}", path.display()),
        },
    }
}

/// Writes `rows` to `path`, appending when `append` is set and the file
/// already has a header.
pub fn write_csv<R: Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = R>, append: bool) -> Result<()> {
    let has_header = append && path.metadata().map(|m| m.len() > 0).unwrap_or(false);
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if !has_header {
        w.write_record(header).map_err(|e| csv_err(path, e))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let text = read_text(path)?;
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T, pretty: bool) -> Result<()> {
    let text = if pretty {
        serde_json::to_string_pretty(value)?
    } else {
        serde_json::to_string(value)?
    };
    // Write then rename so a crash never leaves a torn file.
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, text)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        offset: byte_offset(&text, e.line(), e.column()),
        message: format!("{}: {e}", path.display()),
    })
}

fn byte_offset(text: &str, line: usize, column: usize) -> u64 {
    let start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (start + column.saturating_sub(1)) as u64
}

#[derive(Clone, Debug)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Creates a fresh run directory. An existing non-empty directory is an
    /// error unless `overwrite` is set, in which case it is removed first.
    pub fn create(path: impl Into<PathBuf>, overwrite: bool) -> Result<Self> {
        let path = path.into();
        if path.exists() && fs::read_dir(&path)?.next().is_some() {
            if !overwrite {
                return Err(Error::config(
                    "run_dir",
                    format!("{} already exists (use --resume or --overwrite)", path.display()),
                ));
            }
            fs::remove_dir_all(&path)?;
        }
        fs::create_dir_all(path.join("alpha"))?;
        Ok(Self { path })
    }

    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        if !path.is_dir() {
            return Err(Error::Missing(path));
        }
        Ok(Self { path })
    }

    pub fn config_path(&self) -> PathBuf {
        self.path.join("config.json")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.path.join("metrics.csv")
    }

    pub fn steps_path(&self) -> PathBuf {
        self.path.join("steps.csv")
    }

    pub fn genotype_path(&self) -> PathBuf {
        self.path.join("genotype.json")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.path.join("checkpoint.json")
    }

    pub fn record_path(&self) -> PathBuf {
        self.path.join("record.json")
    }

    pub fn snapshot_path(&self, epoch: usize) -> PathBuf {
        self.path.join("alpha").join(format!("epoch-{epoch:04}.json"))
    }

    pub fn write_config(&self, cfg: &RunConfig) -> Result<()> {
        write_json(&self.config_path(), cfg, true)
    }

    pub fn read_config(&self) -> Result<RunConfig> {
        read_json(&self.config_path())
    }

    /// Rewrites `metrics.csv` and `steps.csv` from the given rows.
    pub fn reset_logs(&self, epochs: &[EpochMetrics], steps: &[StepRow]) -> Result<()> {
        write_csv(&self.metrics_path(), &METRICS_COLUMNS, epochs.iter().map(MetricsRow::from), false)?;
        write_csv(&self.steps_path(), &STEP_COLUMNS, steps.iter().map(StepCsvRow::from), false)
    }

    pub fn append_epoch(&self, m: &EpochMetrics, steps: &[StepRow]) -> Result<()> {
        write_csv(&self.metrics_path(), &METRICS_COLUMNS, [MetricsRow::from(m)], true)?;
        write_csv(&self.steps_path(), &STEP_COLUMNS, steps.iter().map(StepCsvRow::from), true)
    }

    pub fn read_metrics(&self) -> Result<Vec<MetricsRow>> {
        read_csv(&self.metrics_path())
    }

    pub fn read_steps(&self) -> Result<Vec<StepCsvRow>> {
        read_csv(&self.steps_path())
    }

    pub fn write_genotype(&self, g: &Genotype) -> Result<()> {
        write_json(&self.genotype_path(), g, true)
    }

    pub fn read_genotype(&self) -> Result<Genotype> {
        read_json(&self.genotype_path())
    }

    pub fn write_checkpoint(&self, state: &SearchState) -> Result<()> {
        write_json(&self.checkpoint_path(), state, false)
    }

    pub fn read_checkpoint(&self) -> Result<SearchState> {
        let state: SearchState = read_json(&self.checkpoint_path())?;
        // Re-check the schema through the state's own decoder.
        if state.schema_version != SCHEMA_VERSION {
            return Err(Error::Parse {
                offset: 0,
                message: format!("checkpoint schema {} is not {SCHEMA_VERSION}", state.schema_version),
            });
        }
        Ok(state)
    }

    pub fn write_snapshot(&self, s: &AlphaSnapshot) -> Result<()> {
        write_json(&self.snapshot_path(s.epoch), s, false)
    }

    pub fn read_snapshot(&self, epoch: usize) -> Result<AlphaSnapshot> {
        read_json(&self.snapshot_path(epoch))
    }

    /// Epochs with a stored snapshot, ascending.
    pub fn snapshot_epochs(&self) -> Result<Vec<usize>> {
        let dir = self.path.join("alpha");
        if !dir.is_dir() {
            return Ok(Vec::new());
        }
        let mut out: Vec<usize> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_prefix("epoch-")?.strip_suffix(".json")?.parse().ok()
            })
            .collect();
        out.sort_unstable();
        Ok(out)
    }

    pub fn write_record(&self, r: &RunRecord) -> Result<()> {
        write_json(&self.record_path(), r, false)
    }

    pub fn read_record(&self) -> Result<RunRecord> {
        read_json(&self.record_path())
    }
}
