use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use maskdarts::data::SyntheticSpec;
use maskdarts::harness::{self, RunConfig, RunDir};
use maskdarts::{Error, Result};

/// Differentiable architecture search guided by masked image modeling.
#[derive(Parser)]
#[command(name = "maskdarts", version)]
struct Cli {
    /// Directory holding run directories (overrides MASKDARTS_RUN_ROOT).
    #[arg(long, global = true)]
    run_root: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML file with [search], [data] and [eval] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override; `data.*` and `eval.*` address those tables.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run an architecture search.
    Search {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        space: Option<String>,
        /// synthetic or cifar
        #[arg(long)]
        dataset: Option<String>,
        /// Path of a CIFAR-format binary file or directory.
        #[arg(long)]
        data_path: Option<String>,
        #[arg(long)]
        epochs: Option<String>,
        #[arg(long)]
        seed: Option<String>,
        /// cls, rec, or cls+rec
        #[arg(long)]
        task: Option<String>,
        /// clean or masked
        #[arg(long)]
        input: Option<String>,
        /// first or second
        #[arg(long)]
        order: Option<String>,
        /// Run directory name under the run root.
        #[arg(long)]
        name: Option<String>,
        /// Continue the named run from its checkpoint.
        #[arg(long)]
        resume: bool,
        /// Replace an existing run directory.
        #[arg(long)]
        overwrite: bool,
    },
    /// Train a genotype from scratch and report test accuracy.
    Eval {
        #[arg(long)]
        genotype: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Report path (default: eval.json next to the genotype).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Search over a grid of patch sizes, mask ratios and seeds.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
        patch_sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0.2,0.4,0.6,0.8")]
        ratios: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,1")]
        seeds: Vec<u64>,
        #[arg(long, default_value = "ablate")]
        name: String,
        #[arg(long)]
        overwrite: bool,
    },
    /// Per-edge softmax table and std totals of an α snapshot.
    AlphaReport {
        run_dir: PathBuf,
        /// Snapshot epoch (default: latest).
        #[arg(long)]
        epoch: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic dataset in CIFAR binary format.
    DatasetGen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = SyntheticSpec::default().classes)]
        classes: usize,
        #[arg(long, default_value_t = SyntheticSpec::default().n)]
        n: usize,
        #[arg(long, default_value_t = SyntheticSpec::default().height)]
        image_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = SyntheticSpec::default().noise)]
        noise: f32,
    },
}

fn load_config(base: RunConfig, args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = base;
    if let Some(path) = &args.config {
        cfg.apply_toml(&std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing(path.clone()),
            _ => e.into(),
        })?)?;
    }
    for kv in &args.sets {
        cfg.apply_override(kv)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<i32> {
    let root = cli.run_root.clone().unwrap_or_else(harness::run_root);
    match cli.cmd {
        Command::Search {
            cfg,
            space,
            dataset,
            data_path,
            epochs,
            seed,
            task,
            input,
            order,
            name,
            resume,
            overwrite,
        } => {
            let record = if resume {
                let name = name.ok_or_else(|| Error::config("name", "--resume needs --name"))?;
                harness::resume_in(&RunDir::open(root.join(name))?)?
            } else {
                let mut c = load_config(RunConfig::default(), &cfg)?;
                let flags = [
                    ("space", space),
                    ("data.dataset", dataset),
                    ("data.path", data_path),
                    ("epochs", epochs),
                    ("seed", seed),
                    ("task", task),
                    ("input", input),
                    ("order", order),
                ];
                for (k, v) in flags {
                    if let Some(v) = v {
                        c.set(k, &v)?;
                    }
                }
                c.validate()?;
                let dir = RunDir::create(root.join(name.unwrap_or_else(|| harness::default_run_name(&c))), overwrite)?;
                eprintln!("run directory {}", dir.path.display());
                harness::search_into(&dir, &c)?
            };
            println!("{}", serde_json::to_string(&record.genotype)?);
            if let Some(m) = record.epochs.last() {
                println!("epochs {} skip_fraction {} alpha_std_total {}", m.epoch, m.skip_fraction, m.alpha_std_total);
            }
            if let Some(reason) = record.abort {
                eprintln!("search aborted: {reason}");
                return Ok(3);
            }
        }
        Command::Eval { genotype, cfg, out } => {
            let c = load_config(harness::base_config_for(&genotype)?, &cfg)?;
            let report = harness::eval_genotype_file(&genotype, &c)?;
            let out = out.unwrap_or_else(|| genotype.with_file_name("eval.json"));
            std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
            println!(
                "accuracy {} ({}/{}) report {}",
                report.accuracy,
                report.test_correct,
                report.test_total,
                out.display()
            );
        }
        Command::Ablate {
            cfg,
            patch_sizes,
            ratios,
            seeds,
            name,
            overwrite,
        } => {
            let c = load_config(RunConfig::default(), &cfg)?;
            let grid = harness::AblateGrid {
                patch_sizes,
                ratios,
                seeds,
            };
            let dir = root.join(name);
            let (runs, rows) = harness::ablate(&dir, &c, &grid, overwrite)?;
            let failed = runs.iter().filter(|r| !r.ok).count();
            println!("{} runs ({failed} failed), {} cells, table {}", runs.len(), rows.len(), dir.join("ablate.csv").display());
        }
        Command::AlphaReport { run_dir, epoch, out } => {
            let dir = RunDir::open(run_dir)?;
            let report = harness::alpha_report_for(&dir, epoch)?;
            let out = out.unwrap_or_else(|| dir.path.join(format!("alpha-report-epoch-{:04}.csv", report.epoch)));
            report.write(&out)?;
            for (cell, total) in &report.totals {
                println!("{cell} total_std {total}");
            }
            println!("report {}", out.display());
        }
        Command::DatasetGen {
            out,
            classes,
            n,
            image_size,
            seed,
            noise,
        } => {
            let spec = SyntheticSpec {
                classes,
                n,
                height: image_size,
                width: image_size,
                seed,
                noise,
                ..SyntheticSpec::default()
            };
            let count = harness::dataset_gen(&out, &spec)?;
            println!("wrote {count} images to {}", out.display());
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}
