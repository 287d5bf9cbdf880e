use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use maskdarts::harness::{self, MetricsRow, RunDir, METRICS_COLUMNS};
use maskdarts::search::{evaluate_genotype, SearchData, SearchState};
use maskdarts::search_space::{alpha_std_total, discretize, skip_fraction, Genotype, NetworkConfig, OpKind, SpaceKind};

const TINY: [&str; 18] = [
    "--set", "data.image_size=8",
    "--set", "data.n=240",
    "--set", "data.classes=4",
    "--set", "c_init=4",
    "--set", "batch_size=16",
    "--set", "patch_size=2",
    "--set", "decoder_widths=8,8,8",
    "--set", "eval.c_init=4",
    "--set", "eval.batch_size=16",
];

fn maskdarts(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maskdarts"))
        .arg("--run-root")
        .arg(root)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn search(root: &Path, name: &str, epochs: &str) -> Output {
    let mut args = vec!["search", "--space", "darts", "--dataset", "synthetic", "--epochs", epochs, "--seed", "1", "--name", name];
    args.extend_from_slice(&TINY);
    maskdarts(root, &args)
}

fn metrics_without_clock(dir: &RunDir) -> Vec<MetricsRow> {
    let mut rows = dir.read_metrics().unwrap();
    rows.iter_mut().for_each(|r| r.wall_clock_s = 0.0);
    rows
}

#[test]
fn search_writes_a_complete_run_directory() {
    let root = tempfile::tempdir().unwrap();
    let out = search(root.path(), "a", "2");
    ok(&out);
    let dir = RunDir::open(root.path().join("a")).unwrap();
    for f in ["config.json", "metrics.csv", "steps.csv", "genotype.json", "checkpoint.json", "record.json"] {
        assert!(dir.path.join(f).is_file(), "{f} missing");
    }
    let header = std::fs::read_to_string(dir.metrics_path()).unwrap();
    assert_eq!(header.lines().next().unwrap(), METRICS_COLUMNS.join(","));
    let rows = dir.read_metrics().unwrap();
    assert_eq!(rows.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2]);
    assert!(rows.iter().all(|r| r.schema_version == 1));
    assert_eq!(dir.read_steps().unwrap().len(), 2 * 3 * 2);
    assert_eq!(dir.snapshot_epochs().unwrap(), vec![0, 1, 2]);
    let g = dir.read_genotype().unwrap();
    assert_eq!(g.space, SpaceKind::Darts);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains(&serde_json::to_string(&g).unwrap()), "{stdout}");
}

#[test]
fn same_command_same_genotype_and_metrics() {
    let root = tempfile::tempdir().unwrap();
    ok(&search(root.path(), "a", "2"));
    ok(&search(root.path(), "b", "2"));
    let (a, b) = (RunDir::open(root.path().join("a")).unwrap(), RunDir::open(root.path().join("b")).unwrap());
    assert_eq!(std::fs::read(a.genotype_path()).unwrap(), std::fs::read(b.genotype_path()).unwrap());
    assert_eq!(metrics_without_clock(&a), metrics_without_clock(&b));
}

#[test]
fn task_flags_select_the_ablation_row() {
    let root = tempfile::tempdir().unwrap();
    let out = maskdarts(root.path(), &["search", "--task", "cls", "--input", "clean", "--epochs", "0", "--name", "c"]);
    ok(&out);
    let cfg = RunDir::open(root.path().join("c")).unwrap().read_config().unwrap();
    assert!(cfg.search.task.cls && !cfg.search.task.rec);
    assert_eq!(cfg.search.task.input, maskdarts::search::InputMode::Clean);
}

#[test]
fn config_errors_exit_2_naming_the_field() {
    let root = tempfile::tempdir().unwrap();
    let out = maskdarts(root.path(), &["search", "--set", "c_init=3", "--name", "x"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("c_init"), "{}", stderr(&out));

    let out = maskdarts(root.path(), &["search", "--set", "bogus=1"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("bogus"));

    let out = maskdarts(root.path(), &["search", "--order", "third"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("order"));

    let cfg = root.path().join("bad.toml");
    std::fs::write(&cfg, "[search]\nepochs = \"many\"\n").unwrap();
    let out = maskdarts(root.path(), &["search", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("epochs"), "{}", stderr(&out));

    let out = maskdarts(root.path(), &["search", "--bogus-flag"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn existing_run_directory_needs_resume_or_overwrite() {
    let root = tempfile::tempdir().unwrap();
    let args = ["search", "--epochs", "0", "--name", "r"];
    ok(&maskdarts(root.path(), &args));
    let out = maskdarts(root.path(), &args);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("already exists"));
    ok(&maskdarts(root.path(), &["search", "--epochs", "0", "--name", "r", "--overwrite"]));
}

#[test]
fn resume_continues_from_the_checkpoint() {
    let root = tempfile::tempdir().unwrap();
    ok(&search(root.path(), "full", "2"));
    // Crash after epoch 1: a one-epoch run shares epoch 1 with the two-epoch
    // run (the cosine schedule starts at the same lr), then its saved state
    // is extended to two epochs.
    ok(&search(root.path(), "crashed", "1"));
    let dir = RunDir::open(root.path().join("crashed")).unwrap();
    let mut state: SearchState = dir.read_checkpoint().unwrap();
    state.config.epochs = 2;
    dir.write_checkpoint(&state).unwrap();
    std::fs::remove_file(dir.record_path()).unwrap();
    ok(&maskdarts(root.path(), &["search", "--resume", "--name", "crashed"]));

    let full = RunDir::open(root.path().join("full")).unwrap();
    assert_eq!(std::fs::read(full.genotype_path()).unwrap(), std::fs::read(dir.genotype_path()).unwrap());
    assert_eq!(metrics_without_clock(&full), metrics_without_clock(&dir));
    assert_eq!(full.read_steps().unwrap(), dir.read_steps().unwrap());
    assert_eq!(full.read_snapshot(2).unwrap(), dir.read_snapshot(2).unwrap());

    let out = maskdarts(root.path(), &["search", "--resume"]);
    assert_eq!(code(&out), 2);
    let out = maskdarts(root.path(), &["search", "--resume", "--name", "missing"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn eval_matches_the_in_process_evaluation() {
    let root = tempfile::tempdir().unwrap();
    ok(&search(root.path(), "a", "2"));
    let dir = RunDir::open(root.path().join("a")).unwrap();
    let out = maskdarts(root.path(), &["eval", "--genotype", dir.genotype_path().to_str().unwrap(), "--set", "eval.epochs=2"]);
    ok(&out);
    let written = std::fs::read_to_string(dir.path.join("eval.json")).unwrap();

    let mut cfg = dir.read_config().unwrap();
    cfg.eval.epochs = 2;
    let data = SearchData::prepare(&cfg.search.data).unwrap();
    let report = evaluate_genotype(&dir.read_genotype().unwrap(), &cfg.eval, &data, cfg.search.data.augment).unwrap();
    assert_eq!(written, serde_json::to_string_pretty(&report).unwrap());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains(&format!("accuracy {}", report.accuracy)), "{stdout}");
}

#[test]
fn eval_of_all_skip_and_malformed_genotypes() {
    let root = tempfile::tempdir().unwrap();
    let g = Genotype::uniform(SpaceKind::Darts, 4, OpKind::SkipConnect);
    let path = root.path().join("skip.json");
    std::fs::write(&path, g.to_json()).unwrap();
    let out_path = root.path().join("report.json");
    let mut args = vec!["eval", "--genotype", path.to_str().unwrap(), "--out", out_path.to_str().unwrap(), "--set", "eval.epochs=1"];
    args.extend_from_slice(&TINY);
    ok(&maskdarts(root.path(), &args));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    assert!(report["accuracy"].is_f64());

    let bad = root.path().join("bad.json");
    std::fs::write(&bad, "{\"space\": \"darts\", \"normal\": [[[\"skip_connect\", 0]").unwrap();
    let out = maskdarts(root.path(), &["eval", "--genotype", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("offset"), "{}", stderr(&out));

    let wrong_op = root.path().join("wrong.json");
    std::fs::write(&wrong_op, Genotype::uniform(SpaceKind::Darts, 4, OpKind::Conv3x3).to_json()).unwrap();
    assert_eq!(code(&maskdarts(root.path(), &["eval", "--genotype", wrong_op.to_str().unwrap()])), 2);

    let missing = root.path().join("none.json");
    assert_eq!(code(&maskdarts(root.path(), &["eval", "--genotype", missing.to_str().unwrap()])), 2);
}

#[test]
fn alpha_report_matches_live_metrics() {
    let root = tempfile::tempdir().unwrap();
    ok(&search(root.path(), "a", "2"));
    let dir = RunDir::open(root.path().join("a")).unwrap();
    let out_csv = root.path().join("alpha.csv");
    let out = maskdarts(root.path(), &["alpha-report", dir.path.to_str().unwrap(), "--out", out_csv.to_str().unwrap()]);
    ok(&out);
    let text = std::fs::read_to_string(&out_csv).unwrap();
    assert!(text.starts_with("# alpha report, epoch 2"));
    assert!(text.contains("0.70") && text.contains("2.19"));

    let cfg = dir.read_config().unwrap();
    let net = NetworkConfig::new(cfg.search.space, cfg.search.c_init, cfg.search.layers, 8, 8);
    for m in dir.read_metrics().unwrap() {
        let report = harness::alpha_report_for(&dir, Some(m.epoch)).unwrap();
        assert!((report.total("normal").unwrap() - m.alpha_std_total).abs() < 1e-6);
        let snap = dir.read_snapshot(m.epoch).unwrap();
        assert!((alpha_std_total(&snap.alpha.normal) - m.alpha_std_total).abs() < 1e-6);
        let g = discretize(&snap.alpha, net.space, net.nodes, &net.ops);
        assert!((skip_fraction(&g, false) - m.skip_fraction).abs() < 1e-6);
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("normal total_std"));

    let uniform = maskdarts(root.path(), &["alpha-report", dir.path.to_str().unwrap(), "--epoch", "7"]);
    assert_eq!(code(&uniform), 2);
    assert_eq!(code(&maskdarts(root.path(), &["alpha-report", "/nonexistent/run"])), 2);
    let empty = root.path().join("empty");
    std::fs::create_dir_all(empty.join("alpha")).unwrap();
    assert_eq!(code(&maskdarts(root.path(), &["alpha-report", empty.to_str().unwrap()])), 2);
}

/// Sample mean and standard deviation, written independently of the harness.
fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = if xs.len() < 2 { 0.0 } else { xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0) };
    (m, v.sqrt())
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn ablate_aggregates_match_the_per_run_files() {
    let root = tempfile::tempdir().unwrap();
    let mut args = vec![
        "ablate", "--patch-sizes", "2,4", "--ratios", "0.4,0.6", "--seeds", "0,1", "--name", "grid", "--set", "epochs=1",
    ];
    args.extend_from_slice(&TINY);
    let out = maskdarts(root.path(), &args);
    ok(&out);
    let grid = root.path().join("grid");
    assert_eq!(csv_rows(&grid.join("runs.csv")).len(), 8);
    let table = csv_rows(&grid.join("ablate.csv"));
    assert_eq!(table.len(), 4);
    for row in table {
        let (p, r): (usize, f64) = (row[0].parse().unwrap(), row[1].parse().unwrap());
        let mut acc = Vec::new();
        let mut skip = Vec::new();
        for seed in [0, 1] {
            let cell: PathBuf = grid.join("cells").join(harness::ablate_cell_name(p, r, seed));
            let last = csv_rows(&cell.join("metrics.csv")).pop().unwrap();
            acc.push(last[9].parse::<f64>().unwrap());
            skip.push(last[7].parse::<f64>().unwrap());
        }
        let got: Vec<f64> = row[4..8].iter().map(|v| v.parse().unwrap()).collect();
        let (am, asd) = moments(&acc);
        let (sm, ssd) = moments(&skip);
        for (g, e) in got.iter().zip([am, asd, sm, ssd]) {
            assert!((g - e).abs() < 1e-12, "{row:?}: {g} vs {e}");
        }
        assert_eq!((row[2].as_str(), row[3].as_str()), ("2", "0"));
    }
}

#[test]
fn ablate_records_failing_cells_and_continues() {
    let root = tempfile::tempdir().unwrap();
    // Patch size 3 does not divide 8×8 images.
    let mut args = vec!["ablate", "--patch-sizes", "3,2", "--ratios", "0.5", "--seeds", "0", "--name", "g", "--set", "epochs=1"];
    args.extend_from_slice(&TINY);
    ok(&maskdarts(root.path(), &args));
    let runs = csv_rows(&root.path().join("g").join("runs.csv"));
    assert_eq!(runs.len(), 2);
    assert_eq!(runs[0][3], "false");
    assert!(!runs[0][6].is_empty());
    assert_eq!(runs[1][3], "true");
}

#[test]
fn dataset_gen_output_round_trips_and_feeds_a_search() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let out = maskdarts(
        root.path(),
        &["dataset-gen", "--out", data.to_str().unwrap(), "--classes", "4", "--n", "240", "--image-size", "8", "--seed", "3"],
    );
    ok(&out);
    let bytes = std::fs::read(data.join("data.bin")).unwrap();
    assert_eq!(bytes.len(), 240 * (1 + 3 * 64));
    let meta = maskdarts::data::DatasetMeta::load(&data.join("meta.txt")).unwrap();
    let ds = maskdarts::data::parse_cifar_binary(&bytes, &meta).unwrap();
    assert_eq!(maskdarts::data::write_cifar_binary(&ds), bytes);

    let mut args = vec!["search", "--dataset", "cifar", "--data-path", data.to_str().unwrap(), "--epochs", "1", "--name", "c"];
    args.extend_from_slice(&TINY[6..]);
    ok(&maskdarts(root.path(), &args));

    let truncated = root.path().join("trunc.bin");
    std::fs::write(&truncated, &bytes[..bytes.len() - 5]).unwrap();
    let out = maskdarts(root.path(), &["search", "--dataset", "cifar", "--data-path", truncated.to_str().unwrap(), "--name", "t"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn run_root_comes_from_the_environment() {
    let root = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_maskdarts"))
        .env(harness::RUN_ROOT_ENV, root.path())
        .args(["search", "--epochs", "0", "--seed", "4"])
        .output()
        .unwrap();
    ok(&out);
    assert!(root.path().join("search-darts-cls+rec-masked-seed4").join("genotype.json").is_file());
}

#[test]
fn diverging_search_exits_3_and_keeps_its_logs() {
    let root = tempfile::tempdir().unwrap();
    let mut args = vec!["search", "--epochs", "2", "--name", "div", "--set", "w_lr=1e30", "--set", "w_lr_min=1e30"];
    args.extend_from_slice(&TINY);
    let out = maskdarts(root.path(), &args);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("aborted"), "{}", stderr(&out));
    let dir = RunDir::open(root.path().join("div")).unwrap();
    let record = dir.read_record().unwrap();
    assert!(record.abort.is_some());
    assert!(record.epochs.len() < 2);
}
