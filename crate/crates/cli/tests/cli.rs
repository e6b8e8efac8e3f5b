use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use otml_core::config::{Config, KEYS};
use otml_core::pipeline::load_checkpoint;
use otml_core::trainer::ProbeResult;
use tempfile::TempDir;

fn otml(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_otml")).args(args).env("RUST_LOG", "warn").output().expect("spawn otml")
}

fn ok(args: &[&str]) -> String {
    let out = otml(args);
    assert!(out.status.success(), "otml {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, n: usize, seed: u64, size: usize) -> PathBuf {
    let out = dir.join(format!("data_{n}_{seed}_{size}"));
    ok(&["gen-data", "--out", p(&out), "--n", &n.to_string(), "--classes", "4", "--size", &size.to_string(), "--seed", &seed.to_string()]);
    out
}

/// A small model so pretraining smoke runs stay fast.
fn write_small_config(dir: &Path, steps: usize) -> PathBuf {
    let mut cfg = Config { model: otml_core::model::ModelConfig::tiny(), ..Config::default() };
    cfg.train.steps = steps;
    cfg.train.batch_size = 8;
    let path = dir.join("small.cfg");
    fs::write(&path, cfg.render()).unwrap();
    path
}

#[test]
fn gen_data_writes_images_and_labels() {
    let dir = TempDir::new().unwrap();
    let data = gen(dir.path(), 8, 3, 32);
    let pgms: Vec<_> = fs::read_dir(&data).unwrap().filter_map(|e| e.ok()).filter(|e| e.path().extension().is_some_and(|x| x == "pgm")).collect();
    assert_eq!(pgms.len(), 8);
    let labels = fs::read_to_string(data.join("labels.csv")).unwrap();
    assert_eq!(labels.lines().skip(1).count(), 8);
    for entry in pgms {
        let bytes = fs::read(entry.path()).unwrap();
        let header: Vec<&str> = std::str::from_utf8(&bytes[..20]).unwrap_or_else(|e| std::str::from_utf8(&bytes[..e.valid_up_to()]).unwrap()).lines().collect();
        assert_eq!(header[0], "P5");
        assert_eq!(header[1], "32 32");
    }
}

#[test]
fn gen_data_is_byte_identical_for_a_seed() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let (da, db) = (gen(a.path(), 8, 5, 16), gen(b.path(), 8, 5, 16));
    let mut names: Vec<_> = fs::read_dir(&da).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 9);
    for n in names {
        assert_eq!(fs::read(da.join(&n)).unwrap(), fs::read(db.join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn pretrain_smoke_run_writes_one_metrics_row_per_step() {
    let dir = TempDir::new().unwrap();
    let data = gen(dir.path(), 16, 0, 8);
    let cfg = write_small_config(dir.path(), 10);
    let ckpt = dir.path().join("model.ckpt");
    ok(&["pretrain", "--config", p(&cfg), "--data", p(&data), "--out", p(&ckpt)]);
    let metrics = fs::read_to_string(dir.path().join("model.ckpt.metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 11);
    assert!(metrics.starts_with("step,"));
    assert_eq!(load_checkpoint(&ckpt, None).unwrap().checkpoint.step, 10);
}

#[test]
fn zero_loss_weights_leave_parameters_unchanged() {
    let dir = TempDir::new().unwrap();
    let data = gen(dir.path(), 16, 0, 8);
    let cfg = write_small_config(dir.path(), 3);
    let (c0, c3) = (dir.path().join("c0.ckpt"), dir.path().join("c3.ckpt"));
    let zero = ["--set", "train.alpha=0", "--set", "train.beta=0", "--set", "train.eta=0"];
    let run = |out: &Path, steps: &str| {
        let mut args = vec!["pretrain", "--config", p(&cfg), "--data", p(&data), "--out", p(out), "--set", steps];
        args.extend_from_slice(&zero);
        ok(&args);
    };
    run(&c0, "train.steps=0");
    run(&c3, "train.steps=3");
    let a = load_checkpoint(&c0, None).unwrap().checkpoint;
    let b = load_checkpoint(&c3, None).unwrap().checkpoint;
    assert_eq!(b.step, 3);
    let params: Vec<_> = a.tensors.keys().filter(|k| !k.contains("running")).collect();
    assert!(!params.is_empty());
    for k in params {
        assert_eq!(a.tensors[k], b.tensors[k], "{k}");
    }
}

#[test]
fn bad_config_is_a_usage_error_with_a_line_number() {
    let dir = TempDir::new().unwrap();
    let data = gen(dir.path(), 8, 0, 8);
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "[train]\nsteps = 3\nnot_a_key = 1\n").unwrap();
    let out = otml(&["pretrain", "--config", p(&cfg), "--data", p(&data), "--out", p(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains('3'));
    let out = otml(&["pretrain", "--data", p(&data), "--out", p(&dir.path().join("x")), "--set", "train.steps=banana"]);
    assert_eq!(out.status.code(), Some(1));
}

fn probe_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let data = gen(dir, 40, 1, 8);
    let cfg = write_small_config(dir, 2);
    let ckpt = dir.join("probe.ckpt");
    ok(&["pretrain", "--config", p(&cfg), "--data", p(&data), "--out", p(&ckpt)]);
    (data, ckpt)
}

#[test]
fn probe_prints_one_row_in_range_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let (data, ckpt) = probe_fixture(dir.path());
    let args = ["probe", "--ckpt", p(&ckpt), "--data", p(&data), "--protocol", "frozen", "--fraction", "1.0"];
    let first = ok(&args);
    assert_eq!(first.lines().count(), 1);
    let fields: Vec<&str> = first.trim().split(',').collect();
    assert_eq!(fields.len(), ProbeResult::CSV_HEADER.split(',').count());
    assert_eq!(fields[0], "frozen");
    for v in [fields[2], fields[3]] {
        let v: f64 = v.parse().unwrap();
        assert!((0.0..=1.0).contains(&v), "{v}");
    }
    assert_eq!(ok(&args), first);
    let tuned = ok(&["probe", "--ckpt", p(&ckpt), "--data", p(&data), "--protocol", "finetune", "--set", "probe.finetune_steps=2"]);
    assert!(tuned.starts_with("finetune,"));
}

#[test]
fn probe_rejects_a_fraction_too_small_for_every_class() {
    let dir = TempDir::new().unwrap();
    let data = gen(dir.path(), 100, 2, 8);
    let cfg = write_small_config(dir.path(), 1);
    let ckpt = dir.path().join("m.ckpt");
    ok(&["pretrain", "--config", p(&cfg), "--data", p(&data), "--out", p(&ckpt)]);
    let out = otml(&["probe", "--ckpt", p(&ckpt), "--data", p(&data), "--fraction", "0.0001"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("subset"));
    let out = otml(&["probe", "--ckpt", p(&dir.path().join("missing.ckpt")), "--data", p(&data)]);
    assert_eq!(out.status.code(), Some(2));
}

fn solve(dir: &Path, text: &str, extra: &[&str]) -> (Vec<Vec<f64>>, f64) {
    let path = dir.join("problem.txt");
    fs::write(&path, text).unwrap();
    let mut args = vec!["ot-solve", "--input", p(&path)];
    args.extend_from_slice(extra);
    let out = ok(&args);
    let lines: Vec<&str> = out.lines().collect();
    let d: usize = lines[0].parse().unwrap();
    assert_eq!(lines.len(), d + 3);
    let plan = lines[1..=d].iter().map(|l| l.split_whitespace().map(|v| v.parse().unwrap()).collect()).collect();
    (plan, lines[d + 1].parse().unwrap())
}

const INSTANCE: &str = "2\n0 2\n1 0\n0.7 0.3\n0.4 0.6\n0.001\n";

#[test]
fn ot_solve_zero_cost_problem_costs_nothing() {
    let dir = TempDir::new().unwrap();
    let (plan, cost) = solve(dir.path(), "2\n0 0\n0 0\n0.5 0.5\n0.5 0.5\n0.1\n", &[]);
    assert_eq!(cost, 0.0);
    assert!((plan.iter().flatten().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn ot_solve_oracle_finds_the_lp_optimum() {
    let dir = TempDir::new().unwrap();
    let (plan, cost) = solve(dir.path(), INSTANCE, &["--oracle"]);
    assert!((cost - 0.6).abs() < 1e-12, "{cost}");
    let expected = [[0.4, 0.3], [0.0, 0.3]];
    for (row, want) in plan.iter().zip(expected) {
        for (v, w) in row.iter().zip(want) {
            assert!((v - w).abs() < 1e-12);
        }
    }
}

#[test]
fn ot_solve_sinkhorn_agrees_with_the_oracle_at_small_epsilon() {
    let dir = TempDir::new().unwrap();
    let text = "3\n0.3 1.2 0.8\n1.9 0.1 0.6\n0.4 1.4 0.2\n0.5 0.2 0.3\n0.1 0.6 0.3\n0.5\n";
    let (_, oracle) = solve(dir.path(), text, &["--oracle"]);
    let (_, entropic) = solve(dir.path(), text, &["--epsilon", "1e-3"]);
    assert!((entropic - oracle).abs() <= 1e-2, "{entropic} vs {oracle}");
    let (_, loose) = solve(dir.path(), INSTANCE, &[]);
    assert!((loose - 0.6).abs() <= 1e-2);
}

#[test]
fn ot_solve_rejects_malformed_files() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.txt");
    fs::write(&path, "2\n0 1\n1\n").unwrap();
    let out = otml(&["ot-solve", "--input", p(&path)]);
    assert_eq!(out.status.code(), Some(2));
    let out = otml(&["ot-solve", "--input", p(&dir.path().join("absent.txt"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_lists_each_op_once() {
    let out = ok(&["gradcheck", "--seed", "0"]);
    let names: Vec<&str> = out.lines().map(|l| l.split_whitespace().next().unwrap()).collect();
    let mut unique = names.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), names.len());
    assert!(out.lines().all(|l| l.ends_with("ok")));
    for op in otml_core::tensor::OP_NAMES {
        assert!(names.contains(op), "{op} missing");
    }
}

#[test]
fn gradcheck_with_a_corrupted_adjoint_fails() {
    let out = otml(&["gradcheck", "--fault", "softmax"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(otml(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(otml(&["gen-data"]).status.code(), Some(1));
    assert_eq!(otml(&["gradcheck", "--fault", "nonsense"]).status.code(), Some(1));
    assert_eq!(otml(&["--version"]).status.code(), Some(0));
}

#[test]
fn help_lists_every_config_key_with_its_default() {
    let help = ok(&["--help"]);
    let defaults = Config::default();
    for k in KEYS {
        let line = help.lines().find(|l| l.split_whitespace().next() == Some(&k.path())).unwrap_or_else(|| panic!("{} missing from --help", k.path()));
        assert!(line.contains(&defaults.get(&k.path()).unwrap()), "{line}");
    }
    let documented = help.lines().filter(|l| l.starts_with("  ") && l.split_whitespace().next().is_some_and(|w| w.contains('.') && !w.starts_with('-'))).count();
    assert_eq!(documented, KEYS.len());
    assert!(ok(&["pretrain", "--help"]).contains("train.steps"));
}
