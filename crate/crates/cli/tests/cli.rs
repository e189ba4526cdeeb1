use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_supica");

fn supica(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = supica(args);
    assert!(
        out.status.success(),
        "supica {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    entries.sort();
    entries
        .into_iter()
        .map(|path| {
            let bytes = fs::read(&path).unwrap();
            (path.file_name().unwrap().into(), bytes)
        })
        .collect()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("solver.cfg");
    fs::write(&path, body).unwrap();
    path
}

fn gen_small(dir: &Path, recipe: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(format!("data-{recipe}"));
    let mut args = vec!["gen", "--recipe", recipe, "--seed", "1", "--out", p(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

fn read_w(path: &Path) -> Vec<f64> {
    fs::read(path)
        .unwrap()
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

#[test]
fn gen_writes_loadable_dataset_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let args = |out: &Path| {
        vec![
            "gen".to_string(),
            "--recipe".into(),
            "multi_trial".into(),
            "--n".into(),
            "6".into(),
            "--c".into(),
            "3".into(),
            "--t".into(),
            "128".into(),
            "--seed".into(),
            "1".into(),
            "--out".into(),
            p(out).into(),
        ]
    };
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let owned = args(out);
        let refs: Vec<&str> = owned.iter().map(String::as_str).collect();
        ok(&refs);
    }
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    let data = supica::data::load_dataset::<f64>(&a).unwrap();
    assert_eq!(data.dims(), (6, 3, 128, 0));
    let manifest = fs::read_to_string(a.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"recipe\": \"multi_trial\""));
}

#[test]
fn missing_out_is_a_usage_error() {
    let out = supica(&["gen", "--recipe", "multi_trial", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_small(
        tmp.path(),
        "multi_trial",
        &["--n", "4", "--c", "2", "--t", "64"],
    );
    let cfg = write_config(tmp.path(), "iterations = 3\nlambada = 0\n");
    let out = supica(&[
        "fit",
        "--data",
        p(&data),
        "--config",
        p(&cfg),
        "--out",
        p(&tmp.path().join("fit")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambada"));
}

#[test]
fn zero_iterations_returns_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_small(
        tmp.path(),
        "multi_trial",
        &["--n", "4", "--c", "3", "--t", "64"],
    );
    let cfg = write_config(tmp.path(), "iterations = 0\nlambda = 0\nseed = 9\n");
    let out = tmp.path().join("fit");
    ok(&[
        "fit",
        "--data",
        p(&data),
        "--config",
        p(&cfg),
        "--out",
        p(&out),
    ]);
    assert_eq!(read_w(&out.join("W.bin")), read_w(&out.join("W_init.bin")));
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.contains("# seed = 9"));
    assert_eq!(trace.lines().filter(|l| !l.starts_with('#')).count(), 2);
}

#[test]
fn stochastic_with_full_batches_matches_batch_mode() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_small(
        tmp.path(),
        "multi_trial",
        &["--n", "5", "--c", "3", "--t", "96"],
    );
    let cfg = write_config(
        tmp.path(),
        "iterations = 15\neta_u = 0.1\nbatch_trials = 5\nbatch_times = 96\ntrace_every = 1\n",
    );
    let batch = tmp.path().join("batch");
    let stoch = tmp.path().join("stoch");
    let gt = data.join("mixing.bin");
    let base = [
        "fit",
        "--data",
        p(&data),
        "--config",
        p(&cfg),
        "--ground-truth",
        p(&gt),
    ];
    ok(&[&base[..], &["--out", p(&batch)]].concat());
    ok(&[&base[..], &["--out", p(&stoch), "--stochastic"]].concat());
    let rows = |dir: &Path| -> Vec<String> {
        fs::read_to_string(dir.join("trace.csv"))
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with('#'))
            .map(str::to_string)
            .collect()
    };
    assert_eq!(rows(&batch), rows(&stoch));
    assert_eq!(read_w(&batch.join("W.bin")), read_w(&stoch.join("W.bin")));
}

#[test]
fn repeated_fits_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_small(
        tmp.path(),
        "supervision",
        &[
            "--n",
            "8",
            "--c",
            "3",
            "--t",
            "128",
            "--m",
            "2",
            "--log-power",
        ],
    );
    let cfg = write_config(
        tmp.path(),
        "iterations = 20\neta_u = 0.001\nlambda = 3e-5\nbatch_trials = 4\nbatch_times = 64\n\
         trace_every = 5\nlog_power = true\nseed = 4\n",
    );
    let runs: Vec<_> = ["r1", "r2"]
        .iter()
        .map(|name| {
            let out = tmp.path().join(name);
            ok(&[
                "fit",
                "--data",
                p(&data),
                "--config",
                p(&cfg),
                "--out",
                p(&out),
                "--stochastic",
            ]);
            dir_bytes(&out)
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
    let names: Vec<_> = runs[0]
        .iter()
        .map(|(n, _)| n.to_str().unwrap().to_string())
        .collect();
    for want in [
        "W.bin",
        "W.txt",
        "theta0.bin",
        "theta1.txt",
        "trace.csv",
        "config.txt",
    ] {
        assert!(
            names.iter().any(|n| n == want),
            "missing {want} in {names:?}"
        );
    }
}

#[test]
fn seed_sweep_writes_one_directory_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_small(
        tmp.path(),
        "multi_trial",
        &["--n", "4", "--c", "2", "--t", "64"],
    );
    let cfg = write_config(tmp.path(), "iterations = 5\n");
    let out = tmp.path().join("sweep");
    ok(&[
        "fit",
        "--data",
        p(&data),
        "--config",
        p(&cfg),
        "--out",
        p(&out),
        "--seeds",
        "3..6",
    ]);
    for seed in 3..6 {
        let cfg = fs::read_to_string(out.join(format!("seed-{seed}/config.txt"))).unwrap();
        assert!(cfg.contains(&format!("seed = {seed}\n")));
    }
    assert!(!out.join("seed-6").exists());
}

#[test]
fn numerical_abort_exits_3_and_keeps_the_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_small(
        tmp.path(),
        "supervision",
        &["--n", "8", "--c", "3", "--t", "128", "--m", "1"],
    );
    // Raw spectrogram power makes this supervision weight blow up quickly.
    let cfg = write_config(
        tmp.path(),
        "iterations = 200\neta_u = 1\neta_p = 0.1\nlambda = 10\ntrace_every = 1\n",
    );
    let out = tmp.path().join("fit");
    let res = supica(&[
        "fit",
        "--data",
        p(&data),
        "--config",
        p(&cfg),
        "--out",
        p(&out),
    ]);
    assert_eq!(
        res.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.contains("# aborted at iteration"));
    assert!(trace.lines().any(|l| l.starts_with("0,")));
    assert!(!out.join("W.bin").exists());
}

#[test]
fn eval_inverse_mixing_scores_zero_and_aggregates() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_small(
        tmp.path(),
        "multi_trial",
        &["--n", "3", "--c", "3", "--t", "64"],
    );
    let a = supica::data::load_matrix::<f64>(&data.join("mixing.bin")).unwrap();
    let inv = supica::linalg::inverse(a.view()).unwrap();
    let mut paths = Vec::new();
    for k in 0..3 {
        let dir = tmp.path().join(format!("run{k}"));
        fs::create_dir_all(&dir).unwrap();
        let w = if k == 0 {
            inv.clone()
        } else {
            ndarray::Array2::eye(3)
        };
        let path = dir.join("W.bin");
        supica::data::save_matrix(w.view(), &path, &[]).unwrap();
        paths.push(path);
    }
    let mix = data.join("mixing.bin");
    let mut args = vec!["eval", "--mixing", p(&mix)];
    for path in &paths {
        args.extend(["--w", p(path)]);
    }
    let out = ok(&args);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "run,seed,amari,target,metric,value");
    assert_eq!(lines.len(), 1 + 3 + 2);
    let amari0: f64 = lines[1].split(',').nth(2).unwrap().parse().unwrap();
    assert!(amari0 < 1e-10);
    assert!(lines[4].starts_with("mean,"));
    assert!(lines[5].starts_with("median,"));
}

#[test]
fn eval_appends_to_an_existing_file() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_small(
        tmp.path(),
        "multi_trial",
        &["--n", "3", "--c", "2", "--t", "32"],
    );
    let dir = tmp.path().join("run");
    fs::create_dir_all(&dir).unwrap();
    let w = dir.join("W.bin");
    supica::data::save_matrix(ndarray::Array2::<f64>::eye(2).view(), &w, &[]).unwrap();
    let csv = tmp.path().join("eval.csv");
    let mix = data.join("mixing.bin");
    for _ in 0..2 {
        ok(&[
            "eval",
            "--w",
            p(&w),
            "--mixing",
            p(&mix),
            "--append",
            p(&csv),
        ]);
    }
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(
        text.lines().filter(|l| l.starts_with("run,seed,")).count(),
        1
    );
    assert_eq!(text.lines().count(), 1 + 2 * 3);
}

#[test]
fn holdout_accuracy_and_rmse_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_small(
        tmp.path(),
        "supervision",
        &[
            "--n",
            "10",
            "--c",
            "3",
            "--t",
            "128",
            "--m",
            "1",
            "--log-power",
        ],
    );
    let cfg = write_config(
        tmp.path(),
        "iterations = 10\neta_u = 0.001\nlambda = 1e-4\nlog_power = true\n",
    );
    let out = tmp.path().join("fit");
    ok(&[
        "fit",
        "--data",
        p(&data),
        "--config",
        p(&cfg),
        "--out",
        p(&out),
        "--holdout",
        "0.3",
    ]);
    let w = out.join("W.bin");
    let report = ok(&["eval", "--w", p(&w), "--data", p(&data), "--holdout", "0.3"]);
    let row = report.lines().nth(1).unwrap();
    let cells: Vec<&str> = row.split(',').collect();
    assert_eq!(cells[3], "y0");
    assert_eq!(cells[4], "rmse");
    let rmse: f64 = cells[5].parse().unwrap();
    assert!(rmse.is_finite() && rmse >= 0.0);
}

#[test]
fn baseline_row_counts_and_degeneracy_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_small(
        tmp.path(),
        "multi_trial",
        &["--n", "5", "--c", "3", "--t", "200"],
    );
    let mix = data.join("mixing.bin");
    let per = ok(&[
        "baseline",
        "--data",
        p(&data),
        "--method",
        "fobi",
        "--mode",
        "per-trial",
        "--mixing",
        p(&mix),
    ]);
    let lines: Vec<&str> = per.lines().collect();
    assert_eq!(lines.len(), 1 + 5 + 2);
    assert!(lines[6].starts_with("mean,") && lines[7].starts_with("median,"));
    // Every Laplace source has the same kurtosis, so short trials cannot
    // separate the fourth-moment eigenvalues.
    assert!(lines[1..6].iter().any(|l| l.ends_with("fobi_degenerate")));
    let cat = ok(&[
        "baseline",
        "--data",
        p(&data),
        "--mode",
        "concat",
        "--mixing",
        p(&mix),
    ]);
    assert_eq!(cat.lines().count(), 2);
}

#[test]
fn prep_centers_and_records_the_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_small(
        tmp.path(),
        "multi_trial",
        &["--n", "2", "--c", "2", "--t", "32"],
    );
    let out = tmp.path().join("prepped");
    ok(&[
        "prep",
        "--data",
        p(&data),
        "--out",
        p(&out),
        "--center",
        "--unit-variance",
    ]);
    let d = supica::data::load_dataset::<f64>(&out).unwrap();
    for i in 0..2 {
        for row in d.signal(i).rows() {
            assert!(row.sum().abs() < 1e-10);
        }
    }
    assert_eq!(d.params().get("center").map(String::as_str), Some("true"));
}
