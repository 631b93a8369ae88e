use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn msar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msar"))
        .args(["--threads", "1"])
        .args(args)
        .output()
        .expect("spawn msar")
}

fn ok(args: &[&str]) -> String {
    let out = msar(args);
    assert!(
        out.status.success(),
        "msar {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const PARAMS: &str = r#"{
  "D": [[0.3, -0.3], [0.5, 0.4]],
  "B": [[-0.5, 1.0], [1.3, 0.3]],
  "Sigma_e": [[0.5, 0.3], [0.3, 0.8]]
}"#;

/// Two candidate files, parameters and a simulated dataset from the first candidate.
struct Setup {
    dir: TempDir,
    left: PathBuf,
    queen: PathBuf,
    data: PathBuf,
}

fn setup() -> Setup {
    let dir = tempfile::tempdir().unwrap();
    let left = dir.path().join("left.mtx");
    let queen = dir.path().join("queen.mtx");
    ok(&["weights", "--scheme", "left", "--rows", "6", "--cols", "8", "--out", s(&left)]);
    ok(&["weights", "--scheme", "queen", "--rows", "6", "--cols", "8", "--out", s(&queen)]);
    let params = dir.path().join("params.json");
    fs::write(&params, PARAMS).unwrap();
    let data = dir.path().join("data.csv");
    ok(&[
        "simulate", "--params", s(&params), "--weights", s(&left), "--seed", "3", "--out", s(&data),
    ]);
    Setup { dir, left, queen, data }
}

#[test]
fn weights_writes_matrix_market() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("rook.mtx");
    ok(&["weights", "--scheme", "rook", "--rows", "3", "--cols", "4", "--out", s(&out)]);
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("%%MatrixMarket matrix coordinate real general"));
    // 3x4 rook lattice: 2·(3·3 + 2·4) directed edges
    let header = text.lines().find(|l| !l.starts_with('%')).unwrap();
    assert_eq!(header, "12 12 34");
}

#[test]
fn weights_from_recipe_file() {
    let dir = tempfile::tempdir().unwrap();
    let recipe = dir.path().join("mix.json");
    fs::write(
        &recipe,
        r#"{"kind": "combine", "parts": [{"kind": "lattice", "scheme": "rook"}, {"kind": "lattice", "scheme": "queen"}], "coeffs": [0.5, 0.5]}"#,
    )
    .unwrap();
    let out = dir.path().join("mix.mtx");
    ok(&["weights", "--recipe", s(&recipe), "--rows", "3", "--cols", "3", "--out", s(&out)]);
    assert!(fs::read_to_string(&out).unwrap().contains("%%MatrixMarket"));
}

#[test]
fn simulate_writes_named_columns() {
    let st = setup();
    let text = fs::read_to_string(&st.data).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "y1,y2,x1,x2");
    assert_eq!(lines.count(), 48);
}

#[test]
fn simulate_is_deterministic_in_seed() {
    let st = setup();
    let again = st.dir.path().join("again.csv");
    let params = st.dir.path().join("params.json");
    ok(&[
        "simulate", "--params", s(&params), "--weights", s(&st.left), "--seed", "3", "--out", s(&again),
    ]);
    assert_eq!(fs::read(&st.data).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn fit_reports_estimates() {
    let st = setup();
    let v: Value = serde_json::from_str(&ok(&["fit", "--data", s(&st.data), "--weights", s(&st.left)])).unwrap();
    assert_eq!(v["converged"], true);
    assert_eq!(v["d_hat"].as_array().unwrap().len(), 2);
    assert_eq!(v["b_gls"].as_array().unwrap().len(), 2);
    assert!(v["spectral_radius"].as_f64().unwrap() < 1.0);
}

#[test]
fn fit_without_convergence_exits_2() {
    let st = setup();
    let args = ["fit", "--data", s(&st.data), "--weights", s(&st.left), "--max-iter", "1"];
    assert_eq!(msar(&args).status.code(), Some(2));
    let mut relaxed = args.to_vec();
    relaxed.push("--allow-nonconverged");
    let v: Value = serde_json::from_str(&ok(&relaxed)).unwrap();
    assert_eq!(v["converged"], false);
}

#[test]
fn select_picks_a_one_based_candidate() {
    let st = setup();
    let out = st.dir.path().join("select.json");
    ok(&[
        "select", "--data", s(&st.data), "--weights", s(&st.left), s(&st.queen), "--omega-from", "1", "--out",
        s(&out),
    ]);
    let v: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let sel = v["selected"].as_u64().unwrap();
    assert!((1..=2).contains(&sel));
    assert_eq!(v["omega_source"], 1);
    assert_eq!(v["candidates"].as_array().unwrap().len(), 2);
}

#[test]
fn select_rejects_out_of_range_omega_source() {
    let st = setup();
    let out = msar(&[
        "select", "--data", s(&st.data), "--weights", s(&st.left), s(&st.queen), "--omega-from", "3",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn average_weights_lie_on_the_simplex() {
    let st = setup();
    let mu = st.dir.path().join("mu.csv");
    let v: Value = serde_json::from_str(&ok(&[
        "average", "--data", s(&st.data), "--weights", s(&st.left), s(&st.queen), "--omega-from", "1", "--mu-out",
        s(&mu),
    ]))
    .unwrap();
    let w: Vec<f64> = v["weights"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert_eq!(w.len(), 2);
    assert!(w.iter().all(|&x| x >= 0.0));
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let text = fs::read_to_string(&mu).unwrap();
    assert_eq!(text.lines().next().unwrap(), "mu1,mu2");
    assert_eq!(text.lines().count(), 49);
}

#[test]
fn split_eval_writes_one_row_per_split_and_method() {
    let st = setup();
    let out = st.dir.path().join("split.csv");
    ok(&[
        "split-eval", "--data", s(&st.data), "--weights", s(&st.left), s(&st.queen), "--splits", "2", "--seed", "5",
        "--out", s(&out),
    ]);
    let text = fs::read_to_string(&out).unwrap();
    assert!(text.lines().next().unwrap().starts_with("split,method"));
    assert!(text.lines().count() > 2);
}

#[test]
fn split_eval_rejects_full_training_ratio() {
    let st = setup();
    let out = msar(&["split-eval", "--data", s(&st.data), "--weights", s(&st.left), "--ratio", "1.0"]);
    assert_eq!(out.status.code(), Some(1));
}

const CONFIG: &str = r#"{
  "n": 20, "p": 2, "q": 2,
  "params": {
    "D": [[0.3, -0.3], [0.5, 0.4]],
    "B": [[-0.5, 1.0], [1.3, 0.3]],
    "Sigma_e": [[0.5, 0.3], [0.3, 0.8]]
  },
  "grid_shape": [4, 5],
  "true_w": {"kind": "lattice", "scheme": "left"},
  "candidates": [{"kind": "lattice", "scheme": "left"}, {"kind": "lattice", "scheme": "queen"}],
  "omega_source": 0,
  "replications": 3,
  "seed": 9
}"#;

#[test]
fn experiment_outputs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, CONFIG).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["experiment", "--config", s(&cfg), "--out", s(&a), "--no-meta-time"]);
    ok(&["experiment", "--config", s(&cfg), "--out", s(&b), "--no-meta-time"]);
    for name in ["summary.csv", "replications.csv", "meta.json"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name} differs between runs"
        );
    }
    let meta: Value = serde_json::from_str(&fs::read_to_string(a.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(meta["replications"], 3);
    assert!(meta.get("unix_time").is_none_or(Value::is_null));
    let summary = fs::read_to_string(a.join("summary.csv")).unwrap();
    assert!(summary.contains("MS,ms_accuracy_W1,mean,"));
}

#[test]
fn experiment_overrides_replications() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, CONFIG).unwrap();
    let out = dir.path().join("o");
    ok(&["experiment", "--config", s(&cfg), "--reps", "1", "--out", s(&out)]);
    let meta: Value = serde_json::from_str(&fs::read_to_string(out.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["replications"], 1);
    assert!(meta["unix_time"].is_u64());
}

#[test]
fn missing_config_exits_1() {
    let out = msar(&["experiment", "--config", "/nonexistent/cfg.json", "--out", "/tmp/unused"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn unknown_flag_exits_1() {
    let out = msar(&["fit", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn version_exits_0() {
    let out = msar(&["--version"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("msar "));
}

/// Compares `--help` output with `tests/golden/<name>.txt`; `UPDATE_GOLDEN=1` rewrites it.
fn golden(name: &str, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_msar")).args(args).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let got = String::from_utf8(out.stdout).unwrap();
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(format!("{name}.txt"));
    if std::env::var("UPDATE_GOLDEN").is_ok_and(|v| v == "1") {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, &got).unwrap();
        return;
    }
    let want = fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing golden file {}", path.display()));
    assert_eq!(got, want, "help text for {name} changed; rerun with UPDATE_GOLDEN=1 if intended");
}

#[test]
fn help_texts_match_golden_files() {
    golden("top", &["--help"]);
    for sub in ["weights", "fit", "select", "average", "simulate", "experiment", "split-eval"] {
        golden(sub, &[sub, "--help"]);
    }
}
