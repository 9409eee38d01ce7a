use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
id = "cli"
lambdas = [0.2, 0.5]
eval_layouts = 2
cdf_layouts = 3
n_train = 4
n_test = 2
sim_slots = 2000
timing_n = [10, 20]
timing_reps = 1
[layout]
n_links = 6
side_length = 100.0
d_max = 30.0
[net]
conv_sizes = [3, 3, 3]
hidden_sizes = [4, 4]
grid_resolution = 16
[train]
epochs = 1
batch_size = 2
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_d2d-paoi"))
        .current_dir(dir)
        .args(["--config", "c.toml", "--out-dir", "out", "--threads", "2"])
        .args(args)
        .output()
        .unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), CONFIG).unwrap();
    dir
}

#[test]
fn pipeline_commands_succeed_and_write_csv_with_metadata() {
    let dir = setup();
    let d = dir.path();
    assert!(run(d, &["gen"]).status.success());
    let layout = "out/test/layout_00000.csv";
    for args in [
        vec!["analyze", "--layout", layout],
        vec!["simulate", "--layout", layout, "--slots", "5000"],
        vec!["optimize", "--layout", layout, "--method", "cd"],
        vec!["train"],
        vec!["infer", "--layout", layout, "--weights", "out/gli_net.bin"],
        vec!["paoi-vs-lambda"],
        vec!["paoi-cdf"],
        vec!["bench-timing"],
    ] {
        let out = run(d, &args);
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    for name in [
        "analysis",
        "sim_summary",
        "trace",
        "policy",
        "training_curve",
        "paoi_vs_lambda",
        "paoi_cdf",
        "bench_timing",
    ] {
        let csv = d.join("out").join(format!("{name}.csv"));
        assert!(csv.exists(), "{name}");
        assert!(
            d.join("out").join(format!("{name}.meta.json")).exists(),
            "{name}"
        );
    }
    let lambda = fs::read_to_string(d.join("out/paoi_vs_lambda.csv")).unwrap();
    assert_eq!(
        lambda.lines().next().unwrap(),
        "lambda,method,mean_paoi,sim_paoi,ci95"
    );
    assert_eq!(lambda.lines().count(), 1 + 2 * 2);
}

#[test]
fn same_seed_reproduces_outputs() {
    let dir = setup();
    let d = dir.path();
    run(d, &["paoi-cdf"]);
    let a = fs::read(d.join("out/paoi_cdf.csv")).unwrap();
    run(d, &["paoi-cdf"]);
    assert_eq!(a, fs::read(d.join("out/paoi_cdf.csv")).unwrap());
    run(d, &["--seed", "9", "paoi-cdf"]);
    assert_ne!(a, fs::read(d.join("out/paoi_cdf.csv")).unwrap());
}

#[test]
fn validate_passes_and_writes_report() {
    let dir = setup();
    let out = run(dir.path(), &["validate"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/validate.json")).unwrap())
            .unwrap();
    assert_eq!(report["passed"], true);
}

#[test]
fn bad_input_exits_with_two() {
    let dir = setup();
    let d = dir.path();
    assert_eq!(run(d, &["infer"]).status.code(), Some(2));
    assert_eq!(
        run(d, &["analyze", "--layout", "missing.csv"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(run(d, &["frobnicate"]).status.code(), Some(2));
    fs::write(d.join("c.toml"), "methods = []").unwrap();
    assert_eq!(run(d, &["paoi-cdf"]).status.code(), Some(2));
    fs::write(d.join("c.toml"), "methods = [\"gli_net\"]").unwrap();
    assert_eq!(run(d, &["paoi-vs-lambda"]).status.code(), Some(2));
}
