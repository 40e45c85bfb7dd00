use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use filter_funnel::experiment::{read_metadata, Bundle};
use tempfile::TempDir;

fn example(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples").join(name)
}

fn funnel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_funnel"))
        .args(args)
        .env_remove("FUNNEL_OUTPUT_DIR")
        .env_remove("FUNNEL_WORKERS")
        .output()
        .expect("binary runs")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn write_config(dir: &TempDir, name: &str, body: &str) -> PathBuf {
    let path = dir.path().join(name);
    fs::write(&path, body).unwrap();
    path
}

fn paper_config_with(extra: &str) -> String {
    let base = fs::read_to_string(example("paper_sec4.toml")).unwrap();
    format!("{base}\n{extra}")
}

fn simulate_paper(out: &Path) -> Output {
    let cfg = example("paper_sec4.toml");
    funnel(&["simulate", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap()])
}

#[test]
fn simulate_writes_bundle_and_rows_stay_in_funnel() {
    let dir = TempDir::new().unwrap();
    let out = simulate_paper(dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let bundle = Bundle::new(dir.path(), "paper_sec4");
    assert!(bundle.state.exists() && bundle.meta.exists());

    let mut reader = csv::Reader::from_path(&bundle.trace).unwrap();
    let col = reader
        .headers()
        .unwrap()
        .iter()
        .position(|h| h == "funnel_ratio")
        .unwrap();
    let mut rows = 0;
    for rec in reader.records() {
        let ratio: f64 = rec.unwrap()[col].parse().unwrap();
        assert!(ratio < 1.0);
        rows += 1;
    }
    assert!((1_000..=100_000).contains(&rows), "{rows} rows");

    let meta = read_metadata(&bundle.meta).unwrap();
    assert!(meta.completed);
    assert_eq!(meta.rows, rows);
}

#[test]
fn feasible_output_matches_metadata_exactly() {
    let dir = TempDir::new().unwrap();
    let cfg = example("paper_sec4.toml");
    let feas = funnel(&["feasible", cfg.to_str().unwrap()]);
    assert_eq!(feas.status.code(), Some(0));
    assert_eq!(simulate_paper(dir.path()).status.code(), Some(0));
    let meta = read_metadata(&Bundle::new(dir.path(), "paper_sec4").meta).unwrap();
    assert_eq!(text(&feas.stdout), meta.feasibility_text);
}

#[test]
fn trace_is_bit_identical_across_runs() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    assert_eq!(simulate_paper(a.path()).status.code(), Some(0));
    assert_eq!(simulate_paper(b.path()).status.code(), Some(0));
    let read = |d: &TempDir| fs::read(Bundle::new(d.path(), "paper_sec4").trace).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn output_dir_from_environment() {
    let dir = TempDir::new().unwrap();
    let cfg = example("paper_sec4.toml");
    let out = Command::new(env!("CARGO_BIN_EXE_funnel"))
        .args(["simulate", cfg.to_str().unwrap()])
        .env("FUNNEL_OUTPUT_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(Bundle::new(dir.path(), "paper_sec4").trace.exists());
}

#[test]
fn diagnose_stored_run() {
    let dir = TempDir::new().unwrap();
    assert_eq!(simulate_paper(dir.path()).status.code(), Some(0));
    let bundle = Bundle::new(dir.path(), "paper_sec4");
    let cfg = example("paper_sec4.toml");
    let out = funnel(&["diagnose", bundle.trace.to_str().unwrap(), cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let report = text(&out.stdout);
    for label in ["zeta_1 dual form", "Z identity", "Z_2 reconstruction", "eps_min"] {
        assert!(report.contains(label), "missing {label}:\n{report}");
    }
    assert!(bundle.diagnostics().exists());
}

#[test]
fn diagnose_rejects_mismatched_config() {
    let dir = TempDir::new().unwrap();
    assert_eq!(simulate_paper(dir.path()).status.code(), Some(0));
    let trace = Bundle::new(dir.path(), "paper_sec4").trace;
    let cfg = example("chain_sweep.toml");
    let out = funnel(&["diagnose", trace.to_str().unwrap(), cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn infeasible_radius_exits_3_without_files() {
    let dir = TempDir::new().unwrap();
    let body = fs::read_to_string(example("paper_sec4.toml"))
        .unwrap()
        .replace("theta_hat = [0.25, 0.01]", "theta_hat = [0.25, 1e-12]");
    let cfg = write_config(&dir, "bad.toml", &body);
    let out_dir = dir.path().join("out");
    let feas = funnel(&["feasible", cfg.to_str().unwrap()]);
    assert_eq!(feas.status.code(), Some(3));
    assert!(text(&feas.stdout).contains("VIOLATED"));
    let sim = funnel(&["simulate", cfg.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()]);
    assert_eq!(sim.status.code(), Some(3));
    assert!(!out_dir.exists() || fs::read_dir(&out_dir).unwrap().count() == 0);
}

#[test]
fn huge_min_step_exits_2_and_names_constraint() {
    let dir = TempDir::new().unwrap();
    let body = fs::read_to_string(example("paper_sec4.toml"))
        .unwrap()
        .replace("t_end = 10.0", "t_end = 10.0\nh_init = 0.5\nh_min = 0.5\nh_max = 1.0");
    let cfg = write_config(&dir, "coarse.toml", &body);
    let out = funnel(&["simulate", cfg.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = text(&out.stderr);
    assert!(err.contains("nearest constraint"), "{err}");
}

#[test]
fn config_errors_list_every_key() {
    let dir = TempDir::new().unwrap();
    let body = r#"
[plant]
name = "paper_nonlinear"
gamma = [[0.0, 1.0], [-1.0, 0.0]]

[controller]
gain = -1.0
theta_hat = [0.25, -0.01]

[funnel]
kind = "paper"

[reference]
kind = "paper"

[integrator]
rel_tol = 0.0
colour = "blue"
"#;
    let cfg = write_config(&dir, "broken.toml", body);
    let out = funnel(&["simulate", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = text(&out.stderr);
    for key in ["plant.gamma", "controller.gain", "controller.theta_hat.1", "integrator.colour"] {
        assert!(err.contains(key), "missing {key}:\n{err}");
    }
}

#[test]
fn syntax_error_is_reported() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "syntax.toml", "[plant\nname = 1");
    let out = funnel(&["feasible", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("TOML"));
}

#[test]
fn sweep_rows_are_ordered_and_worker_independent() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let cfg = example("paper_radius_sweep.toml");
    let run = |d: &TempDir, workers: &str| {
        let out = funnel(&[
            "sweep",
            cfg.to_str().unwrap(),
            "--out-dir",
            d.path().to_str().unwrap(),
            "--workers",
            workers,
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
        fs::read_to_string(d.path().join("paper_radius_sweep.sweep.csv")).unwrap()
    };
    let (one, three) = (run(&a, "1"), run(&b, "3"));
    assert_eq!(one, three);

    let mut reader = csv::Reader::from_reader(one.as_bytes());
    let headers = reader.headers().unwrap().clone();
    let value = headers.iter().position(|h| h == "controller.theta_hat.0").unwrap();
    let done = headers.iter().position(|h| h == "completed").unwrap();
    let rows: Vec<_> = reader.records().map(Result::unwrap).collect();
    let values: Vec<&str> = rows.iter().map(|r| &r[value]).collect();
    assert_eq!(values, ["0.1", "0.25", "0.5"]);
    assert!(rows.iter().all(|r| &r[done] == "true"));
}

#[test]
fn empty_sweep_axis_is_rejected() {
    let dir = TempDir::new().unwrap();
    let body = paper_config_with("[sweep]\n[[sweep.axis]]\nkey = \"controller.gain\"\nvalues = []\n");
    let cfg = write_config(&dir, "empty.toml", &body);
    let out = funnel(&["sweep", cfg.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("sweep"));
}
