use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn projsel(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_projsel"))
        .args(args)
        .args(["--out-dir", dir.to_str().unwrap()])
        .output()
        .expect("failed to run projsel")
}

fn simulate(dir: &Path, seed: &str) -> Output {
    projsel(
        dir,
        &[
            "simulate", "--dgp", "weakly-relevant", "--n", "80", "--p", "6", "--n-draws", "200",
            "--seed", seed,
        ],
    )
}

fn path_arg(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = simulate(d, "11");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["data.csv", "draws.csv", "truth.json"] {
        assert!(d.join(f).exists(), "missing {f}");
    }
    let data = path_arg(d, "data.csv");
    let draws = path_arg(d, "draws.csv");
    let out = projsel(
        d,
        &["search", "--data", &data, "--draws", &draws, "--clusters", "8", "--seed", "11"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let path_json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("path.json")).unwrap()).unwrap();
    assert_eq!(path_json["schema_version"], 1);
    assert_eq!(path_json["order"].as_array().unwrap().len(), 6);
    // p=6 complete search: 6*7/2 + 1 = 22 projections
    assert_eq!(path_json["projection_count"], 22);

    let path = path_arg(d, "path.json");
    let out = projsel(
        d,
        &[
            "eval", "--data", &data, "--draws", &draws, "--path", &path, "--eval-draws", "100",
            "--seed", "11",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let eval_json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval_json["sizes"].as_array().unwrap().len(), 7);
    let csv = fs::read_to_string(d.join("eval.csv")).unwrap();
    assert!(csv.starts_with("size,delta_elpd,se,elpd,khat_bad_count"));

    let eval = path_arg(d, "eval.json");
    let out = projsel(
        d,
        &[
            "select", "--data", &data, "--draws", &draws, "--path", &path, "--eval", &eval,
            "--rule", "delta", "--smooth",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sel: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("selection.json")).unwrap()).unwrap();
    assert_eq!(sel["schema_version"], 1);
    let smoothed: Vec<f64> = sel["report"]["smoothed_normalized"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    // monotone from size 1 on (size 0 passes through raw)
    for w in smoothed[1..].windows(2) {
        assert!(w[1] >= w[0] - 1e-12);
    }
    assert!(d.join("projection.csv").exists());

    let out = projsel(d, &["distance", "--data", &data, "--draws", &draws]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dist = fs::read_to_string(d.join("distance.csv")).unwrap();
    let rows: Vec<&str> = dist.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    // diagonal zeros and symmetry
    let matrix: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect();
    for j in 0..6 {
        assert_eq!(matrix[j][j], 0.0);
        for jp in 0..6 {
            assert!((matrix[j][jp] - matrix[jp][j]).abs() < 1e-15);
        }
    }
    assert!(d.join("dendrogram.json").exists());
}

#[test]
fn same_seed_byte_identical_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(simulate(a.path(), "42").status.success());
    assert!(simulate(b.path(), "42").status.success());
    for f in ["data.csv", "draws.csv", "truth.json"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f} differs between identical runs"
        );
    }
}

#[test]
fn different_seed_differs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(simulate(a.path(), "1").status.success());
    assert!(simulate(b.path(), "2").status.success());
    assert_ne!(
        fs::read(a.path().join("data.csv")).unwrap(),
        fs::read(b.path().join("data.csv")).unwrap()
    );
}

#[test]
fn validation_error_exit_code_and_json_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let out = projsel(dir.path(), &["simulate", "--dgp", "block-correlated", "--p", "101"]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value =
        serde_json::from_slice(&out.stderr).expect("stderr is not machine-readable JSON");
    assert_eq!(err["kind"], "validation");
    assert!(err["message"].as_str().unwrap().contains("divisible"));
}

#[test]
fn missing_input_file_is_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = projsel(
        dir.path(),
        &["search", "--data", "/nonexistent/data.csv", "--draws", "/nonexistent/draws.csv"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn p_max_and_l1_method_honored() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(simulate(d, "5").status.success());
    let data = path_arg(d, "data.csv");
    let draws = path_arg(d, "draws.csv");
    let out = projsel(
        d,
        &[
            "search", "--data", &data, "--draws", &draws, "--method", "l1", "--p-max", "3",
            "--seed", "5",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let path_json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("path.json")).unwrap()).unwrap();
    assert_eq!(path_json["method"], "l1");
    assert_eq!(path_json["order"].as_array().unwrap().len(), 3);
}

#[test]
fn config_file_unknown_key_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    fs::write(&cfg, r#"{"n": 40, "not_a_real_key": true}"#).unwrap();
    let out = projsel(dir.path(), &["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("config.json");
    fs::write(
        &cfg,
        r#"{"dgp": "weakly-relevant", "n": 30, "p": 4, "n_draws": 50, "seed": 9}"#,
    )
    .unwrap();
    let out = projsel(d, &["simulate", "--config", cfg.to_str().unwrap(), "--n", "45"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let data = fs::read_to_string(d.join("data.csv")).unwrap();
    assert_eq!(data.lines().count() - 1, 45); // flag wins over file's 30
}

#[test]
fn jobs_flag_does_not_change_results() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(simulate(a.path(), "13").status.success());
    assert!(simulate(b.path(), "13").status.success());
    let run = |d: &Path, jobs: &str| {
        let out = projsel(
            d,
            &[
                "search",
                "--data",
                &path_arg(d, "data.csv"),
                "--draws",
                &path_arg(d, "draws.csv"),
                "--seed",
                "13",
                "--jobs",
                jobs,
            ],
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    run(a.path(), "1");
    run(b.path(), "4");
    let strip_timing = |d: &Path| {
        let mut v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(d.join("path.json")).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("t_proj_seconds");
        v
    };
    assert_eq!(strip_timing(a.path()), strip_timing(b.path()));
}

#[test]
fn overfit_demo_writes_dispersion_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = projsel(dir.path(), &["simulate", "--dgp", "overfit-demo", "--seed", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rep: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("dispersion.json")).unwrap())
            .unwrap();
    assert_eq!(rep["schema_version"], 1);
    assert_eq!(rep["n"], 100);
    assert_eq!(rep["p"], 95);
}
