use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn covadj(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_covadj"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

/// Column `name` of every data row of a CSV document.
fn column(csv: &str, name: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let j = header.iter().position(|h| *h == name).unwrap_or_else(|| panic!("no column {name} in {header:?}"));
    lines.map(|l| l.split(',').nth(j).unwrap().to_string()).collect()
}

/// Sixty units; `x` is missing for every fifth unit and `w` for every seventh.
fn partial_csv() -> String {
    let mut s = String::from("z,y,x,w\n");
    for i in 0..60u32 {
        let z = i % 2;
        let x = ((i * 37 % 23) as f64 - 11.0) / 5.0;
        let w = ((i * 53 % 29) as f64 - 14.0) / 7.0;
        let y = 1.0 + z as f64 + 0.8 * x - 0.5 * w + ((i * 71 % 17) as f64 - 8.0) / 6.0;
        let xs = if i % 5 == 2 { String::new() } else { x.to_string() };
        let ws = if i % 7 == 3 { String::new() } else { w.to_string() };
        s.push_str(&format!("{z},{y},{xs},{ws}\n"));
    }
    s
}

#[test]
fn unadjusted_on_a_complete_file_is_the_mean_difference() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "d.csv", "z,y\n1,5\n1,3\n0,2\n0,4\n");
    let o = covadj(&["estimate", "--data", data.to_str().unwrap(), "--estimator", "unadjusted", "--format", "csv"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let tau: f64 = column(&stdout(&o), "tau_hat")[0].parse().unwrap();
    assert_eq!(tau, 1.0);
}

#[test]
fn fill_constant_does_not_change_ancova_with_indicators() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "d.csv", &partial_csv());
    let run = |c: &str| {
        let o = covadj(&[
            "estimate", "--data", data.to_str().unwrap(), "--covariates", "x,w", "--estimator", "ancova,ow",
            "--impute", c, "--format", "csv",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        column(&stdout(&o), "tau_hat").into_iter().map(|s| s.parse::<f64>().unwrap()).collect::<Vec<_>>()
    };
    let a = run("constant:0");
    let b = run("constant:9");
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-8 * (1.0 + x.abs()), "{x} vs {y}");
    }
}

#[test]
fn json_output_carries_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "d.csv", &partial_csv());
    let o = covadj(&["estimate", "--data", data.to_str().unwrap(), "--covariates", "x,w", "--estimator", "ancova", "--impute", "mean"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let res = &v[0];
    assert!(res["tau_hat"].is_number());
    assert!(res["provenance"]["centering"].as_array().is_some_and(|c| !c.is_empty()));
    assert!(res["provenance"]["imputation"].as_array().is_some_and(|c| !c.is_empty()));
}

#[test]
fn missing_data_file_fails_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("result.json");
    let o = covadj(&[
        "estimate", "--data", dir.path().join("absent.csv").to_str().unwrap(), "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(!out.exists());
    assert!(o.stdout.is_empty());
}

#[test]
fn unknown_column_and_estimator_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "d.csv", &partial_csv());
    let o = covadj(&["estimate", "--data", data.to_str().unwrap(), "--covariates", "nope"]);
    assert_ne!(o.status.code(), Some(0));
    let o = covadj(&["estimate", "--data", data.to_str().unwrap(), "--estimator", "magic"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("ow_ipw") && err.contains("complete_unit"), "{err}");
}

#[test]
fn unknown_simulation_method_lists_valid_names() {
    let o = covadj(&["simulate", "--preset", "table1_mcar30_n100", "--methods", "unadjusted,bogus", "--reps", "5"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("ancova") && err.contains("wls"), "{err}");
}

#[test]
fn preset_report_has_every_table_row() {
    let o = covadj(&["simulate", "--preset", "table1_mcar30_n100", "--reps", "40", "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let labels = column(&text, "method");
    let want: Vec<String> = covadj::simlab::reference_values()
        .into_iter()
        .filter(|v| v.preset_name() == "table1_mcar30_n100")
        .map(|v| v.method_label())
        .collect();
    assert!(!want.is_empty());
    for w in want {
        assert!(labels.iter().any(|l| l.trim_matches('"') == w), "missing row {w}");
    }
}

#[test]
fn seeded_simulation_is_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for (threads, path) in [("1", &a), ("4", &b)] {
        let o = covadj(&[
            "simulate", "--preset", "table5_mcar30_n100", "--reps", "30", "--seed", "9", "--threads", threads,
            "--out", path.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn balance_weights_roster_columns_and_applies_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "d.csv", &partial_csv());
    let o = covadj(&["balance", "--data", data.to_str().unwrap(), "--covariates", "x,w", "--impute", "mean"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let cols = column(&text, "column");
    let roster = column(&text, "in_roster");
    let weighted = column(&text, "asd_weighted");
    let flags = column(&text, "imbalanced_unweighted");
    let unweighted = column(&text, "asd_unweighted");
    for i in 0..cols.len() {
        if roster[i] == "true" && !weighted[i].is_empty() {
            assert!(weighted[i].parse::<f64>().unwrap() < 1e-8, "{}", cols[i]);
        }
        if let Ok(u) = unweighted[i].parse::<f64>() {
            assert_eq!(flags[i] == "true", u > 0.1);
        }
    }

    let strict = covadj(&["balance", "--data", data.to_str().unwrap(), "--covariates", "x,w", "--threshold", "1000"]);
    assert!(column(&stdout(&strict), "imbalanced_unweighted").iter().all(|f| f == "false"));
    let bad = covadj(&["balance", "--data", data.to_str().unwrap(), "--threshold", "-1"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn config_file_drives_estimation() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "d.csv", &partial_csv());
    let cfg = write(
        dir.path(),
        "analysis.json",
        r#"{
  "data": "d.csv",
  "schema": {"columns": {"z": "treatment", "y": "outcome", "x": "covariate:continuous", "w": "covariate:continuous"}},
  "methods": [{"estimator": "ow", "imputation": "mean"}, {"estimator": "unadjusted"}],
  "bootstrap": {"replicates": 50, "seed": 4},
  "format": "csv"
}"#,
    );
    let o = covadj(&["estimate", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert_eq!(column(&text, "estimator"), vec!["ow", "unadjusted"]);
    assert!(column(&text, "var_bootstrap").iter().all(|v| v.parse::<f64>().unwrap() > 0.0));
    let again = covadj(&["estimate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(stdout(&again), text);
}

#[test]
fn probe_grid_from_the_command_line() {
    let o = covadj(&["probe", "--rhos", "0.2,0.6", "--missing", "0,0.3", "--reps", "20", "--seed", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 5);
    let re: Vec<f64> = column(&text, "relative_efficiency").iter().map(|v| v.parse().unwrap()).collect();
    assert!(re.iter().all(|r| *r > 0.8));
    let bad = covadj(&["probe", "--rhos", "1.5"]);
    assert_eq!(bad.status.code(), Some(2));
}
