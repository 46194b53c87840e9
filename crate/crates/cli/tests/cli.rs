use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn semivary(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semivary"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn manifest(path: &Path) -> HashMap<String, String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn rows_per_subject(data: &Path) -> HashMap<String, usize> {
    let mut rdr = csv::Reader::from_path(data).unwrap();
    let mut counts = HashMap::new();
    for rec in rdr.records() {
        *counts.entry(rec.unwrap()[0].to_string()).or_insert(0) += 1;
    }
    counts
}

fn simulate(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["simulate", "--out-dir", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    semivary(&args)
}

#[test]
fn simulate_constant_cluster_size() {
    let dir = tempfile::tempdir().unwrap();
    let out = simulate(dir.path(), &["--n", "10", "--m0", "2", "--mr", "0", "--seed", "3"]);
    assert!(out.status.success());
    let counts = rows_per_subject(&dir.path().join("data.csv"));
    assert_eq!(counts.len(), 10);
    assert!(counts.values().all(|&m| m == 2));
    assert!(dir.path().join("truth.csv").exists());
}

#[test]
fn simulate_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        assert!(simulate(d.path(), &["--n", "25", "--seed", "11"]).status.success());
    }
    for f in ["data.csv", "truth.csv", "manifest.txt"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn simulate_diverging_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["--n", "10", "--scenario", "diverging", "--B", "1.5", "--C", "4", "--seed", "5"];
    assert!(simulate(dir.path(), &args).status.success());
    let mut rdr = csv::Reader::from_path(dir.path().join("data.csv")).unwrap();
    let mut times: HashMap<String, Vec<f64>> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        times.entry(rec[0].to_string()).or_default().push(rec[1].parse().unwrap());
    }
    let equispaced = |t: &Vec<f64>| {
        t.len() > 12 && t.windows(3).all(|w| ((w[2] - w[1]) - (w[1] - w[0])).abs() < 1e-9)
    };
    let dense = times.values().filter(|t| equispaced(t)).count();
    assert_eq!(dense, (4.0 * 10f64.powf(0.375)).ceil().min(10.0) as usize);
}

#[test]
fn simulate_without_seed_prints_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = simulate(dir.path(), &["--n", "5"]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    let printed = stdout.lines().find_map(|l| l.strip_prefix("seed: ")).unwrap();
    assert_eq!(manifest(&dir.path().join("manifest.txt"))["seed"], printed);
}

#[test]
fn simulate_rejects_bad_rho() {
    let dir = tempfile::tempdir().unwrap();
    let out = simulate(dir.path(), &["--rho", "1.5", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn fit_writes_tables_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    assert!(simulate(dir.path(), &["--n", "60", "--seed", "2"]).status.success());
    let data = dir.path().join("data.csv");
    let out_dir = dir.path().join("fit");
    let out = semivary(&["fit", data.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let m = manifest(&out_dir.join("manifest.txt"));
    let h1: f64 = m["h1"].parse().unwrap();
    let h3: f64 = m["h3"].parse().unwrap();
    assert!((h3 - 2.0 * h1).abs() < 1e-12);
    assert_eq!(m["config.h3_multiplier"], "2");

    let mut rdr = csv::Reader::from_path(out_dir.join("beta.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 8);
    let row = &rows[0];
    let num = |i: usize| row[i].parse::<f64>().unwrap();
    assert_eq!(num(4), num(2) / num(3));

    let curves = fs::read_to_string(out_dir.join("curves.csv")).unwrap();
    let header = curves.lines().next().unwrap();
    assert!(header.contains("ll_updated_lower_g1") && header.contains("ll_updated_upper_g4"));
    for f in ["variance.csv", "surface.csv", "cv.csv"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
}

#[test]
fn fit_config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    assert!(simulate(dir.path(), &["--n", "40", "--seed", "4"]).status.success());
    let cfg = dir.path().join("cfg.txt");
    fs::write(&cfg, "# fixed bandwidths\nh1=0.2\nh2=0.2\ncov_grid_size=21\n").unwrap();
    let out_dir = dir.path().join("fit");
    let out = semivary(&[
        "fit",
        dir.path().join("data.csv").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "h1=0.25",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = manifest(&out_dir.join("manifest.txt"));
    assert_eq!(m["h1"], "0.25");
    assert_eq!(m["h2"], "0.2");
    assert_eq!(m["h3"], "0.5");
}

#[test]
fn unknown_config_key_is_fatal() {
    let dir = tempfile::tempdir().unwrap();
    assert!(simulate(dir.path(), &["--n", "5", "--seed", "1"]).status.success());
    let out = semivary(&[
        "fit",
        dir.path().join("data.csv").to_str().unwrap(),
        "--set",
        "bogus=1",
        "--out-dir",
        dir.path().join("fit").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn validate_reports_bad_times() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bad.csv");
    fs::write(&csv, "subject,t,y,x1,z1\na,0.1,1,0.5,1\na,1.7,2,0.1,1\nb,0.3,1,0.2,1\n").unwrap();
    let out = semivary(&["validate", csv.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));

    let out = semivary(&["validate", csv.to_str().unwrap(), "--rescale-time"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn validate_flags_non_intercept_z() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bad.csv");
    fs::write(&csv, "subject,t,y,x1,z1\na,0.1,1,0.5,2\na,0.7,2,0.1,1\n").unwrap();
    let out = semivary(&["validate", csv.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn numerical_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    // far fewer observations than spline coefficients
    assert!(simulate(dir.path(), &["--n", "3", "--m0", "2", "--mr", "0", "--seed", "1"]).status.success());
    let out = semivary(&[
        "fit",
        dir.path().join("data.csv").to_str().unwrap(),
        "--out-dir",
        dir.path().join("fit").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("step 1"));
}

fn mc(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "mc",
        "--n",
        "30",
        "--reps",
        "3",
        "--set",
        "h1=0.2",
        "--set",
        "h2=0.2",
        "--set",
        "cov_grid_size=21",
        "--out-dir",
        dir.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    semivary(&args)
}

#[test]
fn mc_three_variants() {
    let dir = tempfile::tempdir().unwrap();
    let out = mc(dir.path(), &["--variants", "independent,efficient,oracle", "--seed", "9"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    for v in ["independent", "efficient", "oracle"] {
        assert!(csv.lines().any(|l| l.split(',').nth(2) == Some(v)), "{v}");
    }
    assert!(dir.path().join("summary.md").exists());
    let raw = fs::read_to_string(dir.path().join("raw.csv")).unwrap();
    assert!(raw.lines().count() > 3);
}

#[test]
fn mc_generated_seed_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let out = mc(dir.path(), &["--variants", "independent"]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    let printed = stdout.lines().find_map(|l| l.strip_prefix("seed: ")).unwrap();
    assert_eq!(manifest(&dir.path().join("manifest.txt"))["seed"], printed);
}

#[test]
fn mc_summary_independent_of_workers() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let vs = ["--variants", "independent,efficient", "--seed", "21"];
    assert!(mc(a.path(), &[&["--workers", "1"], &vs[..]].concat()).status.success());
    assert!(mc(b.path(), &[&["--workers", "3"], &vs[..]].concat()).status.success());
    for f in ["summary.csv", "summary.md", "raw.csv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn mc_rejects_unknown_variant() {
    let dir = tempfile::tempdir().unwrap();
    let out = mc(dir.path(), &["--variants", "bogus", "--seed", "1"]);
    assert!(!out.status.success());
}
