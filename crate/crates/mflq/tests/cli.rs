use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mflq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mflq")).args(args).output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("exp.toml");
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_owned()
}

fn read_csv(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

const SMALL: &str = r#"
system = "dean2017"
algorithm = "mflq_v2"
horizon = 81
seeds = [3, 4]
"#;

#[test]
fn run_writes_one_row_per_phase_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    // The fixed optimal controller never terminates early; T = 81 gives 3 phases.
    let cfg = write_config(dir.path(), &SMALL.replace("mflq_v2", "oracle"));
    let out_dir = dir.path().join("out");
    let out = mflq(&["run", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = read_csv(&out_dir.join("results.csv"));
    assert_eq!(rows.len(), 6);
    let summary = read_csv(&out_dir.join("summary.csv"));
    assert_eq!(summary.len(), 1);
}

#[test]
fn summary_stability_matches_rows() {
    let dir = tempfile::tempdir().unwrap();
    let body = SMALL.replace("horizon = 81", "horizon = 4096").replace("[3, 4]", "{ start = 0, count = 8 }");
    let cfg = write_config(dir.path(), &body);
    let out_dir = dir.path().join("out");
    assert!(mflq(&["run", &cfg, "--out", out_dir.to_str().unwrap()]).status.success());

    let mut rdr = csv::Reader::from_path(out_dir.join("results.csv")).unwrap();
    let header = rdr.headers().unwrap().clone();
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let (seed, stable) = (col("seed"), col("stable"));
    let rows: Vec<_> = rdr.records().map(|r| r.unwrap()).collect();
    let mut last = std::collections::BTreeMap::new();
    for r in &rows {
        last.insert(r[seed].to_owned(), r[stable].to_owned());
    }
    let frac = last.values().filter(|v| v.as_str() == "true").count() as f64 / last.len() as f64;

    let mut rdr = csv::Reader::from_path(out_dir.join("summary.csv")).unwrap();
    let header = rdr.headers().unwrap().clone();
    let i = header.iter().position(|h| h == "stability_fraction").unwrap();
    let s = rdr.records().next().unwrap().unwrap();
    assert_eq!(s[i].parse::<f64>().unwrap(), frac);
}

#[test]
fn oracle_regret_is_small() {
    let dir = tempfile::tempdir().unwrap();
    let body = SMALL.replace("mflq_v2", "oracle").replace("horizon = 81", "horizon = 65536");
    let cfg = write_config(dir.path(), &body);
    let out_dir = dir.path().join("out");
    assert!(mflq(&["run", &cfg, "--out", out_dir.to_str().unwrap()]).status.success());
    let mut rdr = csv::Reader::from_path(out_dir.join("results.csv")).unwrap();
    let header = rdr.headers().unwrap().clone();
    let (c, r) = (
        header.iter().position(|h| h == "cumulative_cost").unwrap(),
        header.iter().position(|h| h == "cumulative_regret").unwrap(),
    );
    for row in rdr.records().map(|r| r.unwrap()) {
        let cost: f64 = row[c].parse().unwrap();
        let regret: f64 = row[r].parse().unwrap();
        // Same controller on independent noise: regret is noise of order sqrt(T).
        assert!(regret.abs() < 0.05 * cost, "{regret} vs {cost}");
    }
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("horizon = 81", "horizon = 2048"));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(mflq(&["run", &cfg, "--out", a.to_str().unwrap()]).status.success());
    assert!(mflq(&["run", &cfg, "--out", b.to_str().unwrap(), "--jobs", "2"]).status.success());
    for f in ["results.csv", "summary.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
}

#[test]
fn config_errors_name_the_field_and_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("horizon = 81", "horizon = -5"));
    let out = mflq(&["run", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("horizon"), "{err}");
    assert!(err.contains("exp.toml:4:"), "{err}");

    let missing = mflq(&["run", dir.path().join("nope.toml").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn injected_failure_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = mflq(&["verify", "mixing", "--inject-failure", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
    assert!(dir.path().join("verify-mixing.csv").exists());
}

#[test]
fn bounds_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = mflq(&["bounds", &cfg, "--policy", "optimal", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = read_csv(&dir.path().join("bounds.csv"));
    assert!(rows.iter().any(|r| &r[0] == "beta_bar"));
}
