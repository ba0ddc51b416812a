use std::fs;
use std::path::Path;
use std::process::Command;

use mhd_ensemble::io::config::{parse_config, parse_pairs, Experiment};
use mhd_ensemble::io::driver::run_experiment;
use mhd_ensemble::io::output::parse_rate_table;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mhd-ensemble"));
    c.env("RUST_LOG", "warn");
    c
}

fn out_arg(dir: &Path) -> String {
    dir.display().to_string()
}

#[test]
fn converge_writes_table_counters_and_echo() {
    let dir = tempfile::tempdir().unwrap();
    let status = bin().args(["converge", "--levels", "3", "--out", &out_arg(dir.path())]).output().unwrap().status;
    assert_eq!(status.code(), Some(0));
    let table = parse_rate_table(&fs::read_to_string(dir.path().join("rates.csv")).unwrap()).unwrap();
    assert_eq!(table.len(), 3);
    assert!(table.rows[0].rate_v.is_none() && table.rows[2].rate_v.is_some());

    let echo = fs::read_to_string(dir.path().join("config.txt")).unwrap();
    let cfg = parse_config(None, &echo, &[]).unwrap();
    assert_eq!(cfg.levels, 3);
    assert_eq!(cfg.nu, 0.01);

    let counters = fs::read_to_string(dir.path().join("counters.txt")).unwrap();
    // level 2 has 8 steps with the exact bootstrap: 7 BDF2 steps, 2 factorizations each
    assert!(counters.lines().nth(1).unwrap().contains("factorizations=14"), "{counters}");
}

#[test]
fn naive_flag_multiplies_factorizations() {
    let dir = tempfile::tempdir().unwrap();
    let status = bin()
        .args(["converge", "--levels", "1", "--naive", "--bootstrap", "be", "--out", &out_arg(dir.path())])
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(0));
    let counters = fs::read_to_string(dir.path().join("counters.txt")).unwrap();
    // 4 steps, 2 sub-steps, 4 members
    assert!(counters.contains("factorizations=32"), "{counters}");
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.cfg");
    fs::write(&cfg_path, "# study\neps = 0.01\nlevels = 1\nsolver = iterative\n").unwrap();
    let out = dir.path().join("out");
    let status = bin()
        .args(["converge", "--config", &out_arg(&cfg_path), "--eps", "0.1", "--out", &out_arg(&out)])
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(0));
    let echo = fs::read_to_string(out.join("config.txt")).unwrap();
    let pairs = parse_pairs(&echo).unwrap();
    let get = |k: &str| pairs.iter().find(|(key, _)| key == k).map(|(_, v)| v.clone()).unwrap();
    assert_eq!(get("eps"), "0.1");
    assert_eq!(get("levels"), "1");
    assert_eq!(get("solver"), "iterative");
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.cfg");
    fs::write(&cfg_path, "foo=1\n").unwrap();
    let out = bin().args(["converge", "--config", &out_arg(&cfg_path)]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("foo"));

    assert_eq!(bin().args(["converge", "--solver", "magic"]).output().unwrap().status.code(), Some(1));
    assert_eq!(bin().arg("converge").args(["--dt", "0.0003"]).output().unwrap().status.code(), Some(1));
    assert_eq!(bin().output().unwrap().status.code(), Some(1));
}

#[test]
fn energy_subcommand_reports_per_member() {
    let dir = tempfile::tempdir().unwrap();
    let status = bin().args(["energy", "--n", "4", "--out", &out_arg(dir.path())]).output().unwrap().status;
    assert_eq!(status.code(), Some(0));
    let csv = fs::read_to_string(dir.path().join("energy.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")), "{csv}");
}

#[test]
fn channel_subcommand_writes_snapshots() {
    let dir = tempfile::tempdir().unwrap();
    let status = bin()
        .args(["channel", "--T", "0.005", "--snapshot-interval", "0", "--out", &out_arg(dir.path())])
        .output()
        .unwrap()
        .status;
    assert_eq!(status.code(), Some(0));
    for name in ["channel_mean_000000.vtk", "channel_mean_000005.vtk", "channel_member4_000005.vtk"] {
        let text = fs::read_to_string(dir.path().join(name)).unwrap();
        assert!(text.contains("VECTORS B double") && text.contains("SCALARS B_mag double 1"), "{name}");
    }
}

#[test]
fn identical_configs_give_identical_csv() {
    let run = |dir: &Path| {
        let mut cfg = parse_config(Some(Experiment::Converge), "levels = 3\nthreads = 1\n", &[]).unwrap();
        cfg.out = dir.to_path_buf();
        run_experiment(&cfg).unwrap();
        fs::read(dir.join("rates.csv")).unwrap()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(run(a.path()), run(b.path()));
}
