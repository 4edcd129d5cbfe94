use std::process::Command;

fn rcmlab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rcmlab"))
}

const HEADER: &str = "config_hash,seed,n,status,lambda1,min_pi,psi1_zn_sq,mass_Dn,trap_count,quotient_stat,iters,wall_ms";

#[test]
fn spectrum_run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("spec");
    let st = rcmlab()
        .args(["spectrum", "--law", "constant:1", "--n", "3", "--seeds", "1", "--threads", "1", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    let csv = std::fs::read_to_string(out.join("runs.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(HEADER));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[3], "ok");
    let l: f64 = row[4].parse().unwrap();
    assert!((l - 4.0 * (1.0 - (std::f64::consts::PI / 8.0).cos())).abs() < 1e-8);
    assert!(out.join("summary.json").is_file());
    assert!(out.join("plotdata").is_dir());
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"experiment": "spectrum", "d": 2, "gamma": 0.5, "n_grid": [2, 3], "seeds": 2}"#).unwrap();
    let out = dir.path().join("o");
    let st = rcmlab()
        .args(["spectrum", "--n", "2", "--threads", "1", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    let csv = std::fs::read_to_string(out.join("runs.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.split(',').nth(2) == Some("2")));
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["spectrum", "--gamma", "-1", "--n", "2"],
        vec!["spectrum", "--dim", "1", "--gamma", "0.5", "--n", "2"],
        vec!["scaling", "--gamma", "0.5", "--n", "4", "--seeds", "0"],
        vec!["spectrum", "--law", "weird:3", "--n", "2"],
    ] {
        let st = rcmlab().args(&args).arg("--out").arg(dir.path().join("x")).status().unwrap();
        assert_eq!(st.code(), Some(2), "{args:?}");
    }
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"d": 2, "bogus": 1}"#).unwrap();
    let st = rcmlab().args(["spectrum", "--config"]).arg(&bad).status().unwrap();
    assert_eq!(st.code(), Some(2));
}

#[test]
fn io_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain");
    std::fs::write(&file, "x").unwrap();
    let st = rcmlab()
        .args(["spectrum", "--gamma", "0.5", "--n", "2", "--seeds", "1", "--out"])
        .arg(file.join("sub"))
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(3));
    let st = rcmlab().args(["spectrum", "--config"]).arg(dir.path().join("missing.json")).status().unwrap();
    assert_eq!(st.code(), Some(3));
}
