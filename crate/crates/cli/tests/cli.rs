use std::process::Command;

fn fracopt() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fracopt"))
}

#[test]
fn solve_control_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let output = fracopt()
        .args(["solve-control", "--M", "4", "--K", "4", "--s", "0.3,0.6", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let report = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let mut lines = report.lines();
    assert_eq!(
        lines.next().unwrap(),
        "case,s,gamma,M,K,N,zeta,Y,err_control,err_state,cost,iters,pg_norm"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("solve-control,3.00000000000e-1,1.00000000000e0,4,4,36,"));
    let rates = std::fs::read_to_string(dir.path().join("rates.csv")).unwrap();
    assert_eq!(rates.trim(), "case,s,gamma,quantity,slope,levels_used");
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("trunc.ini");
    std::fs::write(
        &cfg,
        "[experiment]\nkind = truncation\n\n[discretization]\nM = 4\nK = 4\nY = 1, 1.5, 2, 2.5\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let output = fracopt()
        .arg("truncation")
        .arg("--config")
        .arg(&cfg)
        .args(["--s", "0.7", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let report = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 3);
    assert!(report.lines().skip(1).all(|l| l.starts_with("truncation,7.00000000000e-1,")));
    let rates = std::fs::read_to_string(out.join("rates.csv")).unwrap();
    assert!(rates.lines().nth(1).unwrap().contains(",exp_decay,"));
}

#[test]
fn mismatched_config_kind_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.ini");
    std::fs::write(&cfg, "kind = conv-time\n").unwrap();
    let output = fracopt().arg("conv-space").arg("--config").arg(&cfg).output().unwrap();
    assert!(!output.status.success());
}

#[test]
fn invalid_parameter_is_rejected() {
    let output = fracopt().args(["solve-state", "--s", "1.5"]).output().unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("s = 1.5"));
}
