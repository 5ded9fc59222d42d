use std::path::Path;
use std::process::{Command, Output};

fn attr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attr")).args(args).env("ATTR_WORKERS", "2").output().unwrap()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_files_drive_every_verb() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("planted6");
    assert!(attr(&["synth", "--fixture", "planted6", "--out", arg(&data)]).status.success());
    let inputs = data.join("inputs.csv");
    let bg = data.join("background.csv");
    let model = data.join("model.txt");
    let source = ["--dataset", arg(&inputs), "--background", arg(&bg), "--model", arg(&model)];
    for verb in ["retro", "rankshap", "sprt", "slime", "global"] {
        let out = dir.path().join(verb);
        let mut args = vec![verb];
        args.extend_from_slice(&source);
        args.extend_from_slice(&["--k", "2", "--seed", "3", "--out", arg(&out)]);
        let res = attr(&args);
        assert_eq!(res.status.code(), Some(0), "{verb}: {}", String::from_utf8_lossy(&res.stderr));
        let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
        assert_eq!(report["procedure"], verb);
        assert!(out.join("table.txt").exists());
    }
}

#[test]
fn stdout_report_matches_written_report() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["retro", "--fixture", "linear8", "--input", "2", "--seed", "8"];
    let printed = attr(&args);
    let mut with_out = args.to_vec();
    with_out.extend_from_slice(&["--out", arg(dir.path())]);
    assert!(attr(&with_out).status.success());
    let written = std::fs::read(dir.path().join("report.json")).unwrap();
    assert_eq!(printed.stdout, written);
}

#[test]
fn exit_codes() {
    // the two leading attributions of null3 are equal, so a tiny cap cannot verify rank 1
    let exhausted = attr(&["rankshap", "--fixture", "null3", "--k", "1", "--max-n", "300", "--seed", "1"]);
    assert_eq!(exhausted.status.code(), Some(2));
    assert_eq!(attr(&["retro", "--fixture", "no-such-fixture"]).status.code(), Some(1));
    assert_eq!(attr(&["retro"]).status.code(), Some(1));
    assert_eq!(attr(&["retro", "--fixture", "linear8", "--input", "99"]).status.code(), Some(1));
    assert_eq!(attr(&["retro", "--unknown-flag"]).status.code(), Some(1));
    assert_eq!(attr(&["--help"]).status.code(), Some(0));
}

#[test]
fn malformed_dataset_reports_the_row() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bad.csv");
    std::fs::write(&csv, "a,b\n1,2\n3,x\n").unwrap();
    let model = dir.path().join("m.txt");
    std::fs::write(&model, "linear regression\n1 1 0\n").unwrap();
    let res = attr(&["retro", "--dataset", arg(&csv), "--model", arg(&model)]);
    assert_eq!(res.status.code(), Some(1));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("line 3") && err.contains("row 2"), "{err}");
}

#[test]
fn global_round_trips_local_attributions() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let args = ["global", "--fixture", "mixture6", "--abs", "--global-n", "150", "--seed", "4", "--out", arg(&first)];
    assert!(attr(&args).status.success());
    let psi = first.join("local_attributions.csv");
    let second = dir.path().join("second");
    assert!(attr(&["global", "--psi", arg(&psi), "--seed", "4", "--out", arg(&second)]).status.success());
    let a: serde_json::Value = serde_json::from_slice(&std::fs::read(first.join("report.json")).unwrap()).unwrap();
    let b: serde_json::Value = serde_json::from_slice(&std::fs::read(second.join("report.json")).unwrap()).unwrap();
    assert_eq!(a["theta"], b["theta"]);
    assert_eq!(a["ranking"], b["ranking"]);
}

#[test]
fn experiment_writes_series() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "experiment", "--fixture", "planted6", "--procedure", "slime", "--k", "2,3", "--alpha", "0.1,0.2", "--reps", "3",
        "--seed", "2", "--out", arg(dir.path()),
    ];
    let res = attr(&args);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let fwer = std::fs::read_to_string(dir.path().join("fwer.csv")).unwrap();
    // 4 cells × 2 inputs plus the header
    assert_eq!(fwer.lines().count(), 9);
    assert!(dir.path().join("counts.csv").exists());
}
