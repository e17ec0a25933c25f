use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ces(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ces"))
        .args(args)
        .current_dir(cwd)
        .env_remove("CES_OUT")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in walk(dir) {
        let rel = entry.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
        out.push((rel, fs::read(&entry).unwrap()));
    }
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}

#[test]
fn rerun_with_same_seed_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = ces(&["run", "--seed", "7", "--out", "a"], tmp.path());
    assert!(a.status.success(), "{}", stderr(&a));
    let b = ces(&["run", "--seed", "7", "--out", "b"], tmp.path());
    assert!(b.status.success(), "{}", stderr(&b));
    let fa = files(&tmp.path().join("a"));
    let fb = files(&tmp.path().join("b"));
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    for expected in [
        "opf.json",
        "dlmp.csv",
        "bus_stack.csv",
        "incentives.csv",
        "offers.csv",
        "periods.csv",
        "session.json",
        "events.jsonl",
    ] {
        assert!(names.contains(&expected), "missing {expected} in {names:?}");
    }
    assert!(names.iter().any(|n| n.starts_with("ledger")));
    assert_eq!(fa, fb);

    let session: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("a/session.json")).unwrap()).unwrap();
    assert_eq!(session["conservation"]["holds"], serde_json::json!(true));
}

#[test]
fn tampered_ledger_fails_verification_with_height() {
    let tmp = tempfile::tempdir().unwrap();
    let run = ces(&["run", "--periods", "4", "--out", "r"], tmp.path());
    assert!(run.status.success(), "{}", stderr(&run));
    let ok = ces(&["ledger", "verify", "r/ledger"], tmp.path());
    assert!(ok.status.success(), "{}", stderr(&ok));
    assert!(stdout(&ok).contains("\"ok\": true"));

    let ledger = tmp.path().join("r/ledger");
    let mut segments = walk(&ledger);
    segments.sort();
    let first = &segments[0];
    let mut bytes = fs::read(first).unwrap();
    let at = bytes.len() / 2;
    bytes[at] ^= 0x5a;
    fs::write(first, bytes).unwrap();

    let bad = ces(&["ledger", "verify", "r/ledger"], tmp.path());
    assert!(!bad.status.success());
    assert!(stderr(&bad).contains("first bad height"), "{}", stderr(&bad));
}

#[test]
fn dlmp_lists_every_bus_of_a_56_bus_feeder() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = ces(&["fixture", "--buses", "56", "--seed", "11", "--out", "fx"], tmp.path());
    assert!(fx.status.success(), "{}", stderr(&fx));
    let solve = ces(
        &["solve", "--feeder", "fx/feeder56.json", "--scenario", "fx/scenario56.json", "--out", "s"],
        tmp.path(),
    );
    assert!(solve.status.success(), "{}", stderr(&solve));
    assert!(stdout(&solve).starts_with("Optimal"));
    let prices = ces(&["dlmp", "--period", "18", "--results", "s"], tmp.path());
    assert!(prices.status.success(), "{}", stderr(&prices));
    let text = stdout(&prices);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("bus,dlmp"));
    let rows: Vec<(usize, f64)> = lines
        .map(|l| {
            let (b, p) = l.split_once(',').unwrap();
            (b.parse().unwrap(), p.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 56);
    assert!(rows.iter().all(|(_, p)| p.is_finite()));

    let outside = ces(&["dlmp", "--period", "24", "--results", "s"], tmp.path());
    assert!(!outside.status.success());
}

#[test]
fn bad_flags_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [
        vec!["run", "--agents", "sometimes"],
        vec!["run", "--faults", "melt:1"],
        vec!["run", "--feeder", "x.json"],
        vec!["run", "--periods", "25"],
        vec!["run", "--ordering-nodes", "0"],
        vec!["dlmp", "--period", "0", "--results", "missing"],
        vec!["ledger", "verify", "missing"],
        vec!["fixture", "--buses", "1"],
    ] {
        let out = ces(&args, tmp.path());
        assert!(!out.status.success(), "{args:?} succeeded");
        assert!(!stderr(&out).is_empty(), "{args:?} printed no error");
    }
}

#[test]
fn fixture_files_reload_and_run() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = ces(&["fixture", "--buses", "6", "--out", "fx"], tmp.path());
    assert!(fx.status.success(), "{}", stderr(&fx));
    let from_files = ces(
        &[
            "run", "--feeder", "fx/feeder6.json", "--scenario", "fx/scenario6.json", "--seed", "3", "--out", "a",
        ],
        tmp.path(),
    );
    assert!(from_files.status.success(), "{}", stderr(&from_files));
    let bundled = ces(&["run", "--seed", "3", "--out", "b"], tmp.path());
    assert!(bundled.status.success(), "{}", stderr(&bundled));
    assert_eq!(files(&tmp.path().join("a")), files(&tmp.path().join("b")));
}

#[test]
fn agent_override_and_ordering_options_take_effect() {
    let tmp = tempfile::tempdir().unwrap();
    let reject = ces(
        &["run", "--agents", "reject", "--ordering-nodes", "7", "--faults", "crash:2,equivocate:5", "--out", "r"],
        tmp.path(),
    );
    assert!(reject.status.success(), "{}", stderr(&reject));
    let periods = fs::read_to_string(tmp.path().join("r/periods.csv")).unwrap();
    assert!(periods.lines().count() > 1);
    let session: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("r/session.json")).unwrap()).unwrap();
    assert_eq!(session["totals"]["accepted_mwh"].as_f64(), Some(0.0));
}
