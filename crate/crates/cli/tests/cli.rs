use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn prosima(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prosima"))
        .current_dir(dir)
        .env_remove("PROSIMA_OUT")
        .args(args)
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("cfg.json");
    fs::write(
        &path,
        format!("{{\"images\": 4, \"image_size\": 64{extra}}}"),
    )
    .unwrap();
    path.display().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn anchor_verify_tamper_cycle() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let out = prosima(tmp.path(), &["--config", &cfg, "--out", "run", "anchor"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v = prosima(tmp.path(), &["--config", &cfg, "--out", "run", "verify"]);
    assert_eq!(v.status.code(), Some(0));
    assert!(stdout(&v).contains("verification 100.00%"));

    let ledger = tmp.path().join("run/nodes");
    let node = fs::read_dir(&ledger)
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let file = node.join("GLOBAL.pslg");
    let file = if file.exists() {
        file
    } else {
        fs::read_dir(&node).unwrap().next().unwrap().unwrap().path()
    };
    let mut bytes = fs::read(&file).unwrap();
    let at = bytes.len() / 2;
    bytes[at] ^= 0x04;
    fs::write(&file, bytes).unwrap();
    let v = prosima(tmp.path(), &["--config", &cfg, "--out", "run", "verify"]);
    assert_eq!(v.status.code(), Some(3));
    let text = stdout(&v);
    assert!(text.contains("FAIL") && text.contains("height"), "{text}");
    assert!(!text.contains("verification 100.00%"));
}

#[test]
fn empty_and_disabled_runs_exit_distinctly() {
    let tmp = tempfile::tempdir().unwrap();
    let v = prosima(tmp.path(), &["verify", "nowhere"]);
    assert_eq!(v.status.code(), Some(5));
    assert!(stdout(&v).contains("no ledgers found"));

    let cfg = small_config(tmp.path(), r#", "ablation": {"fingerprint_on": false}"#);
    assert_eq!(
        prosima(tmp.path(), &["--config", &cfg, "--out", "r", "anchor"])
            .status
            .code(),
        Some(0)
    );
    let v = prosima(tmp.path(), &["--config", &cfg, "--out", "r", "verify"]);
    assert_eq!(v.status.code(), Some(5));
    assert!(stdout(&v).contains("verification unavailable"));
}

#[test]
fn config_errors_report_location_and_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("bad.json"),
        "{\n  \"nodes\": 20,\n  \"seed\": -1\n}",
    )
    .unwrap();
    let out = prosima(tmp.path(), &["--config", "bad.json", "topology"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.json:3:"));
    let out = prosima(tmp.path(), &["--config", "missing.json", "topology"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn reconstruct_writes_pgm_and_provenance() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    prosima(tmp.path(), &["--config", &cfg, "--out", "run", "anchor"]);
    let img = fs::read_dir(tmp.path().join("run/images"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let img = img.display().to_string();
    let out = prosima(
        tmp.path(),
        &[
            "--config",
            &cfg,
            "--out",
            "run",
            "reconstruct",
            &img,
            "--original",
            &img,
            "--output",
            "rec.pgm",
        ],
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(fs::read(tmp.path().join("rec.pgm"))
        .unwrap()
        .starts_with(b"P5"));
    let sidecar = fs::read_to_string(tmp.path().join("rec.provenance.jsonl")).unwrap();
    assert_eq!(sidecar.lines().count(), 16);
    let first: serde_json::Value = serde_json::from_str(sidecar.lines().next().unwrap()).unwrap();
    for key in ["cell", "scope", "height", "tx_id", "mode", "cosine"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    assert_eq!(first["mode"], "exact");
}

#[test]
fn consensus_sim_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let ok = prosima(
        tmp.path(),
        &[
            "--out",
            "o",
            "consensus-sim",
            "--ranks",
            "7",
            "--faults",
            "2",
            "--fault",
            "0=equivocate",
            "--fault",
            "5=garbage_sig",
            "--rounds",
            "3",
        ],
    );
    assert_eq!(ok.status.code(), Some(0));
    let csv = fs::read_to_string(tmp.path().join("o/consensus_trace.csv")).unwrap();
    assert!(csv.starts_with("# config_sha256="));
    assert_eq!(csv.lines().count(), 5);
    let abort = prosima(
        tmp.path(),
        &[
            "--out",
            "o",
            "consensus-sim",
            "--ranks",
            "4",
            "--faults",
            "1",
            "--fault",
            "0=crash",
            "--fault",
            "1=crash",
            "--rounds",
            "1",
        ],
    );
    assert_eq!(abort.status.code(), Some(4));
}

#[test]
fn env_sets_output_dir_and_flag_wins() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_prosima"))
            .current_dir(tmp.path())
            .env("PROSIMA_OUT", "from_env")
            .args(args)
            .output()
            .unwrap()
    };
    assert!(run(&["topology"]).status.success());
    assert!(tmp.path().join("from_env/topology.edges").exists());
    assert!(run(&["--out", "from_flag", "topology"]).status.success());
    assert!(tmp.path().join("from_flag/topology.edges").exists());
}

#[test]
fn table4_csv_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("t.json"),
        r#"{"table4": {"shards": 64, "rounds": 2}}"#,
    )
    .unwrap();
    let a = prosima(
        tmp.path(),
        &["--config", "t.json", "--out", "a", "bench", "table4"],
    );
    let b = prosima(
        tmp.path(),
        &["--config", "t.json", "--out", "b", "bench", "table4"],
    );
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(b.status.code(), Some(0));
    let (ca, cb) = (
        fs::read(tmp.path().join("a/table4.csv")).unwrap(),
        fs::read(tmp.path().join("b/table4.csv")).unwrap(),
    );
    assert_eq!(ca, cb);
    let text = String::from_utf8(ca).unwrap();
    assert!(text.contains("\nfull_ledger,20.0000,"));
    let other = prosima(
        tmp.path(),
        &[
            "--config", "t.json", "--seed", "99", "--out", "c", "bench", "table4",
        ],
    );
    assert_eq!(other.status.code(), Some(0));
    let cc = fs::read_to_string(tmp.path().join("c/table4.csv")).unwrap();
    assert_ne!(cc.lines().next(), text.lines().next());
}
