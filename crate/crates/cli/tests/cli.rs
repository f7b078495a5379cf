use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn specdeck(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specdeck"))
        .args(args)
        .env_remove("SPECDECK_SEED")
        .output()
        .expect("spawn specdeck")
}

fn ok(args: &[&str]) -> String {
    let o = specdeck(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let o = specdeck(args);
    assert!(!o.status.success(), "{args:?} should fail");
    String::from_utf8(o.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_outputs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["simulate", "--seeds", "3,4", "--max-new", "40", "--out", s(out)]);
    }
    for f in [
        "summary.json",
        "runs.csv",
        "breakdown.csv",
        "trace-3.jsonl",
        "trace-4.jsonl",
    ] {
        let x = fs::read(a.join(f)).unwrap();
        assert_eq!(x, fs::read(b.join(f)).unwrap(), "{f}");
    }
    let csv = fs::read_to_string(a.join("runs.csv")).unwrap();
    assert!(csv.starts_with("# specdeck-csv v1\n"));
    let bd = fs::read_to_string(a.join("breakdown.csv")).unwrap();
    assert!(bd.lines().last().unwrap().starts_with("Total Latency,"));
}

#[test]
fn seed_env_is_default_and_flag_wins() {
    let run = |env: Option<&str>, extra: &[&str]| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_specdeck"));
        c.args(["simulate", "--dump-config"]).args(extra);
        match env {
            Some(v) => c.env("SPECDECK_SEED", v),
            None => c.env_remove("SPECDECK_SEED"),
        };
        let o = c.output().unwrap();
        assert!(o.status.success());
        String::from_utf8(o.stdout).unwrap()
    };
    assert!(run(None, &[]).contains("seeds = 0\n"));
    assert!(run(Some("12"), &[]).contains("seeds = 12\n"));
    assert!(run(Some("12"), &["--seed", "5"]).contains("seeds = 5\n"));
}

#[test]
fn file_keys_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# comment\nmethod = serial_sd\ngamma = 2\n").unwrap();
    let text = ok(&["simulate", "-c", s(&cfg), "--gamma", "4", "--dump-config"]);
    assert!(
        text.contains("method = serial_sd\n") && text.contains("gamma = 4\n"),
        "{text}"
    );
}

#[test]
fn config_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "gamma = 3\nspeed = fast\n").unwrap();
    let err = fails(&["simulate", "-c", s(&cfg)]);
    assert!(
        err.contains("speed") && err.contains("line 2") && err.contains("bad.cfg"),
        "{err}"
    );
    let err = fails(&["simulate", "--set", "keep_ratio=2"]);
    assert!(err.contains("keep_ratio"), "{err}");
    let err = fails(&["simulate", "--gamma", "x"]);
    assert!(err.contains("gamma"), "{err}");
    let err = fails(&["sweep", "--axis", "mode", "--values", "greedy"]);
    assert!(err.contains("mode"), "{err}");
}

#[test]
fn synth_prune_bias_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let (g, x) = (dir.path().join("v.vtg"), dir.path().join("v.xat"));
    ok(&["synth", "--grid-out", s(&g), "--xattn-out", s(&x)]);
    assert_eq!(&fs::read(&g).unwrap()[..4], b"VTG1");
    assert_eq!(&fs::read(&x).unwrap()[..4], b"XAT1");

    let scores = dir.path().join("scores");
    let keep = ok(&["prune", "--grid", s(&g), "--xattn", s(&x), "--scores-dir", s(&scores)]);
    let keep: serde_json::Value = serde_json::from_str(&keep).unwrap();
    assert_eq!(keep["indices"].as_array().unwrap().len(), 128);
    assert!(scores.join("fused.vtg").exists());

    // Files and the synthetic scene they came from agree.
    let synthetic = ok(&["bias-report"]);
    let csv = dir.path().join("bias.csv");
    let from_files = ok(&["bias-report", "--grid", s(&g), "--xattn", s(&x), "--csv", s(&csv)]);
    assert_eq!(synthetic, from_files);
    assert!(fs::read_to_string(&csv).unwrap().starts_with("# specdeck-csv v1\n"));
}

#[test]
fn swapped_inputs_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let (g, x) = (dir.path().join("v.vtg"), dir.path().join("v.xat"));
    ok(&["synth", "--grid-out", s(&g), "--xattn-out", s(&x)]);
    let err = fails(&["prune", "--grid", s(&x), "--xattn", s(&g)]);
    assert!(err.contains("v.xat") && err.contains("VTG1"), "{err}");
    let err = fails(&["prune", "--grid", s(&dir.path().join("missing.vtg")), "--xattn", s(&x)]);
    assert!(err.contains("missing.vtg"), "{err}");
}

#[test]
fn trace_render_reads_simulate_output() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["simulate", "--max-new", "20", "--out", s(dir.path())]);
    let text = ok(&["trace-render", s(&dir.path().join("trace-0.jsonl")), "--width", "40"]);
    let lines: Vec<&str> = text.lines().collect();
    assert!(
        lines[0].starts_with("draft") && lines[1].starts_with("target"),
        "{text}"
    );
    let inline = ok(&["simulate", "--max-new", "20", "--timeline", "--width", "40"]);
    assert!(inline.contains(lines[1]));

    let junk = dir.path().join("junk.jsonl");
    fs::write(&junk, "{not json}\n").unwrap();
    let err = fails(&["trace-render", s(&junk)]);
    assert!(err.contains("junk.jsonl"), "{err}");
}

#[test]
fn sweep_csv_columns() {
    let out = ok(&[
        "sweep",
        "--axis",
        "keep_ratio",
        "--values",
        "0.05,0.2",
        "--max-new",
        "32",
    ]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "# specdeck-csv v1");
    assert_eq!(lines[1], "keep_ratio,mat,mat_per_round,speedup,boundary_share");
    assert!(lines[2].starts_with("0.05,") && lines[3].starts_with("0.2,"));
}

#[test]
fn oracle_dump_is_json() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("pair.json");
    ok(&["synth", "--oracle-out", s(&p), "--set", "alpha=0.5"]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
    assert_eq!(v["alpha"], 0.5);
    assert_eq!(v["target"]["vocab"], 32);
}
