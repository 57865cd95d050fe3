use std::path::Path;
use std::process::{Command, Output};

use vulmatch::synth::motivating_scenario;

fn vulmatch(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vulmatch"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn vulmatch")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Lays out the motivating pair on disk: sources, function documents and a
/// corpus directory holding both builds.
fn workspace() -> tempfile::TempDir {
    let sc = motivating_scenario();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("old.c"), &sc.old_src).unwrap();
    std::fs::write(p.join("new.c"), &sc.new_src).unwrap();
    std::fs::write(p.join("vuln.json"), sc.vulnerable.to_json()).unwrap();
    std::fs::write(p.join("patched.json"), sc.patched.to_json()).unwrap();
    std::fs::create_dir(p.join("corpus")).unwrap();
    std::fs::write(p.join("corpus/a.json"), sc.vulnerable.to_json()).unwrap();
    std::fs::write(p.join("corpus/b.json"), sc.patched.to_json()).unwrap();
    dir
}

fn sign(dir: &Path) -> Output {
    vulmatch(
        &[
            "sign",
            "--cve",
            "CVE-2019-5482",
            "--func",
            "tftp_connect",
            "--vuln-bin",
            "vuln.json",
            "--patched-bin",
            "patched.json",
            "--old-src",
            "old.c",
            "--new-src",
            "new.c",
            "--source-file",
            "lib/tftp.c",
            "--db",
            "db.json",
        ],
        dir,
    )
}

#[test]
fn sign_match_report_round_trip() {
    let dir = workspace();
    let p = dir.path();
    ok(&sign(p));
    let db = std::fs::read_to_string(p.join("db.json")).unwrap();
    assert!(db.contains("\"schema\": \"vulmatch-db/1\""));

    let run = |out: &str| {
        ok(&vulmatch(&["match", "--db", "db.json", "--query", "corpus", "--out", out], p));
        std::fs::read(p.join(out)).unwrap()
    };
    let first = run("m1.json");
    assert_eq!(first, run("m2.json"));
    let report: serde_json::Value = serde_json::from_slice(&first).unwrap();
    let top = &report["rankings"][0]["entries"][0];
    assert_eq!(top["score"], 1.0);
    assert_eq!(top["patched"], false);
    assert_eq!(report["rankings"][0]["entries"][1]["patched"], true);

    ok(&vulmatch(&["report", "--result", "m1.json", "--out", "r.txt"], p));
    let text = std::fs::read_to_string(p.join("r.txt")).unwrap();
    assert!(text.contains("tftp_connect"));
    assert!(p.join("r.json").exists());
}

#[test]
fn signing_twice_appends_ordinals() {
    let dir = workspace();
    ok(&sign(dir.path()));
    ok(&sign(dir.path()));
    let db = vulmatch::sigdb::SignatureDatabase::load(&dir.path().join("db.json")).unwrap();
    let ordinals: Vec<u32> = db.signatures.iter().map(|s| s.ordinal).collect();
    assert_eq!(ordinals.iter().filter(|&&o| o == 1).count(), ordinals.len() / 2);
}

#[test]
fn eval_reads_a_cases_file() {
    let dir = workspace();
    let p = dir.path();
    ok(&sign(p));
    let cases = r#"{"cases": [{
        "id": "tftp",
        "cve_id": "CVE-2019-5482",
        "ground_truth_function": "tftp_connect",
        "expected_vulnerable_binary": "old",
        "corpus": [
            {"label": "old", "functions": ["vuln.json"]},
            {"label": "new", "functions": ["patched.json"]}
        ]
    }]}"#;
    std::fs::write(p.join("cases.json"), cases).unwrap();
    let stdout = ok(&vulmatch(
        &["eval", "--db", "db.json", "--cases", "cases.json", "--out", "metrics.json"],
        p,
    ));
    assert!(stdout.contains("top1=1.000"), "{stdout}");
}

#[test]
fn diff_emits_sites() {
    let dir = workspace();
    let p = dir.path();
    let stdout = ok(&vulmatch(
        &["diff", "--old", "old.c", "--new", "new.c", "--emit-sites", "sites.json"],
        p,
    ));
    assert!(stdout.contains("add old - new"), "{stdout}");
    let sites: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p.join("sites.json")).unwrap()).unwrap();
    let kinds: Vec<&str> = sites["sites"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["kind"].as_str().unwrap())
        .collect();
    assert!(kinds.contains(&"add") && kinds.contains(&"change"), "{kinds:?}");
}

#[test]
fn prep_tags_the_named_function() {
    let dir = tempfile::tempdir().unwrap();
    let src = "static int helper(int x) { return x; }\n\nint parse(char *buf)\n{\n    return helper(buf[0]);\n}\n";
    std::fs::write(dir.path().join("a.c"), src).unwrap();
    let stdout = ok(&vulmatch(&["prep", "--source", "a.c", "--functions", "parse"], dir.path()));
    assert!(stdout.contains("__attribute__((noinline)) int parse(char *buf)"), "{stdout}");
    assert!(stdout.starts_with("static int helper"));

    let out = vulmatch(&["prep", "--source", "a.c", "--functions", "missing"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_and_input_errors_exit_2() {
    let dir = workspace();
    let p = dir.path();
    assert_eq!(vulmatch(&["frobnicate"], p).status.code(), Some(2));
    ok(&sign(p));
    let out = vulmatch(
        &["match", "--db", "db.json", "--query", "corpus", "--cve", "CVE-1999-0001", "--out", "m.json"],
        p,
    );
    assert_eq!(out.status.code(), Some(2));
    let out = vulmatch(
        &["match", "--db", "missing.json", "--query", "corpus", "--out", "m.json"],
        p,
    );
    assert_ne!(out.status.code(), Some(0));
    std::fs::write(p.join("bad.json"), "{\"schema\": \"vulmatch-db/9\"}").unwrap();
    let out = vulmatch(&["match", "--db", "bad.json", "--query", "corpus", "--out", "m.json"], p);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("vulmatch-db/9"));
}

#[test]
fn version_names_the_formats() {
    let out = vulmatch(&["--version"], Path::new("."));
    let stdout = ok(&out);
    for schema in ["vulmatch-func/1", "vulmatch-db/1", "vulmatch-match/1"] {
        assert!(stdout.contains(schema), "{stdout}");
    }
}
