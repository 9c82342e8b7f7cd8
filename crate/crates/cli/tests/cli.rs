//! End-to-end tests of the `encanon` binary: fixture table in a temp
//! directory, subcommands driven through their public interface, artifacts
//! checked on disk.

use std::collections::HashMap;
use std::path::Path;
use std::process::{Command, Output};

const PEOPLE_CSV: &str = "\
Name,Age,Gender,ZIP
John,18,Male,13122
Peter,18,Male,13122
Mark,19,Male,13122
Steven,19,Male,13122
Jack,18,Male,13121
Paul,20,Male,13121
Andrew,20,Male,13121
";

const GENDER_JSON: &str =
    r#"{"label": "person", "children": [{"label": "Male"}, {"label": "Female"}]}"#;

const NAMES_JSON: &str = r#"["Redacted A", "Redacted B", "Redacted C"]"#;

const PEOPLE_TOML: &str = r#"version = 1

[input]
data = "people.csv"

[[column]]
name = "Name"
kind = "tokenized"

[[column]]
name = "Age"
kind = "numeric"

[[column]]
name = "Gender"
kind = "categorical"
hierarchy = "gender"

[[column]]
name = "ZIP"
kind = "numeric"

[hierarchy.gender]
path = "gender.json"
gap = 100

[dictionary.Name]
path = "names.json"

[identify]
k = 2
max_combo = 3

[[mask]]
column = "Name"
op = "dictionary"

[anon]
k = 2
rounds = 2
suppression_threshold = 0.25
strategy = "cluster_to_cluster"
quasi = ["Age", "ZIP"]

[output]
dir = "out"

[seeds]
master = 7
"#;

fn fixture() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("people.csv"), PEOPLE_CSV).unwrap();
    std::fs::write(dir.path().join("gender.json"), GENDER_JSON).unwrap();
    std::fs::write(dir.path().join("names.json"), NAMES_JSON).unwrap();
    std::fs::write(dir.path().join("people.toml"), PEOPLE_TOML).unwrap();
    dir
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_encanon"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

#[track_caller]
fn expect_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let header = rdr
        .headers()
        .unwrap()
        .iter()
        .map(str::to_string)
        .collect();
    let rows = rdr
        .records()
        .map(|r| r.unwrap().iter().map(str::to_string).collect())
        .collect();
    (header, rows)
}

fn read_value(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn pipeline_releases_people_sample() {
    let dir = fixture();
    let out = run_in(dir.path(), &["pipeline", "--config", "people.toml"]);
    expect_exit(&out, 0);

    let scan = read_value(&dir.path().join("out/scan.json"));
    assert_eq!(scan["direct"], serde_json::json!(["Name"]));
    assert_eq!(scan["minimal_quasi"], serde_json::json!([["Age", "ZIP"]]));

    let (header, rows) = read_csv(&dir.path().join("out/anonymized.csv"));
    assert_eq!(header, ["Name", "Age", "Gender", "ZIP"]);
    assert!(!rows.is_empty());
    let dictionary = ["Redacted A", "Redacted B", "Redacted C"];
    for row in &rows {
        assert!(dictionary.contains(&row[0].as_str()), "masked name {:?}", row[0]);
        assert_eq!(row[2], "Male");
    }
    // Released quasi tuples form classes of at least k = 2.
    let mut classes: HashMap<(String, String), usize> = HashMap::new();
    for row in &rows {
        *classes.entry((row[1].clone(), row[3].clone())).or_default() += 1;
    }
    assert!(classes.values().all(|&c| c >= 2), "classes {classes:?}");

    let metrics = read_value(&dir.path().join("out/metrics.json"));
    assert_eq!(metrics["rows"], 7);
    assert!(metrics["min_class_size"].as_u64().unwrap() >= 2);
    assert_eq!(
        metrics["suppressed"].as_u64().unwrap() as usize,
        7 - rows.len()
    );
    assert!(metrics["reid_risk"]["value"].as_f64().unwrap() <= 0.5);
}

#[test]
fn pipeline_artifacts_are_idempotent() {
    let dir = fixture();
    let names = [
        "out/keys.json",
        "out/scan.json",
        "out/bundle.json",
        "out/anonymized.csv",
        "out/metrics.json",
    ];
    expect_exit(&run_in(dir.path(), &["pipeline", "--config", "people.toml"]), 0);
    let first: Vec<Vec<u8>> = names
        .iter()
        .map(|n| std::fs::read(dir.path().join(n)).unwrap())
        .collect();
    expect_exit(&run_in(dir.path(), &["pipeline", "--config", "people.toml"]), 0);
    for (name, before) in names.iter().zip(&first) {
        let after = std::fs::read(dir.path().join(name)).unwrap();
        assert_eq!(&after, before, "{name} changed between identical runs");
    }
    // A different master seed produces different key material.
    expect_exit(
        &run_in(dir.path(), &["pipeline", "--config", "people.toml", "--seed", "99"]),
        0,
    );
    let reseeded = std::fs::read(dir.path().join("out/keys.json")).unwrap();
    assert_ne!(reseeded, first[0]);
}

#[test]
fn stepwise_chain_matches_pipeline() {
    let dir = fixture();
    let step_toml = PEOPLE_TOML.replace("dir = \"out\"", "dir = \"step\"");
    std::fs::write(dir.path().join("step.toml"), step_toml).unwrap();

    expect_exit(&run_in(dir.path(), &["pipeline", "--config", "people.toml"]), 0);
    for cmd in [
        "keygen",
        "encrypt",
        "detect",
        "mask",
        "dp",
        "anonymize",
        "finalize",
        "metrics",
    ] {
        expect_exit(&run_in(dir.path(), &[cmd, "--config", "step.toml"]), 0);
    }

    // Same keys, findings, released values and scores either way.
    for name in ["keys.json", "scan.json", "anonymized.csv", "metrics.json"] {
        let pipeline = std::fs::read(dir.path().join("out").join(name)).unwrap();
        let stepwise = std::fs::read(dir.path().join("step").join(name)).unwrap();
        assert_eq!(pipeline, stepwise, "{name} differs between the two routes");
    }
    // Ciphertext bytes differ: each process restarts the nonce stream, so
    // equal plaintexts are re-randomized differently.
    let pipeline = std::fs::read(dir.path().join("out/bundle.json")).unwrap();
    let stepwise = std::fs::read(dir.path().join("step/bundle.json")).unwrap();
    assert_ne!(pipeline, stepwise);
}

#[test]
fn masked_quasi_column_is_rejected() {
    let dir = fixture();
    let bad = PEOPLE_TOML.replace(
        "[[mask]]\ncolumn = \"Name\"\nop = \"dictionary\"",
        "[[mask]]\ncolumn = \"Name\"\nop = \"dictionary\"\n\n[[mask]]\ncolumn = \"Age\"\nop = \"shift\"\namount = 5",
    );
    std::fs::write(dir.path().join("bad.toml"), bad).unwrap();
    let out = run_in(dir.path(), &["pipeline", "--config", "bad.toml"]);
    expect_exit(&out, 2);
    assert!(stderr_of(&out).contains("both masked and a quasi-identifier"));
}

#[test]
fn mask_parameters_must_match_the_op() {
    let dir = fixture();
    let missing = PEOPLE_TOML.replace(
        "column = \"Name\"\nop = \"dictionary\"",
        "column = \"Name\"\nop = \"shift\"",
    );
    std::fs::write(dir.path().join("missing.toml"), missing).unwrap();
    let out = run_in(dir.path(), &["pipeline", "--config", "missing.toml"]);
    expect_exit(&out, 2);
    assert!(stderr_of(&out).contains("needs amount"));

    let stray = PEOPLE_TOML.replace(
        "column = \"Name\"\nop = \"dictionary\"",
        "column = \"Name\"\nop = \"dictionary\"\namount = 5",
    );
    std::fs::write(dir.path().join("stray.toml"), stray).unwrap();
    let out = run_in(dir.path(), &["pipeline", "--config", "stray.toml"]);
    expect_exit(&out, 2);
    assert!(stderr_of(&out).contains("does not take amount"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = fixture();
    let bad = PEOPLE_TOML.replace("[identify]", "typo_section = 1\n\n[identify]");
    std::fs::write(dir.path().join("bad.toml"), bad).unwrap();
    let out = run_in(dir.path(), &["pipeline", "--config", "bad.toml"]);
    expect_exit(&out, 2);
    assert!(stderr_of(&out).contains("unknown field"));
}

#[test]
fn wrong_config_version_is_rejected() {
    let dir = fixture();
    let bad = PEOPLE_TOML.replace("version = 1", "version = 9");
    std::fs::write(dir.path().join("bad.toml"), bad).unwrap();
    let out = run_in(dir.path(), &["pipeline", "--config", "bad.toml"]);
    expect_exit(&out, 2);
    assert!(stderr_of(&out).contains("version 9 not supported"));
}

#[test]
fn missing_input_file_is_rejected() {
    let dir = fixture();
    let bad = PEOPLE_TOML.replace("people.csv", "absent.csv");
    std::fs::write(dir.path().join("bad.toml"), bad).unwrap();
    let out = run_in(dir.path(), &["pipeline", "--config", "bad.toml"]);
    expect_exit(&out, 2);
    assert!(stderr_of(&out).contains("absent.csv"));
}

#[test]
fn unreachable_k_exits_unsatisfiable() {
    let dir = fixture();
    let bad = PEOPLE_TOML.replace("[anon]\nk = 2", "[anon]\nk = 8");
    std::fs::write(dir.path().join("bad.toml"), bad).unwrap();
    let out = run_in(dir.path(), &["pipeline", "--config", "bad.toml"]);
    expect_exit(&out, 4);
    assert!(stderr_of(&out).contains("k = 8"));
}

#[test]
fn untreated_direct_identifier_is_refused() {
    let dir = fixture();
    let bad = PEOPLE_TOML.replace("[[mask]]\ncolumn = \"Name\"\nop = \"dictionary\"\n\n", "");
    std::fs::write(dir.path().join("bad.toml"), bad).unwrap();
    let out = run_in(dir.path(), &["pipeline", "--config", "bad.toml"]);
    expect_exit(&out, 3);
    assert!(stderr_of(&out).contains("Name"));

    // The stepwise scan only warns; the operator may still mask later.
    expect_exit(&run_in(dir.path(), &["keygen", "--config", "bad.toml"]), 0);
    expect_exit(&run_in(dir.path(), &["encrypt", "--config", "bad.toml"]), 0);
    let out = run_in(dir.path(), &["detect", "--config", "bad.toml"]);
    expect_exit(&out, 0);
    assert!(stdout_of(&out).contains("warning"));
}

#[test]
fn dry_run_writes_nothing() {
    let dir = fixture();
    let out = run_in(dir.path(), &["pipeline", "--config", "people.toml", "--dry-run"]);
    expect_exit(&out, 0);
    let text = stdout_of(&out);
    assert!(text.contains("dry run"));
    assert!(text.contains("anonymize"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn paths_resolve_relative_to_the_config_file() {
    let dir = fixture();
    let config = dir.path().join("people.toml");
    let elsewhere = tempfile::tempdir().unwrap();
    let out = run_in(elsewhere.path(), &["pipeline", "--config", config.to_str().unwrap()]);
    expect_exit(&out, 0);
    assert!(dir.path().join("out/anonymized.csv").exists());
    assert!(!elsewhere.path().join("out").exists());
}

#[test]
fn noise_mechanisms_perturb_the_release() {
    let dir = fixture();
    std::fs::write(
        dir.path().join("measures.csv"),
        "\
Name,Age,ZIP,Income,Flag
John,18,13122,52000,1
Peter,18,13122,31000,0
Mark,19,13122,47000,1
Steven,19,13122,28000,0
Jack,18,13121,39000,1
Paul,20,13121,55000,0
Andrew,20,13121,24000,1
",
    )
    .unwrap();
    std::fs::write(
        dir.path().join("measures.toml"),
        r#"version = 1

[input]
data = "measures.csv"

[[column]]
name = "Name"
kind = "tokenized"

[[column]]
name = "Age"
kind = "numeric"

[[column]]
name = "ZIP"
kind = "numeric"

[[column]]
name = "Income"
kind = "numeric"

[[column]]
name = "Flag"
kind = "numeric"

[dictionary.Name]
path = "names.json"

[identify]
k = 2
max_combo = 2

[[mask]]
column = "Name"
op = "dictionary"

[[dp]]
column = "Income"
mechanism = "laplace"
epsilon = 1.0
lower = 10000
upper = 60000

[[dp]]
column = "Flag"
mechanism = "binary"
epsilon = 1.0
lower = 0
upper = 1

[anon]
k = 2
rounds = 2
suppression_threshold = 0.25
strategy = "point_to_cluster"
quasi = ["Age", "ZIP"]

[output]
dir = "measures_out"

[seeds]
master = 11
"#,
    )
    .unwrap();
    let out = run_in(dir.path(), &["pipeline", "--config", "measures.toml"]);
    expect_exit(&out, 0);
    let (_, rows) = read_csv(&dir.path().join("measures_out/anonymized.csv"));
    let originals = ["52000", "31000", "47000", "28000", "39000", "55000", "24000"];
    assert!(
        rows.iter().any(|r| !originals.contains(&r[3].as_str())),
        "laplace noise left every income untouched: {rows:?}"
    );
    for row in &rows {
        assert!(row[4] == "0" || row[4] == "1", "flag {:?} left {{0, 1}}", row[4]);
    }
}

#[test]
fn detect_after_mask_fails_the_audit() {
    let dir = fixture();
    for cmd in ["keygen", "encrypt", "mask"] {
        expect_exit(&run_in(dir.path(), &[cmd, "--config", "people.toml"]), 0);
    }
    let out = run_in(dir.path(), &["detect", "--config", "people.toml"]);
    expect_exit(&out, 3);
    assert!(stderr_of(&out).contains("audit"));
}

#[test]
fn transcript_dump_covers_both_sessions() {
    let dir = fixture();
    let out = run_in(
        dir.path(),
        &[
            "pipeline",
            "--config",
            "people.toml",
            "--dump-transcript",
            "out/transcript.jsonl",
        ],
    );
    expect_exit(&out, 0);
    let text = std::fs::read_to_string(dir.path().join("out/transcript.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let sessions: Vec<u64> = lines
        .iter()
        .filter_map(|v| v.get("session_id").and_then(|s| s.as_u64()))
        .collect();
    assert_eq!(sessions, [1, 2]);
    let digests = lines
        .iter()
        .filter(|v| v.get("payload_digest").is_some())
        .count();
    assert!(digests > 10, "only {digests} message records");
}
