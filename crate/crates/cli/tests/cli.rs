use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bsm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bsm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn demo_spec() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../demo/synth.toml")
}

fn write_spec(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("spec.toml");
    fs::write(&path, body).unwrap();
    path
}

const SMALL_SPEC: &str = r#"
seed = 3
dimensions = ["gender", "religion"]
bbq_prompts = 40
unqover_prompts = 20

[[models]]
id = "a"
p_stereo = 0.7
p_abstain = 0.2

[[models]]
id = "b"
p_stereo = 0.5
p_abstain = 0.3

[[models]]
id = "c"
family = "other"
p_stereo = 0.9
p_abstain = 0.1
"#;

fn synth_small(tmp: &TempDir) -> PathBuf {
    let spec = write_spec(tmp.path(), SMALL_SPEC);
    let run = tmp.path().join("run");
    let o = bsm(&["synth", s(&spec), "--out", s(&run)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    run
}

#[test]
fn synth_is_byte_identical_for_a_repeated_seed() {
    let tmp = TempDir::new().unwrap();
    let spec = write_spec(tmp.path(), SMALL_SPEC);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&bsm(&["synth", s(&spec), "--out", s(&a)])), 0);
    assert_eq!(code(&bsm(&["synth", s(&spec), "--out", s(&b)])), 0);
    for f in [
        "responses/a.jsonl",
        "prompts/bbq.jsonl",
        "models.json",
        "config.toml",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let c = tmp.path().join("c");
    assert_eq!(
        code(&bsm(&["synth", s(&spec), "--seed", "4", "--out", s(&c)])),
        0
    );
    assert_ne!(
        fs::read(a.join("responses/a.jsonl")).unwrap(),
        fs::read(c.join("responses/a.jsonl")).unwrap()
    );
}

#[test]
fn full_abstention_yields_only_unknown_answers() {
    let tmp = TempDir::new().unwrap();
    let spec = write_spec(
        tmp.path(),
        "seed = 1\ndimensions = [\"gender\"]\nbbq_prompts = 30\n[[models]]\nid = \"u\"\np_stereo = 0.5\np_abstain = 1.0\n",
    );
    let run = tmp.path().join("run");
    assert_eq!(code(&bsm(&["synth", s(&spec), "--out", s(&run)])), 0);
    let text = fs::read_to_string(run.join("responses/u.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 30);
    assert!(text
        .lines()
        .all(|l| l.contains("\"raw_text\":\"Cannot be determined\"")));
}

#[test]
fn demo_spec_round_trips_through_validate_and_score() {
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("run");
    assert_eq!(code(&bsm(&["synth", s(&demo_spec()), "--out", s(&run)])), 0);
    let cfg = run.join("config.toml");
    let o = bsm(&["validate", "--config", s(&cfg)]);
    assert_eq!(code(&o), 0);
    let report = String::from_utf8_lossy(&o.stdout);
    assert!(report.contains("0 reject(s)") && !report.contains(" 1 reject"));
    let out = tmp.path().join("scores");
    assert_eq!(
        code(&bsm(&["score", "--config", s(&cfg), "--out", s(&out)])),
        0
    );
    let flips = fs::read_to_string(out.join("flips.csv")).unwrap();
    assert_eq!(
        flips.lines().count(),
        5,
        "one header plus one row per dimension"
    );
}

#[test]
fn dims_flag_restricts_outputs() {
    let tmp = TempDir::new().unwrap();
    let run = synth_small(&tmp);
    let out = tmp.path().join("out");
    let o = bsm(&[
        "score",
        "--config",
        s(&run.join("config.toml")),
        "--dims",
        "gender",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0);
    let scores = fs::read_to_string(out.join("scores.csv")).unwrap();
    let dims: std::collections::BTreeSet<&str> = scores
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap())
        .collect();
    assert_eq!(dims.into_iter().collect::<Vec<_>>(), vec!["gender"]);
}

#[test]
fn compare_all_writes_pairs_and_square_matrices() {
    let tmp = TempDir::new().unwrap();
    let run = synth_small(&tmp);
    let out = tmp.path().join("out");
    assert_eq!(
        code(&bsm(&[
            "compare",
            "--config",
            s(&run.join("config.toml")),
            "--out",
            s(&out)
        ])),
        0
    );
    assert_eq!(fs::read_dir(out.join("signatures")).unwrap().count(), 3);
    let m = fs::read_to_string(out.join("matrices/acc_sim.csv")).unwrap();
    let rows: Vec<&str> = m.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.split(',').count() == 4));
    let repr = fs::read_to_string(out.join("matrices/repr_sim.absent.json")).unwrap();
    assert!(repr.contains("no activations"));
}

#[test]
fn self_pair_is_a_unit_signature() {
    let tmp = TempDir::new().unwrap();
    let run = synth_small(&tmp);
    let out = tmp.path().join("out");
    let o = bsm(&[
        "compare",
        "--config",
        s(&run.join("config.toml")),
        "--pair",
        "a,a",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("signatures/a__a.json")).unwrap())
            .unwrap();
    for (name, value) in v["components"].as_object().unwrap() {
        if name != "repr_sim" {
            assert_eq!(value.as_f64(), Some(1.0), "{name}");
        }
    }
}

#[test]
fn missing_manifest_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let run = synth_small(&tmp);
    fs::remove_file(run.join("models.json")).unwrap();
    let out = tmp.path().join("out");
    let o = bsm(&[
        "score",
        "--config",
        s(&run.join("config.toml")),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("[load]"));
    assert!(!out.exists());
}

#[test]
fn malformed_response_line_is_a_data_error_naming_the_file() {
    let tmp = TempDir::new().unwrap();
    let run = synth_small(&tmp);
    let path = run.join("responses/b.jsonl");
    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str("{\"model_id\": \"b\"}\n");
    fs::write(&path, text).unwrap();
    let out = tmp.path().join("out");
    let o = bsm(&[
        "score",
        "--config",
        s(&run.join("config.toml")),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains("b.jsonl") && err.contains("prompt_id"),
        "{err}"
    );
    assert!(!out.exists(), "no partial output");
    assert_eq!(
        code(&bsm(&["validate", "--config", s(&run.join("config.toml"))])),
        2
    );
}

#[test]
fn planted_regression_exits_with_audit_failure() {
    let tmp = TempDir::new().unwrap();
    let run = synth_small(&tmp);
    let tol = tmp.path().join("tol.toml");
    fs::write(
        &tol,
        "acc = 0.01\ns_dis = 1.0\ns_amb = 1.0\nabstention = 0.01\n",
    )
    .unwrap();
    let out = tmp.path().join("out");
    let args = [
        "audit",
        "regress",
        "--old",
        "a",
        "--new",
        "c",
        "--tolerances",
        s(&tol),
    ];
    let cfg = run.join("config.toml");
    let o = bsm(&[&args[..], &["--config", s(&cfg), "--out", s(&out)]].concat());
    assert_eq!(code(&o), 3);
    let report = fs::read_to_string(out.join("regression.csv")).unwrap();
    assert!(report.contains(",fail"));

    let same = tmp.path().join("same");
    let args = [
        "audit",
        "regress",
        "--old",
        "a",
        "--new",
        "a",
        "--tolerances",
        s(&tol),
    ];
    let o = bsm(&[&args[..], &["--config", s(&cfg), "--out", s(&same)]].concat());
    assert_eq!(code(&o), 0);
}

#[test]
fn duplicated_bundle_is_flagged_by_lineage() {
    let tmp = TempDir::new().unwrap();
    let run = synth_small(&tmp);
    let text = fs::read_to_string(run.join("responses/a.jsonl")).unwrap();
    fs::write(
        run.join("responses/a-copy.jsonl"),
        text.replace("\"model_id\":\"a\"", "\"model_id\":\"a-copy\""),
    )
    .unwrap();
    let manifest = fs::read_to_string(run.join("models.json")).unwrap();
    let mut models: Vec<serde_json::Value> = serde_json::from_str(&manifest).unwrap();
    let mut copy = models[0].clone();
    copy["id"] = "a-copy".into();
    copy["family"] = "cloned".into();
    models.push(copy);
    fs::write(
        run.join("models.json"),
        serde_json::to_string(&models).unwrap(),
    )
    .unwrap();
    let cfg = fs::read_to_string(run.join("config.toml")).unwrap();
    fs::write(
        run.join("config.toml"),
        cfg.replace(
            "[responses]\n",
            "[responses]\na-copy = \"responses/a-copy.jsonl\"\n",
        ),
    )
    .unwrap();
    let out = tmp.path().join("out");
    let o = bsm(&[
        "audit",
        "lineage",
        "--config",
        s(&run.join("config.toml")),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let flagged = fs::read_to_string(out.join("lineage.csv")).unwrap();
    assert!(flagged.contains("a,a-copy,0"), "{flagged}");
}

#[test]
fn unknown_model_in_pair_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let run = synth_small(&tmp);
    let out = tmp.path().join("out");
    let o = bsm(&[
        "compare",
        "--config",
        s(&run.join("config.toml")),
        "--pair",
        "a,zzz",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn missing_config_flag_is_a_usage_error() {
    assert_eq!(code(&bsm(&["score"])), 1);
}
