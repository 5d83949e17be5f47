use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_partialmine");

fn run(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args).env_remove("PARTIALMINE_SEED");
    if let Some(s) = seed {
        cmd.env("PARTIALMINE_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_TRAIN: &str = r#"{"epochs": 2, "batch_size": 16, "trunk_widths": [8], "projection_dim": 4, "disc_hidden": [4, 2]}"#;

#[test]
fn generate_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let bench = dir.path().join("bench.json");
    std::fs::write(&bench, r#"{"synthetic": {"train": 64, "val": 32, "test": 48}, "seed": 2}"#).unwrap();
    let data = dir.path().join("data");
    ok(&run(&["generate", "--config", path(&bench), "--out", path(&data)], None));
    assert!(data.join("manifest.json").exists());
    assert!(data.join("domain1_test.csv").exists());

    let cfg = dir.path().join("train.json");
    std::fs::write(&cfg, SMALL_TRAIN).unwrap();
    let model_dir = dir.path().join("model");
    ok(&run(
        &["train", "--config", path(&cfg), "--data", path(&data), "--out", path(&model_dir)],
        None,
    ));
    let history = std::fs::read_to_string(model_dir.join("history.csv")).unwrap();
    assert!(history.starts_with("step,epoch,cls,tat_gen,tat_disc,ute,total,gated_fraction,H"));
    assert_eq!(history.lines().count(), 1 + 2 * 4);

    let report = dir.path().join("report.json");
    ok(&run(
        &[
            "eval",
            "--model",
            path(&model_dir.join("model.json")),
            "--data",
            path(&data.join("domain0_test.csv")),
            "--report",
            path(&report),
        ],
        None,
    ));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r["mean"].as_f64().unwrap() > 0.0);
    assert_eq!(r["per_category"].as_object().unwrap().len(), 10);
}

#[test]
fn seed_variable_overrides_generated_data() {
    let dir = tempfile::tempdir().unwrap();
    let bench = dir.path().join("bench.json");
    std::fs::write(&bench, r#"{"synthetic": {"train": 20, "val": 8, "test": 8}, "seed": 2}"#).unwrap();
    let gen = |name: &str, seed: Option<&str>| {
        let out = dir.path().join(name);
        ok(&run(&["generate", "--config", path(&bench), "--out", path(&out)], seed));
        std::fs::read(out.join("domain0_train.csv")).unwrap()
    };
    let plain = gen("a", None);
    assert_eq!(gen("b", Some("2")), plain);
    assert_ne!(gen("c", Some("3")), plain);
}

#[test]
fn ablate_writes_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.json");
    std::fs::write(
        &plan,
        format!(
            r#"{{"variants": ["joint", "tw+te"], "seeds": [1, 2],
                "benchmark": {{"synthetic": {{"train": 64, "val": 32, "test": 48}}}},
                "train": {SMALL_TRAIN}}}"#
        ),
    )
    .unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    ok(&run(&["ablate", "--plan", path(&plan), "--out", path(&a)], None));
    ok(&run(&["ablate", "--plan", path(&plan), "--out", path(&b), "--jobs", "2"], None));
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    assert!(text.lines().any(|l| l.starts_with("tw+tat+te,2,")));
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["frobnicate"], None).status.code(), Some(1));
    assert_eq!(run(&["ablate"], None).status.code(), Some(1));
    assert_eq!(run(&["--help"], None).status.code(), Some(0));
    assert_eq!(run(&["gradcheck"], Some("x")).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let cfg = dir.path().join("train.json");
    std::fs::write(&cfg, SMALL_TRAIN).unwrap();
    let out = run(&["train", "--config", path(&cfg), "--data", path(&missing), "--out", path(dir.path())], None);
    assert_eq!(out.status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{not json").unwrap();
    let out = run(&["generate", "--config", path(&bad), "--out", path(&missing)], None);
    assert_eq!(out.status.code(), Some(2));

    let gc = run(&["gradcheck", "--seed", "3"], None);
    ok(&gc);
    let r: serde_json::Value = serde_json::from_slice(&gc.stdout).unwrap();
    assert!(r["max_rel_error"].as_f64().unwrap() < 1e-5);
}

#[test]
fn empty_plan_succeeds_with_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.json");
    let out = dir.path().join("r.csv");
    std::fs::write(&plan, format!(r#"{{"variants": [], "seeds": [0], "output": "{}"}}"#, path(&out))).unwrap();
    ok(&run(&["ablate", "--plan", path(&plan)], None));
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 1);
}
