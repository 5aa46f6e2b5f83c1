use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dream-lab"));
    c.env_remove("DREAMLAB_CACHE_DIR");
    c
}

fn schema() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets/schemas/desk24.json")
}

fn run_ok(args: &[&str]) -> String {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn flag_pipeline_from_zoo_to_inference() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let zoo = d.join("zoo");
    let schema = schema();
    let counts = "6,2,2";
    run_ok(&[
        "zoo",
        "build",
        "--schema",
        s(&schema),
        "--synthetic",
        "3",
        "--counts",
        counts,
        "--epochs",
        "1",
        "--out",
        s(&zoo),
    ]);
    assert!(zoo.join("manifest.jsonl").exists());
    assert!(zoo.join("provenance.json").exists());
    // a second build trains nothing new
    let again = run_ok(&[
        "zoo",
        "build",
        "--schema",
        s(&schema),
        "--synthetic",
        "3",
        "--counts",
        counts,
        "--epochs",
        "1",
        "--out",
        s(&zoo),
    ]);
    assert!(again.contains("trained 0"), "{again}");

    let q = d.join("q");
    run_ok(&[
        "probe",
        "build-queries",
        "--zoo-dir",
        s(&zoo),
        "--domains",
        "domain0,domain1",
        "--n",
        "4",
        "--out",
        s(&q),
    ]);
    let o = d.join("o");
    let out = run_ok(&[
        "probe",
        "harvest",
        "--zoo-dir",
        s(&zoo),
        "--queries",
        s(&q),
        "--domains",
        "domain0,domain1",
        "--out",
        s(&o),
    ]);
    assert!(out.contains("12 rows of width 28"), "{out}");

    let cfg = d.join("dream.json");
    std::fs::write(
        &cfg,
        r#"{"lambda": 1.0, "alpha": 0.001, "beta": 0.001, "batch_size": 4, "epsilon": 0.0001, "max_epochs": 3, "seed": 0}"#,
    )
    .unwrap();
    let m = d.join("m");
    run_ok(&[
        "dream",
        "train",
        "--outputs",
        s(&o),
        "--config",
        s(&cfg),
        "--schema",
        s(&schema),
        "--out",
        s(&m),
    ]);

    let manifest = std::fs::read_to_string(zoo.join("manifest.jsonl")).unwrap();
    let weights = manifest
        .lines()
        .skip(1)
        .find(|l| l.contains("\"domain2\"") && l.contains("\"role\":\"test\""))
        .and_then(|l| l.split("\"weights\":\"").nth(1))
        .and_then(|r| r.split('"').next())
        .unwrap()
        .to_string();
    let w = zoo.join(weights);
    let pred = run_ok(&[
        "dream",
        "infer",
        "--model",
        s(&m),
        "--queries",
        s(&q),
        "--target-weights",
        s(&w),
    ]);
    let v: serde_json::Value = serde_json::from_str(&pred).unwrap();
    assert_eq!(v["probs"].as_array().unwrap().len(), 3);
    assert_eq!(v["assignment"].as_array().unwrap().len(), 3);

    let f = d.join("f.csv");
    run_ok(&[
        "dream",
        "export-features",
        "--model",
        s(&m),
        "--outputs",
        s(&o),
        "--out",
        s(&f),
    ]);
    assert_eq!(std::fs::read_to_string(&f).unwrap().lines().count(), 13);

    let k = d.join("k");
    run_ok(&[
        "baseline",
        "kennen-train",
        "--outputs",
        s(&o),
        "--config",
        s(&cfg),
        "--schema",
        s(&schema),
        "--out",
        s(&k),
    ]);
    let kp = run_ok(&[
        "baseline",
        "kennen-infer",
        "--model",
        s(&k),
        "--queries",
        s(&q),
        "--target-weights",
        s(&w),
    ]);
    assert!(serde_json::from_str::<serde_json::Value>(&kp).is_ok());

    let report = d.join("report");
    let summary = run_ok(&[
        "eval",
        "lodo",
        "--zoo-dir",
        s(&zoo),
        "--methods",
        "kennen,random",
        "--trials",
        "1",
        "--n-queries",
        "4",
        "--out",
        s(&report),
    ]);
    assert!(summary.contains("held-out domain: domain2"));
    for dom in ["domain0", "domain1", "domain2"] {
        assert!(report.join(format!("{dom}.json")).exists());
    }
    assert!(report.join("summary.txt").exists());
}

#[test]
fn random_baseline_prints_the_uniform_row() {
    let out = run_ok(&["baseline", "random", "--schema", s(&schema())]);
    let last = out.lines().last().unwrap();
    assert_eq!(last.split_whitespace().collect::<Vec<_>>(), ["Avg", "36.11"]);
}

#[test]
fn exit_codes_separate_validation_from_runtime_failures() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"schema": "nowhere.json", "colour": 3}"#).unwrap();
    let out = bin().args(["run", "--config", s(&bad)]).output().unwrap();
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown field `colour`"));

    let out = bin()
        .args([
            "zoo",
            "build",
            "--schema",
            s(&schema()),
            "--synthetic",
            "2",
            "--counts",
            "1,2",
        ])
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
    assert_eq!(code(&bin().arg("no-such-command").output().unwrap()), 1);
    assert_eq!(code(&bin().arg("--help").output().unwrap()), 0);

    // a remote target nobody listens on is a runtime failure
    let q = dir.path().join("q");
    let zoo = dir.path().join("zoo");
    run_ok(&[
        "zoo",
        "build",
        "--schema",
        s(&schema()),
        "--synthetic",
        "2",
        "--counts",
        "1,1,1",
        "--epochs",
        "1",
        "--out",
        s(&zoo),
    ]);
    run_ok(&[
        "probe",
        "build-queries",
        "--zoo-dir",
        s(&zoo),
        "--n",
        "4",
        "--out",
        s(&q),
    ]);
    let o = dir.path().join("o");
    run_ok(&[
        "probe",
        "harvest",
        "--zoo-dir",
        s(&zoo),
        "--queries",
        s(&q),
        "--roles",
        "train,val,test",
        "--out",
        s(&o),
    ]);
    let k = dir.path().join("k");
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"dream": {"lambda": 1.0, "alpha": 0.001, "beta": 0.001, "batch_size": 2, "epsilon": 0.0001, "max_epochs": 2, "seed": 0}}"#).unwrap();
    run_ok(&[
        "baseline",
        "kennen-train",
        "--outputs",
        s(&o),
        "--config",
        s(&cfg),
        "--schema",
        s(&schema()),
        "--out",
        s(&k),
    ]);
    let out = bin()
        .args([
            "baseline",
            "kennen-infer",
            "--model",
            s(&k),
            "--queries",
            s(&q),
            "--target",
            "http://127.0.0.1:9",
            "--retries",
            "0",
        ])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

fn write_tiny_config(dir: &Path) -> PathBuf {
    let cfg = dir.join("exp.json");
    let text = serde_json::json!({
        "schema": s(&schema()),
        "data": {"synthetic": {"n_domains": 3, "classes": 3, "n_per_class": 12, "image_size": 8, "style_shift": 1.0, "seed": 3}},
        "zoo": {
            "counts": {"train": 4, "val": 2, "test": 2},
            "seeds": 2,
            "sample_seed": 5,
            "arch": {"first_channels": 2, "max_channels": 4, "fc_hidden": 8, "dropout": 0.0},
            "budget": {"epochs": 1, "lr_sgd": 0.01, "lr_adaptive": 0.001}
        },
        "queries": {"n": 4, "seed": 1},
        "dream": {"lambda": 1.0, "alpha": 0.001, "beta": 0.001, "batch_size": 4, "epsilon": 0.0001, "max_epochs": 2, "seed": 0},
        "eval": {"trials": 1, "lambda_grid": [1.0], "methods": ["dream", "kennen", "random"], "gap_home": "domain0"},
        "out_dir": "out"
    });
    std::fs::write(&cfg, serde_json::to_vec_pretty(&text).unwrap()).unwrap();
    cfg
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn run_caches_every_stage_and_reproduces_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let first = run_ok(&["run", "--config", s(&cfg)]);
    assert!(first.contains("zoo: done") && first.contains("eval: done"), "{first}");
    assert!(first.contains("in-domain"), "{first}");
    let report = dir.path().join("out/report");
    let before = snapshot(&report);
    let names: Vec<&str> = before.iter().map(|(n, _)| n.as_str()).collect();
    for f in [
        "config.json",
        "provenance.json",
        "summary.txt",
        "domain0.json",
        "audit.jsonl",
        "gap.json",
    ] {
        assert!(names.contains(&f), "{names:?}");
    }
    let prov: serde_json::Value =
        serde_json::from_slice(&before.iter().find(|(n, _)| n == "provenance.json").unwrap().1).unwrap();
    assert!(!prov["git_describe"].as_str().unwrap().is_empty());
    assert_eq!(prov["config_hash"].as_str().unwrap().len(), 64);

    let second = run_ok(&["run", "--config", s(&cfg)]);
    assert!(
        second.contains("zoo: cached") && second.contains("eval: cached"),
        "{second}"
    );
    assert_eq!(snapshot(&report), before);

    // the zoo is reused when only evaluation settings change
    let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(&cfg).unwrap()).unwrap();
    v["eval"]["methods"] = serde_json::json!(["random"]);
    std::fs::write(&cfg, serde_json::to_vec(&v).unwrap()).unwrap();
    let third = run_ok(&["run", "--config", s(&cfg)]);
    assert!(third.contains("zoo: cached") && third.contains("eval: done"), "{third}");
}

#[test]
fn cache_dir_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let cache = dir.path().join("elsewhere");
    let out = bin()
        .env("DREAMLAB_CACHE_DIR", &cache)
        .args(["run", "--config", s(&cfg)])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stages: Vec<String> = std::fs::read_dir(&cache)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(stages.iter().any(|s| s.starts_with("zoo-")));
    assert!(stages.iter().any(|s| s.starts_with("eval-")));
    assert!(!dir.path().join("out/cache").exists());
}
