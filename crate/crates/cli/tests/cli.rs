use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fsd() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fsd"));
    c.env_remove("FSD_THREADS");
    c
}

/// Small models and data so each command finishes in well under a second.
const TINY: &[&str] = &[
    "data.train_scenes=3",
    "data.val_scenes=2",
    "data.point_budget=300",
    "data.range_m=15.0",
    "encoder.vfe_channels=4",
    "encoder.channels=6",
    "vote.hidden=6",
    "sir.channels=6",
    "sir.head_hidden=6",
    "sir2.channels=6",
    "sir2.head_hidden=6",
    "sir2.layers=2",
    "train.steps=4",
    "train.log_every=2",
    "train.checkpoint_every=2",
    "dense.channels=4",
    "dense.pillar_channels=4",
    "dense.conv_layers=2",
    "dense.steps=3",
    "bench.ranges=[10.0, 20.0]",
    "bench.point_budget=200",
    "bench.repeats=1",
];

fn with_tiny(cmd: &mut Command) -> &mut Command {
    for s in TINY {
        cmd.args(["--set", s]);
    }
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn ok(cmd: &mut Command) -> Output {
    let out = run(cmd);
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn gen_data(dir: &Path, seed: u64) {
    ok(with_tiny(
        fsd().args(["gen-data", "--seed", &seed.to_string(), "--out"]).arg(dir),
    ));
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn gen_data_twice_gives_identical_directories() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    gen_data(&a, 7);
    gen_data(&b, 7);
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.keys().filter(|k| k.starts_with("train")).count(), 3);
    assert_eq!(ta.keys().filter(|k| k.starts_with("val")).count(), 2);
    assert_eq!(ta, tb);

    let c = t.path().join("c");
    gen_data(&c, 8);
    assert_ne!(tree(&c), ta);
}

#[test]
fn gen_data_refuses_to_overwrite_without_force() {
    let t = tempfile::tempdir().unwrap();
    gen_data(t.path(), 1);
    let out = run(with_tiny(fsd().args(["gen-data", "--out"]).arg(t.path())));
    assert_eq!(out.status.code(), Some(3));
    ok(with_tiny(
        fsd()
            .args(["gen-data", "--force", "--seed", "2", "--out"])
            .arg(t.path()),
    ));
}

#[test]
fn config_errors_exit_with_2() {
    let t = tempfile::tempdir().unwrap();
    let out = run(fsd()
        .args(["gen-data", "--set", "vote.no_such_key=1", "--out"])
        .arg(t.path()));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));

    let out = run(fsd()
        .args(["gen-data", "--config", "/nonexistent/cfg.toml", "--out"])
        .arg(t.path()));
    assert_eq!(out.status.code(), Some(2));

    let cfg = t.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nlr = \"fast\"\n").unwrap();
    let out = run(fsd()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(t.path().join("d")));
    assert_eq!(out.status.code(), Some(2));
    assert!(!t.path().join("d").exists());
}

#[test]
fn config_file_and_overrides_layer() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("run.toml");
    std::fs::write(&cfg, "seed = 99\n[data]\nval_scenes = 1\n").unwrap();
    let d = t.path().join("d");
    ok(fsd()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .args([
            "--set",
            "data.train_scenes=2",
            "--set",
            "data.point_budget=200",
            "--out",
        ])
        .arg(&d));
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("dataset.json")).unwrap()).unwrap();
    assert_eq!(manifest["provenance"]["seed"], 99);
    assert_eq!(manifest["splits"]["train"], 2);
    assert_eq!(manifest["splits"]["val"], 1);
}

#[test]
fn train_eval_and_hash_warning() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    let out = t.path().join("run");
    gen_data(&data, 3);
    ok(with_tiny(
        fsd()
            .args(["train", "--pipeline", "fsd", "--data"])
            .arg(&data)
            .arg("--out")
            .arg(&out),
    ));
    for f in [
        "model.fsdc",
        "metrics.jsonl",
        "timings.jsonl",
        "config.toml",
        "checkpoints/step_000002.fsdc",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }

    let report = t.path().join("rep/eval.json");
    let res = ok(with_tiny(fsd().arg("eval"))
        .arg("--checkpoint")
        .arg(out.join("model.fsdc"))
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&report));
    assert!(!String::from_utf8_lossy(&res.stderr).contains("mismatch"));
    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(doc["model"]["kind"], "fsd");
    assert_eq!(doc["model"]["step"], 4);
    assert_eq!(doc["provenance"]["config_hash"], doc["model"]["config_hash"]);
    assert!(doc["report"]["classes"].is_object());
    assert!(t.path().join("rep/eval.pr.csv").exists());

    let res = ok(with_tiny(fsd().args(["eval", "--set", "eval.iou_threshold=0.7"]))
        .arg("--checkpoint")
        .arg(out.join("model.fsdc"))
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(t.path().join("rep/eval2.json")));
    assert!(String::from_utf8_lossy(&res.stderr).contains("config hash mismatch"));
}

#[test]
fn train_dense_pipeline() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen_data(&data, 4);
    let out = t.path().join("dense");
    ok(with_tiny(
        fsd()
            .args(["train", "--pipeline", "dense", "--data"])
            .arg(&data)
            .arg("--out")
            .arg(&out),
    ));
    let doc = ok(with_tiny(fsd().arg("eval"))
        .arg("--checkpoint")
        .arg(out.join("model.fsdc"))
        .arg("--data")
        .arg(&data));
    assert!(String::from_utf8_lossy(&doc.stdout).contains("mean AP"));
    assert!(out.join("eval_val.json").exists());
}

#[test]
fn missing_data_is_a_data_error_and_leaves_nothing() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("run");
    let res = run(with_tiny(
        fsd()
            .args(["train", "--data"])
            .arg(t.path().join("nope"))
            .arg("--out")
            .arg(&out),
    ));
    assert_eq!(res.status.code(), Some(3));
    assert!(!out.exists());

    let res = run(fsd().args(["eval", "--checkpoint"]).arg(t.path().join("missing.fsdc")));
    assert_eq!(res.status.code(), Some(3));
}

#[test]
fn non_finite_training_exits_4_and_keeps_only_the_dump() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen_data(&data, 5);
    let out = t.path().join("run");
    let res = run(with_tiny(fsd().arg("train"))
        .args(["--set", "train.lr=1e300", "--set", "train.steps=20", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(&out));
    assert_eq!(res.status.code(), Some(4), "{}", String::from_utf8_lossy(&res.stderr));
    let left: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .flatten()
        .map(|e| e.file_name())
        .collect();
    assert_eq!(left, vec![std::ffi::OsString::from("nonfinite.json")]);
    let dump: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("nonfinite.json")).unwrap()).unwrap();
    assert!(dump["scenes"].as_array().is_some_and(|s| !s.is_empty()));
}

#[test]
fn bad_thread_cap_is_a_config_error() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen_data(&data, 6);
    let res = run(with_tiny(fsd().env("FSD_THREADS", "many").arg("train"))
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(t.path().join("run")));
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn bench_writes_reports_with_provenance() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("bench");
    let res = ok(with_tiny(fsd().args(["bench", "--out"]).arg(&out)));
    assert!(String::from_utf8_lossy(&res.stdout).contains("exponents"));
    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("bench.json")).unwrap()).unwrap();
    assert_eq!(doc["rows"].as_array().unwrap().len(), 4);
    assert_eq!(doc["alloc_tracking"], true);
    assert!(doc["config_hash"].as_str().is_some_and(|h| !h.is_empty()));
    let csv = std::fs::read_to_string(out.join("bench.csv")).unwrap();
    assert!(csv.starts_with("pipeline,range_m,metric,value,config_hash"));
    assert_eq!(std::fs::read_dir(out.join("scenes")).unwrap().count(), 2);
}

#[test]
fn inspect_dumps_per_point_groups() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen_data(&data, 9);
    let scene = data.join("val/000000.fsds");
    let res = ok(with_tiny(fsd().args(["inspect", "--scene"]).arg(&scene)));
    let doc: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    let n = doc["points"].as_array().unwrap().len();
    assert_eq!(n, 300);
    assert_eq!(doc["stage1"]["group_of_point"].as_array().unwrap().len(), n);
    assert_eq!(doc["corrected"]["group_of_point"].as_array().unwrap().len(), n);
    assert!(doc["provenance"]["config_hash"].is_string());
}
