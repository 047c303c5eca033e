use fsd_core::checkpoint::Checkpoint;
use fsd_core::data_synth::{generate_split, load_split, save_scene, scene_path};
use fsd_core::dense::DenseBaseline;
use fsd_core::eval::evaluate;
use fsd_core::training::{final_checkpoint_path, metrics_path, restore_model, Trainer};
use fsd_core::{FsdError, FsdModel, RunConfig};

fn tiny() -> RunConfig {
    let overrides: Vec<String> = [
        "data.train_scenes=4",
        "data.val_scenes=2",
        "data.point_budget=400",
        "data.range_m=15.0",
        "encoder.vfe_channels=4",
        "encoder.channels=6",
        "vote.hidden=6",
        "sir.channels=6",
        "sir.head_hidden=6",
        "sir2.channels=6",
        "sir2.head_hidden=6",
        "sir2.layers=2",
        "train.steps=6",
        "train.log_every=1",
        "train.checkpoint_every=3",
        "dense.channels=4",
        "dense.pillar_channels=4",
        "dense.conv_layers=2",
        "dense.steps=4",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    RunConfig::from_layers(None, &overrides).unwrap()
}

#[test]
fn scenes_survive_disk_and_train_to_a_restorable_checkpoint() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let train = generate_split(&cfg.data, cfg.seed, "train", cfg.data.train_scenes).unwrap();
    let val = generate_split(&cfg.data, cfg.seed, "val", cfg.data.val_scenes).unwrap();
    for (split, scenes) in [("train", &train), ("val", &val)] {
        for s in scenes {
            save_scene(s, &scene_path(dir.path(), split, &s.id)).unwrap();
        }
    }
    assert_eq!(load_split(dir.path(), "train").unwrap(), train);
    let val = load_split(dir.path(), "val").unwrap();

    let out = dir.path().join("run");
    let mut tr = Trainer::new(FsdModel::new(&cfg).unwrap());
    let summary = tr.run(&train, Some(&out), None).unwrap();
    assert_eq!(summary.steps_run, 6);
    assert!(summary.losses.iter().all(|l| l.is_finite()));

    // one header line, then one record per step
    let log = std::fs::read_to_string(metrics_path(&out)).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 7);
    assert_eq!(lines[0]["provenance"]["config_hash"], cfg.hash());
    assert_eq!(lines[6]["step"], 6);

    let ckpt = Checkpoint::load(&final_checkpoint_path(&out)).unwrap();
    assert_eq!(
        (ckpt.kind.as_str(), ckpt.step, ckpt.config_hash.as_str()),
        ("fsd", 6, cfg.hash().as_str())
    );
    let restored: FsdModel = restore_model(&ckpt).unwrap();
    for s in &val {
        assert_eq!(restored.infer(&s.pc).unwrap(), tr.model.infer(&s.pc).unwrap());
    }

    // a dense checkpoint is not an FSD model
    let dense = Trainer::new(DenseBaseline::new(&cfg).unwrap()).checkpoint();
    assert!(matches!(restore_model::<FsdModel>(&dense), Err(FsdError::Contract(_))));
}

#[test]
fn resuming_from_a_midway_checkpoint_matches_an_uninterrupted_run() {
    let cfg = tiny();
    let dir = tempfile::tempdir().unwrap();
    let train = generate_split(&cfg.data, cfg.seed, "train", cfg.data.train_scenes).unwrap();

    let mut full = Trainer::new(DenseBaseline::new(&cfg).unwrap());
    full.run(&train, Some(&dir.path().join("full")), None).unwrap();

    let mut first = Trainer::new(DenseBaseline::new(&cfg).unwrap());
    first.run(&train, Some(&dir.path().join("part")), None).unwrap();
    let mid = Checkpoint::load(&dir.path().join("part/checkpoints/step_000003.fsdc")).unwrap();
    let mut resumed = Trainer::<DenseBaseline>::from_checkpoint(&mid).unwrap();
    assert_eq!(resumed.step, 3);
    resumed.run(&train, None, None).unwrap();
    assert_eq!(resumed.checkpoint().encode(), full.checkpoint().encode());

    let val = generate_split(&cfg.data, cfg.seed, "val", 2).unwrap();
    let gts: Vec<_> = val.iter().map(|s| s.gt.clone()).collect();
    let report = |m: &DenseBaseline| {
        let dets: Vec<_> = val.iter().map(|s| m.infer(&s.pc, s.range_m).unwrap()).collect();
        evaluate(&dets, &gts, &cfg.eval).unwrap().to_json()
    };
    assert_eq!(report(&resumed.model), report(&full.model));
}
