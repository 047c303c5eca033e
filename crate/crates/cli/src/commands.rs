use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fsd_core::bench::{bench_scenes, run_scaling_bench, Pipeline};
use fsd_core::checkpoint::Checkpoint;
use fsd_core::config::Provenance;
use fsd_core::data_synth::{generate_split, load_scene, load_split, save_scene, scene_path};
use fsd_core::dense::DenseBaseline;
use fsd_core::eval::evaluate;
use fsd_core::training::{
    final_checkpoint_path, metrics_path, restore_model, timings_path, StepRecord, Trainable, Trainer,
};
use fsd_core::{Detection, FsdError, FsdModel, ObjectClass, RunConfig, Scene};
use serde_json::json;

use crate::guard::OutputGuard;
use crate::{ConfigArgs, PipelineArg};

fn load_config(args: &ConfigArgs, extra: &[String]) -> Result<RunConfig> {
    let text = match &args.config {
        Some(p) => Some(
            fs::read_to_string(p)
                .map_err(|e| FsdError::Config(format!("cannot read config file {}: {e}", p.display())))?,
        ),
        None => None,
    };
    let mut overrides = args.overrides.clone();
    overrides.extend_from_slice(extra);
    Ok(RunConfig::from_layers(text.as_deref(), &overrides)?)
}

/// Worker cap from `FSD_THREADS`, default 1.
fn threads() -> Result<usize> {
    match std::env::var("FSD_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(FsdError::Config(format!("FSD_THREADS must be a positive integer, got `{v}`")).into()),
        },
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| FsdError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| FsdError::io(path, e))?;
    Ok(())
}

fn load_scenes(root: &Path, split: &str) -> Result<Vec<Scene>> {
    let dir = root.join(split);
    if !dir.is_dir() {
        return Err(FsdError::format(&dir, "split directory not found; run `fsd gen-data` first").into());
    }
    let scenes = load_split(root, split)?;
    if scenes.is_empty() {
        return Err(FsdError::format(&dir, "split holds no scene files").into());
    }
    Ok(scenes)
}

pub fn gen_data(args: &ConfigArgs, seed: Option<u64>, out: Option<PathBuf>, force: bool) -> Result<()> {
    let extra: Vec<String> = seed.map(|s| format!("seed={s}")).into_iter().collect();
    let cfg = load_config(args, &extra)?;
    let root = out.unwrap_or_else(|| PathBuf::from(&cfg.paths.data_dir));
    let splits = [("train", cfg.data.train_scenes), ("val", cfg.data.val_scenes)];
    for (split, _) in splits {
        let dir = root.join(split);
        let occupied = fs::read_dir(&dir).map(|mut d| d.next().is_some()).unwrap_or(false);
        if occupied {
            if !force {
                return Err(FsdError::format(&dir, "already holds scenes; pass --force to replace them").into());
            }
            fs::remove_dir_all(&dir).map_err(|e| FsdError::io(&dir, e))?;
        }
    }
    let mut guard = OutputGuard::new(&root);
    for (split, count) in splits {
        guard.artifact(root.join(split));
        for scene in generate_split(&cfg.data, cfg.seed, split, count)? {
            save_scene(&scene, &scene_path(&root, split, &scene.id))?;
        }
    }
    let manifest = json!({
        "provenance": Provenance::of(&cfg),
        "range_m": cfg.data.range_m,
        "point_budget": cfg.data.point_budget,
        "splits": { "train": cfg.data.train_scenes, "val": cfg.data.val_scenes },
    });
    write(
        &guard.artifact(root.join("dataset.json")),
        &serde_json::to_string_pretty(&manifest)?,
    )?;
    write(&guard.artifact(root.join("config.toml")), &cfg.to_toml())?;
    guard.finish();
    eprintln!(
        "wrote {} train and {} val scenes to {}",
        cfg.data.train_scenes,
        cfg.data.val_scenes,
        root.display()
    );
    Ok(())
}

fn run_training<M: Trainable + Sync>(
    cfg: &RunConfig,
    resume: Option<&Path>,
    scenes: &[Scene],
    out: &Path,
    guard: &mut OutputGuard,
) -> Result<()> {
    let mut trainer = match resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            if ckpt.config_hash != cfg.hash() {
                eprintln!(
                    "warning: resuming with the checkpoint's configuration ({}), not the given one ({})",
                    ckpt.config_hash,
                    cfg.hash()
                );
            }
            Trainer::<M>::from_checkpoint(&ckpt)?
        }
        None => Trainer::new(M::build(cfg)?),
    };
    trainer.threads = threads()?;
    if resume.is_none() {
        for p in [metrics_path(out), timings_path(out), out.join("checkpoints")] {
            guard.artifact(p);
        }
    }
    guard.artifact(final_checkpoint_path(out));
    guard.keep(out.join("nonfinite.json"));
    write(&out.join("config.toml"), &trainer.model.config().to_toml())?;

    let total = trainer.model.schedule().steps;
    let mut progress = |r: &StepRecord| {
        eprintln!(
            "step {:>6}/{total}  loss {:.4}  lr {:.2e}  |g| {:.3}",
            r.step, r.window_mean, r.lr, r.grad_norm
        );
    };
    let summary = trainer.run(scenes, Some(out), Some(&mut progress))?;
    if let Some(p) = summary.final_checkpoint {
        eprintln!("saved {}", p.display());
    }
    Ok(())
}

pub fn train(
    args: &ConfigArgs,
    pipeline: PipelineArg,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    resume: Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(args, &[])?;
    let data = data.unwrap_or_else(|| PathBuf::from(&cfg.paths.data_dir));
    let scenes = load_scenes(&data, "train")?;
    let name = match pipeline {
        PipelineArg::Fsd => "fsd",
        PipelineArg::Dense => "dense",
    };
    let out = out.unwrap_or_else(|| Path::new(&cfg.paths.out_dir).join(name));
    let mut guard = OutputGuard::new(&out);
    guard.artifact(out.join("config.toml"));
    match pipeline {
        PipelineArg::Fsd => run_training::<FsdModel>(&cfg, resume.as_deref(), &scenes, &out, &mut guard)?,
        PipelineArg::Dense => run_training::<DenseBaseline>(&cfg, resume.as_deref(), &scenes, &out, &mut guard)?,
    }
    guard.finish();
    Ok(())
}

fn detect_all(ckpt: &Checkpoint, path: &Path, scenes: &[Scene]) -> Result<Vec<Vec<Detection>>> {
    match ckpt.kind.as_str() {
        "fsd" => {
            let m: FsdModel = restore_model(ckpt)?;
            scenes
                .iter()
                .map(|s| m.infer(&s.pc).with_context(|| format!("scene {}", s.id)))
                .collect()
        }
        "dense" => {
            let m: DenseBaseline = restore_model(ckpt)?;
            scenes
                .iter()
                .map(|s| m.infer(&s.pc, s.range_m).with_context(|| format!("scene {}", s.id)))
                .collect()
        }
        other => Err(FsdError::format(path, format!("unknown model kind `{other}`")).into()),
    }
}

pub fn eval(
    args: &ConfigArgs,
    checkpoint: &Path,
    data: Option<PathBuf>,
    split: &str,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(args, &[])?;
    let ckpt = Checkpoint::load(checkpoint)?;
    if ckpt.config_hash != cfg.hash() {
        eprintln!(
            "warning: config hash mismatch: checkpoint was trained with {}, current config is {}. \
             Model settings come from the checkpoint, evaluation settings from the current config.",
            ckpt.config_hash,
            cfg.hash()
        );
    }
    let data = data.unwrap_or_else(|| PathBuf::from(&cfg.paths.data_dir));
    let scenes = load_scenes(&data, split)?;
    let dets = detect_all(&ckpt, checkpoint, &scenes)?;
    let gts: Vec<_> = scenes.iter().map(|s| s.gt.clone()).collect();
    let report = evaluate(&dets, &gts, &cfg.eval)?;

    let out = out.unwrap_or_else(|| {
        checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("eval_{split}.json"))
    });
    let pr = out.with_extension("pr.csv");
    let dir = out
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut guard = OutputGuard::new(dir);
    let doc = json!({
        "provenance": Provenance::of(&cfg),
        "model": {
            "kind": ckpt.kind,
            "config_hash": ckpt.config_hash,
            "seed": ckpt.seed,
            "step": ckpt.step,
        },
        "split": split,
        "report": report,
    });
    write(&guard.artifact(out.clone()), &serde_json::to_string_pretty(&doc)?)?;
    write(&guard.artifact(pr.clone()), &report.pr_csv())?;
    guard.finish();

    println!("{:<14} {:>8} {:>6} {:>6}", "class", "AP", "gt", "det");
    for (name, r) in &report.classes {
        let ap = r.ap.map_or("null".to_string(), |a| format!("{a:.4}"));
        println!("{name:<14} {ap:>8} {:>6} {:>6}", r.num_gt, r.num_det);
    }
    for (name, bins) in &report.length_bins {
        for b in bins {
            let hi = b.hi.map_or("inf".to_string(), |h| format!("{h}"));
            let ap = b.result.ap.map_or("null".to_string(), |a| format!("{a:.4}"));
            println!(
                "{:<14} {ap:>8} {:>6}",
                format!("{name}[{},{hi})", b.lo),
                b.result.num_gt
            );
        }
    }
    let mean = report.mean_ap.map_or("null".to_string(), |a| format!("{a:.4}"));
    println!("mean AP ({} IoU {}) {mean}", cfg.eval.iou_mode, cfg.eval.iou_threshold);
    eprintln!("wrote {} and {}", out.display(), pr.display());
    Ok(())
}

pub fn bench(
    args: &ConfigArgs,
    fsd_checkpoint: Option<PathBuf>,
    dense_checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(args, &[])?;
    let out = out.unwrap_or_else(|| Path::new(&cfg.paths.out_dir).join("bench"));
    let mut guard = OutputGuard::new(&out);
    let scene_dir = guard.artifact(out.join("scenes"));

    // Both pipelines read back the same files.
    let mut scenes = Vec::new();
    for s in bench_scenes(&cfg)? {
        let path = scene_path(&out, "scenes", &s.id);
        save_scene(&s, &path)?;
        scenes.push(load_scene(&path)?);
    }
    let mut notes = Vec::new();
    let fsd = match &fsd_checkpoint {
        Some(p) => restore_model::<FsdModel>(&Checkpoint::load(p)?)?,
        None => {
            notes.push("fsd weights are untrained".to_string());
            FsdModel::new(&cfg)?
        }
    };
    let dense = match &dense_checkpoint {
        Some(p) => restore_model::<DenseBaseline>(&Checkpoint::load(p)?)?,
        None => {
            notes.push("dense weights are untrained".to_string());
            DenseBaseline::new(&cfg)?
        }
    };
    let mut report = run_scaling_bench(&cfg, &fsd, &dense, &scenes)?;
    report.notes.extend(notes);
    write(&guard.artifact(out.join("bench.json")), &report.to_json())?;
    write(&guard.artifact(out.join("bench.csv")), &report.to_csv())?;
    guard.finish();

    println!(
        "{:<6} {:>8} {:>12} {:>14} {:>10}",
        "pipe", "range_m", "latency_ms", "peak_alloc_mb", "units"
    );
    for r in &report.rows {
        println!(
            "{:<6} {:>8} {:>12.3} {:>14.3} {:>10}",
            r.pipeline.name(),
            r.range_m,
            r.latency_ms,
            r.peak_alloc_mb,
            r.units
        );
    }
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
    for p in [Pipeline::Fsd, Pipeline::Dense] {
        let e = report.exponents(p);
        println!(
            "{} exponents vs range: latency {}, memory {}",
            p.name(),
            fmt(e.latency),
            fmt(e.memory)
        );
    }
    eprintln!("wrote {} (scenes in {})", out.display(), scene_dir.display());
    Ok(())
}

fn class_name(k: usize) -> &'static str {
    ObjectClass::from_index(k).map_or("unknown", ObjectClass::name)
}

pub fn inspect(args: &ConfigArgs, scene: &Path, checkpoint: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(args, &[])?;
    let s = load_scene(scene)?;
    let model = match &checkpoint {
        Some(p) => restore_model::<FsdModel>(&Checkpoint::load(p)?)?,
        None => FsdModel::new(&cfg)?,
    };
    let inf = model.infer_detailed(&s.pc)?;
    let n = s.pc.len();
    let per_point = |idx: &fsd_core::GroupIndex, rows: Option<&[usize]>| -> Vec<Option<usize>> {
        let mut v = vec![None; n];
        for r in 0..idx.n() {
            let p = rows.map_or(r, |rows| rows[r]);
            v[p] = idx.get(r);
        }
        v
    };
    let plan = &inf.plan;
    let stage1_rows = (plan.grouping.index.n() != n).then_some(plan.rows1.as_slice());
    let doc = json!({
        "provenance": Provenance::of(model.config()),
        "scene": { "id": s.id, "range_m": s.range_m, "seed": s.seed },
        "points": s.pc.coords,
        "gt": s.gt.iter().map(|g| json!({ "class": g.class.name(), "box": g.bbox })).collect::<Vec<_>>(),
        "stage1": {
            "group_of_point": per_point(&plan.grouping.index, stage1_rows),
            "group_class": plan.grouping.group_class.iter().map(|&k| class_name(k)).collect::<Vec<_>>(),
            "group_centers": plan.grouping.group_centers,
        },
        "proposals": plan.proposals.iter().map(|p| json!({
            "box": p.bbox,
            "class": class_name(p.class),
            "score": p.score,
            "group_id": p.group_id,
        })).collect::<Vec<_>>(),
        "corrected": {
            "group_of_point": per_point(&plan.corrected.index, None),
            "proposal_of_group": plan.corrected.proposal_ids,
        },
        "detections": inf.detections.iter().map(|d| json!({
            "box": d.bbox,
            "class": d.class.name(),
            "score": d.score,
        })).collect::<Vec<_>>(),
        "stats": inf.stats,
    });
    let text = serde_json::to_string_pretty(&doc)?;
    match out {
        Some(p) => {
            let dir = p
                .parent()
                .filter(|d| !d.as_os_str().is_empty())
                .unwrap_or(Path::new("."));
            let mut guard = OutputGuard::new(dir);
            write(&guard.artifact(p.clone()), &text)?;
            guard.finish();
        }
        None => println!("{text}"),
    }
    Ok(())
}
