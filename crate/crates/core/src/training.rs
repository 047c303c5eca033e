//! Optimizer, training loop, logging and checkpoint restore.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{Provenance, RunConfig, TrainConfig, CODE_VERSION};
use crate::data_synth::Scene;
use crate::error::{FsdError, Result};
use crate::model::FsdModel;
use crate::nn::{Grads, ParamStore};
use crate::tensor::FeatureArray;

/// Named loss values of one pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub terms: Vec<(&'static str, f64)>,
}

impl LossTerms {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.terms.iter().all(|(_, v)| v.is_finite())
    }
}

/// Schedule and optimizer settings resolved for one model family.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub steps: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Schedule {
    pub fn from_train(t: &TrainConfig) -> Self {
        Self {
            steps: t.steps,
            lr: t.lr,
            warmup_steps: t.warmup_steps,
            weight_decay: t.weight_decay,
            beta1: t.beta1,
            beta2: t.beta2,
            grad_clip: t.grad_clip,
            batch_size: t.batch_size,
            checkpoint_every: t.checkpoint_every,
            log_every: t.log_every,
        }
    }

    /// Linear warmup, then cosine decay to zero at `steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// A model the training loop can drive.
pub trait Trainable: Sized {
    const KIND: &'static str;
    fn build(cfg: &RunConfig) -> Result<Self>;
    fn config(&self) -> &RunConfig;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn schedule(&self) -> Schedule;
    fn scene_pass(&self, scene: &Scene) -> Result<(LossTerms, Grads)>;
}

impl Trainable for FsdModel {
    const KIND: &'static str = "fsd";

    fn build(cfg: &RunConfig) -> Result<Self> {
        FsdModel::new(cfg)
    }

    fn config(&self) -> &RunConfig {
        &self.cfg
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn schedule(&self) -> Schedule {
        Schedule::from_train(&self.cfg.train)
    }

    fn scene_pass(&self, scene: &Scene) -> Result<(LossTerms, Grads)> {
        let pass = self.train_pass(scene)?;
        let l = pass.loss;
        let terms = vec![
            ("l_sem", l.l_sem),
            ("l_vote", l.l_vote),
            ("l_reg", l.l_reg),
            ("l_cls", l.l_cls),
            ("l_res", l.l_res),
            ("l_iou", l.l_iou),
        ];
        Ok((LossTerms { total: l.total, terms }, pass.grads))
    }
}

/// Adam with decoupled weight decay. Decay applies to weight matrices only,
/// not to biases or normalization gains.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub m: Vec<FeatureArray>,
    pub v: Vec<FeatureArray>,
    pub t: u64,
    eps: f64,
}

impl AdamW {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<FeatureArray> = params
            .tensors()
            .iter()
            .map(|t| FeatureArray::zeros(t.n(), t.c()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            eps: 1e-8,
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64, s: &Schedule) {
        self.t += 1;
        let bc1 = 1.0 - s.beta1.powi(self.t as i32);
        let bc2 = 1.0 - s.beta2.powi(self.t as i32);
        for (k, (p, g)) in params.tensors_mut().iter_mut().zip(grads.tensors()).enumerate() {
            let decay = if p.n() > 1 { s.weight_decay } else { 0.0 };
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = s.beta1 * *mi + (1.0 - s.beta1) * gi;
                *vi = s.beta2 * *vi + (1.0 - s.beta2) * gi * gi;
                let step = (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                *pi -= lr * (step + decay * *pi);
            }
        }
    }
}

/// Scales gradients so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(g: &mut Grads, max_norm: f64) -> f64 {
    let norm = g.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        g.scale(max_norm / norm);
    }
    norm
}

/// One line of the metrics log.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: BTreeMap<&'static str, f64>,
    /// Mean total loss since the previous record.
    pub window_mean: f64,
    pub grad_norm: f64,
    pub scenes: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
struct TimingRecord {
    step: usize,
    step_ms: f64,
    elapsed_s: f64,
}

/// Outcome of a training run.
#[derive(Clone, Debug, Default)]
pub struct TrainSummary {
    pub steps_run: usize,
    /// Total loss of every step in order.
    pub losses: Vec<f64>,
    pub final_checkpoint: Option<PathBuf>,
}

/// Output locations of a run directory.
pub fn metrics_path(out: &Path) -> PathBuf {
    out.join("metrics.jsonl")
}

pub fn timings_path(out: &Path) -> PathBuf {
    out.join("timings.jsonl")
}

pub fn final_checkpoint_path(out: &Path) -> PathBuf {
    out.join("model.fsdc")
}

/// Scene visiting order: a fresh seeded permutation per epoch, so any step
/// can be reproduced from the seed alone.
pub fn scene_for_step(seed: u64, n_scenes: usize, global_index: usize) -> usize {
    let epoch = global_index / n_scenes;
    let mut order: Vec<usize> = (0..n_scenes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(epoch as u64 + 1));
    order.shuffle(&mut rng);
    order[global_index % n_scenes]
}

/// Drives optimization of one model.
pub struct Trainer<M: Trainable> {
    pub model: M,
    pub opt: AdamW,
    pub step: usize,
    /// Worker threads for per-scene passes within a batch. Results are
    /// reduced in scene order, so the thread count never changes numbers.
    pub threads: usize,
}

impl<M: Trainable + Sync> Trainer<M> {
    pub fn new(model: M) -> Self {
        let opt = AdamW::new(model.params());
        Self {
            model,
            opt,
            step: 0,
            threads: 1,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let cfg = self.model.config();
        let names = self.model.params().names();
        let mut tensors = Vec::with_capacity(names.len() * 3);
        for (name, t) in self.model.params().iter() {
            tensors.push((format!("param/{name}"), t.clone()));
        }
        for (k, name) in names.iter().enumerate() {
            tensors.push((format!("adam.m/{name}"), self.opt.m[k].clone()));
            tensors.push((format!("adam.v/{name}"), self.opt.v[k].clone()));
        }
        Checkpoint {
            kind: M::KIND.to_string(),
            config_hash: cfg.hash(),
            code_version: CODE_VERSION.to_string(),
            config_toml: cfg.to_toml(),
            seed: cfg.seed,
            step: self.step as u64,
            tensors,
        }
    }

    /// Restores model weights, optimizer state and step count.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let model = restore_model::<M>(ckpt)?;
        let mut trainer = Self::new(model);
        let names: Vec<String> = trainer.model.params().names().to_vec();
        for (k, name) in names.iter().enumerate() {
            for (prefix, slot) in [("adam.m/", &mut trainer.opt.m[k]), ("adam.v/", &mut trainer.opt.v[k])] {
                let key = format!("{prefix}{name}");
                let t = ckpt
                    .tensor(&key)
                    .ok_or_else(|| FsdError::contract(format!("checkpoint lacks {key}")))?;
                if t.shape() != slot.shape() {
                    return Err(FsdError::contract(format!("{key} has the wrong shape")));
                }
                *slot = t.clone();
            }
        }
        trainer.step = ckpt.step as usize;
        trainer.opt.t = ckpt.step;
        Ok(trainer)
    }

    fn batch_passes(&self, batch: &[&Scene]) -> Vec<Result<(LossTerms, Grads)>> {
        let threads = self.threads.clamp(1, batch.len().max(1));
        if threads == 1 {
            return batch.iter().map(|s| self.model.scene_pass(s)).collect();
        }
        let model = &self.model;
        let chunk = batch.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|s| model.scene_pass(s)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("training worker panicked"))
                .collect()
        })
    }

    /// One optimizer step on `batch`. Fails on a non-finite loss or gradient
    /// before touching the parameters.
    pub fn train_step(&mut self, batch: &[&Scene]) -> Result<(LossTerms, f64)> {
        if batch.is_empty() {
            return Err(FsdError::contract("empty training batch"));
        }
        let sched = self.model.schedule();
        let mut sum_terms: Option<LossTerms> = None;
        let mut grads: Option<Grads> = None;
        for (scene, res) in batch.iter().zip(self.batch_passes(batch)) {
            let (terms, g) = res?;
            if !terms.is_finite() || !g.is_finite() {
                let what = if terms.is_finite() { "gradient" } else { "loss" };
                return Err(FsdError::NonFinite {
                    step: self.step,
                    scene_id: scene.id.clone(),
                    detail: format!("{what} is not finite: {:?}", terms),
                });
            }
            match (&mut sum_terms, &mut grads) {
                (Some(st), Some(acc)) => {
                    st.total += terms.total;
                    for (a, b) in st.terms.iter_mut().zip(&terms.terms) {
                        a.1 += b.1;
                    }
                    for (a, b) in acc.tensors_mut().iter_mut().zip(g.tensors()) {
                        a.add_assign(b);
                    }
                }
                _ => {
                    sum_terms = Some(terms);
                    grads = Some(g);
                }
            }
        }
        let (mut terms, mut grads) = (sum_terms.expect("nonempty batch"), grads.expect("nonempty batch"));
        let inv = 1.0 / batch.len() as f64;
        terms.total *= inv;
        terms.terms.iter_mut().for_each(|t| t.1 *= inv);
        grads.scale(inv);
        let norm = clip_grad_norm(&mut grads, sched.grad_clip);
        let lr = sched.lr_at(self.step);
        self.opt.update(self.model.params_mut(), &grads, lr, &sched);
        self.step += 1;
        Ok((terms, norm))
    }

    /// Trains until the schedule's step count, logging into `out` when given.
    /// Resumed runs append to existing logs.
    pub fn run(
        &mut self,
        scenes: &[Scene],
        out: Option<&Path>,
        mut progress: Option<&mut dyn FnMut(&StepRecord)>,
    ) -> Result<TrainSummary> {
        if scenes.is_empty() {
            return Err(FsdError::contract("no training scenes"));
        }
        let sched = self.model.schedule();
        let seed = self.model.config().seed;
        let mut logs = match out {
            Some(dir) => {
                let header = serde_json::json!({
                    "kind": M::KIND,
                    "provenance": Provenance::of(self.model.config()),
                });
                Some(RunLogs::open(dir, self.step > 0, &header)?)
            }
            None => None,
        };
        let start = Instant::now();
        let mut summary = TrainSummary::default();
        let mut window = Vec::new();
        while self.step < sched.steps {
            let step = self.step;
            let batch: Vec<&Scene> = (0..sched.batch_size)
                .map(|b| &scenes[scene_for_step(seed, scenes.len(), step * sched.batch_size + b)])
                .collect();
            let t0 = Instant::now();
            let (terms, norm) = match self.train_step(&batch) {
                Ok(v) => v,
                Err(e) => {
                    if let (Some(dir), FsdError::NonFinite { .. }) = (out, &e) {
                        let dump = serde_json::json!({
                            "step": step,
                            "scenes": batch.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(),
                            "error": e.to_string(),
                        });
                        let _ = std::fs::write(dir.join("nonfinite.json"), dump.to_string());
                    }
                    return Err(e);
                }
            };
            let step_ms = t0.elapsed().as_secs_f64() * 1e3;
            window.push(terms.total);
            summary.losses.push(terms.total);
            summary.steps_run += 1;
            let last = self.step == sched.steps;
            if self.step.is_multiple_of(sched.log_every.max(1)) || last {
                let mut loss: BTreeMap<&'static str, f64> = terms.terms.iter().copied().collect();
                loss.insert("total", terms.total);
                let record = StepRecord {
                    step: self.step,
                    lr: sched.lr_at(step),
                    loss,
                    window_mean: window.iter().sum::<f64>() / window.len() as f64,
                    grad_norm: norm,
                    scenes: batch.iter().map(|s| s.id.clone()).collect(),
                };
                window.clear();
                if let Some(l) = &mut logs {
                    l.write_metrics(&record)?;
                    l.write_timing(&TimingRecord {
                        step: self.step,
                        step_ms,
                        elapsed_s: start.elapsed().as_secs_f64(),
                    })?;
                }
                if let Some(cb) = progress.as_mut() {
                    cb(&record);
                }
            }
            if let Some(dir) = out {
                if sched.checkpoint_every > 0 && self.step.is_multiple_of(sched.checkpoint_every) && !last {
                    let path = dir.join("checkpoints").join(format!("step_{:06}.fsdc", self.step));
                    self.checkpoint().save(&path)?;
                }
            }
        }
        if let Some(dir) = out {
            let path = final_checkpoint_path(dir);
            self.checkpoint().save(&path)?;
            summary.final_checkpoint = Some(path);
        }
        if let Some(l) = &mut logs {
            l.flush()?;
        }
        Ok(summary)
    }
}

struct RunLogs {
    metrics: BufWriter<File>,
    timings: BufWriter<File>,
    metrics_path: PathBuf,
    timings_path: PathBuf,
}

impl RunLogs {
    /// Fresh logs start with `header` as their first line.
    fn open(dir: &Path, append: bool, header: &serde_json::Value) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| FsdError::io(dir, e))?;
        let open = |p: &Path| {
            let mut o = OpenOptions::new();
            o.create(true);
            if append {
                o.append(true);
            } else {
                o.write(true).truncate(true);
            }
            o.open(p).map(BufWriter::new).map_err(|e| FsdError::io(p, e))
        };
        let (mp, tp) = (metrics_path(dir), timings_path(dir));
        let mut logs = Self {
            metrics: open(&mp)?,
            timings: open(&tp)?,
            metrics_path: mp,
            timings_path: tp,
        };
        if !append {
            writeln!(logs.metrics, "{header}").map_err(|e| FsdError::io(&logs.metrics_path, e))?;
            writeln!(logs.timings, "{header}").map_err(|e| FsdError::io(&logs.timings_path, e))?;
        }
        Ok(logs)
    }

    fn write_metrics(&mut self, r: &StepRecord) -> Result<()> {
        let line = serde_json::to_string(r).expect("metrics serialize");
        writeln!(self.metrics, "{line}").map_err(|e| FsdError::io(&self.metrics_path, e))
    }

    fn write_timing(&mut self, r: &TimingRecord) -> Result<()> {
        let line = serde_json::to_string(r).expect("timings serialize");
        writeln!(self.timings, "{line}").map_err(|e| FsdError::io(&self.timings_path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.metrics.flush().map_err(|e| FsdError::io(&self.metrics_path, e))?;
        self.timings.flush().map_err(|e| FsdError::io(&self.timings_path, e))
    }
}

/// Rebuilds a model from the configuration and weights in a checkpoint.
pub fn restore_model<M: Trainable>(ckpt: &Checkpoint) -> Result<M> {
    if ckpt.kind != M::KIND {
        return Err(FsdError::contract(format!(
            "checkpoint holds a {} model, expected {}",
            ckpt.kind,
            M::KIND
        )));
    }
    let cfg = RunConfig::from_layers(Some(&ckpt.config_toml), &[])?;
    let mut model = M::build(&cfg)?;
    let mut loaded = ParamStore::new();
    for (name, t) in ckpt.with_prefix("param/") {
        loaded.add(name, t.clone());
    }
    model.params_mut().load_from(&loaded)?;
    Ok(model)
}
