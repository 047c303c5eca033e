//! Run configuration.
//!
//! Layering is defaults < config file < `section.key=value` overrides. Keys
//! that do not exist in the defaults are rejected at every layer. Every
//! artifact records [`RunConfig::hash`].

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FsdError, Result};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub vote: VoteConfig,
    pub sir: SirConfig,
    pub sir2: Sir2Config,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub dense: DenseConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub paths: PathsConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Half side of the square perception area, meters.
    pub range_m: f64,
    pub point_budget: usize,
    /// Share of the budget spent on object surfaces; the rest is ground and clutter.
    pub object_fraction: f64,
    pub objects_per_1000m2: f64,
    pub max_objects: usize,
    pub min_points_per_object: usize,
    /// Sampling weights for vehicle, large_vehicle, pedestrian, cyclist.
    pub class_mix: [f64; 4],
    pub sensor_height: f64,
    /// Share of the non-object budget spent on unlabeled clutter.
    pub clutter_fraction: f64,
    pub train_scenes: usize,
    pub val_scenes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub voxel_size: [f64; 3],
    pub vfe_channels: usize,
    pub channels: usize,
    pub neighbor_rounds: usize,
    /// Feed each point's horizontal direction from the sensor and its height
    /// to the first encoder layer.
    pub sensor_features: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VoteConfig {
    pub hidden: usize,
    pub fg_threshold: f64,
    /// CCL connection radius per class, meters.
    pub radius: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SirConfig {
    pub layers: usize,
    pub channels: usize,
    pub head_hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Sir2Config {
    pub layers: usize,
    pub channels: usize,
    pub head_hidden: usize,
    /// Proposals below this score are not used for regrouping.
    pub proposal_min_score: f64,
    pub max_proposals: usize,
    /// Each proposal box is grown by this much per side before regrouping.
    pub correction_margin: f64,
    /// Residual regression is supervised only above this proposal IoU.
    pub regression_iou: f64,
    pub nms_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub w_sem: f64,
    pub w_vote: f64,
    pub w_reg: f64,
    pub w_cls: f64,
    pub w_res: f64,
    pub w_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    /// Scenes averaged per optimizer step.
    pub batch_size: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenseConfig {
    pub cell_size: f64,
    pub pillar_channels: usize,
    pub channels: usize,
    pub conv_layers: usize,
    pub memory_cap_mb: f64,
    pub heatmap_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    pub steps: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    /// `"3d"` or `"bev"`.
    pub iou_mode: String,
    /// Lower edges of the vehicle length bins; the last bin is open.
    pub length_bins: Vec<f64>,
    pub score_threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub ranges: Vec<f64>,
    pub point_budget: usize,
    pub repeats: usize,
    /// Minimum wall time per measured sample before repeats are raised.
    pub min_sample_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data_dir: String,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            vote: VoteConfig::default(),
            sir: SirConfig::default(),
            sir2: Sir2Config::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            dense: DenseConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            range_m: 25.0,
            point_budget: 2000,
            object_fraction: 0.6,
            objects_per_1000m2: 3.0,
            max_objects: 256,
            min_points_per_object: 16,
            class_mix: [0.35, 0.25, 0.2, 0.2],
            sensor_height: 1.9,
            clutter_fraction: 0.25,
            train_scenes: 200,
            val_scenes: 50,
        }
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            voxel_size: [0.25, 0.25, 0.25],
            vfe_channels: 16,
            channels: 32,
            neighbor_rounds: 2,
            sensor_features: true,
        }
    }
}

impl Default for VoteConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            fg_threshold: 0.3,
            radius: [1.2, 1.2, 0.6, 0.6],
        }
    }
}

impl Default for SirConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            channels: 32,
            head_hidden: 64,
        }
    }
}

impl Default for Sir2Config {
    fn default() -> Self {
        Self {
            layers: 6,
            channels: 32,
            head_hidden: 64,
            proposal_min_score: 0.1,
            max_proposals: 128,
            correction_margin: 0.0,
            regression_iou: 0.3,
            nms_iou: 0.25,
        }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            w_sem: 1.0,
            w_vote: 1.0,
            w_reg: 1.0,
            w_cls: 1.0,
            w_res: 1.0,
            w_iou: 1.0,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            warmup_steps: 50,
            grad_clip: 10.0,
            batch_size: 1,
            checkpoint_every: 500,
            log_every: 10,
        }
    }
}

impl Default for DenseConfig {
    fn default() -> Self {
        Self {
            cell_size: 0.5,
            pillar_channels: 16,
            channels: 16,
            conv_layers: 6,
            memory_cap_mb: 2048.0,
            heatmap_threshold: 0.1,
            nms_iou: 0.25,
            max_detections: 100,
            steps: 2000,
            lr: 1e-3,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            iou_mode: "3d".to_string(),
            length_bins: vec![0.0, 4.0, 8.0, 12.0],
            score_threshold: 0.05,
        }
    }
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            ranges: vec![50.0, 100.0, 200.0],
            point_budget: 2000,
            repeats: 3,
            min_sample_ms: 1.0,
        }
    }
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".to_string(),
            out_dir: "runs".to_string(),
        }
    }
}

/// Merges `src` into `dst`, rejecting keys absent from `dst`.
fn merge_strict(dst: &mut toml::Table, src: toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in src {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match (dst.get_mut(&k), v) {
            (None, _) => return Err(FsdError::Config(format!("unknown key `{path}`"))),
            (Some(toml::Value::Table(d)), toml::Value::Table(s)) => merge_strict(d, s, &path)?,
            (Some(toml::Value::Table(_)), _) => {
                return Err(FsdError::Config(format!("`{path}` is a section, not a value")))
            }
            (Some(slot), v) => *slot = v,
        }
    }
    Ok(())
}

fn parse_override_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    /// Layers a TOML file and `a.b=value` overrides over the defaults.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match file {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| FsdError::io(p, e))?),
            None => None,
        };
        Self::from_layers(text.as_deref(), overrides)
    }

    pub fn from_layers(file_text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut base = match toml::Value::try_from(RunConfig::default()) {
            Ok(toml::Value::Table(t)) => t,
            _ => return Err(FsdError::Config("default config is not a table".into())),
        };
        if let Some(text) = file_text {
            let file: toml::Table = toml::from_str(text).map_err(|e| FsdError::Config(e.to_string()))?;
            merge_strict(&mut base, file, "")?;
        }
        for ov in overrides {
            let (path, raw) = ov
                .split_once('=')
                .ok_or_else(|| FsdError::Config(format!("override `{ov}` is not key=value")))?;
            let keys: Vec<&str> = path.trim().split('.').collect();
            let mut table = &mut base;
            for k in &keys[..keys.len() - 1] {
                table = match table.get_mut(*k) {
                    Some(toml::Value::Table(t)) => t,
                    _ => return Err(FsdError::Config(format!("unknown key `{path}`"))),
                };
            }
            let last = keys[keys.len() - 1];
            match table.get_mut(last) {
                Some(toml::Value::Table(_)) | None => return Err(FsdError::Config(format!("unknown key `{path}`"))),
                Some(slot) => *slot = parse_override_value(raw.trim()),
            }
        }
        let cfg: RunConfig = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| FsdError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FsdError::Config(m.to_string()));
        if self.encoder.voxel_size.iter().any(|&v| !(v > 0.0)) {
            return bad("encoder.voxel_size must be positive");
        }
        if self.vote.radius.iter().any(|&r| !(r > 0.0)) {
            return bad("vote.radius must be positive");
        }
        if !(0.0..1.0).contains(&self.vote.fg_threshold) {
            return bad("vote.fg_threshold must lie in [0, 1)");
        }
        if self.sir.layers == 0 || self.sir2.layers == 0 {
            return bad("SIR stacks need at least one layer");
        }
        if self.train.batch_size == 0 {
            return bad("train.batch_size must be positive");
        }
        if self.data.point_budget == 0 {
            return bad("data.point_budget must be positive");
        }
        if !(self.data.range_m > 0.0) {
            return bad("data.range_m must be positive");
        }
        if self.data.class_mix.iter().any(|&w| w < 0.0) || self.data.class_mix.iter().sum::<f64>() <= 0.0 {
            return bad("data.class_mix needs non-negative weights with a positive sum");
        }
        if !(self.dense.cell_size > 0.0) {
            return bad("dense.cell_size must be positive");
        }
        if self.eval.iou_mode != "3d" && self.eval.iou_mode != "bev" {
            return bad("eval.iou_mode must be \"3d\" or \"bev\"");
        }
        if self.eval.length_bins.windows(2).any(|w| w[1] <= w[0]) {
            return bad("eval.length_bins must increase");
        }
        if self.bench.ranges.windows(2).any(|w| w[1] <= w[0]) {
            return bad("bench.ranges must increase");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Short stable digest of the full configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(&digest[..8])
    }
}

/// Identifies the producer of an artifact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
}

impl Provenance {
    pub fn of(cfg: &RunConfig) -> Self {
        Self {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            code_version: CODE_VERSION.to_string(),
        }
    }
}
