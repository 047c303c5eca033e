//! Average precision with greedy score-ordered matching and a breakdown of
//! vehicle classes by ground-truth length.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::config::EvalConfig;
use crate::data_synth::{GtObject, ObjectClass};
use crate::error::{FsdError, Result};
use crate::geometry::{iou_3d, iou_bev, Box3D};
use crate::model::Detection;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum IouMode {
    Bev,
    ThreeD,
}

impl IouMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bev" => Ok(Self::Bev),
            "3d" => Ok(Self::ThreeD),
            other => Err(FsdError::Config(format!("unknown IoU mode {other:?}"))),
        }
    }

    pub fn iou(self, a: &Box3D, b: &Box3D) -> f64 {
        match self {
            Self::Bev => iou_bev(a, b),
            Self::ThreeD => iou_3d(a, b),
        }
    }
}

/// A scored box of one class in one scene.
#[derive(Clone, Copy, Debug)]
pub struct ScoredBox {
    pub scene: usize,
    pub bbox: Box3D,
    pub score: f64,
}

/// One point of a precision/recall curve, after the detection with `score`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PrPoint {
    pub score: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Matching outcome for one class (and optionally one length bin).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ApResult {
    /// `None` when there is no ground truth to recall.
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub num_det: usize,
    pub true_positives: usize,
    #[serde(skip)]
    pub curve: Vec<PrPoint>,
}

/// 101-point interpolated AP: the mean over recall levels 0, 0.01, …, 1 of
/// the best precision reached at or beyond each level.
pub fn ap_101(curve: &[PrPoint]) -> f64 {
    let mut envelope: Vec<(f64, f64)> = curve.iter().map(|p| (p.recall, p.precision)).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i].1 = envelope[i].1.max(envelope[i + 1].1);
    }
    let mut sum = 0.0;
    let mut j = 0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        while j < envelope.len() && envelope[j].0 < level - 1e-12 {
            j += 1;
        }
        if j < envelope.len() {
            sum += envelope[j].1;
        }
    }
    sum / 101.0
}

/// Greedy matching in descending score order. Each detection takes the
/// unmatched ground truth of highest IoU at or above `thresh`.
///
/// Ground truth with `ignored[s][g]` set neither counts toward recall nor
/// makes a matching detection a false positive. Unmatched detections for
/// which `det_ignored` holds are dropped as well, so a length bin only scores
/// detections that plausibly belong to it.
pub fn match_and_score(
    dets: &[ScoredBox],
    gts: &[Vec<Box3D>],
    ignored: &[Vec<bool>],
    det_ignored: &dyn Fn(&ScoredBox) -> bool,
    thresh: f64,
    mode: IouMode,
) -> ApResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .total_cmp(&dets[a].score)
            .then(dets[a].scene.cmp(&dets[b].scene))
            .then(a.cmp(&b))
    });
    let num_gt: usize = ignored.iter().flatten().filter(|&&ig| !ig).count();
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut curve = Vec::with_capacity(dets.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &d in &order {
        let det = &dets[d];
        let scene_gt = &gts[det.scene];
        let mut best: Option<(usize, f64)> = None;
        let mut hits_ignored = false;
        for (g, gb) in scene_gt.iter().enumerate() {
            if taken[det.scene][g] {
                continue;
            }
            let iou = mode.iou(&det.bbox, gb);
            if iou < thresh {
                continue;
            }
            if ignored[det.scene][g] {
                hits_ignored = true;
            } else if best.is_none_or(|(_, v)| iou > v) {
                best = Some((g, iou));
            }
        }
        match best {
            Some((g, _)) => {
                taken[det.scene][g] = true;
                tp += 1;
            }
            None if hits_ignored || det_ignored(det) => continue,
            None => fp += 1,
        }
        curve.push(PrPoint {
            score: det.score,
            recall: if num_gt > 0 { tp as f64 / num_gt as f64 } else { 0.0 },
            precision: tp as f64 / (tp + fp) as f64,
        });
    }
    ApResult {
        ap: (num_gt > 0).then(|| ap_101(&curve)),
        num_gt,
        num_det: tp + fp,
        true_positives: tp,
        curve,
    }
}

/// AP of one length bin `[lo, hi)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BinResult {
    pub lo: f64,
    /// `None` for the open last bin.
    pub hi: Option<f64>,
    #[serde(flatten)]
    pub result: ApResult,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub iou_mode: IouMode,
    pub score_threshold: f64,
    pub num_scenes: usize,
    pub classes: BTreeMap<String, ApResult>,
    /// Mean over classes with defined AP.
    pub mean_ap: Option<f64>,
    pub length_bins: BTreeMap<String, Vec<BinResult>>,
}

impl EvalReport {
    pub fn class_ap(&self, class: ObjectClass) -> Option<f64> {
        self.classes.get(class.name()).and_then(|r| r.ap)
    }

    /// AP of `class` in the bin starting at `lo`.
    pub fn bin_ap(&self, class: ObjectClass, lo: f64) -> Option<f64> {
        self.length_bins
            .get(class.name())?
            .iter()
            .find(|b| b.lo == lo)
            .and_then(|b| b.result.ap)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Precision/recall curves: `class,bin,score,recall,precision` rows.
    pub fn pr_csv(&self) -> String {
        let mut s = String::from("class,bin,score,recall,precision\n");
        for (name, r) in &self.classes {
            for p in &r.curve {
                let _ = writeln!(s, "{name},all,{},{},{}", p.score, p.recall, p.precision);
            }
        }
        for (name, bins) in &self.length_bins {
            for b in bins {
                let label = match b.hi {
                    Some(hi) => format!("{}-{}", b.lo, hi),
                    None => format!("{}+", b.lo),
                };
                for p in &b.result.curve {
                    let _ = writeln!(s, "{name},{label},{},{},{}", p.score, p.recall, p.precision);
                }
            }
        }
        s
    }
}

/// Scores detections against ground truth over a set of scenes.
pub fn evaluate(detections: &[Vec<Detection>], gt: &[Vec<GtObject>], cfg: &EvalConfig) -> Result<EvalReport> {
    if detections.len() != gt.len() {
        return Err(FsdError::contract(format!(
            "{} detection lists for {} scenes",
            detections.len(),
            gt.len()
        )));
    }
    let mode = IouMode::parse(&cfg.iou_mode)?;
    let mut classes = BTreeMap::new();
    let mut length_bins = BTreeMap::new();
    for class in ObjectClass::ALL {
        let dets: Vec<ScoredBox> = detections
            .iter()
            .enumerate()
            .flat_map(|(s, ds)| {
                ds.iter()
                    .filter(|d| d.class == class && d.score >= cfg.score_threshold)
                    .map(move |d| ScoredBox {
                        scene: s,
                        bbox: d.bbox,
                        score: d.score,
                    })
            })
            .collect();
        let gts: Vec<Vec<Box3D>> = gt
            .iter()
            .map(|g| g.iter().filter(|o| o.class == class).map(|o| o.bbox).collect())
            .collect();
        let none: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let all = match_and_score(&dets, &gts, &none, &|_| false, cfg.iou_threshold, mode);
        classes.insert(class.name().to_string(), all);

        if class.is_vehicle_like() && !cfg.length_bins.is_empty() {
            let mut bins = Vec::new();
            for (k, &lo) in cfg.length_bins.iter().enumerate() {
                let hi = cfg.length_bins.get(k + 1).copied();
                let inside = |l: f64| l >= lo && hi.is_none_or(|h| l < h);
                let ignored: Vec<Vec<bool>> = gts.iter().map(|g| g.iter().map(|b| !inside(b.l)).collect()).collect();
                let result = match_and_score(&dets, &gts, &ignored, &|d| !inside(d.bbox.l), cfg.iou_threshold, mode);
                bins.push(BinResult { lo, hi, result });
            }
            length_bins.insert(class.name().to_string(), bins);
        }
    }
    let defined: Vec<f64> = classes.values().filter_map(|r: &ApResult| r.ap).collect();
    Ok(EvalReport {
        iou_threshold: cfg.iou_threshold,
        iou_mode: mode,
        score_threshold: cfg.score_threshold,
        num_scenes: gt.len(),
        mean_ap: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        classes,
        length_bins,
    })
}
