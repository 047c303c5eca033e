//! The full sparse detector: encoder, voting, grouping, two recognition
//! stages, loss assembly and inference.
//!
//! Discrete choices (voxelization, grouping, proposal selection and
//! regrouping) are recorded in a [`ScenePlan`]. Gradients treat them as
//! constants, as do voted centers when used as group centers and proposal
//! boxes when used as refinement frames. Replaying a plan makes the loss a
//! smooth function of the parameters, which is what finite-difference checks
//! need.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::data_synth::{ObjectClass, Scene, NUM_CLASSES};
use crate::error::{FsdError, Result};
use crate::geometry::{nms_bev, residual_decode, Box3D, PointCloud};
use crate::losses::{sigmoid, total_loss, LossBreakdown, LossInputs};
use crate::nn::{Grads, ParamStore};
use crate::sir::{
    assign_group_targets, assign_refine_targets, decode_proposals, group_correct, refine_inputs, relative_coords,
    select_proposals, CorrectedGrouping, Proposal, RefineInputs, SirModule, SirModuleCache, BOUNDARY_DIMS,
};
use crate::sparse_encoder::{voxelize, EncoderOutput, SparseEncoder, SparseVoxelGrid};
use crate::tensor::FeatureArray;
use crate::vote_group::{ccl_group, Grouping, VoteCache, VoteHeads, VoteResult};

/// One detected object.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Detection {
    pub bbox: Box3D,
    pub class: ObjectClass,
    pub score: f64,
}

/// Discrete decisions made during one forward pass.
#[derive(Clone, Debug)]
pub struct ScenePlan {
    pub grid: SparseVoxelGrid,
    pub grouping: Grouping,
    /// Points taking part in first-stage groups.
    pub rows1: Vec<usize>,
    pub proposals: Vec<Proposal>,
    pub corrected: CorrectedGrouping,
    pub refine: RefineInputs,
}

/// Counts describing one forward pass.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ForwardStats {
    pub points: usize,
    pub voxels: usize,
    pub grouped_points: usize,
    pub groups: usize,
    pub positive_groups: usize,
    pub proposals: usize,
    pub refined_groups: usize,
    pub refine_positives: usize,
}

struct Activations {
    enc: EncoderOutput,
    votes: VoteResult,
    vote_cache: VoteCache,
    stage1: Option<(FeatureArray, FeatureArray, SirModuleCache)>,
    stage2: Option<(FeatureArray, FeatureArray, SirModuleCache)>,
    sub1_index: crate::segment_ops::GroupIndex,
}

/// Everything an inference pass decided, for inspection and benchmarks.
#[derive(Clone, Debug)]
pub struct Inference {
    pub detections: Vec<Detection>,
    pub plan: ScenePlan,
    pub stats: ForwardStats,
}

/// Result of a training forward/backward pass on one scene.
pub struct TrainPass {
    pub loss: LossBreakdown,
    pub grads: Grads,
    pub plan: ScenePlan,
    pub stats: ForwardStats,
}

#[derive(Clone, Debug)]
pub struct FsdModel {
    pub cfg: RunConfig,
    pub params: ParamStore,
    encoder: SparseEncoder,
    votes: VoteHeads,
    sir: SirModule,
    sir2: SirModule,
}

fn empty_like(n: usize, c: usize) -> FeatureArray {
    FeatureArray::zeros(n, c)
}

impl FsdModel {
    /// Builds a model with weights drawn from `cfg.seed`.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let encoder = SparseEncoder::new(&mut store, &cfg.encoder, &mut rng);
        let c = encoder.out_channels;
        let votes = VoteHeads::new(&mut store, c, NUM_CLASSES, &cfg.vote, &mut rng);
        let sir = SirModule::new(
            &mut store,
            "sir",
            c,
            cfg.sir.channels,
            cfg.sir.layers,
            cfg.sir.head_hidden,
            (NUM_CLASSES + 1, crate::geometry::CODE_LEN),
            &mut rng,
        );
        let sir2 = SirModule::new(
            &mut store,
            "sir2",
            c + BOUNDARY_DIMS,
            cfg.sir2.channels,
            cfg.sir2.layers,
            cfg.sir2.head_hidden,
            (crate::geometry::CODE_LEN, 1),
            &mut rng,
        );
        Ok(Self {
            cfg: cfg.clone(),
            params: store,
            encoder,
            votes,
            sir,
            sir2,
        })
    }

    pub fn num_sir_layers(&self) -> (usize, usize) {
        (self.sir.num_layers(), self.sir2.num_layers())
    }

    fn forward(&self, p: &ParamStore, pc: &PointCloud, fixed: Option<&ScenePlan>) -> Result<(ScenePlan, Activations)> {
        let grid = match fixed {
            Some(plan) => plan.grid.clone(),
            None => voxelize(pc, self.encoder.voxel_size, [0.0; 3])?,
        };
        let enc = self.encoder.forward(p, &grid, pc)?;
        let (votes, vote_cache) = self.votes.forward(p, &enc.point_features, &pc.coords)?;

        let grouping = match fixed {
            Some(plan) => plan.grouping.clone(),
            None => ccl_group(&votes, &self.cfg.vote.radius, self.cfg.vote.fg_threshold)?,
        };
        let rows1 = grouping.index.assigned_rows();
        let sub1_index = grouping.index.select_rows(&rows1);
        let sub_coords: Vec<[f64; 3]> = rows1.iter().map(|&i| pc.coords[i]).collect();
        let rel1 = relative_coords(&sub_coords, &grouping.group_centers, &sub1_index)?;
        let stage1 = if grouping.num_groups() > 0 {
            let f1 = enc.point_features.gather_rows(&rows1);
            Some(self.sir.forward(p, &f1, &rel1, &sub1_index)?)
        } else {
            None
        };

        let (proposals, corrected, refine) = match fixed {
            Some(plan) => (plan.proposals.clone(), plan.corrected.clone(), plan.refine.clone()),
            None => {
                let all = match &stage1 {
                    Some((cls, reg, _)) => decode_proposals(cls, reg, &grouping.group_centers)?,
                    None => Vec::new(),
                };
                let kept = select_proposals(&all, self.cfg.sir2.proposal_min_score, self.cfg.sir2.max_proposals);
                let corrected = group_correct(&kept, &pc.coords, self.cfg.sir2.correction_margin)?;
                let refine = refine_inputs(&pc.coords, &corrected, &kept)?;
                (kept, corrected, refine)
            }
        };
        let stage2 = if refine.boxes.is_empty() {
            None
        } else {
            let f2 = FeatureArray::concat_cols(&[&enc.point_features.gather_rows(&refine.rows), &refine.boundary])?;
            Some(self.sir2.forward(p, &f2, &refine.rel, &refine.index)?)
        };
        Ok((
            ScenePlan {
                grid,
                grouping,
                rows1,
                proposals,
                corrected,
                refine,
            },
            Activations {
                enc,
                votes,
                vote_cache,
                stage1,
                stage2,
                sub1_index,
            },
        ))
    }

    fn loss_and_grads(
        &self,
        p: &ParamStore,
        scene: &Scene,
        fixed: Option<&ScenePlan>,
        want_grads: bool,
    ) -> Result<(LossBreakdown, Option<Grads>, ScenePlan, ForwardStats)> {
        let pc = &scene.pc;
        let n = pc.len();
        let (plan, act) = self.forward(p, pc, fixed)?;

        let labels = scene.point_box_labels();
        let sem_targets: Vec<usize> = labels
            .iter()
            .map(|l| l.map_or(NUM_CLASSES, |j| scene.gt[j].class.index()))
            .collect();
        let mut vote_targets = FeatureArray::zeros(n, 3);
        let vote_mask: Vec<bool> = labels.iter().map(Option::is_some).collect();
        for (i, l) in labels.iter().enumerate() {
            if let Some(j) = l {
                let c = scene.gt[*j].bbox.center();
                let x = pc.coords[i];
                vote_targets
                    .row_mut(i)
                    .copy_from_slice(&[c[0] - x[0], c[1] - x[1], c[2] - x[2]]);
            }
        }

        let m1 = plan.grouping.num_groups();
        let gt1 = assign_group_targets(&plan.grouping.group_centers, &scene.gt, NUM_CLASSES)?;
        let (cls_logits, reg_pred) = match &act.stage1 {
            Some((c, r, _)) => (c.clone(), r.clone()),
            None => (empty_like(0, NUM_CLASSES + 1), empty_like(0, crate::geometry::CODE_LEN)),
        };
        let rt = assign_refine_targets(&plan.refine.boxes, &scene.gt, self.cfg.sir2.regression_iou)?;
        let m2 = plan.refine.boxes.len();
        let (res_pred, conf) = match &act.stage2 {
            Some((r, c, _)) => (r.clone(), c.clone()),
            None => (empty_like(0, crate::geometry::CODE_LEN), empty_like(0, 1)),
        };

        let inputs = LossInputs {
            sem_logits: &act.votes.fg_logits,
            sem_targets: &sem_targets,
            vote_offsets: &act.votes.offsets,
            vote_targets: &vote_targets,
            vote_mask: &vote_mask,
            cls_logits: &cls_logits,
            cls_targets: &gt1.cls,
            reg_pred: &reg_pred,
            reg_targets: &gt1.reg,
            reg_mask: &gt1.mask,
            res_pred: &res_pred,
            res_targets: &rt.res,
            res_mask: &rt.mask,
            iou_logits: conf.data(),
            iou_labels: &rt.q,
        };
        let (loss, lg) = total_loss(&inputs, &self.cfg.loss)?;
        let stats = ForwardStats {
            points: n,
            voxels: plan.grid.num_voxels(),
            grouped_points: plan.rows1.len(),
            groups: m1,
            positive_groups: gt1.mask.iter().filter(|&&b| b).count(),
            proposals: plan.proposals.len(),
            refined_groups: m2,
            refine_positives: rt.mask.iter().filter(|&&b| b).count(),
        };
        if !want_grads {
            return Ok((loss, None, plan, stats));
        }

        let mut g = p.zeros_like();
        let mut d_feat = self
            .votes
            .backward(p, &act.vote_cache, &lg.sem_logits, &lg.vote_offsets, &mut g);
        if let Some((_, _, cache)) = &act.stage1 {
            let d_sub = self
                .sir
                .backward(p, cache, &act.sub1_index, &lg.cls_logits, &lg.reg_pred, &mut g)?;
            d_feat.scatter_add_rows(&plan.rows1, &d_sub);
        }
        if let Some((_, _, cache)) = &act.stage2 {
            let d_conf = FeatureArray::from_vec(m2, 1, lg.iou_logits.clone())?;
            let d_sub = self
                .sir2
                .backward(p, cache, &plan.refine.index, &lg.res_pred, &d_conf, &mut g)?;
            d_feat.scatter_add_rows(&plan.refine.rows, &d_sub.slice_cols(0, self.encoder.out_channels));
        }
        self.encoder.backward(p, &act.enc.cache, &d_feat, &mut g)?;
        Ok((loss, Some(g), plan, stats))
    }

    /// Forward and backward on one scene with the current parameters.
    pub fn train_pass(&self, scene: &Scene) -> Result<TrainPass> {
        let (loss, grads, plan, stats) = self.loss_and_grads(&self.params, scene, None, true)?;
        Ok(TrainPass {
            loss,
            grads: grads.expect("gradients requested"),
            plan,
            stats,
        })
    }

    /// Loss under parameters `p` with all discrete decisions taken from
    /// `plan`.
    pub fn loss_with_plan(&self, p: &ParamStore, scene: &Scene, plan: &ScenePlan) -> Result<LossBreakdown> {
        Ok(self.loss_and_grads(p, scene, Some(plan), false)?.0)
    }

    /// Gradients under parameters `p` with all discrete decisions taken from
    /// `plan`.
    pub fn grads_with_plan(&self, p: &ParamStore, scene: &Scene, plan: &ScenePlan) -> Result<(LossBreakdown, Grads)> {
        let (loss, g, _, _) = self.loss_and_grads(p, scene, Some(plan), true)?;
        Ok((loss, g.expect("gradients requested")))
    }

    /// Detections after refinement and rotated-BEV suppression.
    pub fn infer(&self, pc: &PointCloud) -> Result<Vec<Detection>> {
        Ok(self.infer_detailed(pc)?.detections)
    }

    /// Detections together with the grouping, proposals and pass statistics.
    pub fn infer_detailed(&self, pc: &PointCloud) -> Result<Inference> {
        pc.validate()?;
        let (plan, act) = self.forward(&self.params, pc, None)?;
        let mut boxes = Vec::new();
        let mut scores = Vec::new();
        let mut classes = Vec::new();
        if let Some((res, conf, _)) = &act.stage2 {
            for (k, prop_id) in plan.corrected.proposal_ids.iter().enumerate() {
                let prop = &plan.proposals[*prop_id];
                let b = residual_decode(res.row(k), &prop.bbox);
                let s = sigmoid(conf.get(k, 0));
                if b.validate().is_err() || !s.is_finite() {
                    return Err(FsdError::NonFinite {
                        step: 0,
                        scene_id: String::new(),
                        detail: format!("refined box {k} is invalid"),
                    });
                }
                boxes.push(b);
                scores.push(s);
                classes.push(prop.class);
            }
        }
        let keep = nms_bev(&boxes, &scores, self.cfg.sir2.nms_iou);
        let dets = keep
            .into_iter()
            .map(|i| Detection {
                bbox: boxes[i],
                class: ObjectClass::from_index(classes[i]).expect("class index in range"),
                score: scores[i],
            })
            .collect();
        let stats = ForwardStats {
            points: pc.len(),
            voxels: plan.grid.num_voxels(),
            grouped_points: plan.rows1.len(),
            groups: plan.grouping.num_groups(),
            proposals: plan.proposals.len(),
            refined_groups: plan.refine.boxes.len(),
            ..ForwardStats::default()
        };
        Ok(Inference {
            detections: dets,
            plan,
            stats,
        })
    }
}
