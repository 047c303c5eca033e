//! Instance-level point feature extraction over groups, per-group box
//! prediction, group correction and second-stage refinement.

use rand::Rng;

use crate::data_synth::GtObject;
use crate::error::{FsdError, Result};
use crate::geometry::{
    boundary_offsets, box_decode, box_encode, iou_3d, point_in_box, residual_encode, Box3D, CODE_LEN,
};
use crate::losses::soft_label;
use crate::nn::{Grads, LinNormAct, LinNormActCache, Mlp, MlpCache, ParamStore};
use crate::segment_ops::{broadcast_backward, dynamic_broadcast, dynamic_pool_max, max_pool_backward, GroupIndex};
use crate::tensor::FeatureArray;

/// Number of boundary-offset channels appended to refinement inputs.
pub const BOUNDARY_DIMS: usize = 6;

/// Point coordinates relative to their group's center. Unassigned rows are
/// left at zero.
pub fn relative_coords(coords: &[[f64; 3]], centers: &[[f64; 3]], idx: &GroupIndex) -> Result<FeatureArray> {
    if coords.len() != idx.n() || centers.len() != idx.m() {
        return Err(FsdError::contract("relative_coords: shapes disagree with group index"));
    }
    let mut rel = FeatureArray::zeros(coords.len(), 3);
    for (i, x) in coords.iter().enumerate() {
        if let Some(k) = idx.get(i) {
            let c = centers[k];
            rel.row_mut(i).copy_from_slice(&[x[0] - c[0], x[1] - c[1], x[2] - c[2]]);
        }
    }
    Ok(rel)
}

/// One two-step layer: a per-point transform of features and relative
/// coordinates, then a per-point transform of those features concatenated
/// with their group's max-pooled summary.
#[derive(Clone, Debug)]
pub struct SirLayer {
    point: LinNormAct,
    group: LinNormAct,
    c_in: usize,
    c_out: usize,
}

pub struct SirLayerCache {
    point: LinNormActCache,
    group: LinNormActCache,
    argmax: Vec<usize>,
}

impl SirLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self {
            point: LinNormAct::new(store, &format!("{name}.point"), c_in + 3, c_out, rng),
            group: LinNormAct::new(store, &format!("{name}.group"), 2 * c_out, c_out, rng),
            c_in,
            c_out,
        }
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    /// `rel` holds each point's coordinates minus its group center.
    pub fn forward(
        &self,
        p: &ParamStore,
        f: &FeatureArray,
        rel: &FeatureArray,
        idx: &GroupIndex,
    ) -> Result<(FeatureArray, SirLayerCache)> {
        if f.c() != self.c_in {
            return Err(FsdError::contract(format!(
                "SIR layer expects {} input channels, got {}",
                self.c_in,
                f.c()
            )));
        }
        if rel.c() != 3 || rel.n() != f.n() || idx.n() != f.n() {
            return Err(FsdError::contract("SIR layer: row counts or coordinate width disagree"));
        }
        let (fp, point) = self.point.forward(p, FeatureArray::concat_cols(&[f, rel])?)?;
        let (g, argmax) = dynamic_pool_max(&fp, idx)?;
        let gb = dynamic_broadcast(&g, idx)?;
        let (out, group) = self.group.forward(p, FeatureArray::concat_cols(&[&fp, &gb])?)?;
        Ok((out, SirLayerCache { point, group, argmax }))
    }

    /// Gradient with respect to the input features; `rel` is treated as a
    /// constant.
    pub fn backward(
        &self,
        p: &ParamStore,
        cache: &SirLayerCache,
        idx: &GroupIndex,
        dy: &FeatureArray,
        g: &mut Grads,
    ) -> Result<FeatureArray> {
        let dx2 = self.group.backward(p, &cache.group, dy, g);
        let mut d_fp = dx2.slice_cols(0, self.c_out);
        let d_g = broadcast_backward(&dx2.slice_cols(self.c_out, self.c_out), idx)?;
        d_fp.add_assign(&max_pool_backward(&cache.argmax, dy.n(), &d_g));
        let dx1 = self.point.backward(p, &cache.point, &d_fp, g);
        Ok(dx1.slice_cols(0, self.c_in))
    }
}

/// A stack of layers whose max-pooled outputs are concatenated into one
/// feature vector per group.
#[derive(Clone, Debug)]
pub struct SirStack {
    layers: Vec<SirLayer>,
}

pub struct SirStackCache {
    layers: Vec<SirLayerCache>,
    out_argmax: Vec<Vec<usize>>,
    n: usize,
}

impl SirStack {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        channels: usize,
        layers: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..layers)
            .map(|l| {
                let c = if l == 0 { c_in } else { channels };
                SirLayer::new(store, &format!("{name}.layer{l}"), c, channels, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn out_channels(&self) -> usize {
        self.layers.iter().map(SirLayer::c_out).sum()
    }

    pub fn forward(
        &self,
        p: &ParamStore,
        f: &FeatureArray,
        rel: &FeatureArray,
        idx: &GroupIndex,
    ) -> Result<(FeatureArray, SirStackCache)> {
        let mut x = f.clone();
        let mut pooled = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut out_argmax = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, cache) = layer.forward(p, &x, rel, idx)?;
            let (g, am) = dynamic_pool_max(&y, idx)?;
            pooled.push(g);
            out_argmax.push(am);
            caches.push(cache);
            x = y;
        }
        let refs: Vec<&FeatureArray> = pooled.iter().collect();
        let group_features = if refs.is_empty() {
            FeatureArray::zeros(idx.m(), 0)
        } else {
            FeatureArray::concat_cols(&refs)?
        };
        Ok((
            group_features,
            SirStackCache {
                layers: caches,
                out_argmax,
                n: f.n(),
            },
        ))
    }

    pub fn backward(
        &self,
        p: &ParamStore,
        cache: &SirStackCache,
        idx: &GroupIndex,
        d_group: &FeatureArray,
        g: &mut Grads,
    ) -> Result<FeatureArray> {
        let offsets: Vec<usize> = self
            .layers
            .iter()
            .scan(0, |acc, l| {
                let o = *acc;
                *acc += l.c_out();
                Some(o)
            })
            .collect();
        let mut d_next: Option<FeatureArray> = None;
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let slice = d_group.slice_cols(offsets[l], layer.c_out());
            let mut dy = max_pool_backward(&cache.out_argmax[l], cache.n, &slice);
            if let Some(d) = &d_next {
                dy.add_assign(d);
            }
            d_next = Some(layer.backward(p, &cache.layers[l], idx, &dy, g)?);
        }
        Ok(d_next.unwrap_or_else(|| FeatureArray::zeros(cache.n, 0)))
    }
}

/// A layer stack followed by two MLP heads on the pooled group features.
#[derive(Clone, Debug)]
pub struct SirModule {
    stack: SirStack,
    head_a: Mlp,
    head_b: Mlp,
}

pub struct SirModuleCache {
    stack: SirStackCache,
    head_a: MlpCache,
    head_b: MlpCache,
}

impl SirModule {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        channels: usize,
        layers: usize,
        head_hidden: usize,
        outs: (usize, usize),
        rng: &mut R,
    ) -> Self {
        let stack = SirStack::new(store, name, c_in, channels, layers, rng);
        let c = stack.out_channels();
        Self {
            head_a: Mlp::new(store, &format!("{name}.head_a"), &[c, head_hidden, outs.0], rng),
            head_b: Mlp::new(store, &format!("{name}.head_b"), &[c, head_hidden, outs.1], rng),
            stack,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.stack.num_layers()
    }

    pub fn forward(
        &self,
        p: &ParamStore,
        f: &FeatureArray,
        rel: &FeatureArray,
        idx: &GroupIndex,
    ) -> Result<(FeatureArray, FeatureArray, SirModuleCache)> {
        let (gf, stack) = self.stack.forward(p, f, rel, idx)?;
        let (a, head_a) = self.head_a.forward(p, gf.clone())?;
        let (b, head_b) = self.head_b.forward(p, gf)?;
        Ok((a, b, SirModuleCache { stack, head_a, head_b }))
    }

    pub fn backward(
        &self,
        p: &ParamStore,
        cache: &SirModuleCache,
        idx: &GroupIndex,
        d_a: &FeatureArray,
        d_b: &FeatureArray,
        g: &mut Grads,
    ) -> Result<FeatureArray> {
        let mut d_gf = self.head_a.backward(p, &cache.head_a, d_a, g);
        d_gf.add_assign(&self.head_b.backward(p, &cache.head_b, d_b, g));
        self.stack.backward(p, &cache.stack, idx, &d_gf, g)
    }
}

/// One box per first-stage group.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: Box3D,
    pub class_logits: Vec<f64>,
    pub class: usize,
    pub group_id: usize,
    /// Softmax probability of `class`.
    pub score: f64,
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Decodes head outputs into one proposal per group. Class logits carry a
/// trailing background entry that is never chosen.
pub fn decode_proposals(cls_logits: &FeatureArray, reg: &FeatureArray, centers: &[[f64; 3]]) -> Result<Vec<Proposal>> {
    if cls_logits.n() != centers.len() || reg.n() != centers.len() || reg.c() != CODE_LEN || cls_logits.c() < 2 {
        return Err(FsdError::contract("decode_proposals: head shapes disagree"));
    }
    let k = cls_logits.c() - 1;
    Ok((0..centers.len())
        .map(|gid| {
            let probs = softmax(cls_logits.row(gid));
            let mut class = 0;
            for c in 1..k {
                if probs[c] > probs[class] {
                    class = c;
                }
            }
            Proposal {
                bbox: box_decode(reg.row(gid), centers[gid]),
                class_logits: cls_logits.row(gid).to_vec(),
                class,
                group_id: gid,
                score: probs[class],
            }
        })
        .collect())
}

/// Classification and regression targets for first-stage groups.
#[derive(Clone, Debug)]
pub struct GroupTargets {
    /// Class index, or `num_classes` for background.
    pub cls: Vec<usize>,
    pub reg: FeatureArray,
    pub mask: Vec<bool>,
    pub matched: Vec<Option<usize>>,
}

/// A group is positive when its center lies inside a ground-truth box; the
/// first such box in order is its target.
pub fn assign_group_targets(centers: &[[f64; 3]], gt: &[GtObject], num_classes: usize) -> Result<GroupTargets> {
    let m = centers.len();
    let mut t = GroupTargets {
        cls: vec![num_classes; m],
        reg: FeatureArray::zeros(m, CODE_LEN),
        mask: vec![false; m],
        matched: vec![None; m],
    };
    for (k, &c) in centers.iter().enumerate() {
        if let Some(j) = gt.iter().position(|o| point_in_box(c, &o.bbox)) {
            t.cls[k] = gt[j].class.index();
            t.reg.row_mut(k).copy_from_slice(&box_encode(&gt[j].bbox, c)?);
            t.mask[k] = true;
            t.matched[k] = Some(j);
        }
    }
    Ok(t)
}

/// Proposals kept for refinement: score at least `min_score`, best
/// `max_count` by score, ordered by descending score then group id.
pub fn select_proposals(proposals: &[Proposal], min_score: f64, max_count: usize) -> Vec<Proposal> {
    let mut keep: Vec<&Proposal> = proposals.iter().filter(|p| p.score >= min_score).collect();
    keep.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.group_id.cmp(&b.group_id)));
    keep.truncate(max_count);
    keep.into_iter().cloned().collect()
}

/// Points regrouped by proposal membership.
#[derive(Clone, Debug)]
pub struct CorrectedGrouping {
    pub index: GroupIndex,
    /// For each corrected group, its position in the proposal list.
    pub proposal_ids: Vec<usize>,
}

/// Each point inside at least one (optionally enlarged) proposal joins the
/// highest-score containing proposal, ties going to the lower group id.
/// Proposals that capture no point are dropped; ids follow proposal order.
pub fn group_correct(proposals: &[Proposal], coords: &[[f64; 3]], margin: f64) -> Result<CorrectedGrouping> {
    let boxes: Vec<Box3D> = proposals.iter().map(|p| p.bbox.enlarged(margin)).collect();
    let bounds: Vec<[f64; 4]> = boxes.iter().map(Box3D::bev_bounds).collect();
    let mut owner: Vec<Option<usize>> = vec![None; coords.len()];
    for (i, &x) in coords.iter().enumerate() {
        for (j, b) in boxes.iter().enumerate() {
            let bb = bounds[j];
            if x[0] < bb[0] - 1e-6 || x[0] > bb[2] + 1e-6 || x[1] < bb[1] - 1e-6 || x[1] > bb[3] + 1e-6 {
                continue;
            }
            if !point_in_box(x, b) {
                continue;
            }
            let better = match owner[i] {
                None => true,
                Some(o) => {
                    let (pj, po) = (&proposals[j], &proposals[o]);
                    pj.score > po.score || (pj.score == po.score && pj.group_id < po.group_id)
                }
            };
            if better {
                owner[i] = Some(j);
            }
        }
    }
    let mut used = vec![false; proposals.len()];
    owner.iter().flatten().for_each(|&j| used[j] = true);
    let proposal_ids: Vec<usize> = (0..proposals.len()).filter(|&j| used[j]).collect();
    let mut remap = vec![usize::MAX; proposals.len()];
    for (k, &j) in proposal_ids.iter().enumerate() {
        remap[j] = k;
    }
    let ids: Vec<Option<usize>> = owner.iter().map(|o| o.map(|j| remap[j])).collect();
    Ok(CorrectedGrouping {
        index: GroupIndex::from_options(&ids, proposal_ids.len())?,
        proposal_ids,
    })
}

/// Compacted inputs of the refinement stage.
#[derive(Clone, Debug)]
pub struct RefineInputs {
    /// Original point index of each row.
    pub rows: Vec<usize>,
    pub index: GroupIndex,
    /// Offsets to the six faces of the row's proposal.
    pub boundary: FeatureArray,
    /// Coordinates relative to the proposal center.
    pub rel: FeatureArray,
    pub boxes: Vec<Box3D>,
}

pub fn refine_inputs(
    coords: &[[f64; 3]],
    corrected: &CorrectedGrouping,
    proposals: &[Proposal],
) -> Result<RefineInputs> {
    let rows = corrected.index.assigned_rows();
    let index = corrected.index.select_rows(&rows);
    let boxes: Vec<Box3D> = corrected.proposal_ids.iter().map(|&j| proposals[j].bbox).collect();
    let mut boundary = FeatureArray::zeros(rows.len(), BOUNDARY_DIMS);
    let sub: Vec<[f64; 3]> = rows.iter().map(|&i| coords[i]).collect();
    for (r, &x) in sub.iter().enumerate() {
        let b = &boxes[index.get(r).expect("compacted rows are assigned")];
        boundary.row_mut(r).copy_from_slice(&boundary_offsets(x, b));
    }
    let centers: Vec<[f64; 3]> = boxes.iter().map(Box3D::center).collect();
    let rel = relative_coords(&sub, &centers, &index)?;
    Ok(RefineInputs {
        rows,
        index,
        boundary,
        rel,
        boxes,
    })
}

/// Residual and confidence targets for refined groups.
#[derive(Clone, Debug)]
pub struct RefineTargets {
    pub res: FeatureArray,
    pub mask: Vec<bool>,
    pub q: Vec<f64>,
    pub best_iou: Vec<f64>,
}

/// Matches each proposal with its highest-IoU ground truth. Residuals are
/// supervised when that IoU exceeds `regression_iou`.
pub fn assign_refine_targets(boxes: &[Box3D], gt: &[GtObject], regression_iou: f64) -> Result<RefineTargets> {
    let m = boxes.len();
    let mut t = RefineTargets {
        res: FeatureArray::zeros(m, CODE_LEN),
        mask: vec![false; m],
        q: vec![0.0; m],
        best_iou: vec![0.0; m],
    };
    for (k, b) in boxes.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, o) in gt.iter().enumerate() {
            let iou = iou_3d(b, &o.bbox);
            if iou > 0.0 && best.is_none_or(|(_, v)| iou > v) {
                best = Some((j, iou));
            }
        }
        if let Some((j, iou)) = best {
            t.best_iou[k] = iou;
            t.q[k] = soft_label(iou);
            if iou > regression_iou {
                t.res.row_mut(k).copy_from_slice(&residual_encode(&gt[j].bbox, b)?);
                t.mask[k] = true;
            }
        }
    }
    Ok(t)
}
