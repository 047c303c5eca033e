//! Dense bird's-eye-view baseline: pillar pooling into a full grid, a stack
//! of 3×3 convolutions, and a per-cell center heatmap head.
//!
//! Every cell of the `(2 range / cell)²` grid is computed whether or not it
//! holds points, so cost grows with the square of the range. The stack only
//! reaches a few cells around each position, which limits what a center
//! cell can learn about long objects whose points lie far from it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data_synth::{ObjectClass, Scene, NUM_CLASSES};
use crate::error::{FsdError, Result};
use crate::geometry::{box_encode, nms_bev, normalize_yaw, Box3D, PointCloud, CODE_LEN};
use crate::losses::{box_l1_loss_grad, sigmoid};
use crate::model::Detection;
use crate::nn::{gelu, gelu_grad, Grads, LayerNorm, LayerNormCache, LinNormAct, LinNormActCache, ParamId, ParamStore};
use crate::segment_ops::{dynamic_pool_max, max_pool_backward, GroupIndex};
use crate::tensor::FeatureArray;
use crate::training::{LossTerms, Schedule, Trainable};

/// Raw per-point pillar inputs: offsets to the cell center (x, y), height,
/// intensity, and offsets to the pillar mean (x, y, z).
pub const PILLAR_DIMS: usize = 7;

/// Square BEV grid centered on the sensor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BevGrid {
    pub range_m: f64,
    pub cell: f64,
    pub side: usize,
}

impl BevGrid {
    pub fn new(range_m: f64, cell: f64) -> Result<Self> {
        if !(range_m > 0.0 && cell > 0.0) {
            return Err(FsdError::contract("grid range and cell size must be positive"));
        }
        Ok(Self {
            range_m,
            cell,
            side: (2.0 * range_m / cell).ceil() as usize,
        })
    }

    pub fn cells(&self) -> usize {
        self.side * self.side
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<usize> {
        let ix = ((x + self.range_m) / self.cell).floor();
        let iy = ((y + self.range_m) / self.cell).floor();
        let s = self.side as f64;
        (ix >= 0.0 && iy >= 0.0 && ix < s && iy < s).then(|| iy as usize * self.side + ix as usize)
    }

    pub fn cell_center(&self, cell: usize) -> [f64; 2] {
        let (iy, ix) = (cell / self.side, cell % self.side);
        [
            -self.range_m + (ix as f64 + 0.5) * self.cell,
            -self.range_m + (iy as f64 + 0.5) * self.cell,
        ]
    }
}

/// 3×3 convolution with zero padding over a row-major grid of cells.
#[derive(Clone, Debug)]
pub struct Conv3x3 {
    w: ParamId,
    b: ParamId,
    c_in: usize,
    c_out: usize,
}

impl Conv3x3 {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((9 * c_in) as f64).sqrt();
        let data = (0..9 * c_in * c_out).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            w: store.add(
                format!("{name}.weight"),
                FeatureArray::from_vec(9 * c_in, c_out, data).expect("shape"),
            ),
            b: store.add(format!("{name}.bias"), FeatureArray::zeros(1, c_out)),
            c_in,
            c_out,
        }
    }

    fn neighbors(side: usize, cell: usize) -> [Option<usize>; 9] {
        let (iy, ix) = ((cell / side) as isize, (cell % side) as isize);
        let mut out = [None; 9];
        for (k, slot) in out.iter_mut().enumerate() {
            let (ny, nx) = (iy + k as isize / 3 - 1, ix + k as isize % 3 - 1);
            if ny >= 0 && nx >= 0 && (ny as usize) < side && (nx as usize) < side {
                *slot = Some(ny as usize * side + nx as usize);
            }
        }
        out
    }

    pub fn forward(&self, p: &ParamStore, x: &FeatureArray, side: usize) -> Result<FeatureArray> {
        if x.c() != self.c_in || x.n() != side * side {
            return Err(FsdError::contract("conv input does not match grid or channels"));
        }
        let (w, b) = (p.get(self.w), p.get(self.b).row(0));
        let mut y = FeatureArray::zeros(x.n(), self.c_out);
        for cell in 0..x.n() {
            let out = y.row_mut(cell);
            out.copy_from_slice(b);
            for (k, nb) in Self::neighbors(side, cell).into_iter().enumerate() {
                let Some(nb) = nb else { continue };
                for (ci, &a) in x.row(nb).iter().enumerate() {
                    let wr = w.row(k * self.c_in + ci);
                    for (o, &wv) in out.iter_mut().zip(wr) {
                        *o += a * wv;
                    }
                }
            }
        }
        Ok(y)
    }

    pub fn backward(
        &self,
        p: &ParamStore,
        x: &FeatureArray,
        dy: &FeatureArray,
        side: usize,
        g: &mut Grads,
    ) -> FeatureArray {
        let w = p.get(self.w);
        let mut dx = FeatureArray::zeros(x.n(), self.c_in);
        {
            let db = g.get_mut(self.b).row_mut(0);
            for row in dy.rows() {
                for (d, &v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let dw = g.get_mut(self.w);
        for cell in 0..x.n() {
            let d = dy.row(cell);
            for (k, nb) in Self::neighbors(side, cell).into_iter().enumerate() {
                let Some(nb) = nb else { continue };
                for ci in 0..self.c_in {
                    let r = k * self.c_in + ci;
                    let a = x.get(nb, ci);
                    let mut acc = 0.0;
                    for ((gw, &wv), &dv) in dw.row_mut(r).iter_mut().zip(w.row(r)).zip(d) {
                        *gw += a * dv;
                        acc += wv * dv;
                    }
                    dx.row_mut(nb)[ci] += acc;
                }
            }
        }
        dx
    }
}

struct ConvBlockCache {
    input: FeatureArray,
    norm: LayerNormCache,
    pre_act: FeatureArray,
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv3x3,
    norm: LayerNorm,
}

impl ConvBlock {
    fn forward(&self, p: &ParamStore, x: FeatureArray, side: usize) -> Result<(FeatureArray, ConvBlockCache)> {
        let h = self.conv.forward(p, &x, side)?;
        let (pre_act, norm) = self.norm.forward(p, &h);
        let mut y = pre_act.clone();
        y.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        Ok((
            y,
            ConvBlockCache {
                input: x,
                norm,
                pre_act,
            },
        ))
    }

    fn forward_inference(&self, p: &ParamStore, x: &FeatureArray, side: usize) -> Result<FeatureArray> {
        let h = self.conv.forward(p, x, side)?;
        let (mut y, _) = self.norm.forward(p, &h);
        y.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        Ok(y)
    }

    fn backward(
        &self,
        p: &ParamStore,
        c: &ConvBlockCache,
        dy: &FeatureArray,
        side: usize,
        g: &mut Grads,
    ) -> FeatureArray {
        let mut d = dy.clone();
        for (dv, &z) in d.data_mut().iter_mut().zip(c.pre_act.data()) {
            *dv *= gelu_grad(z);
        }
        let dh = self.norm.backward(p, &c.norm, &d, g);
        self.conv.backward(p, &c.input, &dh, side, g)
    }
}

/// Pillar assignment of a point cloud to a grid.
#[derive(Clone, Debug)]
pub struct PillarPlan {
    pub grid: BevGrid,
    /// Point rows inside the grid.
    pub rows: Vec<usize>,
    /// Group index over `rows` with one group per occupied cell.
    pub index: GroupIndex,
    /// Grid cell of each group.
    pub cells: Vec<usize>,
    pub raw: FeatureArray,
}

pub fn pillarize(pc: &PointCloud, grid: BevGrid) -> Result<PillarPlan> {
    let mut rows = Vec::new();
    let mut ids = Vec::new();
    let mut cells = Vec::new();
    let mut group_of_cell = std::collections::HashMap::new();
    for (i, x) in pc.coords.iter().enumerate() {
        if let Some(cell) = grid.cell_of(x[0], x[1]) {
            let next = cells.len();
            let gid = *group_of_cell.entry(cell).or_insert_with(|| {
                cells.push(cell);
                next
            });
            rows.push(i);
            ids.push(gid as u32);
        }
    }
    let index = GroupIndex::new(ids, cells.len())?;
    let mut sums = vec![[0.0; 3]; cells.len()];
    for (r, &i) in rows.iter().enumerate() {
        let k = index.get(r).expect("assigned");
        for d in 0..3 {
            sums[k][d] += pc.coords[i][d];
        }
    }
    let mut raw = FeatureArray::zeros(rows.len(), PILLAR_DIMS);
    for (r, &i) in rows.iter().enumerate() {
        let k = index.get(r).expect("assigned");
        let cnt = index.group_len(k) as f64;
        let c = grid.cell_center(cells[k]);
        let x = pc.coords[i];
        raw.row_mut(r).copy_from_slice(&[
            (x[0] - c[0]) / grid.cell,
            (x[1] - c[1]) / grid.cell,
            x[2],
            pc.intensity_at(i),
            x[0] - sums[k][0] / cnt,
            x[1] - sums[k][1] / cnt,
            x[2] - sums[k][2] / cnt,
        ]);
    }
    Ok(PillarPlan {
        grid,
        rows,
        index,
        cells,
        raw,
    })
}

/// Head output channels: class heatmaps then the box code.
const HEAD_OUT: usize = NUM_CLASSES + CODE_LEN;

#[derive(Clone, Debug)]
pub struct DenseBaseline {
    pub cfg: RunConfig,
    pub params: ParamStore,
    pillar: LinNormAct,
    blocks: Vec<ConvBlock>,
    head_w: ParamId,
    head_b: ParamId,
}

struct DenseCache {
    pillar: LinNormActCache,
    argmax: Vec<usize>,
    blocks: Vec<ConvBlockCache>,
    last: FeatureArray,
}

impl DenseBaseline {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let d = &cfg.dense;
        if d.conv_layers == 0 {
            return Err(FsdError::Config("dense.conv_layers must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd3e5);
        let mut store = ParamStore::new();
        let pillar = LinNormAct::new(&mut store, "dense.pillar", PILLAR_DIMS, d.pillar_channels, &mut rng);
        let blocks = (0..d.conv_layers)
            .map(|l| {
                let c_in = if l == 0 { d.pillar_channels } else { d.channels };
                let name = format!("dense.conv{l}");
                ConvBlock {
                    conv: Conv3x3::new(&mut store, &name, c_in, d.channels, &mut rng),
                    norm: LayerNorm::new(&mut store, &format!("{name}.norm"), d.channels),
                }
            })
            .collect();
        let bound = 1.0 / (d.channels as f64).sqrt();
        let hw = (0..d.channels * HEAD_OUT)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let head_w = store.add("dense.head.weight", FeatureArray::from_vec(d.channels, HEAD_OUT, hw)?);
        // Start heatmaps at a low prior so early focal terms are stable.
        let mut hb = FeatureArray::zeros(1, HEAD_OUT);
        for k in 0..NUM_CLASSES {
            hb.set(0, k, -2.19);
        }
        let head_b = store.add("dense.head.bias", hb);
        Ok(Self {
            cfg: cfg.clone(),
            params: store,
            pillar,
            blocks,
            head_w,
            head_b,
        })
    }

    /// Bytes of feature maps held at once during inference, for the
    /// capacity check: two full maps plus the head output.
    pub fn inference_bytes(&self, grid: &BevGrid) -> f64 {
        let c = self.cfg.dense.channels.max(self.cfg.dense.pillar_channels);
        (grid.cells() * (2 * c + HEAD_OUT) * 8) as f64
    }

    fn check_capacity(&self, grid: &BevGrid, factor: f64) -> Result<()> {
        let need = self.inference_bytes(grid) * factor / (1024.0 * 1024.0);
        if need > self.cfg.dense.memory_cap_mb {
            return Err(FsdError::Capacity(format!(
                "{}×{} grid needs about {need:.0} MB, above the {} MB cap",
                grid.side, grid.side, self.cfg.dense.memory_cap_mb
            )));
        }
        Ok(())
    }

    fn scatter(&self, plan: &PillarPlan, pooled: &FeatureArray) -> FeatureArray {
        let mut map = FeatureArray::zeros(plan.grid.cells(), pooled.c());
        for (k, &cell) in plan.cells.iter().enumerate() {
            map.row_mut(cell).copy_from_slice(pooled.row(k));
        }
        map
    }

    fn head(&self, p: &ParamStore, x: &FeatureArray) -> FeatureArray {
        let mut y = x.matmul(p.get(self.head_w));
        let b = p.get(self.head_b).row(0).to_vec();
        for r in 0..y.n() {
            for (v, bv) in y.row_mut(r).iter_mut().zip(&b) {
                *v += bv;
            }
        }
        y
    }

    fn forward_train(&self, p: &ParamStore, plan: &PillarPlan) -> Result<(FeatureArray, DenseCache)> {
        let side = plan.grid.side;
        let (h, pillar) = self.pillar.forward(p, plan.raw.clone())?;
        let (pooled, argmax) = dynamic_pool_max(&h, &plan.index)?;
        let mut x = self.scatter(plan, &pooled);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(p, x, side)?;
            blocks.push(c);
            x = y;
        }
        let out = self.head(p, &x);
        Ok((
            out,
            DenseCache {
                pillar,
                argmax,
                blocks,
                last: x,
            },
        ))
    }

    /// Per-cell head outputs without keeping intermediate maps.
    pub fn forward_maps(&self, pc: &PointCloud, range_m: f64) -> Result<(BevGrid, FeatureArray)> {
        let grid = BevGrid::new(range_m, self.cfg.dense.cell_size)?;
        self.check_capacity(&grid, 1.0)?;
        let plan = pillarize(pc, grid)?;
        let p = &self.params;
        let (h, _) = self.pillar.forward(p, plan.raw.clone())?;
        let (pooled, _) = dynamic_pool_max(&h, &plan.index)?;
        let mut x = self.scatter(&plan, &pooled);
        for b in &self.blocks {
            x = b.forward_inference(p, &x, grid.side)?;
        }
        Ok((grid, self.head(p, &x)))
    }

    /// Heatmap peaks decoded into boxes, then rotated-BEV suppression.
    pub fn infer(&self, pc: &PointCloud, range_m: f64) -> Result<Vec<Detection>> {
        pc.validate()?;
        let (grid, out) = self.forward_maps(pc, range_m)?;
        let side = grid.side;
        let thr = self.cfg.dense.heatmap_threshold;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for cell in 0..grid.cells() {
            for k in 0..NUM_CLASSES {
                let z = out.get(cell, k);
                if sigmoid(z) < thr {
                    continue;
                }
                let is_peak = Conv3x3::neighbors(side, cell)
                    .into_iter()
                    .flatten()
                    .all(|nb| nb == cell || out.get(nb, k) < z || (out.get(nb, k) == z && nb > cell));
                if is_peak {
                    cands.push((sigmoid(z), cell, k));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(self.cfg.dense.max_detections);
        let mut boxes = Vec::with_capacity(cands.len());
        for &(_, cell, _) in &cands {
            boxes.push(decode_cell(&grid, cell, &out.row(cell)[NUM_CLASSES..]));
        }
        let scores: Vec<f64> = cands.iter().map(|c| c.0).collect();
        let keep = nms_bev(&boxes, &scores, self.cfg.dense.nms_iou);
        Ok(keep
            .into_iter()
            .map(|i| Detection {
                bbox: boxes[i],
                class: ObjectClass::from_index(cands[i].2).expect("class in range"),
                score: scores[i],
            })
            .collect())
    }

    /// Loss on one scene and, when asked, parameter gradients.
    pub fn loss(&self, p: &ParamStore, scene: &Scene, want_grads: bool) -> Result<(LossTerms, Option<Grads>)> {
        let grid = BevGrid::new(scene.range_m, self.cfg.dense.cell_size)?;
        self.check_capacity(&grid, 2.0 * self.blocks.len() as f64)?;
        let plan = pillarize(&scene.pc, grid)?;
        let (out, cache) = self.forward_train(p, &plan)?;
        let t = dense_targets(&grid, &scene.gt)?;
        let n_obj = t.centers.len().max(1) as f64;

        let mut d_out = FeatureArray::zeros(out.n(), HEAD_OUT);
        let mut heat = 0.0;
        for cell in 0..out.n() {
            for k in 0..NUM_CLASSES {
                let (l, d) = center_focal(out.get(cell, k), t.heatmap.get(cell, k));
                heat += l;
                d_out.set(cell, k, d / n_obj);
            }
        }
        heat /= n_obj;

        let mut reg_pred = FeatureArray::zeros(t.centers.len(), CODE_LEN);
        for (r, &(cell, _)) in t.centers.iter().enumerate() {
            reg_pred.row_mut(r).copy_from_slice(&out.row(cell)[NUM_CLASSES..]);
        }
        let mask = vec![true; t.centers.len()];
        let (reg, d_reg) = box_l1_loss_grad(&reg_pred, &t.codes, &mask)?;
        for (r, &(cell, _)) in t.centers.iter().enumerate() {
            for j in 0..CODE_LEN {
                let v = d_out.get(cell, NUM_CLASSES + j) + d_reg.get(r, j);
                d_out.set(cell, NUM_CLASSES + j, v);
            }
        }
        let terms = LossTerms {
            total: heat + reg,
            terms: vec![("l_heatmap", heat), ("l_box", reg)],
        };
        if !want_grads {
            return Ok((terms, None));
        }

        let mut g = p.zeros_like();
        // Head.
        cache.last.matmul_tn_acc(&d_out, g.get_mut(self.head_w));
        {
            let db = g.get_mut(self.head_b).row_mut(0);
            for row in d_out.rows() {
                for (d, &v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        let mut dx = d_out.matmul_nt(p.get(self.head_w));
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            dx = b.backward(p, c, &dx, grid.side, &mut g);
        }
        if !plan.cells.is_empty() {
            let d_pooled = dx.gather_rows(&plan.cells);
            let dh = max_pool_backward(&cache.argmax, plan.rows.len(), &d_pooled);
            self.pillar.backward(p, &cache.pillar, &dh, &mut g);
        }
        Ok((terms, Some(g)))
    }
}

fn decode_cell(grid: &BevGrid, cell: usize, code: &[f64]) -> Box3D {
    let c = grid.cell_center(cell);
    Box3D {
        cx: c[0] + code[0],
        cy: c[1] + code[1],
        cz: code[2],
        l: code[3].clamp(-20.0, 20.0).exp(),
        w: code[4].clamp(-20.0, 20.0).exp(),
        h: code[5].clamp(-20.0, 20.0).exp(),
        yaw: normalize_yaw(code[6].atan2(code[7])),
    }
}

/// Heatmap targets and the center cell with its box code for each object
/// inside the grid.
pub struct DenseTargets {
    pub heatmap: FeatureArray,
    pub centers: Vec<(usize, usize)>,
    pub codes: FeatureArray,
}

pub fn dense_targets(grid: &BevGrid, gt: &[crate::data_synth::GtObject]) -> Result<DenseTargets> {
    let mut heatmap = FeatureArray::zeros(grid.cells(), NUM_CLASSES);
    let mut centers = Vec::new();
    let mut codes = Vec::new();
    for o in gt {
        let Some(cell) = grid.cell_of(o.bbox.cx, o.bbox.cy) else {
            continue;
        };
        let k = o.class.index();
        let sigma = (0.25 * o.bbox.l.min(o.bbox.w) / grid.cell).max(0.8);
        let reach = (3.0 * sigma).ceil() as isize;
        let (cy, cx) = ((cell / grid.side) as isize, (cell % grid.side) as isize);
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (y, x) = (cy + dy, cx + dx);
                if y < 0 || x < 0 || y as usize >= grid.side || x as usize >= grid.side {
                    continue;
                }
                let v = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                let c = y as usize * grid.side + x as usize;
                if v > heatmap.get(c, k) {
                    heatmap.set(c, k, v);
                }
            }
        }
        let cc = grid.cell_center(cell);
        codes.push(box_encode(&o.bbox, [cc[0], cc[1], 0.0])?);
        centers.push((cell, k));
    }
    let codes = if codes.is_empty() {
        FeatureArray::zeros(0, CODE_LEN)
    } else {
        FeatureArray::from_rows(&codes)?
    };
    Ok(DenseTargets {
        heatmap,
        centers,
        codes,
    })
}

/// Penalty-reduced focal loss on one heatmap logit and its gradient. The
/// peak cell has target 1; other cells are down-weighted by `(1 - y)^4`.
pub fn center_focal(z: f64, y: f64) -> (f64, f64) {
    let softplus = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
    let p = sigmoid(z);
    let (log_p, log_1mp) = (-softplus(-z), -softplus(z));
    if y >= 1.0 {
        // l = -(1-p)^2 log p ; dl/dz = (1-p)^2 [2 p log p - (1 - p)]
        let q = 1.0 - p;
        (-q * q * log_p, q * q * (2.0 * p * log_p - q))
    } else {
        // l = -(1-y)^4 p^2 log(1-p) ; dl/dz = (1-y)^4 p^2 [p - 2 (1-p) log(1-p)]
        let wgt = (1.0 - y).powi(4);
        (-wgt * p * p * log_1mp, wgt * p * p * (p - 2.0 * (1.0 - p) * log_1mp))
    }
}

impl Trainable for DenseBaseline {
    const KIND: &'static str = "dense";

    fn build(cfg: &RunConfig) -> Result<Self> {
        DenseBaseline::new(cfg)
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
        Schedule {
            steps: self.cfg.dense.steps,
            lr: self.cfg.dense.lr,
            ..Schedule::from_train(&self.cfg.train)
        }
    }

    fn scene_pass(&self, scene: &Scene) -> Result<(LossTerms, Grads)> {
        let (t, g) = self.loss(&self.params, scene, true)?;
        Ok((t, g.expect("gradients requested")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_synth::{generate, GtObject};
    use crate::testutil::{check_input_grad, check_param_grads, random_array};

    fn small_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.dense.pillar_channels = 3;
        cfg.dense.channels = 4;
        cfg.dense.conv_layers = 2;
        cfg.dense.cell_size = 2.0;
        cfg
    }

    #[test]
    fn grid_sizes() {
        assert_eq!(BevGrid::new(50.0, 0.5).unwrap().side, 200);
        let (a, b) = (BevGrid::new(50.0, 0.5).unwrap(), BevGrid::new(100.0, 0.5).unwrap());
        assert_eq!(b.cells(), 4 * a.cells());
        let g = BevGrid::new(1.0, 0.5).unwrap();
        assert_eq!(g.cell_of(-1.0, -1.0), Some(0));
        assert_eq!(g.cell_of(0.9, -0.9), Some(3));
        assert_eq!(g.cell_of(1.0, 0.0), None);
        assert_eq!(g.cell_center(5), [-0.25, -0.25]);
    }

    #[test]
    fn map_has_one_row_per_cell_regardless_of_points() {
        let m = DenseBaseline::new(&small_cfg()).unwrap();
        let (g, out) = m.forward_maps(&PointCloud::new(vec![[0.0, 0.0, 1.0]]), 20.0).unwrap();
        assert_eq!(out.n(), g.cells());
        assert_eq!(out.c(), HEAD_OUT);
    }

    #[test]
    fn capacity_error_above_cap() {
        let mut cfg = small_cfg();
        cfg.dense.memory_cap_mb = 0.01;
        let m = DenseBaseline::new(&cfg).unwrap();
        let err = m.forward_maps(&PointCloud::new(vec![]), 200.0);
        assert!(matches!(err, Err(FsdError::Capacity(_))));
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let conv = Conv3x3::new(&mut store, "c", 2, 3, &mut rng);
        store.get_mut(conv.b).data_mut().copy_from_slice(&[0.1, 0.2, 0.3]);
        let side = 4;
        let x = random_array(&mut rng, side * side, 2);
        let y = conv.forward(&store, &x, side).unwrap();
        let w = store.get(conv.w);
        for cy in 0..side as isize {
            for cx in 0..side as isize {
                for co in 0..3 {
                    let mut s = [0.1, 0.2, 0.3][co];
                    for ky in -1..=1isize {
                        for kx in -1..=1isize {
                            let (ny, nx) = (cy + ky, cx + kx);
                            if ny < 0 || nx < 0 || ny >= side as isize || nx >= side as isize {
                                continue;
                            }
                            let k = ((ky + 1) * 3 + kx + 1) as usize;
                            for ci in 0..2 {
                                s += x.get((ny * side as isize + nx) as usize, ci) * w.get(k * 2 + ci, co);
                            }
                        }
                    }
                    assert!((y.get((cy * side as isize + cx) as usize, co) - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let conv = Conv3x3::new(&mut store, "c", 2, 3, &mut rng);
        let side = 5;
        let x = random_array(&mut rng, side * side, 2);
        let wy = random_array(&mut rng, side * side, 3);
        let mut g = store.zeros_like();
        let dx = conv.backward(&store, &x, &wy, side, &mut g);
        check_param_grads(&store, &g, |p| conv.forward(p, &x, side).unwrap().dot(&wy), 1e-6);
        check_input_grad(&x, &dx, |xx| conv.forward(&store, xx, side).unwrap().dot(&wy), 1e-6);
    }

    #[test]
    fn center_focal_gradient() {
        for &(z, y) in &[(0.3, 1.0), (-2.0, 1.0), (1.5, 0.4), (-0.7, 0.0), (4.0, 0.9)] {
            let h = 1e-6;
            let fd = (center_focal(z + h, y).0 - center_focal(z - h, y).0) / (2.0 * h);
            assert!((fd - center_focal(z, y).1).abs() < 1e-7, "z={z} y={y}");
        }
        assert!(center_focal(30.0, 1.0).0 < 1e-12);
        assert!(center_focal(-30.0, 0.0).0 < 1e-12);
    }

    #[test]
    fn targets_peak_at_center() {
        let g = BevGrid::new(10.0, 0.5).unwrap();
        let o = GtObject {
            bbox: Box3D::new([1.1, -2.3, 0.8], [4.0, 2.0, 1.6], 0.4).unwrap(),
            class: ObjectClass::Vehicle,
        };
        let t = dense_targets(&g, &[o]).unwrap();
        let (cell, k) = t.centers[0];
        assert_eq!(t.heatmap.get(cell, k), 1.0);
        let dec = decode_cell(&g, cell, t.codes.row(0));
        assert!((dec.cx - 1.1).abs() < 1e-12 && (dec.cy + 2.3).abs() < 1e-12 && (dec.yaw - 0.4).abs() < 1e-12);
    }

    #[test]
    fn full_gradients_match_finite_differences() {
        let mut cfg = small_cfg();
        cfg.data.point_budget = 150;
        cfg.data.min_points_per_object = 8;
        let scene = generate(&cfg.data, 10.0, 5, "s").unwrap();
        let m = DenseBaseline::new(&cfg).unwrap();
        let (_, g) = m.loss(&m.params, &scene, true).unwrap();
        let g = g.unwrap();
        let checks =
            crate::gradcheck::check_params(&m.params, &g, |p| m.loss(p, &scene, false).unwrap().0.total, 1e-6, 24);
        for c in &checks {
            assert!(c.passes(1e-4), "{c:?}");
        }
    }
}
