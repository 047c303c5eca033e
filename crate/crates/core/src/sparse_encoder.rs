//! Dynamic voxelization and a small sparse voxel feature extractor.
//!
//! Only occupied voxels exist. Every point maps to exactly one voxel and no
//! point is dropped or padded. Features are built in three steps:
//!
//! 1. two VFE blocks inside each voxel (per-point layer, max-pool, concat),
//! 2. `neighbor_rounds` rounds of mixing with the mean of the occupied voxels
//!    in the 3×3×3 key neighborhood,
//! 3. per point, the voxel feature concatenated with the point's offset to
//!    its voxel center, through one more layer.

use std::collections::HashMap;

use rand::Rng;

use crate::config::EncoderConfig;
use crate::error::{FsdError, Result};
use crate::geometry::PointCloud;
use crate::nn::{Grads, LinNormAct, LinNormActCache, ParamStore};
use crate::segment_ops::{
    broadcast_backward, dynamic_broadcast, dynamic_pool, dynamic_pool_max, max_pool_backward, GroupIndex, Reduce,
};
use crate::tensor::FeatureArray;

/// Raw per-point inputs: offset to voxel center (3), offset to the voxel's
/// point mean (3), intensity (1). Offsets are in voxel units.
pub const RAW_POINT_DIMS: usize = 7;

/// Optional extra inputs: horizontal unit direction from the sensor (2) and
/// height (1). They tell a lone wall segment which side faces the sensor,
/// at the cost of translation covariance.
pub const SENSOR_DIMS: usize = 3;

pub type VoxelKey = [i32; 3];

#[derive(Clone, Debug)]
pub struct SparseVoxelGrid {
    pub voxel_keys: Vec<VoxelKey>,
    pub point_to_voxel: GroupIndex,
    pub voxel_features: FeatureArray,
    pub voxel_size: [f64; 3],
    pub origin: [f64; 3],
}

impl SparseVoxelGrid {
    pub fn num_voxels(&self) -> usize {
        self.voxel_keys.len()
    }

    pub fn voxel_center(&self, v: usize) -> [f64; 3] {
        let k = self.voxel_keys[v];
        [0, 1, 2].map(|d| self.origin[d] + (k[d] as f64 + 0.5) * self.voxel_size[d])
    }

    /// Occupied voxels in each voxel's 3×3×3 neighborhood (itself included),
    /// as CSR offsets and ascending voxel ids.
    pub fn neighbor_lists(&self) -> (Vec<usize>, Vec<usize>) {
        let lookup: HashMap<VoxelKey, usize> = self.voxel_keys.iter().enumerate().map(|(i, &k)| (k, i)).collect();
        let mut offsets = Vec::with_capacity(self.voxel_keys.len() + 1);
        let mut ids = Vec::with_capacity(self.voxel_keys.len() * 4);
        offsets.push(0);
        for k in &self.voxel_keys {
            let start = ids.len();
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        if let Some(&j) = lookup.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                            ids.push(j);
                        }
                    }
                }
            }
            ids[start..].sort_unstable();
            offsets.push(ids.len());
        }
        (offsets, ids)
    }
}

/// Bins points into occupied voxels with floor semantics. Voxel ids follow
/// the order in which points first touch them.
pub fn voxelize(pc: &PointCloud, voxel_size: [f64; 3], origin: [f64; 3]) -> Result<SparseVoxelGrid> {
    if voxel_size.iter().any(|&v| !(v > 0.0)) {
        return Err(FsdError::contract(format!(
            "voxel size must be positive, got {voxel_size:?}"
        )));
    }
    let mut lookup: HashMap<VoxelKey, u32> = HashMap::with_capacity(pc.len());
    let mut keys = Vec::new();
    let mut ids = Vec::with_capacity(pc.len());
    for p in &pc.coords {
        let key = [0, 1, 2].map(|d| ((p[d] - origin[d]) / voxel_size[d]).floor() as i32);
        let id = *lookup.entry(key).or_insert_with(|| {
            keys.push(key);
            (keys.len() - 1) as u32
        });
        ids.push(id);
    }
    let m = keys.len();
    Ok(SparseVoxelGrid {
        voxel_keys: keys,
        point_to_voxel: GroupIndex::new(ids, m)?,
        voxel_features: FeatureArray::zeros(m, 0),
        voxel_size,
        origin,
    })
}

/// Trainable encoder layers.
#[derive(Clone, Debug)]
pub struct SparseEncoder {
    vfe1: LinNormAct,
    vfe2: LinNormAct,
    rounds: Vec<LinNormAct>,
    point: LinNormAct,
    pub voxel_size: [f64; 3],
    pub out_channels: usize,
    pub sensor_features: bool,
}

pub struct EncoderOutput {
    pub point_features: FeatureArray,
    pub voxel_features: FeatureArray,
    pub cache: EncoderCache,
}

pub struct EncoderCache {
    idx: GroupIndex,
    nbr_offsets: Vec<usize>,
    nbr_ids: Vec<usize>,
    n_voxels: usize,
    vfe1: LinNormActCache,
    argmax1: Vec<usize>,
    vfe2: LinNormActCache,
    argmax2: Vec<usize>,
    rounds: Vec<LinNormActCache>,
    point: LinNormActCache,
}

fn neighbor_mean(v: &FeatureArray, offsets: &[usize], ids: &[usize]) -> FeatureArray {
    let mut out = FeatureArray::zeros(v.n(), v.c());
    for i in 0..v.n() {
        let nb = &ids[offsets[i]..offsets[i + 1]];
        let s = 1.0 / nb.len() as f64;
        let o = out.row_mut(i);
        for &j in nb {
            for (a, b) in o.iter_mut().zip(v.row(j)) {
                *a += b;
            }
        }
        o.iter_mut().for_each(|a| *a *= s);
    }
    out
}

fn neighbor_mean_backward(d: &FeatureArray, offsets: &[usize], ids: &[usize]) -> FeatureArray {
    let mut out = FeatureArray::zeros(d.n(), d.c());
    for i in 0..d.n() {
        let nb = &ids[offsets[i]..offsets[i + 1]];
        let s = 1.0 / nb.len() as f64;
        for &j in nb {
            for (a, b) in out.row_mut(j).iter_mut().zip(d.row(i)) {
                *a += b * s;
            }
        }
    }
    out
}

impl SparseEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let c1 = cfg.vfe_channels;
        let c = cfg.channels;
        Self {
            vfe1: LinNormAct::new(store, "encoder.vfe1", Self::raw_dims(cfg.sensor_features), c1, rng),
            vfe2: LinNormAct::new(store, "encoder.vfe2", 2 * c1, c, rng),
            rounds: (0..cfg.neighbor_rounds)
                .map(|r| LinNormAct::new(store, &format!("encoder.nbr{r}"), 2 * c, c, rng))
                .collect(),
            point: LinNormAct::new(store, "encoder.point", c + 3, c, rng),
            voxel_size: cfg.voxel_size,
            out_channels: c,
            sensor_features: cfg.sensor_features,
        }
    }

    pub fn raw_dims(sensor_features: bool) -> usize {
        RAW_POINT_DIMS + if sensor_features { SENSOR_DIMS } else { 0 }
    }

    /// Per-point raw inputs for `grid` built from `pc`.
    fn raw_inputs(&self, grid: &SparseVoxelGrid, pc: &PointCloud) -> Result<(FeatureArray, FeatureArray)> {
        let n = pc.len();
        let idx = &grid.point_to_voxel;
        let coords = FeatureArray::from_vec(n, 3, pc.coords.iter().flatten().copied().collect())?;
        let mean = dynamic_broadcast(&dynamic_pool(&coords, idx, Reduce::Avg)?, idx)?;
        let mut raw = FeatureArray::zeros(n, Self::raw_dims(self.sensor_features));
        let mut rel = FeatureArray::zeros(n, 3);
        for i in 0..n {
            let v = idx.get(i).expect("every point has a voxel");
            let vc = grid.voxel_center(v);
            let p = pc.coords[i];
            let r = raw.row_mut(i);
            for d in 0..3 {
                r[d] = (p[d] - vc[d]) / grid.voxel_size[d];
                r[3 + d] = (p[d] - mean.get(i, d)) / grid.voxel_size[d];
            }
            r[6] = pc.intensity_at(i);
            if self.sensor_features {
                let dist = p[0].hypot(p[1]);
                if dist > 1e-9 {
                    r[7] = p[0] / dist;
                    r[8] = p[1] / dist;
                }
                r[9] = p[2];
            }
            rel.row_mut(i).copy_from_slice(&r[..3]);
        }
        Ok((raw, rel))
    }

    pub fn forward(&self, p: &ParamStore, grid: &SparseVoxelGrid, pc: &PointCloud) -> Result<EncoderOutput> {
        if grid.point_to_voxel.n() != pc.len() {
            return Err(FsdError::contract("voxel grid was not built from this point cloud"));
        }
        if grid.voxel_size != self.voxel_size {
            return Err(FsdError::contract(format!(
                "grid voxel size {:?} differs from encoder voxel size {:?}",
                grid.voxel_size, self.voxel_size
            )));
        }
        let idx = grid.point_to_voxel.clone();
        let (raw, rel) = self.raw_inputs(grid, pc)?;
        let (h1, vfe1) = self.vfe1.forward(p, raw)?;
        let (g1, argmax1) = dynamic_pool_max(&h1, &idx)?;
        let cat1 = FeatureArray::concat_cols(&[&h1, &dynamic_broadcast(&g1, &idx)?])?;
        let (h2, vfe2) = self.vfe2.forward(p, cat1)?;
        let (mut v, argmax2) = dynamic_pool_max(&h2, &idx)?;

        let (nbr_offsets, nbr_ids) = grid.neighbor_lists();
        let mut rounds = Vec::with_capacity(self.rounds.len());
        for layer in &self.rounds {
            let nb = neighbor_mean(&v, &nbr_offsets, &nbr_ids);
            let (next, c) = layer.forward(p, FeatureArray::concat_cols(&[&v, &nb])?)?;
            rounds.push(c);
            v = next;
        }
        let vb = dynamic_broadcast(&v, &idx)?;
        let (point_features, point) = self.point.forward(p, FeatureArray::concat_cols(&[&vb, &rel])?)?;
        Ok(EncoderOutput {
            point_features,
            voxel_features: v,
            cache: EncoderCache {
                n_voxels: idx.m(),
                idx,
                nbr_offsets,
                nbr_ids,
                vfe1,
                argmax1,
                vfe2,
                argmax2,
                rounds,
                point,
            },
        })
    }

    /// Accumulates parameter gradients given the gradient of the per-point output.
    pub fn backward(&self, p: &ParamStore, cache: &EncoderCache, d_points: &FeatureArray, g: &mut Grads) -> Result<()> {
        let c = self.out_channels;
        let n = cache.idx.n();
        let d_cat = self.point.backward(p, &cache.point, d_points, g);
        let mut dv = broadcast_backward(&d_cat.slice_cols(0, c), &cache.idx)?;
        for (layer, rc) in self.rounds.iter().zip(&cache.rounds).rev() {
            let d = layer.backward(p, rc, &dv, g);
            let mut next = d.slice_cols(0, c);
            next.add_assign(&neighbor_mean_backward(
                &d.slice_cols(c, c),
                &cache.nbr_offsets,
                &cache.nbr_ids,
            ));
            dv = next;
        }
        debug_assert_eq!(dv.n(), cache.n_voxels);
        let dh2 = max_pool_backward(&cache.argmax2, n, &dv);
        let d_cat1 = self.vfe2.backward(p, &cache.vfe2, &dh2, g);
        let c1 = self.vfe1.d_out();
        let mut dh1 = d_cat1.slice_cols(0, c1);
        let dg1 = broadcast_backward(&d_cat1.slice_cols(c1, c1), &cache.idx)?;
        dh1.add_assign(&max_pool_backward(&cache.argmax1, n, &dg1));
        self.vfe1.backward(p, &cache.vfe1, &dh1, g);
        Ok(())
    }

    /// Voxelizes and encodes in one call, filling the grid's voxel features.
    pub fn encode(&self, p: &ParamStore, pc: &PointCloud) -> Result<(SparseVoxelGrid, EncoderOutput)> {
        let mut grid = voxelize(pc, self.voxel_size, [0.0; 3])?;
        let out = self.forward(p, &grid, pc)?;
        grid.voxel_features = out.voxel_features.clone();
        Ok((grid, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{check_param_grads, random_array};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            voxel_size: [0.5; 3],
            vfe_channels: 4,
            channels: 6,
            neighbor_rounds: 2,
            sensor_features: false,
        }
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> PointCloud {
        let coords = (0..n)
            .map(|_| [0, 1, 2].map(|_| rng.random_range(-extent..extent)))
            .collect();
        let intensity = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        PointCloud::with_intensity(coords, intensity).unwrap()
    }

    #[test]
    fn same_cell_and_floor_boundaries() {
        let pc = PointCloud::new(vec![[0.1, 0.1, 0.1], [0.2, 0.3, 0.4]]);
        let g = voxelize(&pc, [1.0; 3], [0.0; 3]).unwrap();
        assert_eq!(g.num_voxels(), 1);
        assert_eq!(g.point_to_voxel.ids(), &[0, 0]);

        let pc = PointCloud::new(vec![[0.999, 0.0, 0.0], [1.001, 0.0, 0.0], [-0.001, 0.0, 0.0]]);
        let g = voxelize(&pc, [1.0; 3], [0.0; 3]).unwrap();
        assert_eq!(g.voxel_keys, vec![[0, 0, 0], [1, 0, 0], [-1, 0, 0]]);
    }

    #[test]
    fn voxel_count_matches_hash_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let pc = random_cloud(&mut rng, 300, 3.0);
            let g = voxelize(&pc, [0.4, 0.5, 0.7], [0.0; 3]).unwrap();
            let set: HashSet<(i64, i64, i64)> = pc
                .coords
                .iter()
                .map(|p| {
                    (
                        (p[0] / 0.4).floor() as i64,
                        (p[1] / 0.5).floor() as i64,
                        (p[2] / 0.7).floor() as i64,
                    )
                })
                .collect();
            assert_eq!(g.num_voxels(), set.len());
            assert_eq!(g.point_to_voxel.n(), 300);
        }
    }

    #[test]
    fn empty_cloud_is_empty_grid() {
        let g = voxelize(&PointCloud::default(), [0.25; 3], [0.0; 3]).unwrap();
        assert_eq!(g.num_voxels(), 0);
        assert!(voxelize(&PointCloud::default(), [0.0, 1.0, 1.0], [0.0; 3]).is_err());
    }

    #[test]
    fn single_point_zero_weights_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = SparseEncoder::new(&mut store, &small_cfg(), &mut rng);
        store.zero_all();
        let pc = PointCloud::new(vec![[1.0, 2.0, 0.5]]);
        let (_, a) = enc.encode(&store, &pc).unwrap();
        let (_, b) = enc.encode(&store, &pc).unwrap();
        assert!(a.point_features.is_finite());
        assert_eq!(a.point_features, b.point_features);
    }

    #[test]
    fn duplicate_points_get_identical_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let enc = SparseEncoder::new(&mut store, &small_cfg(), &mut rng);
        let mut pc = random_cloud(&mut rng, 30, 1.5);
        pc.coords.push(pc.coords[4]);
        let dup_i = pc.intensity_at(4);
        pc.intensity.as_mut().unwrap().push(dup_i);
        let (_, out) = enc.encode(&store, &pc).unwrap();
        assert_eq!(out.point_features.row(4), out.point_features.row(30));
    }

    #[test]
    fn voxel_features_ignore_point_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = SparseEncoder::new(&mut store, &small_cfg(), &mut rng);
        let pc = random_cloud(&mut rng, 40, 1.0);
        let mut rev = pc.clone();
        rev.coords.reverse();
        rev.intensity.as_mut().unwrap().reverse();
        let (ga, a) = enc.encode(&store, &pc).unwrap();
        let (gb, b) = enc.encode(&store, &rev).unwrap();
        for (va, key) in ga.voxel_keys.iter().enumerate() {
            let vb = gb.voxel_keys.iter().position(|k| k == key).unwrap();
            for (x, y) in a.voxel_features.row(va).iter().zip(b.voxel_features.row(vb)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn integer_voxel_shift_preserves_features_without_sensor_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let enc = SparseEncoder::new(&mut store, &small_cfg(), &mut rng);
        let pc = random_cloud(&mut rng, 40, 1.0);
        let mut shifted = pc.clone();
        for p in &mut shifted.coords {
            p[0] += 3.0 * 0.5;
            p[2] -= 2.0 * 0.5;
        }
        let (ga, a) = enc.encode(&store, &pc).unwrap();
        let (gb, b) = enc.encode(&store, &shifted).unwrap();
        for (ka, kb) in ga.voxel_keys.iter().zip(&gb.voxel_keys) {
            assert_eq!([ka[0] + 3, ka[1], ka[2] - 2], *kb);
        }
        for (x, y) in a.point_features.data().iter().zip(b.point_features.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let enc = SparseEncoder::new(&mut store, &small_cfg(), &mut rng);
        let pc = random_cloud(&mut rng, 60, 1.2);
        let grid = voxelize(&pc, enc.voxel_size, [0.0; 3]).unwrap();
        let w = random_array(&mut rng, 60, enc.out_channels);
        let out = enc.forward(&store, &grid, &pc).unwrap();
        let mut g = store.zeros_like();
        enc.backward(&store, &out.cache, &w, &mut g).unwrap();
        check_param_grads(
            &store,
            &g,
            |p| enc.forward(p, &grid, &pc).unwrap().point_features.dot(&w),
            1e-4,
        );
    }

    #[test]
    fn sensor_inputs_are_direction_and_height() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let cfg = EncoderConfig {
            sensor_features: true,
            ..small_cfg()
        };
        let enc = SparseEncoder::new(&mut store, &cfg, &mut rng);
        let pc = PointCloud::new(vec![[3.0, -4.0, 1.25], [0.0, 0.0, -0.5]]);
        let grid = voxelize(&pc, enc.voxel_size, [0.0; 3]).unwrap();
        let (raw, _) = enc.raw_inputs(&grid, &pc).unwrap();
        assert_eq!(raw.c(), RAW_POINT_DIMS + SENSOR_DIMS);
        assert_eq!(&raw.row(0)[7..], &[0.6, -0.8, 1.25]);
        assert_eq!(&raw.row(1)[7..], &[0.0, 0.0, -0.5]);

        let pc = random_cloud(&mut rng, 50, 3.0);
        let grid = voxelize(&pc, enc.voxel_size, [0.0; 3]).unwrap();
        let w = random_array(&mut rng, 50, enc.out_channels);
        let out = enc.forward(&store, &grid, &pc).unwrap();
        let mut g = store.zeros_like();
        enc.backward(&store, &out.cache, &w, &mut g).unwrap();
        check_param_grads(
            &store,
            &g,
            |p| enc.forward(p, &grid, &pc).unwrap().point_features.dot(&w),
            1e-4,
        );
    }
}
