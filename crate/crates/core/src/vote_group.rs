//! Foreground classification, center voting and connected-components
//! grouping of voted centers.

use std::collections::HashMap;

use rand::Rng;

use crate::config::VoteConfig;
use crate::error::{FsdError, Result};
use crate::nn::{Grads, Mlp, MlpCache, ParamStore};
use crate::segment_ops::{dynamic_pool, GroupIndex, Reduce};
use crate::tensor::FeatureArray;

/// Disjoint sets with path halving and union by size.
#[derive(Clone, Debug)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] || (self.size[ra] == self.size[rb] && rb < ra) {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        true
    }
}

#[inline]
fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Unions every pair among `members` closer than `radius`, using a hash grid
/// with cell edge `radius` and the 27 surrounding cells.
fn link_within_radius(points: &[[f64; 3]], members: &[usize], radius: f64, uf: &mut UnionFind) {
    let r2 = radius * radius;
    let cell = |p: [f64; 3]| p.map(|v| (v / radius).floor() as i64);
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::with_capacity(members.len());
    for &i in members {
        grid.entry(cell(points[i])).or_default().push(i);
    }
    for &i in members {
        let c = cell(points[i]);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(bucket) = grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) else {
                        continue;
                    };
                    for &j in bucket {
                        if j > i && dist2(points[i], points[j]) < r2 {
                            uf.union(i, j);
                        }
                    }
                }
            }
        }
    }
}

/// Connected components of the graph joining points closer than `radius`.
/// Labels are contiguous and ordered by each component's first point.
pub fn connected_components(points: &[[f64; 3]], radius: f64) -> Vec<usize> {
    let mut uf = UnionFind::new(points.len());
    let all: Vec<usize> = (0..points.len()).collect();
    link_within_radius(points, &all, radius, &mut uf);
    let mut label_of_root = HashMap::new();
    (0..points.len())
        .map(|i| {
            let r = uf.find(i);
            let next = label_of_root.len();
            *label_of_root.entry(r).or_insert(next)
        })
        .collect()
}

/// Per-point outputs of the classification and voting heads.
#[derive(Clone, Debug)]
pub struct VoteResult {
    /// N × (num_classes + 1), background last.
    pub fg_logits: FeatureArray,
    pub offsets: FeatureArray,
    pub voted_centers: Vec<[f64; 3]>,
}

impl VoteResult {
    /// Builds a result from raw offsets, adding them to the coordinates.
    pub fn from_offsets(fg_logits: FeatureArray, offsets: FeatureArray, coords: &[[f64; 3]]) -> Self {
        let voted_centers = coords
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let o = offsets.row(i);
                [c[0] + o[0], c[1] + o[1], c[2] + o[2]]
            })
            .collect();
        Self {
            fg_logits,
            offsets,
            voted_centers,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.fg_logits.c().saturating_sub(1)
    }

    /// Most likely foreground class and its softmax probability, per point.
    pub fn best_foreground(&self) -> Vec<(usize, f64)> {
        let k = self.num_classes();
        self.fg_logits
            .rows()
            .map(|z| {
                let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = z.iter().map(|v| (v - m).exp()).sum();
                let mut best = (0, f64::NEG_INFINITY);
                for (c, v) in z[..k].iter().enumerate() {
                    let p = (v - m).exp() / denom;
                    if p > best.1 {
                        best = (c, p);
                    }
                }
                best
            })
            .collect()
    }
}

/// Instance groups over points.
#[derive(Clone, Debug)]
pub struct Grouping {
    pub index: GroupIndex,
    /// Centroid of the voted centers in each group.
    pub group_centers: Vec<[f64; 3]>,
    pub group_class: Vec<usize>,
}

impl Grouping {
    pub fn num_groups(&self) -> usize {
        self.index.m()
    }
}

/// Groups foreground points by connected components of their voted centers.
///
/// A point takes part for its most likely foreground class when that
/// class's probability exceeds `fg_threshold`. Components are found per
/// class with that class's radius, so classes never mix. Others get NONE.
pub fn ccl_group(votes: &VoteResult, radius_per_class: &[f64], fg_threshold: f64) -> Result<Grouping> {
    let k = votes.num_classes();
    if radius_per_class.len() < k {
        return Err(FsdError::contract(format!(
            "{} radii given for {k} classes",
            radius_per_class.len()
        )));
    }
    if let Some(r) = radius_per_class.iter().find(|&&r| !(r > 0.0)) {
        return Err(FsdError::contract(format!("CCL radius must be positive, got {r}")));
    }
    let n = votes.voted_centers.len();
    let best = votes.best_foreground();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &(c, p)) in best.iter().enumerate() {
        if p > fg_threshold {
            by_class[c].push(i);
        }
    }
    let mut uf = UnionFind::new(n);
    for (c, members) in by_class.iter().enumerate() {
        link_within_radius(&votes.voted_centers, members, radius_per_class[c], &mut uf);
    }
    let mut ids = vec![GroupIndex::NONE; n];
    let mut group_class = Vec::new();
    let mut label_of_root: HashMap<usize, u32> = HashMap::new();
    for i in 0..n {
        let (c, p) = best[i];
        if p <= fg_threshold {
            continue;
        }
        let r = uf.find(i);
        let next = label_of_root.len() as u32;
        let id = *label_of_root.entry(r).or_insert_with(|| {
            group_class.push(c);
            next
        });
        ids[i] = id;
    }
    let m = group_class.len();
    let index = GroupIndex::new(ids, m)?;
    let group_centers = group_centroids(&votes.voted_centers, &index)?;
    Ok(Grouping {
        index,
        group_centers,
        group_class,
    })
}

/// Average of `points` within each group.
pub fn group_centroids(points: &[[f64; 3]], index: &GroupIndex) -> Result<Vec<[f64; 3]>> {
    let f = FeatureArray::from_vec(points.len(), 3, points.iter().flatten().copied().collect())?;
    let g = dynamic_pool(&f, index, Reduce::Avg)?;
    Ok(g.rows().map(|r| [r[0], r[1], r[2]]).collect())
}

/// Classification and voting heads on per-point features.
#[derive(Clone, Debug)]
pub struct VoteHeads {
    sem: Mlp,
    vote: Mlp,
}

pub struct VoteCache {
    sem: MlpCache,
    vote: MlpCache,
}

impl VoteHeads {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        in_channels: usize,
        num_classes: usize,
        cfg: &VoteConfig,
        rng: &mut R,
    ) -> Self {
        Self {
            sem: Mlp::new(store, "vote.sem", &[in_channels, cfg.hidden, num_classes + 1], rng),
            vote: Mlp::new(store, "vote.offset", &[in_channels, cfg.hidden, 3], rng),
        }
    }

    pub fn forward(
        &self,
        p: &ParamStore,
        features: &FeatureArray,
        coords: &[[f64; 3]],
    ) -> Result<(VoteResult, VoteCache)> {
        if features.n() != coords.len() {
            return Err(FsdError::contract("vote heads: feature rows differ from point count"));
        }
        let (logits, sem) = self.sem.forward(p, features.clone())?;
        let (offsets, vote) = self.vote.forward(p, features.clone())?;
        Ok((
            VoteResult::from_offsets(logits, offsets, coords),
            VoteCache { sem, vote },
        ))
    }

    /// Returns the gradient with respect to the input features.
    pub fn backward(
        &self,
        p: &ParamStore,
        cache: &VoteCache,
        d_logits: &FeatureArray,
        d_offsets: &FeatureArray,
        g: &mut Grads,
    ) -> FeatureArray {
        let mut d = self.sem.backward(p, &cache.sem, d_logits, g);
        d.add_assign(&self.vote.backward(p, &cache.vote, d_offsets, g));
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{focal_loss, l1_loss};
    use crate::testutil::{check_param_grads, random_array};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Logits that make every point a confident member of `class`.
    fn confident(n: usize, classes: &[usize], k: usize) -> FeatureArray {
        let mut z = FeatureArray::zeros(n, k + 1);
        for (i, &c) in classes.iter().enumerate() {
            z.set(i, c, 10.0);
        }
        z
    }

    fn votes_at(centers: &[[f64; 3]], classes: &[usize]) -> VoteResult {
        let n = centers.len();
        VoteResult::from_offsets(confident(n, classes, 2), FeatureArray::zeros(n, 3), centers)
    }

    #[test]
    fn zero_offsets_vote_for_own_coordinates() {
        let coords = [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let v = votes_at(&coords, &[0, 0]);
        assert_eq!(v.voted_centers, coords.to_vec());
    }

    #[test]
    fn two_clusters() {
        let v = votes_at(&[[0.0; 3], [0.5, 0.0, 0.0], [10.0, 0.0, 0.0]], &[0, 0, 0]);
        let g = ccl_group(&v, &[1.0, 1.0], 0.3).unwrap();
        assert_eq!(g.index.ids(), &[0, 0, 1]);
        assert_eq!(g.group_centers[0], [0.25, 0.0, 0.0]);
    }

    #[test]
    fn chain_is_one_component() {
        let pts: Vec<[f64; 3]> = [0.0, 0.9, 1.8, 2.7].iter().map(|&x| [x, 0.0, 0.0]).collect();
        let v = votes_at(&pts, &[0; 4]);
        let g = ccl_group(&v, &[1.0, 1.0], 0.3).unwrap();
        assert_eq!(g.num_groups(), 1);
    }

    #[test]
    fn distance_equal_to_radius_does_not_connect() {
        let labels = connected_components(&[[0.0; 3], [1.0, 0.0, 0.0]], 1.0);
        assert_eq!(labels, vec![0, 1]);
    }

    #[test]
    fn classes_never_share_a_group() {
        let v = votes_at(&[[0.0; 3], [0.1, 0.0, 0.0], [0.2, 0.0, 0.0]], &[0, 1, 0]);
        let g = ccl_group(&v, &[1.0, 1.0], 0.3).unwrap();
        assert_eq!(g.index.ids(), &[0, 1, 0]);
        assert_eq!(g.group_class, vec![0, 1]);
    }

    #[test]
    fn background_points_get_none() {
        let mut z = confident(3, &[0, 0, 0], 2);
        z.set(1, 0, 0.0);
        z.set(1, 2, 10.0);
        let v = VoteResult::from_offsets(z, FeatureArray::zeros(3, 3), &[[0.0; 3]; 3]);
        let g = ccl_group(&v, &[1.0, 1.0], 0.3).unwrap();
        assert_eq!(g.index.ids(), &[0, GroupIndex::NONE, 0]);
    }

    #[test]
    fn singleton_kept() {
        let v = votes_at(&[[0.0; 3]], &[1]);
        let g = ccl_group(&v, &[1.0, 1.0], 0.3).unwrap();
        assert_eq!(g.num_groups(), 1);
        assert_eq!(g.index.group_len(0), 1);
    }

    #[test]
    fn invalid_radius_rejected() {
        let v = votes_at(&[[0.0; 3]], &[0]);
        assert!(ccl_group(&v, &[0.0, 1.0], 0.3).is_err());
        assert!(ccl_group(&v, &[1.0], 0.3).is_err());
    }

    #[test]
    fn losses_at_optimum() {
        let v = votes_at(&[[0.0; 3], [1.0; 3]], &[0, 1]);
        let target = v.offsets.clone();
        assert_eq!(l1_loss(&v.offsets, &target, &[true, true]).unwrap(), 0.0);
        let mut sat = v.fg_logits.clone();
        sat.scale(10.0);
        assert!(focal_loss(&sat, &[0, 1], 2.0, 0.25).unwrap() < 1e-30);
    }

    #[test]
    fn head_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let cfg = VoteConfig {
            hidden: 7,
            ..VoteConfig::default()
        };
        let heads = VoteHeads::new(&mut store, 5, 3, &cfg, &mut rng);
        let f = random_array(&mut rng, 20, 5);
        let coords: Vec<[f64; 3]> = (0..20).map(|i| [i as f64, 0.0, 0.0]).collect();
        let wl = random_array(&mut rng, 20, 4);
        let wo = random_array(&mut rng, 20, 3);
        let loss = |p: &ParamStore| {
            let (v, _) = heads.forward(p, &f, &coords).unwrap();
            v.fg_logits.dot(&wl) + v.offsets.dot(&wo)
        };
        let (_, cache) = heads.forward(&store, &f, &coords).unwrap();
        let mut g = store.zeros_like();
        heads.backward(&store, &cache, &wl, &wo, &mut g);
        check_param_grads(&store, &g, loss, 1e-4);
    }
}
