//! Seeded inputs shared by the benchmarks.

use fsd_core::{Box3D, FeatureArray, GroupIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` rows of `c` features and a random assignment into `m` groups, with
/// about a tenth of the rows left ungrouped.
pub fn grouped_features(n: usize, m: usize, c: usize, seed: u64) -> (FeatureArray, GroupIndex) {
    let mut r = rng(seed);
    let data = (0..n * c).map(|_| r.random_range(-1.0..1.0)).collect();
    let ids = (0..n)
        .map(|_| {
            if r.random_bool(0.1) {
                None
            } else {
                Some(r.random_range(0..m))
            }
        })
        .collect::<Vec<_>>();
    (
        FeatureArray::from_vec(n, c, data).expect("shape"),
        GroupIndex::from_options(&ids, m).expect("ids in range"),
    )
}

/// Points clustered around `clusters` random centers inside `±extent`.
pub fn clustered_points(n: usize, clusters: usize, extent: f64, seed: u64) -> Vec<[f64; 3]> {
    let mut r = rng(seed);
    let centers: Vec<[f64; 3]> = (0..clusters)
        .map(|_| [r.random_range(-extent..extent), r.random_range(-extent..extent), 0.5])
        .collect();
    (0..n)
        .map(|i| {
            let c = centers[i % clusters];
            [0, 1, 2].map(|k| c[k] + r.random_range(-1.5..1.5))
        })
        .collect()
}

pub fn random_boxes(n: usize, extent: f64, seed: u64) -> Vec<Box3D> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let center = [
                r.random_range(-extent..extent),
                r.random_range(-extent..extent),
                r.random_range(0.0..2.0),
            ];
            let dims = [
                r.random_range(0.5..6.0),
                r.random_range(0.5..3.0),
                r.random_range(0.5..3.0),
            ];
            Box3D::new(center, dims, r.random_range(-3.1..3.1)).expect("valid box")
        })
        .collect()
}
