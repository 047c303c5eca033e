use rand::Rng;

use crate::gradcheck::{check_input, check_params};
use crate::nn::{Grads, ParamStore};
use crate::tensor::FeatureArray;

pub fn random_array<R: Rng>(rng: &mut R, n: usize, c: usize) -> FeatureArray {
    let data = (0..n * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    FeatureArray::from_vec(n, c, data).unwrap()
}

pub fn check_param_grads<F: FnMut(&ParamStore) -> f64>(store: &ParamStore, g: &Grads, loss: F, tol: f64) {
    for r in check_params(store, g, loss, 1e-6, 64) {
        assert!(r.passes(tol), "{}: rel err {:.3e}", r.name, r.rel_err);
    }
}

pub fn check_input_grad<F: FnMut(&FeatureArray) -> f64>(x: &FeatureArray, dx: &FeatureArray, loss: F, tol: f64) {
    let r = check_input("input", x, dx, loss, 1e-6);
    assert!(r.passes(tol), "input: rel err {:.3e}", r.rel_err);
}
