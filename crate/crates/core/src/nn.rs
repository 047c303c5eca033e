//! Small fully-connected building blocks with explicit backward passes.
//!
//! Parameters live in a flat [`ParamStore`]; layers only hold [`ParamId`]s.
//! That keeps optimizer updates, checkpoints and finite-difference checks a
//! simple loop over named matrices.

use rand::Rng;

use crate::error::{FsdError, Result};
use crate::tensor::FeatureArray;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<FeatureArray>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: FeatureArray) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &FeatureArray {
        &self.tensors[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut FeatureArray {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[FeatureArray] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [FeatureArray] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &FeatureArray)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data().len()).sum()
    }

    pub fn zeros_like(&self) -> Grads {
        Grads {
            tensors: self.tensors.iter().map(|t| FeatureArray::zeros(t.n(), t.c())).collect(),
        }
    }

    /// Sets every parameter to zero.
    pub fn zero_all(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.fill(0.0));
    }

    /// Replaces tensor values from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(FsdError::contract(format!(
                "parameter count mismatch: model has {}, source has {}",
                self.len(),
                other.len()
            )));
        }
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let id = other
                .find(name)
                .ok_or_else(|| FsdError::contract(format!("missing parameter {name}")))?;
            let src = other.get(id);
            if src.shape() != t.shape() {
                return Err(FsdError::contract(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.clone();
        }
        Ok(())
    }
}

/// Gradient buffers parallel to a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    tensors: Vec<FeatureArray>,
}

impl Grads {
    #[inline]
    pub fn get(&self, id: ParamId) -> &FeatureArray {
        &self.tensors[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut FeatureArray {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[FeatureArray] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [FeatureArray] {
        &mut self.tensors
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.iter().map(FeatureArray::sq_norm).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors.iter_mut().for_each(|t| t.scale(s));
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(FeatureArray::is_finite)
    }
}

fn uniform_init<R: Rng>(rng: &mut R, n: usize, c: usize, bound: f64) -> FeatureArray {
    let data = (0..n * c).map(|_| rng.random_range(-bound..=bound)).collect();
    FeatureArray::from_vec(n, c, data).expect("sized")
}

/// `y = x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_in.max(1) as f64).sqrt();
        let w = store.add(format!("{name}.weight"), uniform_init(rng, d_in, d_out, bound));
        let b = store.add(format!("{name}.bias"), FeatureArray::zeros(1, d_out));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, p: &ParamStore, x: &FeatureArray) -> Result<FeatureArray> {
        if x.c() != self.d_in {
            return Err(FsdError::contract(format!(
                "linear layer expects {} input channels, got {}",
                self.d_in,
                x.c()
            )));
        }
        let mut y = x.matmul(p.get(self.w));
        let b = p.get(self.b).row(0);
        for i in 0..y.n() {
            for (v, bv) in y.row_mut(i).iter_mut().zip(b) {
                *v += bv;
            }
        }
        Ok(y)
    }

    pub fn backward(&self, p: &ParamStore, x: &FeatureArray, dy: &FeatureArray, g: &mut Grads) -> FeatureArray {
        x.matmul_tn_acc(dy, g.get_mut(self.w));
        let db = g.get_mut(self.b).row_mut(0);
        for row in dy.rows() {
            for (a, d) in db.iter_mut().zip(row) {
                *a += d;
            }
        }
        dy.matmul_nt(p.get(self.w))
    }
}

/// Per-row normalization over channels with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub c: usize,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    xhat: FeatureArray,
    inv_std: Vec<f64>,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), FeatureArray::filled(1, c, 1.0));
        let beta = store.add(format!("{name}.beta"), FeatureArray::zeros(1, c));
        Self { gamma, beta, c }
    }

    pub fn forward(&self, p: &ParamStore, x: &FeatureArray) -> (FeatureArray, LayerNormCache) {
        let c = x.c() as f64;
        let gamma = p.get(self.gamma).row(0);
        let beta = p.get(self.beta).row(0);
        let mut xhat = x.clone();
        let mut y = FeatureArray::zeros(x.n(), x.c());
        let mut inv_std = Vec::with_capacity(x.n());
        for i in 0..x.n() {
            let row = xhat.row_mut(i);
            let mean = row.iter().sum::<f64>() / c;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
            for (((o, xh), g), b) in y.row_mut(i).iter_mut().zip(xhat.row(i)).zip(gamma).zip(beta) {
                *o = g * xh + b;
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, p: &ParamStore, cache: &LayerNormCache, dy: &FeatureArray, g: &mut Grads) -> FeatureArray {
        let c = dy.c() as f64;
        let gamma = p.get(self.gamma).row(0).to_vec();
        {
            let dg = g.get_mut(self.gamma).row_mut(0);
            for (d, xh) in dy.rows().zip(cache.xhat.rows()) {
                for ((a, dv), xv) in dg.iter_mut().zip(d).zip(xh) {
                    *a += dv * xv;
                }
            }
        }
        {
            let db = g.get_mut(self.beta).row_mut(0);
            for d in dy.rows() {
                for (a, dv) in db.iter_mut().zip(d) {
                    *a += dv;
                }
            }
        }
        let mut dx = FeatureArray::zeros(dy.n(), dy.c());
        let mut dxhat = vec![0.0; dy.c()];
        for i in 0..dy.n() {
            let xh = cache.xhat.row(i);
            for ((t, d), gm) in dxhat.iter_mut().zip(dy.row(i)).zip(&gamma) {
                *t = d * gm;
            }
            let mean_d = dxhat.iter().sum::<f64>() / c;
            let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c;
            let is = cache.inv_std[i];
            for ((o, t), x) in dx.row_mut(i).iter_mut().zip(&dxhat).zip(xh) {
                *o = is * (t - mean_d - x * mean_dx);
            }
        }
        dx
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_A * x * x)
}

/// Fully-connected layer, then [`LayerNorm`], then GELU.
#[derive(Clone, Debug)]
pub struct LinNormAct {
    pub lin: Linear,
    pub norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct LinNormActCache {
    input: FeatureArray,
    norm: LayerNormCache,
    pre_act: FeatureArray,
}

impl LinNormAct {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            lin: Linear::new(store, &format!("{name}.fc"), d_in, d_out, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), d_out),
        }
    }

    pub fn d_in(&self) -> usize {
        self.lin.d_in
    }

    pub fn d_out(&self) -> usize {
        self.lin.d_out
    }

    pub fn forward(&self, p: &ParamStore, x: FeatureArray) -> Result<(FeatureArray, LinNormActCache)> {
        let z = self.lin.forward(p, &x)?;
        let (pre_act, norm) = self.norm.forward(p, &z);
        let mut y = pre_act.clone();
        y.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        Ok((
            y,
            LinNormActCache {
                input: x,
                norm,
                pre_act,
            },
        ))
    }

    pub fn backward(&self, p: &ParamStore, cache: &LinNormActCache, dy: &FeatureArray, g: &mut Grads) -> FeatureArray {
        let mut d = dy.clone();
        for (dv, &a) in d.data_mut().iter_mut().zip(cache.pre_act.data()) {
            *dv *= gelu_grad(a);
        }
        let dz = self.norm.backward(p, &cache.norm, &d, g);
        self.lin.backward(p, &cache.input, &dz, g)
    }
}

/// Stack of [`LinNormAct`] layers followed by a plain linear output layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Vec<LinNormAct>,
    pub out: Linear,
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    hidden: Vec<LinNormActCache>,
    last: FeatureArray,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let k = dims.len() - 1;
        let hidden = (0..k - 1)
            .map(|i| LinNormAct::new(store, &format!("{name}.{i}"), dims[i], dims[i + 1], rng))
            .collect();
        let out = Linear::new(store, &format!("{name}.out"), dims[k - 1], dims[k], rng);
        Self { hidden, out }
    }

    pub fn d_out(&self) -> usize {
        self.out.d_out
    }

    pub fn forward(&self, p: &ParamStore, x: FeatureArray) -> Result<(FeatureArray, MlpCache)> {
        let mut h = x;
        let mut caches = Vec::with_capacity(self.hidden.len());
        for layer in &self.hidden {
            let (y, c) = layer.forward(p, h)?;
            caches.push(c);
            h = y;
        }
        let y = self.out.forward(p, &h)?;
        Ok((
            y,
            MlpCache {
                hidden: caches,
                last: h,
            },
        ))
    }

    pub fn backward(&self, p: &ParamStore, cache: &MlpCache, dy: &FeatureArray, g: &mut Grads) -> FeatureArray {
        let mut d = self.out.backward(p, &cache.last, dy, g);
        for (layer, c) in self.hidden.iter().zip(&cache.hidden).rev() {
            d = layer.backward(p, c, &d, g);
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{check_input_grad, check_param_grads, random_array};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "mlp", &[5, 7, 6, 3], &mut rng);
        let x = random_array(&mut rng, 9, 5);
        let w = random_array(&mut rng, 9, 3);
        let loss = |p: &ParamStore, x: &FeatureArray| {
            let (y, _) = mlp.forward(p, x.clone()).unwrap();
            y.dot(&w)
        };
        let mut g = store.zeros_like();
        let (_, cache) = mlp.forward(&store, x.clone()).unwrap();
        let dx = mlp.backward(&store, &cache, &w, &mut g);
        check_param_grads(&store, &g, |p| loss(p, &x), 1e-6);
        check_input_grad(&x, &dx, |xx| loss(&store, xx), 1e-6);
    }

    #[test]
    fn zero_weights_give_finite_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let l = LinNormAct::new(&mut store, "l", 3, 4, &mut rng);
        store.zero_all();
        let (y, _) = l.forward(&store, FeatureArray::filled(2, 3, 1.5)).unwrap();
        assert!(y.is_finite());
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_rejects_wrong_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let l = Linear::new(&mut store, "l", 3, 4, &mut rng);
        assert!(l.forward(&store, &FeatureArray::zeros(1, 2)).is_err());
    }
}
