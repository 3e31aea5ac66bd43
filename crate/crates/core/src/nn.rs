//! Minimal dense-layer toolkit with hand-written gradients.
//!
//! Activations are matrices with one row per sample. Parameters live in a
//! [`ParamStore`] as named matrices; layers hold indices into it, so the same
//! layout doubles as the gradient buffer and the optimizer state.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;

/// Named parameter matrices in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Mat>,
}

/// Index of a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct P(pub usize);

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> P {
        self.names.push(name.into());
        self.tensors.push(value);
        P(self.tensors.len() - 1)
    }

    pub fn get(&self, p: P) -> &Mat {
        &self.tensors[p.0]
    }

    pub fn get_mut(&mut self, p: P) -> &mut Mat {
        &mut self.tensors[p.0]
    }

    /// Same layout, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Mat::zeros(t.nrows(), t.ncols()))
                .collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.fill(0.0));
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn norm(&self, p: P) -> f64 {
        self.get(p).norm()
    }

    pub fn index_of(&self, name: &str) -> Option<P> {
        self.names.iter().position(|n| n == name).map(P)
    }

    /// Copy values from `other`, which must have the same names and shapes.
    pub fn assign(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Dimension("parameter names differ".into()));
        }
        for (i, (a, b)) in self.tensors.iter_mut().zip(&other.tensors).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::Dimension(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    self.names[i],
                    b.shape(),
                    a.shape()
                )));
            }
            a.copy_from(b);
        }
        Ok(())
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Standard normal draw (Box-Muller).
pub(crate) fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub(crate) fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat {
    // Row-major fill so the draw order does not depend on nalgebra's storage.
    let mut m = Mat::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            m[(r, c)] = std * normal(rng);
        }
    }
    m
}

/// `y = x Wᵀ + b` with `W` of shape out×in and `b` a 1×out row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: P,
    pub b: P,
}

impl Linear {
    /// He-style initialization scaled by `gain`.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        inputs: usize,
        outputs: usize,
        gain: f64,
    ) -> Self {
        let std = gain * (2.0 / inputs as f64).sqrt();
        let w = store.add(format!("{name}.w"), random_mat(rng, outputs, inputs, std));
        let b = store.add(format!("{name}.b"), Mat::zeros(1, outputs));
        Self { w, b }
    }

    pub fn forward(&self, store: &ParamStore, x: &Mat) -> Mat {
        let mut y = x * store.get(self.w).transpose();
        add_row(&mut y, store.get(self.b));
        y
    }

    /// Accumulate parameter gradients and return the input gradient.
    pub fn backward(&self, store: &ParamStore, grads: &mut ParamStore, x: &Mat, dy: &Mat) -> Mat {
        *grads.get_mut(self.w) += dy.transpose() * x;
        *grads.get_mut(self.b) += col_sum(dy);
        dy * store.get(self.w)
    }

    /// Like [`Linear::backward`] without the input gradient.
    pub fn backward_params(&self, grads: &mut ParamStore, x: &Mat, dy: &Mat) {
        *grads.get_mut(self.w) += dy.transpose() * x;
        *grads.get_mut(self.b) += col_sum(dy);
    }
}

/// Add the 1×n `row` to every row of `m`.
pub fn add_row(m: &mut Mat, row: &Mat) {
    for mut r in m.row_iter_mut() {
        r += row;
    }
}

pub fn col_sum(m: &Mat) -> Mat {
    let mut s = Mat::zeros(1, m.ncols());
    for r in m.row_iter() {
        s += r;
    }
    s
}

pub fn col_mean(m: &Mat) -> Mat {
    col_sum(m) / m.nrows().max(1) as f64
}

pub fn relu(m: &Mat) -> Mat {
    m.map(|v| v.max(0.0))
}

/// Gradient through relu given its pre-activation.
pub fn relu_backward(pre: &Mat, dy: &Mat) -> Mat {
    dy.zip_map(pre, |g, p| if p > 0.0 { g } else { 0.0 })
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            bad.push(format!(
                "optimizer.lr = {} must be finite and >= 0",
                self.lr
            ));
        }
        for (k, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                bad.push(format!("optimizer.{k} = {b} must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            bad.push("optimizer.eps must be > 0".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }
}

/// Adam moments for every tensor of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        Self {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One bias-corrected update.
    pub fn update(&mut self, params: &mut ParamStore, grads: &ParamStore) {
        let rates = vec![self.config.lr; params.len()];
        self.update_with_rates(params, grads, &rates);
    }

    /// Like [`Adam::update`] with one learning rate per tensor.
    pub fn update_with_rates(
        &mut self,
        params: &mut ParamStore,
        grads: &ParamStore,
        rates: &[f64],
    ) {
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - beta2.powi(self.step.min(i32::MAX as u64) as i32);
        for i in 0..params.len() {
            let g = &grads.tensors[i];
            let m = &mut self.m.tensors[i];
            let v = &mut self.v.tensors[i];
            let p = &mut params.tensors[i];
            let lr = rates[i];
            for k in 0..p.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, &mut rng, "l", 4, 3, 1.0);
        store
            .get_mut(lin.b)
            .copy_from(&random_mat(&mut rng, 1, 3, 1.0));
        let x = random_mat(&mut rng, 5, 4, 1.0);
        let up = random_mat(&mut rng, 5, 3, 1.0);
        let loss = |s: &ParamStore, x: &Mat| relu(&lin.forward(s, x)).component_mul(&up).sum();
        let mut grads = store.zeros_like();
        let pre = lin.forward(&store, &x);
        let dx = lin.backward(&store, &mut grads, &x, &relu_backward(&pre, &up));
        let h = 1e-6;
        for t in 0..store.len() {
            for k in 0..store.tensors[t].len() {
                let mut s = store.clone();
                s.tensors[t][k] += h;
                let lp = loss(&s, &x);
                s.tensors[t][k] -= 2.0 * h;
                let fd = (lp - loss(&s, &x)) / (2.0 * h);
                assert!((fd - grads.tensors[t][k]).abs() < 1e-6);
            }
        }
        for k in 0..x.len() {
            let mut xp = x.clone();
            xp[k] += h;
            let lp = loss(&store, &xp);
            xp[k] -= 2.0 * h;
            let fd = (lp - loss(&store, &xp)) / (2.0 * h);
            assert!((fd - dx[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.add("p", Mat::from_row_slice(1, 3, &[1.0, 2.0, 3.0]));
        let mut grads = store.zeros_like();
        grads.tensors[0].copy_from_slice(&[0.5, -2.0, 0.0]);
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
            &store,
        );
        adam.update(&mut store, &grads);
        let p = &store.tensors[0];
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] - 2.1).abs() < 1e-6 && p[2] == 3.0);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }
}
