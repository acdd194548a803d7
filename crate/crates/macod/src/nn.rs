//! Small dense-network substrate: linear layers, two-layer MLPs, a GRU cell,
//! Adam, and masked categorical utilities.
//!
//! Everything is `f64` and batch-major (`(batch, features)` arrays). Layers
//! accumulate gradients into their own buffers; [`ParamSet::visit_tensors`]
//! exposes flat (value, grad) slices so optimizers, soft target updates, and
//! finite-difference checks all share one interface.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Mutable view of one parameter tensor and its gradient accumulator.
pub struct TensorRef<'a> {
    pub values: &'a mut [f64],
    pub grads: &'a mut [f64],
}

/// Anything holding trainable parameters.
pub trait ParamSet {
    fn visit_tensors(&mut self, f: &mut dyn FnMut(TensorRef<'_>));

    fn n_params(&mut self) -> usize {
        let mut n = 0;
        self.visit_tensors(&mut |t| n += t.values.len());
        n
    }

    fn zero_grads(&mut self) {
        self.visit_tensors(&mut |t| t.grads.fill(0.0));
    }

    fn param_values(&mut self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_tensors(&mut |t| out.extend_from_slice(t.values));
        out
    }

    fn set_param_values(&mut self, values: &[f64]) {
        let mut off = 0;
        self.visit_tensors(&mut |t| {
            t.values.copy_from_slice(&values[off..off + t.values.len()]);
            off += t.values.len();
        });
        assert_eq!(off, values.len(), "parameter count mismatch");
    }

    fn param_grads(&mut self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_tensors(&mut |t| out.extend_from_slice(t.grads));
        out
    }
}

fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-s..s))
}

/// Affine layer `y = x W^T + b` with gradient accumulators.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub gw: Array2<f64>,
    pub gb: Array1<f64>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: xavier(rng, out_dim, in_dim),
            b: Array1::zeros(out_dim),
            gw: Array2::zeros((out_dim, in_dim)),
            gb: Array1::zeros(out_dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. `x`.
    pub fn backward(&mut self, x: &Array2<f64>, gy: &Array2<f64>) -> Array2<f64> {
        self.gw += &gy.t().dot(x);
        self.gb += &gy.sum_axis(Axis(0));
        gy.dot(&self.w)
    }
}

impl ParamSet for Linear {
    fn visit_tensors(&mut self, f: &mut dyn FnMut(TensorRef<'_>)) {
        f(TensorRef {
            values: self.w.as_slice_mut().expect("standard layout"),
            grads: self.gw.as_slice_mut().expect("standard layout"),
        });
        f(TensorRef {
            values: self.b.as_slice_mut().expect("standard layout"),
            grads: self.gb.as_slice_mut().expect("standard layout"),
        });
    }
}

/// Square bias-free map `y = x W^T`, used for attention queries/keys/values.
#[derive(Clone, Debug)]
pub struct BilinearMap {
    pub w: Array2<f64>,
    pub gw: Array2<f64>,
}

impl BilinearMap {
    pub fn new(dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: xavier(rng, dim, dim),
            gw: Array2::zeros((dim, dim)),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.t())
    }

    pub fn backward(&mut self, x: &Array2<f64>, gy: &Array2<f64>) -> Array2<f64> {
        self.gw += &gy.t().dot(x);
        gy.dot(&self.w)
    }
}

impl ParamSet for BilinearMap {
    fn visit_tensors(&mut self, f: &mut dyn FnMut(TensorRef<'_>)) {
        f(TensorRef {
            values: self.w.as_slice_mut().expect("standard layout"),
            grads: self.gw.as_slice_mut().expect("standard layout"),
        });
    }
}

/// Two-layer MLP: `Linear -> ReLU -> Linear`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

/// Forward activations kept for the backward pass.
pub struct MlpCache {
    x: Array2<f64>,
    h_pre: Array2<f64>,
}

impl Mlp {
    pub fn new(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            l1: Linear::new(in_dim, hidden, rng),
            l2: Linear::new(hidden, out_dim, rng),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        let h_pre = self.l1.forward(x);
        let h = h_pre.mapv(|v| v.max(0.0));
        let y = self.l2.forward(&h);
        (
            y,
            MlpCache {
                x: x.clone(),
                h_pre,
            },
        )
    }

    /// Forward without retaining activations, for evaluation-only paths.
    pub fn eval(&self, x: &Array2<f64>) -> Array2<f64> {
        let h = self.l1.forward(x).mapv(|v| v.max(0.0));
        self.l2.forward(&h)
    }

    pub fn backward(&mut self, cache: &MlpCache, gy: &Array2<f64>) -> Array2<f64> {
        let h = cache.h_pre.mapv(|v| v.max(0.0));
        let gh = self.l2.backward(&h, gy);
        let gh_pre = &gh * &cache.h_pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        self.l1.backward(&cache.x, &gh_pre)
    }
}

impl ParamSet for Mlp {
    fn visit_tensors(&mut self, f: &mut dyn FnMut(TensorRef<'_>)) {
        self.l1.visit_tensors(f);
        self.l2.visit_tensors(f);
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Single-step gated recurrent cell.
///
/// `h' = (1 - z) * n + z * h` with update gate `z`, reset gate `r`, and
/// candidate `n = tanh(Wn x + Un (r * h) + bn)`.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub wz: Linear,
    pub uz: BilinearMap,
    pub wr: Linear,
    pub ur: BilinearMap,
    pub wn: Linear,
    pub un: BilinearMap,
}

pub struct GruCache {
    x: Array2<f64>,
    h: Array2<f64>,
    z: Array2<f64>,
    r: Array2<f64>,
    n: Array2<f64>,
}

impl GruCell {
    pub fn new(in_dim: usize, state_dim: usize, rng: &mut impl Rng) -> Self {
        assert_eq!(in_dim, state_dim, "cell expects matching input/state dims");
        Self {
            wz: Linear::new(in_dim, state_dim, rng),
            uz: BilinearMap::new(state_dim, rng),
            wr: Linear::new(in_dim, state_dim, rng),
            ur: BilinearMap::new(state_dim, rng),
            wn: Linear::new(in_dim, state_dim, rng),
            un: BilinearMap::new(state_dim, rng),
        }
    }

    pub fn forward(&self, x: &Array2<f64>, h: &Array2<f64>) -> (Array2<f64>, GruCache) {
        let z = (self.wz.forward(x) + self.uz.forward(h)).mapv(sigmoid);
        let r = (self.wr.forward(x) + self.ur.forward(h)).mapv(sigmoid);
        let n = (self.wn.forward(x) + self.un.forward(&(&r * h))).mapv(f64::tanh);
        let h_next = (1.0 - &z) * &n + &z * h;
        (
            h_next,
            GruCache {
                x: x.clone(),
                h: h.clone(),
                z,
                r,
                n,
            },
        )
    }

    pub fn eval(&self, x: &Array2<f64>, h: &Array2<f64>) -> Array2<f64> {
        let z = (self.wz.forward(x) + self.uz.forward(h)).mapv(sigmoid);
        let r = (self.wr.forward(x) + self.ur.forward(h)).mapv(sigmoid);
        let n = (self.wn.forward(x) + self.un.forward(&(&r * h))).mapv(f64::tanh);
        (1.0 - &z) * &n + &z * h
    }

    /// Backprop one step. The incoming hidden state is treated as a constant
    /// input; returns the gradient w.r.t. `x`.
    pub fn backward(&mut self, cache: &GruCache, gh_next: &Array2<f64>) -> Array2<f64> {
        let GruCache { x, h, z, r, n } = cache;
        let gn = gh_next * &(1.0 - z);
        let gz = gh_next * &(h - n);

        let gn_pre = &gn * &n.mapv(|v| 1.0 - v * v);
        let mut gx = self.wn.backward(x, &gn_pre);
        let g_rh = self.un.backward(&(r * h), &gn_pre);
        let gr = &g_rh * h;

        let gr_pre = &gr * &(r * &r.mapv(|v| 1.0 - v));
        gx += &self.wr.backward(x, &gr_pre);
        self.ur.backward(h, &gr_pre);

        let gz_pre = &gz * &(z * &z.mapv(|v| 1.0 - v));
        gx += &self.wz.backward(x, &gz_pre);
        self.uz.backward(h, &gz_pre);

        gx
    }
}

impl ParamSet for GruCell {
    fn visit_tensors(&mut self, f: &mut dyn FnMut(TensorRef<'_>)) {
        self.wz.visit_tensors(f);
        self.uz.visit_tensors(f);
        self.wr.visit_tensors(f);
        self.ur.visit_tensors(f);
        self.wn.visit_tensors(f);
        self.un.visit_tensors(f);
    }
}

/// Adam with state laid out over the flattened parameter vector.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut dyn ParamSet) {
        let n = params.n_params();
        if self.m.is_empty() {
            self.m = vec![0.0; n];
            self.v = vec![0.0; n];
        }
        assert_eq!(self.m.len(), n, "optimizer bound to a different model");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut off = 0;
        let (beta1, beta2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let (m, v) = (&mut self.m, &mut self.v);
        params.visit_tensors(&mut |t| {
            for (i, (val, g)) in t.values.iter_mut().zip(t.grads.iter()).enumerate() {
                let k = off + i;
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                *val -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            off += t.values.len();
        });
    }
}

/// Polyak step `target <- (1 - tau) * target + tau * online`.
pub fn soft_update(target: &mut dyn ParamSet, online: &mut dyn ParamSet, tau: f64) {
    let online_values = online.param_values();
    let mut off = 0;
    target.visit_tensors(&mut |t| {
        for val in t.values.iter_mut() {
            *val = (1.0 - tau) * *val + tau * online_values[off];
            off += 1;
        }
    });
    assert_eq!(off, online_values.len(), "mismatched parameter shapes");
}

/// Row-wise log-softmax over the entries where `mask` is true; masked entries
/// come back as `-inf` (probability exactly zero).
pub fn masked_log_softmax(logits: &Array2<f64>, mask: &Array2<bool>) -> Array2<f64> {
    assert_eq!(logits.dim(), mask.dim());
    let (rows, cols) = logits.dim();
    let mut out = Array2::from_elem((rows, cols), f64::NEG_INFINITY);
    for b in 0..rows {
        let mut max = f64::NEG_INFINITY;
        for j in 0..cols {
            if mask[[b, j]] && logits[[b, j]] > max {
                max = logits[[b, j]];
            }
        }
        assert!(max.is_finite(), "row {b} has no available entry");
        let mut denom = 0.0;
        for j in 0..cols {
            if mask[[b, j]] {
                denom += (logits[[b, j]] - max).exp();
            }
        }
        let log_denom = denom.ln();
        for j in 0..cols {
            if mask[[b, j]] {
                out[[b, j]] = logits[[b, j]] - max - log_denom;
            }
        }
    }
    out
}

/// Samples one index per row from masked log-probabilities by inverse CDF.
///
/// Rows with exactly one available entry are resolved without consuming
/// randomness, so degenerate action sets leave the RNG stream untouched.
pub fn sample_masked_rows(
    logp: &Array2<f64>,
    mask: &Array2<bool>,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let (rows, cols) = logp.dim();
    let mut out = Vec::with_capacity(rows);
    for b in 0..rows {
        let available: Vec<usize> = (0..cols).filter(|&j| mask[[b, j]]).collect();
        assert!(!available.is_empty(), "row {b} has no available entry");
        if available.len() == 1 {
            out.push(available[0]);
            continue;
        }
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = available[available.len() - 1];
        for &j in &available {
            acc += logp[[b, j]].exp();
            if u < acc {
                chosen = j;
                break;
            }
        }
        out.push(chosen);
    }
    out
}

/// Row argmax restricted to available entries (first max wins).
pub fn argmax_masked_rows(values: &Array2<f64>, mask: &Array2<bool>) -> Vec<usize> {
    let (rows, cols) = values.dim();
    let mut out = Vec::with_capacity(rows);
    for b in 0..rows {
        let mut best = None;
        let mut best_v = f64::NEG_INFINITY;
        for j in 0..cols {
            if mask[[b, j]] && values[[b, j]] > best_v {
                best_v = values[[b, j]];
                best = Some(j);
            }
        }
        out.push(best.expect("row has no available entry"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = rng();
        let mut lin = Linear::new(3, 2, &mut rng);
        let x = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
        // loss = sum(y^2) / 2
        let y = lin.forward(&x);
        lin.backward(&x, &y);
        let analytic = lin.param_grads();
        let theta0 = lin.param_values();
        let eps = 1e-6;
        for (i, &g) in analytic.iter().enumerate() {
            let mut th = theta0.clone();
            th[i] += eps;
            lin.set_param_values(&th);
            let lp = lin.forward(&x).mapv(|v| v * v / 2.0).sum();
            th[i] -= 2.0 * eps;
            lin.set_param_values(&th);
            let lm = lin.forward(&x).mapv(|v| v * v / 2.0).sum();
            lin.set_param_values(&theta0);
            let fd = (lp - lm) / (2.0 * eps);
            assert!((fd - g).abs() / fd.abs().max(g.abs()).max(1e-6) < 1e-5);
        }
    }

    #[test]
    fn gru_backward_matches_finite_differences() {
        let mut rng = rng();
        let mut cell = GruCell::new(4, 4, &mut rng);
        let x = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let h = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let (y, cache) = cell.forward(&x, &h);
        cell.backward(&cache, &y);
        let analytic = cell.param_grads();
        let theta0 = cell.param_values();
        let eps = 1e-6;
        let loss = |cell: &GruCell| cell.eval(&x, &h).mapv(|v| v * v / 2.0).sum();
        for i in (0..theta0.len()).step_by(7) {
            let mut th = theta0.clone();
            th[i] += eps;
            cell.set_param_values(&th);
            let lp = loss(&cell);
            th[i] -= 2.0 * eps;
            cell.set_param_values(&th);
            let lm = loss(&cell);
            cell.set_param_values(&theta0);
            let fd = (lp - lm) / (2.0 * eps);
            let g = analytic[i];
            assert!(
                (fd - g).abs() / fd.abs().max(g.abs()).max(1e-6) < 1e-5,
                "coord {i}: fd={fd} analytic={g}"
            );
        }
    }

    #[test]
    fn masked_log_softmax_zeroes_unavailable() {
        let logits = array![[1.0, 2.0, 3.0]];
        let mask = array![[true, false, true]];
        let logp = masked_log_softmax(&logits, &mask);
        assert_eq!(logp[[0, 1]], f64::NEG_INFINITY);
        let p: f64 = (0..3).map(|j| logp[[0, j]].exp()).sum();
        assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_available_row_skips_rng() {
        let logits = array![[0.3, 0.0, 0.0]];
        let mask = array![[false, true, false]];
        let logp = masked_log_softmax(&logits, &mask);
        let mut r1 = rng();
        let before: f64 = r1.gen();
        let mut r2 = rng();
        let picked = sample_masked_rows(&logp, &mask, &mut r2);
        assert_eq!(picked, vec![1]);
        // identical next draw proves nothing was consumed
        assert_eq!(r2.gen::<f64>(), before);
    }

    #[test]
    fn soft_update_tau_one_copies() {
        let mut rng = rng();
        let mut a = Linear::new(3, 3, &mut rng);
        let mut b = Linear::new(3, 3, &mut rng);
        soft_update(&mut a, &mut b, 1.0);
        assert_eq!(a.param_values(), b.param_values());
    }

    #[test]
    fn adam_reduces_quadratic() {
        let mut rng = rng();
        let mut lin = Linear::new(2, 2, &mut rng);
        let mut opt = Adam::new(1e-2);
        let x = Array2::from_shape_fn((8, 2), |_| rng.gen_range(-1.0..1.0));
        let loss0 = lin.forward(&x).mapv(|v| v * v).sum();
        for _ in 0..200 {
            lin.zero_grads();
            let y = lin.forward(&x);
            lin.backward(&x, &(2.0 * &y));
            opt.step(&mut lin);
        }
        let loss1 = lin.forward(&x).mapv(|v| v * v).sum();
        assert!(loss1 < loss0 * 0.01, "{loss1} !< {loss0}");
    }
}
