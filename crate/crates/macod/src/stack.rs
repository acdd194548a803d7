//! Attentive actor-critic network stack.
//!
//! One stack bundles, for `N` agents:
//!   - per-agent observation embeddings (two-layer MLP, optional GRU step),
//!   - shared attention maps (query, key, and one value map per output
//!     branch: one for the policy heads, one for the Q heads),
//!   - per-agent policy heads producing action/option logits,
//!   - per-agent Q heads producing one value per own action, conditioned on
//!     the other agents' chosen actions via one-hot inputs.
//!
//! The embedding and attention parameters are shared between the policy and
//! Q branches, so both branches see bitwise-identical attention weights for
//! the same joint observation. Backward passes are hand-rolled and verified
//! against central finite differences.

use crate::attention::batched_attention;
use crate::nn::{
    masked_log_softmax, BilinearMap, GruCache, GruCell, Mlp, MlpCache, ParamSet, TensorRef,
};
use ndarray::{concatenate, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackConfig {
    pub n_agents: usize,
    pub obs_dim: usize,
    pub embed_hidden: usize,
    pub embed_dim: usize,
    pub head_hidden: usize,
    pub n_actions: usize,
    pub use_gru: bool,
}

impl StackConfig {
    fn q_input_dim(&self) -> usize {
        2 * self.embed_dim + self.n_actions * (self.n_agents - 1)
    }
}

#[derive(Clone, Debug)]
pub struct AttentiveStack {
    pub cfg: StackConfig,
    emb: Vec<Mlp>,
    gru: Vec<GruCell>,
    wq: BilinearMap,
    wk: BilinearMap,
    value_q: BilinearMap,
    value_pi: BilinearMap,
    pi_head: Vec<Mlp>,
    q_head: Vec<Mlp>,
}

/// Trunk activations shared by both branches of one forward pass.
pub struct TrunkCache {
    emb_caches: Vec<MlpCache>,
    gru_caches: Vec<GruCache>,
    /// Final per-agent embeddings `(B, H)`.
    pub h: Vec<Array2<f64>>,
    qs: Vec<Array2<f64>>,
    ks: Vec<Array2<f64>>,
    /// Attention rows per agent: `(B, N)`, diagonal column zero.
    pub weights: Vec<Array2<f64>>,
}

pub struct PolicyForward {
    pub trunk: TrunkCache,
    values: Vec<Array2<f64>>,
    head_caches: Vec<MlpCache>,
    pub logits: Vec<Array2<f64>>,
    pub mask: Vec<Array2<bool>>,
    /// Masked log-softmax per agent `(B, A)`; unavailable entries are `-inf`.
    pub logp: Vec<Array2<f64>>,
}

pub struct QForward {
    pub trunk: TrunkCache,
    values: Vec<Array2<f64>>,
    head_caches: Vec<MlpCache>,
    /// Per-agent Q values for every own action `(B, A)`.
    pub q: Vec<Array2<f64>>,
}

impl AttentiveStack {
    pub fn new(cfg: StackConfig, rng: &mut impl Rng) -> Self {
        assert!(cfg.n_agents >= 1);
        let emb = (0..cfg.n_agents)
            .map(|_| Mlp::new(cfg.obs_dim, cfg.embed_hidden, cfg.embed_dim, rng))
            .collect();
        let gru = if cfg.use_gru {
            (0..cfg.n_agents)
                .map(|_| GruCell::new(cfg.embed_dim, cfg.embed_dim, rng))
                .collect()
        } else {
            Vec::new()
        };
        Self {
            emb,
            gru,
            wq: BilinearMap::new(cfg.embed_dim, rng),
            wk: BilinearMap::new(cfg.embed_dim, rng),
            value_q: BilinearMap::new(cfg.embed_dim, rng),
            value_pi: BilinearMap::new(cfg.embed_dim, rng),
            pi_head: (0..cfg.n_agents)
                .map(|_| Mlp::new(2 * cfg.embed_dim, cfg.head_hidden, cfg.n_actions, rng))
                .collect(),
            q_head: (0..cfg.n_agents)
                .map(|_| Mlp::new(cfg.q_input_dim(), cfg.head_hidden, cfg.n_actions, rng))
                .collect(),
            cfg,
        }
    }

    /// Fresh zero recurrent state, one `(B, H)` array per agent.
    pub fn zero_hidden(&self, batch: usize) -> Vec<Array2<f64>> {
        (0..self.cfg.n_agents)
            .map(|_| Array2::zeros((batch, self.cfg.embed_dim)))
            .collect()
    }

    fn trunk_forward(&self, obs: &[Array2<f64>], hidden: Option<&[Array2<f64>]>) -> TrunkCache {
        let n = self.cfg.n_agents;
        assert_eq!(obs.len(), n, "expected one observation batch per agent");
        let mut emb_caches = Vec::with_capacity(n);
        let mut gru_caches = Vec::with_capacity(n);
        let mut h = Vec::with_capacity(n);
        let zero;
        let states = if self.cfg.use_gru {
            match hidden {
                Some(s) => s,
                None => {
                    zero = self.zero_hidden(obs[0].nrows());
                    &zero
                }
            }
        } else {
            &[]
        };
        for i in 0..n {
            let (m, c) = self.emb[i].forward(&obs[i]);
            emb_caches.push(c);
            if self.cfg.use_gru {
                let (hi, gc) = self.gru[i].forward(&m, &states[i]);
                gru_caches.push(gc);
                h.push(hi);
            } else {
                h.push(m);
            }
        }
        let (qs, ks, weights) = if n >= 2 {
            batched_attention(&h, &self.wq.w, &self.wk.w)
        } else {
            (Vec::new(), Vec::new(), Vec::new())
        };
        TrunkCache {
            emb_caches,
            gru_caches,
            h,
            qs,
            ks,
            weights,
        }
    }

    /// Context vectors `x_i = sum_{j != i} w_ij (V h_j)` for one value map.
    fn aggregate(&self, trunk: &TrunkCache, value: &BilinearMap) -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
        let n = self.cfg.n_agents;
        let b = trunk.h[0].nrows();
        let dim = self.cfg.embed_dim;
        if n == 1 {
            // no peers: zero context
            return (vec![Array2::zeros((b, dim))], vec![Array2::zeros((b, dim))]);
        }
        let values: Vec<Array2<f64>> = trunk.h.iter().map(|hj| value.forward(hj)).collect();
        let mut contexts = Vec::with_capacity(n);
        for i in 0..n {
            let mut x = Array2::zeros((b, dim));
            for j in 0..n {
                if j == i {
                    continue;
                }
                let w_col = trunk.weights[i].column(j);
                for bi in 0..b {
                    let w = w_col[bi];
                    if w == 0.0 {
                        continue;
                    }
                    for d in 0..dim {
                        x[[bi, d]] += w * values[j][[bi, d]];
                    }
                }
            }
            contexts.push(x);
        }
        (values, contexts)
    }

    /// Policy branch. `mask` limits each agent's action support; `None`
    /// means everything available.
    pub fn policy_forward(
        &self,
        obs: &[Array2<f64>],
        mask: Option<&[Array2<bool>]>,
        hidden: Option<&[Array2<f64>]>,
    ) -> PolicyForward {
        let n = self.cfg.n_agents;
        let b = obs[0].nrows();
        let trunk = self.trunk_forward(obs, hidden);
        let (values, contexts) = self.aggregate(&trunk, &self.value_pi);
        let mut head_caches = Vec::with_capacity(n);
        let mut logits = Vec::with_capacity(n);
        let mut masks = Vec::with_capacity(n);
        let mut logp = Vec::with_capacity(n);
        for i in 0..n {
            let input = concatenate(Axis(1), &[trunk.h[i].view(), contexts[i].view()]).unwrap();
            let (out, cache) = self.pi_head[i].forward(&input);
            let m = match mask {
                Some(ms) => ms[i].clone(),
                None => Array2::from_elem((b, self.cfg.n_actions), true),
            };
            logp.push(masked_log_softmax(&out, &m));
            logits.push(out);
            masks.push(m);
            head_caches.push(cache);
        }
        PolicyForward {
            trunk,
            values,
            head_caches,
            logits,
            mask: masks,
            logp,
        }
    }

    /// Q branch: values for every own action given the other agents'
    /// committed actions (`joint_actions` is `(B, N)`).
    pub fn q_forward(
        &self,
        obs: &[Array2<f64>],
        joint_actions: &Array2<usize>,
        hidden: Option<&[Array2<f64>]>,
    ) -> QForward {
        let n = self.cfg.n_agents;
        let b = obs[0].nrows();
        assert_eq!(joint_actions.dim(), (b, n));
        let trunk = self.trunk_forward(obs, hidden);
        let (values, contexts) = self.aggregate(&trunk, &self.value_q);
        let a = self.cfg.n_actions;
        let mut head_caches = Vec::with_capacity(n);
        let mut q = Vec::with_capacity(n);
        for i in 0..n {
            let mut others = Array2::zeros((b, a * (n - 1)));
            let mut col = 0;
            for j in 0..n {
                if j == i {
                    continue;
                }
                for bi in 0..b {
                    others[[bi, col + joint_actions[[bi, j]]]] = 1.0;
                }
                col += a;
            }
            let input = concatenate(
                Axis(1),
                &[trunk.h[i].view(), contexts[i].view(), others.view()],
            )
            .unwrap();
            let (out, cache) = self.q_head[i].forward(&input);
            q.push(out);
            head_caches.push(cache);
        }
        QForward {
            trunk,
            values,
            head_caches,
            q,
        }
    }

    /// Backprop the policy branch from per-agent logit gradients.
    pub fn policy_backward(&mut self, fwd: &PolicyForward, g_logits: &[Array2<f64>]) {
        let n = self.cfg.n_agents;
        let dim = self.cfg.embed_dim;
        let mut gh: Vec<Array2<f64>> = fwd.trunk.h.iter().map(|h| Array2::zeros(h.dim())).collect();
        let mut gx: Vec<Array2<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            let g_in = self.pi_head[i].backward(&fwd.head_caches[i], &g_logits[i]);
            gh[i] += &g_in.slice(ndarray::s![.., ..dim]);
            gx.push(g_in.slice(ndarray::s![.., dim..2 * dim]).to_owned());
        }
        self.attention_backward(&fwd.trunk, &fwd.values, &gx, true, &mut gh);
        self.trunk_backward(&fwd.trunk, gh);
    }

    /// Backprop the Q branch from per-agent Q-value gradients.
    pub fn q_backward(&mut self, fwd: &QForward, g_q: &[Array2<f64>]) {
        let n = self.cfg.n_agents;
        let dim = self.cfg.embed_dim;
        let mut gh: Vec<Array2<f64>> = fwd.trunk.h.iter().map(|h| Array2::zeros(h.dim())).collect();
        let mut gx: Vec<Array2<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            let g_in = self.q_head[i].backward(&fwd.head_caches[i], &g_q[i]);
            gh[i] += &g_in.slice(ndarray::s![.., ..dim]);
            gx.push(g_in.slice(ndarray::s![.., dim..2 * dim]).to_owned());
            // gradient w.r.t. the one-hot action inputs is discarded
        }
        self.attention_backward(&fwd.trunk, &fwd.values, &gx, false, &mut gh);
        self.trunk_backward(&fwd.trunk, gh);
    }

    /// Chain context gradients through the weighted sum, the softmax, and
    /// the query/key/value maps, accumulating embedding gradients into `gh`.
    fn attention_backward(
        &mut self,
        trunk: &TrunkCache,
        values: &[Array2<f64>],
        gx: &[Array2<f64>],
        policy_branch: bool,
        gh: &mut [Array2<f64>],
    ) {
        let n = self.cfg.n_agents;
        if n < 2 {
            return;
        }
        let b = trunk.h[0].nrows();
        let dim = self.cfg.embed_dim;
        let mut gv: Vec<Array2<f64>> = (0..n).map(|_| Array2::zeros((b, dim))).collect();
        let mut gq: Vec<Array2<f64>> = (0..n).map(|_| Array2::zeros((b, dim))).collect();
        let mut gk: Vec<Array2<f64>> = (0..n).map(|_| Array2::zeros((b, dim))).collect();
        for i in 0..n {
            // d loss / d w_ij, then softmax Jacobian to logits
            let mut gw = Array2::zeros((b, n));
            for j in 0..n {
                if j == i {
                    continue;
                }
                for bi in 0..b {
                    let mut dot = 0.0;
                    for d in 0..dim {
                        dot += gx[i][[bi, d]] * values[j][[bi, d]];
                        gv[j][[bi, d]] += trunk.weights[i][[bi, j]] * gx[i][[bi, d]];
                    }
                    gw[[bi, j]] = dot;
                }
            }
            for bi in 0..b {
                let mut s = 0.0;
                for j in 0..n {
                    s += trunk.weights[i][[bi, j]] * gw[[bi, j]];
                }
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let g_logit = trunk.weights[i][[bi, j]] * (gw[[bi, j]] - s);
                    if g_logit == 0.0 {
                        continue;
                    }
                    for d in 0..dim {
                        gq[i][[bi, d]] += g_logit * trunk.ks[j][[bi, d]];
                        gk[j][[bi, d]] += g_logit * trunk.qs[i][[bi, d]];
                    }
                }
            }
        }
        let value_map = if policy_branch {
            &mut self.value_pi
        } else {
            &mut self.value_q
        };
        for j in 0..n {
            gh[j] += &value_map.backward(&trunk.h[j], &gv[j]);
            gh[j] += &self.wk.backward(&trunk.h[j], &gk[j]);
        }
        for i in 0..n {
            gh[i] += &self.wq.backward(&trunk.h[i], &gq[i]);
        }
    }

    fn trunk_backward(&mut self, trunk: &TrunkCache, gh: Vec<Array2<f64>>) {
        for (i, g) in gh.into_iter().enumerate() {
            if self.cfg.use_gru {
                let gm = self.gru[i].backward(&trunk.gru_caches[i], &g);
                self.emb[i].backward(&trunk.emb_caches[i], &gm);
            } else {
                self.emb[i].backward(&trunk.emb_caches[i], &g);
            }
        }
    }

    /// Attention rows summed over an observation batch: entry `(i, j)` is
    /// the accumulated weight of agent `i` toward agent `j`.
    pub fn accumulate_attention(
        &self,
        obs: &[Array2<f64>],
        hidden: Option<&[Array2<f64>]>,
    ) -> Array2<f64> {
        let n = self.cfg.n_agents;
        let trunk = self.trunk_forward(obs, hidden);
        let mut acc = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                if j != i {
                    acc[[i, j]] = trunk.weights[i].column(j).sum();
                }
            }
        }
        acc
    }
}

impl ParamSet for AttentiveStack {
    fn visit_tensors(&mut self, f: &mut dyn FnMut(TensorRef<'_>)) {
        for e in &mut self.emb {
            e.visit_tensors(f);
        }
        for g in &mut self.gru {
            g.visit_tensors(f);
        }
        self.wq.visit_tensors(f);
        self.wk.visit_tensors(f);
        self.value_q.visit_tensors(f);
        self.value_pi.visit_tensors(f);
        for h in &mut self.pi_head {
            h.visit_tensors(f);
        }
        for h in &mut self.q_head {
            h.visit_tensors(f);
        }
    }
}

/// Serializable parameter snapshot of a stack.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StackSnapshot {
    pub cfg: StackConfig,
    pub params: Vec<f64>,
}

impl StackSnapshot {
    pub fn capture(stack: &AttentiveStack) -> Self {
        let mut clone = stack.clone();
        Self {
            cfg: stack.cfg,
            params: clone.param_values(),
        }
    }

    pub fn restore(&self) -> AttentiveStack {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        use rand::SeedableRng;
        let mut stack = AttentiveStack::new(self.cfg, &mut rng);
        stack.set_param_values(&self.params);
        stack
    }
}

/// Gradient of `sum_b coeff[b] * logp[b, chosen[b]]` with respect to the raw
/// logits of one agent, scaled by `scale`. Rows with `coeff == 0` are skipped
/// outright so fully-masked batches produce exactly-zero gradients.
pub fn log_prob_grad(
    logp: &Array2<f64>,
    mask: &Array2<bool>,
    chosen: &[usize],
    coeff: &[f64],
    scale: f64,
) -> Array2<f64> {
    let (b, a) = logp.dim();
    assert_eq!(chosen.len(), b);
    assert_eq!(coeff.len(), b);
    let mut g = Array2::zeros((b, a));
    for bi in 0..b {
        let c = coeff[bi] * scale;
        if c == 0.0 {
            continue;
        }
        for j in 0..a {
            if mask[[bi, j]] {
                let p = logp[[bi, j]].exp();
                let indicator = if j == chosen[bi] { 1.0 } else { 0.0 };
                g[[bi, j]] = c * (indicator - p);
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::attention_weights;
    use crate::nn::sample_masked_rows;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(n_agents: usize, use_gru: bool) -> StackConfig {
        StackConfig {
            n_agents,
            obs_dim: 2,
            embed_hidden: 8,
            embed_dim: 4,
            head_hidden: 8,
            n_actions: 3,
            use_gru,
        }
    }

    fn random_obs(rng: &mut ChaCha8Rng, n: usize, b: usize, d: usize) -> Vec<Array2<f64>> {
        (0..n)
            .map(|_| Array2::from_shape_fn((b, d), |_| rng.gen_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn policy_and_q_attention_are_bitwise_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stack = AttentiveStack::new(small_cfg(3, false), &mut rng);
        let obs = random_obs(&mut rng, 3, 5, 2);
        let actions = Array2::zeros((5, 3));
        let p = stack.policy_forward(&obs, None, None);
        let q = stack.q_forward(&obs, &actions, None);
        for i in 0..3 {
            assert_eq!(p.trunk.weights[i], q.trunk.weights[i]);
        }
    }

    #[test]
    fn stack_attention_matches_standalone_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stack = AttentiveStack::new(small_cfg(3, false), &mut rng);
        let obs = random_obs(&mut rng, 3, 1, 2);
        let fwd = stack.policy_forward(&obs, None, None);
        // standalone route over the same embeddings
        let mut emb = Array2::zeros((3, 4));
        for i in 0..3 {
            for d in 0..4 {
                emb[[i, d]] = fwd.trunk.h[i][[0, d]];
            }
        }
        let w = attention_weights(&emb, &stack.wq.w, &stack.wk.w).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(w.0[[i, j]], fwd.trunk.weights[i][[0, j]]);
            }
        }
    }

    #[test]
    fn masked_slots_get_zero_probability_and_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let stack = AttentiveStack::new(small_cfg(2, false), &mut rng);
        let obs = random_obs(&mut rng, 2, 4, 2);
        let mut mask = vec![Array2::from_elem((4, 3), true); 2];
        for b in 0..4 {
            mask[0][[b, 1]] = false;
        }
        let fwd = stack.policy_forward(&obs, Some(&mask), None);
        for b in 0..4 {
            assert_eq!(fwd.logp[0][[b, 1]], f64::NEG_INFINITY);
        }
        let g = log_prob_grad(&fwd.logp[0], &fwd.mask[0], &[0, 0, 2, 2], &[1.0; 4], 1.0);
        for b in 0..4 {
            assert_eq!(g[[b, 1]], 0.0);
        }
    }

    #[test]
    fn zero_coefficients_give_bitwise_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut stack = AttentiveStack::new(small_cfg(2, false), &mut rng);
        let obs = random_obs(&mut rng, 2, 4, 2);
        let fwd = stack.policy_forward(&obs, None, None);
        let g: Vec<Array2<f64>> = (0..2)
            .map(|i| log_prob_grad(&fwd.logp[i], &fwd.mask[i], &[0; 4], &[0.0; 4], 1.0))
            .collect();
        stack.zero_grads();
        stack.policy_backward(&fwd, &g);
        assert!(stack.param_grads().iter().all(|&g| g == 0.0));
    }

    fn policy_surrogate_loss(
        stack: &AttentiveStack,
        obs: &[Array2<f64>],
        chosen: &[Vec<usize>],
        coeff: &[Vec<f64>],
    ) -> f64 {
        let fwd = stack.policy_forward(obs, None, None);
        let mut loss = 0.0;
        for i in 0..stack.cfg.n_agents {
            for (b, (&a, &c)) in chosen[i].iter().zip(coeff[i].iter()).enumerate() {
                loss += c * fwd.logp[i][[b, a]];
            }
        }
        loss
    }

    #[test]
    fn policy_backward_matches_finite_differences() {
        for use_gru in [false, true] {
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            let mut stack = AttentiveStack::new(small_cfg(3, use_gru), &mut rng);
            let obs = random_obs(&mut rng, 3, 4, 2);
            let chosen: Vec<Vec<usize>> = (0..3)
                .map(|_| (0..4).map(|_| rng.gen_range(0..3)).collect())
                .collect();
            let coeff: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();

            let fwd = stack.policy_forward(&obs, None, None);
            let g: Vec<Array2<f64>> = (0..3)
                .map(|i| log_prob_grad(&fwd.logp[i], &fwd.mask[i], &chosen[i], &coeff[i], 1.0))
                .collect();
            stack.zero_grads();
            stack.policy_backward(&fwd, &g);
            let analytic = stack.param_grads();
            let theta0 = stack.param_values();
            let eps = 1e-5;
            let mut worst = 0.0f64;
            for idx in (0..theta0.len()).step_by(23) {
                let mut th = theta0.clone();
                th[idx] += eps;
                stack.set_param_values(&th);
                let lp = policy_surrogate_loss(&stack, &obs, &chosen, &coeff);
                th[idx] -= 2.0 * eps;
                stack.set_param_values(&th);
                let lm = policy_surrogate_loss(&stack, &obs, &chosen, &coeff);
                stack.set_param_values(&theta0);
                let fd = (lp - lm) / (2.0 * eps);
                let rel = (fd - analytic[idx]).abs() / fd.abs().max(analytic[idx].abs()).max(1e-6);
                worst = worst.max(rel);
            }
            assert!(worst < 1e-5, "use_gru={use_gru}: worst rel err {worst}");
        }
    }

    #[test]
    fn q_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut stack = AttentiveStack::new(small_cfg(2, false), &mut rng);
        let obs = random_obs(&mut rng, 2, 4, 2);
        let actions = Array2::from_shape_fn((4, 2), |_| rng.gen_range(0..3));
        let targets: Vec<Array2<f64>> = (0..2)
            .map(|_| Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let loss = |stack: &AttentiveStack| -> f64 {
            let fwd = stack.q_forward(&obs, &actions, None);
            (0..2)
                .map(|i| (&fwd.q[i] - &targets[i]).mapv(|v| v * v).sum())
                .sum()
        };
        let fwd = stack.q_forward(&obs, &actions, None);
        let g: Vec<Array2<f64>> = (0..2)
            .map(|i| 2.0 * (&fwd.q[i] - &targets[i]))
            .collect();
        stack.zero_grads();
        stack.q_backward(&fwd, &g);
        let analytic = stack.param_grads();
        let theta0 = stack.param_values();
        let eps = 1e-5;
        for idx in (0..theta0.len()).step_by(31) {
            let mut th = theta0.clone();
            th[idx] += eps;
            stack.set_param_values(&th);
            let lp = loss(&stack);
            th[idx] -= 2.0 * eps;
            stack.set_param_values(&th);
            let lm = loss(&stack);
            stack.set_param_values(&theta0);
            let fd = (lp - lm) / (2.0 * eps);
            let rel = (fd - analytic[idx]).abs() / fd.abs().max(analytic[idx].abs()).max(1e-6);
            assert!(rel < 1e-5, "coord {idx}: fd={fd} got={}", analytic[idx]);
        }
    }

    #[test]
    fn single_agent_stack_runs_without_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let stack = AttentiveStack::new(small_cfg(1, false), &mut rng);
        let obs = random_obs(&mut rng, 1, 2, 2);
        let fwd = stack.policy_forward(&obs, None, None);
        let total: f64 = (0..3).map(|j| fwd.logp[0][[0, j]].exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let picks = sample_masked_rows(&fwd.logp[0], &fwd.mask[0], &mut rng);
        assert!(picks[0] < 3);
    }

    #[test]
    fn snapshot_roundtrip_preserves_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let stack = AttentiveStack::new(small_cfg(2, true), &mut rng);
        let obs = random_obs(&mut rng, 2, 3, 2);
        let snap = StackSnapshot::capture(&stack);
        let restored = snap.restore();
        let a = stack.policy_forward(&obs, None, None);
        let b = restored.policy_forward(&obs, None, None);
        for i in 0..2 {
            assert_eq!(a.logits[i], b.logits[i]);
        }
    }
}
