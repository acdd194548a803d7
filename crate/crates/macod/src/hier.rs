//! Hierarchical attentive soft actor-critic over option slots.
//!
//! The critic target resamples an agent's next option from the target
//! high-level policy only where that agent's current option terminated
//! (`beta = 1`); otherwise the running option is carried over and the
//! entropy term vanishes. The actor gradient is masked per agent by the
//! initiation flag, so steps where the high-level policy was not executed
//! contribute exactly zero gradient.

use crate::flat::{LearnerSnapshot, SacHyper, TrainError};
use crate::nn::{soft_update, Adam, ParamSet};
use crate::stack::{log_prob_grad, AttentiveStack, StackConfig};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Batch of hierarchical transitions plus current-option-set availability
/// masks at both endpoints (one `(B, n_slots)` mask per agent).
pub struct HierBatch {
    pub obs: Vec<Array2<f64>>,
    /// Option slot held at `t`, `(B, N)`.
    pub options: Array2<usize>,
    /// Initiation flags at `t`, `(B, N)`.
    pub init: Array2<bool>,
    pub rewards: Array2<f64>,
    pub next_obs: Vec<Array2<f64>>,
    /// Termination flags of the held option at `t+1`, `(B, N)`.
    pub beta: Array2<bool>,
    pub avail: Vec<Array2<bool>>,
    pub avail_next: Vec<Array2<bool>>,
}

impl HierBatch {
    pub fn len(&self) -> usize {
        self.options.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Counters describing one critic target assembly.
#[derive(Clone, Copy, Debug, Default)]
pub struct AssemblyAudit {
    pub elements: usize,
    pub resampled: usize,
    pub carried: usize,
    /// Entries whose next option differs from the held option without a
    /// termination flag; must stay zero.
    pub changed_without_beta: usize,
}

pub struct HierLearner {
    pub stack: AttentiveStack,
    pub target: AttentiveStack,
    pub hyper: SacHyper,
    opt_q: Adam,
    opt_pi: Adam,
}

impl HierLearner {
    pub fn new(cfg: StackConfig, hyper: SacHyper, rng: &mut impl Rng) -> Self {
        let stack = AttentiveStack::new(cfg, rng);
        let target = stack.clone();
        Self {
            stack,
            target,
            hyper,
            opt_q: Adam::new(hyper.learning_rate),
            opt_pi: Adam::new(hyper.learning_rate),
        }
    }

    fn n_agents(&self) -> usize {
        self.stack.cfg.n_agents
    }

    fn n_slots(&self) -> usize {
        self.stack.cfg.n_actions
    }

    /// Assembles the next joint option per the termination flags: resample
    /// from the target policy (masked to available slots) where beta = 1,
    /// carry the held option otherwise. Single-slot rows resolve without
    /// consuming randomness.
    pub fn assemble_next_options(
        &self,
        batch: &HierBatch,
        rng: &mut ChaCha8Rng,
    ) -> (Array2<usize>, Vec<Array2<f64>>, AssemblyAudit) {
        let n = self.n_agents();
        let b = batch.len();
        let pi_next = self
            .target
            .policy_forward(&batch.next_obs, Some(&batch.avail_next), None);
        let mut next_options = Array2::zeros((b, n));
        let mut audit = AssemblyAudit::default();
        for i in 0..n {
            for bi in 0..b {
                audit.elements += 1;
                if batch.beta[[bi, i]] {
                    let available: Vec<usize> = (0..self.n_slots())
                        .filter(|&s| batch.avail_next[i][[bi, s]])
                        .collect();
                    let pick = if available.len() == 1 {
                        available[0]
                    } else {
                        let u: f64 = rng.gen();
                        let mut acc = 0.0;
                        let mut chosen = available[available.len() - 1];
                        for &s in &available {
                            acc += pi_next.logp[i][[bi, s]].exp();
                            if u < acc {
                                chosen = s;
                                break;
                            }
                        }
                        chosen
                    };
                    next_options[[bi, i]] = pick;
                    audit.resampled += 1;
                } else {
                    next_options[[bi, i]] = batch.options[[bi, i]];
                    audit.carried += 1;
                }
                if next_options[[bi, i]] != batch.options[[bi, i]] && !batch.beta[[bi, i]] {
                    audit.changed_without_beta += 1;
                }
            }
        }
        let logp = pi_next.logp;
        (next_options, logp, audit)
    }

    /// One critic step; returns the loss and the target assembly audit.
    pub fn critic_update(
        &mut self,
        batch: &HierBatch,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, AssemblyAudit), TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let n = self.n_agents();
        let b = batch.len();
        let (next_options, logp_next, audit) = self.assemble_next_options(batch, rng);
        let q_next = self.target.q_forward(&batch.next_obs, &next_options, None);
        let h = &self.hyper;
        let mut targets = vec![vec![0.0; b]; n];
        for i in 0..n {
            for bi in 0..b {
                let w = next_options[[bi, i]];
                let entropy = if batch.beta[[bi, i]] {
                    h.alpha * logp_next[i][[bi, w]]
                } else {
                    0.0
                };
                targets[i][bi] =
                    batch.rewards[[bi, i]] + h.gamma * (q_next.q[i][[bi, w]] - entropy);
            }
        }

        let q = self.stack.q_forward(&batch.obs, &batch.options, None);
        let mut loss = 0.0;
        let mut grads: Vec<Array2<f64>> = (0..n)
            .map(|_| Array2::zeros((b, self.n_slots())))
            .collect();
        for i in 0..n {
            for bi in 0..b {
                let w = batch.options[[bi, i]];
                let err = q.q[i][[bi, w]] - targets[i][bi];
                loss += err * err / b as f64;
                grads[i][[bi, w]] = 2.0 * err / b as f64;
            }
        }
        if !loss.is_finite() {
            return Err(TrainError::NonFinite {
                what: "hierarchical critic loss",
                value: loss,
            });
        }
        self.stack.zero_grads();
        self.stack.q_backward(&q, &grads);
        self.opt_q.step(&mut self.stack);
        Ok((loss, audit))
    }

    /// One actor step with init-masked gradients; returns the surrogate
    /// loss over the initiating elements.
    pub fn policy_update(
        &mut self,
        batch: &HierBatch,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let n = self.n_agents();
        let b = batch.len();
        let pi = self
            .stack
            .policy_forward(&batch.obs, Some(&batch.avail), None);
        // resample where the high-level policy actually acted
        let mut sampled = Array2::zeros((b, n));
        for i in 0..n {
            for bi in 0..b {
                if batch.init[[bi, i]] {
                    let available: Vec<usize> = (0..self.n_slots())
                        .filter(|&s| batch.avail[i][[bi, s]])
                        .collect();
                    sampled[[bi, i]] = if available.len() == 1 {
                        available[0]
                    } else {
                        let u: f64 = rng.gen();
                        let mut acc = 0.0;
                        let mut chosen = available[available.len() - 1];
                        for &s in &available {
                            acc += pi.logp[i][[bi, s]].exp();
                            if u < acc {
                                chosen = s;
                                break;
                            }
                        }
                        chosen
                    };
                } else {
                    sampled[[bi, i]] = batch.options[[bi, i]];
                }
            }
        }
        let q = self.stack.q_forward(&batch.obs, &sampled, None);
        let h = &self.hyper;
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(n);
        for i in 0..n {
            let mut chosen = Vec::with_capacity(b);
            let mut coeff = Vec::with_capacity(b);
            for bi in 0..b {
                let w = sampled[[bi, i]];
                chosen.push(w);
                if !batch.init[[bi, i]] {
                    coeff.push(0.0);
                    continue;
                }
                // baseline over available slots only; the masked softmax
                // weights already sum to one over that support
                let mut baseline = 0.0;
                for s in 0..self.n_slots() {
                    if batch.avail[i][[bi, s]] {
                        baseline += pi.logp[i][[bi, s]].exp() * q.q[i][[bi, s]];
                    }
                }
                let logp = pi.logp[i][[bi, w]];
                let c = -h.alpha * logp + q.q[i][[bi, w]] - baseline;
                loss -= c * logp / b as f64;
                coeff.push(c);
            }
            grads.push(log_prob_grad(
                &pi.logp[i],
                &pi.mask[i],
                &chosen,
                &coeff,
                -1.0 / b as f64,
            ));
        }
        if !loss.is_finite() {
            return Err(TrainError::NonFinite {
                what: "hierarchical policy surrogate",
                value: loss,
            });
        }
        self.stack.zero_grads();
        self.stack.policy_backward(&pi, &grads);
        self.opt_pi.step(&mut self.stack);
        Ok(loss)
    }

    /// Gradient of the init-masked surrogate without applying an optimizer
    /// step; used by the masking audits and the gradient checker.
    pub fn policy_gradients(&mut self, batch: &HierBatch, sampled: &Array2<usize>) -> Vec<f64> {
        let n = self.n_agents();
        let b = batch.len();
        let pi = self
            .stack
            .policy_forward(&batch.obs, Some(&batch.avail), None);
        let q = self.stack.q_forward(&batch.obs, sampled, None);
        let mut grads = Vec::with_capacity(n);
        for i in 0..n {
            let mut chosen = Vec::with_capacity(b);
            let mut coeff = Vec::with_capacity(b);
            for bi in 0..b {
                let w = sampled[[bi, i]];
                chosen.push(w);
                if !batch.init[[bi, i]] {
                    coeff.push(0.0);
                    continue;
                }
                let mut baseline = 0.0;
                for s in 0..self.n_slots() {
                    if batch.avail[i][[bi, s]] {
                        baseline += pi.logp[i][[bi, s]].exp() * q.q[i][[bi, s]];
                    }
                }
                let logp = pi.logp[i][[bi, w]];
                coeff.push(-self.hyper.alpha * logp + q.q[i][[bi, w]] - baseline);
            }
            grads.push(log_prob_grad(
                &pi.logp[i],
                &pi.mask[i],
                &chosen,
                &coeff,
                -1.0 / b as f64,
            ));
        }
        self.stack.zero_grads();
        self.stack.policy_backward(&pi, &grads);
        self.stack.param_grads()
    }

    /// Init-masked surrogate for fixed sampled options and coefficients.
    pub fn policy_surrogate(
        &self,
        batch: &HierBatch,
        sampled: &Array2<usize>,
        coeff: &[Vec<f64>],
    ) -> f64 {
        let pi = self
            .stack
            .policy_forward(&batch.obs, Some(&batch.avail), None);
        let b = batch.len();
        let mut loss = 0.0;
        for i in 0..self.n_agents() {
            for bi in 0..b {
                let c = coeff[i][bi];
                if c != 0.0 {
                    loss -= c * pi.logp[i][[bi, sampled[[bi, i]]]] / b as f64;
                }
            }
        }
        loss
    }

    /// Gradients of [`Self::policy_surrogate`] for the same fixed inputs.
    pub fn policy_surrogate_grads(
        &mut self,
        batch: &HierBatch,
        sampled: &Array2<usize>,
        coeff: &[Vec<f64>],
    ) -> Vec<f64> {
        let pi = self
            .stack
            .policy_forward(&batch.obs, Some(&batch.avail), None);
        let b = batch.len();
        let grads: Vec<Array2<f64>> = (0..self.n_agents())
            .map(|i| {
                let chosen: Vec<usize> = (0..b).map(|bi| sampled[[bi, i]]).collect();
                log_prob_grad(&pi.logp[i], &pi.mask[i], &chosen, &coeff[i], -1.0 / b as f64)
            })
            .collect();
        self.stack.zero_grads();
        self.stack.policy_backward(&pi, &grads);
        self.stack.param_grads()
    }

    pub fn update_target(&mut self) {
        soft_update(&mut self.target, &mut self.stack, self.hyper.tau);
    }

    pub fn snapshot(&self) -> LearnerSnapshot {
        LearnerSnapshot {
            stack: crate::stack::StackSnapshot::capture(&self.stack),
            target: crate::stack::StackSnapshot::capture(&self.target),
            opt_q: self.opt_q.clone(),
            opt_pi: self.opt_pi.clone(),
            hyper: self.hyper,
        }
    }

    pub fn restore(snap: &LearnerSnapshot) -> Self {
        Self {
            stack: snap.stack.restore(),
            target: snap.target.restore(),
            hyper: snap.hyper,
            opt_q: snap.opt_q.clone(),
            opt_pi: snap.opt_pi.clone(),
        }
    }
}
