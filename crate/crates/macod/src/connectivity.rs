//! Connectivity function learning for a sub-group's joint observation space.
//!
//! A small scalar network `f` is fit on observed joint transitions so that
//! its level sets track the second Laplacian eigenfunction of the underlying
//! state graph: the squared-difference term pulls connected states together
//! and the regularizer keeps `f` spread with zero mean. The k-th percentile
//! of `f` over the training states becomes the termination threshold, and
//! `f` differences along transitions supply an intrinsic exploration reward.

use crate::nn::{Adam, Mlp, ParamSet};
use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConnectivityError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("need at least {need} transitions, got {got}")]
    TooFewTransitions { need: usize, got: usize },
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("observation dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Joint-observation transition pairs for one sub-group, row-aligned.
#[derive(Clone, Debug)]
pub struct GroupTransitionSet {
    pub obs: Array2<f64>,
    pub next_obs: Array2<f64>,
}

impl GroupTransitionSet {
    pub fn new(obs: Array2<f64>, next_obs: Array2<f64>) -> Result<Self, ConnectivityError> {
        if obs.dim() != next_obs.dim() {
            return Err(ConnectivityError::DimensionMismatch {
                expected: obs.ncols(),
                got: next_obs.ncols(),
            });
        }
        Ok(Self { obs, next_obs })
    }

    pub fn len(&self) -> usize {
        self.obs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.obs.ncols()
    }

    /// Every state appearing in the set (both endpoints, with multiplicity).
    pub fn state_pool(&self) -> Array2<f64> {
        ndarray::concatenate(Axis(0), &[self.obs.view(), self.next_obs.view()]).unwrap()
    }
}

/// Scalar connectivity function over a fixed-dimension joint observation.
#[derive(Clone, Debug)]
pub struct ConnectivityFn {
    net: Mlp,
    pub obs_dim: usize,
    pub hidden: usize,
}

impl ConnectivityFn {
    pub fn new(obs_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            net: Mlp::new(obs_dim, hidden, 1, rng),
            obs_dim,
            hidden,
        }
    }

    pub fn eval_batch(&self, obs: &Array2<f64>) -> Array1<f64> {
        self.net.eval(obs).index_axis(Axis(1), 0).to_owned()
    }

    pub fn eval(&self, obs: &[f64]) -> f64 {
        let x = Array2::from_shape_vec((1, obs.len()), obs.to_vec()).unwrap();
        self.net.eval(&x)[[0, 0]]
    }

    /// Flips the sign of the function exactly by negating the output layer.
    pub fn negate_output(&mut self) {
        self.net.l2.w.mapv_inplace(|v| -v);
        self.net.l2.b.mapv_inplace(|v| -v);
    }
}

impl ParamSet for ConnectivityFn {
    fn visit_tensors(&mut self, f: &mut dyn FnMut(crate::nn::TensorRef<'_>)) {
        self.net.visit_tensors(f);
    }
}

/// Serializable parameter snapshot.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConnectivitySnapshot {
    pub obs_dim: usize,
    pub hidden: usize,
    pub params: Vec<f64>,
}

impl ConnectivitySnapshot {
    pub fn capture(f: &ConnectivityFn) -> Self {
        let mut c = f.clone();
        Self {
            obs_dim: f.obs_dim,
            hidden: f.hidden,
            params: c.param_values(),
        }
    }

    pub fn restore(&self) -> ConnectivityFn {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut f = ConnectivityFn::new(self.obs_dim, self.hidden, &mut rng);
        f.set_param_values(&self.params);
        f
    }
}

/// Training hyperparameters for [`fit`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConnectivityHyper {
    /// Weight of the spread/orthogonality regularizer.
    pub reg_weight: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub hidden: usize,
}

impl Default for ConnectivityHyper {
    fn default() -> Self {
        Self {
            reg_weight: 1.0,
            learning_rate: 1e-3,
            batch_size: 128,
            steps: 5000,
            hidden: 64,
        }
    }
}

/// The loss formula on already-evaluated values:
/// `1/2 mean[(fo - fo')^2] + eta * mean[(fu^2 - 1)(fv^2 - 1) + 2 fu fv]`.
pub fn loss_from_values(
    f_obs: &Array1<f64>,
    f_next: &Array1<f64>,
    f_u: &Array1<f64>,
    f_v: &Array1<f64>,
    reg_weight: f64,
) -> f64 {
    let diff = 0.5 * (f_obs - f_next).mapv(|d| d * d).mean().unwrap();
    let reg = f_u
        .iter()
        .zip(f_v.iter())
        .map(|(&u, &v)| (u * u - 1.0) * (v * v - 1.0) + 2.0 * u * v)
        .sum::<f64>()
        / f_u.len() as f64;
    diff + reg_weight * reg
}

/// Evaluates the training loss of `f` on a transition batch plus
/// independently drawn state pairs `(u, v)` from the marginal.
pub fn connectivity_loss(
    f: &ConnectivityFn,
    transitions: &GroupTransitionSet,
    rho_u: &Array2<f64>,
    rho_v: &Array2<f64>,
    reg_weight: f64,
) -> Result<f64, ConnectivityError> {
    if transitions.is_empty() || rho_u.nrows() == 0 {
        return Err(ConnectivityError::EmptyBatch);
    }
    let fo = f.eval_batch(&transitions.obs);
    let fn_ = f.eval_batch(&transitions.next_obs);
    let fu = f.eval_batch(rho_u);
    let fv = f.eval_batch(rho_v);
    Ok(loss_from_values(&fo, &fn_, &fu, &fv, reg_weight))
}

/// Loss plus accumulated parameter gradients for one batch.
pub(crate) fn loss_and_grad(
    f: &mut ConnectivityFn,
    obs: &Array2<f64>,
    next_obs: &Array2<f64>,
    rho_u: &Array2<f64>,
    rho_v: &Array2<f64>,
    reg_weight: f64,
) -> f64 {
    let bt = obs.nrows() as f64;
    let br = rho_u.nrows() as f64;
    let (yo, co) = f.net.forward(obs);
    let (yn, cn) = f.net.forward(next_obs);
    let (yu, cu) = f.net.forward(rho_u);
    let (yv, cv) = f.net.forward(rho_v);
    let fo = yo.index_axis(Axis(1), 0).to_owned();
    let fn_ = yn.index_axis(Axis(1), 0).to_owned();
    let fu = yu.index_axis(Axis(1), 0).to_owned();
    let fv = yv.index_axis(Axis(1), 0).to_owned();
    let loss = loss_from_values(&fo, &fn_, &fu, &fv, reg_weight);

    let d = (&fo - &fn_) / bt;
    let g_fo = d.clone().insert_axis(Axis(1));
    let g_fn = (-d).insert_axis(Axis(1));
    let g_fu = fu
        .iter()
        .zip(fv.iter())
        .map(|(&u, &v)| reg_weight * (2.0 * u * (v * v - 1.0) + 2.0 * v) / br)
        .collect::<Array1<f64>>()
        .insert_axis(Axis(1));
    let g_fv = fv
        .iter()
        .zip(fu.iter())
        .map(|(&v, &u)| reg_weight * (2.0 * v * (u * u - 1.0) + 2.0 * u) / br)
        .collect::<Array1<f64>>()
        .insert_axis(Axis(1));

    f.net.backward(&co, &g_fo);
    f.net.backward(&cn, &g_fn);
    f.net.backward(&cu, &g_fu);
    f.net.backward(&cv, &g_fv);
    loss
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Loss sampled every `steps / 20` updates.
    pub curve: Vec<f64>,
    /// Whether the sign was flipped to orient low values toward
    /// rarely-visited states.
    pub flipped: bool,
}

/// Fits a fresh connectivity function on `transitions` by minibatch descent.
/// Marginal pairs are drawn uniformly from the states appearing in the set.
pub fn fit(
    transitions: &GroupTransitionSet,
    hyper: &ConnectivityHyper,
    rng: &mut impl Rng,
) -> Result<(ConnectivityFn, FitReport), ConnectivityError> {
    if transitions.len() < hyper.batch_size.min(1).max(1) || transitions.is_empty() {
        return Err(ConnectivityError::TooFewTransitions {
            need: 1,
            got: transitions.len(),
        });
    }
    let mut f = ConnectivityFn::new(transitions.dim(), hyper.hidden, rng);
    let mut opt = Adam::new(hyper.learning_rate);
    let pool = transitions.state_pool();
    let n = transitions.len();
    let np = pool.nrows();
    let b = hyper.batch_size.min(n);
    let mut initial_loss = f64::NAN;
    let mut last = f64::NAN;
    let mut curve = Vec::new();
    let log_every = (hyper.steps / 20).max(1);
    for step in 0..hyper.steps {
        let idx: Vec<usize> = (0..b).map(|_| rng.gen_range(0..n)).collect();
        let obs = select_rows(&transitions.obs, &idx);
        let next = select_rows(&transitions.next_obs, &idx);
        let iu: Vec<usize> = (0..b).map(|_| rng.gen_range(0..np)).collect();
        let iv: Vec<usize> = (0..b).map(|_| rng.gen_range(0..np)).collect();
        let u = select_rows(&pool, &iu);
        let v = select_rows(&pool, &iv);
        f.zero_grads();
        let loss = loss_and_grad(&mut f, &obs, &next, &u, &v, hyper.reg_weight);
        if !loss.is_finite() {
            return Err(ConnectivityError::Diverged { step, loss });
        }
        opt.step(&mut f);
        if step == 0 {
            initial_loss = loss;
        }
        if step % log_every == 0 {
            curve.push(loss);
        }
        last = loss;
    }
    let flipped = orient_low_to_rare(&mut f, &pool);
    Ok((
        f,
        FitReport {
            initial_loss,
            final_loss: last,
            curve,
            flipped,
        },
    ))
}

/// Orients `f` so that rarely-visited states carry the low values.
///
/// The training loss is symmetric under `f -> -f`, but the termination set
/// is the low-value region and is meant to cover the less-explored states.
/// The regularizer drives the visitation-weighted mean of `f` to zero, so a
/// positive mean over *unique* states means the rare states sit at the
/// positive extreme; flip in that case. Returns whether a flip happened.
fn orient_low_to_rare(f: &mut ConnectivityFn, pool: &Array2<f64>) -> bool {
    use std::collections::HashSet;
    let values = f.eval_batch(pool);
    let mut seen: HashSet<Vec<u64>> = HashSet::new();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (r, v) in values.iter().enumerate() {
        let key: Vec<u64> = pool.row(r).iter().map(|x| x.to_bits()).collect();
        if seen.insert(key) {
            sum += v;
            count += 1;
        }
    }
    if count > 0 && sum / count as f64 > 0.0 {
        f.negate_output();
        true
    } else {
        false
    }
}

pub(crate) fn select_rows(m: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), m.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&m.row(i));
    }
    out
}

/// Termination threshold at a percentile of observed connectivity values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TerminationRule {
    pub threshold: f64,
    pub percentile: f64,
}

/// Linear-interpolation percentile of a value list.
pub fn percentile_linear(values: &mut [f64], k: f64) -> f64 {
    assert!(!values.is_empty());
    assert!((0.0..=100.0).contains(&k));
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = k / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        values[lo]
    } else {
        let frac = rank - lo as f64;
        values[lo] + frac * (values[hi] - values[lo])
    }
}

/// `beta' = k`-th percentile of `f` over every state in the transition set.
pub fn percentile_threshold(
    f: &ConnectivityFn,
    transitions: &GroupTransitionSet,
    k: f64,
) -> TerminationRule {
    let pool = transitions.state_pool();
    let mut values: Vec<f64> = f.eval_batch(&pool).to_vec();
    TerminationRule {
        threshold: percentile_linear(&mut values, k),
        percentile: k,
    }
}

/// Termination indicator: 1 iff `f(obs) < beta'`. The initiation predicate
/// is the exact complement, so the boundary belongs to the initiation set.
pub fn beta(rule: &TerminationRule, f: &ConnectivityFn, obs: &[f64]) -> bool {
    f.eval(obs) < rule.threshold
}

/// Relabeled reward `r_env + eta * (f(o_t) - f(o_{t+1}))`.
pub fn intrinsic_reward(
    f: &ConnectivityFn,
    obs_t: &[f64],
    obs_t1: &[f64],
    r_env: f64,
    intrinsic_weight: f64,
) -> f64 {
    r_env + intrinsic_weight * (f.eval(obs_t) - f.eval(obs_t1))
}
