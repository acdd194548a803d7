//! Multi-agent covering option discovery.
//!
//! Per generation: divide the agents into sub-groups, project the replay
//! buffer onto each group, fit the group's connectivity function, place the
//! termination threshold at the configured percentile, and train the
//! group's intra-option policy off-policy on rewards relabeled with the
//! connectivity delta. Groups whose connectivity fit diverges are skipped
//! with a warning in the report; the remaining groups still produce options.

use crate::attention::GroupSet;
use crate::buffer::{BufferError, ReplayBuffer};
use crate::connectivity::{
    fit, percentile_threshold, ConnectivityHyper, FitReport, GroupTransitionSet,
};
use crate::flat::{FlatBatch, FlatLearner, SacHyper};
use crate::options::DiscoveredOption;
use crate::stack::StackConfig;
use ndarray::{Array2, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Knobs of the discovery process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryConfig {
    /// Termination percentile `k` of connectivity values.
    pub percentile_k: f64,
    /// Grouping threshold; `None` uses `1 / (N - 1)`.
    pub threshold_z: Option<f64>,
    /// Intrinsic reward weight on the connectivity delta.
    pub intrinsic_weight: f64,
    pub connectivity: ConnectivityHyper,
    /// Gradient steps for each group's intra-option policy.
    pub intra_steps: usize,
    pub intra_batch: usize,
    /// Episodes between generations.
    pub generation_interval: u64,
    /// Maximum number of generations.
    pub max_generations: u32,
    /// Minimum buffered transitions before discovery may run.
    pub min_buffer: usize,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            percentile_k: 10.0,
            threshold_z: None,
            intrinsic_weight: 1.0,
            connectivity: ConnectivityHyper::default(),
            intra_steps: 10_000,
            intra_batch: 256,
            generation_interval: 500,
            max_generations: 2,
            min_buffer: 5_000,
        }
    }
}

/// True iff a generation is due: the episode index (1-based) is a multiple
/// of the generation interval and the generation budget is not exhausted.
pub fn generation_gate(episode_index: u64, n_generations: u32, cfg: &DiscoveryConfig) -> bool {
    cfg.generation_interval > 0
        && episode_index % cfg.generation_interval == 0
        && n_generations < cfg.max_generations
}

/// Projects every buffered joint transition onto `group`, preserving order
/// and pairing.
pub fn extract_group_transitions(
    buffer: &ReplayBuffer,
    group: &[usize],
) -> Result<GroupTransitionSet, BufferError> {
    if buffer.is_empty() {
        return Err(BufferError::TooFew { need: 1, got: 0 });
    }
    let obs_dim: usize = group.iter().map(|&i| buffer.get(0).obs[i].len()).sum();
    let n = buffer.len();
    let mut obs = Array2::zeros((n, obs_dim));
    let mut next = Array2::zeros((n, obs_dim));
    for (r, t) in buffer.iter().enumerate() {
        let mut c = 0;
        for &i in group {
            for (k, &v) in t.obs[i].iter().enumerate() {
                obs[[r, c + k]] = v;
            }
            for (k, &v) in t.next_obs[i].iter().enumerate() {
                next[[r, c + k]] = v;
            }
            c += t.obs[i].len();
        }
    }
    Ok(GroupTransitionSet::new(obs, next).expect("matching dimensions by construction"))
}

/// Per-group summary of one discovery generation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: Vec<usize>,
    pub skipped: Option<String>,
    pub threshold: f64,
    pub percentile: f64,
    /// Fraction of buffered group states inside the termination set.
    pub termination_fraction: f64,
    pub fit: Option<FitReport>,
    pub intra_final_critic_loss: f64,
    pub intra_final_policy_loss: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiscoveryReport {
    pub groups: Vec<Vec<usize>>,
    pub per_group: Vec<GroupReport>,
}

/// Network dimensions for intra-option policy stacks.
#[derive(Clone, Copy, Debug)]
pub struct IntraNetDims {
    pub obs_dim: usize,
    pub embed_hidden: usize,
    pub embed_dim: usize,
    pub head_hidden: usize,
    pub use_gru: bool,
}

/// Runs one discovery generation over the given groups.
///
/// Each produced option owns fresh parameter stores; nothing is shared with
/// previous generations. A group whose connectivity fit diverges is skipped
/// (recorded in the report) and discovery continues with the rest.
pub fn discover(
    buffer: &ReplayBuffer,
    groups: &GroupSet,
    cfg: &DiscoveryConfig,
    dims: IntraNetDims,
    sac: SacHyper,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<DiscoveredOption>, DiscoveryReport), BufferError> {
    if buffer.len() < cfg.min_buffer.max(1) {
        return Err(BufferError::TooFew {
            need: cfg.min_buffer.max(1),
            got: buffer.len(),
        });
    }
    let mut options = Vec::new();
    let mut per_group = Vec::new();
    for group in &groups.0 {
        let transitions = extract_group_transitions(buffer, group)?;
        let (f, fit_report) = match fit(&transitions, &cfg.connectivity, rng) {
            Ok(ok) => ok,
            Err(e) => {
                eprintln!("warning: skipping group {group:?}: {e}");
                per_group.push(GroupReport {
                    group: group.clone(),
                    skipped: Some(e.to_string()),
                    threshold: f64::NAN,
                    percentile: cfg.percentile_k,
                    termination_fraction: f64::NAN,
                    fit: None,
                    intra_final_critic_loss: f64::NAN,
                    intra_final_policy_loss: f64::NAN,
                });
                continue;
            }
        };
        let rule = percentile_threshold(&f, &transitions, cfg.percentile_k);
        let pool = transitions.state_pool();
        let values = f.eval_batch(&pool);
        let termination_fraction =
            values.iter().filter(|&&v| v < rule.threshold).count() as f64 / values.len() as f64;

        // relabel rewards with the connectivity delta and train the
        // intra-option policy off-policy on the projected transitions
        let f_obs = f.eval_batch(&transitions.obs);
        let f_next = f.eval_batch(&transitions.next_obs);
        let g = group.len();
        let n = buffer.len();
        let mut actions = Array2::zeros((n, g));
        let mut rewards = Array2::zeros((n, g));
        for (r, t) in buffer.iter().enumerate() {
            let delta = cfg.intrinsic_weight * (f_obs[r] - f_next[r]);
            for (c, &i) in group.iter().enumerate() {
                actions[[r, c]] = t.actions[i];
                rewards[[r, c]] = t.rewards[i] + delta;
            }
        }

        let stack_cfg = StackConfig {
            n_agents: g,
            obs_dim: dims.obs_dim,
            embed_hidden: dims.embed_hidden,
            embed_dim: dims.embed_dim,
            head_hidden: dims.head_hidden,
            n_actions: 5,
            use_gru: dims.use_gru,
        };
        let mut learner = FlatLearner::new(stack_cfg, sac, rng);
        let batch_size = cfg.intra_batch.min(n);
        let mut critic_loss = f64::NAN;
        let mut policy_loss = f64::NAN;
        let per_agent_dim = dims.obs_dim;
        let mut failed = None;
        for _ in 0..cfg.intra_steps {
            let idx: Vec<usize> = rand::seq::index::sample(rng, n, batch_size).into_vec();
            let batch = project_flat_batch(
                &transitions,
                &actions,
                &rewards,
                &idx,
                g,
                per_agent_dim,
            );
            match learner.critic_update(&batch, rng) {
                Ok(l) => critic_loss = l,
                Err(e) => {
                    failed = Some(e.to_string());
                    break;
                }
            }
            match learner.policy_update(&batch, rng) {
                Ok(l) => policy_loss = l,
                Err(e) => {
                    failed = Some(e.to_string());
                    break;
                }
            }
            learner.update_target();
        }
        if let Some(msg) = failed {
            eprintln!("warning: skipping group {group:?}: intra-option training failed: {msg}");
            per_group.push(GroupReport {
                group: group.clone(),
                skipped: Some(msg),
                threshold: rule.threshold,
                percentile: cfg.percentile_k,
                termination_fraction,
                fit: Some(fit_report),
                intra_final_critic_loss: f64::NAN,
                intra_final_policy_loss: f64::NAN,
            });
            continue;
        }

        per_group.push(GroupReport {
            group: group.clone(),
            skipped: None,
            threshold: rule.threshold,
            percentile: cfg.percentile_k,
            termination_fraction,
            fit: Some(fit_report),
            intra_final_critic_loss: critic_loss,
            intra_final_policy_loss: policy_loss,
        });
        options.push(DiscoveredOption {
            group: group.clone(),
            generation: 0, // stamped by the slot table on installation
            connectivity: f,
            rule,
            policy: learner.stack,
        });
    }
    Ok((
        options,
        DiscoveryReport {
            groups: groups.0.clone(),
            per_group,
        },
    ))
}

/// Slices per-agent observation columns out of a projected group batch.
fn project_flat_batch(
    transitions: &GroupTransitionSet,
    actions: &Array2<usize>,
    rewards: &Array2<f64>,
    idx: &[usize],
    group_size: usize,
    per_agent_dim: usize,
) -> FlatBatch {
    let b = idx.len();
    let mut obs = Vec::with_capacity(group_size);
    let mut next_obs = Vec::with_capacity(group_size);
    for c in 0..group_size {
        let cols = c * per_agent_dim..(c + 1) * per_agent_dim;
        let o = transitions.obs.slice(ndarray::s![.., cols.clone()]);
        let nxt = transitions.next_obs.slice(ndarray::s![.., cols]);
        let mut ob = Array2::zeros((b, per_agent_dim));
        let mut nb = Array2::zeros((b, per_agent_dim));
        for (r, &i) in idx.iter().enumerate() {
            ob.row_mut(r).assign(&o.index_axis(Axis(0), i));
            nb.row_mut(r).assign(&nxt.index_axis(Axis(0), i));
        }
        obs.push(ob);
        next_obs.push(nb);
    }
    let a = Array2::from_shape_fn((b, group_size), |(r, c)| actions[[idx[r], c]]);
    let r = Array2::from_shape_fn((b, group_size), |(r, c)| rewards[[idx[r], c]]);
    FlatBatch {
        obs,
        actions: a,
        rewards: r,
        next_obs,
    }
}
