//! The option abstraction: a fixed slot table holding the always-available
//! one-step primitive option plus the current generation of discovered
//! options, and per-agent execution bookkeeping for asynchronous
//! initiation/termination.
//!
//! Slot 0 is permanently the primitive option. Discovered options occupy
//! slots 1.. and are replaced wholesale each generation; agents caught
//! executing a replaced option terminate it on their next step. The slot
//! table has fixed capacity `n_agents + 1` (at most one option per
//! sub-group, at most `n_agents` sub-groups), so policy and Q head
//! dimensions never change across generations.

use crate::connectivity::{beta, ConnectivityFn, ConnectivitySnapshot, TerminationRule};
use crate::nn::sample_masked_rows;
use crate::stack::{AttentiveStack, StackSnapshot};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Per-agent observation rows of one joint observation.
pub type JointObs = Vec<Vec<f64>>;

/// Concatenated observation of a group's members, in group order.
pub fn group_obs(joint: &JointObs, group: &[usize]) -> Vec<f64> {
    group
        .iter()
        .flat_map(|&i| joint[i].iter().copied())
        .collect()
}

/// A discovered multi-agent covering option.
#[derive(Clone, Debug)]
pub struct DiscoveredOption {
    pub group: Vec<usize>,
    pub generation: u32,
    pub connectivity: ConnectivityFn,
    pub rule: TerminationRule,
    /// Flat policy stack over the group's agents (five primitive actions).
    pub policy: AttentiveStack,
}

impl DiscoveredOption {
    /// Termination indicator on the group projection of a joint observation.
    pub fn terminates(&self, joint: &JointObs) -> bool {
        beta(&self.rule, &self.connectivity, &group_obs(joint, &self.group))
    }

    /// Initiation predicate: exact complement of termination.
    pub fn initiates(&self, joint: &JointObs) -> bool {
        !self.terminates(joint)
    }

    pub fn member_index(&self, agent: usize) -> Option<usize> {
        self.group.iter().position(|&g| g == agent)
    }
}

/// Serializable form of a discovered option for checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptionSnapshot {
    pub slot: usize,
    pub group: Vec<usize>,
    pub generation: u32,
    pub connectivity: ConnectivitySnapshot,
    pub rule: TerminationRule,
    pub policy: StackSnapshot,
}

impl OptionSnapshot {
    pub fn capture(slot: usize, opt: &DiscoveredOption) -> Self {
        Self {
            slot,
            group: opt.group.clone(),
            generation: opt.generation,
            connectivity: ConnectivitySnapshot::capture(&opt.connectivity),
            rule: opt.rule,
            policy: StackSnapshot::capture(&opt.policy),
        }
    }

    pub fn restore(&self) -> DiscoveredOption {
        DiscoveredOption {
            group: self.group.clone(),
            generation: self.generation,
            connectivity: self.connectivity.restore(),
            rule: self.rule,
            policy: self.policy.restore(),
        }
    }
}

/// Fixed-capacity option slot table. Slot 0 is the primitive option.
#[derive(Clone, Debug)]
pub struct OptionSet {
    pub n_agents: usize,
    pub generation: u32,
    slots: Vec<Option<DiscoveredOption>>,
}

impl OptionSet {
    pub fn new(n_agents: usize) -> Self {
        Self {
            n_agents,
            generation: 0,
            slots: (0..n_agents).map(|_| None).collect(),
        }
    }

    /// Total slot count including the primitive slot.
    pub fn capacity(&self) -> usize {
        self.slots.len() + 1
    }

    pub fn discovered(&self, slot: usize) -> Option<&DiscoveredOption> {
        if slot == 0 {
            None
        } else {
            self.slots.get(slot - 1).and_then(|s| s.as_ref())
        }
    }

    pub fn is_active(&self, slot: usize) -> bool {
        slot == 0 || self.discovered(slot).is_some()
    }

    pub fn n_active(&self) -> usize {
        1 + self.slots.iter().filter(|s| s.is_some()).count()
    }

    /// Installs a new generation, deactivating every prior discovered slot.
    pub fn replace_generation(&mut self, options: Vec<DiscoveredOption>) {
        assert!(
            options.len() <= self.slots.len(),
            "more options than slots: {} > {}",
            options.len(),
            self.slots.len()
        );
        self.generation += 1;
        for s in self.slots.iter_mut() {
            *s = None;
        }
        for (i, mut opt) in options.into_iter().enumerate() {
            opt.generation = self.generation;
            self.slots[i] = Some(opt);
        }
    }

    pub fn snapshots(&self) -> Vec<OptionSnapshot> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|o| OptionSnapshot::capture(i + 1, o)))
            .collect()
    }

    pub fn restore_generation(&mut self, generation: u32, snaps: &[OptionSnapshot]) {
        for s in self.slots.iter_mut() {
            *s = None;
        }
        self.generation = generation;
        for snap in snaps {
            self.slots[snap.slot - 1] = Some(snap.restore());
        }
    }
}

/// Slot availability for one agent at one joint observation. Slot 0 is
/// always available; a discovered slot is available iff it is active, the
/// agent belongs to its group, and the group observation lies in the
/// initiation set.
pub fn available_mask(agent: usize, joint: &JointObs, options: &OptionSet) -> Vec<bool> {
    let mut mask = vec![false; options.capacity()];
    mask[0] = true;
    for slot in 1..options.capacity() {
        if let Some(opt) = options.discovered(slot) {
            mask[slot] = opt.member_index(agent).is_some() && opt.initiates(joint);
        }
    }
    mask
}

/// Per-agent option execution bookkeeping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionState {
    pub option: usize,
    /// Option-set generation stamped at initiation.
    pub generation: u32,
    pub steps_in_option: usize,
    /// A new option must be (or was just) chosen at the current step.
    pub needs_init: bool,
}

impl ExecutionState {
    pub fn episode_start() -> Self {
        Self {
            option: 0,
            generation: 0,
            steps_in_option: 0,
            needs_init: true,
        }
    }

    /// Commits a high-level choice for the current step.
    pub fn initiate(&mut self, slot: usize, generation: u32) {
        debug_assert!(self.needs_init);
        self.option = slot;
        self.generation = generation;
        self.steps_in_option = 0;
        self.needs_init = false;
    }
}

/// Termination check after arriving at `next`: the primitive option always
/// terminates, a discovered option terminates on its beta predicate, on the
/// step cap, or because its slot was replaced by a newer generation.
pub fn advance(
    exec: &mut ExecutionState,
    next: &JointObs,
    options: &OptionSet,
    max_option_steps: usize,
) -> bool {
    exec.steps_in_option += 1;
    let term = if exec.option == 0 {
        true
    } else {
        match options.discovered(exec.option) {
            Some(opt) if opt.generation == exec.generation => {
                opt.terminates(next) || exec.steps_in_option >= max_option_steps
            }
            _ => true, // slot deactivated or overwritten
        }
    };
    exec.needs_init = term;
    term
}

/// Per-step forward cache so each policy stack runs once per step even when
/// several agents share an option.
#[derive(Default)]
pub struct ActionCache {
    primitive_probs: Option<Vec<Vec<f64>>>,
    slot_probs: std::collections::BTreeMap<usize, Vec<Vec<f64>>>,
}

impl ActionCache {
    pub fn clear(&mut self) {
        self.primitive_probs = None;
        self.slot_probs.clear();
    }
}

fn policy_rows(stack: &AttentiveStack, obs_rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let obs: Vec<Array2<f64>> = obs_rows
        .iter()
        .map(|r| Array2::from_shape_vec((1, r.len()), r.clone()).unwrap())
        .collect();
    let fwd = stack.policy_forward(&obs, None, None);
    fwd.logp.iter().map(|lp| lp.row(0).to_vec()).collect()
}

/// Samples the agent's primitive action from its current option.
///
/// Slot 0 draws from the flat policy over all agents' observations; a
/// discovered option draws the agent's component of the group policy over
/// the group's joint observation. In deterministic mode the argmax is taken
/// and no randomness is consumed.
#[allow(clippy::too_many_arguments)]
pub fn act(
    agent: usize,
    exec: &ExecutionState,
    joint: &JointObs,
    options: &OptionSet,
    primitive: &AttentiveStack,
    cache: &mut ActionCache,
    rng: &mut ChaCha8Rng,
    deterministic: bool,
) -> usize {
    let (logp_rows, component) = if exec.option == 0 {
        if cache.primitive_probs.is_none() {
            cache.primitive_probs = Some(policy_rows(primitive, joint));
        }
        (cache.primitive_probs.as_ref().unwrap(), agent)
    } else {
        let opt = options
            .discovered(exec.option)
            .expect("executing an inactive slot");
        let member = opt
            .member_index(agent)
            .expect("agent executing an option outside its group");
        if !cache.slot_probs.contains_key(&exec.option) {
            let rows: Vec<Vec<f64>> = opt.group.iter().map(|&g| joint[g].clone()).collect();
            cache
                .slot_probs
                .insert(exec.option, policy_rows(&opt.policy, &rows));
        }
        (&cache.slot_probs[&exec.option], member)
    };
    let logp = &logp_rows[component];
    if deterministic {
        logp.iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap()
    } else {
        let row = Array2::from_shape_vec((1, logp.len()), logp.clone()).unwrap();
        let mask = Array2::from_elem((1, logp.len()), true);
        sample_masked_rows(&row, &mask, rng)[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connectivity::percentile_threshold;
    use crate::connectivity::GroupTransitionSet;
    use crate::stack::StackConfig;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(31)
    }

    fn toy_option(group: Vec<usize>, rng: &mut ChaCha8Rng) -> DiscoveredOption {
        let dim = 2 * group.len();
        let f = ConnectivityFn::new(dim, 8, rng);
        let states = Array2::from_shape_fn((40, dim), |_| rng.gen_range(0.0..1.0));
        let t = GroupTransitionSet::new(states.clone(), states).unwrap();
        let rule = percentile_threshold(&f, &t, 30.0);
        let policy = AttentiveStack::new(
            StackConfig {
                n_agents: group.len(),
                obs_dim: 2,
                embed_hidden: 8,
                embed_dim: 4,
                head_hidden: 8,
                n_actions: 5,
                use_gru: false,
            },
            rng,
        );
        DiscoveredOption {
            group,
            generation: 0,
            connectivity: f,
            rule,
            policy,
        }
    }

    fn joint_obs(n: usize, rng: &mut ChaCha8Rng) -> JointObs {
        (0..n)
            .map(|_| vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)])
            .collect()
    }

    #[test]
    fn fresh_set_has_only_primitive() {
        let mut rng = rng();
        let options = OptionSet::new(3);
        assert_eq!(options.capacity(), 4);
        assert_eq!(options.n_active(), 1);
        let joint = joint_obs(3, &mut rng);
        let mask = available_mask(0, &joint, &options);
        assert_eq!(mask, vec![true, false, false, false]);
    }

    #[test]
    fn mask_respects_group_membership_and_initiation() {
        let mut rng = rng();
        let mut options = OptionSet::new(3);
        options.replace_generation(vec![toy_option(vec![0, 1], &mut rng)]);
        // find an initiation state and a termination state
        let mut init_state = None;
        let mut term_state = None;
        for _ in 0..500 {
            let joint = joint_obs(3, &mut rng);
            let opt = options.discovered(1).unwrap();
            if opt.initiates(&joint) {
                init_state.get_or_insert(joint);
            } else {
                term_state.get_or_insert(joint);
            }
            if init_state.is_some() && term_state.is_some() {
                break;
            }
        }
        let init_state = init_state.expect("no initiation state found");
        let term_state = term_state.expect("no termination state found");

        let mask = available_mask(0, &init_state, &options);
        assert!(mask[1], "member in initiation set should see the option");
        let mask = available_mask(2, &init_state, &options);
        assert!(!mask[1], "non-member never sees the option");
        let mask = available_mask(0, &term_state, &options);
        assert!(!mask[1], "termination state masks the option out");
        assert!(mask[0], "primitive slot always available");
    }

    #[test]
    fn primitive_option_terminates_every_step() {
        let mut rng = rng();
        let options = OptionSet::new(2);
        let mut exec = ExecutionState::episode_start();
        exec.initiate(0, options.generation);
        let joint = joint_obs(2, &mut rng);
        let beta = advance(&mut exec, &joint, &options, 25);
        assert!(beta);
        assert!(exec.needs_init);
    }

    #[test]
    fn discovered_option_terminates_on_beta_cap_or_replacement() {
        let mut rng = rng();
        let mut options = OptionSet::new(2);
        options.replace_generation(vec![toy_option(vec![0, 1], &mut rng)]);

        // beta termination
        let mut term_state = None;
        let mut init_state = None;
        for _ in 0..500 {
            let joint = joint_obs(2, &mut rng);
            let opt = options.discovered(1).unwrap();
            if opt.terminates(&joint) {
                term_state.get_or_insert(joint);
            } else {
                init_state.get_or_insert(joint);
            }
        }
        let term_state = term_state.unwrap();
        let init_state = init_state.unwrap();

        let mut exec = ExecutionState::episode_start();
        exec.initiate(1, options.generation);
        assert!(advance(&mut exec, &term_state, &options, 25));

        // cap termination: keep feeding initiation states
        let mut exec = ExecutionState::episode_start();
        exec.initiate(1, options.generation);
        let mut terminated_at = None;
        for step in 1..=30 {
            if advance(&mut exec, &init_state, &options, 25) {
                terminated_at = Some(step);
                break;
            }
        }
        assert_eq!(terminated_at, Some(25));

        // replacement termination
        let mut exec = ExecutionState::episode_start();
        exec.initiate(1, options.generation);
        options.replace_generation(vec![toy_option(vec![0, 1], &mut rng)]);
        assert!(advance(&mut exec, &init_state, &options, 25));
    }

    #[test]
    fn replacement_overwrites_previous_generation() {
        let mut rng = rng();
        let mut options = OptionSet::new(4);
        options.replace_generation(vec![
            toy_option(vec![0, 1], &mut rng),
            toy_option(vec![2, 3], &mut rng),
        ]);
        assert_eq!(options.n_active(), 3);
        assert_eq!(options.generation, 1);
        options.replace_generation(vec![toy_option(vec![1, 2], &mut rng)]);
        assert_eq!(options.n_active(), 2);
        assert_eq!(options.generation, 2);
        assert_eq!(options.discovered(1).unwrap().group, vec![1, 2]);
        assert!(options.discovered(2).is_none());
    }

    #[test]
    fn act_samples_group_component_and_argmax_is_stable() {
        let mut rng = rng();
        let mut options = OptionSet::new(2);
        options.replace_generation(vec![toy_option(vec![0, 1], &mut rng)]);
        let primitive = AttentiveStack::new(
            StackConfig {
                n_agents: 2,
                obs_dim: 2,
                embed_hidden: 8,
                embed_dim: 4,
                head_hidden: 8,
                n_actions: 5,
                use_gru: false,
            },
            &mut rng,
        );
        let joint = joint_obs(2, &mut rng);
        let mut exec = ExecutionState::episode_start();
        exec.initiate(1, options.generation);
        let mut cache = ActionCache::default();
        let a1 = act(
            0, &exec, &joint, &options, &primitive, &mut cache, &mut rng, true,
        );
        cache.clear();
        let a2 = act(
            0, &exec, &joint, &options, &primitive, &mut cache, &mut rng, true,
        );
        assert_eq!(a1, a2, "deterministic mode must repeat");
        assert!(a1 < 5);

        // primitive path samples from the flat policy
        let mut exec0 = ExecutionState::episode_start();
        exec0.initiate(0, options.generation);
        cache.clear();
        let a = act(
            1, &exec0, &joint, &options, &primitive, &mut cache, &mut rng, false,
        );
        assert!(a < 5);
    }

    #[test]
    fn option_snapshot_roundtrip() {
        let mut rng = rng();
        let opt = toy_option(vec![0, 2], &mut rng);
        let snap = OptionSnapshot::capture(1, &opt);
        let restored = snap.restore();
        assert_eq!(restored.group, opt.group);
        let joint = joint_obs(3, &mut rng);
        assert_eq!(restored.terminates(&joint), opt.terminates(&joint));
        assert_eq!(
            restored.rule.threshold, opt.rule.threshold,
            "threshold survives the roundtrip"
        );
    }
}
