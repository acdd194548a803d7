//! Hierarchical replay buffer.
//!
//! Each record is one environment step across all agents, carrying the
//! per-agent option ids, initiation flags, primitive actions, rewards, and
//! next-step termination flags. Insertion validates the trace invariants:
//! initiation flags are true exactly at episode start or where the previous
//! step's option terminated, and an agent's option id stays constant while
//! it is not re-initiating.

use crate::options::JointObs;
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BufferError {
    #[error("trace invariant violated on insert: {0}")]
    Trace(String),
    #[error("buffer holds {got} transitions, need at least {need}")]
    TooFew { need: usize, got: usize },
}

/// One hierarchical transition across all agents.
#[derive(Clone, Debug)]
pub struct HierTransition {
    pub obs: JointObs,
    pub options: Vec<usize>,
    pub init: Vec<bool>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_obs: JointObs,
    pub beta: Vec<bool>,
    /// First step of its episode.
    pub first: bool,
    pub episode: u64,
}

/// FIFO ring of [`HierTransition`] with uniform without-replacement batch
/// sampling.
pub struct ReplayBuffer {
    data: VecDeque<HierTransition>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        Self {
            data: VecDeque::with_capacity(capacity.min(1 << 20)),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> &HierTransition {
        &self.data[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &HierTransition> {
        self.data.iter()
    }

    /// Validates the trace invariants against the episode's previous record,
    /// then appends, evicting the oldest record when full.
    pub fn push(&mut self, t: HierTransition) -> Result<(), BufferError> {
        let n = t.options.len();
        if t.first {
            if !t.init.iter().all(|&b| b) {
                return Err(BufferError::Trace(
                    "episode start requires init = 1 for every agent".into(),
                ));
            }
        } else if let Some(prev) = self.data.back().filter(|p| p.episode == t.episode) {
            for i in 0..n {
                if t.init[i] != prev.beta[i] {
                    return Err(BufferError::Trace(format!(
                        "agent {i}: init {} does not match previous beta {}",
                        t.init[i], prev.beta[i]
                    )));
                }
                if !t.init[i] && t.options[i] != prev.options[i] {
                    return Err(BufferError::Trace(format!(
                        "agent {i}: option changed {} -> {} without initiation",
                        prev.options[i], t.options[i]
                    )));
                }
            }
        }
        if self.data.len() == self.capacity {
            self.data.pop_front();
        }
        self.data.push_back(t);
        Ok(())
    }

    /// Uniform batch indices without replacement.
    pub fn sample_indices(
        &self,
        batch: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<Vec<usize>, BufferError> {
        if self.len() < batch {
            return Err(BufferError::TooFew {
                need: batch,
                got: self.len(),
            });
        }
        Ok(rand::seq::index::sample(rng, self.len(), batch).into_vec())
    }

    /// Observations of transitions belonging to the most recent
    /// `window_episodes` episodes.
    pub fn recent_window(&self, window_episodes: u64) -> impl Iterator<Item = &HierTransition> {
        let cutoff = self
            .data
            .back()
            .map(|t| t.episode.saturating_sub(window_episodes.saturating_sub(1)))
            .unwrap_or(0);
        self.data.iter().filter(move |t| t.episode >= cutoff)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(
        episode: u64,
        first: bool,
        options: Vec<usize>,
        init: Vec<bool>,
        beta: Vec<bool>,
    ) -> HierTransition {
        let n = options.len();
        HierTransition {
            obs: vec![vec![0.0, 0.0]; n],
            options,
            init,
            actions: vec![0; n],
            rewards: vec![0.0; n],
            next_obs: vec![vec![0.1, 0.0]; n],
            beta,
            first,
            episode,
        }
    }

    #[test]
    fn accepts_consistent_episode() {
        let mut buf = ReplayBuffer::new(16);
        buf.push(step(0, true, vec![0, 1], vec![true, true], vec![true, false]))
            .unwrap();
        buf.push(step(0, false, vec![2, 1], vec![true, false], vec![true, true]))
            .unwrap();
        assert_eq!(buf.len(), 2);
    }

    #[test]
    fn rejects_init_beta_mismatch() {
        let mut buf = ReplayBuffer::new(16);
        buf.push(step(0, true, vec![0, 0], vec![true, true], vec![false, true]))
            .unwrap();
        let err = buf.push(step(0, false, vec![0, 0], vec![true, true], vec![true, true]));
        assert!(matches!(err, Err(BufferError::Trace(_))));
    }

    #[test]
    fn rejects_option_switch_without_initiation() {
        let mut buf = ReplayBuffer::new(16);
        buf.push(step(0, true, vec![1, 0], vec![true, true], vec![false, true]))
            .unwrap();
        let err = buf.push(step(0, false, vec![2, 0], vec![false, true], vec![true, true]));
        assert!(matches!(err, Err(BufferError::Trace(_))));
    }

    #[test]
    fn rejects_episode_start_without_full_init() {
        let mut buf = ReplayBuffer::new(16);
        let err = buf.push(step(0, true, vec![0, 0], vec![true, false], vec![true, true]));
        assert!(matches!(err, Err(BufferError::Trace(_))));
    }

    #[test]
    fn fifo_eviction_and_windowing() {
        let mut buf = ReplayBuffer::new(4);
        for ep in 0..3u64 {
            buf.push(step(ep, true, vec![0], vec![true], vec![true])).unwrap();
            buf.push(step(ep, false, vec![0], vec![true], vec![true])).unwrap();
        }
        assert_eq!(buf.len(), 4);
        assert_eq!(buf.get(0).episode, 1);
        let recent: Vec<u64> = buf.recent_window(1).map(|t| t.episode).collect();
        assert_eq!(recent, vec![2, 2]);
        let recent2: Vec<u64> = buf.recent_window(2).map(|t| t.episode).collect();
        assert_eq!(recent2, vec![1, 1, 2, 2]);
    }

    #[test]
    fn sampling_without_replacement() {
        use rand::SeedableRng;
        let mut buf = ReplayBuffer::new(64);
        for i in 0..10u64 {
            buf.push(step(i, true, vec![0], vec![true], vec![true])).unwrap();
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let idx = buf.sample_indices(8, &mut rng).unwrap();
        let mut dedup = idx.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), 8);
        assert!(buf.sample_indices(11, &mut rng).is_err());
    }
}
