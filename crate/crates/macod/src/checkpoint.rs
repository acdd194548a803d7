//! Versioned, resumable training checkpoints.
//!
//! A checkpoint carries every parameter set (online and target, with Adam
//! moments), the option slot table, all RNG stream states, and summary
//! statistics of the replay buffer. Restoring reproduces the trainer state
//! except for the buffer contents, which refill from fresh rollouts.

use crate::buffer::ReplayBuffer;
use crate::discovery::DiscoveryConfig;
use crate::env::EnvConfig;
use crate::flat::{FlatLearner, LearnerSnapshot};
use crate::hier::{AssemblyAudit, HierLearner};
use crate::options::{OptionSet, OptionSnapshot};
use crate::trainer::{Mode, Trainer, TrainerError, TrainerHyper};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {got} (expected {CHECKPOINT_VERSION})")]
    Version { got: u32 },
    #[error(transparent)]
    Trainer(#[from] TrainerError),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BufferStats {
    pub len: usize,
    pub capacity: usize,
    pub first_episode: Option<u64>,
    pub last_episode: Option<u64>,
}

impl BufferStats {
    fn capture(buffer: &ReplayBuffer) -> Self {
        Self {
            len: buffer.len(),
            capacity: buffer.capacity(),
            first_episode: (!buffer.is_empty()).then(|| buffer.get(0).episode),
            last_episode: (!buffer.is_empty()).then(|| buffer.get(buffer.len() - 1).episode),
        }
    }
}

#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub episode: u64,
    pub n_generations: u32,
    pub mode: Mode,
    pub seed: u64,
    pub env: EnvConfig,
    pub hyper: TrainerHyper,
    pub discovery: DiscoveryConfig,
    pub primitive: LearnerSnapshot,
    pub hier: LearnerSnapshot,
    pub option_generation: u32,
    pub options: Vec<OptionSnapshot>,
    pub rng_rollout: ChaCha8Rng,
    pub rng_flat: ChaCha8Rng,
    pub rng_hier: ChaCha8Rng,
    pub rng_discovery: ChaCha8Rng,
    pub buffer_stats: BufferStats,
    pub target_assembly_elements: usize,
    pub target_assembly_violations: usize,
}

impl Checkpoint {
    pub fn capture(trainer: &Trainer) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            episode: trainer.episode,
            n_generations: trainer.n_generations,
            mode: trainer.mode,
            seed: trainer.seed,
            env: trainer.env_cfg.clone(),
            hyper: trainer.hyper,
            discovery: trainer.discovery_cfg.clone(),
            primitive: trainer.primitive.snapshot(),
            hier: trainer.hier.snapshot(),
            option_generation: trainer.options.generation,
            options: trainer.options.snapshots(),
            rng_rollout: trainer.rng_rollout.clone(),
            rng_flat: trainer.rng_flat.clone(),
            rng_hier: trainer.rng_hier.clone(),
            rng_discovery: trainer.rng_discovery.clone(),
            buffer_stats: BufferStats::capture(&trainer.buffer),
            target_assembly_elements: trainer.assembly_audit.elements,
            target_assembly_violations: trainer.assembly_audit.changed_without_beta,
        }
    }

    pub fn restore(&self) -> Result<Trainer, CheckpointError> {
        if self.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version { got: self.version });
        }
        let mut trainer = Trainer::new(
            self.env.clone(),
            self.hyper,
            self.discovery.clone(),
            self.mode,
            self.seed,
        )?;
        trainer.episode = self.episode;
        trainer.n_generations = self.n_generations;
        trainer.primitive = FlatLearner::restore(&self.primitive);
        trainer.hier = HierLearner::restore(&self.hier);
        let mut options = OptionSet::new(self.env.n_agents());
        options.restore_generation(self.option_generation, &self.options);
        trainer.options = options;
        trainer.rng_rollout = self.rng_rollout.clone();
        trainer.rng_flat = self.rng_flat.clone();
        trainer.rng_hier = self.rng_hier.clone();
        trainer.rng_discovery = self.rng_discovery.clone();
        trainer.assembly_audit = AssemblyAudit {
            elements: self.target_assembly_elements,
            changed_without_beta: self.target_assembly_violations,
            ..Default::default()
        };
        Ok(trainer)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CheckpointError> {
        let file = std::fs::File::create(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CheckpointError> {
        let file = std::fs::File::open(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let ck: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version { got: ck.version });
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvConfig;
    use crate::trainer::Selector;

    fn small_trainer(seed: u64) -> Trainer {
        let mut env = EnvConfig::sub_setting_with_rooms(1, 3, 3).unwrap();
        env.max_steps = 30;
        Trainer::new(
            env,
            TrainerHyper {
                batch_size: 16,
                buffer_capacity: 500,
                embed_hidden: 8,
                embed_dim: 4,
                head_hidden: 8,
                ..Default::default()
            },
            DiscoveryConfig {
                generation_interval: 2,
                max_generations: 1,
                min_buffer: 30,
                intra_steps: 5,
                intra_batch: 8,
                connectivity: crate::connectivity::ConnectivityHyper {
                    steps: 30,
                    batch_size: 16,
                    ..Default::default()
                },
                ..Default::default()
            },
            Mode::SingleAgentOptions,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_preserves_params_options_and_rng() {
        let mut t = small_trainer(5);
        for _ in 0..3 {
            t.train_episode().unwrap();
        }
        assert_eq!(t.options.n_active(), 3);
        let ck = Checkpoint::capture(&t);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let mut restored = loaded.restore().unwrap();

        assert_eq!(restored.episode, t.episode);
        assert_eq!(restored.options.n_active(), 3);
        assert_eq!(restored.options.generation, t.options.generation);
        use crate::nn::ParamSet;
        assert_eq!(
            restored.primitive.stack.param_values(),
            t.primitive.stack.param_values()
        );
        assert_eq!(
            restored.hier.target.param_values(),
            t.hier.target.param_values()
        );

        // identical rollouts after restore (buffer refills independently)
        restored.episode += 1;
        t.episode += 1;
        let a = restored.rollout_episode(Selector::Learned).unwrap();
        let b = t.rollout_episode(Selector::Learned).unwrap();
        assert_eq!(a.returns, b.returns);
        assert_eq!(a.option_usage, b.option_usage);
    }

    #[test]
    fn version_mismatch_rejected() {
        let t = small_trainer(1);
        let mut ck = Checkpoint::capture(&t);
        ck.version = 2;
        assert!(matches!(
            ck.restore(),
            Err(CheckpointError::Version { got: 2 })
        ));
    }
}
