//! Deep Q-learning from scratch: replay buffer, target network, ε-greedy
//! exploration, and squared TD-error regression onto Bellman targets.

mod chain;
mod io;
mod network;
mod optimizer;
mod replay;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{self, DslError, EnvSnapshot, RewardProgram};
use crate::sim::{Action, EnvConfig, Highway, SimError};

pub use chain::ChainMdp;
pub use io::{
    decode_weights, encode_weights, load_echo, load_policy, save_train_dir, TrainEcho, CURVES_FILE, ECHO_FILE,
    WEIGHTS_FILE, WEIGHTS_MAGIC,
};
pub use network::{act_greedy, argmax, backward, loss, td_target, QNetwork};
pub use optimizer::{clip_grad_norm, Optimizer, OptimizerKind};
pub use replay::ReplayBuffer;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("reward program failed: {0}")]
    Dsl(#[from] DslError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("invalid trainer config: {field}: {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed policy directory: {0}")]
    Format(String),
}

/// One `(s, a, r, s', done)` experience.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub observation: Vec<f64>,
    pub action: u8,
    pub reward: f64,
    pub next_observation: Vec<f64>,
    /// Crash or frame limit.
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub total_steps: u64,
    pub gamma: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Gradient L2-norm cap; 0 disables clipping.
    pub max_grad_norm: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Environment steps before the first gradient update.
    pub learning_starts: u64,
    pub target_update_period: u64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_steps: u64,
    pub hidden_layers: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            total_steps: 20_000,
            gamma: 0.8,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            max_grad_norm: 0.0,
            batch_size: 32,
            buffer_capacity: 15_000,
            learning_starts: 200,
            target_update_period: 50,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_steps: 6_000,
            hidden_layers: vec![256, 256],
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let invalid = |field: &str, reason: &str| {
            Err(TrainError::InvalidConfig {
                field: field.to_string(),
                reason: reason.to_string(),
            })
        };
        if !(0.0..1.0).contains(&self.gamma) {
            return invalid("gamma", "must be in [0, 1)");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return invalid("learning_rate", "must be positive");
        }
        if !(self.max_grad_norm.is_finite() && self.max_grad_norm >= 0.0) {
            return invalid("max_grad_norm", "must be non-negative");
        }
        if self.batch_size == 0 {
            return invalid("batch_size", "must be positive");
        }
        if self.buffer_capacity == 0 {
            return invalid("buffer_capacity", "must be positive");
        }
        if self.target_update_period == 0 {
            return invalid("target_update_period", "must be positive");
        }
        for (field, eps) in [("epsilon_start", self.epsilon_start), ("epsilon_end", self.epsilon_end)] {
            if !(0.0..=1.0).contains(&eps) {
                return invalid(field, "must be in [0, 1]");
            }
        }
        if self.hidden_layers.contains(&0) {
            return invalid("hidden_layers", "layer widths must be positive");
        }
        Ok(())
    }

    /// Linear decay from `epsilon_start` to `epsilon_end`, then constant.
    pub fn epsilon(&self, step: u64) -> f64 {
        if self.epsilon_decay_steps == 0 || step >= self.epsilon_decay_steps {
            return self.epsilon_end;
        }
        let frac = step as f64 / self.epsilon_decay_steps as f64;
        self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)
    }
}

/// Output of one training run.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub network: QNetwork,
    /// Undiscounted return of each completed episode.
    pub episode_returns: Vec<f64>,
    pub episode_lengths: Vec<u32>,
    pub wall_clock_seconds: f64,
}

impl TrainResult {
    /// Equality of everything except wall-clock time.
    pub fn same_outcome(&self, other: &TrainResult) -> bool {
        self.network == other.network
            && self.episode_returns.len() == other.episode_returns.len()
            && self
                .episode_returns
                .iter()
                .zip(&other.episode_returns)
                .all(|(a, b)| a.to_bits() == b.to_bits())
            && self.episode_lengths == other.episode_lengths
    }
}

pub struct EnvStep {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// An episodic task with the five-action interface.
pub trait Environment {
    fn observation_len(&self) -> usize;
    fn reset(&mut self, seed: u64) -> Result<Vec<f64>, TrainError>;
    fn step(&mut self, action: Action) -> Result<EnvStep, TrainError>;
}

/// The highway simulator rewarded by a DSL program.
pub struct HighwayTask<'a> {
    config: EnvConfig,
    reward: &'a RewardProgram,
    env: Option<Highway>,
}

impl<'a> HighwayTask<'a> {
    pub fn new(config: &EnvConfig, reward: &'a RewardProgram) -> Result<Self, TrainError> {
        config.validate()?;
        dsl::typecheck(reward)?;
        Ok(Self {
            config: config.clone(),
            reward,
            env: None,
        })
    }
}

impl Environment for HighwayTask<'_> {
    fn observation_len(&self) -> usize {
        self.config.observation_vehicles * crate::sim::OBSERVATION_FEATURES
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<f64>, TrainError> {
        let env = Highway::reset(&self.config.with_seed(seed))?;
        let obs = env.observe().into_vec();
        self.env = Some(env);
        Ok(obs)
    }

    fn step(&mut self, action: Action) -> Result<EnvStep, TrainError> {
        let env = self.env.as_mut().expect("reset before step");
        let (obs, info) = env.step(action);
        let snapshot = EnvSnapshot::from_step(&info, &self.config);
        let reward = dsl::evaluate(self.reward, &snapshot)?;
        Ok(EnvStep {
            observation: obs.into_vec(),
            reward,
            done: info.done,
        })
    }
}

/// Seed of training episode `episode`; the high bit keeps training scenarios
/// disjoint from small evaluation seeds.
pub fn training_episode_seed(trainer_seed: u64, episode: u64) -> u64 {
    (1 << 63) | (trainer_seed.wrapping_mul(0x9E37_79B9) << 24) ^ episode
}

/// Trains a Q-network on the highway preset with `reward`.
pub fn train(
    env_config: &EnvConfig,
    reward: &RewardProgram,
    config: &TrainerConfig,
) -> Result<TrainResult, TrainError> {
    let mut task = HighwayTask::new(env_config, reward)?;
    train_on(&mut task, config)
}

/// DQN on any [`Environment`]. Deterministic given `config.seed`.
pub fn train_on<E: Environment>(env: &mut E, config: &TrainerConfig) -> Result<TrainResult, TrainError> {
    config.validate()?;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut online = QNetwork::new(env.observation_len(), &config.hidden_layers, &mut rng);
    let mut target = online.clone();
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, online.params().len());
    let mut buffer = ReplayBuffer::new(config.buffer_capacity);

    let mut episode = 0u64;
    let mut observation = env.reset(training_episode_seed(config.seed, episode))?;
    let mut episode_return = 0.0;
    let mut episode_length = 0u32;
    let mut returns = Vec::new();
    let mut lengths = Vec::new();

    for step in 0..config.total_steps {
        let action = if rng.random::<f64>() < config.epsilon(step) {
            Action::ALL[rng.random_range(0..Action::COUNT)]
        } else {
            act_greedy(&online, &observation)
        };
        let outcome = env.step(action)?;
        episode_return += outcome.reward;
        episode_length += 1;
        let next = if outcome.done {
            returns.push(episode_return);
            lengths.push(episode_length);
            episode_return = 0.0;
            episode_length = 0;
            episode += 1;
            Some(env.reset(training_episode_seed(config.seed, episode))?)
        } else {
            None
        };
        buffer.push(Transition {
            observation: std::mem::take(&mut observation),
            action: action.code(),
            reward: outcome.reward,
            next_observation: outcome.observation.clone(),
            done: outcome.done,
        });
        observation = next.unwrap_or(outcome.observation);

        if step + 1 >= config.learning_starts && buffer.len() >= config.batch_size {
            let batch = buffer.sample(config.batch_size, &mut rng);
            let targets = td_target(&batch, &target, config.gamma);
            let (_, mut grads) = backward(&online, &batch, &targets);
            if config.max_grad_norm > 0.0 {
                clip_grad_norm(&mut grads, config.max_grad_norm);
            }
            optimizer.step(online.params_mut(), &grads);
        }
        if (step + 1) % config.target_update_period == 0 {
            target.copy_from(&online);
        }
    }

    Ok(TrainResult {
        network: online,
        episode_returns: returns,
        episode_lengths: lengths,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    })
}
