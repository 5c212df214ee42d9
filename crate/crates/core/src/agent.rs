//! One learning player: observation encoding, ε-greedy selection, replay
//! memory and the bootstrapped Q-learning update against a target network.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action, GameHistory, NUM_ACTIONS, NUM_PLAYERS};
use crate::nn::{Activation, NnError, Optimizer, OptimizerKind, QNetwork, TrainBatch};
use crate::par::Execution;

/// Width of one joint-action block in an observation (players × actions).
pub const BLOCK: usize = NUM_PLAYERS * NUM_ACTIONS;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Network(#[from] NnError),
    #[error("invalid agent config: {0}")]
    Config(String),
    #[error("agent checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    Fair,
    CheatSender,
    CheatReceiver,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub learning_rate: f64,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_min: f64,
    pub epsilon_decay: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub target_sync_every: u64,
    /// Stacked frames F.
    pub frames: usize,
    /// History window W (steps).
    pub window: usize,
    pub hidden: Vec<usize>,
    pub optimizer: OptimizerKind,
    pub activation: Activation,
    pub role: AgentRole,
}

impl AgentConfig {
    /// Scaled configuration used for tests and desk runs.
    pub fn desk() -> Self {
        AgentConfig {
            learning_rate: 0.005,
            gamma: 1.0,
            epsilon_start: 1.0,
            epsilon_min: 0.01,
            epsilon_decay: 0.95,
            batch_size: 32,
            buffer_capacity: 10_000,
            target_sync_every: 100,
            frames: 3,
            window: 20,
            hidden: vec![128, 9],
            optimizer: OptimizerKind::Adam,
            activation: Activation::Relu,
            role: AgentRole::Fair,
        }
    }

    /// Full-size network: 3 frames × 300 steps × 3 players × 3 actions = 8100 inputs.
    pub fn paper() -> Self {
        AgentConfig {
            learning_rate: 0.001,
            target_sync_every: 300,
            window: 300,
            hidden: vec![2700, 9],
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: String| Err(AgentError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(0.0 <= self.epsilon_min && self.epsilon_min <= self.epsilon_start && self.epsilon_start <= 1.0) {
            return bad(format!(
                "need 0 <= epsilon_min ({}) <= epsilon_start ({}) <= 1",
                self.epsilon_min, self.epsilon_start
            ));
        }
        if !(self.epsilon_decay > 0.0 && self.epsilon_decay <= 1.0) {
            return bad(format!("epsilon_decay must lie in (0, 1], got {}", self.epsilon_decay));
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 || self.target_sync_every == 0 {
            return bad("batch_size, buffer_capacity and target_sync_every must be positive".into());
        }
        if self.frames == 0 || self.window == 0 {
            return bad("frames and window must be positive".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer widths must be positive".into());
        }
        Ok(())
    }

    pub fn receives_message(&self) -> bool {
        self.role == AgentRole::CheatReceiver
    }

    pub fn input_width(&self) -> usize {
        observation_width(self.frames, self.window, self.receives_message())
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_width()];
        dims.extend(&self.hidden);
        dims.push(NUM_ACTIONS);
        dims
    }
}

pub fn observation_width(frames: usize, window: usize, with_message: bool) -> usize {
    frames * window * BLOCK + usize::from(with_message)
}

/// History entries needed to render `frames` stacked windows of length `window`.
pub fn history_retention(frames: usize, window: usize) -> usize {
    window + frames - 1
}

/// Message feature value for an action code: 0, 0.5 or 1.
pub fn message_feature(action: Action) -> f64 {
    action.code() as f64 / 2.0
}

/// Network input, stored sparsely: a set of unit entries plus an optional
/// trailing message feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    width: usize,
    ones: Vec<u32>,
    message: Option<f64>,
}

impl Observation {
    pub fn len(&self) -> usize {
        self.width
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0
    }

    pub fn message(&self) -> Option<f64> {
        self.message
    }

    pub fn active_indices(&self) -> &[u32] {
        &self.ones
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.width];
        for &i in &self.ones {
            v[i as usize] = 1.0;
        }
        if let Some(m) = self.message {
            v[self.width - 1] = m;
        }
        v
    }

    /// Same observation with the message slot replaced (width unchanged).
    pub fn with_message(&self, message: Option<Action>) -> Self {
        let mut o = self.clone();
        if o.message.is_some() {
            o.message = Some(message.map_or(0.0, message_feature));
        }
        o
    }
}

/// Frame `k` is the window as it stood `k` steps ago, newest slot first;
/// frames are concatenated newest first and the message (if any) goes last.
pub fn encode_observation(history: &GameHistory, frames: usize, window: usize, message: Option<Action>) -> Observation {
    assert!(frames >= 1 && window >= 1, "frames and window must be positive");
    let base = frames * window * BLOCK;
    let mut ones = Vec::new();
    for k in 0..frames {
        for s in 0..window {
            let Some(joint) = history.back(k + s) else { break };
            let offset = (k * window + s) * BLOCK;
            for (p, a) in joint.0.iter().enumerate() {
                ones.push((offset + p * NUM_ACTIONS + a.code()) as u32);
            }
        }
    }
    Observation {
        width: base + usize::from(message.is_some()),
        ones,
        message: message.map(message_feature),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Arc<Observation>,
    pub action: Action,
    pub reward: f64,
    pub next_obs: Arc<Observation>,
    pub terminal: bool,
}

/// FIFO experience memory with uniform sampling (with replacement).
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    storage: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            capacity,
            storage: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn remember(&mut self, t: Transition) {
        if self.storage.len() == self.capacity {
            self.storage.pop_front();
        }
        self.storage.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, index: usize) -> Option<&Transition> {
        self.storage.get(index)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.storage.iter()
    }

    pub fn sample_indices<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<usize> {
        if self.storage.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| rng.gen_range(0..self.storage.len())).collect()
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_lowest(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate().skip(1) {
        if v > q[best] {
            best = i;
        }
    }
    best
}

pub fn greedy_action(q: &[f64]) -> Action {
    Action::ALL[argmax_lowest(q)]
}

/// ε-greedy: one uniform draw decides exploration, a second picks the random move.
pub fn select_action<R: Rng + ?Sized>(
    net: &QNetwork,
    obs: &Observation,
    epsilon: f64,
    rng: &mut R,
) -> Result<Action, NnError> {
    if rng.gen::<f64>() < epsilon {
        return Ok(Action::ALL[rng.gen_range(0..NUM_ACTIONS)]);
    }
    let q = net.forward(&obs.to_dense())?;
    Ok(greedy_action(&q))
}

pub fn decay_epsilon(cfg: &AgentConfig, episode_index: u32) -> f64 {
    let decayed = cfg.epsilon_start * cfg.epsilon_decay.powi(episode_index.min(i32::MAX as u32) as i32);
    decayed.max(cfg.epsilon_min)
}

/// Builds the regression batch: `r` for terminal transitions, otherwise
/// `r + γ · max_a' Q_target(s', a')`.
pub fn build_targets(
    target_net: &QNetwork,
    buffer: &ReplayBuffer,
    indices: &[usize],
    gamma: f64,
    exec: Execution,
) -> Result<TrainBatch, NnError> {
    type Row = (Vec<f64>, usize, f64);
    let rows: Vec<Result<Row, NnError>> = exec.map(indices, |&i| {
        let t = buffer.get(i).expect("sampled index in range");
        let target = if t.terminal || gamma == 0.0 {
            t.reward
        } else {
            let q = target_net.forward(&t.next_obs.to_dense())?;
            t.reward + gamma * q.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        };
        Ok((t.obs.to_dense(), t.action.code(), target))
    });
    let mut batch = TrainBatch::new();
    for row in rows {
        let (x, a, y) = row?;
        batch.push(x, a, y);
    }
    Ok(batch)
}

/// One replay step. Returns `Ok(None)` while the buffer holds fewer than
/// `batch_size` transitions.
pub fn replay_update<R: Rng + ?Sized>(
    net: &mut QNetwork,
    target_net: &QNetwork,
    opt: &mut Optimizer,
    buffer: &ReplayBuffer,
    cfg: &AgentConfig,
    rng: &mut R,
    exec: Execution,
) -> Result<Option<f64>, NnError> {
    if buffer.len() < cfg.batch_size {
        return Ok(None);
    }
    let indices = buffer.sample_indices(rng, cfg.batch_size);
    let batch = build_targets(target_net, buffer, &indices, cfg.gamma, exec)?;
    net.train_batch_with(opt, &batch, exec).map(Some)
}

pub fn maybe_sync_target(
    step_counter: u64,
    cfg: &AgentConfig,
    net: &QNetwork,
    target_net: &mut QNetwork,
) -> Result<bool, NnError> {
    if step_counter.is_multiple_of(cfg.target_sync_every) {
        net.clone_into_target(target_net)?;
        Ok(true)
    } else {
        Ok(false)
    }
}

/// Seeds for an agent's independent random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentSeeds {
    pub init: u64,
    pub explore: u64,
    pub replay: u64,
}

/// A DQN player with its own networks, optimizer, memory and RNG streams.
#[derive(Debug, Clone)]
pub struct DqnAgent {
    cfg: AgentConfig,
    online: QNetwork,
    target: QNetwork,
    optimizer: Optimizer,
    buffer: ReplayBuffer,
    explore_rng: ChaCha8Rng,
    replay_rng: ChaCha8Rng,
    steps: u64,
    exec: Execution,
}

impl DqnAgent {
    pub fn new(cfg: AgentConfig, seeds: AgentSeeds) -> Result<Self, AgentError> {
        cfg.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(seeds.init);
        let online = QNetwork::new(&cfg.layer_dims(), cfg.activation, &mut init_rng)?;
        let target = online.clone();
        let optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, &online)?;
        Ok(DqnAgent {
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            online,
            target,
            optimizer,
            explore_rng: ChaCha8Rng::seed_from_u64(seeds.explore),
            replay_rng: ChaCha8Rng::seed_from_u64(seeds.replay),
            steps: 0,
            exec: Execution::default(),
            cfg,
        })
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn online(&self) -> &QNetwork {
        &self.online
    }

    pub fn target(&self) -> &QNetwork {
        &self.target
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn epsilon(&self, episode: u32) -> f64 {
        decay_epsilon(&self.cfg, episode)
    }

    pub fn observe(&self, history: &GameHistory, message: Option<Action>) -> Observation {
        let message = if self.cfg.receives_message() {
            Some(message.unwrap_or(Action::Rock))
        } else {
            None
        };
        encode_observation(history, self.cfg.frames, self.cfg.window, message)
    }

    pub fn act(&mut self, obs: &Observation, epsilon: f64) -> Result<Action, NnError> {
        select_action(&self.online, obs, epsilon, &mut self.explore_rng)
    }

    pub fn q_values(&self, obs: &Observation) -> Result<Vec<f64>, NnError> {
        self.online.forward(&obs.to_dense())
    }

    pub fn remember(&mut self, t: Transition) {
        self.buffer.remember(t);
    }

    /// Counts one environment step: trains once the buffer holds a batch and
    /// syncs the target network on schedule. Returns the loss if it trained.
    pub fn learn_step(&mut self) -> Result<Option<f64>, NnError> {
        let loss = replay_update(
            &mut self.online,
            &self.target,
            &mut self.optimizer,
            &self.buffer,
            &self.cfg,
            &mut self.replay_rng,
            self.exec,
        )?;
        self.steps += 1;
        maybe_sync_target(self.steps, &self.cfg, &self.online, &mut self.target)?;
        Ok(loss)
    }

    /// Writes `agent.toml` (config and step count) plus `online.qnet` and `target.qnet`.
    pub fn save_checkpoint(&self, dir: impl AsRef<Path>) -> Result<(), AgentError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let meta = CheckpointMeta {
            format: 1,
            steps: self.steps,
            config: self.cfg.clone(),
        };
        let text = toml::to_string(&meta).map_err(|e| AgentError::Checkpoint(e.to_string()))?;
        fs::write(dir.join("agent.toml"), text)?;
        self.online.save_file(dir.join("online.qnet"))?;
        self.target.save_file(dir.join("target.qnet"))?;
        Ok(())
    }

    /// Restores networks and config. Optimizer moments and replay memory start fresh.
    pub fn load_checkpoint(dir: impl AsRef<Path>, seeds: AgentSeeds) -> Result<Self, AgentError> {
        let dir = dir.as_ref();
        let text = fs::read_to_string(dir.join("agent.toml"))?;
        let meta: CheckpointMeta = toml::from_str(&text).map_err(|e| AgentError::Checkpoint(e.to_string()))?;
        let mut agent = DqnAgent::new(meta.config, seeds)?;
        let online = QNetwork::load_file(dir.join("online.qnet"))?;
        let target = QNetwork::load_file(dir.join("target.qnet"))?;
        if online.dims() != agent.online.dims() || target.dims() != agent.online.dims() {
            return Err(AgentError::Checkpoint("network dims do not match config".into()));
        }
        agent.online = online;
        agent.target = target;
        agent.steps = meta.steps;
        Ok(agent)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    format: u32,
    steps: u64,
    config: AgentConfig,
}
