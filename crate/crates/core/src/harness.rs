//! Seeded training campaigns and the canonical step log.
//!
//! A campaign is `runs_per_lr × learning_rates` fully independent runs. Each
//! run gets fresh agents, its own seed family and its own CSV file; the
//! coordinator writes `manifest.toml` once every run has finished.
//!
//! # Seeds
//!
//! Every random stream is seeded with
//! `splitmix64` folded over `[base_seed, lr_index, run_index, agent_index, purpose]`
//! (see [`derive_seed`]), so any single run can be replayed in isolation.
//!
//! # Step log
//!
//! UTF-8 CSV with header [`LOG_HEADER`]. Actions are integer codes
//! (0 rock, 1 paper, 2 scissors), rewards are exact decimals, `msg` is empty
//! outside the explicit regime and `mode` is [`Mode::tag`].

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{history_retention, AgentConfig, AgentError, AgentRole, AgentSeeds, DqnAgent, Observation, Transition};
use crate::env::{reward, Action, GameHistory, JointAction, Payoff, RewardVector, NUM_PLAYERS};
use crate::modes::{random_policy, shape_rewards, step_order, Mode, ModeError, ModeKind};
use crate::nn::NnError;
use crate::par::Execution;

pub const LOG_HEADER: [&str; 18] = [
    "run_id", "lr", "episode", "step", "a0", "a1", "a2", "r0", "r1", "r2", "sr0", "sr1", "sr2", "eps0", "eps1", "eps2",
    "msg", "mode",
];

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Mode(#[from] ModeError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("run {run_id} diverged at episode {episode}, step {step} (agent {agent}): {source}")]
    Diverged {
        run_id: u32,
        episode: u32,
        step: u32,
        agent: usize,
        source: NnError,
    },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Log { path: PathBuf, message: String },
}

impl HarnessError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    #[serde(rename = "paper")]
    PaperReplication,
}

impl Scale {
    pub fn as_str(self) -> &'static str {
        match self {
            Scale::Desk => "desk",
            Scale::PaperReplication => "paper",
        }
    }
}

/// Campaign-level settings; the `[experiment]` section of a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignSettings {
    pub scale: Scale,
    pub runs_per_lr: u32,
    /// Runs per learning rate for control campaigns (random fair agent).
    pub control_runs_per_lr: u32,
    pub learning_rates: Vec<f64>,
    pub episodes: u32,
    pub steps_per_episode: u32,
    pub base_seed: u64,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: CampaignSettings,
    pub mode: Mode,
    /// Template for every learning agent; `learning_rate` and `role` are set per run.
    pub agent: AgentConfig,
}

impl ExperimentConfig {
    pub fn preset(scale: Scale, mode: Mode) -> Self {
        let (settings, agent) = match scale {
            Scale::Desk => (
                CampaignSettings {
                    scale,
                    runs_per_lr: 2,
                    control_runs_per_lr: 1,
                    learning_rates: vec![0.005],
                    episodes: 20,
                    steps_per_episode: 100,
                    base_seed: 0,
                    output_dir: PathBuf::from("logs"),
                },
                AgentConfig::desk(),
            ),
            Scale::PaperReplication => (
                CampaignSettings {
                    scale,
                    runs_per_lr: 10,
                    control_runs_per_lr: 5,
                    learning_rates: vec![0.001, 0.005, 0.01],
                    episodes: 100,
                    steps_per_episode: 300,
                    base_seed: 0,
                    output_dir: PathBuf::from("logs"),
                },
                AgentConfig::paper(),
            ),
        };
        let mut cfg = ExperimentConfig {
            experiment: settings,
            mode,
            agent,
        };
        if mode.fair_is_random {
            cfg.experiment.runs_per_lr = cfg.experiment.control_runs_per_lr;
        }
        cfg
    }

    pub fn desk(mode: Mode) -> Self {
        Self::preset(Scale::Desk, mode)
    }

    pub fn paper(mode: Mode) -> Self {
        Self::preset(Scale::PaperReplication, mode)
    }

    /// Overlays a TOML config file on the preset chosen by its `experiment.scale`
    /// (or `default_scale`). Keys left out keep their preset values.
    pub fn from_toml_str(text: &str, default_scale: Scale) -> Result<Self> {
        let overlay: toml::Table = text.parse().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        let scale = match overlay.get("experiment").and_then(|e| e.get("scale")) {
            Some(v) => v
                .clone()
                .try_into::<Scale>()
                .map_err(|e| HarnessError::Config(format!("experiment.scale: {e}")))?,
            None => default_scale,
        };
        let random_fair = overlay
            .get("mode")
            .and_then(|m| m.get("fair_is_random"))
            .and_then(|v| v.as_bool())
            .unwrap_or(false);
        let mut mode = Mode::fair();
        mode.fair_is_random = random_fair;
        let mut base = Self::preset(scale, mode);
        base.mode.fair_is_random = false;
        base.apply_overlay(overlay)
    }

    pub fn apply_overlay(&self, overlay: toml::Table) -> Result<Self> {
        let mut base = toml::Table::try_from(self).map_err(|e| HarnessError::Config(e.to_string()))?;
        merge_tables(&mut base, overlay);
        let cfg: ExperimentConfig =
            toml::Value::Table(base).try_into().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.mode.validate()?;
        let e = &self.experiment;
        if e.runs_per_lr == 0 || e.episodes == 0 || e.steps_per_episode == 0 {
            return Err(HarnessError::Config(
                "runs_per_lr, episodes and steps_per_episode must be positive".into(),
            ));
        }
        if e.base_seed > i64::MAX as u64 {
            return Err(HarnessError::Config(format!(
                "base_seed {} exceeds the largest storable seed {}",
                e.base_seed,
                i64::MAX
            )));
        }
        if e.learning_rates.is_empty() {
            return Err(HarnessError::Config("at least one learning rate is required".into()));
        }
        for &lr in &e.learning_rates {
            let agent = AgentConfig {
                learning_rate: lr,
                ..self.agent.clone()
            };
            agent.validate()?;
        }
        Ok(())
    }

    pub fn total_runs(&self) -> u64 {
        u64::from(self.experiment.runs_per_lr) * self.experiment.learning_rates.len() as u64
    }

    pub fn games_per_run(&self) -> u64 {
        u64::from(self.experiment.episodes) * u64::from(self.experiment.steps_per_episode)
    }

    pub fn total_games(&self) -> u64 {
        self.total_runs() * self.games_per_run()
    }

    /// Run and game counts for this scenario and its random-fair control campaign.
    pub fn protocol(&self) -> ProtocolSummary {
        let lrs = self.experiment.learning_rates.len() as u64;
        let control_per_lr = if self.mode.kind.has_cheaters() {
            u64::from(self.experiment.control_runs_per_lr)
        } else {
            0
        };
        ProtocolSummary {
            scenario: self.mode.tag(),
            scale: self.experiment.scale,
            learning_rates: self.experiment.learning_rates.clone(),
            runs_per_lr: u64::from(self.experiment.runs_per_lr),
            total_runs: self.total_runs(),
            games_per_run: self.games_per_run(),
            total_games: self.total_games(),
            control_runs_per_lr: control_per_lr,
            control_runs: control_per_lr * lrs,
            control_games: control_per_lr * lrs * self.games_per_run(),
            input_width: self.agent.input_width(),
            layer_dims: self.agent.layer_dims(),
        }
    }
}

fn merge_tables(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProtocolSummary {
    pub scenario: String,
    pub scale: Scale,
    pub learning_rates: Vec<f64>,
    pub runs_per_lr: u64,
    pub total_runs: u64,
    pub games_per_run: u64,
    pub total_games: u64,
    pub control_runs_per_lr: u64,
    pub control_runs: u64,
    pub control_games: u64,
    pub input_width: usize,
    pub layer_dims: Vec<usize>,
}

impl ProtocolSummary {
    pub fn render(&self) -> String {
        let mut s = String::from("[protocol]\n");
        s.push_str(&toml::to_string(self).expect("summary serializes"));
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamPurpose {
    Init = 0,
    Explore = 1,
    Replay = 2,
    RandomPolicy = 3,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `h = splitmix64(base); h = splitmix64(h ^ part)` for each part in order.
pub fn derive_seed(base_seed: u64, lr_index: usize, run_index: usize, agent: usize, purpose: StreamPurpose) -> u64 {
    [lr_index as u64, run_index as u64, agent as u64, purpose as u64]
        .into_iter()
        .fold(splitmix64(base_seed), |h, part| splitmix64(h ^ part))
}

pub fn agent_seeds(base_seed: u64, lr_index: usize, run_index: usize, agent: usize) -> AgentSeeds {
    AgentSeeds {
        init: derive_seed(base_seed, lr_index, run_index, agent, StreamPurpose::Init),
        explore: derive_seed(base_seed, lr_index, run_index, agent, StreamPurpose::Explore),
        replay: derive_seed(base_seed, lr_index, run_index, agent, StreamPurpose::Replay),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub run_id: u32,
    pub lr: f64,
    pub episode: u32,
    pub step: u32,
    pub actions: JointAction,
    pub raw: RewardVector,
    pub shaped: RewardVector,
    pub epsilons: [f64; NUM_PLAYERS],
    pub message: Option<Action>,
    pub mode: String,
}

impl StepRecord {
    pub fn to_row(&self) -> [String; 18] {
        let a = self.actions.0.map(|x| x.code().to_string());
        let r = self.raw.0.map(|x| x.to_string());
        let s = self.shaped.0.map(|x| x.to_string());
        let e = self.epsilons.map(|x| x.to_string());
        let [a0, a1, a2] = a;
        let [r0, r1, r2] = r;
        let [s0, s1, s2] = s;
        let [e0, e1, e2] = e;
        [
            self.run_id.to_string(),
            self.lr.to_string(),
            self.episode.to_string(),
            self.step.to_string(),
            a0,
            a1,
            a2,
            r0,
            r1,
            r2,
            s0,
            s1,
            s2,
            e0,
            e1,
            e2,
            self.message.map(|m| m.code().to_string()).unwrap_or_default(),
            self.mode.clone(),
        ]
    }

    pub fn from_row<'a, I: IntoIterator<Item = &'a str>>(fields: I) -> std::result::Result<Self, String> {
        let f: Vec<&str> = fields.into_iter().collect();
        if f.len() != LOG_HEADER.len() {
            return Err(format!("expected {} fields, found {}", LOG_HEADER.len(), f.len()));
        }
        fn num<T: std::str::FromStr>(name: &str, s: &str) -> std::result::Result<T, String> {
            s.trim().parse().map_err(|_| format!("bad {name} `{s}`"))
        }
        let act = |i: usize| -> std::result::Result<Action, String> {
            let code: i64 = num(LOG_HEADER[i], f[i])?;
            Action::from_code(code).map_err(|e| e.to_string())
        };
        let pay = |i: usize| {
            Payoff::parse_decimal(f[i]).ok_or_else(|| format!("bad {} `{}`", LOG_HEADER[i], f[i]))
        };
        let message = match f[16].trim() {
            "" => None,
            s => Some(Action::from_code(num("msg", s)?).map_err(|e| e.to_string())?),
        };
        Ok(StepRecord {
            run_id: num("run_id", f[0])?,
            lr: num("lr", f[1])?,
            episode: num("episode", f[2])?,
            step: num("step", f[3])?,
            actions: JointAction([act(4)?, act(5)?, act(6)?]),
            raw: RewardVector([pay(7)?, pay(8)?, pay(9)?]),
            shaped: RewardVector([pay(10)?, pay(11)?, pay(12)?]),
            epsilons: [num("eps0", f[13])?, num("eps1", f[14])?, num("eps2", f[15])?],
            message,
            mode: f[17].to_string(),
        })
    }

    /// Raw rewards re-derive from the actions, and shaped rewards from the mode.
    pub fn is_consistent(&self) -> bool {
        if reward(self.actions) != self.raw {
            return false;
        }
        match Mode::from_tag(&self.mode) {
            Ok(mode) => shape_rewards(&mode, self.raw) == self.shaped,
            Err(_) => false,
        }
    }
}

/// One seat at the table.
#[derive(Debug, Clone)]
pub enum Player {
    Learner(Box<DqnAgent>),
    Random(Box<ChaCha8Rng>),
    /// Always plays the same move and never learns.
    Fixed(Action),
}

impl Player {
    fn epsilon(&self, episode: u32) -> f64 {
        match self {
            Player::Learner(a) => a.epsilon(episode),
            Player::Random(_) => 1.0,
            Player::Fixed(_) => 0.0,
        }
    }

    pub fn as_learner(&self) -> Option<&DqnAgent> {
        match self {
            Player::Learner(a) => Some(a),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
struct Pending {
    obs: Arc<Observation>,
    action: Action,
    reward: f64,
}

/// Everything one run carries from episode to episode.
#[derive(Debug, Clone)]
pub struct RunState {
    pub run_id: u32,
    pub lr: f64,
    pub mode: Mode,
    pub steps_per_episode: u32,
    players: Vec<Player>,
    history: GameHistory,
    pending: Vec<Option<Pending>>,
    mode_tag: String,
}

impl RunState {
    pub fn new(run_id: u32, lr: f64, mode: Mode, steps_per_episode: u32, players: Vec<Player>) -> Self {
        assert_eq!(players.len(), NUM_PLAYERS, "exactly three players");
        let retention = players
            .iter()
            .filter_map(Player::as_learner)
            .map(|a| history_retention(a.config().frames, a.config().window))
            .max()
            .unwrap_or(1);
        RunState {
            run_id,
            lr,
            mode,
            steps_per_episode,
            players,
            history: GameHistory::new(retention),
            pending: vec![None, None, None],
            mode_tag: mode.tag(),
        }
    }

    /// Fresh agents for run `run_index` at learning rate `lr_index` of a campaign.
    pub fn for_campaign(cfg: &ExperimentConfig, lr_index: usize, run_index: usize, exec: Execution) -> Result<Self> {
        let lr = cfg.experiment.learning_rates[lr_index];
        let run_id = (lr_index * cfg.experiment.runs_per_lr as usize + run_index) as u32;
        let roles = cfg.mode.roles();
        let mut players = Vec::with_capacity(NUM_PLAYERS);
        for (i, role) in roles.into_iter().enumerate() {
            let player = if role == AgentRole::Random {
                let seed = derive_seed(cfg.experiment.base_seed, lr_index, run_index, i, StreamPurpose::RandomPolicy);
                Player::Random(Box::new(ChaCha8Rng::seed_from_u64(seed)))
            } else {
                let agent_cfg = AgentConfig {
                    learning_rate: lr,
                    role,
                    ..cfg.agent.clone()
                };
                let seeds = agent_seeds(cfg.experiment.base_seed, lr_index, run_index, i);
                Player::Learner(Box::new(DqnAgent::new(agent_cfg, seeds)?.with_execution(exec)))
            };
            players.push(player);
        }
        Ok(RunState::new(run_id, lr, cfg.mode, cfg.experiment.steps_per_episode, players))
    }

    pub fn players(&self) -> &[Player] {
        &self.players
    }

    pub fn history(&self) -> &GameHistory {
        &self.history
    }

    /// Plays `steps_per_episode` games; history carries over between episodes.
    pub fn play_episode(&mut self, episode: u32) -> Result<Vec<StepRecord>> {
        let plan = step_order(&self.mode);
        let epsilons: [f64; NUM_PLAYERS] = std::array::from_fn(|i| self.players[i].epsilon(episode));
        let mut records = Vec::with_capacity(self.steps_per_episode as usize);

        for step in 0..self.steps_per_episode {
            let last = step + 1 == self.steps_per_episode;
            let mut actions = [Action::Rock; NUM_PLAYERS];
            let mut observations: [Option<Arc<Observation>>; NUM_PLAYERS] = [None, None, None];
            let mut message = None;

            for &i in &plan.order {
                let incoming = match plan.message {
                    Some((_, receiver)) if receiver == i => message,
                    _ => None,
                };
                actions[i] = match &mut self.players[i] {
                    Player::Learner(agent) => {
                        let obs = Arc::new(agent.observe(&self.history, incoming));
                        if let Some(p) = self.pending[i].take() {
                            agent.remember(Transition {
                                obs: p.obs,
                                action: p.action,
                                reward: p.reward,
                                next_obs: Arc::clone(&obs),
                                terminal: false,
                            });
                        }
                        let a = agent.act(&obs, epsilons[i]).map_err(|source| HarnessError::Diverged {
                            run_id: self.run_id,
                            episode,
                            step,
                            agent: i,
                            source,
                        })?;
                        observations[i] = Some(obs);
                        a
                    }
                    Player::Random(rng) => random_policy(rng),
                    Player::Fixed(a) => *a,
                };
                if matches!(plan.message, Some((sender, _)) if sender == i) {
                    message = Some(actions[i]);
                }
            }

            let joint = JointAction(actions);
            let raw = reward(joint);
            let shaped = shape_rewards(&self.mode, raw);
            self.history.push(joint);

            for i in 0..NUM_PLAYERS {
                let Player::Learner(agent) = &mut self.players[i] else { continue };
                let obs = observations[i].take().expect("learner observed this step");
                let r = shaped.get(i).as_f64();
                if last {
                    let next_obs = Arc::new(agent.observe(&self.history, None));
                    agent.remember(Transition {
                        obs,
                        action: actions[i],
                        reward: r,
                        next_obs,
                        terminal: true,
                    });
                } else {
                    self.pending[i] = Some(Pending {
                        obs,
                        action: actions[i],
                        reward: r,
                    });
                }
                agent.learn_step().map_err(|source| HarnessError::Diverged {
                    run_id: self.run_id,
                    episode,
                    step,
                    agent: i,
                    source,
                })?;
            }

            records.push(StepRecord {
                run_id: self.run_id,
                lr: self.lr,
                episode,
                step,
                actions: joint,
                raw,
                shaped,
                epsilons,
                message: plan.message.map(|_| message.expect("sender acted")),
                mode: self.mode_tag.clone(),
            });
        }
        Ok(records)
    }
}

/// Append-only CSV writer for one run's log.
pub struct LogWriter {
    path: PathBuf,
    inner: csv::Writer<BufWriter<File>>,
}

impl LogWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
        let mut inner = csv::Writer::from_writer(BufWriter::new(file));
        inner
            .write_record(LOG_HEADER)
            .map_err(|e| HarnessError::io(&path, e.into()))?;
        Ok(LogWriter { path, inner })
    }

    pub fn write(&mut self, records: &[StepRecord]) -> Result<()> {
        for r in records {
            self.inner
                .write_record(r.to_row())
                .map_err(|e| HarnessError::io(&self.path, e.into()))?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush().map_err(|e| HarnessError::io(&self.path, e))
    }
}

pub fn log_file_name(run_id: u32) -> String {
    format!("run_{run_id:03}.csv")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEntry {
    pub agent: usize,
    pub init: String,
    pub explore: String,
    pub replay: String,
    pub random_policy: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub run_id: u32,
    pub lr_index: usize,
    pub run_index: usize,
    pub lr: f64,
    pub file: String,
    pub complete: bool,
    pub episodes_done: u32,
    pub records: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub seeds: Vec<SeedEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub version: String,
    pub started: String,
    pub finished: String,
    pub total_records: u64,
    pub complete: bool,
    pub config: ExperimentConfig,
    pub runs: Vec<RunStatus>,
}

impl Manifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
        toml::from_str(&text).map_err(|e| HarnessError::Log {
            path,
            message: e.to_string(),
        })
    }
}

fn seed_table(cfg: &ExperimentConfig, lr_index: usize, run_index: usize) -> Vec<SeedEntry> {
    (0..NUM_PLAYERS)
        .map(|agent| {
            let s = agent_seeds(cfg.experiment.base_seed, lr_index, run_index, agent);
            let rp = derive_seed(cfg.experiment.base_seed, lr_index, run_index, agent, StreamPurpose::RandomPolicy);
            SeedEntry {
                agent,
                init: format!("{:#018x}", s.init),
                explore: format!("{:#018x}", s.explore),
                replay: format!("{:#018x}", s.replay),
                random_policy: format!("{rp:#018x}"),
            }
        })
        .collect()
}

/// Trains one run start to finish and writes its log. Divergence is reported
/// in the returned status rather than as an error; I/O failures are errors.
pub fn run_single(cfg: &ExperimentConfig, lr_index: usize, run_index: usize, exec: Execution) -> Result<RunStatus> {
    let mut state = RunState::for_campaign(cfg, lr_index, run_index, exec)?;
    let file = log_file_name(state.run_id);
    let mut writer = LogWriter::create(cfg.experiment.output_dir.join(&file))?;
    let mut status = RunStatus {
        run_id: state.run_id,
        lr_index,
        run_index,
        lr: state.lr,
        file,
        complete: false,
        episodes_done: 0,
        records: 0,
        error: None,
        seeds: seed_table(cfg, lr_index, run_index),
    };
    for episode in 0..cfg.experiment.episodes {
        match state.play_episode(episode) {
            Ok(records) => {
                writer.write(&records)?;
                status.records += records.len() as u64;
                status.episodes_done += 1;
            }
            Err(e @ HarnessError::Diverged { .. }) => {
                status.error = Some(e.to_string());
                writer.finish()?;
                return Ok(status);
            }
            Err(e) => return Err(e),
        }
    }
    writer.finish()?;
    status.complete = true;
    Ok(status)
}

/// Runs every (learning rate, run) pair, then writes the manifest.
pub fn run_campaign(cfg: &ExperimentConfig) -> Result<Manifest> {
    run_campaign_with(cfg, Execution::default())
}

pub fn run_campaign_with(cfg: &ExperimentConfig, exec: Execution) -> Result<Manifest> {
    cfg.validate()?;
    let dir = &cfg.experiment.output_dir;
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let started = chrono::Utc::now().to_rfc3339();

    let jobs: Vec<(usize, usize)> = (0..cfg.experiment.learning_rates.len())
        .flat_map(|l| (0..cfg.experiment.runs_per_lr as usize).map(move |r| (l, r)))
        .collect();
    // Runs are the parallel unit; inside a run everything is sequential.
    let results = exec.map(&jobs, |&(l, r)| run_single(cfg, l, r, Execution::Sequential));
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;

    let manifest = Manifest {
        format: 1,
        version: env!("CARGO_PKG_VERSION").to_string(),
        started,
        finished: chrono::Utc::now().to_rfc3339(),
        total_records: runs.iter().map(|r| r.records).sum(),
        complete: runs.iter().all(|r| r.complete),
        config: cfg.clone(),
        runs,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = toml::to_string(&manifest).map_err(|e| HarnessError::Config(e.to_string()))?;
    let mut f = File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| HarnessError::io(&path, e))?;
    Ok(manifest)
}

/// Mode kind helper used by the CLI.
pub fn mode_for(kind: ModeKind, fair_random: bool) -> Mode {
    let m = Mode::new(kind);
    if fair_random {
        m.with_random_fair()
    } else {
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(mode: Mode) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk(mode);
        cfg.experiment.episodes = 2;
        cfg.experiment.steps_per_episode = 40;
        cfg.experiment.runs_per_lr = 1;
        cfg.agent.window = 4;
        cfg.agent.hidden = vec![16, 9];
        cfg.agent.batch_size = 8;
        cfg
    }

    #[test]
    fn seeds_differ_by_every_coordinate() {
        let base = derive_seed(7, 0, 0, 0, StreamPurpose::Init);
        assert_ne!(base, derive_seed(8, 0, 0, 0, StreamPurpose::Init));
        assert_ne!(base, derive_seed(7, 1, 0, 0, StreamPurpose::Init));
        assert_ne!(base, derive_seed(7, 0, 1, 0, StreamPurpose::Init));
        assert_ne!(base, derive_seed(7, 0, 0, 1, StreamPurpose::Init));
        assert_ne!(base, derive_seed(7, 0, 0, 0, StreamPurpose::Explore));
        assert_eq!(base, derive_seed(7, 0, 0, 0, StreamPurpose::Init));
    }

    #[test]
    fn episode_emits_ordered_consistent_records() {
        let cfg = tiny(Mode::implicit());
        let mut run = RunState::for_campaign(&cfg, 0, 0, Execution::Sequential).unwrap();
        let recs = run.play_episode(0).unwrap();
        assert_eq!(recs.len(), 40);
        assert!(recs.windows(2).all(|w| w[1].step == w[0].step + 1));
        assert!(recs.iter().all(StepRecord::is_consistent));
        assert!(recs.iter().all(|r| r.message.is_none()));
    }

    #[test]
    fn explicit_message_is_sender_action() {
        let cfg = tiny(Mode::explicit());
        let mut run = RunState::for_campaign(&cfg, 0, 0, Execution::Sequential).unwrap();
        for ep in 0..2 {
            for r in run.play_episode(ep).unwrap() {
                assert_eq!(r.message, Some(r.actions.get(1)));
            }
        }
        let receiver = run.players()[2].as_learner().unwrap();
        assert_eq!(receiver.online().input_width(), 3 * 4 * 9 + 1);
        assert_eq!(run.players()[1].as_learner().unwrap().online().input_width(), 3 * 4 * 9);
    }

    #[test]
    fn row_round_trip() {
        let cfg = tiny(Mode::explicit().with_random_fair());
        let mut run = RunState::for_campaign(&cfg, 0, 0, Execution::Sequential).unwrap();
        for r in run.play_episode(0).unwrap() {
            let row = r.to_row();
            let back = StepRecord::from_row(row.iter().map(String::as_str)).unwrap();
            assert_eq!(back, r);
        }
    }

    #[test]
    fn config_overlay_and_unknown_keys() {
        let cfg = ExperimentConfig::from_toml_str(
            "[experiment]\nepisodes = 7\n[mode]\nkind = \"implicit\"\n[agent]\nwindow = 5\n",
            Scale::Desk,
        )
        .unwrap();
        assert_eq!(cfg.experiment.episodes, 7);
        assert_eq!(cfg.experiment.steps_per_episode, 100);
        assert_eq!(cfg.mode.kind, ModeKind::ImplicitReward);
        assert_eq!(cfg.agent.window, 5);
        assert!(ExperimentConfig::from_toml_str("[experiment]\nepsiodes = 7\n", Scale::Desk).is_err());
        assert!(ExperimentConfig::from_toml_str("not toml [", Scale::Desk).is_err());

        let paper = ExperimentConfig::from_toml_str("[experiment]\nscale = \"paper\"\n", Scale::Desk).unwrap();
        assert_eq!(paper, ExperimentConfig::paper(Mode::fair()));
        let echo = ExperimentConfig::from_toml_str(&paper.to_toml(), Scale::Desk).unwrap();
        assert_eq!(echo, paper);
    }

    #[test]
    fn protocol_counts() {
        let p = ExperimentConfig::paper(Mode::implicit()).protocol();
        assert_eq!((p.total_runs, p.total_games), (30, 900_000));
        assert_eq!((p.control_runs_per_lr, p.control_runs), (5, 15));
        assert_eq!(p.layer_dims, vec![8100, 2700, 9, 3]);
        let control = ExperimentConfig::paper(Mode::implicit().with_random_fair());
        assert_eq!(control.total_runs(), 15);
        let d = ExperimentConfig::desk(Mode::fair());
        assert_eq!(d.total_games(), 4_000);
        assert_eq!(d.protocol().control_runs, 0);
    }
}
