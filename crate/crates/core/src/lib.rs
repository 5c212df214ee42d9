//! Seeded simulator of three DQN agents playing three-player
//! rock-paper-scissors, with fair, explicit-communication and
//! implicit-reward collusion regimes, plus an offline log analyzer.
//!
//! Module map:
//! - [`env`]: actions, payoff table, bounded game history
//! - [`nn`]: dense Q-network, masked MSE, SGD/Adam, checkpoints
//! - [`agent`]: observation encoding, replay buffer, DQN agent
//! - [`modes`]: collusion regimes, message passing, reward shaping
//! - [`harness`]: campaign configuration, seeded runs, step logs, manifest
//! - [`analysis`]: episode statistics, period detection, stage labels
//! - [`par`]: sequential / rayon execution switch

pub mod agent;
pub mod analysis;
pub mod env;
pub mod harness;
pub mod modes;
pub mod nn;
pub mod par;

pub use agent::{AgentConfig, AgentRole, DqnAgent};
pub use analysis::{analyze_dir, AnalysisOptions, Stage, StageLabel, StageThresholds};
pub use env::{reward, Action, JointAction, Payoff, RewardVector};
pub use harness::{run_campaign, run_campaign_with, ExperimentConfig, Scale};
pub use modes::{Mode, ModeKind};
pub use par::Execution;
