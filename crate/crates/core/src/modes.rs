//! Experimental regimes: fair play, explicit messaging between the two
//! cheating agents, and implicit collusion through a shared shaped reward.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::AgentRole;
use crate::env::{Action, Payoff, RewardVector, NUM_PLAYERS};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModeError {
    #[error("agent index {0} out of range (0..3)")]
    IndexOutOfRange(usize),
    #[error("sender and receiver must be the two cheating agents (fair = {fair}, sender = {sender}, receiver = {receiver})")]
    BadMessagingPair { fair: usize, sender: usize, receiver: usize },
    #[error("a random fair agent needs a cheating regime; fair mode has no cheaters")]
    RandomFairWithoutCheaters,
    #[error("unrecognised mode `{0}` (expected fair, explicit or implicit)")]
    UnknownKind(String),
    #[error("malformed mode tag `{0}`")]
    BadTag(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeKind {
    Fair,
    #[serde(rename = "explicit")]
    ExplicitComm,
    #[serde(rename = "implicit")]
    ImplicitReward,
}

impl ModeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModeKind::Fair => "fair",
            ModeKind::ExplicitComm => "explicit",
            ModeKind::ImplicitReward => "implicit",
        }
    }

    pub fn has_cheaters(self) -> bool {
        self != ModeKind::Fair
    }
}

impl FromStr for ModeKind {
    type Err = ModeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fair" => Ok(ModeKind::Fair),
            "explicit" => Ok(ModeKind::ExplicitComm),
            "implicit" => Ok(ModeKind::ImplicitReward),
            other => Err(ModeError::UnknownKind(other.to_string())),
        }
    }
}

/// How cheaters' rewards are rewritten in the implicit regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapingRule {
    /// +1 when the fair agent loses or ties, -1 when it wins.
    #[default]
    Denoised,
    /// The negation of the fair agent's raw reward.
    Negated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mode {
    pub kind: ModeKind,
    pub fair_index: usize,
    pub sender: usize,
    pub receiver: usize,
    pub fair_is_random: bool,
    #[serde(default)]
    pub shaping: ShapingRule,
}

impl Mode {
    /// Fair agent 0, sender 1, receiver 2.
    pub fn new(kind: ModeKind) -> Self {
        Mode {
            kind,
            fair_index: 0,
            sender: 1,
            receiver: 2,
            fair_is_random: false,
            shaping: ShapingRule::Denoised,
        }
    }

    pub fn fair() -> Self {
        Self::new(ModeKind::Fair)
    }

    pub fn explicit() -> Self {
        Self::new(ModeKind::ExplicitComm)
    }

    pub fn implicit() -> Self {
        Self::new(ModeKind::ImplicitReward)
    }

    pub fn with_random_fair(mut self) -> Self {
        self.fair_is_random = true;
        self
    }

    pub fn validate(&self) -> Result<(), ModeError> {
        for i in [self.fair_index, self.sender, self.receiver] {
            if i >= NUM_PLAYERS {
                return Err(ModeError::IndexOutOfRange(i));
            }
        }
        let pair_ok = self.sender != self.receiver && self.sender != self.fair_index && self.receiver != self.fair_index;
        if self.kind == ModeKind::ExplicitComm && !pair_ok {
            return Err(ModeError::BadMessagingPair {
                fair: self.fair_index,
                sender: self.sender,
                receiver: self.receiver,
            });
        }
        if self.fair_is_random && !self.kind.has_cheaters() {
            return Err(ModeError::RandomFairWithoutCheaters);
        }
        Ok(())
    }

    /// The two agents other than the fair one, in index order.
    pub fn cheaters(&self) -> [usize; 2] {
        let mut it = (0..NUM_PLAYERS).filter(|&i| i != self.fair_index);
        [it.next().unwrap(), it.next().unwrap()]
    }

    pub fn roles(&self) -> [AgentRole; NUM_PLAYERS] {
        let mut roles = [AgentRole::Fair; NUM_PLAYERS];
        if self.kind == ModeKind::ExplicitComm {
            roles[self.sender] = AgentRole::CheatSender;
            roles[self.receiver] = AgentRole::CheatReceiver;
        }
        if self.fair_is_random {
            roles[self.fair_index] = AgentRole::Random;
        }
        roles
    }

    /// Compact tag written into every log row, e.g. `fair`, `explicit:f0:s1r2`,
    /// `implicit:f0:rand`.
    pub fn tag(&self) -> String {
        let mut t = self.kind.as_str().to_string();
        match self.kind {
            ModeKind::Fair => {}
            ModeKind::ExplicitComm => t.push_str(&format!(":f{}:s{}r{}", self.fair_index, self.sender, self.receiver)),
            ModeKind::ImplicitReward => {
                t.push_str(&format!(":f{}", self.fair_index));
                if self.shaping == ShapingRule::Negated {
                    t.push_str(":neg");
                }
            }
        }
        if self.fair_is_random {
            t.push_str(":rand");
        }
        t
    }

    pub fn from_tag(tag: &str) -> Result<Self, ModeError> {
        let bad = || ModeError::BadTag(tag.to_string());
        let mut parts = tag.split(':');
        let kind: ModeKind = parts.next().ok_or_else(bad)?.parse()?;
        let mut mode = Mode::new(kind);
        for part in parts {
            if part == "rand" {
                mode.fair_is_random = true;
            } else if part == "neg" {
                mode.shaping = ShapingRule::Negated;
            } else if let Some(rest) = part.strip_prefix('f') {
                mode.fair_index = rest.parse().map_err(|_| bad())?;
            } else if let Some(rest) = part.strip_prefix('s') {
                let (s, r) = rest.split_once('r').ok_or_else(bad)?;
                mode.sender = s.parse().map_err(|_| bad())?;
                mode.receiver = r.parse().map_err(|_| bad())?;
            } else {
                return Err(bad());
            }
        }
        if kind == ModeKind::ImplicitReward {
            let [a, b] = mode.cheaters();
            mode.sender = a;
            mode.receiver = b;
        }
        mode.validate()?;
        Ok(mode)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

/// Who acts when within one step, and which agent (if any) passes its move to whom.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepPlan {
    pub order: [usize; NUM_PLAYERS],
    /// `(sender, receiver)`: the receiver selects after seeing the sender's move.
    pub message: Option<(usize, usize)>,
    pub shaping: bool,
}

pub fn step_order(mode: &Mode) -> StepPlan {
    match mode.kind {
        ModeKind::ExplicitComm => StepPlan {
            order: [mode.sender, mode.receiver, mode.fair_index],
            message: Some((mode.sender, mode.receiver)),
            shaping: false,
        },
        ModeKind::Fair => StepPlan {
            order: [0, 1, 2],
            message: None,
            shaping: false,
        },
        ModeKind::ImplicitReward => StepPlan {
            order: [0, 1, 2],
            message: None,
            shaping: true,
        },
    }
}

/// Training rewards. Only the cheaters' entries change, and only in the implicit regime.
pub fn shape_rewards(mode: &Mode, raw: RewardVector) -> RewardVector {
    if mode.kind != ModeKind::ImplicitReward {
        return raw;
    }
    let fair = raw.get(mode.fair_index);
    let cheater_reward = match mode.shaping {
        ShapingRule::Denoised => {
            if fair <= Payoff::ZERO {
                Payoff::ONE
            } else {
                Payoff::MINUS_ONE
            }
        }
        ShapingRule::Negated => -fair,
    };
    let mut shaped = raw;
    for c in mode.cheaters() {
        shaped.0[c] = cheater_reward;
    }
    shaped
}

/// Uniform move for the random control agent.
pub fn random_policy<R: Rng + ?Sized>(rng: &mut R) -> Action {
    Action::ALL[rng.gen_range(0..Action::ALL.len())]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{reward, JointAction};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rv(h: [i32; 3]) -> RewardVector {
        RewardVector(h.map(Payoff::from_halves))
    }

    #[test]
    fn plans() {
        let p = step_order(&Mode::fair());
        assert_eq!(p.message, None);
        assert!(!p.shaping);

        let p = step_order(&Mode::explicit());
        assert_eq!(p.order, [1, 2, 0]);
        assert_eq!(p.message, Some((1, 2)));

        let p = step_order(&Mode::implicit());
        assert_eq!(p.message, None);
        assert!(p.shaping);
    }

    #[test]
    fn implicit_shaping_examples() {
        let m = Mode::implicit();
        let shaped = shape_rewards(&m, rv([4, -2, -2]));
        assert_eq!(shaped, rv([4, -2, -2]));
        let shaped = shape_rewards(&m, rv([-2, 1, 1]));
        assert_eq!(shaped, rv([-2, 2, 2]));
        let shaped = shape_rewards(&m, rv([0, 0, 0]));
        assert_eq!(shaped, rv([0, 2, 2]));
        // fair agent wins as part of the pair
        let shaped = shape_rewards(&m, rv([1, 1, -2]));
        assert_eq!(shaped, rv([1, -2, -2]));
    }

    #[test]
    fn negated_variant() {
        let m = Mode {
            shaping: ShapingRule::Negated,
            ..Mode::implicit()
        };
        assert_eq!(shape_rewards(&m, rv([4, -2, -2])), rv([4, -4, -4]));
        assert_eq!(shape_rewards(&m, rv([1, 1, -2])), rv([1, -1, -1]));
    }

    #[test]
    fn fair_and_explicit_are_identity() {
        for j in JointAction::all() {
            let raw = reward(j);
            assert_eq!(shape_rewards(&Mode::fair(), raw), raw);
            assert_eq!(shape_rewards(&Mode::explicit(), raw), raw);
        }
    }

    #[test]
    fn validation_and_tags() {
        assert!(Mode::explicit().validate().is_ok());
        let bad = Mode {
            sender: 0,
            ..Mode::explicit()
        };
        assert!(matches!(bad.validate(), Err(ModeError::BadMessagingPair { .. })));
        assert_eq!(
            Mode::fair().with_random_fair().validate(),
            Err(ModeError::RandomFairWithoutCheaters)
        );
        let m = Mode {
            fair_index: 2,
            sender: 0,
            receiver: 1,
            ..Mode::explicit().with_random_fair()
        };
        assert_eq!(m.tag(), "explicit:f2:s0r1:rand");
        assert_eq!(Mode::from_tag(&m.tag()).unwrap(), m);
        assert_eq!(Mode::from_tag("fair").unwrap(), Mode::fair());
        assert_eq!(Mode::from_tag("implicit:f0").unwrap(), Mode::implicit());
        assert!(Mode::from_tag("cartel").is_err());
        assert!(Mode::from_tag("explicit:f0:s0r2").is_err());
    }

    #[test]
    fn roles_follow_mode() {
        use AgentRole::*;
        assert_eq!(Mode::explicit().roles(), [Fair, CheatSender, CheatReceiver]);
        assert_eq!(Mode::implicit().with_random_fair().roles(), [Random, Fair, Fair]);
    }

    #[test]
    fn random_policy_is_reproducible() {
        let a: Vec<Action> = {
            let mut r = ChaCha8Rng::seed_from_u64(3);
            (0..50).map(|_| random_policy(&mut r)).collect()
        };
        let b: Vec<Action> = {
            let mut r = ChaCha8Rng::seed_from_u64(3);
            (0..50).map(|_| random_policy(&mut r)).collect()
        };
        assert_eq!(a, b);
    }
}
