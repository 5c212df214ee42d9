//! Three-player rock-paper-scissors: actions, payoffs and the rolling game history.
//!
//! Payoffs are kept as exact half-units so zero-sum checks never need a
//! tolerance. Action codes are fixed: `0 = Rock`, `1 = Paper`, `2 = Scissors`.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub const NUM_PLAYERS: usize = 3;
pub const NUM_ACTIONS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ActionError {
    #[error("action code {0} is not one of 0 (rock), 1 (paper), 2 (scissors)")]
    InvalidCode(i64),
    #[error("unknown action name `{0}`")]
    InvalidName(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Rock,
    Paper,
    Scissors,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Rock, Action::Paper, Action::Scissors];

    pub fn code(self) -> usize {
        match self {
            Action::Rock => 0,
            Action::Paper => 1,
            Action::Scissors => 2,
        }
    }

    pub fn from_code(code: i64) -> Result<Self, ActionError> {
        match code {
            0 => Ok(Action::Rock),
            1 => Ok(Action::Paper),
            2 => Ok(Action::Scissors),
            other => Err(ActionError::InvalidCode(other)),
        }
    }

    /// Paper beats Rock, Rock beats Scissors, Scissors beats Paper.
    pub fn beats(self, other: Action) -> bool {
        matches!(
            (self, other),
            (Action::Paper, Action::Rock)
                | (Action::Rock, Action::Scissors)
                | (Action::Scissors, Action::Paper)
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Rock => "rock",
            Action::Paper => "paper",
            Action::Scissors => "scissors",
        }
    }
}

impl TryFrom<i64> for Action {
    type Error = ActionError;

    fn try_from(code: i64) -> Result<Self, Self::Error> {
        Action::from_code(code)
    }
}

impl FromStr for Action {
    type Err = ActionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rock" | "r" | "0" => Ok(Action::Rock),
            "paper" | "p" | "1" => Ok(Action::Paper),
            "scissors" | "s" | "2" => Ok(Action::Scissors),
            other => Err(ActionError::InvalidName(other.to_string())),
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One move per agent, in fixed agent order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct JointAction(pub [Action; NUM_PLAYERS]);

impl JointAction {
    pub fn new(a0: Action, a1: Action, a2: Action) -> Self {
        JointAction([a0, a1, a2])
    }

    pub fn get(&self, agent: usize) -> Action {
        self.0[agent]
    }

    /// All 27 joint actions in lexicographic code order.
    pub fn all() -> impl Iterator<Item = JointAction> {
        Action::ALL.into_iter().flat_map(|a| {
            Action::ALL
                .into_iter()
                .flat_map(move |b| Action::ALL.into_iter().map(move |c| JointAction::new(a, b, c)))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Outcome {
    AllSame,
    AllDistinct,
    /// The odd-one-out agent beats the pair.
    SingleWinner(usize),
    /// The odd-one-out agent loses to the pair.
    SingleLoser(usize),
}

pub fn classify_outcome(joint: JointAction) -> Outcome {
    let [a, b, c] = joint.0;
    if a == b && b == c {
        return Outcome::AllSame;
    }
    if a != b && b != c && a != c {
        return Outcome::AllDistinct;
    }
    let (odd, odd_action, pair_action) = if b == c {
        (0, a, b)
    } else if a == c {
        (1, b, a)
    } else {
        (2, c, a)
    };
    if odd_action.beats(pair_action) {
        Outcome::SingleWinner(odd)
    } else {
        Outcome::SingleLoser(odd)
    }
}

/// An exact payoff stored as a count of halves (`Payoff(1)` is 0.5).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Payoff(i32);

impl Payoff {
    pub const ZERO: Payoff = Payoff(0);
    pub const HALF: Payoff = Payoff(1);
    pub const ONE: Payoff = Payoff(2);
    pub const TWO: Payoff = Payoff(4);
    pub const MINUS_ONE: Payoff = Payoff(-2);

    pub const fn from_halves(halves: i32) -> Self {
        Payoff(halves)
    }

    pub fn halves(self) -> i32 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.0) / 2.0
    }

    /// Parses the exact decimal strings written to logs (`-1`, `0`, `0.5`, `2`, ...).
    pub fn parse_decimal(s: &str) -> Option<Self> {
        let s = s.trim();
        let (neg, body) = match s.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, s),
        };
        let (int, frac) = match body.split_once('.') {
            Some((i, f)) => (i, f),
            None => (body, ""),
        };
        if int.is_empty() || !int.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        let whole: i32 = int.parse().ok()?;
        let half = match frac.trim_end_matches('0') {
            "" => 0,
            "5" => 1,
            _ => return None,
        };
        let halves = whole.checked_mul(2)?.checked_add(half)?;
        Some(Payoff(if neg { -halves } else { halves }))
    }
}

impl std::ops::Neg for Payoff {
    type Output = Payoff;
    fn neg(self) -> Payoff {
        Payoff(-self.0)
    }
}

impl std::ops::Add for Payoff {
    type Output = Payoff;
    fn add(self, rhs: Payoff) -> Payoff {
        Payoff(self.0 + rhs.0)
    }
}

impl fmt::Display for Payoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let whole = self.0 / 2;
        if self.0 % 2 == 0 {
            write!(f, "{whole}")
        } else if self.0 < 0 {
            write!(f, "-{}.5", whole.abs())
        } else {
            write!(f, "{whole}.5")
        }
    }
}

/// Per-step payoff triple, indexed by agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct RewardVector(pub [Payoff; NUM_PLAYERS]);

impl RewardVector {
    pub fn get(&self, agent: usize) -> Payoff {
        self.0[agent]
    }

    pub fn sum(&self) -> Payoff {
        self.0.iter().fold(Payoff::ZERO, |acc, &p| acc + p)
    }

    pub fn to_f64(&self) -> [f64; NUM_PLAYERS] {
        self.0.map(Payoff::as_f64)
    }
}

/// Table payoffs: ties pay nothing, a lone winner takes 2 from the pair,
/// a lone loser pays 1 split between the pair.
pub fn reward(joint: JointAction) -> RewardVector {
    match classify_outcome(joint) {
        Outcome::AllSame | Outcome::AllDistinct => RewardVector::default(),
        Outcome::SingleWinner(i) => {
            let mut r = [Payoff::MINUS_ONE; NUM_PLAYERS];
            r[i] = Payoff::TWO;
            RewardVector(r)
        }
        Outcome::SingleLoser(i) => {
            let mut r = [Payoff::HALF; NUM_PLAYERS];
            r[i] = Payoff::MINUS_ONE;
            RewardVector(r)
        }
    }
}

/// Bounded FIFO of past joint actions, newest at the back.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GameHistory {
    window: VecDeque<JointAction>,
    capacity: usize,
}

impl GameHistory {
    /// # Panics
    /// If `capacity` is zero.
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "history capacity must be positive");
        GameHistory {
            window: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn push(&mut self, joint: JointAction) {
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back(joint);
    }

    /// Value-style variant of [`GameHistory::push`].
    pub fn pushed(mut self, joint: JointAction) -> Self {
        self.push(joint);
        self
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    /// Number of real entries so far (saturates at capacity).
    pub fn fill_count(&self) -> usize {
        self.window.len()
    }

    /// The entry `steps_back` steps before the newest (0 = newest), if retained.
    pub fn back(&self, steps_back: usize) -> Option<JointAction> {
        let len = self.window.len();
        if steps_back >= len {
            None
        } else {
            Some(self.window[len - 1 - steps_back])
        }
    }

    pub fn newest(&self) -> Option<JointAction> {
        self.back(0)
    }

    pub fn clear(&mut self) {
        self.window.clear();
    }

    pub fn iter(&self) -> impl Iterator<Item = &JointAction> {
        self.window.iter()
    }
}
