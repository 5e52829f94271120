//! Game instances and single-round resolution.
//!
//! A KPR round: every agent picks one restaurant; each occupied restaurant
//! serves exactly one of its arrivals, drawn uniformly, who receives that
//! restaurant's utility. The minority-game mode has two options and pays 1
//! to everyone on the strictly less crowded side.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RngStream;

#[derive(Debug, Error, PartialEq)]
pub enum GameError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("profile has {got} choices, expected {expected}")]
    ProfileLength { expected: usize, got: usize },
    #[error("agent {agent} chose restaurant {choice}, valid range is 0..{m}")]
    ChoiceOutOfRange {
        agent: usize,
        choice: usize,
        m: usize,
    },
    #[error("operation requires {expected:?} mode, config is {actual:?}")]
    WrongMode { expected: Mode, actual: Mode },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    Kpr,
    Minority,
}

/// How much of a resolved round each participant observes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FeedbackLevel {
    OwnOnly,
    Occupancy,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameConfig {
    pub mode: Mode,
    pub n_players: usize,
    pub m_restaurants: usize,
    /// Rank utilities, best first. All equal for the unranked game.
    pub utilities: Vec<f64>,
    pub horizon: usize,
    pub seed: u64,
    pub feedback_level: FeedbackLevel,
}

impl GameConfig {
    /// Unranked KPR: unit prize at every restaurant.
    pub fn unranked(n_players: usize, m_restaurants: usize) -> Self {
        Self {
            mode: Mode::Kpr,
            n_players,
            m_restaurants,
            utilities: vec![1.0; m_restaurants],
            horizon: 1,
            seed: 0,
            feedback_level: FeedbackLevel::OwnOnly,
        }
    }

    /// Ranked KPR with explicit utilities (best restaurant first).
    pub fn ranked(n_players: usize, utilities: Vec<f64>) -> Self {
        Self {
            m_restaurants: utilities.len(),
            utilities,
            ..Self::unranked(n_players, 0)
        }
    }

    /// Ranked KPR with the default linear scale `u_k = (m - k + 1) / m`.
    pub fn ranked_default(n_players: usize, m_restaurants: usize) -> Self {
        Self::ranked(n_players, default_ranked_utilities(m_restaurants))
    }

    pub fn minority(n_players: usize) -> Self {
        Self {
            mode: Mode::Minority,
            ..Self::unranked(n_players, 2)
        }
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_feedback(mut self, feedback_level: FeedbackLevel) -> Self {
        self.feedback_level = feedback_level;
        self
    }

    pub fn is_ranked(&self) -> bool {
        self.utilities.windows(2).any(|w| w[1] < w[0])
    }

    pub fn validate(&self) -> Result<(), GameError> {
        let bad = |msg: String| Err(GameError::InvalidConfig(msg));
        if self.n_players == 0 {
            return bad("n_players must be positive".into());
        }
        if self.m_restaurants == 0 {
            return bad("m_restaurants must be positive".into());
        }
        if self.horizon == 0 {
            return bad("horizon must be positive".into());
        }
        if self.utilities.len() != self.m_restaurants {
            return bad(format!(
                "utilities has {} entries, m_restaurants is {}",
                self.utilities.len(),
                self.m_restaurants
            ));
        }
        if let Some(u) = self
            .utilities
            .iter()
            .find(|u| !(u.is_finite() && **u > 0.0))
        {
            return bad(format!("utilities must be positive and finite, got {u}"));
        }
        if self.utilities.windows(2).any(|w| w[1] > w[0]) {
            return bad("utilities must be non-increasing (best restaurant first)".into());
        }
        if self.mode == Mode::Minority {
            if self.m_restaurants != 2 {
                return bad("minority mode requires exactly 2 options".into());
            }
            if self.is_ranked() {
                return bad("minority mode requires equal utilities".into());
            }
        }
        Ok(())
    }

    pub fn require_mode(&self, expected: Mode) -> Result<(), GameError> {
        if self.mode == expected {
            Ok(())
        } else {
            Err(GameError::WrongMode {
                expected,
                actual: self.mode,
            })
        }
    }
}

pub fn default_ranked_utilities(m: usize) -> Vec<f64> {
    (1..=m).map(|k| (m - k + 1) as f64 / m as f64).collect()
}

/// One round's simultaneous choices, indexed by agent.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChoiceProfile {
    pub choices: Vec<usize>,
}

impl ChoiceProfile {
    pub fn new(choices: Vec<usize>) -> Self {
        Self { choices }
    }

    pub fn len(&self) -> usize {
        self.choices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.choices.is_empty()
    }

    pub fn validate(&self, config: &GameConfig) -> Result<(), GameError> {
        if self.choices.len() != config.n_players {
            return Err(GameError::ProfileLength {
                expected: config.n_players,
                got: self.choices.len(),
            });
        }
        match self.choices.iter().position(|&c| c >= config.m_restaurants) {
            Some(agent) => Err(GameError::ChoiceOutOfRange {
                agent,
                choice: self.choices[agent],
                m: config.m_restaurants,
            }),
            None => Ok(()),
        }
    }

    /// Arrival counts per restaurant.
    pub fn arrivals(&self, m: usize) -> Vec<u32> {
        let mut arrivals = vec![0u32; m];
        for &c in &self.choices {
            arrivals[c] += 1;
        }
        arrivals
    }
}

impl From<Vec<usize>> for ChoiceProfile {
    fn from(choices: Vec<usize>) -> Self {
        Self::new(choices)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundOutcome {
    pub arrivals: Vec<u32>,
    /// Served agent per restaurant; `None` for empty restaurants and in minority mode.
    pub winner: Vec<Option<usize>>,
    pub payoffs: Vec<f64>,
    pub occupied_count: usize,
}

impl RoundOutcome {
    pub fn won(&self, agent: usize) -> bool {
        self.payoffs[agent] > 0.0
    }
}

/// Resolves a KPR round. Restaurants are visited in index order and each
/// occupied one draws its winner uniformly among its arrivals (ordered by
/// agent index) with a single `below(k)` call on `rng`.
pub fn resolve_round(
    config: &GameConfig,
    profile: &ChoiceProfile,
    rng: &mut RngStream,
) -> Result<RoundOutcome, GameError> {
    config.require_mode(Mode::Kpr)?;
    profile.validate(config)?;
    let m = config.m_restaurants;

    let mut arrivals_by: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (agent, &choice) in profile.choices.iter().enumerate() {
        arrivals_by[choice].push(agent);
    }

    let mut winner = vec![None; m];
    let mut payoffs = vec![0.0; config.n_players];
    for (r, agents) in arrivals_by.iter().enumerate() {
        if agents.is_empty() {
            continue;
        }
        let served = agents[rng.below(agents.len())];
        winner[r] = Some(served);
        payoffs[served] = config.utilities[r];
    }

    let arrivals: Vec<u32> = arrivals_by.iter().map(|a| a.len() as u32).collect();
    let occupied_count = arrivals.iter().filter(|&&a| a > 0).count();
    Ok(RoundOutcome {
        arrivals,
        winner,
        payoffs,
        occupied_count,
    })
}

/// Resolves a minority-game round: everyone on the strictly smaller side
/// gets 1, an exact tie pays nobody.
pub fn resolve_minority_round(
    config: &GameConfig,
    profile: &ChoiceProfile,
) -> Result<RoundOutcome, GameError> {
    if config.mode != Mode::Minority || config.m_restaurants != 2 {
        return Err(GameError::WrongMode {
            expected: Mode::Minority,
            actual: config.mode,
        });
    }
    profile.validate(config)?;
    let arrivals = profile.arrivals(2);
    let minority = match arrivals[0].cmp(&arrivals[1]) {
        std::cmp::Ordering::Less => Some(0),
        std::cmp::Ordering::Greater => Some(1),
        std::cmp::Ordering::Equal => None,
    };
    let payoffs = profile
        .choices
        .iter()
        .map(|&c| if Some(c) == minority { 1.0 } else { 0.0 })
        .collect();
    let occupied_count = arrivals.iter().filter(|&&a| a > 0).count();
    Ok(RoundOutcome {
        arrivals,
        winner: vec![None; 2],
        payoffs,
        occupied_count,
    })
}

/// Dispatches on the config's mode. The minority mode draws nothing from `rng`.
pub fn resolve(
    config: &GameConfig,
    profile: &ChoiceProfile,
    rng: &mut RngStream,
) -> Result<RoundOutcome, GameError> {
    match config.mode {
        Mode::Kpr => resolve_round(config, profile, rng),
        Mode::Minority => resolve_minority_round(config, profile),
    }
}

/// Fraction of restaurants occupied this round.
pub fn utilization(outcome: &RoundOutcome, config: &GameConfig) -> f64 {
    outcome.occupied_count as f64 / config.m_restaurants as f64
}
