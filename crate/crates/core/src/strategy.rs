//! Decision rules for agents.
//!
//! Seven rules are provided: two zero-information KPR heuristics
//! (uniform random, stick-if-won), a rank-driven rule for ranked games, a
//! cumulative-payoff reinforcement learner, and three behavioural types
//! defined purely by how often they change restaurant (noise trader,
//! stable, intermediate).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{ChoiceProfile, FeedbackLevel, RoundOutcome};
use crate::rng::RngStream;

pub const DEFAULT_P_NOISE: f64 = 0.9;
pub const DEFAULT_P_SWITCH: f64 = 0.15;
pub const DEFAULT_INITIAL_PROPENSITY: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum StrategyError {
    #[error("{strategy}: parameter {name} = {value} is out of range ({expected})")]
    OutOfRange {
        strategy: StrategyId,
        name: &'static str,
        value: f64,
        expected: &'static str,
    },
    #[error("{strategy} does not take parameter {name}")]
    NotApplicable {
        strategy: StrategyId,
        name: &'static str,
    },
    #[error("unknown strategy '{0}'")]
    Unknown(String),
    #[error("strategy counts sum to {got}, expected {expected} players")]
    CountMismatch { expected: usize, got: usize },
    #[error("restaurant count must be positive")]
    NoRestaurants,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StrategyId {
    UniformRandom,
    StickIfWon,
    RankBiased,
    Reinforcement,
    NoiseTrader,
    Stable,
    Intermediate,
}

impl StrategyId {
    pub const ALL: [StrategyId; 7] = [
        StrategyId::UniformRandom,
        StrategyId::StickIfWon,
        StrategyId::RankBiased,
        StrategyId::Reinforcement,
        StrategyId::NoiseTrader,
        StrategyId::Stable,
        StrategyId::Intermediate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyId::UniformRandom => "UNIFORM_RANDOM",
            StrategyId::StickIfWon => "STICK_IF_WON",
            StrategyId::RankBiased => "RANK_BIASED",
            StrategyId::Reinforcement => "REINFORCEMENT",
            StrategyId::NoiseTrader => "NOISE_TRADER",
            StrategyId::Stable => "STABLE",
            StrategyId::Intermediate => "INTERMEDIATE",
        }
    }
}

impl fmt::Display for StrategyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyId {
    type Err = StrategyError;

    /// Case-insensitive; accepts `stick_if_won`, `STICK-IF-WON` and so on.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        StrategyId::ALL
            .into_iter()
            .find(|id| id.as_str() == norm)
            .ok_or_else(|| StrategyError::Unknown(s.to_string()))
    }
}

/// Optional per-strategy parameters. Unset fields take the defaults above;
/// setting a field the strategy does not use is an error.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_noise: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_switch: Option<f64>,
    /// Initial propensity (REINFORCEMENT).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<f64>,
    /// Propensity decay per round in [0, 1) (REINFORCEMENT, default 0).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forgetting: Option<f64>,
    /// Probability of a uniform exploratory pick (REINFORCEMENT, default 0).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exploration: Option<f64>,
    /// Allow STICK_IF_WON to resample the restaurant it just lost at.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub include_lost: Option<bool>,
}

impl StrategyParams {
    fn is_set(&self) -> [(&'static str, bool); 6] {
        [
            ("p_noise", self.p_noise.is_some()),
            ("p_switch", self.p_switch.is_some()),
            ("init", self.init.is_some()),
            ("forgetting", self.forgetting.is_some()),
            ("exploration", self.exploration.is_some()),
            ("include_lost", self.include_lost.is_some()),
        ]
    }
}

/// The strategy of one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentStrategy {
    pub strategy_id: StrategyId,
    #[serde(default)]
    pub params: StrategyParams,
}

impl AgentStrategy {
    pub fn new(strategy_id: StrategyId) -> Self {
        Self {
            strategy_id,
            params: StrategyParams::default(),
        }
    }

    pub fn with_params(strategy_id: StrategyId, params: StrategyParams) -> Self {
        Self {
            strategy_id,
            params,
        }
    }
}

/// One entry of a strategy assignment file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySpec {
    pub strategy_id: StrategyId,
    #[serde(default)]
    pub params: StrategyParams,
    pub count: usize,
}

impl StrategySpec {
    pub fn new(strategy_id: StrategyId, count: usize) -> Self {
        Self {
            strategy_id,
            params: StrategyParams::default(),
            count,
        }
    }
}

/// Expands `[{strategy_id, params, count}]` into one strategy per agent, in
/// file order.
pub fn expand_assignment(
    specs: &[StrategySpec],
    n_players: usize,
) -> Result<Vec<AgentStrategy>, StrategyError> {
    let total: usize = specs.iter().map(|s| s.count).sum();
    if total != n_players {
        return Err(StrategyError::CountMismatch {
            expected: n_players,
            got: total,
        });
    }
    Ok(specs
        .iter()
        .flat_map(|s| {
            std::iter::repeat_n(
                AgentStrategy::with_params(s.strategy_id, s.params.clone()),
                s.count,
            )
        })
        .collect())
}

/// What an agent sees after a round. Fields beyond the agent's own result
/// are populated only when the feedback level allows it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub round_index: usize,
    pub own_choice: usize,
    pub own_payoff: f64,
    pub won: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occupancy: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub full_profile: Option<ChoiceProfile>,
}

impl Observation {
    pub fn for_agent(
        feedback: FeedbackLevel,
        round_index: usize,
        agent: usize,
        profile: &ChoiceProfile,
        outcome: &RoundOutcome,
    ) -> Self {
        Self {
            round_index,
            own_choice: profile.choices[agent],
            own_payoff: outcome.payoffs[agent],
            won: outcome.won(agent),
            occupancy: (feedback >= FeedbackLevel::Occupancy).then(|| outcome.arrivals.clone()),
            full_profile: (feedback == FeedbackLevel::Full).then(|| profile.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Rule {
    UniformRandom,
    StickIfWon { include_lost: bool },
    RankBiased { weights: Vec<f64> },
    Reinforcement { forgetting: f64, exploration: f64 },
    NoiseTrader { p_noise: f64 },
    Stable { home: usize },
    Intermediate { p_switch: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    strategy_id: StrategyId,
    params: StrategyParams,
    rule: Rule,
    m: usize,
    memory: Option<Observation>,
    propensities: Vec<f64>,
    cumulative_score: f64,
}

fn check_probability(
    strategy: StrategyId,
    name: &'static str,
    value: Option<f64>,
    default: f64,
) -> Result<f64, StrategyError> {
    let v = value.unwrap_or(default);
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(StrategyError::OutOfRange {
            strategy,
            name,
            value: v,
            expected: "[0, 1]",
        })
    }
}

/// Builds an agent. `utilities` are the game's rank utilities (their length
/// is the number of restaurants); only RANK_BIASED reads their values.
/// STABLE draws its permanent restaurant from `rng` here.
pub fn init_agent(
    strategy: &AgentStrategy,
    utilities: &[f64],
    rng: &mut RngStream,
) -> Result<AgentState, StrategyError> {
    let id = strategy.strategy_id;
    let params = &strategy.params;
    let m = utilities.len();
    if m == 0 {
        return Err(StrategyError::NoRestaurants);
    }

    let allowed: &[&str] = match id {
        StrategyId::UniformRandom | StrategyId::RankBiased | StrategyId::Stable => &[],
        StrategyId::StickIfWon => &["include_lost"],
        StrategyId::Reinforcement => &["init", "forgetting", "exploration"],
        StrategyId::NoiseTrader => &["p_noise"],
        StrategyId::Intermediate => &["p_switch"],
    };
    if let Some((name, _)) = params
        .is_set()
        .into_iter()
        .find(|(n, set)| *set && !allowed.contains(n))
    {
        return Err(StrategyError::NotApplicable { strategy: id, name });
    }

    let mut propensities = Vec::new();
    let rule = match id {
        StrategyId::UniformRandom => Rule::UniformRandom,
        StrategyId::StickIfWon => Rule::StickIfWon {
            include_lost: params.include_lost.unwrap_or(false),
        },
        StrategyId::RankBiased => Rule::RankBiased {
            weights: utilities.to_vec(),
        },
        StrategyId::Reinforcement => {
            let init = params.init.unwrap_or(DEFAULT_INITIAL_PROPENSITY);
            if !(init.is_finite() && init > 0.0) {
                return Err(StrategyError::OutOfRange {
                    strategy: id,
                    name: "init",
                    value: init,
                    expected: "positive and finite",
                });
            }
            let forgetting = params.forgetting.unwrap_or(0.0);
            if !(0.0..1.0).contains(&forgetting) {
                return Err(StrategyError::OutOfRange {
                    strategy: id,
                    name: "forgetting",
                    value: forgetting,
                    expected: "[0, 1)",
                });
            }
            let exploration = check_probability(id, "exploration", params.exploration, 0.0)?;
            propensities = vec![init; m];
            Rule::Reinforcement {
                forgetting,
                exploration,
            }
        }
        StrategyId::NoiseTrader => Rule::NoiseTrader {
            p_noise: check_probability(id, "p_noise", params.p_noise, DEFAULT_P_NOISE)?,
        },
        StrategyId::Stable => Rule::Stable { home: rng.below(m) },
        StrategyId::Intermediate => Rule::Intermediate {
            p_switch: check_probability(id, "p_switch", params.p_switch, DEFAULT_P_SWITCH)?,
        },
    };

    Ok(AgentState {
        strategy_id: id,
        params: params.clone(),
        rule,
        m,
        memory: None,
        propensities,
        cumulative_score: 0.0,
    })
}

impl AgentState {
    pub fn strategy_id(&self) -> StrategyId {
        self.strategy_id
    }

    pub fn params(&self) -> &StrategyParams {
        &self.params
    }

    pub fn restaurants(&self) -> usize {
        self.m
    }

    /// Last observation, `None` before the first round resolves.
    pub fn memory(&self) -> Option<&Observation> {
        self.memory.as_ref()
    }

    pub fn last_choice(&self) -> Option<usize> {
        self.memory.as_ref().map(|o| o.own_choice)
    }

    /// Empty unless the strategy is REINFORCEMENT.
    pub fn propensities(&self) -> &[f64] {
        &self.propensities
    }

    pub fn cumulative_score(&self) -> f64 {
        self.cumulative_score
    }

    /// The permanent restaurant of a STABLE agent.
    pub fn home(&self) -> Option<usize> {
        match self.rule {
            Rule::Stable { home } => Some(home),
            _ => None,
        }
    }

    pub fn choose(&self, rng: &mut RngStream) -> usize {
        let m = self.m;
        let last = self.last_choice();
        match &self.rule {
            Rule::UniformRandom => rng.below(m),
            Rule::StickIfWon { include_lost } => match &self.memory {
                None => rng.below(m),
                Some(obs) if obs.won => obs.own_choice,
                Some(_) if *include_lost || m == 1 => rng.below(m),
                Some(obs) => {
                    let pick = rng.below(m - 1);
                    if pick >= obs.own_choice {
                        pick + 1
                    } else {
                        pick
                    }
                }
            },
            Rule::RankBiased { weights } => rng.categorical(weights),
            Rule::Reinforcement { exploration, .. } => {
                if *exploration > 0.0 && rng.bernoulli(*exploration) {
                    rng.below(m)
                } else {
                    rng.categorical(&self.propensities)
                }
            }
            Rule::NoiseTrader { p_noise: p } | Rule::Intermediate { p_switch: p } => match last {
                Some(prev) if !rng.bernoulli(*p) => prev,
                _ => rng.below(m),
            },
            Rule::Stable { home } => *home,
        }
    }

    pub fn update(&mut self, obs: Observation) {
        self.cumulative_score += obs.own_payoff;
        if let Rule::Reinforcement { forgetting, .. } = self.rule {
            if forgetting > 0.0 {
                for q in &mut self.propensities {
                    *q *= 1.0 - forgetting;
                }
            }
            self.propensities[obs.own_choice] += obs.own_payoff;
        }
        self.memory = Some(obs);
    }
}
