//! Repeated play: drives a population through T simultaneous rounds and
//! aggregates replicated runs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{self, ChoiceProfile, GameConfig, GameError, Mode, RoundOutcome};
use crate::rng::{RngStream, StreamKey};
use crate::strategy::{init_agent, AgentState, AgentStrategy, Observation, StrategyError};

pub const DEFAULT_CONVERGENCE_THRESHOLD: f64 = 1.0;
pub const DEFAULT_CONVERGENCE_WINDOW: usize = 10;
const UTILIZATION_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error("strategy assignment covers {got} agents, config has {expected}")]
    AssignmentMismatch { expected: usize, got: usize },
    #[error("burn-in {burn_in} must be smaller than the horizon {horizon}")]
    BurnIn { burn_in: usize, horizon: usize },
    #[error("at least one replication is required")]
    NoReplications,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TraceSource {
    Simulated,
    ReplayedSession,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundRecord {
    pub profile: ChoiceProfile,
    pub outcome: RoundOutcome,
    /// Agents whose choice was imputed after a missed deadline.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub defaulted: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trace {
    pub config: GameConfig,
    /// Per agent; `None` marks a human participant.
    pub strategy_assignment: Vec<Option<AgentStrategy>>,
    pub rounds: Vec<RoundRecord>,
    pub per_round_utilization: Vec<f64>,
    pub source: TraceSource,
}

impl Trace {
    pub fn new(
        config: GameConfig,
        strategy_assignment: Vec<Option<AgentStrategy>>,
        rounds: Vec<RoundRecord>,
        source: TraceSource,
    ) -> Self {
        let per_round_utilization = rounds
            .iter()
            .map(|r| game::utilization(&r.outcome, &config))
            .collect();
        Self {
            config,
            strategy_assignment,
            rounds,
            per_round_utilization,
            source,
        }
    }

    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }

    pub fn n_agents(&self) -> usize {
        self.config.n_players
    }

    /// Same game, same assignment, same rounds; ignores `source`.
    pub fn same_play(&self, other: &Trace) -> bool {
        self.config == other.config
            && self.strategy_assignment == other.strategy_assignment
            && self.rounds == other.rounds
            && self.per_round_utilization == other.per_round_utilization
    }

    /// Checks the structural invariants of a trace loaded from disk.
    pub fn validate(&self) -> Result<(), String> {
        self.config.validate().map_err(|e| e.to_string())?;
        let n = self.config.n_players;
        if self.strategy_assignment.len() != n {
            return Err(format!(
                "strategy_assignment has {} entries, expected {n}",
                self.strategy_assignment.len()
            ));
        }
        if self.per_round_utilization.len() != self.rounds.len() {
            return Err("per_round_utilization length differs from rounds".into());
        }
        for (t, round) in self.rounds.iter().enumerate() {
            round
                .profile
                .validate(&self.config)
                .map_err(|e| format!("round {t}: {e}"))?;
            if round.outcome.payoffs.len() != n
                || round.outcome.arrivals != round.profile.arrivals(self.config.m_restaurants)
            {
                return Err(format!("round {t}: outcome inconsistent with profile"));
            }
            let u = game::utilization(&round.outcome, &self.config);
            if u != self.per_round_utilization[t] {
                return Err(format!(
                    "round {t}: stored utilization {} != {u}",
                    self.per_round_utilization[t]
                ));
            }
        }
        Ok(())
    }

    pub fn post_burn_in(&self, burn_in: usize) -> &[f64] {
        &self.per_round_utilization[burn_in.min(self.per_round_utilization.len())..]
    }

    /// Mean and sample standard deviation of utilization after `burn_in`.
    pub fn utilization_summary(&self, burn_in: usize) -> (f64, f64) {
        mean_and_std(self.post_burn_in(burn_in))
    }

    /// Flat CSV: one row per (round, agent).
    pub fn to_csv(&self) -> Result<String, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["round", "agent", "choice", "won", "payoff"])?;
        for (t, round) in self.rounds.iter().enumerate() {
            for (agent, &choice) in round.profile.choices.iter().enumerate() {
                w.write_record(&[
                    t.to_string(),
                    agent.to_string(),
                    choice.to_string(),
                    round.outcome.won(agent).to_string(),
                    round.outcome.payoffs[agent].to_string(),
                ])?;
            }
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

pub(crate) fn mean_and_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// A strategy-driven agent together with its private random stream.
#[derive(Debug, Clone)]
pub struct Bot {
    pub state: AgentState,
    rng: RngStream,
}

impl Bot {
    pub fn new(
        strategy: &AgentStrategy,
        config: &GameConfig,
        replication: u64,
        agent: usize,
    ) -> Result<Self, StrategyError> {
        let mut rng = RngStream::new(
            config.seed,
            StreamKey::Agent {
                replication,
                agent: agent as u64,
            },
        );
        let state = init_agent(strategy, &config.utilities, &mut rng)?;
        Ok(Self { state, rng })
    }

    pub fn choose(&mut self) -> usize {
        self.state.choose(&mut self.rng)
    }

    pub fn observe(&mut self, obs: Observation) {
        self.state.update(obs);
    }
}

pub fn tie_break_stream(config: &GameConfig, replication: u64) -> RngStream {
    RngStream::new(config.seed, StreamKey::TieBreak { replication })
}

/// Runs replication 0 of the game described by `config` (seeded by `config.seed`).
pub fn run_game(config: &GameConfig, assignment: &[AgentStrategy]) -> Result<Trace, SimError> {
    run_replication(config, assignment, 0)
}

/// Runs one replication. Choices are all drawn before resolution; every
/// agent is updated only after the whole round has resolved.
pub fn run_replication(
    config: &GameConfig,
    assignment: &[AgentStrategy],
    replication: u64,
) -> Result<Trace, SimError> {
    config.validate()?;
    if assignment.len() != config.n_players {
        return Err(SimError::AssignmentMismatch {
            expected: config.n_players,
            got: assignment.len(),
        });
    }
    let mut bots = assignment
        .iter()
        .enumerate()
        .map(|(i, s)| Bot::new(s, config, replication, i))
        .collect::<Result<Vec<_>, _>>()?;
    let mut tie_rng = tie_break_stream(config, replication);

    let mut rounds = Vec::with_capacity(config.horizon);
    for t in 0..config.horizon {
        let profile = ChoiceProfile::new(bots.iter_mut().map(Bot::choose).collect());
        let outcome = game::resolve(config, &profile, &mut tie_rng)?;
        for (i, bot) in bots.iter_mut().enumerate() {
            bot.observe(Observation::for_agent(
                config.feedback_level,
                t,
                i,
                &profile,
                &outcome,
            ));
        }
        rounds.push(RoundRecord {
            profile,
            outcome,
            defaulted: Vec::new(),
        });
    }

    Ok(Trace::new(
        config.clone(),
        assignment.iter().cloned().map(Some).collect(),
        rounds,
        TraceSource::Simulated,
    ))
}

/// First round from which utilization stays at or above `threshold` for
/// `window` consecutive rounds.
pub fn convergence_time(trace: &Trace, threshold: f64, window: usize) -> Option<usize> {
    let window = window.max(1);
    let mut run = 0;
    for (t, &u) in trace.per_round_utilization.iter().enumerate() {
        if u + UTILIZATION_TOLERANCE >= threshold {
            run += 1;
            if run == window {
                return Some(t + 1 - window);
            }
        } else {
            run = 0;
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchOptions {
    pub replications: usize,
    /// Defaults to half the horizon.
    pub burn_in: Option<usize>,
    pub convergence_threshold: f64,
    pub convergence_window: usize,
}

impl BatchOptions {
    pub fn new(replications: usize) -> Self {
        Self {
            replications,
            burn_in: None,
            convergence_threshold: DEFAULT_CONVERGENCE_THRESHOLD,
            convergence_window: DEFAULT_CONVERGENCE_WINDOW,
        }
    }

    pub fn with_burn_in(mut self, burn_in: usize) -> Self {
        self.burn_in = Some(burn_in);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchResult {
    pub replications: usize,
    pub burn_in: usize,
    /// Mean post-burn-in utilization over all replications and rounds.
    pub mean_utilization: f64,
    /// Sample standard deviation of post-burn-in per-round utilization, pooled.
    pub utilization_std: f64,
    pub replication_means: Vec<f64>,
    pub convergence_threshold: f64,
    pub convergence_window: usize,
    pub converged_replications: usize,
    /// Mean over the replications that converged.
    pub mean_convergence_time: Option<f64>,
    /// Minority mode: variance of the attendance of option 0 divided by N.
    pub attendance_variance_per_agent: Option<f64>,
}

pub fn default_burn_in(horizon: usize) -> usize {
    horizon / 2
}

/// Runs `options.replications` independent replications in parallel. Each
/// replication `k` is identical to `run_replication(config, assignment, k)`.
pub fn run_batch(
    config: &GameConfig,
    assignment: &[AgentStrategy],
    options: &BatchOptions,
) -> Result<BatchResult, SimError> {
    config.validate()?;
    if options.replications == 0 {
        return Err(SimError::NoReplications);
    }
    let burn_in = options
        .burn_in
        .unwrap_or_else(|| default_burn_in(config.horizon));
    if burn_in >= config.horizon {
        return Err(SimError::BurnIn {
            burn_in,
            horizon: config.horizon,
        });
    }
    let traces = (0..options.replications as u64)
        .into_par_iter()
        .map(|k| run_replication(config, assignment, k))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(summarize_batch(config, &traces, burn_in, options))
}

fn summarize_batch(
    config: &GameConfig,
    traces: &[Trace],
    burn_in: usize,
    options: &BatchOptions,
) -> BatchResult {
    let pooled: Vec<f64> = traces
        .iter()
        .flat_map(|t| t.post_burn_in(burn_in).iter().copied())
        .collect();
    let (mean_utilization, utilization_std) = mean_and_std(&pooled);
    let replication_means = traces
        .iter()
        .map(|t| t.utilization_summary(burn_in).0)
        .collect();

    let times: Vec<usize> = traces
        .iter()
        .filter_map(|t| {
            convergence_time(t, options.convergence_threshold, options.convergence_window)
        })
        .collect();
    let mean_convergence_time =
        (!times.is_empty()).then(|| times.iter().sum::<usize>() as f64 / times.len() as f64);

    let attendance_variance_per_agent = (config.mode == Mode::Minority).then(|| {
        let n = config.n_players as f64;
        traces
            .iter()
            .map(|t| attendance_variance(t, burn_in))
            .sum::<f64>()
            / traces.len() as f64
            / n
    });

    BatchResult {
        replications: traces.len(),
        burn_in,
        mean_utilization,
        utilization_std,
        replication_means,
        convergence_threshold: options.convergence_threshold,
        convergence_window: options.convergence_window,
        converged_replications: times.len(),
        mean_convergence_time,
        attendance_variance_per_agent,
    }
}

/// Population variance over post-burn-in rounds of the number of agents at option 0.
pub fn attendance_variance(trace: &Trace, burn_in: usize) -> f64 {
    let xs: Vec<f64> = trace.rounds[burn_in.min(trace.len())..]
        .iter()
        .map(|r| f64::from(r.outcome.arrivals[0]))
        .collect();
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}
