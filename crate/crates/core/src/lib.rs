//! Kolkata Paise Restaurant laboratory.
//!
//! `n` agents simultaneously pick one of `m` restaurants; each occupied
//! restaurant serves one of its arrivals chosen uniformly at random. This
//! crate resolves rounds ([`game`]), provides agent decision rules
//! ([`strategy`]), runs repeated and replicated play ([`simulator`]),
//! certifies pure equilibria of small instances ([`equilibrium`]), computes
//! switching and behavioural statistics ([`analytics`]) and implements the
//! live-session state machine with its append-only log ([`session`]).

pub mod analytics;
pub mod equilibrium;
pub mod game;
pub mod rng;
pub mod session;
pub mod simulator;
pub mod strategy;

pub use game::{
    resolve, resolve_minority_round, resolve_round, utilization, ChoiceProfile, FeedbackLevel,
    GameConfig, GameError, Mode, RoundOutcome,
};
pub use rng::{RngStream, StreamKey};
pub use simulator::{run_batch, run_game, BatchOptions, BatchResult, Trace, TraceSource};
pub use strategy::{
    AgentState, AgentStrategy, Observation, StrategyId, StrategyParams, StrategySpec,
};
