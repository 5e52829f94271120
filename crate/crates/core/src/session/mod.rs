//! Live experiment sessions: humans and bots submit choices each round,
//! rounds resolve through the game rules, and every state change is an
//! event in an append-only log.
//!
//! A [`Session`] is a synchronous state machine. Callers pass the current
//! wall-clock time in milliseconds, and must serialize access to one
//! session (the server wraps each in a mutex).

pub mod log;
pub mod protocol;

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::game::{self, ChoiceProfile, GameConfig, GameError, RoundOutcome};
use crate::rng::{RngStream, StreamKey};
use crate::simulator::{tie_break_stream, Bot};
use crate::strategy::{expand_assignment, Observation, StrategyError, StrategySpec};

pub use log::{parse_log, replay_log, CreatedPayload, EventBody, ReplayError, Seat, SessionEvent};
pub use protocol::{
    Ack, ClientEvent, ClientMessage, ExperimenterView, OwnRound, ParticipantView, Phase,
    RosterFill, RoundFeedback, SeatStatus, ServerBody, ServerMessage,
};

pub const DEFAULT_ROUND_DEADLINE_MS: u64 = 15_000;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error("malformed roster: {0}")]
    Roster(String),
    #[error("action not allowed in phase {actual:?}")]
    WrongPhase { actual: Phase },
    #[error("unknown participant token")]
    UnknownToken,
    #[error("restaurant {choice} out of range 0..{m}")]
    InvalidChoice { choice: usize, m: usize },
    #[error("deadline not reached ({remaining_ms} ms remaining)")]
    DeadlineNotReached { remaining_ms: u64 },
    #[error("the round deadline has passed")]
    DeadlinePassed,
    #[error("log write failed: {0}")]
    Io(#[from] std::io::Error),
}

impl SessionError {
    /// Short machine-readable code for client error messages.
    pub fn code(&self) -> &'static str {
        match self {
            SessionError::Game(_) | SessionError::Strategy(_) | SessionError::Roster(_) => {
                "invalid"
            }
            SessionError::WrongPhase { .. } => "wrong_phase",
            SessionError::UnknownToken => "unauthorized",
            SessionError::InvalidChoice { .. } => "invalid_choice",
            SessionError::DeadlineNotReached { .. } => "deadline_not_reached",
            SessionError::DeadlinePassed => "deadline_passed",
            SessionError::Io(_) => "io",
        }
    }
}

/// Humans take seats `0..humans`; bots follow in spec order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RosterSpec {
    pub humans: usize,
    #[serde(default)]
    pub bots: Vec<StrategySpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionOptions {
    pub round_deadline_ms: u64,
    /// Pause in RESOLVED before the next round opens.
    pub inter_round_ms: u64,
}

impl Default for SessionOptions {
    fn default() -> Self {
        Self {
            round_deadline_ms: DEFAULT_ROUND_DEADLINE_MS,
            inter_round_ms: 0,
        }
    }
}

/// Who is acting: a seated participant or the experimenter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Participant(usize),
    Experimenter,
}

pub fn new_token() -> String {
    uuid::Uuid::new_v4().simple().to_string()
}

pub struct Session {
    id: String,
    config: GameConfig,
    seats: Vec<Seat>,
    options: SessionOptions,
    phase: Phase,
    current_round: usize,
    deadline_ms: Option<u64>,
    resolved_at_ms: u64,

    tokens: HashMap<String, usize>,
    human_tokens: Vec<String>,
    admin_token: String,
    joined: Vec<bool>,

    bots: Vec<Option<Bot>>,
    tie_rng: RngStream,
    pending: Vec<Option<usize>>,
    last_choice: Vec<Option<usize>>,

    log: Vec<SessionEvent>,
    sink: Option<Box<dyn Write + Send>>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("id", &self.id)
            .field("phase", &self.phase)
            .field("current_round", &self.current_round)
            .field("seq", &self.seq())
            .finish_non_exhaustive()
    }
}

impl Session {
    /// Creates a session in LOBBY and logs CREATED. A session without human
    /// seats starts immediately and, with no inter-round pause, plays to
    /// completion inside this call.
    pub fn create(
        id: impl Into<String>,
        config: GameConfig,
        roster: &RosterSpec,
        options: SessionOptions,
        sink: Option<Box<dyn Write + Send>>,
        now_ms: u64,
    ) -> Result<Self, SessionError> {
        config.validate()?;
        let bot_count: usize = roster.bots.iter().map(|b| b.count).sum();
        if roster.humans + bot_count != config.n_players {
            return Err(SessionError::Roster(format!(
                "{} humans + {bot_count} bots != {} players",
                roster.humans, config.n_players
            )));
        }
        let bot_strategies = expand_assignment(&roster.bots, bot_count)
            .map_err(|e| SessionError::Roster(e.to_string()))?;

        let n = config.n_players;
        let mut seats = vec![Seat::Human; roster.humans];
        seats.extend(
            bot_strategies
                .into_iter()
                .map(|strategy| Seat::Bot { strategy }),
        );
        let bots = seats
            .iter()
            .enumerate()
            .map(|(i, seat)| match seat {
                Seat::Human => Ok(None),
                Seat::Bot { strategy } => Bot::new(strategy, &config, 0, i).map(Some),
            })
            .collect::<Result<Vec<_>, _>>()?;

        let human_tokens: Vec<String> = (0..roster.humans).map(|_| new_token()).collect();
        let tokens = human_tokens
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, t)| (t, i))
            .collect();
        let mut joined = vec![true; n];
        joined[..roster.humans].iter_mut().for_each(|j| *j = false);

        let mut session = Self {
            id: id.into(),
            tie_rng: tie_break_stream(&config, 0),
            config,
            seats,
            options,
            phase: Phase::Lobby,
            current_round: 0,
            deadline_ms: None,
            resolved_at_ms: 0,
            tokens,
            human_tokens,
            admin_token: new_token(),
            joined,
            bots,
            pending: vec![None; n],
            last_choice: vec![None; n],
            log: Vec::new(),
            sink,
        };
        let created = CreatedPayload {
            session_id: session.id.clone(),
            config: session.config.clone(),
            roster: session.seats.clone(),
            round_deadline_ms: options.round_deadline_ms,
        };
        session.append(EventBody::Created(created), now_ms)?;
        if roster.humans == 0 {
            session.begin_round(now_ms)?;
        }
        Ok(session)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn config(&self) -> &GameConfig {
        &self.config
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn current_round(&self) -> usize {
        self.current_round
    }

    pub fn deadline_ms(&self) -> Option<u64> {
        self.deadline_ms
    }

    pub fn human_tokens(&self) -> &[String] {
        &self.human_tokens
    }

    pub fn admin_token(&self) -> &str {
        &self.admin_token
    }

    pub fn log(&self) -> &[SessionEvent] {
        &self.log
    }

    /// Sequence number of the latest event.
    pub fn seq(&self) -> u64 {
        self.log.len().saturating_sub(1) as u64
    }

    pub fn log_ndjson(&self) -> String {
        self.log.iter().map(|e| e.to_line() + "\n").collect()
    }

    /// Resolves a token to a role.
    pub fn authorize(&self, token: &str) -> Result<Role, SessionError> {
        if token == self.admin_token {
            return Ok(Role::Experimenter);
        }
        self.tokens
            .get(token)
            .map(|&a| Role::Participant(a))
            .ok_or(SessionError::UnknownToken)
    }

    fn participant(&self, token: &str) -> Result<usize, SessionError> {
        self.tokens
            .get(token)
            .copied()
            .ok_or(SessionError::UnknownToken)
    }

    /// Writes and flushes the event to the sink before it becomes visible.
    fn append(&mut self, body: EventBody, now_ms: u64) -> Result<u64, SessionError> {
        let event = SessionEvent {
            seq: self.log.len() as u64,
            timestamp: now_ms,
            body,
        };
        if let Some(sink) = self.sink.as_mut() {
            sink.write_all((event.to_line() + "\n").as_bytes())?;
            sink.flush()?;
        }
        let seq = event.seq;
        self.log.push(event);
        Ok(seq)
    }

    pub fn join(&mut self, token: &str, now_ms: u64) -> Result<Ack, SessionError> {
        let agent = self.participant(token)?;
        let ack = Ack {
            agent,
            round: self.current_round,
            choice: None,
        };
        if self.joined[agent] {
            return Ok(ack);
        }
        if self.phase != Phase::Lobby {
            return Err(SessionError::WrongPhase { actual: self.phase });
        }
        self.append(EventBody::Joined { agent }, now_ms)?;
        self.joined[agent] = true;
        if self.joined.iter().all(|&j| j) {
            self.begin_round(now_ms)?;
        }
        Ok(ack)
    }

    /// Records a human's choice for the open round; resubmission overwrites.
    /// The round resolves as soon as every seat has a choice.
    pub fn submit_choice(
        &mut self,
        token: &str,
        restaurant: usize,
        now_ms: u64,
    ) -> Result<Ack, SessionError> {
        let agent = self.participant(token)?;
        if self.phase != Phase::Choosing {
            return Err(SessionError::WrongPhase { actual: self.phase });
        }
        if self.deadline_ms.is_some_and(|d| now_ms >= d) {
            return Err(SessionError::DeadlinePassed);
        }
        let m = self.config.m_restaurants;
        if restaurant >= m {
            return Err(SessionError::InvalidChoice {
                choice: restaurant,
                m,
            });
        }
        let round = self.current_round;
        self.append(
            EventBody::ChoiceSubmitted {
                round,
                agent,
                choice: restaurant,
            },
            now_ms,
        )?;
        self.pending[agent] = Some(restaurant);
        if self.pending.iter().all(Option::is_some) {
            self.resolve(now_ms)?;
        }
        Ok(Ack {
            agent,
            round,
            choice: Some(restaurant),
        })
    }

    /// Imputes choices for silent humans (repeat last choice; uniform in
    /// round 0) and resolves the round. Refused before the deadline.
    pub fn advance_on_deadline(&mut self, now_ms: u64) -> Result<RoundOutcome, SessionError> {
        if self.phase != Phase::Choosing {
            return Err(SessionError::WrongPhase { actual: self.phase });
        }
        let deadline = self.deadline_ms.unwrap_or(0);
        if now_ms < deadline {
            return Err(SessionError::DeadlineNotReached {
                remaining_ms: deadline - now_ms,
            });
        }
        let round = self.current_round;
        for agent in 0..self.config.n_players {
            if self.pending[agent].is_some() {
                continue;
            }
            let choice = match self.last_choice[agent] {
                Some(prev) => prev,
                None => RngStream::new(
                    self.config.seed,
                    StreamKey::TimeoutDefault {
                        replication: 0,
                        agent: agent as u64,
                    },
                )
                .below(self.config.m_restaurants),
            };
            self.append(
                EventBody::TimeoutDefaulted {
                    round,
                    agent,
                    choice,
                },
                now_ms,
            )?;
            self.pending[agent] = Some(choice);
        }
        self.resolve(now_ms)
    }

    /// Experimenter control: close the open round now.
    pub fn force_advance(&mut self, now_ms: u64) -> Result<RoundOutcome, SessionError> {
        if self.phase == Phase::Choosing {
            self.deadline_ms = Some(now_ms);
        }
        self.advance_on_deadline(now_ms)
    }

    /// Experimenter control: stop after the rounds played so far.
    pub fn finish_early(&mut self, now_ms: u64) -> Result<(), SessionError> {
        if self.phase == Phase::Finished {
            return Err(SessionError::WrongPhase { actual: self.phase });
        }
        let rounds_played = self.rounds_played();
        self.append(
            EventBody::Finished {
                rounds_played,
                early: true,
            },
            now_ms,
        )?;
        self.phase = Phase::Finished;
        self.deadline_ms = None;
        Ok(())
    }

    /// Time-driven transitions. Returns true if anything changed.
    pub fn tick(&mut self, now_ms: u64) -> Result<bool, SessionError> {
        match self.phase {
            Phase::Choosing if self.deadline_ms.is_some_and(|d| now_ms >= d) => {
                self.advance_on_deadline(now_ms)?;
                Ok(true)
            }
            Phase::Resolved if now_ms >= self.resolved_at_ms + self.options.inter_round_ms => {
                self.current_round += 1;
                self.begin_round(now_ms)?;
                Ok(true)
            }
            _ => Ok(false),
        }
    }

    fn rounds_played(&self) -> usize {
        self.log
            .iter()
            .filter(|e| matches!(e.body, EventBody::RoundResolved { .. }))
            .count()
    }

    /// Opens the current round: bots submit, and if the roster has no
    /// humans the round resolves at once. Loops through rounds while no
    /// human input is needed and there is no inter-round pause.
    fn begin_round(&mut self, now_ms: u64) -> Result<(), SessionError> {
        loop {
            self.phase = Phase::Choosing;
            self.deadline_ms = Some(now_ms + self.options.round_deadline_ms);
            let round = self.current_round;
            for agent in 0..self.config.n_players {
                if let Some(bot) = self.bots[agent].as_mut() {
                    let choice = bot.choose();
                    self.pending[agent] = Some(choice);
                    self.append(
                        EventBody::ChoiceSubmitted {
                            round,
                            agent,
                            choice,
                        },
                        now_ms,
                    )?;
                }
            }
            if !self.pending.iter().all(Option::is_some) {
                return Ok(());
            }
            self.resolve_only(now_ms)?;
            if self.phase != Phase::Resolved || self.options.inter_round_ms > 0 {
                return Ok(());
            }
            self.current_round += 1;
        }
    }

    fn resolve(&mut self, now_ms: u64) -> Result<RoundOutcome, SessionError> {
        let outcome = self.resolve_only(now_ms)?;
        if self.phase == Phase::Resolved && self.options.inter_round_ms == 0 {
            self.current_round += 1;
            self.begin_round(now_ms)?;
        }
        Ok(outcome)
    }

    fn resolve_only(&mut self, now_ms: u64) -> Result<RoundOutcome, SessionError> {
        let round = self.current_round;
        let profile = ChoiceProfile::new(
            self.pending
                .iter()
                .map(|p| p.expect("all submitted"))
                .collect(),
        );
        let outcome = game::resolve(&self.config, &profile, &mut self.tie_rng)?;
        self.append(
            EventBody::RoundResolved {
                round,
                profile: profile.clone(),
                outcome: outcome.clone(),
            },
            now_ms,
        )?;
        for agent in 0..self.config.n_players {
            if let Some(bot) = self.bots[agent].as_mut() {
                bot.observe(Observation::for_agent(
                    self.config.feedback_level,
                    round,
                    agent,
                    &profile,
                    &outcome,
                ));
            }
            self.last_choice[agent] = Some(profile.choices[agent]);
            self.pending[agent] = None;
        }
        self.deadline_ms = None;
        self.resolved_at_ms = now_ms;
        if round + 1 >= self.config.horizon {
            self.append(
                EventBody::Finished {
                    rounds_played: round + 1,
                    early: false,
                },
                now_ms,
            )?;
            self.phase = Phase::Finished;
        } else {
            self.phase = Phase::Resolved;
        }
        Ok(outcome)
    }

    fn stamp(&self, body: ServerBody) -> ServerMessage {
        ServerMessage {
            session_id: self.id.clone(),
            round: self.current_round,
            phase: self.phase,
            seq: self.seq(),
            body,
        }
    }

    pub fn error_message(&self, err: &SessionError) -> ServerMessage {
        self.stamp(ServerBody::Error {
            code: err.code().into(),
            message: err.to_string(),
        })
    }

    pub fn ack_message(&self, ack: Ack) -> ServerMessage {
        self.stamp(ServerBody::Ack { ack })
    }

    /// The participant's view, derived from the log and filtered by the
    /// session's feedback level.
    pub fn participant_view(&self, agent: usize) -> ParticipantView {
        let feedback = self.config.feedback_level;
        let mut own_history = Vec::new();
        let mut last_round = None;
        let mut defaulted_now = false;
        for event in &self.log {
            match &event.body {
                EventBody::TimeoutDefaulted { agent: a, .. } if *a == agent => defaulted_now = true,
                EventBody::RoundResolved {
                    round,
                    profile,
                    outcome,
                } => {
                    own_history.push(OwnRound {
                        round: *round,
                        choice: profile.choices[agent],
                        won: outcome.won(agent),
                        payoff: outcome.payoffs[agent],
                        defaulted: defaulted_now,
                    });
                    defaulted_now = false;
                    let obs = Observation::for_agent(feedback, *round, agent, profile, outcome);
                    last_round = Some(RoundFeedback {
                        round: *round,
                        occupancy: obs.occupancy,
                        full_profile: obs.full_profile,
                    });
                }
                _ => {}
            }
        }
        let humans = self
            .seats
            .iter()
            .filter(|s| matches!(s, Seat::Human))
            .count();
        let joined = (0..humans).filter(|&i| self.joined[i]).count();
        ParticipantView {
            agent,
            m_restaurants: self.config.m_restaurants,
            utilities: self
                .config
                .is_ranked()
                .then(|| self.config.utilities.clone()),
            feedback_level: feedback,
            horizon: self.config.horizon,
            roster: RosterFill { humans, joined },
            deadline_ms: self.deadline_ms,
            pending_choice: self.pending[agent].filter(|_| self.phase == Phase::Choosing),
            cumulative_score: own_history.iter().map(|r| r.payoff).sum(),
            own_history,
            last_round,
        }
    }

    pub fn get_state(&self, token: &str) -> Result<ServerMessage, SessionError> {
        Ok(self.state_message(self.authorize(token)?))
    }

    /// The state message for `role`: the participant view or the monitor.
    pub fn state_message(&self, role: Role) -> ServerMessage {
        match role {
            Role::Participant(agent) => self.stamp(ServerBody::State {
                view: self.participant_view(agent),
            }),
            Role::Experimenter => self.stamp(ServerBody::Monitor {
                view: self.experimenter_view(),
            }),
        }
    }

    pub fn experimenter_view(&self) -> ExperimenterView {
        let per_round_utilization = self
            .log
            .iter()
            .filter_map(|e| match &e.body {
                EventBody::RoundResolved { outcome, .. } => {
                    Some(game::utilization(outcome, &self.config))
                }
                _ => None,
            })
            .collect();
        let seats = self
            .seats
            .iter()
            .enumerate()
            .map(|(agent, seat)| SeatStatus {
                agent,
                human: matches!(seat, Seat::Human),
                joined: self.joined[agent],
                submitted: self.phase == Phase::Choosing && self.pending[agent].is_some(),
            })
            .collect::<Vec<_>>();
        ExperimenterView {
            horizon: self.config.horizon,
            deadline_ms: self.deadline_ms,
            submissions_received: seats.iter().filter(|s| s.submitted).count(),
            seats,
            per_round_utilization,
        }
    }

    /// Event `event` as `agent` may see it, or `None` if it concerns only
    /// other participants.
    pub fn filter_event(&self, event: &SessionEvent, agent: usize) -> Option<ClientEvent> {
        let feedback = self.config.feedback_level;
        let payload = match &event.body {
            EventBody::Created(c) => {
                json!({ "config": c.config, "round_deadline_ms": c.round_deadline_ms })
            }
            EventBody::Joined { .. } => json!({}),
            EventBody::ChoiceSubmitted {
                round,
                agent: a,
                choice,
            } if *a == agent => {
                json!({ "round": round, "choice": choice })
            }
            EventBody::TimeoutDefaulted {
                round,
                agent: a,
                choice,
            } if *a == agent => {
                json!({ "round": round, "choice": choice })
            }
            EventBody::ChoiceSubmitted { .. } | EventBody::TimeoutDefaulted { .. } => return None,
            EventBody::RoundResolved {
                round,
                profile,
                outcome,
            } => {
                let obs = Observation::for_agent(feedback, *round, agent, profile, outcome);
                serde_json::to_value(obs).expect("observation serializes")
            }
            EventBody::Finished {
                rounds_played,
                early,
            } => json!({ "rounds_played": rounds_played, "early": early }),
        };
        Some(ClientEvent {
            seq: event.seq,
            kind: event.body.kind().into(),
            payload,
        })
    }

    /// Everything a connected client should receive after it last saw
    /// `after_seq`: filtered events followed by a fresh state message.
    /// Experimenters receive unfiltered events and the monitor view.
    pub fn messages_since(&self, role: Role, after_seq: Option<u64>) -> Vec<ServerMessage> {
        let start = after_seq.map_or(0, |s| s as usize + 1);
        let mut out: Vec<ServerMessage> = self
            .log
            .iter()
            .skip(start)
            .filter_map(|e| match role {
                Role::Participant(agent) => self.filter_event(e, agent),
                Role::Experimenter => Some(ClientEvent {
                    seq: e.seq,
                    kind: e.body.kind().into(),
                    payload: serde_json::to_value(&e.body).expect("event serializes")["payload"]
                        .clone(),
                }),
            })
            .map(|event| self.stamp(ServerBody::Event { event }))
            .collect();
        out.push(self.state_message(role));
        out
    }

    /// Applies one client message on behalf of `token`.
    pub fn handle(
        &mut self,
        message: &ClientMessage,
        now_ms: u64,
    ) -> Result<ServerMessage, SessionError> {
        match message {
            ClientMessage::Join { token } => {
                self.join(token, now_ms).map(|ack| self.ack_message(ack))
            }
            ClientMessage::Choose { token, restaurant } => self
                .submit_choice(token, *restaurant, now_ms)
                .map(|ack| self.ack_message(ack)),
            ClientMessage::State { token } => self.get_state(token),
        }
    }
}

#[cfg(test)]
mod tests;
