//! Append-only session event log and its replay into a [`Trace`].
//!
//! On disk the log is one JSON document per line:
//! `{"seq":0,"timestamp":..,"kind":"CREATED","payload":{..}}`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{ChoiceProfile, GameConfig, Mode, RoundOutcome};
use crate::simulator::{RoundRecord, Trace, TraceSource};
use crate::strategy::AgentStrategy;

/// Occupant of one roster position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Seat {
    Human,
    Bot { strategy: AgentStrategy },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreatedPayload {
    pub session_id: String,
    pub config: GameConfig,
    pub roster: Vec<Seat>,
    pub round_deadline_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventBody {
    Created(CreatedPayload),
    Joined {
        agent: usize,
    },
    ChoiceSubmitted {
        round: usize,
        agent: usize,
        choice: usize,
    },
    TimeoutDefaulted {
        round: usize,
        agent: usize,
        choice: usize,
    },
    RoundResolved {
        round: usize,
        profile: ChoiceProfile,
        outcome: RoundOutcome,
    },
    Finished {
        rounds_played: usize,
        early: bool,
    },
}

impl EventBody {
    pub fn kind(&self) -> &'static str {
        match self {
            EventBody::Created(_) => "CREATED",
            EventBody::Joined { .. } => "JOINED",
            EventBody::ChoiceSubmitted { .. } => "CHOICE_SUBMITTED",
            EventBody::TimeoutDefaulted { .. } => "TIMEOUT_DEFAULTED",
            EventBody::RoundResolved { .. } => "ROUND_RESOLVED",
            EventBody::Finished { .. } => "FINISHED",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub seq: u64,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
    #[serde(flatten)]
    pub body: EventBody,
}

impl SessionEvent {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("events always serialize")
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ReplayError {
    #[error("log is empty")]
    Empty,
    #[error("sequence gap: expected seq {expected}, found {found}")]
    Gap { expected: u64, found: u64 },
    #[error("bad record at seq {seq}: {reason}")]
    Corrupt { seq: u64, reason: String },
}

impl ReplayError {
    /// The first sequence number that could not be accepted.
    pub fn seq(&self) -> u64 {
        match self {
            ReplayError::Empty => 0,
            ReplayError::Gap { expected, .. } => *expected,
            ReplayError::Corrupt { seq, .. } => *seq,
        }
    }
}

/// Parses a newline-delimited log. Blank lines are ignored; a line that is
/// not a valid event is reported at the seq it should have carried.
pub fn parse_log(text: &str) -> Result<Vec<SessionEvent>, ReplayError> {
    let mut events = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let expected = events.len() as u64;
        let event: SessionEvent = serde_json::from_str(line).map_err(|e| ReplayError::Corrupt {
            seq: expected,
            reason: e.to_string(),
        })?;
        if event.seq != expected {
            return Err(ReplayError::Gap {
                expected,
                found: event.seq,
            });
        }
        events.push(event);
    }
    Ok(events)
}

/// Rebuilds the trace of a (finished or in-progress) session from its log,
/// checking every record against the game rules as it goes.
pub fn replay_log(events: &[SessionEvent]) -> Result<Trace, ReplayError> {
    let first = events.first().ok_or(ReplayError::Empty)?;
    let created = match &first.body {
        EventBody::Created(c) if first.seq == 0 => c,
        _ => {
            return Err(ReplayError::Corrupt {
                seq: first.seq,
                reason: "log must start with CREATED at seq 0".into(),
            })
        }
    };
    let config = &created.config;
    let corrupt = |seq: u64, reason: String| ReplayError::Corrupt { seq, reason };
    config.validate().map_err(|e| corrupt(0, e.to_string()))?;
    let (n, m) = (config.n_players, config.m_restaurants);
    if created.roster.len() != n {
        return Err(corrupt(
            0,
            format!(
                "roster has {} seats, config has {n} players",
                created.roster.len()
            ),
        ));
    }

    let mut rounds: Vec<RoundRecord> = Vec::new();
    let mut pending: Vec<Option<usize>> = vec![None; n];
    let mut defaulted: Vec<bool> = vec![false; n];
    let mut finished = false;

    for (i, event) in events.iter().enumerate().skip(1) {
        let seq = event.seq;
        if seq != i as u64 {
            return Err(ReplayError::Gap {
                expected: i as u64,
                found: seq,
            });
        }
        if finished {
            return Err(corrupt(seq, "event after FINISHED".into()));
        }
        let round = rounds.len();
        let check_choice = |r: usize, agent: usize, choice: usize| -> Result<(), ReplayError> {
            if r != round {
                return Err(corrupt(
                    seq,
                    format!("round {r} while round {round} is open"),
                ));
            }
            if agent >= n || choice >= m {
                return Err(corrupt(
                    seq,
                    format!("agent {agent} / choice {choice} out of range"),
                ));
            }
            Ok(())
        };
        match &event.body {
            EventBody::Created(_) => return Err(corrupt(seq, "duplicate CREATED".into())),
            EventBody::Joined { agent } => {
                if !matches!(created.roster.get(*agent), Some(Seat::Human)) {
                    return Err(corrupt(seq, format!("agent {agent} is not a human seat")));
                }
            }
            EventBody::ChoiceSubmitted {
                round: r,
                agent,
                choice,
            } => {
                check_choice(*r, *agent, *choice)?;
                pending[*agent] = Some(*choice);
            }
            EventBody::TimeoutDefaulted {
                round: r,
                agent,
                choice,
            } => {
                check_choice(*r, *agent, *choice)?;
                pending[*agent] = Some(*choice);
                defaulted[*agent] = true;
            }
            EventBody::RoundResolved {
                round: r,
                profile,
                outcome,
            } => {
                if *r != round {
                    return Err(corrupt(
                        seq,
                        format!("resolved round {r}, expected {round}"),
                    ));
                }
                if round >= config.horizon {
                    return Err(corrupt(seq, "more rounds than the horizon".into()));
                }
                profile
                    .validate(config)
                    .map_err(|e| corrupt(seq, e.to_string()))?;
                if profile
                    .choices
                    .iter()
                    .zip(&pending)
                    .any(|(c, p)| *p != Some(*c))
                {
                    return Err(corrupt(
                        seq,
                        "resolved profile differs from submitted choices".into(),
                    ));
                }
                check_outcome(config, profile, outcome).map_err(|reason| corrupt(seq, reason))?;
                rounds.push(RoundRecord {
                    profile: profile.clone(),
                    outcome: outcome.clone(),
                    defaulted: (0..n).filter(|&a| defaulted[a]).collect(),
                });
                pending.iter_mut().for_each(|p| *p = None);
                defaulted.iter_mut().for_each(|d| *d = false);
            }
            EventBody::Finished { rounds_played, .. } => {
                if *rounds_played != rounds.len() {
                    return Err(corrupt(
                        seq,
                        format!(
                            "FINISHED claims {rounds_played} rounds, log has {}",
                            rounds.len()
                        ),
                    ));
                }
                finished = true;
            }
        }
    }

    let assignment = created
        .roster
        .iter()
        .map(|seat| match seat {
            Seat::Human => None,
            Seat::Bot { strategy } => Some(strategy.clone()),
        })
        .collect();
    Ok(Trace::new(
        config.clone(),
        assignment,
        rounds,
        TraceSource::ReplayedSession,
    ))
}

/// Checks a logged outcome against the rules (the tie-break draw itself is
/// not re-derived, only its consistency).
fn check_outcome(
    config: &GameConfig,
    profile: &ChoiceProfile,
    outcome: &RoundOutcome,
) -> Result<(), String> {
    let m = config.m_restaurants;
    let arrivals = profile.arrivals(m);
    if outcome.arrivals != arrivals {
        return Err("arrival counts do not match the profile".into());
    }
    if outcome.payoffs.len() != config.n_players || outcome.winner.len() != m {
        return Err("outcome vectors have the wrong length".into());
    }
    if outcome.occupied_count != arrivals.iter().filter(|&&a| a > 0).count() {
        return Err("occupied_count does not match arrivals".into());
    }
    match config.mode {
        Mode::Kpr => {
            let mut expected = vec![0.0; config.n_players];
            for (r, w) in outcome.winner.iter().enumerate() {
                match (w, arrivals[r] > 0) {
                    (Some(a), true) if profile.choices.get(*a) == Some(&r) => {
                        expected[*a] = config.utilities[r]
                    }
                    (None, false) => {}
                    _ => return Err(format!("winner at restaurant {r} is inconsistent")),
                }
            }
            if expected != outcome.payoffs {
                return Err("payoffs do not match winners".into());
            }
        }
        Mode::Minority => {
            let recomputed =
                crate::game::resolve_minority_round(config, profile).map_err(|e| e.to_string())?;
            if &recomputed != outcome {
                return Err("minority outcome does not match the profile".into());
            }
        }
    }
    Ok(())
}
