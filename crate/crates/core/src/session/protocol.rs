//! Messages exchanged with session clients and the views they carry.
//!
//! Every server message is stamped with `(session_id, round, phase, seq)`
//! where `seq` is the last log sequence number the message reflects.

use serde::{Deserialize, Serialize};

use crate::game::{ChoiceProfile, FeedbackLevel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Lobby,
    Choosing,
    Resolved,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OwnRound {
    pub round: usize,
    pub choice: usize,
    pub won: bool,
    pub payoff: f64,
    pub defaulted: bool,
}

/// What a participant may see of the last resolved round beyond its own result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundFeedback {
    pub round: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occupancy: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub full_profile: Option<ChoiceProfile>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RosterFill {
    pub humans: usize,
    pub joined: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantView {
    pub agent: usize,
    pub m_restaurants: usize,
    /// Shown only for ranked games.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utilities: Option<Vec<f64>>,
    pub feedback_level: FeedbackLevel,
    pub horizon: usize,
    pub roster: RosterFill,
    pub deadline_ms: Option<u64>,
    pub pending_choice: Option<usize>,
    pub own_history: Vec<OwnRound>,
    pub cumulative_score: f64,
    pub last_round: Option<RoundFeedback>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeatStatus {
    pub agent: usize,
    pub human: bool,
    pub joined: bool,
    pub submitted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimenterView {
    pub horizon: usize,
    pub deadline_ms: Option<u64>,
    pub seats: Vec<SeatStatus>,
    pub submissions_received: usize,
    pub per_round_utilization: Vec<f64>,
}

/// An event as shown to one participant: payload reduced to what the
/// participant's feedback level permits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientEvent {
    pub seq: u64,
    pub kind: String,
    pub payload: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub agent: usize,
    pub round: usize,
    pub choice: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Join { token: String },
    Choose { token: String, restaurant: usize },
    State { token: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerBody {
    State { view: ParticipantView },
    Monitor { view: ExperimenterView },
    Event { event: ClientEvent },
    Ack { ack: Ack },
    Error { code: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerMessage {
    pub session_id: String,
    pub round: usize,
    pub phase: Phase,
    pub seq: u64,
    #[serde(flatten)]
    pub body: ServerBody,
}

impl ServerMessage {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("server messages always serialize")
    }
}
