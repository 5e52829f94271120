use std::sync::{Arc, Mutex};

use super::*;
use crate::simulator::{run_game, TraceSource};
use crate::strategy::{AgentStrategy, StrategyId};
use crate::FeedbackLevel;

const T0: u64 = 1_000_000;

fn roster(humans: usize, bots: usize, id: StrategyId) -> RosterSpec {
    RosterSpec {
        humans,
        bots: if bots > 0 {
            vec![StrategySpec::new(id, bots)]
        } else {
            vec![]
        },
    }
}

fn one_human(feedback: FeedbackLevel, horizon: usize) -> Session {
    let cfg = GameConfig::unranked(10, 10)
        .with_horizon(horizon)
        .with_seed(5)
        .with_feedback(feedback);
    Session::create(
        "s1",
        cfg,
        &roster(1, 9, StrategyId::StickIfWon),
        SessionOptions::default(),
        None,
        T0,
    )
    .unwrap()
}

fn started(feedback: FeedbackLevel, horizon: usize) -> (Session, String) {
    let mut s = one_human(feedback, horizon);
    let token = s.human_tokens()[0].clone();
    s.join(&token, T0).unwrap();
    (s, token)
}

fn kinds(s: &Session) -> Vec<&'static str> {
    s.log().iter().map(|e| e.body.kind()).collect()
}

#[test]
fn lobby_waits_for_the_human() {
    let s = one_human(FeedbackLevel::OwnOnly, 10);
    assert_eq!(s.phase(), Phase::Lobby);
    assert_eq!(s.human_tokens().len(), 1);
    assert_eq!(kinds(&s), vec!["CREATED"]);
    let view = s.participant_view(0);
    assert_eq!(
        view.roster,
        RosterFill {
            humans: 1,
            joined: 0
        }
    );
    assert!(view.own_history.is_empty() && view.last_round.is_none());
}

#[test]
fn roster_overflow_rejected() {
    let cfg = GameConfig::unranked(3, 3).with_horizon(2);
    let err = Session::create(
        "x",
        cfg.clone(),
        &roster(4, 0, StrategyId::Stable),
        SessionOptions::default(),
        None,
        T0,
    );
    assert!(matches!(err, Err(SessionError::Roster(_))));
    let err = Session::create(
        "x",
        cfg,
        &roster(1, 1, StrategyId::Stable),
        SessionOptions::default(),
        None,
        T0,
    );
    assert!(matches!(err, Err(SessionError::Roster(_))));
}

#[test]
fn pure_bot_session_matches_simulator() {
    let cfg = GameConfig::unranked(10, 10)
        .with_horizon(25)
        .with_seed(77)
        .with_feedback(FeedbackLevel::Occupancy);
    let bots = RosterSpec {
        humans: 0,
        bots: vec![
            StrategySpec::new(StrategyId::StickIfWon, 6),
            StrategySpec::new(StrategyId::Reinforcement, 4),
        ],
    };
    let s = Session::create(
        "bots",
        cfg.clone(),
        &bots,
        SessionOptions::default(),
        None,
        T0,
    )
    .unwrap();
    assert_eq!(s.phase(), Phase::Finished);
    let replayed = replay_log(s.log()).unwrap();
    let mut assignment = vec![AgentStrategy::new(StrategyId::StickIfWon); 6];
    assignment.extend(vec![AgentStrategy::new(StrategyId::Reinforcement); 4]);
    let simulated = run_game(&cfg, &assignment).unwrap();
    assert_eq!(replayed.source, TraceSource::ReplayedSession);
    assert!(replayed.same_play(&simulated));
}

#[test]
fn submission_appends_and_resolution_uses_game_rules() {
    let (mut s, token) = started(FeedbackLevel::OwnOnly, 10);
    assert_eq!(s.phase(), Phase::Choosing);
    let before = s.log().len();
    s.submit_choice(&token, 3, T0 + 10).unwrap();
    // bots had already submitted, so the human's choice closes the round
    let events = &s.log()[before..];
    assert!(matches!(
        events[0].body,
        EventBody::ChoiceSubmitted {
            round: 0,
            agent: 0,
            choice: 3
        }
    ));
    let EventBody::RoundResolved {
        round: 0,
        profile,
        outcome,
    } = &events[1].body
    else {
        panic!("expected ROUND_RESOLVED, got {:?}", events[1].body);
    };
    // oracle: fresh tie-break stream for replication 0 resolving the logged profile
    let mut rng = tie_break_stream(s.config(), 0);
    assert_eq!(
        &game::resolve_round(s.config(), profile, &mut rng).unwrap(),
        outcome
    );
    assert_eq!(s.current_round(), 1);
}

#[test]
fn resubmission_overwrites_and_both_are_logged() {
    let cfg = GameConfig::unranked(2, 2).with_horizon(3);
    let mut s = Session::create(
        "r",
        cfg,
        &roster(2, 0, StrategyId::Stable),
        SessionOptions::default(),
        None,
        T0,
    )
    .unwrap();
    let (a, b) = (s.human_tokens()[0].clone(), s.human_tokens()[1].clone());
    s.join(&a, T0).unwrap();
    s.join(&b, T0).unwrap();
    s.submit_choice(&a, 0, T0 + 1).unwrap();
    s.submit_choice(&a, 1, T0 + 2).unwrap();
    assert_eq!(s.participant_view(0).pending_choice, Some(1));
    s.submit_choice(&b, 0, T0 + 3).unwrap();
    let trace = replay_log(s.log()).unwrap();
    assert_eq!(trace.rounds[0].profile.choices, vec![1, 0]);
    assert_eq!(
        kinds(&s)
            .iter()
            .filter(|k| **k == "CHOICE_SUBMITTED")
            .count(),
        3
    );
}

#[test]
fn wrong_phase_leaves_log_untouched() {
    let mut s = one_human(FeedbackLevel::OwnOnly, 1);
    let token = s.human_tokens()[0].clone();
    assert!(matches!(
        s.submit_choice(&token, 0, T0),
        Err(SessionError::WrongPhase {
            actual: Phase::Lobby
        })
    ));
    s.join(&token, T0).unwrap();
    s.submit_choice(&token, 0, T0 + 1).unwrap();
    assert_eq!(s.phase(), Phase::Finished);
    let len = s.log().len();
    assert!(matches!(
        s.submit_choice(&token, 0, T0 + 2),
        Err(SessionError::WrongPhase { .. })
    ));
    assert_eq!(s.log().len(), len);
}

#[test]
fn bad_inputs_rejected() {
    let (mut s, token) = started(FeedbackLevel::OwnOnly, 5);
    assert!(matches!(
        s.submit_choice("nope", 0, T0),
        Err(SessionError::UnknownToken)
    ));
    assert!(matches!(
        s.submit_choice(&token, 10, T0),
        Err(SessionError::InvalidChoice { choice: 10, m: 10 })
    ));
    assert!(matches!(
        s.get_state("nope"),
        Err(SessionError::UnknownToken)
    ));
    let deadline = s.deadline_ms().unwrap();
    assert!(matches!(
        s.submit_choice(&token, 1, deadline),
        Err(SessionError::DeadlinePassed)
    ));
}

#[test]
fn deadline_defaults() {
    let (mut s, token) = started(FeedbackLevel::OwnOnly, 10);
    assert!(matches!(
        s.advance_on_deadline(T0 + 5),
        Err(SessionError::DeadlineNotReached { .. })
    ));

    // round 0 silent: uniform default from the timeout stream, logged distinctly
    let d0 = s.deadline_ms().unwrap();
    s.advance_on_deadline(d0).unwrap();
    let expected0 = RngStream::new(
        s.config().seed,
        StreamKey::TimeoutDefault {
            replication: 0,
            agent: 0,
        },
    )
    .below(10);
    assert!(s.log().iter().any(|e| e.body
        == EventBody::TimeoutDefaulted {
            round: 0,
            agent: 0,
            choice: expected0
        }));

    // rounds 1..=2 chosen, round 3 silent -> repeats round 2's choice
    for r in 1..=2 {
        s.submit_choice(&token, 2, T0 + 100 * r).unwrap();
    }
    assert_eq!(s.current_round(), 3);
    let d3 = s.deadline_ms().unwrap();
    s.tick(d3).unwrap();
    assert!(s.log().iter().any(|e| e.body
        == EventBody::TimeoutDefaulted {
            round: 3,
            agent: 0,
            choice: 2
        }));
    let trace = replay_log(s.log()).unwrap();
    assert_eq!(trace.rounds[3].defaulted, vec![0]);
    assert!(s.participant_view(0).own_history[3].defaulted);
    assert!(!s.participant_view(0).own_history[2].defaulted);
}

#[test]
fn all_silent_rounds_still_resolve() {
    let cfg = GameConfig::unranked(3, 3).with_horizon(4).with_seed(2);
    let mut s = Session::create(
        "q",
        cfg,
        &roster(3, 0, StrategyId::Stable),
        SessionOptions::default(),
        None,
        T0,
    )
    .unwrap();
    for t in s.human_tokens().to_vec() {
        s.join(&t, T0).unwrap();
    }
    let mut now = T0;
    while s.phase() != Phase::Finished {
        now = s.deadline_ms().unwrap();
        s.tick(now).unwrap();
    }
    let trace = replay_log(s.log()).unwrap();
    assert_eq!(trace.len(), 4);
    assert!(trace.rounds.iter().all(|r| r.defaulted == vec![0, 1, 2]));
    assert!(now > T0);
}

#[test]
fn inter_round_pause_shows_resolved_phase() {
    let cfg = GameConfig::unranked(2, 2).with_horizon(2);
    let opts = SessionOptions {
        round_deadline_ms: 1000,
        inter_round_ms: 500,
    };
    let mut s =
        Session::create("p", cfg, &roster(1, 1, StrategyId::Stable), opts, None, T0).unwrap();
    let t = s.human_tokens()[0].clone();
    s.join(&t, T0).unwrap();
    s.submit_choice(&t, 0, T0 + 1).unwrap();
    assert_eq!(s.phase(), Phase::Resolved);
    assert!(!s.tick(T0 + 100).unwrap());
    assert!(s.tick(T0 + 501).unwrap());
    assert_eq!((s.phase(), s.current_round()), (Phase::Choosing, 1));
}

#[test]
fn views_follow_feedback_level() {
    for feedback in [
        FeedbackLevel::OwnOnly,
        FeedbackLevel::Occupancy,
        FeedbackLevel::Full,
    ] {
        let (mut s, token) = started(feedback, 5);
        s.submit_choice(&token, 0, T0 + 1).unwrap();
        let view = s.participant_view(0);
        let last = view.last_round.unwrap();
        assert_eq!(
            last.occupancy.is_some(),
            feedback >= FeedbackLevel::Occupancy
        );
        assert_eq!(last.full_profile.is_some(), feedback == FeedbackLevel::Full);
        assert_eq!(view.own_history.len(), 1);
        if feedback == FeedbackLevel::Full {
            let EventBody::RoundResolved { profile, .. } = &s.log()[s.log().len() - 1 - 9].body
            else {
                panic!("layout");
            };
            assert_eq!(last.full_profile.as_ref(), Some(profile));
        }
    }
}

#[test]
fn own_only_view_after_a_loss() {
    // find a seed where the human loses round 0
    for seed in 0..200 {
        let cfg = GameConfig::unranked(10, 10).with_horizon(3).with_seed(seed);
        let mut s = Session::create(
            "l",
            cfg,
            &roster(1, 9, StrategyId::UniformRandom),
            SessionOptions::default(),
            None,
            T0,
        )
        .unwrap();
        let t = s.human_tokens()[0].clone();
        s.join(&t, T0).unwrap();
        s.submit_choice(&t, 0, T0 + 1).unwrap();
        let view = s.participant_view(0);
        if !view.own_history[0].won {
            assert_eq!(view.own_history[0].payoff, 0.0);
            assert!(view.last_round.unwrap().occupancy.is_none());
            return;
        }
    }
    panic!("no losing seed found");
}

/// Keys under which other agents' choices could appear.
fn leaks_choices(value: &serde_json::Value) -> bool {
    match value {
        serde_json::Value::Object(map) => map.iter().any(|(k, v)| {
            matches!(
                k.as_str(),
                "full_profile" | "profile" | "occupancy" | "arrivals" | "winner" | "choices"
            ) || leaks_choices(v)
        }),
        serde_json::Value::Array(items) => items.iter().any(leaks_choices),
        _ => false,
    }
}

#[test]
fn own_only_traffic_never_contains_other_choices() {
    let (mut s, token) = started(FeedbackLevel::OwnOnly, 10);
    let mut captured = s.messages_since(Role::Participant(0), None);
    let mut seen = Some(captured.last().unwrap().seq);
    for r in 0..10 {
        s.submit_choice(&token, r % 10, T0 + 10 * r as u64 + 1)
            .unwrap();
        let batch = s.messages_since(Role::Participant(0), seen);
        seen = Some(batch.last().unwrap().seq);
        captured.extend(batch);
    }
    assert_eq!(s.phase(), Phase::Finished);
    for msg in &captured {
        let value = serde_json::to_value(msg).unwrap();
        assert!(!leaks_choices(&value), "leak: {}", msg.to_line());
        if let ServerBody::Event { event } = &msg.body {
            if event.kind == "CHOICE_SUBMITTED" || event.kind == "TIMEOUT_DEFAULTED" {
                // only the participant's own submissions are forwarded
                let own: Vec<usize> = s
                    .log()
                    .iter()
                    .filter_map(|e| match e.body {
                        EventBody::ChoiceSubmitted {
                            agent: 0, choice, ..
                        } => Some(choice),
                        _ => None,
                    })
                    .collect();
                assert!(own.contains(&(event.payload["choice"].as_u64().unwrap() as usize)));
            }
        }
    }
    // the full-feedback control does expose the profile
    let (mut full, token) = started(FeedbackLevel::Full, 2);
    full.submit_choice(&token, 0, T0 + 1).unwrap();
    let msgs = full.messages_since(Role::Participant(0), None);
    assert!(msgs
        .iter()
        .any(|m| leaks_choices(&serde_json::to_value(m).unwrap())));
}

#[test]
fn every_message_is_stamped() {
    let (s, _) = started(FeedbackLevel::OwnOnly, 3);
    for msg in s.messages_since(Role::Experimenter, None) {
        let v = serde_json::to_value(&msg).unwrap();
        for key in ["session_id", "round", "phase", "seq", "type"] {
            assert!(v.get(key).is_some(), "missing {key} in {v}");
        }
    }
}

#[test]
fn experimenter_controls() {
    let (mut s, _) = started(FeedbackLevel::OwnOnly, 5);
    let admin = s.admin_token().to_string();
    assert_eq!(s.authorize(&admin).unwrap(), Role::Experimenter);
    assert_eq!(s.experimenter_view().submissions_received, 9);
    s.force_advance(T0 + 1).unwrap();
    assert_eq!(s.current_round(), 1);
    s.finish_early(T0 + 2).unwrap();
    assert_eq!(s.phase(), Phase::Finished);
    let trace = replay_log(s.log()).unwrap();
    assert_eq!(trace.len(), 1);
    assert_eq!(
        s.experimenter_view().per_round_utilization,
        trace.per_round_utilization
    );
}

#[derive(Clone, Default)]
struct SharedBuf(Arc<Mutex<Vec<u8>>>);

impl Write for SharedBuf {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }
    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

#[test]
fn sink_receives_every_event_as_a_line() {
    let buf = SharedBuf::default();
    let cfg = GameConfig::unranked(4, 4).with_horizon(6);
    let s = Session::create(
        "k",
        cfg,
        &roster(0, 4, StrategyId::UniformRandom),
        SessionOptions::default(),
        Some(Box::new(buf.clone())),
        T0,
    )
    .unwrap();
    let written = String::from_utf8(buf.0.lock().unwrap().clone()).unwrap();
    assert_eq!(written, s.log_ndjson());
    assert_eq!(parse_log(&written).unwrap(), s.log());
}

#[test]
fn concurrent_submitters_resolve_each_round_once() {
    let n = 8;
    let rounds = 30;
    let cfg = GameConfig::unranked(n, n).with_horizon(rounds).with_seed(1);
    let mut s = Session::create(
        "c",
        cfg,
        &roster(n, 0, StrategyId::Stable),
        SessionOptions::default(),
        None,
        T0,
    )
    .unwrap();
    let tokens = s.human_tokens().to_vec();
    for t in &tokens {
        s.join(t, T0).unwrap();
    }
    let shared = Arc::new(Mutex::new(s));
    let handles: Vec<_> = tokens
        .into_iter()
        .enumerate()
        .map(|(i, token)| {
            let shared = Arc::clone(&shared);
            std::thread::spawn(move || {
                let mut submitted = 0;
                while submitted < rounds {
                    let mut s = shared.lock().unwrap();
                    if s.phase() == Phase::Finished {
                        break;
                    }
                    let r = s.current_round();
                    if r == submitted && s.participant_view(i).pending_choice.is_none() {
                        s.submit_choice(&token, (i + r) % n, T0 + 1).unwrap();
                        submitted += 1;
                    }
                    drop(s);
                    std::thread::yield_now();
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    let s = shared.lock().unwrap();
    let resolved: Vec<usize> = s
        .log()
        .iter()
        .filter_map(|e| match e.body {
            EventBody::RoundResolved { round, .. } => Some(round),
            _ => None,
        })
        .collect();
    assert_eq!(resolved, (0..rounds).collect::<Vec<_>>());
    assert_eq!(s.phase(), Phase::Finished);
}
