#![allow(dead_code)]

use kpr_core::rng::{RngStream, StreamKey};
use kpr_core::simulator::{RoundRecord, Trace, TraceSource};
use kpr_core::{ChoiceProfile, GameConfig, RoundOutcome};

/// Exact distribution of the number of occupied restaurants when `n` agents
/// pick uniformly among `m`, by enumerating all `m^n` profiles.
pub fn occupancy_law(n: usize, m: usize) -> Vec<f64> {
    let total = m.pow(n as u32);
    let mut counts = vec![0usize; m + 1];
    for idx in 0..total {
        let mut seen = vec![false; m];
        let mut rest = idx;
        for _ in 0..n {
            seen[rest % m] = true;
            rest /= m;
        }
        counts[seen.iter().filter(|&&s| s).count()] += 1;
    }
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

/// Synthetic population whose switching depends only on the previous
/// outcome: wins are i.i.d. with probability `p_win_outcome`, and an agent
/// switches restaurant with `p_after_win` / `p_after_loss`.
/// The generator parameters are the oracle for the switch estimator.
pub fn synthetic_switchers(
    agents: usize,
    rounds: usize,
    p_after_win: f64,
    p_after_loss: f64,
    seed: u64,
) -> Trace {
    let m = 4;
    let cfg = GameConfig::unranked(agents, m)
        .with_horizon(rounds)
        .with_seed(seed);
    let mut rng = RngStream::with_stream_id(seed, 0xabcdef);
    let mut choices: Vec<usize> = (0..agents).map(|_| rng.below(m)).collect();
    let mut records = Vec::with_capacity(rounds);
    let mut won = vec![false; agents];
    for t in 0..rounds {
        if t > 0 {
            for a in 0..agents {
                let p = if won[a] { p_after_win } else { p_after_loss };
                if rng.bernoulli(p) {
                    // move to a uniformly chosen different restaurant
                    let step = 1 + rng.below(m - 1);
                    choices[a] = (choices[a] + step) % m;
                }
            }
        }
        for w in won.iter_mut() {
            *w = rng.bernoulli(0.5);
        }
        let profile = ChoiceProfile::new(choices.clone());
        let arrivals = profile.arrivals(m);
        records.push(RoundRecord {
            outcome: RoundOutcome {
                occupied_count: arrivals.iter().filter(|&&a| a > 0).count(),
                arrivals,
                winner: vec![None; m],
                payoffs: won.iter().map(|&w| if w { 1.0 } else { 0.0 }).collect(),
            },
            profile,
            defaulted: vec![],
        });
    }
    Trace::new(cfg, vec![None; agents], records, TraceSource::Simulated)
}

pub fn tie_rng(seed: u64) -> RngStream {
    RngStream::new(seed, StreamKey::TieBreak { replication: 0 })
}

/// Expected payoffs computed straight from the definition (no shared code
/// with the equilibrium module): an agent among k arrivals at r gets u_r / k.
pub fn naive_expected(utilities: &[f64], choices: &[usize]) -> Vec<f64> {
    choices
        .iter()
        .map(|&c| utilities[c] / choices.iter().filter(|&&x| x == c).count() as f64)
        .collect()
}
