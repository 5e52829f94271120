//! Exact pure-strategy equilibrium analysis of small KPR instances.
//!
//! An agent sharing restaurant `r` with `k - 1` others expects `u_r / k`.
//! Every value that can arise, `u_r / k` for `k` in `1..=n`, is converted to
//! an exact rational and ranked once; all payoff comparisons then use the
//! integer ranks, so exact ties such as `u_2 == u_1 / 2` never flip on
//! rounding.

use std::cmp::Ordering;
use std::fmt::Write as _;

use num_bigint::BigInt;
use num_rational::BigRational;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{ChoiceProfile, GameConfig, GameError, Mode};

pub const DEFAULT_MAX_PROFILES: u64 = 1_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum NashError {
    #[error(transparent)]
    Game(#[from] GameError),
    #[error("agent {agent} out of range for {n} players")]
    AgentOutOfRange { agent: usize, n: usize },
    #[error("refusing to enumerate {profiles} profiles (limit {max}); raise the profile limit to proceed")]
    TooLarge { profiles: String, max: u64 },
}

/// A unilateral move that strictly improves the mover's expected payoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    pub agent: usize,
    pub from: usize,
    pub target: usize,
    pub current_payoff: f64,
    pub deviation_payoff: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NashCheck {
    pub is_nash: bool,
    /// Present exactly when `is_nash` is false.
    pub deviation: Option<Deviation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfilePayoffs {
    pub profile: ChoiceProfile,
    pub payoffs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NashReport {
    pub config: GameConfig,
    pub profiles_examined: u64,
    pub pure_nash: Vec<ChoiceProfile>,
    /// Empty when the payoff table was not requested.
    pub per_profile_expected_payoffs: Vec<ProfilePayoffs>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NashOptions {
    pub max_profiles: u64,
    pub record_payoffs: bool,
}

impl Default for NashOptions {
    fn default() -> Self {
        Self {
            max_profiles: DEFAULT_MAX_PROFILES,
            record_payoffs: true,
        }
    }
}

/// Exact ordering of every attainable expected payoff of one game.
#[derive(Debug, Clone)]
pub struct PayoffLattice {
    n: usize,
    m: usize,
    utilities: Vec<f64>,
    /// rank[r * n + (k - 1)]: dense rank of u_r / k among all attainable values.
    rank: Vec<u32>,
}

impl PayoffLattice {
    pub fn new(config: &GameConfig) -> Result<Self, GameError> {
        config.validate()?;
        config.require_mode(Mode::Kpr)?;
        let n = config.n_players;
        let m = config.m_restaurants;
        let mut values: Vec<(BigRational, usize)> = Vec::with_capacity(n * m);
        for (r, &u) in config.utilities.iter().enumerate() {
            let exact = BigRational::from_float(u).expect("validated utilities are finite");
            for k in 1..=n {
                values.push((&exact / BigInt::from(k), r * n + (k - 1)));
            }
        }
        values.sort_by(|a, b| a.0.cmp(&b.0));
        let mut rank = vec![0u32; n * m];
        let mut current = 0u32;
        for i in 0..values.len() {
            if i > 0 && values[i].0 != values[i - 1].0 {
                current += 1;
            }
            rank[values[i].1] = current;
        }
        Ok(Self {
            n,
            m,
            utilities: config.utilities.clone(),
            rank,
        })
    }

    fn rank_of(&self, restaurant: usize, sharers: u32) -> u32 {
        self.rank[restaurant * self.n + (sharers as usize - 1)]
    }

    fn value_of(&self, restaurant: usize, sharers: u32) -> f64 {
        self.utilities[restaurant] / f64::from(sharers)
    }

    fn expected(&self, profile: &ChoiceProfile, arrivals: &[u32]) -> Vec<f64> {
        profile
            .choices
            .iter()
            .map(|&c| self.value_of(c, arrivals[c]))
            .collect()
    }

    /// Sharers `agent` would face at `target`, itself included.
    fn sharers_after_move(arrivals: &[u32], current: usize, target: usize) -> u32 {
        if target == current {
            arrivals[target]
        } else {
            arrivals[target] + 1
        }
    }

    fn best_response(&self, arrivals: &[u32], current: usize) -> Vec<usize> {
        let ranks: Vec<u32> = (0..self.m)
            .map(|t| self.rank_of(t, Self::sharers_after_move(arrivals, current, t)))
            .collect();
        let best = *ranks.iter().max().expect("m > 0");
        (0..self.m).filter(|&t| ranks[t] == best).collect()
    }

    fn find_deviation(&self, profile: &ChoiceProfile, arrivals: &[u32]) -> Option<Deviation> {
        for (agent, &current) in profile.choices.iter().enumerate() {
            let here = self.rank_of(current, arrivals[current]);
            let best = (0..self.m)
                .filter(|&t| t != current)
                .map(|t| (t, self.rank_of(t, arrivals[t] + 1)))
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)));
            if let Some((target, rank)) = best {
                if rank.cmp(&here) == Ordering::Greater {
                    let current_payoff = self.value_of(current, arrivals[current]);
                    let deviation_payoff = self.value_of(target, arrivals[target] + 1);
                    return Some(Deviation {
                        agent,
                        from: current,
                        target,
                        current_payoff,
                        deviation_payoff,
                        gain: deviation_payoff - current_payoff,
                    });
                }
            }
        }
        None
    }

    fn check(&self, profile: &ChoiceProfile, arrivals: &[u32]) -> NashCheck {
        let deviation = self.find_deviation(profile, arrivals);
        NashCheck {
            is_nash: deviation.is_none(),
            deviation,
        }
    }
}

fn prepare(
    config: &GameConfig,
    profile: &ChoiceProfile,
) -> Result<(PayoffLattice, Vec<u32>), NashError> {
    let lattice = PayoffLattice::new(config)?;
    profile.validate(config)?;
    let arrivals = profile.arrivals(config.m_restaurants);
    Ok((lattice, arrivals))
}

/// Expected payoff of every agent: `u_r / k` for an agent among `k` arrivals at `r`.
pub fn expected_payoffs(
    config: &GameConfig,
    profile: &ChoiceProfile,
) -> Result<Vec<f64>, NashError> {
    let (lattice, arrivals) = prepare(config, profile)?;
    Ok(lattice.expected(profile, &arrivals))
}

/// True iff no agent can strictly raise its expected payoff by moving alone.
/// Otherwise reports the lowest-index agent with a profitable move and its
/// most profitable target.
pub fn is_pure_nash(config: &GameConfig, profile: &ChoiceProfile) -> Result<NashCheck, NashError> {
    let (lattice, arrivals) = prepare(config, profile)?;
    Ok(lattice.check(profile, &arrivals))
}

/// The restaurants maximizing `agent`'s expected payoff with everyone else fixed.
pub fn best_response(
    config: &GameConfig,
    profile: &ChoiceProfile,
    agent: usize,
) -> Result<Vec<usize>, NashError> {
    let (lattice, arrivals) = prepare(config, profile)?;
    if agent >= config.n_players {
        return Err(NashError::AgentOutOfRange {
            agent,
            n: config.n_players,
        });
    }
    Ok(lattice.best_response(&arrivals, profile.choices[agent]))
}

/// Profile with index `idx` in lexicographic order (agent 0 most significant).
fn decode_profile(mut idx: u64, n: usize, m: usize) -> ChoiceProfile {
    let mut choices = vec![0usize; n];
    for slot in choices.iter_mut().rev() {
        *slot = (idx % m as u64) as usize;
        idx /= m as u64;
    }
    ChoiceProfile::new(choices)
}

pub fn profile_count(n: usize, m: usize) -> Option<u64> {
    u64::try_from(m).ok()?.checked_pow(u32::try_from(n).ok()?)
}

/// Checks all `m^n` profiles. Refuses outright when that exceeds
/// `options.max_profiles`; never returns a partial answer.
pub fn enumerate_pure_nash(
    config: &GameConfig,
    options: &NashOptions,
) -> Result<NashReport, NashError> {
    let lattice = PayoffLattice::new(config)?;
    let (n, m) = (config.n_players, config.m_restaurants);
    let total = match profile_count(n, m) {
        Some(total) if total <= options.max_profiles => total,
        other => {
            let profiles = other.map_or_else(|| format!("{m}^{n}"), |t| t.to_string());
            return Err(NashError::TooLarge {
                profiles,
                max: options.max_profiles,
            });
        }
    };

    let results: Vec<(ChoiceProfile, bool, Option<Vec<f64>>)> = (0..total)
        .into_par_iter()
        .map(|idx| {
            let profile = decode_profile(idx, n, m);
            let arrivals = profile.arrivals(m);
            let nash = lattice.find_deviation(&profile, &arrivals).is_none();
            let payoffs = options
                .record_payoffs
                .then(|| lattice.expected(&profile, &arrivals));
            (profile, nash, payoffs)
        })
        .collect();

    let mut pure_nash = Vec::new();
    let mut table = Vec::new();
    for (profile, nash, payoffs) in results {
        if nash {
            pure_nash.push(profile.clone());
        }
        if let Some(payoffs) = payoffs {
            table.push(ProfilePayoffs { profile, payoffs });
        }
    }

    Ok(NashReport {
        config: config.clone(),
        profiles_examined: total,
        pure_nash,
        per_profile_expected_payoffs: table,
    })
}

/// Plain-text table of the equilibria for terminal output.
pub fn render_table(report: &NashReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} pure Nash equilibria among {} profiles (n={}, m={}, utilities={:?})",
        report.pure_nash.len(),
        report.profiles_examined,
        report.config.n_players,
        report.config.m_restaurants,
        report.config.utilities
    );
    let lattice = PayoffLattice::new(&report.config).ok();
    let _ = writeln!(out, "{:<6} {:<24} expected payoffs", "#", "profile");
    for (i, p) in report.pure_nash.iter().enumerate() {
        let payoffs = lattice
            .as_ref()
            .map(|l| l.expected(p, &p.arrivals(report.config.m_restaurants)))
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "{:<6} {:<24} {:?}",
            i,
            format!("{:?}", p.choices),
            payoffs
        );
    }
    out
}
