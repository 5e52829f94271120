//! Effective configuration: defaults, overridden by a config file,
//! overridden by flags. The echoed form is itself a valid config file.

use std::path::PathBuf;

use clap::Args;
use kpr_core::game::default_ranked_utilities;
use kpr_core::{FeedbackLevel, GameConfig, Mode, StrategyId, StrategySpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DEFAULT_HORIZON: usize = 100;

#[derive(Debug, Clone, Args)]
pub struct GameArgs {
    /// JSON file with game fields and an optional "strategies" array.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub players: Option<usize>,
    #[arg(long)]
    pub restaurants: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// kpr or minority.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    /// Comma-separated rank utilities, best first, or "ranked" for (m-k+1)/m.
    #[arg(long)]
    pub utilities: Option<String>,
    /// Strategy mix: "uniform_random" for everyone, or "stick_if_won:50,uniform_random:50".
    #[arg(long)]
    pub strategy: Option<String>,
    /// JSON array of {"strategy_id", "params", "count"} entries.
    #[arg(long)]
    pub strategy_file: Option<PathBuf>,
    /// own_only, occupancy or full.
    #[arg(long, value_parser = parse_feedback)]
    pub feedback: Option<FeedbackLevel>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s.to_ascii_lowercase().as_str() {
        "kpr" => Ok(Mode::Kpr),
        "minority" => Ok(Mode::Minority),
        _ => Err(format!("unknown mode {s:?} (expected kpr or minority)")),
    }
}

fn parse_feedback(s: &str) -> Result<FeedbackLevel, String> {
    match s.to_ascii_lowercase().replace('-', "_").as_str() {
        "own_only" => Ok(FeedbackLevel::OwnOnly),
        "occupancy" => Ok(FeedbackLevel::Occupancy),
        "full" => Ok(FeedbackLevel::Full),
        _ => Err(format!(
            "unknown feedback level {s:?} (expected own_only, occupancy or full)"
        )),
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    mode: Option<Mode>,
    n_players: Option<usize>,
    m_restaurants: Option<usize>,
    utilities: Option<Vec<f64>>,
    horizon: Option<usize>,
    seed: Option<u64>,
    feedback_level: Option<FeedbackLevel>,
    strategies: Option<Vec<StrategySpec>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectiveConfig {
    #[serde(flatten)]
    pub game: GameConfig,
    pub strategies: Vec<StrategySpec>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn parse_utilities(s: &str, m: Option<usize>) -> Result<Vec<f64>, CliError> {
    if s.eq_ignore_ascii_case("ranked") {
        let m = m.ok_or_else(|| CliError::usage("--utilities ranked needs --restaurants"))?;
        return Ok(default_ranked_utilities(m));
    }
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| CliError::usage(format!("bad utility {x:?} in --utilities")))
        })
        .collect()
}

/// Parses "name" (whole population) or "name:count,name:count".
pub fn parse_mix(s: &str, n_players: usize) -> Result<Vec<StrategySpec>, CliError> {
    let entries: Vec<&str> = s
        .split(',')
        .map(str::trim)
        .filter(|e| !e.is_empty())
        .collect();
    if entries.is_empty() {
        return Err(CliError::usage("empty --strategy"));
    }
    entries
        .iter()
        .map(|entry| {
            let (name, count) = match entry.split_once(':') {
                Some((name, count)) => {
                    let count = count.trim().parse().map_err(|_| {
                        CliError::usage(format!("bad count in strategy entry {entry:?}"))
                    })?;
                    (name, count)
                }
                None if entries.len() == 1 => (*entry, n_players),
                None => {
                    return Err(CliError::usage(format!(
                        "strategy entry {entry:?} needs a count"
                    )))
                }
            };
            let strategy_id: StrategyId = name
                .parse()
                .map_err(|e: kpr_core::strategy::StrategyError| CliError::usage(e.to_string()))?;
            Ok(StrategySpec {
                strategy_id,
                params: Default::default(),
                count,
            })
        })
        .collect()
}

impl GameArgs {
    /// Builds the effective config. `strategies_required` makes a missing
    /// mix a usage error; otherwise the mix may be empty.
    pub fn resolve(&self, strategies_required: bool) -> Result<EffectiveConfig, CliError> {
        let file: ConfigFile = match &self.config {
            Some(path) => read_json(path)?,
            None => ConfigFile::default(),
        };
        let mode = self.mode.or(file.mode).unwrap_or(Mode::Kpr);
        let n_players = self.players.or(file.n_players).ok_or_else(|| {
            CliError::usage("number of players missing (--players or n_players in --config)")
        })?;
        let m_flag = self.restaurants.or(file.m_restaurants);
        let utilities = match &self.utilities {
            Some(s) => Some(parse_utilities(s, m_flag)?),
            None => file.utilities,
        };
        let m_restaurants =
            match (m_flag, &utilities, mode) {
                (Some(m), _, _) => m,
                (None, Some(u), _) => u.len(),
                (None, None, Mode::Minority) => 2,
                (None, None, Mode::Kpr) => return Err(CliError::usage(
                    "number of restaurants missing (--restaurants or m_restaurants in --config)",
                )),
            };
        let game = GameConfig {
            mode,
            n_players,
            m_restaurants,
            utilities: utilities.unwrap_or_else(|| vec![1.0; m_restaurants]),
            horizon: self.rounds.or(file.horizon).unwrap_or(DEFAULT_HORIZON),
            seed: self.seed.or(file.seed).unwrap_or(0),
            feedback_level: self
                .feedback
                .or(file.feedback_level)
                .unwrap_or(FeedbackLevel::OwnOnly),
        };
        game.validate().map_err(|e| CliError::data(e.to_string()))?;

        let strategies = match (&self.strategy, &self.strategy_file, file.strategies) {
            (Some(_), Some(_), _) => {
                return Err(CliError::usage(
                    "--strategy and --strategy-file are exclusive",
                ))
            }
            (Some(mix), None, _) => parse_mix(mix, n_players)?,
            (None, Some(path), _) => read_json(path)?,
            (None, None, Some(specs)) => specs,
            (None, None, None) if strategies_required => return Err(CliError::usage(
                "strategy mix missing (--strategy, --strategy-file or \"strategies\" in --config)",
            )),
            (None, None, None) => Vec::new(),
        };
        Ok(EffectiveConfig { game, strategies })
    }
}

impl EffectiveConfig {
    pub fn echo(&self) -> String {
        format!(
            "effective_config {}",
            serde_json::to_string(self).expect("config serializes")
        )
    }
}
