//! Benchmark fixtures shared by the criterion benches.

use kpr_core::{AgentStrategy, GameConfig, StrategyId};

/// n = m = 100 unranked game with every agent on `id`.
pub fn population(id: StrategyId, horizon: usize) -> (GameConfig, Vec<AgentStrategy>) {
    let config = GameConfig::unranked(100, 100)
        .with_horizon(horizon)
        .with_seed(1);
    (config, vec![AgentStrategy::new(id); 100])
}
