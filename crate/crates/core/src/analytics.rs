//! Statistics over traces: choice switching, outcome-conditioned switch
//! probabilities, behavioural-type labels and treatment comparisons.
//!
//! A "switch" at round t >= 1 means the agent's restaurant differs from its
//! restaurant at t - 1; it is conditioned on whether the agent won at t - 1.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::simulator::{default_burn_in, mean_and_std, Trace};

pub const MIN_ROUNDS_FOR_CLASSIFICATION: usize = 20;
const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Error, PartialEq)]
pub enum AnalyticsError {
    #[error("trace has {rounds} rounds, need at least {needed}")]
    InsufficientData { rounds: usize, needed: usize },
    #[error("treatment arm {arm} has {traces} traces, need at least 2")]
    ArmTooSmall { arm: char, traces: usize },
    #[error("invalid thresholds: stable {stable} must be below noise {noise}, both in [0, 1]")]
    Thresholds { stable: f64, noise: f64 },
    #[error("csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchCounts {
    pub after_win_switch: u64,
    pub after_win_stay: u64,
    pub after_loss_switch: u64,
    pub after_loss_stay: u64,
}

impl SwitchCounts {
    pub fn total(&self) -> u64 {
        self.after_win_switch + self.after_win_stay + self.after_loss_switch + self.after_loss_stay
    }

    fn add(&mut self, won_before: bool, switched: bool) {
        match (won_before, switched) {
            (true, true) => self.after_win_switch += 1,
            (true, false) => self.after_win_stay += 1,
            (false, true) => self.after_loss_switch += 1,
            (false, false) => self.after_loss_stay += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchStats {
    pub per_agent_switch_rate: Vec<f64>,
    /// 0 when no win was ever followed by another round.
    pub p_switch_given_win: f64,
    pub p_switch_given_loss: f64,
    pub counts: SwitchCounts,
    /// Normal-approximation 95% half-widths for (given win, given loss).
    pub ci95_halfwidths: [f64; 2],
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn binomial_halfwidth(p: f64, trials: u64) -> f64 {
    if trials == 0 {
        0.0
    } else {
        Z95 * (p * (1.0 - p) / trials as f64).sqrt()
    }
}

fn switched(trace: &Trace, t: usize, agent: usize) -> bool {
    trace.rounds[t].profile.choices[agent] != trace.rounds[t - 1].profile.choices[agent]
}

pub fn switch_statistics(trace: &Trace) -> Result<SwitchStats, AnalyticsError> {
    if trace.len() < 2 {
        return Err(AnalyticsError::InsufficientData {
            rounds: trace.len(),
            needed: 2,
        });
    }
    let n = trace.n_agents();
    let transitions = (trace.len() - 1) as f64;
    let mut counts = SwitchCounts::default();
    let mut per_agent = vec![0u64; n];
    for t in 1..trace.len() {
        let before = &trace.rounds[t - 1].outcome;
        for (agent, tally) in per_agent.iter_mut().enumerate() {
            let s = switched(trace, t, agent);
            *tally += u64::from(s);
            counts.add(before.won(agent), s);
        }
    }
    let wins = counts.after_win_switch + counts.after_win_stay;
    let losses = counts.after_loss_switch + counts.after_loss_stay;
    let p_win = ratio(counts.after_win_switch, wins);
    let p_loss = ratio(counts.after_loss_switch, losses);
    Ok(SwitchStats {
        per_agent_switch_rate: per_agent.iter().map(|&s| s as f64 / transitions).collect(),
        p_switch_given_win: p_win,
        p_switch_given_loss: p_loss,
        counts,
        ci95_halfwidths: [
            binomial_halfwidth(p_win, wins),
            binomial_halfwidth(p_loss, losses),
        ],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BehaviorType {
    NoiseTrader,
    Stable,
    Intermediate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Switch rates at or below this are STABLE.
    pub stable: f64,
    /// Switch rates at or above this are NOISE_TRADER.
    pub noise: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            stable: 0.02,
            noise: 0.5,
        }
    }
}

impl Thresholds {
    pub fn label(&self, switch_rate: f64) -> BehaviorType {
        if switch_rate <= self.stable {
            BehaviorType::Stable
        } else if switch_rate >= self.noise {
            BehaviorType::NoiseTrader
        } else {
            BehaviorType::Intermediate
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorLabel {
    pub agent: usize,
    pub label: BehaviorType,
    pub switch_rate: f64,
}

pub fn classify_behavior(
    trace: &Trace,
    thresholds: &Thresholds,
) -> Result<Vec<BehaviorLabel>, AnalyticsError> {
    let Thresholds { stable, noise } = *thresholds;
    if !(0.0..=1.0).contains(&stable) || !(0.0..=1.0).contains(&noise) || stable >= noise {
        return Err(AnalyticsError::Thresholds { stable, noise });
    }
    if trace.len() < MIN_ROUNDS_FOR_CLASSIFICATION {
        return Err(AnalyticsError::InsufficientData {
            rounds: trace.len(),
            needed: MIN_ROUNDS_FOR_CLASSIFICATION,
        });
    }
    let stats = switch_statistics(trace)?;
    Ok(stats
        .per_agent_switch_rate
        .iter()
        .enumerate()
        .map(|(agent, &switch_rate)| BehaviorLabel {
            agent,
            label: thresholds.label(switch_rate),
            switch_rate,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub traces: usize,
    /// Mean over traces of each trace's post-burn-in mean utilization.
    pub mean_utilization: f64,
    pub std_utilization: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentComparison {
    pub arm_a: ArmSummary,
    pub arm_b: ArmSummary,
    /// `arm_b.mean_utilization - arm_a.mean_utilization`.
    pub difference: f64,
    pub welch_t: f64,
    pub degrees_of_freedom: f64,
    pub ci95: [f64; 2],
}

impl TreatmentComparison {
    pub fn ci_excludes_zero(&self) -> bool {
        self.ci95[0] > 0.0 || self.ci95[1] < 0.0
    }
}

fn trace_means(traces: &[Trace], burn_in: Option<usize>) -> Vec<f64> {
    traces
        .iter()
        .map(|t| {
            t.utilization_summary(burn_in.unwrap_or_else(|| default_burn_in(t.len())))
                .0
        })
        .collect()
}

/// Welch comparison of per-trace post-burn-in mean utilization between two
/// arms. `burn_in` defaults to half of each trace's length.
pub fn compare_treatments(
    traces_a: &[Trace],
    traces_b: &[Trace],
    burn_in: Option<usize>,
) -> Result<TreatmentComparison, AnalyticsError> {
    for (arm, traces) in [('a', traces_a), ('b', traces_b)] {
        if traces.len() < 2 {
            return Err(AnalyticsError::ArmTooSmall {
                arm,
                traces: traces.len(),
            });
        }
    }
    Ok(welch(
        &trace_means(traces_a, burn_in),
        &trace_means(traces_b, burn_in),
    ))
}

/// Welch two-sample comparison of `b - a` on raw samples (each of size >= 2).
pub fn welch(a: &[f64], b: &[f64]) -> TreatmentComparison {
    let (mean_a, std_a) = mean_and_std(a);
    let (mean_b, std_b) = mean_and_std(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let va = std_a * std_a / na;
    let vb = std_b * std_b / nb;
    let se = (va + vb).sqrt();
    let difference = mean_b - mean_a;

    let (welch_t, dof, half) = if se > 0.0 {
        let dof = (va + vb).powi(2) / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
        let t_crit = StudentsT::new(0.0, 1.0, dof)
            .expect("positive degrees of freedom")
            .inverse_cdf(0.975);
        (difference / se, dof, t_crit * se)
    } else {
        let t = if difference == 0.0 {
            0.0
        } else {
            difference.signum() * f64::INFINITY
        };
        (t, na + nb - 2.0, 0.0)
    };

    TreatmentComparison {
        arm_a: ArmSummary {
            traces: a.len(),
            mean_utilization: mean_a,
            std_utilization: std_a,
        },
        arm_b: ArmSummary {
            traces: b.len(),
            mean_utilization: mean_b,
            std_utilization: std_b,
        },
        difference,
        welch_t,
        degrees_of_freedom: dof,
        ci95: [difference - half, difference + half],
    }
}

fn csv_string(rows: Vec<Vec<String>>) -> Result<String, AnalyticsError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.write_record(&row)
            .map_err(|e| AnalyticsError::Csv(e.to_string()))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| AnalyticsError::Csv(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// `round,utilization` series for plotting.
pub fn utilization_plot_csv(trace: &Trace) -> Result<String, AnalyticsError> {
    let mut rows = vec![vec!["round".to_string(), "utilization".to_string()]];
    rows.extend(
        trace
            .per_round_utilization
            .iter()
            .enumerate()
            .map(|(t, u)| vec![t.to_string(), u.to_string()]),
    );
    csv_string(rows)
}

/// Bar data: switch probability after a win and after a loss, with CI half-widths.
pub fn switch_bars_csv(stats: &SwitchStats) -> Result<String, AnalyticsError> {
    let c = &stats.counts;
    csv_string(vec![
        vec![
            "previous_outcome".into(),
            "p_switch".into(),
            "ci95_halfwidth".into(),
            "observations".into(),
        ],
        vec![
            "win".into(),
            stats.p_switch_given_win.to_string(),
            stats.ci95_halfwidths[0].to_string(),
            (c.after_win_switch + c.after_win_stay).to_string(),
        ],
        vec![
            "loss".into(),
            stats.p_switch_given_loss.to_string(),
            stats.ci95_halfwidths[1].to_string(),
            (c.after_loss_switch + c.after_loss_stay).to_string(),
        ],
    ])
}

/// `agent,switch_rate,label` rows.
pub fn labels_csv(labels: &[BehaviorLabel]) -> Result<String, AnalyticsError> {
    let mut rows = vec![vec![
        "agent".to_string(),
        "switch_rate".into(),
        "label".into(),
    ]];
    rows.extend(labels.iter().map(|l| {
        let label = serde_json::to_value(l.label).expect("enum serializes");
        vec![
            l.agent.to_string(),
            l.switch_rate.to_string(),
            label.as_str().unwrap_or_default().to_string(),
        ]
    }));
    csv_string(rows)
}
