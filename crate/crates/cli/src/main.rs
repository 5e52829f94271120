//! `kpr`: simulate, enumerate equilibria, analyze traces, replay session
//! logs and serve live sessions.
//!
//! Exit codes: 0 success, 2 usage, 3 data error, 4 capacity guard. Errors
//! are printed to stderr as a single JSON line.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use kpr_core::analytics::{
    classify_behavior, compare_treatments, labels_csv, switch_bars_csv, switch_statistics,
    utilization_plot_csv, AnalyticsError, BehaviorLabel, SwitchStats, Thresholds,
    TreatmentComparison,
};
use kpr_core::equilibrium::{
    enumerate_pure_nash, render_table, NashError, NashOptions, DEFAULT_MAX_PROFILES,
};
use kpr_core::session::{
    parse_log, replay_log, RosterSpec, SessionOptions, DEFAULT_ROUND_DEADLINE_MS,
};
use kpr_core::strategy::expand_assignment;
use kpr_core::{run_batch, run_game, BatchOptions, Trace};
use kpr_server::{AppState, CreateSessionRequest};
use serde::Serialize;

use config::{EffectiveConfig, GameArgs};

#[derive(Debug)]
pub struct CliError {
    code: &'static str,
    exit: u8,
    message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: "usage",
            exit: 2,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: "data",
            exit: 3,
            message: message.into(),
        }
    }

    fn capacity(message: impl Into<String>) -> Self {
        Self {
            code: "capacity",
            exit: 4,
            message: message.into(),
        }
    }
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::data(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "kpr", version, about = "Kolkata Paise Restaurant laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the repeated game with simulated agents.
    Simulate {
        #[command(flatten)]
        game: GameArgs,
        #[arg(long, default_value_t = 1)]
        replications: usize,
        /// Rounds dropped before summarizing; defaults to half the horizon
        /// for batches and 0 for a single trace.
        #[arg(long)]
        burn_in: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Enumerate pure-strategy Nash equilibria of the one-shot game.
    Nash {
        #[command(flatten)]
        game: GameArgs,
        #[arg(long, default_value_t = DEFAULT_MAX_PROFILES)]
        max_profiles: u64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Switch statistics, behavior labels and treatment comparison.
    Analyze {
        /// Trace JSON files or session logs (arm A).
        #[arg(long = "input", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        /// Arm B for a treatment comparison.
        #[arg(long = "compare", num_args = 1..)]
        compare: Vec<PathBuf>,
        #[arg(long)]
        burn_in: Option<usize>,
        #[arg(long, default_value_t = Thresholds::default().stable)]
        stable_threshold: f64,
        #[arg(long, default_value_t = Thresholds::default().noise)]
        noise_threshold: f64,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Directory for plot-data CSV files.
        #[arg(long)]
        plot_dir: Option<PathBuf>,
    },
    /// Convert a session event log to a Trace.
    Replay {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Host one live session until interrupted.
    Serve {
        #[command(flatten)]
        game: GameArgs,
        #[arg(long, default_value_t = 1)]
        humans: usize,
        #[arg(long, default_value_t = DEFAULT_ROUND_DEADLINE_MS)]
        round_ms: u64,
        #[arg(long, default_value_t = 0)]
        inter_round_ms: u64,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = ".")]
        log_dir: PathBuf,
    },
}

fn write_output(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("outputs serialize")
}

fn simulate(
    effective: &EffectiveConfig,
    replications: usize,
    burn_in: Option<usize>,
    output: Option<&Path>,
    format: Format,
) -> Result<(), CliError> {
    let config = &effective.game;
    let assignment =
        expand_assignment(&effective.strategies, config.n_players).map_err(data_err)?;
    if replications == 0 {
        return Err(CliError::usage("--replications must be at least 1"));
    }
    if replications == 1 {
        let trace = run_game(config, &assignment).map_err(data_err)?;
        let burn_in = burn_in.unwrap_or(0);
        if burn_in >= trace.len() {
            return Err(CliError::usage(format!(
                "--burn-in {burn_in} must be below the horizon {}",
                trace.len()
            )));
        }
        let (mean, std) = trace.utilization_summary(burn_in);
        println!(
            "mean_utilization {mean:.6} +- {std:.6} rounds {} burn_in {burn_in}",
            trace.len() - burn_in
        );
        if let Some(path) = output {
            let text = match format {
                Format::Json => to_json(&trace),
                Format::Csv => trace.to_csv().map_err(data_err)?,
            };
            write_output(path, &text)?;
        }
    } else {
        let mut options = BatchOptions::new(replications);
        options.burn_in = burn_in;
        let batch = run_batch(config, &assignment, &options).map_err(data_err)?;
        println!(
            "mean_utilization {:.6} +- {:.6} replications {} burn_in {}",
            batch.mean_utilization, batch.utilization_std, batch.replications, batch.burn_in
        );
        if let Some(v) = batch.attendance_variance_per_agent {
            println!("attendance_variance_per_agent {v:.6}");
        }
        if let Some(path) = output {
            let text = match format {
                Format::Json => to_json(&batch),
                Format::Csv => {
                    let mut w = csv::Writer::from_writer(Vec::new());
                    w.write_record(["replication", "mean_utilization"])
                        .map_err(data_err)?;
                    for (k, mean) in batch.replication_means.iter().enumerate() {
                        w.write_record([k.to_string(), mean.to_string()])
                            .map_err(data_err)?;
                    }
                    String::from_utf8(w.into_inner().map_err(data_err)?).expect("csv is utf-8")
                }
            };
            write_output(path, &text)?;
        }
    }
    Ok(())
}

fn nash(
    effective: &EffectiveConfig,
    max_profiles: u64,
    output: Option<&Path>,
) -> Result<(), CliError> {
    let options = NashOptions {
        max_profiles,
        record_payoffs: output.is_some(),
    };
    let report = enumerate_pure_nash(&effective.game, &options).map_err(|e| match e {
        NashError::TooLarge { .. } => CliError::capacity(format!("{e} (--max-profiles)")),
        other => data_err(other),
    })?;
    print!("{}", render_table(&report));
    if let Some(path) = output {
        write_output(path, &to_json(&report))?;
    }
    Ok(())
}

/// Reads a Trace JSON file, or a session log if the file is NDJSON events.
fn load_trace(path: &Path) -> Result<Trace, CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let first = text.lines().next().unwrap_or_default();
    let is_log =
        serde_json::from_str::<serde_json::Value>(first).is_ok_and(|v| v.get("seq").is_some());
    let trace = if is_log {
        let events =
            parse_log(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        replay_log(&events).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?
    } else {
        serde_json::from_str::<Trace>(&text)
            .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?
    };
    trace
        .validate()
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    Ok(trace)
}

#[derive(Debug, Serialize)]
struct TraceAnalysis {
    source: PathBuf,
    rounds: usize,
    mean_utilization: f64,
    switch_statistics: SwitchStats,
    /// Absent when the trace is too short to classify.
    labels: Option<Vec<BehaviorLabel>>,
}

#[derive(Debug, Serialize)]
struct AnalysisReport {
    thresholds: Thresholds,
    traces: Vec<TraceAnalysis>,
    comparison: Option<TreatmentComparison>,
}

fn analyze(
    inputs: &[PathBuf],
    compare: &[PathBuf],
    burn_in: Option<usize>,
    thresholds: Thresholds,
    output: Option<&Path>,
    plot_dir: Option<&Path>,
) -> Result<(), CliError> {
    let arm_a = inputs
        .iter()
        .map(|p| load_trace(p))
        .collect::<Result<Vec<_>, _>>()?;
    let arm_b = compare
        .iter()
        .map(|p| load_trace(p))
        .collect::<Result<Vec<_>, _>>()?;
    let mut traces = Vec::new();
    for (path, trace) in inputs.iter().zip(&arm_a) {
        let stats = switch_statistics(trace)
            .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        let labels = match classify_behavior(trace, &thresholds) {
            Ok(labels) => Some(labels),
            Err(AnalyticsError::InsufficientData { .. }) => None,
            Err(e) => return Err(CliError::usage(e.to_string())),
        };
        println!(
            "switch_statistics {} p_switch_given_win {:.6} p_switch_given_loss {:.6}",
            path.display(),
            stats.p_switch_given_win,
            stats.p_switch_given_loss
        );
        traces.push(TraceAnalysis {
            source: path.clone(),
            rounds: trace.len(),
            mean_utilization: trace.utilization_summary(0).0,
            switch_statistics: stats,
            labels,
        });
    }
    let comparison = if arm_b.is_empty() {
        None
    } else {
        let c = compare_treatments(&arm_a, &arm_b, burn_in).map_err(data_err)?;
        println!(
            "comparison difference {:.6} ci95 [{:.6}, {:.6}]",
            c.difference, c.ci95[0], c.ci95[1]
        );
        Some(c)
    };
    if let Some(dir) = plot_dir {
        fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
        for (k, (trace, analysis)) in arm_a.iter().zip(&traces).enumerate() {
            write_output(
                &dir.join(format!("utilization_{k}.csv")),
                &utilization_plot_csv(trace).map_err(data_err)?,
            )?;
            write_output(
                &dir.join(format!("switch_bars_{k}.csv")),
                &switch_bars_csv(&analysis.switch_statistics).map_err(data_err)?,
            )?;
            if let Some(labels) = &analysis.labels {
                write_output(
                    &dir.join(format!("labels_{k}.csv")),
                    &labels_csv(labels).map_err(data_err)?,
                )?;
            }
        }
    }
    let report = AnalysisReport {
        thresholds,
        traces,
        comparison,
    };
    match output {
        Some(path) => write_output(path, &to_json(&report)),
        None => {
            println!(
                "{}",
                serde_json::to_string(&report).expect("report serializes")
            );
            Ok(())
        }
    }
}

fn replay(log: &Path, output: Option<&Path>, format: Format) -> Result<(), CliError> {
    let trace = load_trace(log)?;
    let (mean, std) = trace.utilization_summary(0);
    println!(
        "replayed_rounds {} mean_utilization {mean:.6} +- {std:.6}",
        trace.len()
    );
    if let Some(path) = output {
        let text = match format {
            Format::Json => to_json(&trace),
            Format::Csv => trace.to_csv().map_err(data_err)?,
        };
        write_output(path, &text)?;
    }
    Ok(())
}

fn serve(
    effective: EffectiveConfig,
    humans: usize,
    options: SessionOptions,
    host: &str,
    port: u16,
    log_dir: PathBuf,
) -> Result<(), CliError> {
    let roster = RosterSpec {
        humans,
        bots: effective.strategies,
    };
    let runtime = tokio::runtime::Runtime::new().map_err(data_err)?;
    runtime.block_on(async move {
        fs::create_dir_all(&log_dir)
            .map_err(|e| CliError::data(format!("{}: {e}", log_dir.display())))?;
        let listener = tokio::net::TcpListener::bind((host, port))
            .await
            .map_err(|e| CliError::data(format!("cannot listen on {host}:{port}: {e}")))?;
        let addr = listener.local_addr().map_err(data_err)?;
        let state = AppState::new(log_dir);
        let created = state
            .create_session(CreateSessionRequest {
                session_id: None,
                config: effective.game,
                roster,
                options: Some(options),
            })
            .await
            .map_err(data_err)?;
        let id = &created.session_id;
        println!("session {id} log {}", created.log_path.display());
        println!(
            "monitor http://{addr}/sessions/{id}/state?token={}",
            created.admin_token
        );
        for (seat, token) in created.participant_tokens.iter().enumerate() {
            println!("join seat {seat} token {token} ws://{addr}/sessions/{id}/ws?token={token}");
        }
        println!("listening http://{addr}");
        tokio::select! {
            result = kpr_server::serve(listener, state) => result.map_err(data_err),
            _ = tokio::signal::ctrl_c() => Ok(()),
        }
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate {
            game,
            replications,
            burn_in,
            output,
            format,
        } => {
            let effective = game.resolve(true)?;
            println!("{}", effective.echo());
            simulate(&effective, replications, burn_in, output.as_deref(), format)
        }
        Command::Nash {
            game,
            max_profiles,
            output,
        } => {
            let effective = game.resolve(false)?;
            println!("{}", effective.echo());
            nash(&effective, max_profiles, output.as_deref())
        }
        Command::Analyze {
            inputs,
            compare,
            burn_in,
            stable_threshold,
            noise_threshold,
            output,
            plot_dir,
        } => {
            let thresholds = Thresholds {
                stable: stable_threshold,
                noise: noise_threshold,
            };
            analyze(
                &inputs,
                &compare,
                burn_in,
                thresholds,
                output.as_deref(),
                plot_dir.as_deref(),
            )
        }
        Command::Replay {
            log,
            output,
            format,
        } => replay(&log, output.as_deref(), format),
        Command::Serve {
            game,
            humans,
            round_ms,
            inter_round_ms,
            host,
            port,
            log_dir,
        } => {
            let effective = game.resolve(false)?;
            if effective.strategies.is_empty() && humans < effective.game.n_players {
                return Err(CliError::usage("strategy mix missing for the bot seats"));
            }
            println!("{}", effective.echo());
            let options = SessionOptions {
                round_deadline_ms: round_ms,
                inter_round_ms,
            };
            serve(effective, humans, options, &host, port, log_dir)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let message = e.to_string();
            let first = message
                .lines()
                .next()
                .unwrap_or_default()
                .trim_start_matches("error: ");
            return fail(&CliError::usage(first));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn fail(e: &CliError) -> ExitCode {
    eprintln!(
        "{}",
        serde_json::json!({ "error": { "code": e.code, "message": e.message } })
    );
    ExitCode::from(e.exit)
}
