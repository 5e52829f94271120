use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

use kpr_core::analytics::switch_statistics;
use kpr_core::session::{RosterSpec, Session, SessionOptions};
use kpr_core::{BatchResult, GameConfig, StrategyId, StrategySpec, Trace};
use serde_json::Value;

fn kpr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kpr"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// The single JSON error line on stderr.
fn error_of(out: &Output) -> Value {
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    serde_json::from_str::<Value>(&stderr).unwrap()["error"].clone()
}

fn field(text: &str, prefix: &str) -> f64 {
    let line = text.lines().find(|l| l.starts_with(prefix)).unwrap();
    line[prefix.len()..]
        .split_whitespace()
        .next()
        .unwrap()
        .parse()
        .unwrap()
}

fn read<T: serde::de::DeserializeOwned>(path: &Path) -> T {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn simulate_uniform_matches_occupancy_law() {
    let out = kpr(&[
        "simulate",
        "--players",
        "100",
        "--restaurants",
        "100",
        "--strategy",
        "uniform_random",
        "--rounds",
        "1000",
        "--seed",
        "7",
    ]);
    let text = stdout(&out);
    assert!(text.starts_with("effective_config {"));
    let mean = field(&text, "mean_utilization ");
    assert!((mean - (1.0 - 0.99f64.powi(100))).abs() < 0.01, "{mean}");
}

#[test]
fn usage_errors_exit_2() {
    let out = kpr(&["simulate", "--players", "3", "--restaurants", "3"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_of(&out)["code"], "usage");

    for args in [
        &[
            "simulate",
            "--players",
            "3",
            "--restaurants",
            "3",
            "--strategy",
            "telepathy",
        ][..],
        &["simulate", "--players", "3", "--strategy", "uniform_random"],
        &[
            "simulate",
            "--players",
            "3",
            "--restaurants",
            "3",
            "--strategy",
            "stable:1,uniform_random",
        ],
        &[
            "simulate",
            "--players",
            "3",
            "--restaurants",
            "3",
            "--strategy",
            "stable",
            "--mode",
            "poker",
        ],
        &["simulate", "--no-such-flag"],
    ] {
        let out = kpr(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert_eq!(error_of(&out)["code"], "usage");
    }
}

#[test]
fn invalid_config_is_a_data_error() {
    for args in [
        &[
            "simulate",
            "--players",
            "0",
            "--restaurants",
            "3",
            "--strategy",
            "stable",
        ][..],
        &[
            "simulate",
            "--players",
            "3",
            "--restaurants",
            "3",
            "--utilities",
            "3,1",
            "--strategy",
            "stable",
        ],
        &[
            "simulate",
            "--players",
            "3",
            "--restaurants",
            "3",
            "--strategy",
            "stable:1,uniform_random:1",
        ],
        &[
            "simulate",
            "--players",
            "3",
            "--mode",
            "minority",
            "--restaurants",
            "3",
            "--strategy",
            "stable",
        ],
    ] {
        let out = kpr(args);
        assert_eq!(out.status.code(), Some(3), "{args:?}");
        assert_eq!(error_of(&out)["code"], "data");
    }
}

#[test]
fn batch_output_has_requested_replications() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("batch.json");
    let out = kpr(&[
        "simulate",
        "--players",
        "20",
        "--restaurants",
        "20",
        "--strategy",
        "stick_if_won:10,uniform_random:10",
        "--rounds",
        "50",
        "--replications",
        "20",
        "--output",
        p(&path),
    ]);
    stdout(&out);
    let batch: BatchResult = read(&path);
    assert_eq!(batch.replications, 20);
    assert_eq!(batch.replication_means.len(), 20);
    assert_eq!(batch.burn_in, 25);

    let csv_path = dir.path().join("batch.csv");
    let out = kpr(&[
        "simulate",
        "--players",
        "20",
        "--restaurants",
        "20",
        "--strategy",
        "uniform_random",
        "--rounds",
        "50",
        "--replications",
        "3",
        "--output",
        p(&csv_path),
        "--format",
        "csv",
    ]);
    stdout(&out);
    assert_eq!(
        std::fs::read_to_string(&csv_path).unwrap().lines().count(),
        4
    );
}

#[test]
fn minority_batch_reports_attendance_variance() {
    let out = kpr(&[
        "simulate",
        "--mode",
        "minority",
        "--players",
        "101",
        "--strategy",
        "uniform_random",
        "--rounds",
        "400",
        "--replications",
        "4",
    ]);
    let v = field(&stdout(&out), "attendance_variance_per_agent ");
    assert!((v - 0.25).abs() < 0.04, "{v}");
}

#[test]
fn nash_counts_and_guard() {
    let text = stdout(&kpr(&["nash", "--players", "3", "--restaurants", "3"]));
    assert!(text
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("6 pure Nash equilibria among 27 profiles"));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nash.json");
    let text = stdout(&kpr(&[
        "nash",
        "--players",
        "2",
        "--utilities",
        "3,1",
        "--output",
        p(&path),
    ]));
    assert!(text
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("1 pure Nash equilibria among 4 profiles"));
    let report: Value = read(&path);
    assert_eq!(report["pure_nash"], serde_json::json!([[0, 0]]));
    assert_eq!(
        report["per_profile_expected_payoffs"]
            .as_array()
            .unwrap()
            .len(),
        4
    );

    let out = kpr(&["nash", "--players", "8", "--restaurants", "8"]);
    assert_eq!(out.status.code(), Some(4));
    let err = error_of(&out);
    assert_eq!(err["code"], "capacity");
    assert!(err["message"].as_str().unwrap().contains("--max-profiles"));
}

#[test]
fn analyze_all_stable_never_switches() {
    let dir = tempfile::tempdir().unwrap();
    let trace_path = dir.path().join("stable.json");
    stdout(&kpr(&[
        "simulate",
        "--players",
        "10",
        "--restaurants",
        "5",
        "--strategy",
        "stable",
        "--rounds",
        "40",
        "--output",
        p(&trace_path),
    ]));
    let report_path = dir.path().join("report.json");
    let plots = dir.path().join("plots");
    stdout(&kpr(&[
        "analyze",
        "--input",
        p(&trace_path),
        "--output",
        p(&report_path),
        "--plot-dir",
        p(&plots),
    ]));
    let report: Value = read(&report_path);
    let stats = &report["traces"][0]["switch_statistics"];
    assert_eq!(stats["p_switch_given_win"], 0.0);
    assert_eq!(stats["p_switch_given_loss"], 0.0);
    assert!(report["traces"][0]["labels"]
        .as_array()
        .unwrap()
        .iter()
        .all(|l| l["label"] == "STABLE"));
    for f in ["utilization_0.csv", "switch_bars_0.csv", "labels_0.csv"] {
        assert!(plots.join(f).exists(), "{f}");
    }
}

#[test]
fn simulate_then_analyze_equals_in_process() {
    let dir = tempfile::tempdir().unwrap();
    let args = |seed: &'static str, out: &Path| {
        stdout(&kpr(&[
            "simulate",
            "--players",
            "30",
            "--restaurants",
            "30",
            "--strategy",
            "reinforcement:10,intermediate:20",
            "--rounds",
            "60",
            "--seed",
            seed,
            "--output",
            p(out),
        ]));
    };
    let paths: Vec<_> = ["1", "2", "3", "4"]
        .into_iter()
        .map(|seed| {
            let path = dir.path().join(format!("{seed}.json"));
            args(seed, &path);
            path
        })
        .collect();
    let report_path = dir.path().join("report.json");
    stdout(&kpr(&[
        "analyze",
        "--input",
        p(&paths[0]),
        p(&paths[1]),
        "--compare",
        p(&paths[2]),
        p(&paths[3]),
        "--output",
        p(&report_path),
    ]));
    let report: Value = read(&report_path);

    let traces: Vec<Trace> = paths.iter().map(|path| read(path)).collect();
    for k in 0..2 {
        let direct = serde_json::to_value(switch_statistics(&traces[k]).unwrap()).unwrap();
        assert_eq!(report["traces"][k]["switch_statistics"], direct);
    }
    let cmp = kpr_core::analytics::compare_treatments(&traces[..2], &traces[2..], None).unwrap();
    assert_eq!(report["comparison"], serde_json::to_value(cmp).unwrap());
}

#[test]
fn echoed_config_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first.json");
    let text = stdout(&kpr(&[
        "simulate",
        "--players",
        "12",
        "--utilities",
        "ranked",
        "--restaurants",
        "4",
        "--strategy",
        "reinforcement:6,noise_trader:6",
        "--rounds",
        "80",
        "--seed",
        "42",
        "--feedback",
        "full",
        "--output",
        p(&first),
    ]));
    let echoed = text
        .lines()
        .next()
        .unwrap()
        .strip_prefix("effective_config ")
        .unwrap();
    let config_path = dir.path().join("config.json");
    std::fs::write(&config_path, echoed).unwrap();

    let second = dir.path().join("second.json");
    let text2 = stdout(&kpr(&[
        "simulate",
        "--config",
        p(&config_path),
        "--output",
        p(&second),
    ]));
    assert_eq!(text, text2);
    assert_eq!(
        std::fs::read(&first).unwrap(),
        std::fs::read(&second).unwrap()
    );

    // flags override the file
    let text3 = stdout(&kpr(&[
        "simulate",
        "--config",
        p(&config_path),
        "--seed",
        "43",
    ]));
    let cfg: Value = serde_json::from_str(
        text3
            .lines()
            .next()
            .unwrap()
            .strip_prefix("effective_config ")
            .unwrap(),
    )
    .unwrap();
    assert_eq!(
        (cfg["seed"].as_u64(), cfg["n_players"].as_u64()),
        (Some(43), Some(12))
    );
    assert_ne!(text3.lines().nth(1), text.lines().nth(1));
}

fn write_bot_session_log(
    dir: &Path,
    config: &GameConfig,
    bots: Vec<StrategySpec>,
) -> std::path::PathBuf {
    let roster = RosterSpec { humans: 0, bots };
    let session = Session::create(
        "cli-replay",
        config.clone(),
        &roster,
        SessionOptions::default(),
        None,
        0,
    )
    .unwrap();
    let path = dir.join("cli-replay.log");
    std::fs::write(&path, session.log_ndjson()).unwrap();
    path
}

#[test]
fn replay_of_bot_session_equals_simulation() {
    let dir = tempfile::tempdir().unwrap();
    let config = GameConfig::unranked(8, 8).with_horizon(30).with_seed(5);
    let bots = vec![
        StrategySpec {
            strategy_id: StrategyId::StickIfWon,
            params: Default::default(),
            count: 4,
        },
        StrategySpec {
            strategy_id: StrategyId::UniformRandom,
            params: Default::default(),
            count: 4,
        },
    ];
    let log = write_bot_session_log(dir.path(), &config, bots);
    let replayed = dir.path().join("replayed.json");
    stdout(&kpr(&[
        "replay",
        "--log",
        p(&log),
        "--output",
        p(&replayed),
    ]));
    let simulated = dir.path().join("simulated.json");
    stdout(&kpr(&[
        "simulate",
        "--players",
        "8",
        "--restaurants",
        "8",
        "--rounds",
        "30",
        "--seed",
        "5",
        "--strategy",
        "stick_if_won:4,uniform_random:4",
        "--output",
        p(&simulated),
    ]));
    let (a, b): (Trace, Trace) = (read(&replayed), read(&simulated));
    assert!(a.same_play(&b));

    // analyze accepts the log directly
    stdout(&kpr(&["analyze", "--input", p(&log)]));
}

#[test]
fn corrupt_log_reports_first_bad_record() {
    let dir = tempfile::tempdir().unwrap();
    let config = GameConfig::unranked(4, 4).with_horizon(5);
    let bots = vec![StrategySpec {
        strategy_id: StrategyId::UniformRandom,
        params: Default::default(),
        count: 4,
    }];
    let log = write_bot_session_log(dir.path(), &config, bots);
    let text = std::fs::read_to_string(&log).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.remove(3);
    std::fs::write(&log, lines.join("\n")).unwrap();
    let out = kpr(&["replay", "--log", p(&log)]);
    assert_eq!(out.status.code(), Some(3));
    let message = error_of(&out)["message"].as_str().unwrap().to_string();
    assert!(message.contains("expected seq 3"), "{message}");
}

#[test]
fn serve_prints_one_token_per_human_and_reports_busy_port() {
    let dir = tempfile::tempdir().unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_kpr"))
        .args([
            "serve",
            "--players",
            "3",
            "--restaurants",
            "3",
            "--strategy",
            "uniform_random:2",
            "--humans",
            "1",
            "--port",
            "0",
            "--log-dir",
            p(dir.path()),
        ])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = Vec::new();
    for line in BufReader::new(child.stdout.take().unwrap()).lines() {
        let line = line.unwrap();
        let done = line.starts_with("listening ");
        lines.push(line);
        if done {
            break;
        }
    }
    child.kill().unwrap();
    child.wait().unwrap();
    assert_eq!(
        lines.iter().filter(|l| l.starts_with("join ")).count(),
        1,
        "{lines:?}"
    );
    let session = lines
        .iter()
        .find_map(|l| l.strip_prefix("session "))
        .unwrap();
    let id = session.split_whitespace().next().unwrap();
    assert!(dir.path().join(format!("{id}.log")).exists());

    let busy = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = busy.local_addr().unwrap().port().to_string();
    let out = kpr(&[
        "serve",
        "--players",
        "2",
        "--restaurants",
        "2",
        "--humans",
        "2",
        "--port",
        &port,
        "--log-dir",
        p(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(error_of(&out)["message"]
        .as_str()
        .unwrap()
        .contains("cannot listen"));
}
