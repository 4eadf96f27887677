use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use autolab::analytics::EfficiencyReport;
use autolab::campaign::candidates::{default_rules, select_candidates, CandidateRule};
use autolab::campaign::log::CampaignLog;
use autolab::campaign::{best_so_far, replay_log, run_campaign, run_with_transport, write_csv, CampaignConfig, CSV_FILE};
use autolab::protocol::server::serve;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

/// Closed-loop electrolyte conductivity optimization against a simulated instrument.
#[derive(Debug, Parser)]
#[command(name = "campaign", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CurveFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ReportFormat {
    Json,
    Table,
    Both,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run (or resume) a campaign and write campaign.jsonl and campaign.csv to --out.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Base URL of a running instrument server; defaults to an in-process instrument.
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        sequential: bool,
    },
    /// Re-run a logged campaign from its recorded config and compare byte for byte.
    Replay {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        endpoint: Option<String>,
    },
    /// Shortlist measured electrolytes for follow-up testing.
    Candidates {
        #[arg(long)]
        log: PathBuf,
        /// JSON array of rules; the default set is used otherwise.
        #[arg(long)]
        rules: Option<PathBuf>,
    },
    /// Best-so-far curve of a logged campaign.
    Curve {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: CurveFormat,
    },
    /// Time and sample efficiency of the closed loop against manual work.
    Efficiency {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Experiment count for the time comparison; defaults to the configured budget.
        #[arg(long)]
        n: Option<u64>,
        #[arg(long, value_enum, default_value = "both")]
        format: ReportFormat,
    },
    /// Serve the simulated instrument over HTTP until interrupted.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides protocol.bind from the config.
        #[arg(long)]
        bind: Option<String>,
        /// Overrides the instrument seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_config(path: Option<&Path>) -> Result<CampaignConfig> {
    match path {
        Some(p) => CampaignConfig::from_toml_file(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(CampaignConfig::default()),
    }
}

fn load_log(path: &Path) -> Result<CampaignLog> {
    CampaignLog::load(path).with_context(|| format!("loading log {}", path.display()))
}

#[derive(Serialize)]
struct CurvePoint {
    step: usize,
    best_so_far: Option<f64>,
}

fn run(cmd: Command) -> Result<ExitCode> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cmd {
        Command::Run { config, seed, budget, out: dir, endpoint, sequential } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(b) = budget {
                cfg.budget = b;
            }
            if sequential {
                cfg.execution = autolab::exec::Execution::Sequential;
            }
            cfg.out_dir = Some(dir.clone());
            let log = match endpoint.or(cfg.protocol.endpoint.clone()) {
                Some(url) => {
                    let transport = cfg.protocol.http_transport(&url);
                    let log = run_with_transport(&cfg, &transport, cfg.log_path().as_deref())?;
                    write_csv(&log, &dir.join(CSV_FILE))?;
                    log
                }
                None => run_campaign(&cfg)?,
            };
            writeln!(out, "{}", serde_json::to_string_pretty(&log.summary)?)?;
        }
        Command::Replay { log, endpoint } => {
            let report = match endpoint {
                Some(url) => {
                    let cfg = load_log(&log)?.config().clone();
                    replay_log(&log, Some(&cfg.protocol.http_transport(&url)))?
                }
                None => replay_log(&log, None)?,
            };
            match report.first_difference {
                None => writeln!(out, "identical ({} lines)", report.lines)?,
                Some(line) => {
                    writeln!(out, "differs at line {line}")?;
                    return Ok(ExitCode::FAILURE);
                }
            }
        }
        Command::Candidates { log, rules } => {
            let rules: Vec<CandidateRule> = match rules {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(&p)?)
                    .with_context(|| format!("parsing rules {}", p.display()))?,
                None => default_rules(),
            };
            let picked = select_candidates(&load_log(&log)?, &rules);
            writeln!(out, "{}", serde_json::to_string_pretty(&picked)?)?;
        }
        Command::Curve { log, format } => {
            let log = load_log(&log)?;
            match format {
                CurveFormat::Csv => {
                    let mut w = csv::Writer::from_writer(&mut out);
                    for (step, best) in best_so_far(&log) {
                        w.serialize(CurvePoint { step, best_so_far: best })?;
                    }
                    w.flush()?;
                }
                CurveFormat::Json => {
                    let pts: Vec<CurvePoint> =
                        best_so_far(&log).into_iter().map(|(step, best_so_far)| CurvePoint { step, best_so_far }).collect();
                    writeln!(out, "{}", serde_json::to_string_pretty(&pts)?)?;
                }
            }
        }
        Command::Efficiency { config, n, format } => {
            let cfg = load_config(config.as_deref())?;
            let report = EfficiencyReport::build(&cfg.analytics, &cfg.lab, n.unwrap_or(cfg.budget as u64))?;
            if matches!(format, ReportFormat::Json | ReportFormat::Both) {
                writeln!(out, "{}", report.to_json())?;
            }
            if matches!(format, ReportFormat::Both) {
                writeln!(out)?;
            }
            if matches!(format, ReportFormat::Table | ReportFormat::Both) {
                write!(out, "{}", report.to_table())?;
            }
        }
        Command::Serve { config, bind, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let bind = bind.unwrap_or_else(|| cfg.protocol.bind.clone());
            let instrument = cfg.instrument()?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(&bind).await.with_context(|| format!("binding {bind}"))?;
                eprintln!("serving on http://{}", listener.local_addr()?);
                serve(instrument, listener, async {
                    let _ = tokio::signal::ctrl_c().await;
                })
                .await?;
                Ok::<_, anyhow::Error>(())
            })?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
