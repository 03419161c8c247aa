use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use metadl::dataset::{generate_synthetic, load_feature_dataset, split_classes, write_feature_dataset};
use metadl::evaluation::RunStatus;
use metadl::pipeline::{
    leaderboard_report, run_ingestion, run_phase, run_scoring, BudgetClock, DataSource, IngestOutcome,
    PhaseConfig, PipelineError, ScoreOutcome,
};
use metadl::selftest::run_selftest;

const EXIT_CONFIG: u8 = 2;
const EXIT_FAILED: u8 = 3;
const EXIT_TIMED_OUT: u8 = 4;

#[derive(Parser)]
#[command(name = "metadl", about = "Few-shot meta-learning competition harness", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    budget_seconds: Option<f64>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    method: Option<String>,
    /// Any config key, e.g. `--set method.ptmap.beta=0.7`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic Gaussian dataset from the `data.synthetic.*` keys.
    GenSynthetic {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a dataset file into meta-train and meta-test files by class.
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        meta_train_classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_train: PathBuf,
        #[arg(long)]
        out_test: PathBuf,
    },
    /// Meta-train one seed and save the learner artifact.
    Ingest {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        artifact: Option<PathBuf>,
    },
    /// Score a saved learner artifact on the meta-test episodes of one seed.
    Score {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        artifact: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Full phase: ingestion and scoring for each of the three seeds.
    Run {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Ranked leaderboard report.
    Report {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        leaderboard: Option<PathBuf>,
    },
    /// Run the built-in oracle checks.
    Selftest,
}

fn build_config(o: &Overrides) -> Result<PhaseConfig, PipelineError> {
    let mut pairs = match &o.config {
        Some(path) => metadl::pipeline::parse_config_text(&fs::read_to_string(path).map_err(|source| {
            PipelineError::Io {
                path: path.display().to_string(),
                source,
            }
        })?)?,
        None => Vec::new(),
    };
    if let Some(b) = o.budget_seconds {
        pairs.push(("phase.budget_seconds".into(), b.to_string()));
    }
    if let Some(e) = o.episodes {
        pairs.push(("phase.episode_count".into(), e.to_string()));
    }
    if let Some(m) = &o.method {
        pairs.push(("method.name".into(), m.clone()));
    }
    for kv in &o.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| PipelineError::Config {
            line: None,
            message: format!("--set expects KEY=VALUE, got `{kv}`"),
        })?;
        pairs.push((k.trim().into(), v.trim().into()));
    }
    let cfg = PhaseConfig::from_pairs(&pairs)?;
    cfg.validate()?;
    Ok(cfg)
}

fn exit_for(err: &PipelineError) -> ExitCode {
    eprintln!("error: {err}");
    match err {
        PipelineError::Config { .. } | PipelineError::Api(metadl::api::ApiError::Config(_)) => {
            ExitCode::from(EXIT_CONFIG)
        }
        _ => ExitCode::from(EXIT_FAILED),
    }
}

fn run(command: Command) -> Result<ExitCode, PipelineError> {
    match command {
        Command::GenSynthetic { overrides, seed, out } => {
            let mut cfg = build_config(&overrides)?;
            if let Some(s) = seed {
                cfg.set("data.synthetic.seed", &s.to_string())?;
            }
            let DataSource::Synthetic { spec, .. } = &cfg.data else {
                return Err(PipelineError::Config {
                    line: None,
                    message: "gen-synthetic needs a synthetic data source".into(),
                });
            };
            write_feature_dataset(&generate_synthetic(spec)?, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Split {
            input,
            meta_train_classes,
            seed,
            out_train,
            out_test,
        } => {
            let split = split_classes(&load_feature_dataset(&input)?, meta_train_classes, seed)?;
            write_feature_dataset(&split.meta_train, &out_train)?;
            write_feature_dataset(&split.meta_test, &out_test)?;
            println!(
                "meta-train {} classes -> {}; meta-test {} classes -> {}",
                split.meta_train.num_classes(),
                out_train.display(),
                split.meta_test.num_classes(),
                out_test.display()
            );
        }
        Command::Ingest {
            overrides,
            seed,
            artifact,
        } => {
            let started = Instant::now();
            let cfg = build_config(&overrides)?;
            let clock = BudgetClock::started_at(started, cfg.budget_seconds);
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let artifact = artifact.unwrap_or_else(|| cfg.artifact_path(seed));
            match run_ingestion(&cfg, seed, &clock, &artifact) {
                IngestOutcome::Completed { artifact, elapsed } => {
                    println!("completed {} in {:.3}s", artifact.display(), elapsed.as_secs_f64());
                }
                IngestOutcome::TimedOut { elapsed } => {
                    eprintln!("timed_out after {:.3}s; no artifact written", elapsed.as_secs_f64());
                    return Ok(ExitCode::from(EXIT_TIMED_OUT));
                }
                IngestOutcome::Failed { message } => {
                    eprintln!("failed: {message}");
                    return Ok(ExitCode::from(EXIT_FAILED));
                }
            }
        }
        Command::Score {
            overrides,
            seed,
            artifact,
            report,
        } => {
            let started = Instant::now();
            let cfg = build_config(&overrides)?;
            let clock = BudgetClock::started_at(started, cfg.budget_seconds);
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let artifact = artifact.unwrap_or_else(|| cfg.artifact_path(seed));
            let report = report.unwrap_or_else(|| cfg.report_path(seed));
            match run_scoring(&cfg, &artifact, seed, &clock, &report) {
                ScoreOutcome::Completed { aggregate, report, .. } => {
                    println!(
                        "mean {:.4} ± {:.4} over {} episodes; report {}",
                        aggregate.mean,
                        aggregate.ci95_halfwidth,
                        aggregate.episode_count,
                        report.display()
                    );
                }
                ScoreOutcome::TimedOut { completed } => {
                    eprintln!("timed_out after {completed} episodes");
                    return Ok(ExitCode::from(EXIT_TIMED_OUT));
                }
                ScoreOutcome::Failed { message } => {
                    eprintln!("failed: {message}");
                    return Ok(ExitCode::from(EXIT_FAILED));
                }
            }
        }
        Command::Run { overrides } => {
            let cfg = build_config(&overrides)?;
            let phase = run_phase(&cfg)?;
            for m in &phase.messages {
                eprintln!("{m}");
            }
            println!("{}", phase.entry.render());
            return Ok(match phase.result.status {
                RunStatus::Completed => ExitCode::SUCCESS,
                RunStatus::TimedOut => ExitCode::from(EXIT_TIMED_OUT),
                RunStatus::Failed => ExitCode::from(EXIT_FAILED),
            });
        }
        Command::Report { overrides, leaderboard } => {
            let path = match leaderboard {
                Some(p) => p,
                None => build_config(&overrides)?.leaderboard.ok_or_else(|| PipelineError::Config {
                    line: None,
                    message: "no leaderboard given (--leaderboard or output.leaderboard)".into(),
                })?,
            };
            let text = match fs::read_to_string(&path) {
                Ok(t) => t,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
                Err(source) => {
                    return Err(PipelineError::Io {
                        path: path.display().to_string(),
                        source,
                    })
                }
            };
            print!("{}", leaderboard_report(&text)?);
        }
        Command::Selftest => {
            if !run_selftest(&mut std::io::stdout()) {
                return Ok(ExitCode::from(EXIT_FAILED));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => exit_for(&e),
    }
}
