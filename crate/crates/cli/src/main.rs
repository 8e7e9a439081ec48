use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use markscope_core::evaluation::{build_reports, EvaluationError};
use markscope_core::ingest::{parse_upload, UploadFormat};
use markscope_core::metrics::{reports_to_csv, MetricsError};
use markscope_core::{annotation, users, Question, QuestionId, UserRole};
use markscope_server::{open_store, ServerConfig, Services};
use serde_json::json;

#[derive(Parser)]
#[command(name = "markscope", version, about = "Explainable short-answer scoring")]
struct Cli {
    /// TOML config file. Environment overrides (PORT, DATABASE_URL,
    /// TEMPLATE_DIR) still apply.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured database (`memory`, `sqlite://path`).
    #[arg(long, global = true)]
    database_url: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the REST server.
    Serve {
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
    },
    /// Create a user and print its bearer token.
    CreateUser {
        #[arg(long)]
        name: String,
        #[arg(long, value_enum, default_value = "educator")]
        role: Role,
    },
    /// List configured providers.
    Providers,
    /// Score an answer file with one or more providers and print metrics.
    RunBatch {
        /// Question as JSON (`id`, `prompt_text`, `key_elements`, `rubric`, `max_mark`).
        #[arg(long)]
        question: PathBuf,
        /// CSV or JSONL answers (`answer_id`, `answer_text`, `gold_mark`).
        #[arg(long)]
        answers: PathBuf,
        #[arg(long = "provider", default_value = "mock")]
        providers: Vec<String>,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
        /// Use the full configuration instead of the offline mock-only one.
        #[arg(long)]
        online: bool,
    },
    /// Write a JSONL training export for a question.
    Export {
        #[arg(long)]
        question: String,
        #[arg(long, value_enum)]
        kind: ExportKind,
        /// SFT only: also emit preferred model rationales.
        #[arg(long)]
        include_preferred: bool,
        /// Defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Role {
    Educator,
    Researcher,
    Admin,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportKind {
    Pref,
    Sft,
}

fn load_config(cli: &Cli, offline: bool) -> Result<ServerConfig> {
    let mut cfg = if offline && cli.config.is_none() {
        ServerConfig::offline()
    } else {
        ServerConfig::load(cli.config.as_deref())?
    };
    if let Some(url) = &cli.database_url {
        cfg.database_url = url.clone();
    }
    Ok(cfg)
}

fn services(cfg: &ServerConfig) -> Result<Services> {
    let store = open_store(&cfg.database_url)?;
    Ok(Services::new(cfg, store)?)
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

#[tokio::main]
async fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Serve { host, port } => {
            let mut cfg = load_config(&cli, false)?;
            if let Some(h) = host {
                cfg.host = h.clone();
            }
            if let Some(p) = port {
                cfg.port = *p;
            }
            markscope_server::serve(cfg, |addr| {
                println!("listening on {addr}");
                let _ = std::io::stdout().flush();
            })
            .await?;
        }
        Command::CreateUser { name, role } => {
            let cfg = load_config(&cli, false)?;
            let store = open_store(&cfg.database_url)?;
            let role = match role {
                Role::Educator => UserRole::Educator,
                Role::Researcher => UserRole::Researcher,
                Role::Admin => UserRole::Admin,
            };
            let (user, token) = users::create_user(store.as_ref(), name, role)?;
            eprintln!("created user {}", user.id);
            println!("{token}");
        }
        Command::Providers => {
            let cfg = load_config(&cli, false)?;
            for p in &cfg.providers {
                let kind = serde_json::to_value(p.kind)?;
                println!(
                    "{}\t{}\t{}",
                    p.provider_id,
                    kind.as_str().unwrap_or_default(),
                    p.endpoint.as_deref().unwrap_or("-")
                );
            }
        }
        Command::RunBatch { question, answers, providers, format, online } => {
            let cfg = load_config(&cli, !online)?;
            let svc = services(&cfg)?;
            let q: Question = serde_json::from_str(&read(question)?).context("parsing question")?;
            svc.engine.create_question(&q)?;
            let hint = answers.to_string_lossy();
            let Some(fmt) = UploadFormat::detect(&hint) else {
                bail!("cannot tell the format of {hint}; use .csv or .jsonl");
            };
            let parsed = parse_upload(fmt, &read(answers)?, &q.id, cfg.max_upload_rows)?;
            svc.engine.add_answers(&q.id, &parsed)?;
            let ids: Vec<_> = providers.iter().map(|p| p.as_str().into()).collect();
            let job = svc.engine.create_batch(&q.id, None, &ids)?;
            let status = svc.engine.run_batch(&job.id).await?;
            let reports = match build_reports(svc.store.as_ref(), &q.id) {
                Ok(r) => r,
                // no gold marks: scores only
                Err(EvaluationError::Metrics(MetricsError::NoEvaluableRecords)) => Vec::new(),
                Err(e) => return Err(e.into()),
            };
            match format {
                Format::Csv => print!("{}", reports_to_csv(&reports)),
                Format::Json => {
                    let out = json!({
                        "job_id": job.id,
                        "counts": status.counts,
                        "records": status.records,
                        "reports": reports,
                    });
                    println!("{}", serde_json::to_string_pretty(&out)?);
                }
            }
        }
        Command::Export { question, kind, include_preferred, out } => {
            let cfg = load_config(&cli, false)?;
            let svc = services(&cfg)?;
            let qid: QuestionId = question.as_str().into();
            let body = match kind {
                ExportKind::Pref => annotation::to_jsonl(&svc.annotations.export_preference_pairs(&qid)?),
                ExportKind::Sft => annotation::to_jsonl(&svc.annotations.export_sft(&qid, *include_preferred)?),
            };
            match out {
                Some(p) => std::fs::write(p, body).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{body}"),
            }
        }
    }
    Ok(())
}
