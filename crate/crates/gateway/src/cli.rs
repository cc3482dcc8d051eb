//! Command line entry point. Exit codes: 0 success, 1 usage error,
//! 2 runtime failure.

use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::sync::Arc;

use clap::error::ErrorKind;
use clap::{ArgGroup, Parser, Subcommand};
use infohub_core::network::{simulate, HubIdentity, SimConfig, Topology};
use infohub_core::survey::{RunStatus, SurveyStep};

use crate::config::HubConfig;
use crate::hub::{load_definition, Hub, HubError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "infohub", version, about = "Local knowledge hub you teach by voice and share with nearby hubs")]
struct Cli {
    /// Config file (overrides HUB_CONFIG).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the HTTP API, agent listener, sync listener and gossip.
    Serve,
    /// Store an explanation.
    #[command(group(ArgGroup::new("source").required(true).args(["file", "text"])))]
    Teach {
        #[arg(long)]
        file: Option<PathBuf>,
        #[arg(long)]
        text: Option<String>,
        /// Allow the chunks to be shared with peer hubs.
        #[arg(long)]
        share: bool,
        #[arg(long = "tag")]
        tags: Vec<String>,
        #[arg(long, default_value = "cli")]
        session: String,
    },
    /// Ask a question against the stored knowledge.
    Ask {
        question: String,
        #[arg(long)]
        session: Option<String>,
    },
    /// Remove everything taught in a session.
    Forget {
        #[arg(long)]
        session: String,
    },
    Peers {
        #[command(subcommand)]
        action: PeersCommand,
    },
    Survey {
        #[command(subcommand)]
        action: SurveyCommand,
    },
    /// Simulate gossip between in-memory hubs.
    SimNetwork {
        #[arg(long)]
        hubs: usize,
        /// ring, complete, random or edges:0-1,1-2
        #[arg(long, default_value = "ring")]
        topology: String,
        #[arg(long, default_value_t = 20)]
        rounds: usize,
        #[arg(long, default_value_t = 0.0)]
        drop: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        chunks_per_hub: usize,
        #[arg(long, default_value_t = 0.0)]
        private_fraction: f64,
        /// Print the full report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Print the event log or survey runs as JSON Lines.
    #[command(group(ArgGroup::new("what").required(true).args(["events", "surveys"])))]
    Export {
        #[arg(long)]
        events: bool,
        #[arg(long)]
        surveys: bool,
    },
}

#[derive(Debug, Subcommand)]
enum PeersCommand {
    Add { hub_id: String, address: String },
    List,
}

#[derive(Debug, Subcommand)]
enum SurveyCommand {
    /// Run a survey definition interactively on stdin/stdout.
    Run {
        #[arg(long)]
        definition: PathBuf,
        #[arg(long, default_value = "cli")]
        session: String,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<HubError> for Failure {
    fn from(e: HubError) -> Self {
        match e {
            HubError::BadRequest(m) => Failure::Usage(m),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

pub struct Io<'a> {
    pub stdin: &'a mut dyn BufRead,
    pub stdout: &'a mut dyn Write,
    pub stderr: &'a mut dyn Write,
}

/// Runs the CLI. `env_config` is the value of `HUB_CONFIG`, if set.
pub fn run(args: &[String], env_config: Option<&str>, io: &mut Io<'_>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(io.stdout, "{e}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(io.stderr, "{e}");
                    EXIT_USAGE
                }
            };
        }
    };
    match execute(cli, env_config, io) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(io.stderr, "error: {m}\n\nFor more information, try '--help'.");
            EXIT_USAGE
        }
        Err(Failure::Runtime(m)) => {
            let _ = writeln!(io.stderr, "error: {m}");
            EXIT_RUNTIME
        }
    }
}

fn open_hub(cli_config: Option<&PathBuf>, env_config: Option<&str>) -> Result<Arc<Hub>, Failure> {
    let config = HubConfig::resolve(cli_config.map(PathBuf::as_path), env_config)
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    Ok(Hub::open(config)?)
}

fn execute(cli: Cli, env_config: Option<&str>, io: &mut Io<'_>) -> Result<(), Failure> {
    let config = cli.config.as_ref();
    match cli.command {
        Command::Serve => {
            let hub = open_hub(config, env_config)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(crate::server::serve(hub))?;
        }
        Command::Teach { file, text, share, tags, session } => {
            let text = match (file, text) {
                (Some(path), _) => {
                    std::fs::read_to_string(&path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
                }
                (None, Some(t)) => t,
                (None, None) => unreachable!("clap requires one source"),
            };
            if text.trim().is_empty() {
                return Err(Failure::Usage("nothing to teach: the text is empty".into()));
            }
            let hub = open_hub(config, env_config)?;
            let ids = hub.teach(&text, &tags, share, &session)?;
            for id in &ids {
                writeln!(io.stdout, "{id}")?;
            }
            writeln!(io.stderr, "{} chunk(s); store holds {}", ids.len(), hub.store().len())?;
        }
        Command::Ask { question, session } => {
            if question.trim().is_empty() {
                return Err(Failure::Usage("the question is empty".into()));
            }
            let hub = open_hub(config, env_config)?;
            let answer = hub.ask(&question, session.as_deref())?;
            writeln!(io.stdout, "{}", answer.text)?;
            for c in &answer.citations {
                writeln!(io.stderr, "  cites {} ({:.4})", c.chunk_id, c.score)?;
            }
        }
        Command::Forget { session } => {
            let hub = open_hub(config, env_config)?;
            writeln!(io.stdout, "removed {}", hub.forget(&session)?)?;
        }
        Command::Peers { action } => {
            let hub = open_hub(config, env_config)?;
            match action {
                PeersCommand::Add { hub_id, address } => {
                    if hub.config().data_dir().is_none() {
                        return Err(Failure::Usage("peers add needs a data_dir to save the peer list".into()));
                    }
                    hub.add_peer(HubIdentity::new(hub_id, address))?;
                }
                PeersCommand::List => {
                    for p in hub.peers() {
                        writeln!(io.stdout, "{}\t{}", p.hub_id, p.address)?;
                    }
                }
            }
        }
        Command::Survey { action: SurveyCommand::Run { definition, session } } => {
            let def = load_definition(&definition).map_err(|e| Failure::Usage(e.to_string()))?;
            let hub = open_hub(config, env_config)?;
            let survey_id = def.id.clone();
            hub.register_survey(def)?;
            run_survey(&hub, &survey_id, &session, io)?;
        }
        Command::SimNetwork { hubs, topology, rounds, drop, seed, chunks_per_hub, private_fraction, json } => {
            let topology: Topology =
                topology.parse().map_err(|e: infohub_core::network::SyncError| Failure::Usage(e.to_string()))?;
            let mut cfg = SimConfig::new(hubs, topology, rounds);
            cfg.drop_rate = drop;
            cfg.seed = seed;
            cfg.chunks_per_hub = chunks_per_hub;
            cfg.private_fraction = private_fraction;
            let report = simulate(&cfg).map_err(|e| Failure::Usage(e.to_string()))?;
            if json {
                writeln!(io.stdout, "{}", serde_json::to_string_pretty(&report).map_err(std::io::Error::other)?)?;
            } else {
                let converged = report.convergence_round.map_or("never".to_string(), |r| r.to_string());
                writeln!(
                    io.stdout,
                    "hubs={} topology={} rounds={} union={} messages={} bytes={} convergence_round={converged}",
                    report.hubs,
                    report.topology,
                    report.rounds.len(),
                    report.union_size,
                    report.messages,
                    report.bytes
                )?;
            }
        }
        Command::Export { events, surveys } => {
            let hub = open_hub(config, env_config)?;
            if events {
                io.stdout.write_all(hub.events().export()?.as_bytes())?;
            }
            if surveys {
                io.stdout.write_all(hub.export_surveys()?.as_bytes())?;
            }
        }
    }
    Ok(())
}

fn run_survey(hub: &Hub, survey_id: &str, session: &str, io: &mut Io<'_>) -> Result<(), Failure> {
    let mut progress = hub.start_survey(survey_id, session)?;
    while let SurveyStep::Prompt { text, .. } | SurveyStep::Reprompt { text, .. } = &progress.step {
        writeln!(io.stdout, "{text}")?;
        io.stdout.flush()?;
        let mut line = String::new();
        if io.stdin.read_line(&mut line)? == 0 {
            hub.abort_survey(&progress.run_id)?;
            writeln!(io.stderr, "input ended; run {} aborted", progress.run_id)?;
            return Ok(());
        }
        progress = hub.submit_survey(&progress.run_id, line.trim_end_matches(['\r', '\n']))?;
    }
    debug_assert_eq!(progress.status, RunStatus::Complete);
    writeln!(io.stderr, "run {} complete", progress.run_id)?;
    Ok(())
}
