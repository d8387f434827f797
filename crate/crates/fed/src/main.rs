use std::path::PathBuf;
use std::process::ExitCode;

use aasfed::client::{Client, ClientError};
use aasfed::config::FederationConfig;
use aasfed::demo::DemoRegistry;
use aasfed::runtime::{Runtime, RuntimeOptions};
use aasfed::server::Server;
use aasfed_core::clone::CloneMode;
use aasfed_core::model::Identifier;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

#[derive(Parser)]
#[command(name = "fed", version, about = "Copy-on-write AAS federation with workflow management")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Target {
    /// Federation configuration file.
    #[arg(short, long, default_value = "federation.toml")]
    config: PathBuf,
    /// Bearer token for the internal listener.
    #[arg(long, env = "FED_TOKEN")]
    token: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Start every configured organization and serve its listeners.
    Up {
        #[command(flatten)]
        target: Target,
    },
    /// Check a configuration file.
    Validate {
        #[command(flatten)]
        target: Target,
    },
    /// Shells of one organization.
    Shells {
        #[command(subcommand)]
        command: ShellsCommand,
    },
    /// Clone a shell into another organization.
    Clone {
        #[command(flatten)]
        target: Target,
        /// Organization holding the source shell.
        #[arg(long)]
        from: String,
        /// Source shell id.
        #[arg(long)]
        shell: String,
        /// Receiving organization; the only other one when omitted.
        #[arg(long)]
        to: Option<String>,
        /// Source version; the published one when omitted.
        #[arg(long)]
        version: Option<u64>,
        #[arg(long, value_enum, default_value = "shell-only")]
        mode: Mode,
        #[arg(long, default_value = "cli")]
        user: String,
    },
    /// Snapshot commits and promotion.
    Snapshot {
        #[command(subcommand)]
        command: SnapshotCommand,
    },
    /// Workflow user tasks.
    Tasks {
        #[command(subcommand)]
        command: TasksCommand,
    },
    /// Run a scripted scenario in-process.
    Demo {
        /// Scenario name; lists scenarios when omitted.
        name: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    ShellOnly,
    WithSubmodels,
}

#[derive(Subcommand)]
enum ShellsCommand {
    List {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        org: String,
        /// Read through the external listener (the promoted set).
        #[arg(long)]
        external: bool,
    },
}

#[derive(Subcommand)]
enum SnapshotCommand {
    Commit {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        org: String,
        #[arg(long)]
        tag: Option<String>,
        #[arg(short, long, default_value = "")]
        message: String,
    },
    Diff {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        org: String,
        from: String,
        to: String,
    },
    Promote {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        org: String,
        commit: String,
    },
}

#[derive(Subcommand)]
enum TasksCommand {
    List {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        org: Option<String>,
        #[arg(long)]
        group: Option<String>,
    },
    Complete {
        #[command(flatten)]
        target: Target,
        task: String,
        #[arg(long)]
        org: Option<String>,
        /// Form value as name=value; repeatable.
        #[arg(long = "set", value_parser = parse_assignment)]
        values: Vec<(String, String)>,
        #[arg(long)]
        user: Option<String>,
    },
}

fn parse_assignment(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| format!("expected name=value, got {s:?}"))
}

#[derive(Debug, thiserror::Error)]
enum Failure {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("{0}")]
    Domain(String),
}

fn load(target: &Target) -> Result<FederationConfig, Failure> {
    FederationConfig::load(&target.config).map_err(|e| Failure::Domain(e.to_string()))
}

fn client(target: &Target) -> Result<Client, Failure> {
    Ok(Client::new(load(target)?, target.token.clone()))
}

fn print(value: &Value) {
    println!("{}", serde_json::to_string_pretty(value).unwrap_or_default());
}

fn path_id(id: &str) -> Result<String, Failure> {
    Identifier::new(id)
        .map(|i| i.to_path())
        .map_err(|e| Failure::Domain(e.to_string()))
}

fn up(target: &Target) -> Result<(), Failure> {
    let config = load(target)?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::Domain(e.to_string()))?;
    let rt = Runtime::start(config, RuntimeOptions::default()).map_err(|e| Failure::Domain(e.to_string()))?;
    runtime.block_on(async {
        let server = Server::bind(&rt).await.map_err(|e| Failure::Domain(e.to_string()))?;
        for (caller, addr) in server.addresses() {
            println!("{} {} listening on http://{addr}", caller.org, caller.role.as_str());
        }
        server
            .run(stop_signal())
            .await
            .map_err(|e| Failure::Domain(e.to_string()))
    })?;
    rt.shutdown();
    Ok(())
}

async fn stop_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        match signal(SignalKind::terminate()) {
            Ok(mut term) => {
                tokio::select! {
                    _ = tokio::signal::ctrl_c() => {}
                    _ = term.recv() => {}
                }
            }
            Err(_) => {
                let _ = tokio::signal::ctrl_c().await;
            }
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

fn find_task_org(c: &Client, task: &str) -> Result<String, Failure> {
    for o in &c.config().organizations {
        if c.request(&o.org_id, false, "GET", &format!("/tasks/{task}"), None).is_ok() {
            return Ok(o.org_id.clone());
        }
    }
    Err(Failure::Domain(format!("task {task} not found in any organization")))
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Up { target } => up(&target),
        Command::Validate { target } => {
            let cfg = load(&target)?;
            println!("configuration valid: {} organizations", cfg.organizations.len());
            Ok(())
        }
        Command::Shells {
            command: ShellsCommand::List { target, org, external },
        } => {
            let c = client(&target)?;
            let mut cursor: Option<String> = None;
            loop {
                let path = match &cursor {
                    Some(cur) => format!("/shells?cursor={cur}"),
                    None => "/shells".to_string(),
                };
                let page = c.request(&org, external, "GET", &path, None)?;
                for s in page["items"].as_array().into_iter().flatten() {
                    println!(
                        "{}\tasset={}\tv{}",
                        s["id"].as_str().unwrap_or_default(),
                        s["assetId"].as_str().unwrap_or_default(),
                        s["version"]
                    );
                }
                match page["nextCursor"].as_str() {
                    Some(n) => cursor = Some(n.to_string()),
                    None => break,
                }
            }
            Ok(())
        }
        Command::Clone {
            target,
            from,
            shell,
            to,
            version,
            mode,
            user,
        } => {
            let c = client(&target)?;
            let to = match to {
                Some(t) => t,
                None => {
                    let others: Vec<_> = c
                        .config()
                        .organizations
                        .iter()
                        .filter(|o| o.org_id != from)
                        .map(|o| o.org_id.clone())
                        .collect();
                    match others.as_slice() {
                        [only] => only.clone(),
                        _ => return Err(Failure::Domain("--to is required with more than two organizations".into())),
                    }
                }
            };
            let version = match version {
                Some(v) => v,
                None => c.request(&from, true, "GET", &format!("/shells/{}", path_id(&shell)?), None)?["version"]
                    .as_u64()
                    .ok_or_else(|| Failure::Domain("source shell has no version".into()))?,
            };
            let mode = match mode {
                Mode::ShellOnly => CloneMode::ShellOnly,
                Mode::WithSubmodels => CloneMode::WithSubmodels,
            };
            let body = json!({
                "sourceOrgId": from, "sourceShellId": shell, "sourceVersion": version,
                "targetOrgId": to, "requestedBy": user, "mode": mode,
            });
            print(&c.request(&to, false, "POST", "/clone", Some(&body))?);
            Ok(())
        }
        Command::Snapshot { command } => match command {
            SnapshotCommand::Commit {
                target,
                org,
                tag,
                message,
            } => {
                let c = client(&target)?;
                let body = json!({"tag": tag, "message": message});
                print(&c.request(&org, false, "POST", "/snapshots", Some(&body))?);
                Ok(())
            }
            SnapshotCommand::Diff { target, org, from, to } => {
                let c = client(&target)?;
                print(&c.request(&org, false, "GET", &format!("/snapshots/{from}/diff/{to}"), None)?);
                Ok(())
            }
            SnapshotCommand::Promote { target, org, commit } => {
                let c = client(&target)?;
                print(&c.request(&org, false, "POST", &format!("/snapshots/{commit}/promote"), None)?);
                Ok(())
            }
        },
        Command::Tasks { command } => match command {
            TasksCommand::List { target, org, group } => {
                let c = client(&target)?;
                let orgs: Vec<String> = match org {
                    Some(o) => vec![o],
                    None => c.config().organizations.iter().map(|o| o.org_id.clone()).collect(),
                };
                let all = orgs.len() > 1;
                let query = group.map(|g| format!("?group={g}")).unwrap_or_default();
                for o in orgs {
                    let tasks = match c.request(&o, false, "GET", &format!("/tasks{query}"), None) {
                        Err(ClientError::Api { status: 401, .. }) if all => {
                            eprintln!("{o}: token not accepted, skipped");
                            continue;
                        }
                        r => r?,
                    };
                    for t in tasks.as_array().into_iter().flatten() {
                        println!(
                            "{o}\t{}\t{}\t{}\t{}",
                            t["taskId"].as_str().unwrap_or_default(),
                            t["candidateGroup"].as_str().unwrap_or_default(),
                            t["name"].as_str().unwrap_or_default(),
                            t["instanceId"].as_str().unwrap_or_default(),
                        );
                    }
                }
                Ok(())
            }
            TasksCommand::Complete {
                target,
                task,
                org,
                values,
                user,
            } => {
                let c = client(&target)?;
                let org = match org {
                    Some(o) => o,
                    None => find_task_org(&c, &task)?,
                };
                let values: Map<String, Value> = values.into_iter().map(|(k, v)| (k, Value::String(v))).collect();
                let mut body = json!({"values": values});
                if let Some(u) = user {
                    body["user"] = json!(u);
                }
                let inst = c.request(&org, false, "POST", &format!("/tasks/{task}/complete"), Some(&body))?;
                println!(
                    "task {task} completed; instance {} is {}",
                    inst["instanceId"].as_str().unwrap_or_default(),
                    inst["state"].as_str().unwrap_or_default()
                );
                Ok(())
            }
        },
        Command::Demo { name } => {
            let demos = DemoRegistry::default();
            match name {
                None => {
                    for d in demos.list() {
                        println!("{:<16} {}", d.name(), d.summary());
                    }
                    Ok(())
                }
                Some(n) => {
                    let demo = demos.get(&n).ok_or_else(|| Failure::Domain(format!("unknown demo {n:?}")))?;
                    demo.run(&mut std::io::stdout()).map_err(Failure::Domain)
                }
            }
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn,aasfed=info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
