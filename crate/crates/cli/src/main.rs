//! `portal`: run the gateway, manage forwards and jobs, benchmark overhead.

mod api;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use portal_core::bench::{emit_report, run_benchmark, Format, RequestManifest, Target, DEFAULT_REPETITIONS};
use portal_core::config::Config;
use portal_core::route::Destination;
use serde_json::{json, Value};

use api::ApiClient;

#[derive(Parser)]
#[command(name = "portal", version, about = "Authenticating gateway to per-user web applications")]
struct Cli {
    /// Base URL of a running portal.
    #[arg(long, global = true, env = "PORTAL_URL", default_value = "http://127.0.0.1:8080")]
    url: String,
    /// Bearer token identifying you to the portal.
    #[arg(long, global = true, env = "PORTAL_TOKEN", hide_env_values = true)]
    token: Option<String>,
    /// Print raw JSON responses.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the gateway, control plane and configured node agents.
    Serve {
        #[arg(long, short)]
        config: PathBuf,
    },
    /// Manage named forwards.
    #[command(subcommand)]
    Forward(ForwardCmd),
    /// Launch and stop demo applications.
    #[command(subcommand)]
    Job(JobCmd),
    /// Measure gateway overhead.
    #[command(subcommand)]
    Bench(BenchCmd),
}

#[derive(Subcommand)]
enum ForwardCmd {
    /// Forwards you own or may connect through.
    List,
    /// Reserve a name.
    Claim { name: String },
    /// Point a forward at node:port, or disable it.
    Set {
        name: String,
        #[arg(required_unless_present = "disable", conflicts_with = "disable")]
        destination: Option<String>,
        #[arg(long)]
        disable: bool,
    },
    /// Set the access mode, three octal digits.
    Mode { name: String, mode: String },
    /// Give the name up.
    Release { name: String },
}

#[derive(Subcommand)]
enum JobCmd {
    /// Your jobs.
    List,
    Launch {
        #[arg(long)]
        node: String,
        /// echo-http, echo-ws, token-notebook or static-site.
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 1)]
        ports: usize,
    },
    Stop { id: u64 },
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Load the page directly and through the portal, and compare.
    Run(BenchArgs),
}

#[derive(Args)]
struct BenchArgs {
    /// Request manifest (JSON); the built-in notebook page if omitted.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Base URL of the application itself.
    #[arg(long)]
    direct: String,
    /// Base URL of the same application through the portal.
    #[arg(long)]
    portal: String,
    #[arg(long, default_value_t = DEFAULT_REPETITIONS)]
    reps: usize,
    /// Overrides the manifest's concurrency.
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long, default_value = "text")]
    format: Format,
    /// Append a histogram of per-request deltas (text format).
    #[arg(long)]
    histogram: bool,
    /// Token for the portal side; defaults to --token.
    #[arg(long, env = "PORTAL_BENCH_TOKEN", hide_env_values = true)]
    portal_token: Option<String>,
}

struct Failure(String);

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure(e.to_string())
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();

    match run(cli).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

async fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Serve { config } => serve(config).await,
        Command::Forward(cmd) => {
            let api = client(&cli.url, cli.token)?;
            forward(&api, cmd, cli.json).await
        }
        Command::Job(cmd) => {
            let api = client(&cli.url, cli.token)?;
            job(&api, cmd, cli.json).await
        }
        Command::Bench(BenchCmd::Run(args)) => bench(args, cli.token).await,
    }
}

fn client(url: &str, token: Option<String>) -> Result<ApiClient, Failure> {
    if token.is_none() {
        return Err(Failure("no token; pass --token or set PORTAL_TOKEN".into()));
    }
    Ok(ApiClient::new(url, token)?)
}

async fn serve(path: PathBuf) -> Result<(), Failure> {
    let config = Config::load(&path)?;
    let portal = portal_core::portal::start(&config).await?;
    eprintln!("portal listening on {}", portal.base_url());
    tokio::signal::ctrl_c().await?;
    portal.shutdown().await;
    Ok(())
}

async fn forward(api: &ApiClient, cmd: ForwardCmd, raw: bool) -> Result<(), Failure> {
    let out = match cmd {
        ForwardCmd::List => {
            let list = api.get("/api/forwards").await?;
            if !raw {
                print_forwards(&list);
                return Ok(());
            }
            list
        }
        ForwardCmd::Claim { name } => api.post("/api/forwards", json!({ "name": name })).await?,
        ForwardCmd::Set {
            name,
            destination,
            disable,
        } => {
            let body = match destination {
                Some(d) if !disable => {
                    let d: Destination = d.parse()?;
                    json!({ "node": d.node, "port": d.port })
                }
                _ => json!({ "disabled": true }),
            };
            api.put(&format!("/api/forwards/{name}"), body).await?
        }
        ForwardCmd::Mode { name, mode } => {
            api.put(&format!("/api/forwards/{name}/mode"), json!({ "mode": mode }))
                .await?
        }
        ForwardCmd::Release { name } => {
            api.delete(&format!("/api/forwards/{name}")).await?;
            if !raw {
                println!("released {name}");
            }
            return Ok(());
        }
    };
    if raw {
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        print_forwards(&Value::Array(vec![out]));
    }
    Ok(())
}

async fn job(api: &ApiClient, cmd: JobCmd, raw: bool) -> Result<(), Failure> {
    let out = match cmd {
        JobCmd::List => api.get("/api/jobs").await?,
        JobCmd::Launch { node, kind, ports } => {
            let j = api
                .post("/api/jobs", json!({ "node": node, "app_kind": kind, "port_count": ports }))
                .await?;
            Value::Array(vec![j])
        }
        JobCmd::Stop { id } => Value::Array(vec![api.delete(&format!("/api/jobs/{id}")).await?]),
    };
    if raw {
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        print_jobs(&out);
    }
    Ok(())
}

async fn bench(args: BenchArgs, token: Option<String>) -> Result<(), Failure> {
    let mut manifest = match &args.manifest {
        Some(p) => RequestManifest::load(p)?,
        None => RequestManifest::notebook(),
    };
    if let Some(c) = args.concurrency {
        manifest.concurrency = c;
        manifest.validate()?;
    }
    if args.reps == 0 {
        return Err(Failure("--reps must be at least 1".into()));
    }
    let direct = Target::new(&args.direct, None)?;
    let portal = Target::new(&args.portal, args.portal_token.or(token))?;
    let report = run_benchmark(&manifest, &direct, &portal, args.reps).await?;
    print!("{}", emit_report(&report, args.format, args.histogram));
    Ok(())
}

fn text(v: &Value) -> String {
    match v {
        Value::Null => "-".into(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn print_forwards(list: &Value) {
    println!("{:<24} {:>6} {:>6} {:<4} {:<7} DESTINATION", "NAME", "OWNER", "GROUP", "MODE", "ACCESS");
    for f in list.as_array().into_iter().flatten() {
        let dest = match &f["destination"] {
            Value::Null => "disabled".to_string(),
            d => format!("{}:{}", text(&d["node"]), text(&d["port"])),
        };
        let access = match (f["owned"].as_bool(), f["can_connect"].as_bool()) {
            (Some(true), _) => "owner",
            (_, Some(true)) => "connect",
            _ => "-",
        };
        println!(
            "{:<24} {:>6} {:>6} {:<4} {:<7} {dest}",
            text(&f["name"]),
            text(&f["owner_uid"]),
            text(&f["group_gid"]),
            text(&f["mode"]),
            access
        );
    }
}

fn print_jobs(list: &Value) {
    println!("{:>5} {:<10} {:<16} {:<14} {:<8} LINK", "ID", "NODE", "PORTS", "KIND", "STATE");
    for j in list.as_array().into_iter().flatten() {
        let ports: Vec<String> = j["ports"].as_array().into_iter().flatten().map(text).collect();
        println!(
            "{:>5} {:<10} {:<16} {:<14} {:<8} {}",
            text(&j["job_id"]),
            text(&j["node"]),
            ports.join(","),
            text(&j["app_kind"]),
            text(&j["state"]),
            text(&j["connect_link"])
        );
    }
}
