use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use tf_core::bench::{self, AutoscaleSpec, BenchmarkReport, LoadKind, Phase, Shape};
use tf_core::dag::DagSpec;
use tf_core::executor::{Invoker, LocalExecutor};
use tf_core::federated::{run_federated, FederatedSpec};
use tf_core::kernel::Extensions;
use tf_core::service::{InvokerFactory, Service, ServiceConfig};
use tfctl::deploy;
use tfctl::remote::{executor_router, HttpPublisher, RemoteInvoker};

#[derive(Parser)]
#[command(name = "tfctl", version, about = "Trigger-based workflow engine")]
struct Cli {
    /// JSON service configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Storage directory; overrides the config file and TRIGGERFLOW_ROOT.
    #[arg(long, global = true)]
    root: Option<PathBuf>,
    /// Seeds task latency and fault draws.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the REST API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// Send task invocations to this executor instead of running them in-process.
        #[arg(long)]
        invoker_url: Option<String>,
    },
    /// Run a standalone task executor.
    Executor {
        #[arg(long, default_value = "127.0.0.1:8081")]
        addr: String,
        /// Base URL of the service that receives termination events.
        #[arg(long)]
        callback: String,
    },
    #[command(subcommand)]
    Dag(DagCmd),
    /// Amazon States Language state machines.
    #[command(subcommand)]
    Sm(SmCmd),
    /// Workflow-as-code programs.
    #[command(subcommand)]
    Code(CodeCmd),
    /// Print a workflow's state.
    State {
        workflow: String,
        #[arg(long)]
        trigger: Option<String>,
    },
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Federated learning rounds.
    #[command(subcommand)]
    Fed(FedCmd),
}

#[derive(Args)]
struct RunOpts {
    /// Run input as JSON.
    #[arg(long, default_value = "null")]
    input: String,
    /// Seconds to wait for the workflow to end.
    #[arg(long, default_value_t = 60.0)]
    timeout: f64,
}

#[derive(Subcommand)]
enum DagCmd {
    Deploy { file: PathBuf },
    /// Run a deployed DAG, or deploy and run a DAG file.
    Run {
        dag: String,
        #[command(flatten)]
        opts: RunOpts,
    },
    /// Complete a halted task with a manual output.
    Resume {
        dag: String,
        #[arg(long)]
        task: String,
        #[arg(long, default_value = "null")]
        output: String,
        #[arg(long)]
        index: Option<u64>,
        #[arg(long, default_value_t = 60.0)]
        timeout: f64,
    },
}

#[derive(Subcommand)]
enum SmCmd {
    Deploy {
        file: PathBuf,
        /// Workflow id; defaults to the file stem.
        #[arg(long)]
        id: Option<String>,
    },
    /// Run a deployed machine, or deploy and run a machine file.
    Run {
        machine: String,
        #[arg(long)]
        id: Option<String>,
        #[command(flatten)]
        opts: RunOpts,
    },
}

#[derive(Subcommand)]
enum CodeCmd {
    /// List registered programs.
    List,
    Run {
        program: String,
        /// Workflow id; defaults to the program name.
        #[arg(long)]
        id: Option<String>,
        #[command(flatten)]
        opts: RunOpts,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ShapeArg {
    Sequence,
    Parallel,
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Event throughput of one worker.
    Load {
        #[arg(long, default_value_t = 200_000)]
        events: u64,
        #[arg(long, value_enum, default_value = "noop")]
        kind: KindArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Orchestration overhead of a sequence or parallel workflow.
    Overhead {
        #[arg(long, value_enum, default_value = "sequence")]
        shape: ShapeArg,
        #[arg(long, default_value_t = 80)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        task_ms: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Worker count over bursts of load separated by pauses.
    Autoscale {
        #[arg(long, default_value_t = 10)]
        workflows: usize,
        #[arg(long, default_value_t = 20.0)]
        rate: f64,
        #[arg(long, default_value_t = 0.5)]
        grace: f64,
        /// Phases as active:pause seconds, e.g. 1:2,1:0.
        #[arg(long, default_value = "1:2,1:0")]
        phases: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// A worker idling through a long task.
    Idle {
        #[arg(long, default_value_t = 2.0)]
        grace: f64,
        #[arg(long, default_value_t = 5.0)]
        task: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Noop,
    Join,
}

#[derive(Subcommand)]
enum FedCmd {
    Run {
        /// JSON round specification; flags below override it.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        rounds: Option<u32>,
        #[arg(long)]
        timeout: Option<f64>,
        #[arg(long)]
        mass_failure_round: Option<u32>,
    },
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let config = load_config(&cli)?;
    match cli.command {
        Command::Serve { addr, invoker_url } => serve(config, &addr, invoker_url),
        Command::Executor { addr, callback } => executor(&addr, &callback, config.seed),
        Command::Dag(cmd) => dag(config, cmd),
        Command::Sm(cmd) => sm(config, cmd),
        Command::Code(cmd) => code(config, cmd),
        Command::State { workflow, trigger } => {
            let svc = Service::open(config)?;
            print_json(&svc.get_state(&workflow, trigger.as_deref())?)
        }
        Command::Bench(cmd) => bench(cmd),
        Command::Fed(cmd) => fed(cmd, config.seed),
    }
}

fn load_config(cli: &Cli) -> Result<ServiceConfig> {
    let mut config = ServiceConfig::load(cli.config.as_deref())?;
    if let Some(root) = &cli.root {
        config.storage_root = Some(root.clone());
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn print_json(v: &Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn parse_json(what: &str, text: &str) -> Result<Value> {
    serde_json::from_str(text).with_context(|| format!("{what} is not valid JSON"))
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_json(&path.display().to_string(), &text)
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

async fn ctrl_c() {
    let _ = tokio::signal::ctrl_c().await;
}

fn serve(config: ServiceConfig, addr: &str, invoker_url: Option<String>) -> Result<()> {
    let rt = runtime()?;
    let invoker: Option<InvokerFactory> = invoker_url.map(|url| {
        let handle = rt.handle().clone();
        Box::new(move |publisher| Arc::new(RemoteInvoker::new(&url, handle, publisher)) as Arc<dyn Invoker>) as InvokerFactory
    });
    let svc = Service::open_with(config, Extensions::standard(), invoker)?;
    svc.start();
    let result = rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
        tracing::info!(addr = %listener.local_addr()?, "serving");
        eprintln!("listening on {}", listener.local_addr()?);
        tfctl::server::serve(svc.clone(), listener, ctrl_c()).await?;
        anyhow::Ok(())
    });
    svc.shutdown();
    result
}

fn executor(addr: &str, callback: &str, seed: u64) -> Result<()> {
    let rt = runtime()?;
    let publisher = Arc::new(HttpPublisher::new(callback, rt.handle().clone()));
    let executor = LocalExecutor::new(publisher, seed).with_standard_tasks();
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
        eprintln!("executor listening on {}, tasks: {}", listener.local_addr()?, executor.task_names().join(", "));
        axum::serve(listener, executor_router(executor)).with_graceful_shutdown(ctrl_c()).await?;
        anyhow::Ok(())
    })
}

fn open_started(config: ServiceConfig) -> Result<Arc<Service>> {
    let svc = Service::open(config)?;
    svc.start();
    Ok(svc)
}

fn require_root(config: &ServiceConfig) -> Result<()> {
    if config.storage_root.is_none() {
        bail!("deploy needs a storage root (--root, the config file or TRIGGERFLOW_ROOT); an in-memory deployment would vanish on exit");
    }
    Ok(())
}

fn finish(svc: &Service, id: &str, timeout: f64) -> Result<()> {
    let outcome = deploy::outcome(svc, id, Duration::from_secs_f64(timeout))?;
    svc.shutdown();
    print_json(&outcome)
}

fn dag(config: ServiceConfig, cmd: DagCmd) -> Result<()> {
    match cmd {
        DagCmd::Deploy { file } => {
            require_root(&config)?;
            let spec: DagSpec = serde_json::from_value(read_json(&file)?).context("invalid DAG document")?;
            let svc = Service::open(config)?;
            print_json(&json!({"workflow_id": deploy::deploy_dag(&svc, &spec)?}))
        }
        DagCmd::Run { dag, opts } => {
            let input = parse_json("--input", &opts.input)?;
            let svc = open_started(config)?;
            let id = if Path::new(&dag).is_file() {
                let spec: DagSpec = serde_json::from_value(read_json(Path::new(&dag))?).context("invalid DAG document")?;
                deploy::deploy_dag(&svc, &spec)?
            } else {
                dag
            };
            deploy::start(&svc, &id, input)?;
            finish(&svc, &id, opts.timeout)
        }
        DagCmd::Resume { dag, task, output, index, timeout } => {
            let output = parse_json("--output", &output)?;
            let svc = open_started(config)?;
            deploy::resume_dag(&svc, &dag, &task, output, index)?;
            finish(&svc, &dag, timeout)
        }
    }
}

fn file_stem(path: &Path) -> Result<String> {
    path.file_stem().and_then(|s| s.to_str()).map(|s| s.trim_end_matches(".asl").to_string()).context("cannot derive a workflow id from the file name; pass --id")
}

fn sm(config: ServiceConfig, cmd: SmCmd) -> Result<()> {
    match cmd {
        SmCmd::Deploy { file, id } => {
            require_root(&config)?;
            let id = match id {
                Some(id) => id,
                None => file_stem(&file)?,
            };
            let doc = read_json(&file)?;
            let svc = Service::open(config)?;
            print_json(&json!({"workflow_id": deploy::deploy_state_machine(&svc, &id, &doc)?}))
        }
        SmCmd::Run { machine, id, opts } => {
            let input = parse_json("--input", &opts.input)?;
            let svc = open_started(config)?;
            let path = Path::new(&machine);
            let id = if path.is_file() {
                let id = match id {
                    Some(id) => id,
                    None => file_stem(path)?,
                };
                deploy::deploy_state_machine(&svc, &id, &read_json(path)?)?
            } else {
                machine
            };
            deploy::start(&svc, &id, input)?;
            finish(&svc, &id, opts.timeout)
        }
    }
}

fn code(config: ServiceConfig, cmd: CodeCmd) -> Result<()> {
    match cmd {
        CodeCmd::List => print_json(&json!(Extensions::standard().program_names())),
        CodeCmd::Run { program, id, opts } => {
            let input = parse_json("--input", &opts.input)?;
            let svc = open_started(config)?;
            let id = id.unwrap_or_else(|| program.clone());
            deploy::deploy_program(&svc, &id, &program)?;
            deploy::start(&svc, &id, input)?;
            finish(&svc, &id, opts.timeout)
        }
    }
}

fn parse_phases(text: &str) -> Result<Vec<Phase>> {
    text.split(',')
        .map(|p| {
            let (a, b) = p.split_once(':').with_context(|| format!("phase {p:?} is not active:pause"))?;
            Ok(Phase { active_s: a.trim().parse()?, pause_s: b.trim().parse()? })
        })
        .collect()
}

fn emit_report(report: &BenchmarkReport, out: Option<PathBuf>) -> Result<()> {
    if let Some(path) = out {
        report.write(&path)?;
        eprintln!("wrote {}", path.display());
    }
    print_json(&report.to_json())
}

fn bench(cmd: BenchCmd) -> Result<()> {
    match cmd {
        BenchCmd::Load { events, kind, out } => {
            let kind = match kind {
                KindArg::Noop => LoadKind::Noop,
                KindArg::Join => LoadKind::Join,
            };
            emit_report(&bench::bench_load(events, kind)?, out)
        }
        BenchCmd::Overhead { shape, n, task_ms, out } => {
            let shape = match shape {
                ShapeArg::Sequence => Shape::Sequence(n),
                ShapeArg::Parallel => Shape::Parallel(n),
            };
            emit_report(&bench::bench_overhead(shape, Duration::from_millis(task_ms))?, out)
        }
        BenchCmd::Autoscale { workflows, rate, grace, phases, out } => {
            let spec = AutoscaleSpec { workflows, rate_per_s: rate, grace_s: grace, phases: parse_phases(&phases)?, ..Default::default() };
            emit_report(&bench::bench_autoscale(&spec)?, out)
        }
        BenchCmd::Idle { grace, task, out } => emit_report(&bench::bench_scale_to_zero(grace, task)?, out),
    }
}

fn fed(cmd: FedCmd, seed: u64) -> Result<()> {
    let FedCmd::Run { spec, rounds, timeout, mass_failure_round } = cmd;
    let mut spec: FederatedSpec = match spec {
        Some(path) => serde_json::from_value(read_json(&path)?).context("invalid federated spec")?,
        None => FederatedSpec::default(),
    };
    if let Some(r) = rounds {
        spec.rounds = r;
    }
    if let Some(t) = timeout {
        spec.timeout_s = t;
    }
    if mass_failure_round.is_some() {
        spec.mass_failure_round = mass_failure_round;
    }
    print_json(&json!(run_federated(&spec, seed)?))
}
