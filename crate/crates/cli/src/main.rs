use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dvr_core::eval::{
    detect_loop, load_suite, render_table, run_benchmark, write_report, BenchConfig, ScriptMode, ScriptRef, TaskEnv, TaskSpec,
    DEFAULT_LOOP_THRESHOLD,
};
use dvr_core::fsm::{ClarifyReply, Clarifier, DecisionMatrix, EngineConfig, RunOutcome};
use dvr_core::planner::{Planner, PlannerScript, RemoteConfig, RemotePlanner};
use dvr_core::registry::{load_registry, RegistryError, BUNDLED_REGISTRY};
use dvr_core::trace::{parse_jsonl, timeline, JsonlSink};
use dvr_service::ServiceConfig;

/// Exit status for bad input, unreadable files and invalid configuration.
const CONFIG_ERROR: u8 = 2;

#[derive(Parser)]
#[command(name = "dvr", version, about = "Design-verify-rectify protocol runs with a gated executor")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one task and print its trace timeline.
    Run(RunArgs),
    /// Run every task of a suite directory and write a metrics report.
    Eval(EvalArgs),
    /// Print the timeline of a recorded trace.
    Replay { trace: PathBuf },
    Registry {
        #[command(subcommand)]
        command: RegistryCommand,
    },
    Fsm {
        #[command(subcommand)]
        command: FsmCommand,
    },
    /// Start the HTTP control service.
    Serve(ServeArgs),
}

#[derive(Subcommand)]
enum RegistryCommand {
    /// Parse and check a registry file (the bundled one by default).
    Validate { path: Option<PathBuf> },
}

#[derive(Subcommand)]
enum FsmCommand {
    /// Print the decision matrix as JSON.
    ExportMatrix {
        #[arg(long)]
        pass_through: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PlannerKind {
    Scripted,
    Remote,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Rectifying,
    NonRectifying,
}

impl From<Mode> for ScriptMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Rectifying => ScriptMode::Rectifying,
            Mode::NonRectifying => ScriptMode::NonRectifying,
        }
    }
}

#[derive(Args)]
struct RemoteArgs {
    /// Chat-completions endpoint of the remote planner.
    #[arg(long, env = "DVR_ENDPOINT")]
    endpoint: Option<String>,
    #[arg(long, env = "DVR_MODEL", default_value = "default")]
    model: String,
}

impl RemoteArgs {
    fn config(&self) -> Option<RemoteConfig> {
        self.endpoint.as_deref().map(|e| RemoteConfig::new(e, &self.model))
    }
}

#[derive(Args)]
struct RunArgs {
    task: PathBuf,
    #[arg(long, value_enum, default_value = "scripted")]
    planner: PlannerKind,
    /// Script file replacing the task's own script.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Ask clarification questions on the terminal instead of using canned answers.
    #[arg(long)]
    interactive_clarify: bool,
    #[arg(long, value_enum, default_value = "rectifying")]
    mode: Mode,
    #[arg(long)]
    t_max: Option<u32>,
    /// Use the pass-through matrix: no verification, no interlock.
    #[arg(long)]
    pass_through: bool,
    /// Write the trace as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    remote: RemoteArgs,
}

#[derive(Args)]
struct EvalArgs {
    suite: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Record per-task wall time (reports are then no longer reproducible).
    #[arg(long)]
    timing: bool,
    #[arg(long, value_enum, default_value = "rectifying")]
    mode: Mode,
    #[arg(long)]
    pass_through: bool,
    #[arg(long)]
    t_max: Option<u32>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "DVR_BIND", default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    #[arg(long, env = "DVR_MAX_RUNS", default_value_t = 8)]
    max_runs: usize,
    /// Directory of task files addressable by id.
    #[arg(long, env = "DVR_TASK_DIR")]
    task_dir: Option<PathBuf>,
    #[arg(long, env = "DVR_TRACE_DIR")]
    trace_dir: Option<PathBuf>,
    #[command(flatten)]
    remote: RemoteArgs,
}

/// Reads answers from stdin; end of input closes the question.
struct TerminalClarifier;

impl Clarifier for TerminalClarifier {
    fn ask(&mut self, clar_id: &str, question: &str) -> ClarifyReply {
        eprint!("[{clar_id}] {question}\n> ");
        let _ = std::io::stderr().flush();
        let mut line = String::new();
        match std::io::stdin().lock().read_line(&mut line) {
            Ok(n) if n > 0 && !line.trim().is_empty() => ClarifyReply::Answered(line.trim().to_string()),
            _ => ClarifyReply::Closed,
        }
    }
}

fn matrix(pass_through: bool) -> DecisionMatrix {
    if pass_through {
        DecisionMatrix::pass_through()
    } else {
        DecisionMatrix::standard()
    }
}

fn engine_config(pass_through: bool, t_max: Option<u32>) -> EngineConfig {
    let defaults = EngineConfig::default();
    EngineConfig { matrix: matrix(pass_through), t_max: t_max.unwrap_or(defaults.t_max), ..defaults }
}

/// Loads the task and builds its planner; any failure is a configuration error.
fn prepare_run(args: &RunArgs) -> Result<(TaskSpec, Box<dyn Planner>)> {
    let mut task = TaskSpec::load(&args.task)?;
    if let Some(path) = &args.script {
        let script = PlannerScript::load(path).map_err(anyhow::Error::msg)?;
        task.script = Some(ScriptRef::Inline(script));
    }
    let planner: Box<dyn Planner> = match args.planner {
        PlannerKind::Scripted => Box::new(task.planner(args.mode.into())?),
        PlannerKind::Remote => {
            let Some(config) = args.remote.config() else { bail!("--planner remote needs --endpoint or DVR_ENDPOINT") };
            Box::new(RemotePlanner::new(config))
        }
    };
    Ok((task, planner))
}

fn run(args: RunArgs) -> Result<u8> {
    let (task, planner) = match prepare_run(&args) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(CONFIG_ERROR);
        }
    };
    let env = TaskEnv::bundled();
    let config = EngineConfig { run_id: task.id.clone(), ..engine_config(args.pass_through, args.t_max) };
    let mut engine = task.engine(&env, planner, config)?;
    if args.interactive_clarify {
        engine = engine.with_clarifier(Box::new(TerminalClarifier));
    }
    if let Some(path) = &args.trace {
        engine = engine.with_sink(Box::new(JsonlSink::create(path).with_context(|| format!("creating {}", path.display()))?));
    }
    let result = engine.run();
    print!("{}", timeline(&result.trace));
    let metrics = task.score(&env, &result, DEFAULT_LOOP_THRESHOLD);
    println!(
        "\n{}: {} after {} steps, {} ops executed, S_code {:.3}, tokens in/out {}/{}",
        task.id,
        result.outcome.label(),
        result.trace.len(),
        result.world.event_log().len(),
        metrics.s_code,
        metrics.tokens_in,
        metrics.tokens_out
    );
    Ok(if result.outcome == RunOutcome::Success { 0 } else { 1 })
}

fn eval(args: EvalArgs) -> Result<u8> {
    let tasks = match load_suite(&args.suite) {
        Ok(t) if !t.is_empty() => t,
        Ok(_) => {
            eprintln!("error: no tasks in {}", args.suite.display());
            return Ok(CONFIG_ERROR);
        }
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(CONFIG_ERROR);
        }
    };
    let config = BenchConfig {
        engine: engine_config(args.pass_through, args.t_max),
        mode: args.mode.into(),
        timing: args.timing,
        ..BenchConfig::default()
    };
    let report = run_benchmark(&tasks, &TaskEnv::bundled(), &config);
    write_report(&args.out, &report).with_context(|| format!("writing {}", args.out.display()))?;
    print!("{}", render_table(&report));
    println!("report written to {}", args.out.display());
    Ok(if report.all_succeeded() { 0 } else { 1 })
}

fn replay(path: &Path) -> Result<u8> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", path.display());
            return Ok(CONFIG_ERROR);
        }
    };
    let events = match parse_jsonl(&text) {
        Ok(e) => e,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return Ok(CONFIG_ERROR);
        }
    };
    print!("{}", timeline(&events));
    let outcome = events.last().and_then(|e| e.outcome.clone());
    let timed_out = outcome == Some(RunOutcome::Timeout);
    println!(
        "\n{} events, outcome {}, retry loop {}",
        events.len(),
        outcome.as_ref().map_or("unfinished", RunOutcome::label),
        if detect_loop(&events, DEFAULT_LOOP_THRESHOLD, timed_out) { "detected" } else { "not detected" }
    );
    Ok(if outcome == Some(RunOutcome::Success) { 0 } else { 1 })
}

fn validate_registry(path: Option<&Path>) -> Result<u8> {
    let text = match path {
        None => BUNDLED_REGISTRY.to_string(),
        Some(p) => match std::fs::read_to_string(p) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("error: cannot read {}: {e}", p.display());
                return Ok(CONFIG_ERROR);
            }
        },
    };
    match load_registry(text.as_bytes()) {
        Ok(reg) => {
            let ops: usize = reg.devices().iter().map(|d| d.operations.len()).sum();
            println!("registry {} is valid: {} devices, {ops} operations", reg.version(), reg.len());
            Ok(0)
        }
        Err(RegistryError::Schema(errors)) => {
            for e in &errors {
                println!("{e}");
            }
            println!("{} schema errors", errors.len());
            Ok(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            Ok(CONFIG_ERROR)
        }
    }
}

fn serve(args: ServeArgs) -> Result<u8> {
    let mut config = ServiceConfig {
        max_concurrent_runs: args.max_runs,
        trace_dir: args.trace_dir,
        remote: args.remote.config(),
        ..ServiceConfig::default()
    };
    if let Some(dir) = args.task_dir {
        config.task_dir = dir;
    }
    if let Some(dir) = &config.trace_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(dvr_service::serve(args.bind, config)).context("control service failed")?;
    Ok(0)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Eval(args) => eval(args),
        Command::Replay { trace } => replay(&trace),
        Command::Registry { command: RegistryCommand::Validate { path } } => validate_registry(path.as_deref()),
        Command::Fsm { command: FsmCommand::ExportMatrix { pass_through } } => {
            println!("{}", serde_json::to_string_pretty(&matrix(pass_through).export()).expect("matrix serializes"));
            Ok(0)
        }
        Command::Serve(args) => serve(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(CONFIG_ERROR)
        }
    }
}
