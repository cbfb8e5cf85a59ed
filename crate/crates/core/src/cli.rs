//! Command-line surface.
//!
//! Exit codes: 0 finished (or nothing to do), 2 bad input, 3 never
//! schedulable, 4 aborted or failed, 5 unknown job id, 1 anything else.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{ConfigError, JobBundle, Project, ScenarioConfig};
use crate::guestfl::AppConfig;
use crate::runtime::sim::Simulation;
use crate::runtime::sockets::{start_server, start_site, RemoteControl};
use crate::runtime::{ControlReply, JobSpec, JobState};
use crate::store::{JobEvent, RunStore};
use crate::tracking::export_csv;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_BAD_INPUT: i32 = 2;
pub const EXIT_UNSCHEDULABLE: i32 = 3;
pub const EXIT_NOT_FINISHED: i32 = 4;
pub const EXIT_UNKNOWN_JOB: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "fedrelay", version, about = "Run and control federated learning jobs")]
pub struct Cli {
    /// error, warn, info, debug or trace
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,
    /// Where run artifacts go, one directory per job.
    #[arg(long, global = true, default_value = "runs")]
    pub runs_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Sim,
    Sockets,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a project (scenario.json + app.json [+ job.json]) in one process.
    Run { project: PathBuf },
    /// Job operations.
    Job {
        #[command(subcommand)]
        command: JobCommand,
    },
    /// Show a job's state and transitions.
    Status {
        job_id: String,
        /// Ask a running server instead of reading the run directory.
        #[arg(long)]
        server: Option<String>,
    },
    /// Abort a job. Succeeds if the job is already terminal.
    Abort {
        job_id: String,
        #[arg(long)]
        reason: Option<String>,
        #[arg(long)]
        server: Option<String>,
    },
    /// Write one metric tag of a job as CSV (step,site,value).
    Export {
        job_id: String,
        tag: String,
        /// Defaults to <runs-dir>/<job_id>/metrics_<tag>.csv
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Start the server control process on one TCP port.
    Server {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8002")]
        listen: String,
    },
    /// Start a site's client control process and connect it to a server.
    Site {
        #[arg(long)]
        name: String,
        #[arg(long, default_value = "127.0.0.1:8002")]
        server: String,
        /// Scenario file to take the heartbeat settings from.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum JobCommand {
    /// Submit a job bundle (job.json [+ app.json]) and follow it to the end.
    Submit {
        job_path: PathBuf,
        /// Scenario for sim mode; defaults to <job_path>/scenario.json.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "sim")]
        mode: Mode,
        #[arg(long, default_value = "127.0.0.1:8002")]
        server: String,
        /// Wall-clock limit when following a job over sockets.
        #[arg(long, default_value_t = 3600)]
        timeout_s: u64,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_BAD_INPUT } else { EXIT_OK };
            let _ = if e.use_stderr() { write!(err, "{e}") } else { write!(out, "{e}") };
            return code;
        }
    };
    init_logging(&cli.log_level);
    execute(cli, out, err)
}

fn init_logging(level: &str) {
    let filter = level.parse().unwrap_or(log::LevelFilter::Warn);
    let _ = env_logger::Builder::new().filter_level(filter).format_timestamp_millis().try_init();
}

pub fn execute(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let store = RunStore::new(&cli.runs_dir);
    match cli.command {
        Command::Run { project } => match Project::load(&project) {
            Ok(p) => run_sim(p.scenario, p.bundle.job, p.bundle.app, &store, out, err),
            Err(e) => bad_input(err, &e),
        },
        Command::Job { command: JobCommand::Submit { job_path, config, mode, server, timeout_s } } => {
            let bundle = match JobBundle::load(&job_path) {
                Ok(b) => b,
                Err(e) => return bad_input(err, &e),
            };
            match mode {
                Mode::Sim => {
                    let path = config.unwrap_or_else(|| job_path.join("scenario.json"));
                    match ScenarioConfig::load(&path) {
                        Ok(s) => run_sim(s, bundle.job, bundle.app, &store, out, err),
                        Err(e) => bad_input(err, &e),
                    }
                }
                Mode::Sockets => {
                    submit_remote(&server, bundle.job, bundle.app, Duration::from_secs(timeout_s), out, err)
                }
            }
        }
        Command::Status { job_id, server: Some(server) } => remote(&server, err, |ctl, err| {
            let reply = ctl.status(Some(&job_id))?;
            Ok(report_reply(&reply, out, err))
        }),
        Command::Status { job_id, server: None } => local_status(&store, &job_id, out, err),
        Command::Abort { job_id, reason, server: Some(server) } => remote(&server, err, |ctl, err| {
            let reply = ctl.abort(&job_id, reason.clone())?;
            let code = report_reply(&reply, out, err);
            // Aborting a job that already ended is not an error.
            Ok(if code == EXIT_NOT_FINISHED { EXIT_OK } else { code })
        }),
        Command::Abort { job_id, reason, server: None } => local_abort(&store, &job_id, reason, out, err),
        Command::Export { job_id, tag, out: path } => export(&store, &job_id, &tag, path, out, err),
        Command::Server { config, listen } => {
            let scenario = match ScenarioConfig::load(&config) {
                Ok(s) => s,
                Err(e) => return bad_input(err, &e),
            };
            match start_server(&listen, scenario, Some(store)) {
                Ok(h) => {
                    let _ = writeln!(out, "listening on {}", h.local_addr());
                    let _ = out.flush();
                    h.join();
                    EXIT_OK
                }
                Err(e) => fail(err, EXIT_ERROR, &format!("cannot listen on {listen}: {e}")),
            }
        }
        Command::Site { name, server, config } => {
            let heartbeat = match config.as_deref().map(ScenarioConfig::load).transpose() {
                Ok(s) => s.map(|s| s.heartbeat).unwrap_or_default(),
                Err(e) => return bad_input(err, &e),
            };
            match start_site(&name, server.as_str(), heartbeat, Some(store)) {
                Ok(h) => {
                    let _ = writeln!(out, "site {name} connected to {server}");
                    let _ = out.flush();
                    h.join();
                    EXIT_OK
                }
                Err(e) => fail(err, EXIT_ERROR, &format!("site {name}: {e}")),
            }
        }
    }
}

fn fail(err: &mut dyn Write, code: i32, msg: &str) -> i32 {
    let _ = writeln!(err, "error: {msg}");
    code
}

fn bad_input(err: &mut dyn Write, e: &ConfigError) -> i32 {
    fail(err, EXIT_BAD_INPUT, &e.to_string())
}

/// Exit code for a control-plane error code.
pub fn exit_for_error(code: &str) -> i32 {
    match code {
        "NeverSchedulable" => EXIT_UNSCHEDULABLE,
        "UnknownJob" => EXIT_UNKNOWN_JOB,
        "DuplicateJobId" | "UnknownApp" | "DirectNotPermitted" | "InvalidSpec" | "NotAMember" => EXIT_BAD_INPUT,
        _ => EXIT_ERROR,
    }
}

pub fn exit_for_state(state: JobState) -> i32 {
    match state {
        JobState::Finished => EXIT_OK,
        s if s.is_terminal() => EXIT_NOT_FINISHED,
        _ => EXIT_ERROR,
    }
}

fn print_event(out: &mut dyn Write, ev: &JobEvent) {
    let from = ev.from.as_deref().unwrap_or("-");
    let _ = match &ev.reason {
        Some(r) => writeln!(out, "{:>10} ms  {}  {} -> {}  ({r})", ev.t_ms, ev.job_id, from, ev.to),
        None => writeln!(out, "{:>10} ms  {}  {} -> {}", ev.t_ms, ev.job_id, from, ev.to),
    };
}

fn print_final(out: &mut dyn Write, job_id: &str, state: JobState, reason: Option<&str>) {
    let _ = writeln!(out, "{job_id} {state}");
    if let Some(r) = reason {
        let _ = writeln!(out, "reason: {r}");
    }
}

fn run_sim(
    scenario: ScenarioConfig,
    job: JobSpec,
    app: Option<AppConfig>,
    store: &RunStore,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    let job_id = job.job_id.clone();
    let mut sim = match Simulation::new(scenario, Some(store.clone())) {
        Ok(s) => s,
        Err(e) => return bad_input(err, &e),
    };
    let status = match sim.run_job(job, app) {
        Ok(s) => s,
        Err(ControlReply::Error { code, message }) => {
            return fail(err, exit_for_error(&code), &format!("{code}: {message}"))
        }
        Err(other) => return fail(err, EXIT_ERROR, &format!("unexpected reply {other:?}")),
    };
    for ev in sim.scp().events(&job_id).unwrap_or_default() {
        print_event(out, ev);
    }
    print_final(out, &job_id, status.state, status.failure_reason.as_deref());
    exit_for_state(status.state)
}

fn remote(
    server: &str,
    err: &mut dyn Write,
    f: impl FnOnce(&mut RemoteControl, &mut dyn Write) -> std::io::Result<i32>,
) -> i32 {
    let mut ctl = match RemoteControl::connect(server, &RemoteControl::default_name()) {
        Ok(c) => c,
        Err(e) => return fail(err, EXIT_ERROR, &format!("cannot reach {server}: {e}")),
    };
    f(&mut ctl, err).unwrap_or_else(|e| fail(err, EXIT_ERROR, &e.to_string()))
}

fn report_reply(reply: &ControlReply, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    match reply {
        ControlReply::Status { status, events } => {
            for ev in events {
                print_event(out, ev);
            }
            print_final(out, &status.job_id, status.state, status.failure_reason.as_deref());
            if status.state.is_terminal() {
                exit_for_state(status.state)
            } else {
                EXIT_OK
            }
        }
        ControlReply::List { jobs } => {
            for j in jobs {
                let _ = writeln!(out, "{} {}", j.job_id, j.state);
            }
            EXIT_OK
        }
        ControlReply::Error { code, message } => fail(err, exit_for_error(code), &format!("{code}: {message}")),
    }
}

fn submit_remote(
    server: &str,
    job: JobSpec,
    app: Option<AppConfig>,
    timeout: Duration,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    let job_id = job.job_id.clone();
    remote(server, err, |ctl, err| {
        match ctl.submit(job, app)? {
            ControlReply::Status { .. } => {}
            ControlReply::Error { code, message } => {
                return Ok(fail(err, exit_for_error(&code), &format!("{code}: {message}")));
            }
            other => return Ok(fail(err, EXIT_ERROR, &format!("unexpected reply {other:?}"))),
        }
        let status = ctl.follow(&job_id, Duration::from_millis(200), timeout, |ev| {
            print_event(out, ev);
            let _ = out.flush();
        })?;
        print_final(out, &job_id, status.state, status.failure_reason.as_deref());
        Ok(exit_for_state(status.state))
    })
}

fn read_events(store: &RunStore, job_id: &str, err: &mut dyn Write) -> Result<Vec<JobEvent>, i32> {
    match store.read_events(job_id) {
        Ok(Some(evs)) if !evs.is_empty() => Ok(evs),
        Ok(_) => Err(fail(err, EXIT_UNKNOWN_JOB, &format!("unknown job {job_id}"))),
        Err(e) => Err(fail(err, EXIT_ERROR, &format!("{}: {e}", store.events_path(job_id).display()))),
    }
}

fn last_state(events: &[JobEvent]) -> Option<JobState> {
    events.last().and_then(|e| JobState::parse(&e.to))
}

fn local_status(store: &RunStore, job_id: &str, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let events = match read_events(store, job_id, err) {
        Ok(e) => e,
        Err(code) => return code,
    };
    for ev in &events {
        print_event(out, ev);
    }
    match last_state(&events) {
        Some(state) => {
            print_final(out, job_id, state, events.last().and_then(|e| e.reason.as_deref()));
            EXIT_OK
        }
        None => fail(err, EXIT_ERROR, "event log ends in an unknown state"),
    }
}

/// Run directories belong to finished simulator runs; a job whose log never
/// reached a terminal state is closed out by recording the abort.
fn local_abort(
    store: &RunStore,
    job_id: &str,
    reason: Option<String>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    let events = match read_events(store, job_id, err) {
        Ok(e) => e,
        Err(code) => return code,
    };
    let last = events.last().expect("non-empty");
    match last_state(&events) {
        Some(s) if s.is_terminal() => {
            print_final(out, job_id, s, last.reason.as_deref());
            EXIT_OK
        }
        _ => {
            let ev = JobEvent {
                t_ms: last.t_ms,
                job_id: job_id.to_string(),
                from: Some(last.to.clone()),
                to: JobState::Aborted.name().to_string(),
                reason: Some(reason.unwrap_or_else(|| "aborted by operator".into())),
            };
            if let Err(e) = store.append_event(&ev) {
                return fail(err, EXIT_ERROR, &e.to_string());
            }
            print_event(out, &ev);
            print_final(out, job_id, JobState::Aborted, ev.reason.as_deref());
            EXIT_OK
        }
    }
}

fn export(
    store: &RunStore,
    job_id: &str,
    tag: &str,
    path: Option<PathBuf>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    if !store.job_dir(job_id).is_dir() {
        return fail(err, EXIT_UNKNOWN_JOB, &format!("unknown job {job_id}"));
    }
    let metrics = store.metrics_path(job_id);
    if !Path::new(&metrics).is_file() {
        return fail(err, EXIT_BAD_INPUT, &format!("{job_id} has no metrics log"));
    }
    let path = path.unwrap_or_else(|| store.job_dir(job_id).join(format!("metrics_{tag}.csv")));
    match export_csv(&metrics, tag, &path) {
        Ok(rows) => {
            let _ = writeln!(out, "wrote {rows} rows to {}", path.display());
            EXIT_OK
        }
        Err(e) => fail(err, EXIT_ERROR, &format!("{}: {e}", path.display())),
    }
}
