//! Command-line front end.
//!
//! Exit codes: 0 success, 1 invalid spec, 2 partial or aborted run,
//! 3 state-file, IO or transport error, 4 usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::configgen::{
    gen_alias_guards, gen_env_profile, gen_exports, gen_fstab_mount, gen_key_mesh, gen_motd, gen_quota_commands,
    gen_user_commands,
};
use crate::executor::{apply, run_power, ActionStatus, ApplyOptions, Backend, ExecutionReport, PlanStatus};
use crate::model::{node_partition_plan, parse_spec, validate, ClusterSpec};
use crate::monitor::{compute_rates, health_check, render_summary, CounterSource, Health, RateReport, TrafficSample};
use crate::planner::{diff, observe, power_notes, power_sequence, FleetState, Plan, PowerDirection, PowerState};
use crate::shell::{ShellBackend, SshTransport};
use crate::simfleet::SimFleet;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_FAILED: i32 = 2;
pub const EXIT_STATE: i32 = 3;
pub const EXIT_USAGE: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "hepcluster",
    version,
    about = "Provision and operate a small master/worker cluster"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum BackendKind {
    #[default]
    Sim,
    Shell,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Format {
    #[default]
    Table,
    Machine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Artifact {
    Exports,
    Fstab,
    Env,
    Aliases,
    Motd,
    Users,
    Quotas,
    Keys,
    Partitions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Direction {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct FleetArgs {
    #[arg(long, value_enum, default_value_t)]
    pub backend: BackendKind,
    /// Simulated fleet state file; required with the sim backend.
    #[arg(long)]
    pub state: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a spec file and list every violation.
    Validate {
        spec: PathBuf,
        #[arg(long, value_enum, default_value_t)]
        format: Format,
    },
    /// Print one generated artifact.
    Gen {
        #[arg(value_enum)]
        artifact: Artifact,
        spec: PathBuf,
    },
    /// Show the actions needed to converge the fleet.
    Plan {
        spec: PathBuf,
        #[command(flatten)]
        fleet: FleetArgs,
        #[arg(long, value_enum, default_value_t)]
        format: Format,
    },
    /// Converge the fleet.
    Apply {
        spec: PathBuf,
        #[command(flatten)]
        fleet: FleetArgs,
        #[arg(long)]
        dry_run: bool,
        #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
        max_parallel: u64,
        /// Apply a stored plan instead of computing one.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t)]
        format: Format,
    },
    /// Report power, health, pending work and quota usage.
    Status {
        spec: PathBuf,
        #[command(flatten)]
        fleet: FleetArgs,
        #[arg(long, value_enum, default_value_t)]
        format: Format,
    },
    /// Run the start or stop sequence.
    Power {
        #[arg(value_enum)]
        direction: Direction,
        spec: PathBuf,
        #[command(flatten)]
        fleet: FleetArgs,
        #[arg(long, value_enum, default_value_t)]
        format: Format,
    },
    /// Sample interface counters twice and print rates.
    Monitor {
        spec: PathBuf,
        #[command(flatten)]
        fleet: FleetArgs,
        /// Seconds between the two samples.
        #[arg(long, default_value_t = 2.0, value_parser = parse_interval)]
        interval: f64,
        /// Simulated traffic as NODE=BYTES_PER_SEC; sim backend only.
        #[arg(long = "traffic", value_parser = parse_traffic)]
        traffic: Vec<(String, u64)>,
        #[arg(long, value_enum, default_value_t)]
        format: Format,
    },
}

fn parse_interval(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v > 0.0 => Ok(v),
        _ => Err(format!("`{s}` is not a positive number of seconds")),
    }
}

fn parse_traffic(s: &str) -> Result<(String, u64), String> {
    let (node, rate) = s.split_once('=').ok_or("expected NODE=BYTES_PER_SEC")?;
    let rate = rate.parse().map_err(|e| format!("rate `{rate}`: {e}"))?;
    Ok((node.to_string(), rate))
}

/// Failure carrying its exit code and a diagnostic.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

type CmdResult = Result<i32, Failure>;

/// Runs one invocation, writing to the given streams. Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return code;
        }
    };
    let mut buf = String::new();
    let result = dispatch(cli.command, &mut buf, err);
    let _ = out.write_all(buf.as_bytes());
    match result {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(command: Command, out: &mut String, err: &mut dyn Write) -> CmdResult {
    match command {
        Command::Validate { spec, format } => cmd_validate(&spec, format, out),
        Command::Gen { artifact, spec } => cmd_gen(artifact, &load_valid_spec(&spec)?, out),
        Command::Plan { spec, fleet, format } => {
            let spec = load_valid_spec(&spec)?;
            let session = Session::open(&spec, &fleet, false)?;
            let plan = plan_for(&spec, session.backend())?;
            for w in &plan.warnings {
                let _ = writeln!(err, "warning: {w}");
            }
            match format {
                Format::Machine => out.push_str(&plan.to_json()),
                Format::Table => render_plan(&plan, out),
            }
            Ok(EXIT_OK)
        }
        Command::Apply {
            spec,
            fleet,
            dry_run,
            max_parallel,
            plan,
            format,
        } => {
            let spec = load_valid_spec(&spec)?;
            let mut session = Session::open(&spec, &fleet, !dry_run)?;
            let plan = match plan {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| Failure::new(EXIT_STATE, format!("{}: {e}", path.display())))?;
                    serde_json::from_str::<Plan>(&text)
                        .map_err(|e| Failure::new(EXIT_STATE, format!("{}: {e}", path.display())))?
                }
                None => plan_for(&spec, session.backend())?,
            };
            let options = ApplyOptions {
                dry_run,
                max_parallel_nodes: max_parallel as usize,
            };
            let report = apply(&spec, &plan, session.backend(), options);
            if !dry_run {
                session.save()?;
            }
            match format {
                Format::Machine => out.push_str(&to_json(&report)),
                Format::Table => render_report(&report, out),
            }
            Ok(match report.status {
                PlanStatus::Converged | PlanStatus::DryRun => EXIT_OK,
                PlanStatus::Partial | PlanStatus::Aborted => EXIT_FAILED,
            })
        }
        Command::Status { spec, fleet, format } => {
            let spec = load_valid_spec(&spec)?;
            let session = Session::open(&spec, &fleet, false)?;
            cmd_status(&spec, session.backend(), format, out)
        }
        Command::Power {
            direction,
            spec,
            fleet,
            format,
        } => {
            let spec = load_valid_spec(&spec)?;
            let mut session = Session::open(&spec, &fleet, true)?;
            let direction = match direction {
                Direction::On => PowerDirection::Start,
                Direction::Off => PowerDirection::Stop,
            };
            let mut report = run_power(&power_sequence(direction, &spec), session.backend());
            report
                .notes
                .extend(power_notes(direction).iter().map(|n| n.to_string()));
            session.save()?;
            match format {
                Format::Machine => out.push_str(&to_json(&report)),
                Format::Table => render_report(&report, out),
            }
            Ok(if report.status == PlanStatus::Converged {
                EXIT_OK
            } else {
                EXIT_FAILED
            })
        }
        Command::Monitor {
            spec,
            fleet,
            interval,
            traffic,
            format,
        } => {
            let spec = load_valid_spec(&spec)?;
            let session = Session::open(&spec, &fleet, false)?;
            if !traffic.is_empty() && fleet.backend != BackendKind::Sim {
                return Err(Failure::new(EXIT_USAGE, "--traffic needs the sim backend"));
            }
            let profile: BTreeMap<String, u64> = traffic.into_iter().collect();
            let report = session.monitor(&spec, interval, &profile)?;
            match format {
                Format::Machine => out.push_str(&report.to_json()),
                Format::Table => out.push_str(&render_summary(&report)),
            }
            Ok(EXIT_OK)
        }
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

fn read_spec(path: &Path) -> Result<ClusterSpec, Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::new(EXIT_STATE, format!("{}: {e}", path.display())))?;
    parse_spec(&bytes).map_err(|e| Failure::new(EXIT_INVALID, format!("{}: {e}", path.display())))
}

fn load_valid_spec(path: &Path) -> Result<ClusterSpec, Failure> {
    let spec = read_spec(path)?;
    let report = validate(&spec);
    if report.is_valid() {
        return Ok(spec);
    }
    let lines: Vec<String> = report.violations.iter().map(|v| v.to_string()).collect();
    Err(Failure::new(
        EXIT_INVALID,
        format!("{}: invalid spec\n  {}", path.display(), lines.join("\n  ")),
    ))
}

fn cmd_validate(path: &Path, format: Format, out: &mut String) -> CmdResult {
    let spec = read_spec(path)?;
    let report = validate(&spec);
    match format {
        Format::Machine => out.push_str(&to_json(&report)),
        Format::Table if report.is_valid() => {
            let _ = writeln!(out, "{}: ok ({} nodes)", spec.name, spec.nodes.len());
        }
        Format::Table => {
            for v in &report.violations {
                let _ = writeln!(out, "{v}");
            }
        }
    }
    Ok(if report.is_valid() { EXIT_OK } else { EXIT_INVALID })
}

fn gen_failure(e: impl std::fmt::Display) -> Failure {
    Failure::new(EXIT_INVALID, e.to_string())
}

fn cmd_gen(artifact: Artifact, spec: &ClusterSpec, out: &mut String) -> CmdResult {
    let master = spec.master().expect("valid spec has a master");
    let workers: Vec<&str> = spec.workers().map(|n| n.hostname.as_str()).collect();
    match artifact {
        Artifact::Exports => out.push_str(&gen_exports(&spec.storage, &workers).map_err(gen_failure)?.content),
        Artifact::Fstab => {
            let ip = master.internal_ip().expect("valid master has an internal IP");
            out.push_str(&gen_fstab_mount(ip, &spec.storage.path, &spec.storage.mountpoint_on_workers).content)
        }
        Artifact::Env => out.push_str(
            &gen_env_profile(&spec.apps, &spec.storage.path)
                .map_err(gen_failure)?
                .content,
        ),
        Artifact::Aliases => out.push_str(
            &gen_alias_guards(&spec.alias_guards, &spec.motd.worker_range)
                .map_err(gen_failure)?
                .content,
        ),
        Artifact::Motd => out.push_str(&gen_motd(&spec.motd).content),
        Artifact::Users => {
            for line in gen_user_commands(&spec.users, &workers) {
                let _ = writeln!(out, "{line}");
            }
        }
        Artifact::Quotas => {
            for cmd in gen_quota_commands(&spec.storage, &spec.users).map_err(gen_failure)? {
                let _ = writeln!(out, "{cmd}");
            }
        }
        Artifact::Keys => {
            let keys = spec
                .nodes
                .iter()
                .map(|n| (n.hostname.clone(), n.public_key_line()))
                .collect();
            let mesh = gen_key_mesh(spec.nodes.iter().map(|n| n.hostname.as_str()), &keys).map_err(gen_failure)?;
            out.push_str(&mesh.authorized_content[&master.hostname]);
        }
        Artifact::Partitions => {
            let _ = writeln!(out, "{:<12} {:<12} {:>16} KIND", "NODE", "MOUNT", "BYTES");
            let mut nodes: Vec<_> = spec.nodes.iter().collect();
            nodes.sort_by(|a, b| a.hostname.cmp(&b.hostname));
            for node in nodes {
                let table = node_partition_plan(node, &spec.storage).map_err(gen_failure)?;
                for p in &table.entries {
                    let kind = serde_json::to_value(p.kind).expect("kind serializes");
                    let _ = writeln!(
                        out,
                        "{:<12} {:<12} {:>16} {}",
                        node.hostname,
                        p.mount.to_string(),
                        p.size_bytes,
                        kind.as_str().unwrap_or_default()
                    );
                }
            }
        }
    }
    Ok(EXIT_OK)
}

fn plan_for(spec: &ClusterSpec, backend: &dyn Backend) -> Result<Plan, Failure> {
    let state = observe(backend, spec).map_err(|e| Failure::new(EXIT_STATE, e.to_string()))?;
    diff(spec, &state).map_err(|e| Failure::new(EXIT_INVALID, e.to_string()))
}

fn render_plan(plan: &Plan, out: &mut String) {
    for a in &plan.actions {
        let _ = writeln!(out, "{:<40} {}", a.id, a.op.summary());
    }
    let counts: Vec<String> = plan.phase_counts().iter().map(|(p, n)| format!("{p}={n}")).collect();
    let _ = writeln!(out, "{} action(s) {}", plan.actions.len(), counts.join(" "));
}

fn render_report(report: &ExecutionReport, out: &mut String) {
    for r in &report.results {
        let _ = write!(out, "{:<17} {}", r.status.to_string(), r.id);
        if let Some(e) = &r.error {
            let _ = write!(out, ": {e}");
        }
        out.push('\n');
    }
    for n in &report.notes {
        let _ = writeln!(out, "note: {n}");
    }
    let status = serde_json::to_value(report.status).expect("status serializes");
    let _ = writeln!(
        out,
        "status: {} (applied={} already_satisfied={} failed={} skipped={} would_apply={})",
        status.as_str().unwrap_or_default(),
        report.count(ActionStatus::Applied),
        report.count(ActionStatus::AlreadySatisfied),
        report.count(ActionStatus::Failed),
        report.count(ActionStatus::Skipped),
        report.count(ActionStatus::WouldApply),
    );
}

#[derive(serde::Serialize)]
struct NodeStatus {
    node: String,
    power: PowerState,
    reachable: bool,
    health: Health,
    pending: usize,
}

#[derive(serde::Serialize)]
struct QuotaStatus {
    user: String,
    used: u64,
    soft: u64,
    hard: u64,
    over_soft: bool,
}

#[derive(serde::Serialize)]
struct StatusReport {
    infrastructure: PowerState,
    nodes: Vec<NodeStatus>,
    quotas: Vec<QuotaStatus>,
    pending: usize,
}

fn build_status(spec: &ClusterSpec, state: &FleetState, plan: &Plan) -> StatusReport {
    let health = health_check(state, spec);
    let nodes = state
        .nodes
        .iter()
        .map(|(host, obs)| NodeStatus {
            node: host.clone(),
            power: obs.power,
            reachable: obs.reachable,
            health: health.get(host).copied().unwrap_or(Health::Unreachable),
            pending: plan.actions.iter().filter(|a| &a.target == host).count(),
        })
        .collect();
    let quotas = spec
        .master()
        .and_then(|m| state.node(&m.hostname))
        .map(|obs| {
            obs.quotas
                .iter()
                .map(|(user, q)| QuotaStatus {
                    user: user.clone(),
                    used: q.used,
                    soft: q.soft,
                    hard: q.hard,
                    over_soft: q.soft > 0 && q.used > q.soft,
                })
                .collect()
        })
        .unwrap_or_default();
    StatusReport {
        infrastructure: state.infrastructure,
        nodes,
        quotas,
        pending: plan.actions.len(),
    }
}

fn cmd_status(spec: &ClusterSpec, backend: &dyn Backend, format: Format, out: &mut String) -> CmdResult {
    let state = observe(backend, spec).map_err(|e| Failure::new(EXIT_STATE, e.to_string()))?;
    let plan = diff(spec, &state).map_err(|e| Failure::new(EXIT_INVALID, e.to_string()))?;
    let status = build_status(spec, &state, &plan);
    if format == Format::Machine {
        out.push_str(&to_json(&status));
        return Ok(EXIT_OK);
    }
    let _ = writeln!(out, "infrastructure {}", power_word(status.infrastructure));
    for n in &status.nodes {
        let reach = if n.reachable { "up" } else { "down" };
        let _ = writeln!(
            out,
            "{:<12} {:<5} power={:<7} health={:<11} pending={}",
            n.node,
            reach,
            power_word(n.power),
            n.health.to_string(),
            n.pending
        );
    }
    for q in &status.quotas {
        let _ = write!(
            out,
            "quota {:<10} used={} soft={} hard={}",
            q.user, q.used, q.soft, q.hard
        );
        out.push_str(if q.over_soft { " over-soft-limit\n" } else { "\n" });
    }
    let _ = writeln!(
        out,
        "{}",
        if status.pending == 0 {
            "converged".to_string()
        } else {
            format!("{} pending action(s)", status.pending)
        }
    );
    Ok(EXIT_OK)
}

fn power_word(p: PowerState) -> &'static str {
    match p {
        PowerState::On => "on",
        PowerState::Off => "off",
        PowerState::Unknown => "unknown",
    }
}

/// An opened backend, plus the locked state file for mutating sim commands.
enum Session {
    Sim { fleet: SimFleet, locked: Option<File> },
    Shell(ShellBackend<SshTransport>),
}

impl Session {
    fn open(spec: &ClusterSpec, args: &FleetArgs, mutating: bool) -> Result<Self, Failure> {
        match args.backend {
            BackendKind::Shell => Ok(Session::Shell(ShellBackend::new(SshTransport::default(), spec))),
            BackendKind::Sim => {
                let path = args
                    .state
                    .as_deref()
                    .ok_or_else(|| Failure::new(EXIT_USAGE, "the sim backend needs --state <path>"))?;
                let state_err = |e: std::io::Error| Failure::new(EXIT_STATE, format!("{}: {e}", path.display()));
                let (text, locked) = if mutating {
                    let mut file = OpenOptions::new()
                        .read(true)
                        .write(true)
                        .create(true)
                        .truncate(false)
                        .open(path)
                        .map_err(state_err)?;
                    file.try_lock().map_err(|_| {
                        Failure::new(
                            EXIT_STATE,
                            format!("{} is locked by another invocation", path.display()),
                        )
                    })?;
                    let mut text = String::new();
                    file.read_to_string(&mut text).map_err(state_err)?;
                    (text, Some(file))
                } else {
                    match std::fs::read_to_string(path) {
                        Ok(text) => (text, None),
                        Err(e) if e.kind() == std::io::ErrorKind::NotFound => (String::new(), None),
                        Err(e) => return Err(state_err(e)),
                    }
                };
                let fleet = if text.trim().is_empty() {
                    SimFleet::from_spec(spec)
                } else {
                    SimFleet::from_json(&text)
                        .map_err(|e| Failure::new(EXIT_STATE, format!("{}: {e}", path.display())))?
                };
                Ok(Session::Sim { fleet, locked })
            }
        }
    }

    fn backend(&self) -> &dyn Backend {
        match self {
            Session::Sim { fleet, .. } => fleet,
            Session::Shell(b) => b,
        }
    }

    /// Rewrites the locked state file in place.
    fn save(&mut self) -> Result<(), Failure> {
        let Session::Sim {
            fleet,
            locked: Some(file),
        } = self
        else {
            return Ok(());
        };
        let io = |e: std::io::Error| Failure::new(EXIT_STATE, format!("saving state: {e}"));
        file.set_len(0).map_err(io)?;
        file.seek(SeekFrom::Start(0)).map_err(io)?;
        file.write_all(fleet.to_json().as_bytes()).map_err(io)?;
        file.sync_all().map_err(io)
    }

    /// Two samples `interval` apart. The sim backend advances a private
    /// copy of the fleet, so the state file is untouched.
    fn monitor(
        &self,
        spec: &ClusterSpec,
        interval: f64,
        profile: &BTreeMap<String, u64>,
    ) -> Result<RateReport, Failure> {
        let transport = |e: crate::executor::BackendError| Failure::new(EXIT_STATE, e.to_string());
        let (first, second, state): (TrafficSample, TrafficSample, FleetState) = match self {
            Session::Sim { fleet, .. } => {
                let copy = SimFleet::from_world(fleet.world());
                let first = copy.sample().map_err(transport)?;
                copy.sim_tick(interval, profile)
                    .map_err(|e| Failure::new(EXIT_USAGE, e.to_string()))?;
                let second = copy.sample().map_err(transport)?;
                (first, second, observe(&copy, spec).map_err(transport)?)
            }
            Session::Shell(b) => {
                let first = b.sample().map_err(transport)?;
                std::thread::sleep(std::time::Duration::from_secs_f64(interval));
                let second = b.sample().map_err(transport)?;
                (first, second, observe(b, spec).map_err(transport)?)
            }
        };
        let rates = compute_rates(&first, &second).map_err(|e| Failure::new(EXIT_STATE, e.to_string()))?;
        Ok(RateReport::assemble(spec, &rates, health_check(&state, spec)))
    }
}
