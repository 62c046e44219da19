//! Plan execution over a pluggable backend.
//!
//! Every action is checked against a fresh observation of its target right
//! before it runs, so re-applying a plan on a converged fleet touches nothing.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::configgen::{
    ALIASES_PATH, AUTHORIZED_KEYS_PATH, EXPORTS_PATH, FSTAB_PATH, MOTD_PATH, PROFILE_PATH, PUBLIC_KEY_PATH,
};
use crate::model::ClusterSpec;
use crate::planner::{
    app_marker, diff, observe, Account, Action, ActionKind, NodeObservation, Operation, Phase, Plan, PowerState,
    INFRASTRUCTURE, MARKER_BASE_OS, MARKER_RAID,
};

pub const DEFAULT_MAX_PARALLEL: usize = 4;

/// Result of a capability call that succeeded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Changed,
    Unchanged,
}

impl Outcome {
    pub fn merge(self, other: Outcome) -> Outcome {
        if self == Outcome::Changed || other == Outcome::Changed {
            Outcome::Changed
        } else {
            Outcome::Unchanged
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("{0} is unreachable")]
    Unreachable(String),
    #[error("{0} is powered off")]
    PoweredOff(String),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("{node}: {message}")]
    Rejected { node: String, message: String },
    #[error("{node}: injected failure in {capability}")]
    Injected { node: String, capability: Capability },
    #[error("transport failure: {0}")]
    Transport(String),
}

/// The mutating calls a backend offers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    Power,
    WriteFile,
    AppendFile,
    Mount,
    CreateUser,
    EnableQuota,
    SetQuota,
    SetMarker,
    EnableMonitor,
}

impl std::fmt::Display for Capability {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = serde_json::to_value(self).expect("capability serializes");
        f.write_str(s.as_str().unwrap_or_default())
    }
}

/// Paths and users a backend should report on when reading node state.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Probe {
    pub files: Vec<String>,
    pub users: Vec<String>,
    pub storage_path: String,
}

impl Probe {
    pub fn for_spec(spec: &ClusterSpec) -> Self {
        Self {
            files: [
                PUBLIC_KEY_PATH,
                AUTHORIZED_KEYS_PATH,
                EXPORTS_PATH,
                FSTAB_PATH,
                PROFILE_PATH,
                ALIASES_PATH,
                MOTD_PATH,
            ]
            .map(String::from)
            .to_vec(),
            users: spec.users.iter().map(|u| u.username.clone()).collect(),
            storage_path: spec.storage.path.clone(),
        }
    }
}

/// Contract shared by the simulated fleet and real transports. Every
/// mutating capability is idempotent; calls on distinct nodes may run
/// concurrently.
pub trait Backend: Sync {
    fn infrastructure_power(&self) -> Result<PowerState, BackendError>;
    fn read_state(&self, node: &str, probe: &Probe) -> Result<NodeObservation, BackendError>;
    /// `target` is a hostname or [`INFRASTRUCTURE`](crate::planner::INFRASTRUCTURE).
    fn power(&self, target: &str, on: bool) -> Result<Outcome, BackendError>;
    fn write_file(&self, node: &str, path: &str, content: &str) -> Result<Outcome, BackendError>;
    /// Appends unless `content` is already present as a block of whole lines.
    fn append_file(&self, node: &str, path: &str, content: &str) -> Result<Outcome, BackendError>;
    fn mount(&self, node: &str, source: &str, mountpoint: &str) -> Result<Outcome, BackendError>;
    fn create_user(&self, node: &str, username: &str, account: &Account) -> Result<Outcome, BackendError>;
    fn enable_quota(&self, node: &str, path: &str) -> Result<Outcome, BackendError>;
    fn set_quota(&self, node: &str, username: &str, soft: u64, hard: u64) -> Result<Outcome, BackendError>;
    fn set_marker(&self, node: &str, marker: &str) -> Result<Outcome, BackendError>;
    fn enable_monitor(&self, node: &str) -> Result<Outcome, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ApplyOptions {
    pub dry_run: bool,
    pub max_parallel_nodes: usize,
}

impl Default for ApplyOptions {
    fn default() -> Self {
        Self {
            dry_run: false,
            max_parallel_nodes: DEFAULT_MAX_PARALLEL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionStatus {
    Applied,
    AlreadySatisfied,
    Failed,
    /// Not attempted because an earlier step failed or the plan was aborted.
    Skipped,
    WouldApply,
}

impl std::fmt::Display for ActionStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ActionStatus::Applied => "applied",
            ActionStatus::AlreadySatisfied => "already-satisfied",
            ActionStatus::Failed => "failed",
            ActionStatus::Skipped => "skipped",
            ActionStatus::WouldApply => "would-apply",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStatus {
    Converged,
    Partial,
    Aborted,
    DryRun,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionResult {
    pub id: String,
    pub phase: Phase,
    pub target: String,
    pub kind: ActionKind,
    pub status: ActionStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub wall_time_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub status: PlanStatus,
    pub results: Vec<ActionResult>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl ExecutionReport {
    pub fn count(&self, status: ActionStatus) -> usize {
        self.results.iter().filter(|r| r.status == status).count()
    }

    pub fn failed(&self) -> impl Iterator<Item = &ActionResult> {
        self.results.iter().filter(|r| r.status == ActionStatus::Failed)
    }
}

fn result_for(action: &Action, status: ActionStatus, error: Option<String>, started: Option<Instant>) -> ActionResult {
    ActionResult {
        id: action.id.clone(),
        phase: action.phase,
        target: action.target.clone(),
        kind: action.kind(),
        status,
        error,
        wall_time_us: started.map_or(0, |t| t.elapsed().as_micros() as u64),
    }
}

/// Maps an operation onto backend capabilities.
fn perform<B: Backend + ?Sized>(backend: &B, target: &str, op: &Operation) -> Result<Outcome, BackendError> {
    use Outcome::Unchanged;
    match op {
        Operation::PowerOn => backend.power(target, true),
        Operation::PowerOff => backend.power(target, false),
        Operation::LayoutStorage { .. } => backend.set_marker(target, MARKER_RAID),
        Operation::InstallBase { public_key, fstab } => {
            // The base fstab is laid down once; later phases edit it in place.
            let probe = Probe {
                files: vec![FSTAB_PATH.to_string()],
                ..Probe::default()
            };
            let a = if backend.read_state(target, &probe)?.files.contains_key(FSTAB_PATH) {
                Unchanged
            } else {
                backend.write_file(target, FSTAB_PATH, fstab)?
            };
            let b = backend.write_file(target, PUBLIC_KEY_PATH, &format!("{public_key}\n"))?;
            let c = backend.set_marker(target, MARKER_BASE_OS)?;
            Ok(a.merge(b).merge(c))
        }
        Operation::WriteFile { path, content } => backend.write_file(target, path, content),
        Operation::AppendFile { path, content } => backend.append_file(target, path, content),
        Operation::Mount { source, mountpoint } => backend.mount(target, source, mountpoint),
        Operation::PersistMount { line } => backend.append_file(target, FSTAB_PATH, &format!("{line}\n")),
        Operation::CreateUser { username, account } => backend.create_user(target, username, account),
        Operation::SyncAccounts { accounts } => accounts.iter().try_fold(Unchanged, |acc, (name, a)| {
            Ok(acc.merge(backend.create_user(target, name, a)?))
        }),
        Operation::EnableQuota { path } => backend.enable_quota(target, path),
        Operation::SetQuota {
            username,
            soft_bytes,
            hard_bytes,
        } => backend.set_quota(target, username, *soft_bytes, *hard_bytes),
        Operation::InstallApp { app, .. } => backend.set_marker(target, &app_marker(*app)),
        Operation::EnableMonitor => backend.enable_monitor(target),
    }
}

/// Check-then-act for a single action.
fn run_action<B: Backend + ?Sized>(backend: &B, probe: &Probe, action: &Action) -> ActionResult {
    let started = Instant::now();
    let satisfied = if action.is_infrastructure() {
        match (&action.op, backend.infrastructure_power()) {
            (Operation::PowerOn, Ok(PowerState::On)) => Ok(true),
            (Operation::PowerOff, Ok(PowerState::Off)) => Ok(true),
            (_, Ok(_)) => Ok(false),
            (_, Err(e)) => Err(e),
        }
    } else {
        match backend.read_state(&action.target, probe) {
            Ok(obs) => Ok(action.op.is_satisfied(&obs)),
            // Powering on is exactly what an unreachable node may need.
            Err(BackendError::Unreachable(_)) if action.kind() == ActionKind::PowerOn => Ok(false),
            Err(e) => Err(e),
        }
    };
    let outcome = match satisfied {
        Ok(true) => return result_for(action, ActionStatus::AlreadySatisfied, None, Some(started)),
        Ok(false) => perform(backend, &action.target, &action.op),
        Err(e) => Err(e),
    };
    match outcome {
        Ok(Outcome::Changed) => result_for(action, ActionStatus::Applied, None, Some(started)),
        Ok(Outcome::Unchanged) => result_for(action, ActionStatus::AlreadySatisfied, None, Some(started)),
        Err(e) => result_for(action, ActionStatus::Failed, Some(e.to_string()), Some(started)),
    }
}

/// Infrastructure, then the master, then workers.
fn tier(spec: &ClusterSpec, target: &str) -> u8 {
    if target == INFRASTRUCTURE {
        0
    } else if spec.node(target).is_some_and(|n| n.is_master()) {
        1
    } else {
        2
    }
}

/// Runs one tier of a phase: targets in parallel (bounded), actions per
/// target serially.
fn run_phase<B: Backend + ?Sized>(
    backend: &B,
    probe: &Probe,
    actions: &[(usize, &Action)],
    max_parallel: usize,
) -> Vec<(usize, ActionResult)> {
    let mut groups: BTreeMap<&str, Vec<(usize, &Action)>> = BTreeMap::new();
    for &(i, a) in actions {
        groups.entry(a.target.as_str()).or_default().push((i, a));
    }
    let groups: Vec<Vec<(usize, &Action)>> = groups.into_values().collect();
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::with_capacity(actions.len()));
    let workers = max_parallel.max(1).min(groups.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let g = next.fetch_add(1, Ordering::SeqCst);
                let Some(group) = groups.get(g) else { break };
                let mut local = Vec::with_capacity(group.len());
                let mut failed = false;
                for &(i, action) in group {
                    let r = if failed {
                        result_for(action, ActionStatus::Skipped, None, None)
                    } else {
                        run_action(backend, probe, action)
                    };
                    failed |= r.status == ActionStatus::Failed;
                    local.push((i, r));
                }
                results.lock().expect("results lock").extend(local);
            });
        }
    });
    results.into_inner().expect("results lock")
}

/// Applies `plan` phase by phase. A failure lets the current phase finish on
/// other nodes and skips every later phase.
pub fn apply<B: Backend + ?Sized>(
    spec: &ClusterSpec,
    plan: &Plan,
    backend: &B,
    options: ApplyOptions,
) -> ExecutionReport {
    let skipped = |notes: Vec<String>, status| ExecutionReport {
        status,
        results: plan
            .actions
            .iter()
            .map(|a| result_for(a, ActionStatus::Skipped, None, None))
            .collect(),
        notes,
    };
    if plan.spec_hash != spec.content_hash() {
        return skipped(
            vec!["plan was computed from a different spec; re-run plan".to_string()],
            PlanStatus::Aborted,
        );
    }
    if let Err(e) = plan.check(spec) {
        return skipped(vec![format!("malformed plan: {e}")], PlanStatus::Aborted);
    }
    if options.dry_run {
        return ExecutionReport {
            status: PlanStatus::DryRun,
            results: plan
                .actions
                .iter()
                .map(|a| result_for(a, ActionStatus::WouldApply, None, None))
                .collect(),
            notes: Vec::new(),
        };
    }

    let probe = Probe::for_spec(spec);
    let mut slots: Vec<Option<ActionResult>> = vec![None; plan.actions.len()];
    let mut failed_phase = None;
    for phase in Phase::ALL {
        let in_phase: Vec<(usize, &Action)> = plan
            .actions
            .iter()
            .enumerate()
            .filter(|(_, a)| a.phase == phase)
            .collect();
        if in_phase.is_empty() {
            continue;
        }
        // Workers depend on the master within a phase (exports before
        // mounts, accounts before sync), so tiers run one after another.
        let mut tiers: BTreeMap<u8, Vec<(usize, &Action)>> = BTreeMap::new();
        for (i, a) in in_phase {
            tiers.entry(tier(spec, &a.target)).or_default().push((i, a));
        }
        for group in tiers.into_values() {
            if failed_phase.is_some() {
                for (i, a) in group {
                    slots[i] = Some(result_for(a, ActionStatus::Skipped, None, None));
                }
                continue;
            }
            for (i, r) in run_phase(backend, &probe, &group, options.max_parallel_nodes) {
                if r.status == ActionStatus::Failed {
                    failed_phase = Some(phase);
                }
                slots[i] = Some(r);
            }
        }
    }
    let results: Vec<ActionResult> = slots
        .into_iter()
        .map(|r| r.expect("every action has a result"))
        .collect();

    let mut notes = Vec::new();
    let status = if let Some(phase) = failed_phase {
        notes.push(format!("phase {phase} failed; later phases were not attempted"));
        PlanStatus::Partial
    } else {
        match observe(backend, spec).map(|state| diff(spec, &state)) {
            Ok(Ok(rest)) if rest.is_empty() => PlanStatus::Converged,
            Ok(Ok(rest)) => {
                notes.push(format!("{} action(s) still pending after apply", rest.actions.len()));
                PlanStatus::Partial
            }
            Ok(Err(e)) => {
                notes.push(e.to_string());
                PlanStatus::Partial
            }
            Err(e) => {
                notes.push(format!("post-apply observation failed: {e}"));
                PlanStatus::Partial
            }
        }
    };
    ExecutionReport { status, results, notes }
}

/// Runs a power sequence strictly in order, stopping at the first failure.
pub fn run_power<B: Backend + ?Sized>(sequence: &[Action], backend: &B) -> ExecutionReport {
    let probe = Probe::default();
    let mut results = Vec::with_capacity(sequence.len());
    let mut failed = false;
    for action in sequence {
        let r = if failed {
            result_for(action, ActionStatus::Skipped, None, None)
        } else {
            run_action(backend, &probe, action)
        };
        failed |= r.status == ActionStatus::Failed;
        results.push(r);
    }
    ExecutionReport {
        status: if failed {
            PlanStatus::Partial
        } else {
            PlanStatus::Converged
        },
        results,
        notes: Vec::new(),
    }
}
