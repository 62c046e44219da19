//! Observed fleet state, desired-vs-observed diffing, and power sequencing.
//!
//! A plan is the list of actions whose satisfaction predicate is false in
//! the observed state, grouped into ten strictly ordered phases. Predicates
//! depend only on the action payload and the target's observation, so the
//! executor can re-check them right before acting.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::configgen::{
    self, fstab_mount_line, gen_alias_guards, gen_base_fstab, gen_env_profile, gen_exports, gen_key_mesh, gen_motd,
    AUTHORIZED_KEYS_PATH, FSTAB_PATH, PUBLIC_KEY_PATH,
};
use crate::executor::{Backend, BackendError, Probe};
use crate::model::{node_partition_plan, validate, AppName, ClusterSpec, PartitionTable, RaidLevel, Violation};

/// Target name for the always-on network gear and UPS.
pub const INFRASTRUCTURE: &str = "infrastructure";

pub const MARKER_RAID: &str = "raid";
pub const MARKER_BASE_OS: &str = "base-os";
pub const MARKER_MONITOR: &str = "monitor";

pub fn app_marker(app: AppName) -> String {
    format!("app:{app}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    P0,
    P1,
    P2,
    P3,
    P4,
    P5,
    P6,
    P7,
    P8,
    P9,
}

impl Phase {
    pub const ALL: [Phase; 10] = [
        Phase::P0,
        Phase::P1,
        Phase::P2,
        Phase::P3,
        Phase::P4,
        Phase::P5,
        Phase::P6,
        Phase::P7,
        Phase::P8,
        Phase::P9,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn description(self) -> &'static str {
        match self {
            Phase::P0 => "power",
            Phase::P1 => "storage layout",
            Phase::P2 => "base install",
            Phase::P3 => "key mesh",
            Phase::P4 => "shared storage",
            Phase::P5 => "users",
            Phase::P6 => "quotas",
            Phase::P7 => "applications",
            Phase::P8 => "aliases and motd",
            Phase::P9 => "monitoring",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", self.index())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerState {
    Off,
    On,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Account {
    pub group: String,
    pub shell: String,
    pub home: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct QuotaUsage {
    pub soft: u64,
    pub hard: u64,
    pub used: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MountEntry {
    pub source: String,
    pub mountpoint: String,
}

/// What one node looks like from the outside. Unreachable nodes carry no sub-state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeObservation {
    pub reachable: bool,
    pub power: PowerState,
    #[serde(default)]
    pub files: BTreeMap<String, String>,
    #[serde(default)]
    pub mounts: BTreeSet<MountEntry>,
    #[serde(default)]
    pub accounts: BTreeMap<String, Account>,
    #[serde(default)]
    pub quota_enabled: bool,
    #[serde(default)]
    pub quotas: BTreeMap<String, QuotaUsage>,
    #[serde(default)]
    pub markers: BTreeSet<String>,
}

impl NodeObservation {
    pub fn unreachable(power: PowerState) -> Self {
        Self {
            reachable: false,
            power,
            files: BTreeMap::new(),
            mounts: BTreeSet::new(),
            accounts: BTreeMap::new(),
            quota_enabled: false,
            quotas: BTreeMap::new(),
            markers: BTreeSet::new(),
        }
    }

    pub fn is_up(&self) -> bool {
        self.reachable && self.power == PowerState::On
    }

    fn file_has_line(&self, path: &str, line: &str) -> bool {
        self.files.get(path).is_some_and(|c| c.lines().any(|l| l == line))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FleetState {
    pub infrastructure: PowerState,
    pub nodes: BTreeMap<String, NodeObservation>,
}

impl FleetState {
    /// A fleet where nothing has been observed yet: every node off.
    pub fn fresh(spec: &ClusterSpec) -> Self {
        Self {
            infrastructure: PowerState::On,
            nodes: spec
                .nodes
                .iter()
                .map(|n| (n.hostname.clone(), NodeObservation::unreachable(PowerState::Off)))
                .collect(),
        }
    }

    pub fn node(&self, host: &str) -> Option<&NodeObservation> {
        self.nodes.get(host)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ActionKind {
    PowerOn,
    PowerOff,
    LayoutStorage,
    InstallBase,
    WriteFile,
    AppendFile,
    Mount,
    PersistMount,
    CreateUser,
    SyncAccounts,
    EnableQuota,
    SetQuota,
    InstallApp,
    EnableMonitor,
}

impl ActionKind {
    /// Phases an action of this kind may appear in.
    pub fn phases(self) -> &'static [Phase] {
        use ActionKind::*;
        match self {
            PowerOn | PowerOff => &[Phase::P0],
            LayoutStorage => &[Phase::P1],
            InstallBase => &[Phase::P2],
            WriteFile => &[Phase::P3, Phase::P4, Phase::P8],
            Mount | PersistMount => &[Phase::P4],
            CreateUser | SyncAccounts => &[Phase::P5],
            EnableQuota | SetQuota => &[Phase::P6],
            AppendFile | InstallApp => &[Phase::P7],
            EnableMonitor => &[Phase::P9],
        }
    }

    fn slug(self) -> &'static str {
        use ActionKind::*;
        match self {
            PowerOn => "power-on",
            PowerOff => "power-off",
            LayoutStorage => "layout-storage",
            InstallBase => "install-base",
            WriteFile => "write-file",
            AppendFile => "append-file",
            Mount => "mount",
            PersistMount => "persist-mount",
            CreateUser => "create-user",
            SyncAccounts => "sync-accounts",
            EnableQuota => "enable-quota",
            SetQuota => "set-quota",
            InstallApp => "install-app",
            EnableMonitor => "enable-monitor",
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

/// Kind-specific payload of an action.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Operation {
    PowerOn,
    PowerOff,
    LayoutStorage {
        raid_level: RaidLevel,
        partitions: PartitionTable,
    },
    InstallBase {
        public_key: String,
        fstab: String,
    },
    WriteFile {
        path: String,
        content: String,
    },
    AppendFile {
        path: String,
        content: String,
    },
    Mount {
        source: String,
        mountpoint: String,
    },
    PersistMount {
        line: String,
    },
    CreateUser {
        username: String,
        account: Account,
    },
    SyncAccounts {
        accounts: BTreeMap<String, Account>,
    },
    EnableQuota {
        path: String,
    },
    SetQuota {
        username: String,
        soft_bytes: u64,
        hard_bytes: u64,
    },
    InstallApp {
        app: AppName,
        install_path: String,
        source_url: String,
    },
    EnableMonitor,
}

impl Operation {
    pub fn kind(&self) -> ActionKind {
        match self {
            Operation::PowerOn => ActionKind::PowerOn,
            Operation::PowerOff => ActionKind::PowerOff,
            Operation::LayoutStorage { .. } => ActionKind::LayoutStorage,
            Operation::InstallBase { .. } => ActionKind::InstallBase,
            Operation::WriteFile { .. } => ActionKind::WriteFile,
            Operation::AppendFile { .. } => ActionKind::AppendFile,
            Operation::Mount { .. } => ActionKind::Mount,
            Operation::PersistMount { .. } => ActionKind::PersistMount,
            Operation::CreateUser { .. } => ActionKind::CreateUser,
            Operation::SyncAccounts { .. } => ActionKind::SyncAccounts,
            Operation::EnableQuota { .. } => ActionKind::EnableQuota,
            Operation::SetQuota { .. } => ActionKind::SetQuota,
            Operation::InstallApp { .. } => ActionKind::InstallApp,
            Operation::EnableMonitor => ActionKind::EnableMonitor,
        }
    }

    /// Short human summary, used in plan listings.
    pub fn summary(&self) -> String {
        match self {
            Operation::PowerOn => "power on".into(),
            Operation::PowerOff => "power off".into(),
            Operation::LayoutStorage { raid_level, partitions } => format!(
                "RAID {} with {} partitions",
                u8::from(*raid_level),
                partitions.entries.len()
            ),
            Operation::InstallBase { .. } => "install base system".into(),
            Operation::WriteFile { path, .. } => format!("write {path}"),
            Operation::AppendFile { path, .. } => format!("append to {path}"),
            Operation::Mount { source, mountpoint } => format!("mount {source} {mountpoint}"),
            Operation::PersistMount { line } => format!("persist `{line}`"),
            Operation::CreateUser { username, .. } => format!("create user {username}"),
            Operation::SyncAccounts { accounts } => {
                format!("sync {} account(s) from master", accounts.len())
            }
            Operation::EnableQuota { path } => format!("enable quotas on {path}"),
            Operation::SetQuota {
                username,
                soft_bytes,
                hard_bytes,
            } => {
                format!("quota {username} soft={soft_bytes} hard={hard_bytes}")
            }
            Operation::InstallApp { app, install_path, .. } => {
                format!("install {app} in {install_path}")
            }
            Operation::EnableMonitor => "enable traffic monitor".into(),
        }
    }

    /// Satisfaction predicate against the target's current observation.
    pub fn is_satisfied(&self, obs: &NodeObservation) -> bool {
        if let Operation::PowerOff = self {
            return obs.power == PowerState::Off;
        }
        if !obs.is_up() {
            return false;
        }
        match self {
            Operation::PowerOn => true,
            Operation::PowerOff => unreachable!(),
            Operation::LayoutStorage { .. } => obs.markers.contains(MARKER_RAID),
            Operation::InstallBase { public_key, .. } => {
                obs.markers.contains(MARKER_BASE_OS)
                    && obs.files.get(PUBLIC_KEY_PATH) == Some(&format!("{public_key}\n"))
            }
            Operation::WriteFile { path, content } => obs.files.get(path) == Some(content),
            Operation::AppendFile { path, content } => obs
                .files
                .get(path)
                .is_some_and(|existing| contains_block(existing, content)),
            Operation::Mount { source, mountpoint } => obs.mounts.contains(&MountEntry {
                source: source.clone(),
                mountpoint: mountpoint.clone(),
            }),
            Operation::PersistMount { line } => obs.file_has_line(FSTAB_PATH, line),
            Operation::CreateUser { username, account } => obs.accounts.get(username) == Some(account),
            Operation::SyncAccounts { accounts } => {
                accounts.iter().all(|(name, acct)| obs.accounts.get(name) == Some(acct))
            }
            Operation::EnableQuota { .. } => obs.quota_enabled,
            Operation::SetQuota {
                username,
                soft_bytes,
                hard_bytes,
            } => obs
                .quotas
                .get(username)
                .is_some_and(|q| q.soft == *soft_bytes && q.hard == *hard_bytes),
            Operation::InstallApp { app, .. } => obs.markers.contains(&app_marker(*app)),
            Operation::EnableMonitor => obs.markers.contains(MARKER_MONITOR),
        }
    }
}

/// True when `block` (whole lines) occurs in `text` starting at a line boundary.
pub fn contains_block(text: &str, block: &str) -> bool {
    if block.is_empty() {
        return true;
    }
    text.match_indices(block)
        .any(|(i, _)| i == 0 || text.as_bytes()[i - 1] == b'\n')
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub id: String,
    pub phase: Phase,
    pub target: String,
    #[serde(flatten)]
    pub op: Operation,
}

impl Action {
    pub fn kind(&self) -> ActionKind {
        self.op.kind()
    }

    pub fn is_infrastructure(&self) -> bool {
        self.target == INFRASTRUCTURE
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub spec_hash: String,
    pub actions: Vec<Action>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlanError {
    #[error("spec is invalid: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidSpec(Vec<Violation>),
    #[error("action {id}: kind {kind} cannot run in phase {phase}")]
    PhaseMismatch { id: String, kind: ActionKind, phase: Phase },
    #[error("action {0} targets a node that is not in the spec")]
    UnknownTarget(String),
    #[error("actions are not in phase order at {0}")]
    Unordered(String),
    #[error("duplicate action {0}")]
    Duplicate(String),
}

impl Plan {
    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn phase_counts(&self) -> BTreeMap<Phase, usize> {
        let mut out = BTreeMap::new();
        for a in &self.actions {
            *out.entry(a.phase).or_insert(0) += 1;
        }
        out
    }

    /// Structural checks for plans read back from disk.
    pub fn check(&self, spec: &ClusterSpec) -> Result<(), PlanError> {
        let mut ids = HashSet::new();
        let mut last: Option<Phase> = None;
        for a in &self.actions {
            if !a.kind().phases().contains(&a.phase) {
                return Err(PlanError::PhaseMismatch {
                    id: a.id.clone(),
                    kind: a.kind(),
                    phase: a.phase,
                });
            }
            if !a.is_infrastructure() && spec.node(&a.target).is_none() {
                return Err(PlanError::UnknownTarget(a.id.clone()));
            }
            if last.is_some_and(|p| p > a.phase) {
                return Err(PlanError::Unordered(a.id.clone()));
            }
            last = Some(a.phase);
            if !ids.insert(a.id.as_str()) {
                return Err(PlanError::Duplicate(a.id.clone()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("plan serializes");
        out.push('\n');
        out
    }
}

/// Orders targets as infrastructure, master, then workers by hostname.
fn target_rank<'a>(spec: &ClusterSpec, target: &'a str) -> (u8, &'a str) {
    if target == INFRASTRUCTURE {
        (0, target)
    } else if spec.node(target).is_some_and(|n| n.is_master()) {
        (1, target)
    } else {
        (2, target)
    }
}

fn sort_actions(spec: &ClusterSpec, actions: &mut [Action]) {
    actions.sort_by(|a, b| {
        (a.phase, target_rank(spec, &a.target), &a.id).cmp(&(b.phase, target_rank(spec, &b.target), &b.id))
    });
}

/// Accumulates actions and assigns ids that are stable across observations:
/// every candidate gets a sequence number before filtering.
struct Builder<'s> {
    spec: &'s ClusterSpec,
    seq: BTreeMap<(Phase, String), usize>,
    seen: HashSet<(String, Operation)>,
    actions: Vec<Action>,
}

impl<'s> Builder<'s> {
    fn new(spec: &'s ClusterSpec) -> Self {
        Self {
            spec,
            seq: BTreeMap::new(),
            seen: HashSet::new(),
            actions: Vec::new(),
        }
    }

    fn push(&mut self, phase: Phase, target: &str, op: Operation) {
        let n = self.seq.entry((phase, target.to_string())).or_insert(0);
        *n += 1;
        let id = format!("{phase}/{target}/{:03}-{}", n, op.kind().slug());
        if self.seen.insert((target.to_string(), op.clone())) {
            self.actions.push(Action {
                id,
                phase,
                target: target.to_string(),
                op,
            });
        }
    }

    fn finish(self) -> Vec<Action> {
        let mut actions = self.actions;
        sort_actions(self.spec, &mut actions);
        actions
    }
}

const APP_INSTALL_ORDER: [AppName; 3] = [AppName::Root, AppName::Geant3, AppName::Aliroot];

/// Every action a converged fleet must satisfy, in plan order.
pub fn desired_actions(spec: &ClusterSpec) -> Vec<Action> {
    let mut b = Builder::new(spec);
    let Some(master) = spec.master() else {
        return Vec::new();
    };
    let storage = &spec.storage;
    let workers: Vec<&str> = spec.workers().map(|n| n.hostname.as_str()).collect();

    b.push(Phase::P0, INFRASTRUCTURE, Operation::PowerOn);
    for node in &spec.nodes {
        b.push(Phase::P0, &node.hostname, Operation::PowerOn);
    }

    for node in &spec.nodes {
        if let Ok(partitions) = node_partition_plan(node, storage) {
            let fstab = gen_base_fstab(&node.hostname, &partitions, &storage.path).content;
            b.push(
                Phase::P1,
                &node.hostname,
                Operation::LayoutStorage {
                    raid_level: node.raid_level,
                    partitions,
                },
            );
            b.push(
                Phase::P2,
                &node.hostname,
                Operation::InstallBase {
                    public_key: node.public_key_line(),
                    fstab,
                },
            );
        }
    }

    let keys: BTreeMap<String, String> = spec
        .nodes
        .iter()
        .map(|n| (n.hostname.clone(), n.public_key_line()))
        .collect();
    if let Ok(mesh) = gen_key_mesh(spec.nodes.iter().map(|n| n.hostname.as_str()), &keys) {
        for (host, content) in mesh.authorized_content {
            b.push(
                Phase::P3,
                &host,
                Operation::WriteFile {
                    path: AUTHORIZED_KEYS_PATH.to_string(),
                    content,
                },
            );
        }
    }

    if let Ok(exports) = gen_exports(storage, &workers) {
        b.push(
            Phase::P4,
            &master.hostname,
            Operation::WriteFile {
                path: exports.target_path,
                content: exports.content,
            },
        );
        let source = format!("{}:{}", master.hostname, storage.path);
        for w in &workers {
            b.push(
                Phase::P4,
                w,
                Operation::Mount {
                    source: source.clone(),
                    mountpoint: storage.mountpoint_on_workers.clone(),
                },
            );
            if let Some(ip) = master.internal_ip() {
                b.push(
                    Phase::P4,
                    w,
                    Operation::PersistMount {
                        line: fstab_mount_line(ip, &storage.path, &storage.mountpoint_on_workers),
                    },
                );
            }
        }
    }

    if !spec.users.is_empty() {
        let accounts: BTreeMap<String, Account> = spec
            .users
            .iter()
            .map(|u| {
                (
                    u.username.clone(),
                    Account {
                        group: u.group.clone(),
                        shell: u.shell.clone(),
                        home: u.home.clone(),
                    },
                )
            })
            .collect();
        for u in &spec.users {
            b.push(
                Phase::P5,
                &master.hostname,
                Operation::CreateUser {
                    username: u.username.clone(),
                    account: accounts[&u.username].clone(),
                },
            );
        }
        for w in &workers {
            b.push(
                Phase::P5,
                w,
                Operation::SyncAccounts {
                    accounts: accounts.clone(),
                },
            );
        }
    }

    if let Ok(commands) = configgen::gen_quota_commands(storage, &spec.users) {
        b.push(
            Phase::P6,
            &master.hostname,
            Operation::EnableQuota {
                path: storage.path.clone(),
            },
        );
        for cmd in commands {
            if let configgen::QuotaCommand::SetQuota {
                user,
                soft_bytes,
                hard_bytes,
                ..
            } = cmd
            {
                b.push(
                    Phase::P6,
                    &master.hostname,
                    Operation::SetQuota {
                        username: user,
                        soft_bytes,
                        hard_bytes,
                    },
                );
            }
        }
    }

    if let Ok(profile) = gen_env_profile(&spec.apps, &storage.path) {
        for node in &spec.nodes {
            b.push(
                Phase::P7,
                &node.hostname,
                Operation::AppendFile {
                    path: profile.target_path.clone(),
                    content: profile.content.clone(),
                },
            );
        }
        for name in APP_INSTALL_ORDER {
            if let Some(app) = spec.apps.iter().find(|a| a.name == name) {
                b.push(
                    Phase::P7,
                    &master.hostname,
                    Operation::InstallApp {
                        app: app.name,
                        install_path: app.install_path.clone(),
                        source_url: app.source_url.clone(),
                    },
                );
            }
        }
    }

    if let Ok(aliases) = gen_alias_guards(&spec.alias_guards, &spec.motd.worker_range) {
        b.push(
            Phase::P8,
            &master.hostname,
            Operation::WriteFile {
                path: aliases.target_path,
                content: aliases.content,
            },
        );
    }
    let motd = gen_motd(&spec.motd);
    b.push(
        Phase::P8,
        &master.hostname,
        Operation::WriteFile {
            path: motd.target_path,
            content: motd.content,
        },
    );

    for node in &spec.nodes {
        b.push(Phase::P9, &node.hostname, Operation::EnableMonitor);
    }

    b.finish()
}

/// Whether `action` already holds in `state`.
pub fn action_satisfied(action: &Action, state: &FleetState) -> bool {
    if action.is_infrastructure() {
        return match action.op {
            Operation::PowerOn => state.infrastructure == PowerState::On,
            _ => false,
        };
    }
    state
        .node(&action.target)
        .is_some_and(|obs| action.op.is_satisfied(obs))
}

/// Actions whose postcondition does not hold in `state`, in plan order.
pub fn diff(spec: &ClusterSpec, state: &FleetState) -> Result<Plan, PlanError> {
    let report = validate(spec);
    if !report.is_valid() {
        return Err(PlanError::InvalidSpec(report.violations));
    }
    let mut warnings = Vec::new();
    for node in &spec.nodes {
        match state.node(&node.hostname) {
            Some(obs) if obs.is_up() => {}
            Some(obs) => warnings.push(format!(
                "{} is unreachable (power {}); planning power-on",
                node.hostname,
                match obs.power {
                    PowerState::Off => "off",
                    PowerState::On => "on",
                    PowerState::Unknown => "unknown",
                }
            )),
            None => warnings.push(format!("{} was not observed; planning power-on", node.hostname)),
        }
    }
    let actions = desired_actions(spec)
        .into_iter()
        .filter(|a| !action_satisfied(a, state))
        .collect();
    Ok(Plan {
        spec_hash: spec.content_hash(),
        actions,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PowerDirection {
    Start,
    Stop,
}

/// Start powers infrastructure, then the master, then workers by hostname.
/// Stop is the exact reverse over nodes; infrastructure is never powered off.
pub fn power_sequence(direction: PowerDirection, spec: &ClusterSpec) -> Vec<Action> {
    let mut nodes: Vec<&str> = Vec::new();
    if let Some(m) = spec.master() {
        nodes.push(&m.hostname);
    }
    let mut workers: Vec<&str> = spec.workers().map(|n| n.hostname.as_str()).collect();
    workers.sort_unstable();
    nodes.extend(workers);

    let action = |target: &str, op: Operation| Action {
        id: format!("P0/{target}/{}", op.kind().slug()),
        phase: Phase::P0,
        target: target.to_string(),
        op,
    };
    match direction {
        PowerDirection::Start => std::iter::once(action(INFRASTRUCTURE, Operation::PowerOn))
            .chain(nodes.iter().map(|n| action(n, Operation::PowerOn)))
            .collect(),
        PowerDirection::Stop => nodes.iter().rev().map(|n| action(n, Operation::PowerOff)).collect(),
    }
}

/// Manual steps that accompany a power sequence.
pub fn power_notes(direction: PowerDirection) -> &'static [&'static str] {
    match direction {
        PowerDirection::Start => &["switch on the UPS before powering any node"],
        PowerDirection::Stop => &[
            "switch off the UPS once the master is down",
            "leave the router and switches powered on",
        ],
    }
}

/// Reads every node's state. Unreachable nodes are flagged, not errors; only
/// a transport failure of the backend itself fails the observation.
pub fn observe<B: Backend + ?Sized>(backend: &B, spec: &ClusterSpec) -> Result<FleetState, BackendError> {
    let probe = Probe::for_spec(spec);
    let infrastructure = backend.infrastructure_power()?;
    let mut hosts: Vec<&str> = spec.nodes.iter().map(|n| n.hostname.as_str()).collect();
    hosts.sort_unstable();
    let results: Vec<(String, Result<NodeObservation, BackendError>)> = std::thread::scope(|s| {
        let handles: Vec<_> = hosts
            .iter()
            .map(|h| {
                let probe = &probe;
                s.spawn(move || (h.to_string(), backend.read_state(h, probe)))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("observer thread panicked"))
            .collect()
    });
    let mut nodes = BTreeMap::new();
    for (host, result) in results {
        let obs = match result {
            Ok(obs) => obs,
            Err(BackendError::Unreachable(_)) => NodeObservation::unreachable(PowerState::Unknown),
            Err(e) => return Err(e),
        };
        nodes.insert(host, obs);
    }
    Ok(FleetState { infrastructure, nodes })
}
