//! In-memory node fleet implementing [`Backend`].
//!
//! The master owns a [`SharedStore`] that workers see through NFS-style
//! mounts. Per-user usage is tracked incrementally so quota accounting can
//! be checked against the stored bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::{Mutex, MutexGuard};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::configgen::{add_usrquota, EXPORTS_PATH, FSTAB_PATH};
use crate::executor::{Backend, BackendError, Capability, Outcome, Probe};
use crate::model::{is_absolute_path, ClusterSpec, Role};
use crate::monitor::{CounterSource, InterfaceCounters, Scalar, TrafficSample};
use crate::planner::{
    contains_block, Account, MountEntry, NodeObservation, PowerState, QuotaUsage, INFRASTRUCTURE, MARKER_MONITOR,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counter {
    pub rx_bytes: u64,
    pub tx_bytes: u64,
    /// Sub-byte remainder in byte-nanoseconds, so split ticks add up exactly.
    #[serde(default)]
    pub carry: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimNode {
    pub hostname: String,
    pub role: Role,
    pub power: PowerState,
    pub local_files: BTreeMap<String, String>,
    pub mounts: BTreeSet<MountEntry>,
    pub accounts: BTreeMap<String, Account>,
    pub quota_enabled: bool,
    /// username -> (soft, hard)
    pub quota_limits: BTreeMap<String, (u64, u64)>,
    pub markers: BTreeSet<String>,
    pub interface_counters: BTreeMap<String, Counter>,
}

impl SimNode {
    fn is_on(&self) -> bool {
        self.power == PowerState::On
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredFile {
    pub owner: String,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedStore {
    pub owner: String,
    pub root: String,
    pub files: BTreeMap<String, StoredFile>,
    /// Bytes held per user; must equal the sum over that user's files.
    pub usage: BTreeMap<String, u64>,
}

impl SharedStore {
    pub fn bytes_owned_by(&self, user: &str) -> u64 {
        self.files
            .values()
            .filter(|f| f.owner == user)
            .map(|f| f.bytes.len() as u64)
            .sum()
    }

    pub fn conservation_holds(&self) -> bool {
        let owners: BTreeSet<&str> = self
            .files
            .values()
            .map(|f| f.owner.as_str())
            .chain(self.usage.keys().map(String::as_str))
            .collect();
        owners
            .into_iter()
            .all(|u| self.usage.get(u).copied().unwrap_or(0) == self.bytes_owned_by(u))
    }
}

/// Persistent part of the simulation: everything except faults and the event log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimWorld {
    pub infrastructure_on: bool,
    pub clock_ns: u64,
    pub nodes: BTreeMap<String, SimNode>,
    pub store: SharedStore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// The node stops answering until healed.
    Unreachable,
    /// The next capability call (optionally only of one kind) fails.
    FailNextCapability(Option<Capability>),
    /// Power drops immediately; mounts are lost.
    Crash,
}

#[derive(Debug, Clone, Default)]
struct FaultState {
    unreachable: bool,
    fail_next: Vec<Option<Capability>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Event {
    pub seq: u64,
    pub node: String,
    pub capability: Capability,
    pub detail: String,
    pub changed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("{0} is powered off")]
    PoweredOff(String),
    #[error("{0} is unreachable")]
    Unreachable(String),
    #[error("{node}: no mount covers {path}")]
    NoMount { node: String, path: String },
    #[error("{node}: unknown user {user}")]
    UnknownUser { node: String, user: String },
    #[error("quota exceeded for {user}: {used} used + {delta} requested > {hard} hard limit")]
    QuotaExceeded {
        user: String,
        used: u64,
        delta: u64,
        hard: u64,
    },
    #[error("tick duration must be a finite, non-negative number of seconds")]
    InvalidDuration,
    #[error("state file: {0}")]
    State(String),
}

struct Inner {
    world: SimWorld,
    faults: BTreeMap<String, FaultState>,
    events: Vec<Event>,
}

pub struct SimFleet {
    inner: Mutex<Inner>,
}

impl SimFleet {
    /// Every node powered off with empty disks; network gear on.
    pub fn from_spec(spec: &ClusterSpec) -> Self {
        let nodes = spec
            .nodes
            .iter()
            .map(|n| {
                let node = SimNode {
                    hostname: n.hostname.clone(),
                    role: n.role,
                    power: PowerState::Off,
                    local_files: BTreeMap::new(),
                    mounts: BTreeSet::new(),
                    accounts: BTreeMap::new(),
                    quota_enabled: false,
                    quota_limits: BTreeMap::new(),
                    markers: BTreeSet::new(),
                    interface_counters: n
                        .interfaces
                        .iter()
                        .map(|i| (i.name.clone(), Counter::default()))
                        .collect(),
                };
                (n.hostname.clone(), node)
            })
            .collect();
        let owner = spec.master().map(|m| m.hostname.clone()).unwrap_or_default();
        Self::from_world(SimWorld {
            infrastructure_on: true,
            clock_ns: 0,
            nodes,
            store: SharedStore {
                owner,
                root: spec.storage.path.clone(),
                files: BTreeMap::new(),
                usage: BTreeMap::new(),
            },
        })
    }

    pub fn from_world(world: SimWorld) -> Self {
        Self {
            inner: Mutex::new(Inner {
                world,
                faults: BTreeMap::new(),
                events: Vec::new(),
            }),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn world(&self) -> SimWorld {
        self.lock().world.clone()
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(&self.lock().world).expect("world serializes");
        out.push('\n');
        out
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let world: SimWorld = serde_json::from_str(text).map_err(|e| SimError::State(e.to_string()))?;
        Ok(Self::from_world(world))
    }

    pub fn save(&self, path: &Path) -> Result<(), SimError> {
        std::fs::write(path, self.to_json()).map_err(|e| SimError::State(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::State(e.to_string()))?;
        Self::from_json(&text)
    }

    /// Hash over the persistent state (not faults or events).
    pub fn state_hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.lock().world).expect("world serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn events(&self) -> Vec<Event> {
        self.lock().events.clone()
    }

    pub fn clear_events(&self) {
        self.lock().events.clear();
    }

    pub fn inject_fault(&self, node: &str, fault: Fault) -> Result<(), SimError> {
        let mut inner = self.lock();
        let Some(n) = inner.world.nodes.get_mut(node) else {
            return Err(SimError::UnknownNode(node.to_string()));
        };
        match fault {
            Fault::Crash => {
                n.power = PowerState::Off;
                n.mounts.clear();
            }
            Fault::Unreachable => inner.faults.entry(node.to_string()).or_default().unreachable = true,
            Fault::FailNextCapability(cap) => inner.faults.entry(node.to_string()).or_default().fail_next.push(cap),
        }
        Ok(())
    }

    /// Clears every pending fault on `node`.
    pub fn heal(&self, node: &str) {
        self.lock().faults.remove(node);
    }

    /// Drops a node's NFS mounts without powering it off.
    pub fn unmount_all(&self, node: &str) -> Result<(), SimError> {
        let mut inner = self.lock();
        let n = inner
            .world
            .nodes
            .get_mut(node)
            .ok_or_else(|| SimError::UnknownNode(node.to_string()))?;
        n.mounts.clear();
        Ok(())
    }

    pub fn quota_conservation_holds(&self) -> bool {
        self.lock().world.store.conservation_holds()
    }

    pub fn usage(&self, user: &str) -> u64 {
        self.lock().world.store.usage.get(user).copied().unwrap_or(0)
    }

    /// Writes `bytes` as `user` at `path` as seen from `node`. Enforces the
    /// hard limit atomically when quotas are on.
    pub fn sim_write(&self, node: &str, user: &str, path: &str, bytes: &[u8]) -> Result<(), SimError> {
        let mut inner = self.lock();
        let world = &mut inner.world;
        let store_path = resolve(world, node, path)?;
        let n = &world.nodes[node];
        if !n.accounts.contains_key(user) {
            return Err(SimError::UnknownUser {
                node: node.to_string(),
                user: user.to_string(),
            });
        }
        let store = &world.store;
        let owner = &world.nodes[&store.owner];
        let old = store.files.get(&store_path);
        let reclaimed = old.filter(|f| f.owner == user).map_or(0, |f| f.bytes.len() as u64);
        let used = store.usage.get(user).copied().unwrap_or(0);
        let new_used = used - reclaimed + bytes.len() as u64;
        if owner.quota_enabled {
            if let Some(&(_, hard)) = owner.quota_limits.get(user) {
                if hard > 0 && new_used > hard {
                    return Err(SimError::QuotaExceeded {
                        user: user.to_string(),
                        used,
                        delta: (bytes.len() as u64).saturating_sub(reclaimed),
                        hard,
                    });
                }
            }
        }
        let store = &mut world.store;
        if let Some(prev) = store.files.get(&store_path) {
            let prev_owner = prev.owner.clone();
            let prev_len = prev.bytes.len() as u64;
            if let Some(u) = store.usage.get_mut(&prev_owner) {
                *u -= prev_len;
            }
        }
        *store.usage.entry(user.to_string()).or_insert(0) += bytes.len() as u64;
        store.files.insert(
            store_path,
            StoredFile {
                owner: user.to_string(),
                bytes: bytes.to_vec(),
            },
        );
        Ok(())
    }

    pub fn sim_read(&self, node: &str, path: &str) -> Result<Option<Vec<u8>>, SimError> {
        let inner = self.lock();
        let store_path = resolve(&inner.world, node, path)?;
        Ok(inner.world.store.files.get(&store_path).map(|f| f.bytes.clone()))
    }

    /// Advances the clock and the counters of every powered node in
    /// `profile` (bytes per second, applied to rx and tx of each interface).
    pub fn sim_tick(&self, seconds: f64, profile: &BTreeMap<String, u64>) -> Result<(), SimError> {
        let d = Duration::try_from_secs_f64(seconds).map_err(|_| SimError::InvalidDuration)?;
        let nanos = d.as_nanos();
        let mut inner = self.lock();
        let world = &mut inner.world;
        world.clock_ns += nanos as u64;
        for (host, &rate) in profile {
            let Some(node) = world.nodes.get_mut(host) else {
                return Err(SimError::UnknownNode(host.clone()));
            };
            if !node.is_on() {
                continue;
            }
            for c in node.interface_counters.values_mut() {
                let total = u128::from(c.carry) + u128::from(rate) * nanos;
                let whole = (total / 1_000_000_000) as u64;
                c.carry = (total % 1_000_000_000) as u64;
                c.rx_bytes += whole;
                c.tx_bytes += whole;
            }
        }
        Ok(())
    }

    pub fn counters(&self, node: &str) -> Option<BTreeMap<String, Counter>> {
        self.lock().world.nodes.get(node).map(|n| n.interface_counters.clone())
    }

    fn mutate(
        &self,
        node: &str,
        capability: Capability,
        detail: impl Into<String>,
        f: impl FnOnce(&mut SimWorld) -> Result<Outcome, BackendError>,
    ) -> Result<Outcome, BackendError> {
        let mut inner = self.lock();
        gate(&mut inner, node, capability)?;
        let outcome = f(&mut inner.world)?;
        let seq = inner.events.len() as u64;
        inner.events.push(Event {
            seq,
            node: node.to_string(),
            capability,
            detail: detail.into(),
            changed: outcome == Outcome::Changed,
        });
        Ok(outcome)
    }
}

/// Maps a node-visible path to its key in the shared store.
fn resolve(world: &SimWorld, node: &str, path: &str) -> Result<String, SimError> {
    let n = world
        .nodes
        .get(node)
        .ok_or_else(|| SimError::UnknownNode(node.to_string()))?;
    if !n.is_on() {
        return Err(SimError::PoweredOff(node.to_string()));
    }
    let store = &world.store;
    let no_mount = || SimError::NoMount {
        node: node.to_string(),
        path: path.to_string(),
    };
    if !is_absolute_path(path) {
        return Err(no_mount());
    }
    let under = |root: &str| -> Option<String> {
        let rest = path.strip_prefix(root)?;
        (rest.starts_with('/') && rest.len() > 1).then(|| rest.to_string())
    };
    if node == store.owner {
        return under(&store.root).map(|_| path.to_string()).ok_or_else(no_mount);
    }
    let source = format!("{}:{}", store.owner, store.root);
    n.mounts
        .iter()
        .filter(|m| m.source == source)
        .find_map(|m| under(&m.mountpoint))
        .map(|rest| format!("{}{rest}", store.root))
        .ok_or_else(no_mount)
}

fn gate(inner: &mut Inner, node: &str, capability: Capability) -> Result<(), BackendError> {
    if node == INFRASTRUCTURE {
        return Ok(());
    }
    let Some(n) = inner.world.nodes.get(node) else {
        return Err(BackendError::UnknownNode(node.to_string()));
    };
    if let Some(f) = inner.faults.get_mut(node) {
        if f.unreachable {
            return Err(BackendError::Unreachable(node.to_string()));
        }
        if let Some(pos) = f.fail_next.iter().position(|c| c.is_none_or(|c| c == capability)) {
            f.fail_next.remove(pos);
            return Err(BackendError::Injected {
                node: node.to_string(),
                capability,
            });
        }
    }
    if capability != Capability::Power && !n.is_on() {
        return Err(BackendError::PoweredOff(node.to_string()));
    }
    Ok(())
}

fn rejected(node: &str, message: impl Into<String>) -> BackendError {
    BackendError::Rejected {
        node: node.to_string(),
        message: message.into(),
    }
}

fn node_mut<'w>(world: &'w mut SimWorld, node: &str) -> &'w mut SimNode {
    world.nodes.get_mut(node).expect("gate checked node exists")
}

fn set_if_changed<T: PartialEq>(slot: &mut T, value: T) -> Outcome {
    if *slot == value {
        Outcome::Unchanged
    } else {
        *slot = value;
        Outcome::Changed
    }
}

/// Whether the master's exports grant `client` access to `root`.
fn exports_grant(exports: &str, root: &str, client: &str) -> bool {
    let prefix = format!("{client}(");
    exports.lines().any(|line| {
        let mut tokens = line.split_whitespace();
        tokens.next() == Some(root) && tokens.any(|t| t.starts_with(&prefix))
    })
}

impl Backend for SimFleet {
    fn infrastructure_power(&self) -> Result<PowerState, BackendError> {
        Ok(if self.lock().world.infrastructure_on {
            PowerState::On
        } else {
            PowerState::Off
        })
    }

    fn read_state(&self, node: &str, _probe: &Probe) -> Result<NodeObservation, BackendError> {
        let inner = self.lock();
        let Some(n) = inner.world.nodes.get(node) else {
            return Err(BackendError::UnknownNode(node.to_string()));
        };
        if inner.faults.get(node).is_some_and(|f| f.unreachable) {
            return Err(BackendError::Unreachable(node.to_string()));
        }
        if !n.is_on() {
            return Ok(NodeObservation::unreachable(PowerState::Off));
        }
        let store = &inner.world.store;
        let quotas = if node == store.owner {
            n.quota_limits
                .iter()
                .map(|(u, &(soft, hard))| {
                    let used = store.usage.get(u).copied().unwrap_or(0);
                    (u.clone(), QuotaUsage { soft, hard, used })
                })
                .collect()
        } else {
            BTreeMap::new()
        };
        Ok(NodeObservation {
            reachable: true,
            power: PowerState::On,
            files: n.local_files.clone(),
            mounts: n.mounts.clone(),
            accounts: n.accounts.clone(),
            quota_enabled: n.quota_enabled,
            quotas,
            markers: n.markers.clone(),
        })
    }

    fn power(&self, target: &str, on: bool) -> Result<Outcome, BackendError> {
        let detail = if on { "on" } else { "off" };
        self.mutate(target, Capability::Power, detail, |world| {
            if target == INFRASTRUCTURE {
                return if on {
                    Ok(set_if_changed(&mut world.infrastructure_on, true))
                } else {
                    Err(rejected(target, "network infrastructure is never powered off"))
                };
            }
            let n = node_mut(world, target);
            let want = if on { PowerState::On } else { PowerState::Off };
            if n.power == want {
                return Ok(Outcome::Unchanged);
            }
            n.power = want;
            if on {
                for c in n.interface_counters.values_mut() {
                    *c = Counter::default();
                }
            } else {
                n.mounts.clear();
            }
            Ok(Outcome::Changed)
        })
    }

    fn write_file(&self, node: &str, path: &str, content: &str) -> Result<Outcome, BackendError> {
        self.mutate(node, Capability::WriteFile, path, |world| {
            if !is_absolute_path(path) {
                return Err(rejected(node, format!("`{path}` is not an absolute path")));
            }
            let n = node_mut(world, node);
            if n.local_files.get(path).map(String::as_str) == Some(content) {
                return Ok(Outcome::Unchanged);
            }
            n.local_files.insert(path.to_string(), content.to_string());
            Ok(Outcome::Changed)
        })
    }

    fn append_file(&self, node: &str, path: &str, content: &str) -> Result<Outcome, BackendError> {
        self.mutate(node, Capability::AppendFile, path, |world| {
            if !is_absolute_path(path) {
                return Err(rejected(node, format!("`{path}` is not an absolute path")));
            }
            let file = node_mut(world, node).local_files.entry(path.to_string()).or_default();
            if contains_block(file, content) {
                return Ok(Outcome::Unchanged);
            }
            if !file.is_empty() && !file.ends_with('\n') {
                file.push('\n');
            }
            file.push_str(content);
            Ok(Outcome::Changed)
        })
    }

    fn mount(&self, node: &str, source: &str, mountpoint: &str) -> Result<Outcome, BackendError> {
        self.mutate(node, Capability::Mount, format!("{source} {mountpoint}"), |world| {
            let entry = MountEntry {
                source: source.to_string(),
                mountpoint: mountpoint.to_string(),
            };
            if world.nodes[node].mounts.contains(&entry) {
                return Ok(Outcome::Unchanged);
            }
            if !is_absolute_path(mountpoint) {
                return Err(rejected(node, format!("mountpoint `{mountpoint}` is not absolute")));
            }
            let store = &world.store;
            let Some((server, export)) = source.split_once(':') else {
                return Err(rejected(node, format!("bad mount source `{source}`")));
            };
            if server != store.owner || export != store.root {
                return Err(rejected(node, format!("{source} is not an exported volume")));
            }
            let master = &world.nodes[&store.owner];
            if !master.is_on() {
                return Err(rejected(node, format!("NFS server {server} is down")));
            }
            let exports = master.local_files.get(EXPORTS_PATH).map_or("", String::as_str);
            if !exports_grant(exports, &store.root, node) {
                return Err(rejected(node, format!("{server} does not export {export} to {node}")));
            }
            node_mut(world, node).mounts.insert(entry);
            Ok(Outcome::Changed)
        })
    }

    fn create_user(&self, node: &str, username: &str, account: &Account) -> Result<Outcome, BackendError> {
        self.mutate(node, Capability::CreateUser, username, |world| {
            let n = node_mut(world, node);
            let slot = n.accounts.entry(username.to_string());
            match slot {
                std::collections::btree_map::Entry::Occupied(mut e) => Ok(set_if_changed(e.get_mut(), account.clone())),
                std::collections::btree_map::Entry::Vacant(e) => {
                    e.insert(account.clone());
                    Ok(Outcome::Changed)
                }
            }
        })
    }

    fn enable_quota(&self, node: &str, path: &str) -> Result<Outcome, BackendError> {
        self.mutate(node, Capability::EnableQuota, path, |world| {
            if node != world.store.owner || path != world.store.root {
                return Err(rejected(node, format!("{path} is not local storage on {node}")));
            }
            let n = node_mut(world, node);
            let fstab = n.local_files.get(FSTAB_PATH).cloned().unwrap_or_default();
            let needle = format!(" {path} ");
            if !fstab.lines().any(|l| format!("{l} ").contains(&needle)) {
                return Err(rejected(node, format!("{path} has no fstab entry")));
            }
            let edited = add_usrquota(&fstab, path);
            let a = set_if_changed(n.local_files.get_mut(FSTAB_PATH).expect("fstab present"), edited);
            let b = set_if_changed(&mut n.quota_enabled, true);
            Ok(a.merge(b))
        })
    }

    fn set_quota(&self, node: &str, username: &str, soft: u64, hard: u64) -> Result<Outcome, BackendError> {
        self.mutate(node, Capability::SetQuota, username, |world| {
            if node != world.store.owner {
                return Err(rejected(node, "quotas are managed on the storage owner"));
            }
            let n = node_mut(world, node);
            if !n.quota_enabled {
                return Err(rejected(node, "quotas are not enabled"));
            }
            if !n.accounts.contains_key(username) {
                return Err(rejected(node, format!("no such user {username}")));
            }
            let slot = n
                .quota_limits
                .entry(username.to_string())
                .or_insert((u64::MAX, u64::MAX));
            Ok(set_if_changed(slot, (soft, hard)))
        })
    }

    fn set_marker(&self, node: &str, marker: &str) -> Result<Outcome, BackendError> {
        self.mutate(node, Capability::SetMarker, marker, |world| {
            Ok(if node_mut(world, node).markers.insert(marker.to_string()) {
                Outcome::Changed
            } else {
                Outcome::Unchanged
            })
        })
    }

    fn enable_monitor(&self, node: &str) -> Result<Outcome, BackendError> {
        self.mutate(node, Capability::EnableMonitor, MARKER_MONITOR, |world| {
            Ok(if node_mut(world, node).markers.insert(MARKER_MONITOR.to_string()) {
                Outcome::Changed
            } else {
                Outcome::Unchanged
            })
        })
    }
}

impl CounterSource for SimFleet {
    /// Counters of powered, reachable nodes at the simulated clock.
    fn sample<T: Scalar>(&self) -> Result<TrafficSample<T>, BackendError> {
        let inner = self.lock();
        let world = &inner.world;
        let mut counters = BTreeMap::new();
        for (host, node) in &world.nodes {
            let unreachable = inner.faults.get(host).is_some_and(|f| f.unreachable);
            if !node.is_on() || unreachable {
                continue;
            }
            for (iface, c) in &node.interface_counters {
                counters.insert(
                    (host.clone(), iface.clone()),
                    InterfaceCounters {
                        rx_bytes: c.rx_bytes,
                        tx_bytes: c.tx_bytes,
                    },
                );
            }
        }
        let timestamp = T::from_u64(world.clock_ns).expect("clock fits scalar")
            / T::from_u64(1_000_000_000).expect("constant fits scalar");
        Ok(TrafficSample { timestamp, counters })
    }
}
