//! Deterministic generation of every configuration artifact the cluster needs.
//!
//! All generators are pure. Content is UTF-8 with LF line endings, no tabs,
//! and exactly one trailing newline.

use std::collections::BTreeMap;
use std::fmt;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use crate::model::{
    is_under, AppName, AppSpec, MotdSpec, MountTarget, PartitionTable, StorageSpec, UserSpec, VolumeKind, WorkerRange,
    KIB,
};

pub const EXPORTS_PATH: &str = "/etc/exports";
pub const FSTAB_PATH: &str = "/etc/fstab";
pub const AUTHORIZED_KEYS_PATH: &str = "/root/.ssh/authorized_keys";
pub const PUBLIC_KEY_PATH: &str = "/root/.ssh/id_rsa.pub";
pub const PROFILE_PATH: &str = "/etc/bashrc";
pub const ALIASES_PATH: &str = "/etc/profile.d/hep-aliases.sh";
pub const MOTD_PATH: &str = "/etc/motd";
pub const ACCOUNT_FILES: [&str; 3] = ["/etc/passwd", "/etc/group", "/etc/shadow"];
pub const VOLUME_GROUP: &str = "/dev/VolGroup00";

/// Which nodes a generated file is meant for.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum NodeSelector {
    All,
    Master,
    Workers,
    Host(String),
}

impl fmt::Display for NodeSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeSelector::All => f.write_str("all"),
            NodeSelector::Master => f.write_str("master"),
            NodeSelector::Workers => f.write_str("workers"),
            NodeSelector::Host(h) => f.write_str(h),
        }
    }
}

impl From<String> for NodeSelector {
    fn from(value: String) -> Self {
        match value.as_str() {
            "all" => NodeSelector::All,
            "master" => NodeSelector::Master,
            "workers" => NodeSelector::Workers,
            _ => NodeSelector::Host(value),
        }
    }
}

impl From<NodeSelector> for String {
    fn from(value: NodeSelector) -> Self {
        value.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GeneratedFile {
    pub logical_name: String,
    pub target_path: String,
    pub target_node: NodeSelector,
    pub content: String,
}

impl GeneratedFile {
    fn new(
        logical_name: &str,
        target_path: &str,
        target_node: NodeSelector,
        lines: impl IntoIterator<Item = String>,
    ) -> Self {
        let mut content = String::new();
        for line in lines {
            content.push_str(&line);
            content.push('\n');
        }
        debug_assert!(!content.contains(['\t', '\r']));
        debug_assert!(content.ends_with('\n') && !content.ends_with("\n\n"));
        Self {
            logical_name: logical_name.to_string(),
            target_path: target_path.to_string(),
            target_node,
            content,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GenError {
    #[error("no workers to export storage to")]
    EmptyWorkerList,
    #[error("no public key for node {0}")]
    MissingKey(String),
    #[error("public key for node {0} is empty or spans several lines")]
    InvalidKey(String),
    #[error("no applications given")]
    NoApps,
    #[error("application {0} listed twice")]
    DuplicateApp(AppName),
    #[error("application {app} install path `{path}` is not under {storage}")]
    AppOutsideStorage {
        app: AppName,
        path: String,
        storage: String,
    },
    #[error("no commands to guard")]
    EmptyCommandList,
    #[error("no user has a quota")]
    NoQuotaUsers,
}

/// `/etc/exports` on the master: one line granting every worker access.
pub fn gen_exports(storage: &StorageSpec, workers: &[&str]) -> Result<GeneratedFile, GenError> {
    if workers.is_empty() {
        return Err(GenError::EmptyWorkerList);
    }
    let opts = storage.export_options.join(",");
    let mut line = storage.path.clone();
    for w in workers {
        line.push_str(&format!(" {w}({opts})"));
    }
    Ok(GeneratedFile::new(
        "exports",
        EXPORTS_PATH,
        NodeSelector::Master,
        [line],
    ))
}

/// The fstab line a worker needs to remount shared storage at boot.
pub fn fstab_mount_line(master_ip: Ipv4Addr, storage_path: &str, mountpoint: &str) -> String {
    format!("{master_ip}:{storage_path} {mountpoint} nfs defaults 0 0")
}

pub fn gen_fstab_mount(master_ip: Ipv4Addr, storage_path: &str, mountpoint: &str) -> GeneratedFile {
    GeneratedFile::new(
        "fstab",
        FSTAB_PATH,
        NodeSelector::Workers,
        [fstab_mount_line(master_ip, storage_path, mountpoint)],
    )
}

/// Local filesystem table written during base install.
///
/// Logical volumes are numbered in table order, except that the shared
/// storage volume (when present) is always `LogVol00`.
pub fn gen_base_fstab(host: &str, table: &PartitionTable, storage_path: &str) -> GeneratedFile {
    let storage = MountTarget::path(storage_path);
    let has_storage = table.get(&storage).is_some();
    let mut next = usize::from(has_storage);
    let lines = table.entries.iter().map(|entry| {
        if entry.kind == VolumeKind::Boot {
            return format!("LABEL={0} {0} ext3 defaults 1 2", entry.mount);
        }
        let index = if entry.mount == storage {
            0
        } else {
            next += 1;
            next - 1
        };
        let device = format!("{VOLUME_GROUP}/LogVol{index:02}");
        match &entry.mount {
            MountTarget::Swap => format!("{device} swap swap defaults 0 0"),
            MountTarget::Path(p) if p == "/" => format!("{device} / ext3 defaults 1 1"),
            MountTarget::Path(p) => format!("{device} {p} ext3 defaults 1 2"),
        }
    });
    GeneratedFile::new(
        "base-fstab",
        FSTAB_PATH,
        NodeSelector::Host(host.to_string()),
        lines.collect::<Vec<_>>(),
    )
}

/// Authorized-keys content for every node of a password-free mesh.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyMesh {
    pub node_keys: BTreeMap<String, String>,
    pub authorized_content: BTreeMap<String, String>,
}

impl KeyMesh {
    pub fn files(&self) -> Vec<GeneratedFile> {
        self.authorized_content
            .iter()
            .map(|(host, content)| GeneratedFile {
                logical_name: "authorized_keys".to_string(),
                target_path: AUTHORIZED_KEYS_PATH.to_string(),
                target_node: NodeSelector::Host(host.clone()),
                content: content.clone(),
            })
            .collect()
    }
}

/// Every node trusts every node's key, its own and the master's included.
/// Keys appear sorted by hostname.
pub fn gen_key_mesh<'a>(
    cluster_nodes: impl IntoIterator<Item = &'a str>,
    node_keys: &BTreeMap<String, String>,
) -> Result<KeyMesh, GenError> {
    let mut keys = BTreeMap::new();
    for host in cluster_nodes {
        let key = node_keys
            .get(host)
            .ok_or_else(|| GenError::MissingKey(host.to_string()))?;
        let key = key.trim_end_matches('\n');
        if key.is_empty() || key.contains(['\n', '\r']) {
            return Err(GenError::InvalidKey(host.to_string()));
        }
        keys.insert(host.to_string(), key.to_string());
    }
    let mut content = String::new();
    for key in keys.values() {
        content.push_str(key);
        content.push('\n');
    }
    let authorized_content = keys.keys().map(|h| (h.clone(), content.clone())).collect();
    Ok(KeyMesh {
        node_keys: keys,
        authorized_content,
    })
}

/// One commented block of `export` assignments for an application.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvBlock {
    pub app: AppName,
    pub exports: Vec<(String, String)>,
}

const ARCH_QUERY: &str = "`root-config --arch`";

fn split_parent(path: &str) -> (&str, &str) {
    match path.rfind('/') {
        Some(0) => ("/", &path[1..]),
        Some(i) => (&path[..i], &path[i + 1..]),
        None => ("", path),
    }
}

/// Environment assignments for the given applications, in ROOT, AliRoot,
/// Geant3 order regardless of input order.
pub fn env_exports(apps: &[AppSpec], storage_path: &str) -> Result<Vec<EnvBlock>, GenError> {
    if apps.is_empty() {
        return Err(GenError::NoApps);
    }
    let mut by_name: BTreeMap<AppName, &AppSpec> = BTreeMap::new();
    for app in apps {
        if !is_under(&app.install_path, storage_path) {
            return Err(GenError::AppOutsideStorage {
                app: app.name,
                path: app.install_path.clone(),
                storage: storage_path.to_string(),
            });
        }
        if by_name.insert(app.name, app).is_some() {
            return Err(GenError::DuplicateApp(app.name));
        }
    }
    let kv = |k: &str, v: String| (k.to_string(), v);
    let alice_dir = by_name
        .get(&AppName::Aliroot)
        .map(|a| split_parent(&a.install_path).0.to_string());

    let mut blocks = Vec::new();
    for (name, app) in &by_name {
        let exports = match name {
            AppName::Root => vec![
                kv("ROOTSYS", app.install_path.clone()),
                kv("PATH", "$ROOTSYS/bin/:$PATH".into()),
                kv("LD_LIBRARY_PATH", "$ROOTSYS/lib/:$LD_LIBRARY_PATH".into()),
            ],
            AppName::Aliroot => {
                let (alice, level) = split_parent(&app.install_path);
                vec![
                    kv("ALICE", alice.to_string()),
                    kv("ALICE_LEVEL", level.to_string()),
                    kv("ALICE_ROOT", "$ALICE/$ALICE_LEVEL".into()),
                    kv("ALICE_TARGET", ARCH_QUERY.into()),
                    kv("PATH", "$ALICE_ROOT/bin/tgt_$ALICE_TARGET:$PATH".into()),
                    kv(
                        "LD_LIBRARY_PATH",
                        "$ALICE_ROOT/lib/tgt_$ALICE_TARGET/:$LD_LIBRARY_PATH".into(),
                    ),
                ]
            }
            AppName::Geant3 => {
                let (parent, base) = split_parent(&app.install_path);
                let dir = match &alice_dir {
                    Some(alice) if alice == parent => format!("$ALICE/{base}"),
                    _ => app.install_path.clone(),
                };
                vec![
                    kv("PLATFORM", ARCH_QUERY.into()),
                    kv("LD_LIBRARY_PATH", format!("{dir}/lib/tgt_$PLATFORM/:$LD_LIBRARY_PATH")),
                ]
            }
        };
        blocks.push(EnvBlock { app: *name, exports });
    }
    Ok(blocks)
}

fn block_title(app: AppName) -> &'static str {
    match app {
        AppName::Root => "# Root environment",
        AppName::Aliroot => "# AliRoot environment",
        AppName::Geant3 => "# Geant3 environment",
    }
}

/// Shell profile fragment appended on every node.
pub fn gen_env_profile(apps: &[AppSpec], storage_path: &str) -> Result<GeneratedFile, GenError> {
    let blocks = env_exports(apps, storage_path)?;
    let mut lines = Vec::new();
    for (i, block) in blocks.iter().enumerate() {
        if i > 0 {
            lines.push(String::new());
        }
        lines.push(block_title(block.app).to_string());
        lines.extend(block.exports.iter().map(|(k, v)| format!("export {k}={v}")));
    }
    Ok(GeneratedFile::new("env", PROFILE_PATH, NodeSelector::All, lines))
}

pub fn alias_guard_message(range: &WorkerRange) -> String {
    format!("Please login to any worker node from {range} to run root/aliroot")
}

/// Aliases on the master that redirect application commands to the workers.
pub fn gen_alias_guards(commands: &[String], range: &WorkerRange) -> Result<GeneratedFile, GenError> {
    if commands.is_empty() {
        return Err(GenError::EmptyCommandList);
    }
    let message = alias_guard_message(range);
    let lines = commands.iter().map(|c| format!("alias {c}='echo \"{message}\"'"));
    Ok(GeneratedFile::new(
        "aliases",
        ALIASES_PATH,
        NodeSelector::Master,
        lines.collect::<Vec<_>>(),
    ))
}

/// `node01`..`node03` becomes `node0x`: the shared prefix followed by `x`.
fn host_pattern(range: &WorkerRange) -> String {
    let prefix: String = range
        .first()
        .chars()
        .zip(range.last().chars())
        .take_while(|(a, b)| a == b)
        .map(|(a, _)| a)
        .collect();
    if prefix == range.first() && prefix == range.last() {
        prefix
    } else {
        format!("{prefix}x")
    }
}

pub fn gen_motd(motd: &MotdSpec) -> GeneratedFile {
    let range = &motd.worker_range;
    let rule = "*".repeat(motd.banner.chars().count() + 8);
    let mut lines = vec![
        format!("*** {} ***", motd.banner),
        rule.clone(),
        String::new(),
        "Authorized users only. Activity on this system is logged and reviewed.".to_string(),
        format!("Compute nodes {range} are reachable from here with"),
        format!("`ssh -Y {}`; run root, aliroot and geant there.", host_pattern(range)),
    ];
    if !motd.contact_name.is_empty() {
        lines.push(String::new());
        lines.push("For any queries contact:".to_string());
        if motd.contact_email.is_empty() {
            lines.push(motd.contact_name.clone());
        } else {
            lines.push(format!("{} ({})", motd.contact_name, motd.contact_email));
        }
    }
    lines.push(String::new());
    lines.push(rule);
    GeneratedFile::new("motd", MOTD_PATH, NodeSelector::Master, lines)
}

pub fn useradd_command(user: &UserSpec) -> String {
    format!(
        "useradd -g {} -G {} -s {} -d {} -m {}",
        user.group, user.group, user.shell, user.home, user.username
    )
}

/// Account creation on the master followed by account-file sync to workers.
/// Accounts are created locked; no password is ever written.
pub fn gen_user_commands(users: &[UserSpec], workers: &[&str]) -> Vec<String> {
    let mut out = Vec::new();
    for user in users {
        out.push(useradd_command(user));
        out.push(format!("passwd -l {}", user.username));
    }
    if !users.is_empty() {
        for worker in workers {
            for file in ACCOUNT_FILES {
                out.push(format!("scp -p {file} {worker}:{file}"));
            }
        }
    }
    out
}

/// One step of enabling and configuring user quotas on shared storage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum QuotaCommand {
    /// Adds `usrquota` to the storage volume's fstab options.
    AddUsrquota {
        path: String,
    },
    Remount {
        path: String,
    },
    Check {
        path: String,
    },
    On {
        path: String,
    },
    SetQuota {
        user: String,
        soft_bytes: u64,
        hard_bytes: u64,
        path: String,
    },
}

fn kib_blocks(bytes: u64) -> u64 {
    bytes.div_ceil(KIB)
}

impl QuotaCommand {
    /// Non-interactive form used by the remote transport. Limits are 1 KiB blocks.
    pub fn batch_form(&self) -> String {
        match self {
            QuotaCommand::SetQuota {
                user,
                soft_bytes,
                hard_bytes,
                path,
            } => format!(
                "setquota -u {user} {} {} 0 0 {path}",
                kib_blocks(*soft_bytes),
                kib_blocks(*hard_bytes)
            ),
            other => other.to_string(),
        }
    }
}

impl fmt::Display for QuotaCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QuotaCommand::AddUsrquota { path } => {
                write!(f, "sed -i '\\| {path} |s|defaults |defaults,usrquota |' {FSTAB_PATH}")
            }
            QuotaCommand::Remount { path } => write!(f, "mount -o remount {path}"),
            QuotaCommand::Check { path } => write!(f, "quotacheck -a {path}"),
            QuotaCommand::On { path } => write!(f, "quotaon {path}"),
            QuotaCommand::SetQuota { user, .. } => write!(f, "edquota -u {user}"),
        }
    }
}

/// Applies the `usrquota` fstab edit to a whole file; idempotent.
pub fn add_usrquota(fstab: &str, storage_path: &str) -> String {
    let needle = format!(" {storage_path} ");
    let mut out = String::with_capacity(fstab.len() + 9);
    for line in fstab.split_inclusive('\n') {
        if line.contains(&needle) {
            out.push_str(&line.replacen("defaults ", "defaults,usrquota ", 1));
        } else {
            out.push_str(line);
        }
    }
    out
}

pub fn gen_quota_commands(storage: &StorageSpec, users: &[UserSpec]) -> Result<Vec<QuotaCommand>, GenError> {
    let path = storage.path.clone();
    let quota_users: Vec<&UserSpec> = users.iter().filter(|u| u.has_quota()).collect();
    if quota_users.is_empty() {
        return Err(GenError::NoQuotaUsers);
    }
    let mut out = vec![
        QuotaCommand::AddUsrquota { path: path.clone() },
        QuotaCommand::Remount { path: path.clone() },
        QuotaCommand::Check { path: path.clone() },
        QuotaCommand::On { path: path.clone() },
    ];
    out.extend(quota_users.into_iter().map(|u| QuotaCommand::SetQuota {
        user: u.username.clone(),
        soft_bytes: u.quota_soft_bytes,
        hard_bytes: u.quota_hard_bytes,
        path: path.clone(),
    }));
    Ok(out)
}
