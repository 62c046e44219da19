use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::Ipv4Addr;

use serde::Serialize;

use super::{home_for, is_absolute_path, is_identifier, is_under, node_partition_plan, ClusterSpec, Role};

/// One violated invariant, with enough context to locate it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    InvalidName {
        name: String,
    },
    NoMaster,
    MultipleMasters {
        hosts: Vec<String>,
    },
    InvalidHostname {
        host: String,
    },
    DuplicateHostname {
        host: String,
    },
    MasterInterfaces {
        host: String,
        count: usize,
    },
    WorkerInterfaces {
        host: String,
        count: usize,
    },
    MissingInternalIp {
        host: String,
    },
    IpOutsideSubnet {
        host: String,
        ip: Ipv4Addr,
    },
    DuplicateIp {
        ip: Ipv4Addr,
        hosts: Vec<String>,
    },
    InvalidInterfaceName {
        host: String,
        name: String,
    },
    InvalidPublicKey {
        host: String,
    },
    DiskTooSmall {
        host: String,
        shortfall: u64,
    },
    StoragePath {
        path: String,
    },
    StorageMountpoint {
        path: String,
    },
    StorageSize,
    ExportOptions {
        options: Vec<String>,
    },
    InvalidUsername {
        user: String,
    },
    DuplicateUser {
        user: String,
    },
    InvalidGroup {
        user: String,
        group: String,
    },
    InvalidShell {
        user: String,
        shell: String,
    },
    HomeMismatch {
        user: String,
        home: String,
        expected: String,
    },
    QuotaSoftAboveHard {
        user: String,
        soft: u64,
        hard: u64,
    },
    AppOutsideStorage {
        app: String,
        path: String,
    },
    DuplicateApp {
        app: String,
    },
    MotdRangeNotWorker {
        host: String,
    },
    InvalidAliasGuard {
        command: String,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match self {
            InvalidName { name } => write!(f, "cluster name `{name}` is not an identifier"),
            NoMaster => write!(f, "no node has role master"),
            MultipleMasters { hosts } => {
                write!(f, "multiple master nodes: {}", hosts.join(", "))
            }
            InvalidHostname { host } => write!(f, "hostname `{host}` is not an identifier"),
            DuplicateHostname { host } => write!(f, "duplicate hostname {host}"),
            MasterInterfaces { host, count } => write!(
                f,
                "{host}: master needs an internal and an external interface, has {count}"
            ),
            WorkerInterfaces { host, count } => {
                write!(f, "{host}: worker needs exactly one interface, has {count}")
            }
            MissingInternalIp { host } => write!(f, "{host}: internal interface has no IP"),
            IpOutsideSubnet { host, ip } => write!(f, "{host}: {ip} is outside the subnet"),
            DuplicateIp { ip, hosts } => {
                write!(f, "duplicate IP {ip} on {}", hosts.join(", "))
            }
            InvalidInterfaceName { host, name } => {
                write!(f, "{host}: interface name `{name}` is not an identifier")
            }
            InvalidPublicKey { host } => write!(f, "{host}: public key must be a single line"),
            DiskTooSmall { host, shortfall } => {
                write!(f, "{host}: disk too small for partition layout by {shortfall} bytes")
            }
            StoragePath { path } => write!(f, "storage path `{path}` is not absolute"),
            StorageMountpoint { path } => {
                write!(f, "worker mountpoint `{path}` is not absolute")
            }
            StorageSize => write!(f, "storage size must be positive"),
            ExportOptions { options } => {
                write!(f, "invalid export options [{}]", options.join(","))
            }
            InvalidUsername { user } => write!(f, "username `{user}` is not an identifier"),
            DuplicateUser { user } => write!(f, "duplicate user {user}"),
            InvalidGroup { user, group } => {
                write!(f, "{user}: group `{group}` is not an identifier")
            }
            InvalidShell { user, shell } => write!(f, "{user}: shell `{shell}` is not absolute"),
            HomeMismatch { user, home, expected } => {
                write!(f, "{user}: home `{home}` must be `{expected}`")
            }
            QuotaSoftAboveHard { user, soft, hard } => {
                write!(f, "{user}: soft quota {soft} exceeds hard quota {hard}")
            }
            AppOutsideStorage { app, path } => {
                write!(f, "{app}: install path `{path}` is not under storage")
            }
            DuplicateApp { app } => write!(f, "duplicate app {app}"),
            MotdRangeNotWorker { host } => {
                write!(f, "motd worker range endpoint `{host}` is not a worker")
            }
            InvalidAliasGuard { command } => {
                write!(f, "alias guard `{command}` is not a command name")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

fn valid_export_option(opt: &str) -> bool {
    !opt.is_empty()
        && opt
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '=' | '.' | ':' | '/'))
}

/// Checks every spec invariant. Violations are returned in a fixed order:
/// cluster, nodes, network, storage, users, apps, messages.
pub fn validate(spec: &ClusterSpec) -> ValidationReport {
    let mut v = Vec::new();

    if !is_identifier(&spec.name) {
        v.push(Violation::InvalidName {
            name: spec.name.clone(),
        });
    }

    let masters: Vec<String> = spec
        .nodes
        .iter()
        .filter(|n| n.role == Role::Master)
        .map(|n| n.hostname.clone())
        .collect();
    match masters.len() {
        0 => v.push(Violation::NoMaster),
        1 => {}
        _ => v.push(Violation::MultipleMasters { hosts: masters }),
    }

    let mut seen_hosts = BTreeSet::new();
    let mut ips: BTreeMap<Ipv4Addr, Vec<String>> = BTreeMap::new();
    for node in &spec.nodes {
        let host = &node.hostname;
        if !is_identifier(host) {
            v.push(Violation::InvalidHostname { host: host.clone() });
        }
        if !seen_hosts.insert(host.as_str()) {
            v.push(Violation::DuplicateHostname { host: host.clone() });
        }
        let count = node.interfaces.len();
        match node.role {
            Role::Master if count < 2 => v.push(Violation::MasterInterfaces {
                host: host.clone(),
                count,
            }),
            Role::Worker if count != 1 => v.push(Violation::WorkerInterfaces {
                host: host.clone(),
                count,
            }),
            _ => {}
        }
        for iface in &node.interfaces {
            if !is_identifier(&iface.name) {
                v.push(Violation::InvalidInterfaceName {
                    host: host.clone(),
                    name: iface.name.clone(),
                });
            }
            if let Some(ip) = iface.ip {
                let hosts = ips.entry(ip).or_default();
                if !hosts.contains(host) {
                    hosts.push(host.clone());
                }
            }
        }
        match node.internal_ip() {
            None if count > 0 => v.push(Violation::MissingInternalIp { host: host.clone() }),
            Some(ip) if !spec.subnet.contains(ip) => v.push(Violation::IpOutsideSubnet { host: host.clone(), ip }),
            _ => {}
        }
        if node.public_key.as_deref().is_some_and(|k| {
            let k = k.trim_end_matches('\n');
            k.is_empty() || k.contains(['\n', '\r'])
        }) {
            v.push(Violation::InvalidPublicKey { host: host.clone() });
        }
        if let Err(super::PartitionError::DiskTooSmall { shortfall, .. }) = node_partition_plan(node, &spec.storage) {
            v.push(Violation::DiskTooSmall {
                host: host.clone(),
                shortfall,
            });
        }
    }
    for (ip, hosts) in ips {
        if hosts.len() > 1 {
            v.push(Violation::DuplicateIp { ip, hosts });
        }
    }

    let storage = &spec.storage;
    if !is_absolute_path(&storage.path) || storage.path == "/" {
        v.push(Violation::StoragePath {
            path: storage.path.clone(),
        });
    }
    if !is_absolute_path(&storage.mountpoint_on_workers) {
        v.push(Violation::StorageMountpoint {
            path: storage.mountpoint_on_workers.clone(),
        });
    }
    if storage.size_bytes == 0 {
        v.push(Violation::StorageSize);
    }
    if storage.export_options.is_empty() || !storage.export_options.iter().all(|o| valid_export_option(o)) {
        v.push(Violation::ExportOptions {
            options: storage.export_options.clone(),
        });
    }

    let mut seen_users = BTreeSet::new();
    for user in &spec.users {
        let name = &user.username;
        if !is_identifier(name) {
            v.push(Violation::InvalidUsername { user: name.clone() });
        }
        if !seen_users.insert(name.as_str()) {
            v.push(Violation::DuplicateUser { user: name.clone() });
        }
        if !is_identifier(&user.group) {
            v.push(Violation::InvalidGroup {
                user: name.clone(),
                group: user.group.clone(),
            });
        }
        if !is_absolute_path(&user.shell) {
            v.push(Violation::InvalidShell {
                user: name.clone(),
                shell: user.shell.clone(),
            });
        }
        let expected = home_for(&storage.path, name);
        if user.home != expected {
            v.push(Violation::HomeMismatch {
                user: name.clone(),
                home: user.home.clone(),
                expected,
            });
        }
        if user.quota_soft_bytes > user.quota_hard_bytes {
            v.push(Violation::QuotaSoftAboveHard {
                user: name.clone(),
                soft: user.quota_soft_bytes,
                hard: user.quota_hard_bytes,
            });
        }
    }

    let mut seen_apps = BTreeSet::new();
    for app in &spec.apps {
        if !is_absolute_path(&app.install_path) || !is_under(&app.install_path, &storage.path) {
            v.push(Violation::AppOutsideStorage {
                app: app.name.to_string(),
                path: app.install_path.clone(),
            });
        }
        if !seen_apps.insert(app.name) {
            v.push(Violation::DuplicateApp {
                app: app.name.to_string(),
            });
        }
    }

    let workers: BTreeSet<&str> = spec.workers().map(|n| n.hostname.as_str()).collect();
    let range = &spec.motd.worker_range;
    let mut endpoints = vec![range.first()];
    if range.last() != range.first() {
        endpoints.push(range.last());
    }
    for host in endpoints {
        if !workers.contains(host) {
            v.push(Violation::MotdRangeNotWorker { host: host.to_string() });
        }
    }

    for command in &spec.alias_guards {
        if !is_identifier(command) {
            v.push(Violation::InvalidAliasGuard {
                command: command.clone(),
            });
        }
    }

    ValidationReport { violations: v }
}
