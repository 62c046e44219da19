//! Cluster specification: the desired state of the whole cluster.
//!
//! A spec is a single JSON document. Parsing applies defaults so that every
//! field of [`ClusterSpec`] is populated, and serializing a parsed spec
//! yields a document that parses back to an equal value.

mod net;
mod partition;
mod validate;

use std::fmt;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use net::{CidrParseError, Ipv4Cidr};
pub use partition::{
    node_partition_plan, partition_plan, partition_plan_with_swap, MountTarget, Partition, PartitionError,
    PartitionTable, VolumeKind, BOOT_BYTES, HOME_BYTES, MASTER_SWAP_BYTES, ROOT_BYTES, WORKER_SWAP_BYTES,
};
pub use validate::{validate, ValidationReport, Violation};

pub const KIB: u64 = 1 << 10;
pub const MIB: u64 = 1 << 20;
pub const GIB: u64 = 1 << 30;
pub const TIB: u64 = 1 << 40;

pub const DEFAULT_BANNER: &str = "WELCOME TO HEP CLUSTER";
pub const DEFAULT_SHELL: &str = "/bin/bash";
pub const DEFAULT_GROUP: &str = "users";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub name: String,
    /// Internal network. Every node's first interface must sit inside it.
    pub subnet: Ipv4Cidr,
    pub nodes: Vec<NodeSpec>,
    pub storage: StorageSpec,
    #[serde(default)]
    pub users: Vec<UserSpec>,
    #[serde(default)]
    pub apps: Vec<AppSpec>,
    pub motd: MotdSpec,
    #[serde(default)]
    pub alias_guards: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Master,
    Worker,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Master => "master",
            Role::Worker => "worker",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub hostname: String,
    pub role: Role,
    /// The first interface is the internal one.
    pub interfaces: Vec<InterfaceSpec>,
    pub disk_bytes: u64,
    pub raid_level: RaidLevel,
    /// Overrides the role's default swap size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub swap_bytes: Option<u64>,
    /// Public key line installed for root during base install. When absent a
    /// deterministic placeholder derived from the hostname is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub public_key: Option<String>,
}

impl NodeSpec {
    pub fn internal_ip(&self) -> Option<Ipv4Addr> {
        self.interfaces.first().and_then(|i| i.ip)
    }

    pub fn is_master(&self) -> bool {
        self.role == Role::Master
    }

    pub fn public_key_line(&self) -> String {
        match &self.public_key {
            Some(key) => key.trim_end_matches('\n').to_string(),
            None => placeholder_public_key(&self.hostname),
        }
    }
}

/// Stand-in key line for nodes whose real key is not declared.
pub fn placeholder_public_key(hostname: &str) -> String {
    let digest = Sha256::digest(format!("hepcluster-host-key:{hostname}").as_bytes());
    format!("ssh-rsa AAAA{} root@{hostname}", hex::encode(&digest[..24]))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterfaceSpec {
    pub name: String,
    #[serde(default)]
    pub ip: Option<Ipv4Addr>,
}

/// RAID level recorded for a node. Only membership is checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum RaidLevel {
    Raid0,
    Raid1,
    Raid3,
    Raid5,
    Raid6,
    Raid10,
}

impl TryFrom<u8> for RaidLevel {
    type Error = String;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        Ok(match value {
            0 => RaidLevel::Raid0,
            1 => RaidLevel::Raid1,
            3 => RaidLevel::Raid3,
            5 => RaidLevel::Raid5,
            6 => RaidLevel::Raid6,
            10 => RaidLevel::Raid10,
            other => return Err(format!("unsupported RAID level {other}; expected 0, 1, 3, 5, 6 or 10")),
        })
    }
}

impl From<RaidLevel> for u8 {
    fn from(value: RaidLevel) -> Self {
        match value {
            RaidLevel::Raid0 => 0,
            RaidLevel::Raid1 => 1,
            RaidLevel::Raid3 => 3,
            RaidLevel::Raid5 => 5,
            RaidLevel::Raid6 => 6,
            RaidLevel::Raid10 => 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StorageSpec {
    pub path: String,
    pub size_bytes: u64,
    #[serde(default = "default_export_options")]
    pub export_options: Vec<String>,
    /// Defaults to `path` so user homes resolve identically on every node.
    #[serde(default)]
    pub mountpoint_on_workers: String,
}

fn default_export_options() -> Vec<String> {
    vec!["rw".to_string(), "sync".to_string()]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserSpec {
    pub username: String,
    #[serde(default = "default_group")]
    pub group: String,
    #[serde(default = "default_shell")]
    pub shell: String,
    /// Derived from the storage path and username when omitted.
    #[serde(default)]
    pub home: String,
    #[serde(default)]
    pub quota_soft_bytes: u64,
    #[serde(default)]
    pub quota_hard_bytes: u64,
}

impl UserSpec {
    pub fn has_quota(&self) -> bool {
        self.quota_soft_bytes > 0 || self.quota_hard_bytes > 0
    }
}

fn default_group() -> String {
    DEFAULT_GROUP.to_string()
}

fn default_shell() -> String {
    DEFAULT_SHELL.to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AppName {
    Root,
    Aliroot,
    Geant3,
}

impl AppName {
    pub fn as_str(&self) -> &'static str {
        match self {
            AppName::Root => "root",
            AppName::Aliroot => "aliroot",
            AppName::Geant3 => "geant3",
        }
    }
}

impl fmt::Display for AppName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppSpec {
    pub name: AppName,
    /// Directory the application lives in, e.g. `/Jugrid/alice/root`.
    pub install_path: String,
    #[serde(default)]
    pub source_url: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotdSpec {
    #[serde(default = "default_banner")]
    pub banner: String,
    #[serde(default)]
    pub contact_name: String,
    #[serde(default)]
    pub contact_email: String,
    pub worker_range: WorkerRange,
}

fn default_banner() -> String {
    DEFAULT_BANNER.to_string()
}

/// Inclusive range of worker hostnames, serialized as `["node01", "node03"]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerRange(pub String, pub String);

impl WorkerRange {
    pub fn new(first: impl Into<String>, last: impl Into<String>) -> Self {
        Self(first.into(), last.into())
    }

    pub fn first(&self) -> &str {
        &self.0
    }

    pub fn last(&self) -> &str {
        &self.1
    }
}

impl fmt::Display for WorkerRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.0, self.1)
    }
}

/// Errors raised while reading a spec document.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SpecError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown field `{field}` at line {line}, column {column}")]
    UnknownField { field: String, line: usize, column: usize },
    #[error("missing required field `{field}`")]
    MissingField { field: String },
    #[error("invalid value at line {line}, column {column}: {message}")]
    InvalidValue {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("spec is not valid UTF-8")]
    Encoding,
}

fn backticked(message: &str) -> Option<String> {
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(message[start..start + len].to_string())
}

impl From<serde_json::Error> for SpecError {
    fn from(err: serde_json::Error) -> Self {
        use serde_json::error::Category;

        let (line, column) = (err.line(), err.column());
        let message = err.to_string();
        // serde_json appends " at line L column C"; positions are reported separately.
        let message = match message.rfind(" at line ") {
            Some(idx) => message[..idx].to_string(),
            None => message,
        };
        if err.classify() != Category::Data {
            return SpecError::Syntax { line, column, message };
        }
        if message.starts_with("missing field") {
            if let Some(field) = backticked(&message) {
                return SpecError::MissingField { field };
            }
        }
        if message.starts_with("unknown field") {
            if let Some(field) = backticked(&message) {
                return SpecError::UnknownField { field, line, column };
            }
        }
        if message.starts_with("duplicate field") {
            let key = backticked(&message).unwrap_or_default();
            return SpecError::Syntax {
                line,
                column,
                message: format!("duplicate key `{key}`"),
            };
        }
        SpecError::InvalidValue { line, column, message }
    }
}

/// Parses a spec document and fills in defaults.
pub fn parse_spec(text: &[u8]) -> Result<ClusterSpec, SpecError> {
    let text = std::str::from_utf8(text).map_err(|_| SpecError::Encoding)?;
    // An empty document is an object with every field missing.
    let text = if text.trim().is_empty() { "{}" } else { text };
    let mut spec: ClusterSpec = serde_json::from_str(text)?;
    spec.apply_defaults();
    Ok(spec)
}

impl ClusterSpec {
    fn apply_defaults(&mut self) {
        if self.storage.mountpoint_on_workers.is_empty() {
            self.storage.mountpoint_on_workers = self.storage.path.clone();
        }
        for user in &mut self.users {
            if user.home.is_empty() {
                user.home = home_for(&self.storage.path, &user.username);
            }
        }
    }

    /// Pretty JSON with stable field order and a trailing newline.
    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("spec serializes");
        out.push('\n');
        out
    }

    /// Hex SHA-256 over the canonical serialization.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn master(&self) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.is_master())
    }

    /// Worker nodes in spec order.
    pub fn workers(&self) -> impl Iterator<Item = &NodeSpec> {
        self.nodes.iter().filter(|n| !n.is_master())
    }

    pub fn node(&self, hostname: &str) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.hostname == hostname)
    }

    pub fn quota_users(&self) -> impl Iterator<Item = &UserSpec> {
        self.users.iter().filter(|u| u.has_quota())
    }
}

pub fn home_for(storage_path: &str, username: &str) -> String {
    format!("{}/{}", storage_path.trim_end_matches('/'), username)
}

/// True for `/a/b` style paths: absolute, no empty, `.` or `..` segments, no whitespace.
pub fn is_absolute_path(path: &str) -> bool {
    if path == "/" {
        return true;
    }
    let Some(rest) = path.strip_prefix('/') else {
        return false;
    };
    !path.chars().any(char::is_whitespace) && rest.split('/').all(|seg| !seg.is_empty() && seg != "." && seg != "..")
}

/// True when `path` lies strictly below `root`.
pub fn is_under(path: &str, root: &str) -> bool {
    let root = root.trim_end_matches('/');
    path.strip_prefix(root)
        .is_some_and(|rest| rest.len() > 1 && rest.starts_with('/'))
}

pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "name": "hep",
        "subnet": "10.1.3.192/26",
        "nodes": [
            {"hostname": "node00", "role": "master", "disk_bytes": 7696581394432, "raid_level": 3,
             "interfaces": [{"name": "eth0", "ip": "10.1.3.193"}, {"name": "eth1", "ip": "144.16.0.10"}]},
            {"hostname": "node01", "role": "worker", "disk_bytes": 1099511627776, "raid_level": 3,
             "interfaces": [{"name": "eth0", "ip": "10.1.3.194"}]}
        ],
        "storage": {"path": "/Jugrid", "size_bytes": 4398046511104},
        "users": [{"username": "user1", "quota_hard_bytes": 2097152}],
        "motd": {"worker_range": ["node01", "node01"]}
    }"#;

    #[test]
    fn defaults_are_applied() {
        let spec = parse_spec(MINIMAL.as_bytes()).unwrap();
        assert_eq!(spec.storage.export_options, vec!["rw", "sync"]);
        assert_eq!(spec.storage.mountpoint_on_workers, "/Jugrid");
        assert_eq!(spec.users[0].home, "/Jugrid/user1");
        assert_eq!(spec.users[0].shell, "/bin/bash");
        assert_eq!(spec.users[0].group, "users");
        assert_eq!(spec.motd.banner, DEFAULT_BANNER);
        assert!(spec.alias_guards.is_empty());
    }

    #[test]
    fn empty_document_reports_missing_field() {
        assert_eq!(
            parse_spec(b"").unwrap_err(),
            SpecError::MissingField { field: "name".into() }
        );
        assert!(matches!(
            parse_spec(b"  \n").unwrap_err(),
            SpecError::MissingField { .. }
        ));
    }

    #[test]
    fn duplicate_key_is_syntax_error_naming_key() {
        let text = r#"{"name": "a", "name": "b"}"#;
        match parse_spec(text.as_bytes()).unwrap_err() {
            SpecError::Syntax { message, line, .. } => {
                assert!(message.contains("`name`"), "{message}");
                assert_eq!(line, 1);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_field_is_rejected() {
        let text = MINIMAL.replace("\"name\": \"hep\",", "\"name\": \"hep\", \"colour\": 1,");
        match parse_spec(text.as_bytes()).unwrap_err() {
            SpecError::UnknownField { field, .. } => assert_eq!(field, "colour"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_json_reports_position() {
        match parse_spec(b"{\n  \"name\": \n}").unwrap_err() {
            SpecError::Syntax { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn raid_level_outside_enum_is_rejected() {
        let text = MINIMAL.replacen("\"raid_level\": 3", "\"raid_level\": 4", 1);
        assert!(matches!(
            parse_spec(text.as_bytes()).unwrap_err(),
            SpecError::InvalidValue { .. }
        ));
    }

    #[test]
    fn serialized_spec_parses_back_equal() {
        let spec = parse_spec(MINIMAL.as_bytes()).unwrap();
        let again = parse_spec(spec.to_json().as_bytes()).unwrap();
        assert_eq!(spec, again);
        assert_eq!(spec.content_hash(), again.content_hash());
    }

    #[test]
    fn path_helpers() {
        assert!(is_absolute_path("/Jugrid"));
        assert!(is_absolute_path("/Jugrid/alice/root"));
        assert!(!is_absolute_path("Jugrid"));
        assert!(!is_absolute_path("/Jugrid/"));
        assert!(!is_absolute_path("/a/../b"));
        assert!(!is_absolute_path("/a b"));
        assert!(is_under("/Jugrid/user1", "/Jugrid"));
        assert!(!is_under("/Jugrid", "/Jugrid"));
        assert!(!is_under("/Jugridx/user1", "/Jugrid"));
        assert!(!is_under("/jugrid/user1", "/Jugrid"));
    }

    #[test]
    fn placeholder_keys_are_stable_and_distinct() {
        assert_eq!(placeholder_public_key("node01"), placeholder_public_key("node01"));
        assert_ne!(placeholder_public_key("node01"), placeholder_public_key("node02"));
        assert!(placeholder_public_key("node01").ends_with(" root@node01"));
    }
}
