use std::fmt;

use serde::{Deserialize, Serialize};

use super::{NodeSpec, Role, StorageSpec, GIB, MIB};

pub const BOOT_BYTES: u64 = 500 * MIB;
pub const HOME_BYTES: u64 = 100 * GIB;
pub const ROOT_BYTES: u64 = 100 * GIB;
pub const WORKER_SWAP_BYTES: u64 = 8 * GIB;
pub const MASTER_SWAP_BYTES: u64 = 16 * GIB;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MountTarget {
    Path(String),
    Swap,
}

impl MountTarget {
    pub fn path(p: impl Into<String>) -> Self {
        MountTarget::Path(p.into())
    }
}

impl fmt::Display for MountTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MountTarget::Path(p) => f.write_str(p),
            MountTarget::Swap => f.write_str("swap"),
        }
    }
}

impl TryFrom<String> for MountTarget {
    type Error = String;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        match value.as_str() {
            "swap" => Ok(MountTarget::Swap),
            p if p.starts_with('/') => Ok(MountTarget::Path(value)),
            _ => Err(format!("mount target `{value}` is neither `swap` nor an absolute path")),
        }
    }
}

impl From<MountTarget> for String {
    fn from(value: MountTarget) -> Self {
        value.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Boot,
    Lvm,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Partition {
    pub mount: MountTarget,
    pub size_bytes: u64,
    pub kind: VolumeKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PartitionTable {
    pub entries: Vec<Partition>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PartitionError {
    #[error("disk too small: layout needs {required} bytes, disk has {available} (short by {shortfall})")]
    DiskTooSmall {
        required: u64,
        available: u64,
        shortfall: u64,
    },
}

impl PartitionTable {
    pub fn total_bytes(&self) -> u64 {
        self.entries.iter().map(|e| e.size_bytes).sum()
    }

    pub fn get(&self, mount: &MountTarget) -> Option<&Partition> {
        self.entries.iter().find(|e| &e.mount == mount)
    }

    /// Checks the table against a disk: positive sizes, fits, exactly one `/boot`.
    pub fn check(&self, disk_bytes: u64) -> Result<(), String> {
        if let Some(e) = self.entries.iter().find(|e| e.size_bytes == 0) {
            return Err(format!("partition {} has zero size", e.mount));
        }
        let boots = self
            .entries
            .iter()
            .filter(|e| e.mount == MountTarget::path("/boot"))
            .count();
        if boots != 1 {
            return Err(format!("expected exactly one /boot, found {boots}"));
        }
        if self.total_bytes() > disk_bytes {
            return Err(format!(
                "partitions need {} bytes, disk has {disk_bytes}",
                self.total_bytes()
            ));
        }
        Ok(())
    }
}

/// Partition layout for a role with the role's default swap size.
pub fn partition_plan(role: Role, disk_bytes: u64, storage: &StorageSpec) -> Result<PartitionTable, PartitionError> {
    partition_plan_with_swap(role, disk_bytes, storage, None)
}

/// Workers get `/boot`, `/home`, `/` and swap. The master additionally carries
/// the shared storage volume. Everything except `/boot` is a logical volume.
pub fn partition_plan_with_swap(
    role: Role,
    disk_bytes: u64,
    storage: &StorageSpec,
    swap_bytes: Option<u64>,
) -> Result<PartitionTable, PartitionError> {
    let swap = swap_bytes.unwrap_or(match role {
        Role::Master => MASTER_SWAP_BYTES,
        Role::Worker => WORKER_SWAP_BYTES,
    });
    let lvm = |mount, size_bytes| Partition {
        mount,
        size_bytes,
        kind: VolumeKind::Lvm,
    };
    let mut entries = vec![
        Partition {
            mount: MountTarget::path("/boot"),
            size_bytes: BOOT_BYTES,
            kind: VolumeKind::Boot,
        },
        lvm(MountTarget::path("/home"), HOME_BYTES),
        lvm(MountTarget::path("/"), ROOT_BYTES),
        lvm(MountTarget::Swap, swap),
    ];
    if role == Role::Master {
        entries.push(lvm(MountTarget::path(storage.path.clone()), storage.size_bytes));
    }
    let table = PartitionTable { entries };
    let required = table
        .entries
        .iter()
        .fold(0u64, |acc, e| acc.saturating_add(e.size_bytes));
    if required > disk_bytes {
        return Err(PartitionError::DiskTooSmall {
            required,
            available: disk_bytes,
            shortfall: required - disk_bytes,
        });
    }
    Ok(table)
}

pub fn node_partition_plan(node: &NodeSpec, storage: &StorageSpec) -> Result<PartitionTable, PartitionError> {
    partition_plan_with_swap(node.role, node.disk_bytes, storage, node.swap_bytes)
}
