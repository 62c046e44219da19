#![allow(dead_code)]

use std::net::Ipv4Addr;
use std::sync::atomic::{AtomicUsize, Ordering};

use hepcluster::executor::{apply, ApplyOptions, Backend, BackendError, ExecutionReport, Outcome, Probe};
use hepcluster::model::{
    parse_spec, AppName, AppSpec, ClusterSpec, InterfaceSpec, MotdSpec, NodeSpec, RaidLevel, Role, StorageSpec,
    UserSpec, WorkerRange, GIB, MIB, TIB,
};
use hepcluster::planner::{diff, observe, Account, NodeObservation, Plan, PowerState};
use hepcluster::simfleet::SimFleet;
use proptest::prelude::*;

pub fn fixture(name: &str) -> ClusterSpec {
    let path = format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
    parse_spec(&std::fs::read(path).unwrap()).unwrap()
}

pub fn fixture_path(name: &str) -> String {
    format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn iface(name: &str, ip: Option<Ipv4Addr>) -> InterfaceSpec {
    InterfaceSpec { name: name.into(), ip }
}

/// Parameters of a random valid cluster.
#[derive(Debug, Clone)]
pub struct Shape {
    pub workers: usize,
    pub users: Vec<(u64, u64)>,
    pub apps: Vec<AppName>,
    pub guards: usize,
    pub mount_at_home: bool,
}

pub fn build(shape: &Shape) -> ClusterSpec {
    let storage_path = "/data".to_string();
    let mut nodes = vec![NodeSpec {
        hostname: "head".into(),
        role: Role::Master,
        interfaces: vec![
            iface("eth0", Some(Ipv4Addr::new(192, 168, 7, 1))),
            iface("eth1", Some(Ipv4Addr::new(203, 0, 113, 9))),
        ],
        disk_bytes: 2 * TIB,
        raid_level: RaidLevel::Raid5,
        swap_bytes: None,
        public_key: None,
    }];
    // Descending insertion order exercises canonical sorting.
    for i in (1..=shape.workers).rev() {
        nodes.push(NodeSpec {
            hostname: format!("wn{i:02}"),
            role: Role::Worker,
            interfaces: vec![iface("eth0", Some(Ipv4Addr::new(192, 168, 7, 10 + i as u8)))],
            disk_bytes: 500 * GIB,
            raid_level: RaidLevel::Raid1,
            swap_bytes: None,
            public_key: (i % 2 == 0).then(|| format!("ssh-ed25519 KEY{i} admin@wn{i:02}")),
        });
    }
    let users = shape
        .users
        .iter()
        .enumerate()
        .map(|(i, &(soft, hard))| UserSpec {
            username: format!("u{i}"),
            group: "users".into(),
            shell: "/bin/bash".into(),
            home: format!("{storage_path}/u{i}"),
            quota_soft_bytes: soft.min(hard),
            quota_hard_bytes: hard,
        })
        .collect();
    let apps = shape
        .apps
        .iter()
        .map(|&name| AppSpec {
            name,
            install_path: format!(
                "{storage_path}/sw/{}",
                match name {
                    AppName::Root => "root",
                    AppName::Aliroot => "AliRoot",
                    AppName::Geant3 => "geant3",
                }
            ),
            source_url: format!("https://example.org/{}", name.as_str()),
        })
        .collect();
    let last = format!("wn{:02}", shape.workers);
    ClusterSpec {
        name: "prop".into(),
        subnet: "192.168.7.0/24".parse().unwrap(),
        nodes,
        storage: StorageSpec {
            path: storage_path.clone(),
            size_bytes: TIB,
            export_options: vec!["rw".into(), "sync".into()],
            mountpoint_on_workers: if shape.mount_at_home {
                "/home".into()
            } else {
                storage_path
            },
        },
        users,
        apps,
        motd: MotdSpec {
            banner: "HELLO".into(),
            contact_name: "Admin".into(),
            contact_email: "admin@example.org".into(),
            worker_range: WorkerRange::new("wn01", &last),
        },
        alias_guards: ["root", "aliroot", "geant"][..shape.guards]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    }
}

pub fn arb_shape() -> impl Strategy<Value = Shape> {
    (
        1usize..=5,
        prop::collection::vec((0u64..4 * MIB, 0u64..8 * MIB), 0..4),
        prop::sample::subsequence(vec![AppName::Root, AppName::Aliroot, AppName::Geant3], 0..=3),
        0usize..=3,
        any::<bool>(),
    )
        .prop_map(|(workers, users, apps, guards, mount_at_home)| Shape {
            workers,
            users,
            apps,
            guards,
            mount_at_home,
        })
}

pub fn arb_spec() -> impl Strategy<Value = ClusterSpec> {
    arb_shape().prop_map(|s| build(&s))
}

/// Passes calls through to a fleet until `budget` mutating calls have been
/// made, then fails every further mutation. Reads always succeed.
pub struct FailAfter<'a> {
    pub inner: &'a SimFleet,
    budget: AtomicUsize,
}

impl<'a> FailAfter<'a> {
    pub fn new(inner: &'a SimFleet, budget: usize) -> Self {
        Self {
            inner,
            budget: AtomicUsize::new(budget),
        }
    }

    fn spend(&self) -> Result<(), BackendError> {
        self.budget
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |b| b.checked_sub(1))
            .map(|_| ())
            .map_err(|_| BackendError::Transport("aborted".into()))
    }
}

impl Backend for FailAfter<'_> {
    fn infrastructure_power(&self) -> Result<PowerState, BackendError> {
        self.inner.infrastructure_power()
    }
    fn read_state(&self, node: &str, probe: &Probe) -> Result<NodeObservation, BackendError> {
        self.inner.read_state(node, probe)
    }
    fn power(&self, target: &str, on: bool) -> Result<Outcome, BackendError> {
        self.spend()?;
        self.inner.power(target, on)
    }
    fn write_file(&self, node: &str, path: &str, content: &str) -> Result<Outcome, BackendError> {
        self.spend()?;
        self.inner.write_file(node, path, content)
    }
    fn append_file(&self, node: &str, path: &str, content: &str) -> Result<Outcome, BackendError> {
        self.spend()?;
        self.inner.append_file(node, path, content)
    }
    fn mount(&self, node: &str, source: &str, mountpoint: &str) -> Result<Outcome, BackendError> {
        self.spend()?;
        self.inner.mount(node, source, mountpoint)
    }
    fn create_user(&self, node: &str, username: &str, account: &Account) -> Result<Outcome, BackendError> {
        self.spend()?;
        self.inner.create_user(node, username, account)
    }
    fn enable_quota(&self, node: &str, path: &str) -> Result<Outcome, BackendError> {
        self.spend()?;
        self.inner.enable_quota(node, path)
    }
    fn set_quota(&self, node: &str, username: &str, soft: u64, hard: u64) -> Result<Outcome, BackendError> {
        self.spend()?;
        self.inner.set_quota(node, username, soft, hard)
    }
    fn set_marker(&self, node: &str, marker: &str) -> Result<Outcome, BackendError> {
        self.spend()?;
        self.inner.set_marker(node, marker)
    }
    fn enable_monitor(&self, node: &str) -> Result<Outcome, BackendError> {
        self.spend()?;
        self.inner.enable_monitor(node)
    }
}

pub fn plan_of<B: Backend + ?Sized>(spec: &ClusterSpec, backend: &B) -> Plan {
    diff(spec, &observe(backend, spec).unwrap()).unwrap()
}

/// Observe, diff, apply once.
pub fn round<B: Backend + ?Sized>(spec: &ClusterSpec, backend: &B) -> ExecutionReport {
    let plan = plan_of(spec, backend);
    apply(spec, &plan, backend, ApplyOptions::default())
}

pub fn converged_fleet(spec: &ClusterSpec) -> SimFleet {
    let fleet = SimFleet::from_spec(spec);
    round(spec, &fleet);
    assert!(plan_of(spec, &fleet).is_empty());
    fleet
}
