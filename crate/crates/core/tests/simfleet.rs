mod common;

use std::collections::BTreeMap;

use common::{converged_fleet, fixture, plan_of, round};
use hepcluster::executor::Backend;
use hepcluster::planner::{Account, PowerState};
use hepcluster::simfleet::{SimError, SimFleet};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

const MIB: usize = 1024 * 1024;

#[test]
fn hard_limit_rejects_whole_write() {
    let spec = fixture("cluster.json");
    let fleet = converged_fleet(&spec);
    let user = &spec.users[0];
    assert_eq!(user.quota_hard_bytes, 2 * MIB as u64);

    fleet
        .sim_write("node01", "user1", "/Jugrid/user1/a.root", &vec![1; MIB])
        .unwrap();
    assert_eq!(fleet.usage("user1"), MIB as u64);
    let before = fleet.state_hash();
    let err = fleet
        .sim_write("node02", "user1", "/Jugrid/user1/b.root", &vec![2; MIB + MIB / 2])
        .unwrap_err();
    assert!(
        matches!(err, SimError::QuotaExceeded { hard, .. } if hard == 2 * MIB as u64),
        "{err}"
    );
    assert_eq!(fleet.usage("user1"), MIB as u64);
    assert_eq!(fleet.sim_read("node00", "/Jugrid/user1/b.root").unwrap(), None);
    assert_eq!(fleet.state_hash(), before);
    assert!(fleet.quota_conservation_holds());
}

#[test]
fn overwrite_counts_only_the_difference() {
    let spec = fixture("cluster.json");
    let fleet = converged_fleet(&spec);
    fleet
        .sim_write("node01", "user1", "/Jugrid/user1/f", &vec![0; MIB + MIB / 2])
        .unwrap();
    fleet
        .sim_write("node03", "user1", "/Jugrid/user1/f", &vec![0; 2 * MIB])
        .unwrap();
    assert_eq!(fleet.usage("user1"), 2 * MIB as u64);
    fleet.sim_write("node02", "user1", "/Jugrid/user1/f", &[]).unwrap();
    assert_eq!(fleet.usage("user1"), 0);
}

#[test]
fn no_limit_before_quotas_are_on() {
    let spec = fixture("cluster.json");
    let fleet = SimFleet::from_spec(&spec);
    fleet.power("node00", true).unwrap();
    fleet
        .create_user(
            "node00",
            "user1",
            &Account {
                group: "users".into(),
                shell: "/bin/bash".into(),
                home: "/Jugrid/user1".into(),
            },
        )
        .unwrap();
    fleet
        .sim_write("node00", "user1", "/Jugrid/user1/big", &vec![0; 3 * MIB])
        .unwrap();
    assert_eq!(fleet.usage("user1"), 3 * MIB as u64);
}

#[test]
fn writes_need_a_mount_and_a_known_user() {
    let spec = fixture("cluster.json");
    let fleet = converged_fleet(&spec);
    assert!(matches!(
        fleet.sim_write("node01", "nobody", "/Jugrid/x", b"x"),
        Err(SimError::UnknownUser { .. })
    ));
    assert!(matches!(
        fleet.sim_write("node01", "user1", "/tmp/x", b"x"),
        Err(SimError::NoMount { .. })
    ));
    assert!(matches!(
        fleet.sim_write("node01", "user1", "/Jugrid", b"x"),
        Err(SimError::NoMount { .. })
    ));
    fleet.unmount_all("node02").unwrap();
    assert!(matches!(
        fleet.sim_read("node02", "/Jugrid/user1/x"),
        Err(SimError::NoMount { .. })
    ));
}

/// Users' hard limits and the bytes each user should own, tracked by the test.
struct Ledger {
    hard: BTreeMap<String, u64>,
    files: BTreeMap<String, (String, u64)>,
}

impl Ledger {
    fn used(&self, user: &str) -> u64 {
        self.files.values().filter(|(o, _)| o == user).map(|(_, n)| n).sum()
    }

    /// Whether a write should be accepted, and records it if so.
    fn write(&mut self, user: &str, key: &str, len: u64) -> bool {
        let reclaimed = match self.files.get(key) {
            Some((o, n)) if o == user => *n,
            _ => 0,
        };
        let after = self.used(user) - reclaimed + len;
        if self.hard[user] > 0 && after > self.hard[user] {
            return false;
        }
        self.files.insert(key.to_string(), (user.to_string(), len));
        true
    }
}

#[test]
fn conservation_over_a_thousand_random_writes() {
    let mut spec = fixture("cluster.json");
    spec.users[1].quota_soft_bytes = 2 * MIB as u64;
    spec.users[1].quota_hard_bytes = 3 * MIB as u64;
    let fleet = converged_fleet(&spec);
    let mut ledger = Ledger {
        hard: spec
            .users
            .iter()
            .map(|u| (u.username.clone(), u.quota_hard_bytes))
            .collect(),
        files: BTreeMap::new(),
    };
    let mut rng = rand::rngs::StdRng::seed_from_u64(7);
    let nodes = ["node00", "node01", "node02", "node03"];
    let (mut ok, mut rejected) = (0, 0);
    for _ in 0..1000 {
        let node = nodes[rng.gen_range(0..4)];
        let user = &spec.users[rng.gen_range(0..2)].username;
        let name = format!("shared/f{}", rng.gen_range(0..12));
        let len = rng.gen_range(0..=MIB);
        let expect = ledger.write(user, &name, len as u64);
        let got = fleet.sim_write(node, user, &format!("/Jugrid/{name}"), &vec![7; len]);
        assert_eq!(got.is_ok(), expect, "{node} {user} {name} {len}: {got:?}");
        if expect {
            ok += 1
        } else {
            rejected += 1
        }
        assert!(fleet.quota_conservation_holds());
        for u in &spec.users {
            assert_eq!(fleet.usage(&u.username), ledger.used(&u.username));
            assert!(fleet.usage(&u.username) <= u.quota_hard_bytes);
        }
    }
    assert!(ok > 100 && rejected > 100, "{ok} accepted, {rejected} rejected");
}

#[test]
fn storage_is_the_same_from_every_node() {
    let spec = fixture("cluster.json");
    let fleet = converged_fleet(&spec);
    let data: Vec<u8> = (0..=255u8).cycle().take(70_000).collect();
    fleet
        .sim_write("node01", "user2", "/Jugrid/user2/run.dat", &data)
        .unwrap();
    for node in ["node00", "node02", "node03"] {
        assert_eq!(
            fleet.sim_read(node, "/Jugrid/user2/run.dat").unwrap().as_deref(),
            Some(&data[..]),
            "{node}"
        );
    }
}

#[test]
fn mountpoint_maps_onto_storage_root() {
    let mut spec = fixture("cluster.json");
    spec.storage.mountpoint_on_workers = "/home".into();
    let fleet = converged_fleet(&spec);
    fleet.sim_write("node03", "user1", "/home/user1/x", b"abc").unwrap();
    assert_eq!(
        fleet.sim_read("node00", "/Jugrid/user1/x").unwrap().as_deref(),
        Some(&b"abc"[..])
    );
    assert_eq!(
        fleet.sim_read("node01", "/home/user1/x").unwrap().as_deref(),
        Some(&b"abc"[..])
    );
}

#[test]
fn repeating_a_capability_changes_nothing_more() {
    let spec = fixture("cluster.json");
    let fleet = converged_fleet(&spec);
    let account = Account {
        group: "users".into(),
        shell: "/bin/bash".into(),
        home: "/Jugrid/extra".into(),
    };
    type Call = fn(&SimFleet, &Account) -> hepcluster::executor::Outcome;
    let calls: [Call; 5] = [
        |f, _| f.write_file("node01", "/etc/motd", "new\n").unwrap(),
        |f, _| f.append_file("node02", "/etc/fstab", "x y z\n").unwrap(),
        |f, a| f.create_user("node00", "extra", a).unwrap(),
        |f, _| f.set_marker("node03", "custom").unwrap(),
        |f, _| f.power("node01", false).unwrap(),
    ];
    for call in calls {
        call(&fleet, &account);
        let once = fleet.state_hash();
        assert_eq!(call(&fleet, &account), hepcluster::executor::Outcome::Unchanged);
        assert_eq!(fleet.state_hash(), once);
    }
}

#[test]
fn powered_off_node_refuses_everything_but_power() {
    let spec = fixture("cluster.json");
    let fleet = converged_fleet(&spec);
    fleet.power("node02", false).unwrap();
    let before = fleet.state_hash();
    assert!(fleet.write_file("node02", "/etc/motd", "x\n").is_err());
    assert!(fleet.set_marker("node02", "m").is_err());
    assert!(fleet.sim_write("node02", "user1", "/Jugrid/user1/x", b"x").is_err());
    assert_eq!(fleet.state_hash(), before);
    assert!(fleet.world().nodes["node02"].mounts.is_empty());
    // Other nodes carry on.
    fleet.sim_write("node01", "user1", "/Jugrid/user1/x", b"x").unwrap();
    assert!(fleet.power(hepcluster::planner::INFRASTRUCTURE, false).is_err());
    assert_eq!(fleet.infrastructure_power().unwrap(), PowerState::On);
    // Powering back on and re-applying restores the mount.
    round(&spec, &fleet);
    assert!(plan_of(&spec, &fleet).is_empty());
    assert!(fleet.sim_read("node02", "/Jugrid/user1/x").unwrap().is_some());
}

#[test]
fn state_file_round_trip() {
    let spec = fixture("cluster.json");
    let fleet = converged_fleet(&spec);
    fleet.sim_write("node01", "user1", "/Jugrid/user1/x", b"abc").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fleet.json");
    fleet.save(&path).unwrap();
    let back = SimFleet::load(&path).unwrap();
    assert_eq!(back.state_hash(), fleet.state_hash());
    assert_eq!(back.to_json(), fleet.to_json());
    std::fs::write(&path, "{not json").unwrap();
    assert!(matches!(SimFleet::load(&path), Err(SimError::State(_))));
}

proptest! {
    /// Splitting a tick in two gives the same counters as one tick, carrying
    /// fractional bytes across the split.
    #[test]
    fn ticks_are_additive(rate in 0u64..10_000_000, a in 0u32..400, b in 0u32..400) {
        let spec = fixture("cluster.json");
        let one = SimFleet::from_spec(&spec);
        one.power("node01", true).unwrap();
        let two = SimFleet::from_world(one.world());
        let profile: BTreeMap<String, u64> = [("node01".to_string(), rate)].into();
        // Quarter seconds are exact in binary floating point.
        one.sim_tick(f64::from(a) / 4.0, &profile).unwrap();
        one.sim_tick(f64::from(b) / 4.0, &profile).unwrap();
        two.sim_tick(f64::from(a + b) / 4.0, &profile).unwrap();
        prop_assert_eq!(one.counters("node01"), two.counters("node01"));
        let expected = rate * u64::from(a + b) / 4;
        for c in one.counters("node01").unwrap().values() {
            prop_assert_eq!(c.rx_bytes, expected);
            prop_assert_eq!(c.tx_bytes, expected);
        }
    }
}

#[test]
fn ticks_skip_powered_off_nodes_and_reject_bad_durations() {
    let spec = fixture("cluster.json");
    let fleet = SimFleet::from_spec(&spec);
    fleet.power("node00", true).unwrap();
    let profile: BTreeMap<String, u64> = [("node00".to_string(), 10), ("node01".to_string(), 10)].into();
    fleet.sim_tick(1.0, &profile).unwrap();
    assert!(fleet.counters("node00").unwrap().values().all(|c| c.rx_bytes == 10));
    assert!(fleet.counters("node01").unwrap().values().all(|c| c.rx_bytes == 0));
    assert!(matches!(fleet.sim_tick(-1.0, &profile), Err(SimError::InvalidDuration)));
    assert!(matches!(
        fleet.sim_tick(f64::NAN, &profile),
        Err(SimError::InvalidDuration)
    ));
}
