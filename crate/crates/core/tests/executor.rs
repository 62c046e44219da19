mod common;

use std::collections::BTreeMap;

use common::{arb_spec, converged_fleet, fixture, plan_of, round};
use hepcluster::executor::{apply, run_power, ActionStatus, ApplyOptions, Capability, PlanStatus};
use hepcluster::planner::{power_sequence, ActionKind, Phase, Plan, PowerDirection, PowerState};
use hepcluster::simfleet::{Event, Fault, SimFleet};
use proptest::prelude::*;

#[test]
fn fresh_fleet_converges_then_is_idempotent() {
    let spec = fixture("cluster.json");
    let fleet = SimFleet::from_spec(&spec);
    let plan = plan_of(&spec, &fleet);
    let report = apply(&spec, &plan, &fleet, ApplyOptions::default());
    assert_eq!(
        report.status,
        PlanStatus::Converged,
        "{:?}",
        report.failed().collect::<Vec<_>>()
    );
    assert_eq!(report.count(ActionStatus::Applied), plan.actions.len());
    assert!(plan_of(&spec, &fleet).is_empty());

    let hash = fleet.state_hash();
    fleet.clear_events();
    let rerun = apply(&spec, &plan, &fleet, ApplyOptions::default());
    assert_eq!(rerun.status, PlanStatus::Converged);
    assert_eq!(rerun.count(ActionStatus::AlreadySatisfied), plan.actions.len());
    assert_eq!(fleet.state_hash(), hash);
    assert!(fleet.events().is_empty());
}

#[test]
fn mount_failure_finishes_phase_and_skips_the_rest() {
    let spec = fixture("cluster.json");
    let fleet = SimFleet::from_spec(&spec);
    fleet
        .inject_fault("node02", Fault::FailNextCapability(Some(Capability::Mount)))
        .unwrap();
    let plan = plan_of(&spec, &fleet);
    let report = apply(&spec, &plan, &fleet, ApplyOptions::default());
    assert_eq!(report.status, PlanStatus::Partial);

    let failed: Vec<&str> = report.failed().map(|r| r.id.as_str()).collect();
    assert_eq!(failed.len(), 1);
    assert!(failed[0].starts_with("P4/node02/"), "{failed:?}");
    for r in &report.results {
        match r.phase {
            p if p < Phase::P4 => assert_eq!(r.status, ActionStatus::Applied, "{}", r.id),
            Phase::P4 if r.target != "node02" => assert_eq!(r.status, ActionStatus::Applied, "{}", r.id),
            Phase::P4 => {}
            _ => assert_eq!(r.status, ActionStatus::Skipped, "{}", r.id),
        }
    }
    // Later actions on the failing node within the phase are not attempted.
    let node02: Vec<_> = report
        .results
        .iter()
        .filter(|r| r.phase == Phase::P4 && r.target == "node02")
        .collect();
    assert_eq!(node02.last().unwrap().status, ActionStatus::Skipped);

    let retry = round(&spec, &fleet);
    assert_eq!(retry.status, PlanStatus::Converged);
    assert!(retry.results.iter().all(|r| r.phase >= Phase::P4));
}

#[test]
fn export_failure_skips_worker_mounts() {
    let spec = fixture("cluster.json");
    let fleet = SimFleet::from_spec(&spec);
    let mut early = plan_of(&spec, &fleet);
    early.actions.retain(|a| a.phase < Phase::P4);
    let r = apply(&spec, &early, &fleet, ApplyOptions::default());
    assert_eq!(r.failed().count(), 0);

    let master = spec.master().unwrap().hostname.clone();
    fleet
        .inject_fault(&master, Fault::FailNextCapability(Some(Capability::WriteFile)))
        .unwrap();
    let plan = plan_of(&spec, &fleet);
    let report = apply(&spec, &plan, &fleet, ApplyOptions::default());
    assert_eq!(report.status, PlanStatus::Partial);
    let failed: Vec<&str> = report.failed().map(|r| r.id.as_str()).collect();
    assert_eq!(failed.len(), 1);
    assert!(failed[0].starts_with(&format!("P4/{master}/")), "{failed:?}");
    for r in report.results.iter().filter(|r| r.target != master) {
        assert_eq!(r.status, ActionStatus::Skipped, "{}", r.id);
    }
    let retry = round(&spec, &fleet);
    assert_eq!(
        retry.status,
        PlanStatus::Converged,
        "{:?}",
        retry.failed().collect::<Vec<_>>()
    );
}

#[test]
fn stale_plan_is_aborted_without_touching_the_fleet() {
    let spec = fixture("cluster.json");
    let fleet = SimFleet::from_spec(&spec);
    let plan = plan_of(&spec, &fleet);
    let mut edited = spec.clone();
    edited.motd.banner.push('!');
    let hash = fleet.state_hash();
    let report = apply(&edited, &plan, &fleet, ApplyOptions::default());
    assert_eq!(report.status, PlanStatus::Aborted);
    assert_eq!(report.count(ActionStatus::Skipped), plan.actions.len());
    assert_eq!(fleet.state_hash(), hash);
    assert!(fleet.events().is_empty());
}

#[test]
fn malformed_plan_is_aborted() {
    let spec = fixture("cluster.json");
    let fleet = SimFleet::from_spec(&spec);
    let mut plan = plan_of(&spec, &fleet);
    plan.actions.swap(0, 10);
    let report = apply(&spec, &plan, &fleet, ApplyOptions::default());
    assert_eq!(report.status, PlanStatus::Aborted);
    assert!(fleet.events().is_empty());
}

#[test]
fn dry_run_changes_nothing() {
    let spec = fixture("cluster.json");
    let fleet = SimFleet::from_spec(&spec);
    let plan = plan_of(&spec, &fleet);
    let hash = fleet.state_hash();
    let opts = ApplyOptions {
        dry_run: true,
        ..ApplyOptions::default()
    };
    let report = apply(&spec, &plan, &fleet, opts);
    assert_eq!(report.status, PlanStatus::DryRun);
    assert_eq!(report.count(ActionStatus::WouldApply), plan.actions.len());
    assert_eq!(fleet.state_hash(), hash);
    assert_eq!(plan_of(&spec, &fleet), plan);
}

#[test]
fn unreachable_node_makes_apply_partial() {
    let spec = fixture("cluster.json");
    let fleet = SimFleet::from_spec(&spec);
    let plan = plan_of(&spec, &fleet);
    fleet.inject_fault("node03", Fault::Unreachable).unwrap();
    let report = apply(&spec, &plan, &fleet, ApplyOptions::default());
    assert_eq!(report.status, PlanStatus::Partial);
    let failed: Vec<_> = report.failed().collect();
    assert!(failed.iter().all(|r| r.target == "node03"));
    assert!(failed[0].error.as_deref().unwrap().contains("unreachable"));
    fleet.heal("node03");
    assert_eq!(round(&spec, &fleet).status, PlanStatus::Converged);
}

/// Events of a fresh-fleet apply, one phase at a time on a single thread,
/// labelled with the phase that caused them.
fn serial_events(spec: &hepcluster::model::ClusterSpec, plan: &Plan) -> Vec<(Phase, Event)> {
    let fleet = SimFleet::from_spec(spec);
    let mut out = Vec::new();
    for phase in Phase::ALL {
        let sub = Plan {
            actions: plan.actions.iter().filter(|a| a.phase == phase).cloned().collect(),
            ..plan.clone()
        };
        fleet.clear_events();
        let opts = ApplyOptions {
            max_parallel_nodes: 1,
            ..ApplyOptions::default()
        };
        apply(spec, &sub, &fleet, opts);
        out.extend(fleet.events().into_iter().map(|e| (phase, e)));
    }
    out
}

fn per_node<T: Clone>(items: impl Iterator<Item = (String, T)>) -> BTreeMap<String, Vec<T>> {
    let mut m: BTreeMap<String, Vec<T>> = BTreeMap::new();
    for (k, v) in items {
        m.entry(k).or_default().push(v);
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Parallel runs do the same work per node as serial ones, and no node
    /// starts a phase before every node has finished the previous one.
    #[test]
    fn phases_are_barriers(spec in arb_spec(), parallel in 1usize..6) {
        let fleet = SimFleet::from_spec(&spec);
        let plan = plan_of(&spec, &fleet);
        let opts = ApplyOptions { max_parallel_nodes: parallel, ..ApplyOptions::default() };
        prop_assert_eq!(apply(&spec, &plan, &fleet, opts).status, PlanStatus::Converged);
        let events = fleet.events();

        let serial = serial_events(&spec, &plan);
        let expect = per_node(serial.iter().map(|(p, e)| (e.node.clone(), (*p, e.capability, e.detail.clone()))));
        let got = per_node(events.iter().map(|e| (e.node.clone(), (e.capability, e.detail.clone()))));
        let expect_ops: BTreeMap<_, Vec<_>> =
            expect.iter().map(|(k, v)| (k.clone(), v.iter().map(|(_, c, d)| (*c, d.clone())).collect())).collect();
        prop_assert_eq!(&got, &expect_ops);

        // Within a phase the master finishes before any worker starts.
        let master = spec.master().unwrap().hostname.clone();
        let mut cursor: BTreeMap<&str, usize> = BTreeMap::new();
        let mut last = (Phase::P0, false);
        for e in &events {
            let i = cursor.entry(e.node.as_str()).or_default();
            let step = (expect[&e.node][*i].0, e.node != master);
            *i += 1;
            prop_assert!(step >= last, "{} ran {:?} at {:?} after {:?}", e.node, e.capability, step, last);
            last = step;
        }
    }

    #[test]
    fn parallelism_does_not_change_the_outcome(spec in arb_spec(), parallel in 2usize..6) {
        let a = SimFleet::from_spec(&spec);
        let b = SimFleet::from_spec(&spec);
        let plan = plan_of(&spec, &a);
        let serial = apply(&spec, &plan, &a, ApplyOptions { max_parallel_nodes: 1, dry_run: false });
        let wide = apply(&spec, &plan, &b, ApplyOptions { max_parallel_nodes: parallel, dry_run: false });
        let statuses = |r: &hepcluster::executor::ExecutionReport| {
            r.results.iter().map(|x| (x.id.clone(), x.status)).collect::<Vec<_>>()
        };
        prop_assert_eq!(statuses(&serial), statuses(&wide));
        prop_assert_eq!(a.state_hash(), b.state_hash());
    }
}

#[test]
fn power_off_runs_workers_then_master_and_spares_infrastructure() {
    let spec = fixture("cluster.json");
    let fleet = converged_fleet(&spec);
    fleet.clear_events();
    let report = run_power(&power_sequence(PowerDirection::Stop, &spec), &fleet);
    assert_eq!(report.status, PlanStatus::Converged);
    let order: Vec<String> = fleet.events().into_iter().map(|e| e.node).collect();
    assert_eq!(order, ["node03", "node02", "node01", "node00"]);
    assert!(fleet.world().infrastructure_on);
    assert!(fleet.world().nodes.values().all(|n| n.power == PowerState::Off));

    let again = run_power(&power_sequence(PowerDirection::Stop, &spec), &fleet);
    assert_eq!(again.count(ActionStatus::AlreadySatisfied), 4);
}

#[test]
fn power_on_runs_master_first_and_stops_at_a_failure() {
    let spec = fixture("cluster.json");
    let fleet = SimFleet::from_spec(&spec);
    fleet
        .inject_fault("node01", Fault::FailNextCapability(Some(Capability::Power)))
        .unwrap();
    let report = run_power(&power_sequence(PowerDirection::Start, &spec), &fleet);
    assert_eq!(report.status, PlanStatus::Partial);
    let status: Vec<(String, ActionStatus)> = report.results.iter().map(|r| (r.target.clone(), r.status)).collect();
    assert_eq!(
        status,
        [
            ("infrastructure".to_string(), ActionStatus::AlreadySatisfied),
            ("node00".to_string(), ActionStatus::Applied),
            ("node01".to_string(), ActionStatus::Failed),
            ("node02".to_string(), ActionStatus::Skipped),
            ("node03".to_string(), ActionStatus::Skipped),
        ]
    );
    assert!(report.results.iter().all(|r| r.kind == ActionKind::PowerOn));
}
