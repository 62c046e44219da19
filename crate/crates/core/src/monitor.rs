//! Interface traffic rates and node health.

use std::collections::BTreeMap;
use std::fmt::{self, Debug, Display, Write as _};

use num_traits::{Float, FromPrimitive};
use serde::{Serialize, Serializer};

use crate::executor::BackendError;
use crate::model::ClusterSpec;
use crate::planner::{FleetState, MountEntry};

/// Floating-point type used for timestamps and rates.
pub trait Scalar: Float + FromPrimitive + Display + Debug + Serialize + Send + Sync + 'static {}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct InterfaceCounters {
    pub rx_bytes: u64,
    pub tx_bytes: u64,
}

/// (hostname, interface)
pub type InterfaceKey = (String, String);

/// Cumulative counters at one instant. `timestamp` is in seconds on a
/// monotonic clock.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficSample<T = f64> {
    pub timestamp: T,
    pub counters: BTreeMap<InterfaceKey, InterfaceCounters>,
}

impl<T: Scalar> Serialize for TrafficSample<T> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Row<'a> {
            node: &'a str,
            iface: &'a str,
            rx_bytes: u64,
            tx_bytes: u64,
        }
        #[derive(Serialize)]
        struct Out<'a, T> {
            timestamp: T,
            counters: Vec<Row<'a>>,
        }
        Out {
            timestamp: self.timestamp,
            counters: self
                .counters
                .iter()
                .map(|((node, iface), c)| Row {
                    node,
                    iface,
                    rx_bytes: c.rx_bytes,
                    tx_bytes: c.tx_bytes,
                })
                .collect(),
        }
        .serialize(s)
    }
}

/// Anything that can report interface counters for a fleet.
pub trait CounterSource {
    fn sample<T: Scalar>(&self) -> Result<TrafficSample<T>, BackendError>;
}

/// Bytes per second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Rate<T = f64> {
    pub rx: T,
    pub tx: T,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RateError {
    #[error("sample timestamps must strictly increase ({prev} then {cur})")]
    NonIncreasingTimestamp { prev: f64, cur: f64 },
}

fn per_second<T: Scalar>(prev: u64, cur: u64, dt: T) -> T {
    match cur.checked_sub(prev) {
        Some(delta) => T::from_u64(delta).unwrap_or_else(T::infinity) / dt,
        None => T::zero(),
    }
}

/// Rates for every interface present in both samples. A counter that went
/// backwards reports 0.
pub fn compute_rates<T: Scalar>(
    prev: &TrafficSample<T>,
    cur: &TrafficSample<T>,
) -> Result<BTreeMap<InterfaceKey, Rate<T>>, RateError> {
    let dt = cur.timestamp - prev.timestamp;
    // Also rejects NaN.
    if dt.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater) {
        return Err(RateError::NonIncreasingTimestamp {
            prev: prev.timestamp.to_f64().unwrap_or(f64::NAN),
            cur: cur.timestamp.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(cur
        .counters
        .iter()
        .filter_map(|(key, c)| {
            let p = prev.counters.get(key)?;
            Some((
                key.clone(),
                Rate {
                    rx: per_second(p.rx_bytes, c.rx_bytes, dt),
                    tx: per_second(p.tx_bytes, c.tx_bytes, dt),
                },
            ))
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Health {
    Up,
    /// Reachable, but a worker is missing its storage mount.
    Degraded,
    Unreachable,
}

impl Display for Health {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Health::Up => "up",
            Health::Degraded => "degraded",
            Health::Unreachable => "unreachable",
        })
    }
}

/// Health of every node in `spec`, keyed by hostname.
pub fn health_check(state: &FleetState, spec: &ClusterSpec) -> BTreeMap<String, Health> {
    let mount = spec.master().map(|m| MountEntry {
        source: format!("{}:{}", m.hostname, spec.storage.path),
        mountpoint: spec.storage.mountpoint_on_workers.clone(),
    });
    spec.nodes
        .iter()
        .map(|n| {
            let health = match state.node(&n.hostname) {
                Some(obs) if obs.is_up() => {
                    let needs_mount = !n.is_master();
                    if needs_mount && !mount.as_ref().is_some_and(|m| obs.mounts.contains(m)) {
                        Health::Degraded
                    } else {
                        Health::Up
                    }
                }
                _ => Health::Unreachable,
            };
            (n.hostname.clone(), health)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateRow<T = f64> {
    pub node: String,
    pub iface: String,
    /// `None` when the interface was missing from either sample.
    pub rx_rate: Option<T>,
    pub tx_rate: Option<T>,
    pub health: Health,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport<T = f64> {
    pub rows: Vec<RateRow<T>>,
    pub health: BTreeMap<String, Health>,
}

impl<T: Scalar> RateReport<T> {
    /// One row per interface declared in `spec`, sorted by node then interface.
    pub fn assemble(
        spec: &ClusterSpec,
        rates: &BTreeMap<InterfaceKey, Rate<T>>,
        health: BTreeMap<String, Health>,
    ) -> Self {
        let mut rows: Vec<RateRow<T>> = spec
            .nodes
            .iter()
            .flat_map(|n| n.interfaces.iter().map(move |i| (n, i)))
            .map(|(n, i)| {
                let rate = rates.get(&(n.hostname.clone(), i.name.clone()));
                RateRow {
                    node: n.hostname.clone(),
                    iface: i.name.clone(),
                    rx_rate: rate.map(|r| r.rx),
                    tx_rate: rate.map(|r| r.tx),
                    health: health.get(&n.hostname).copied().unwrap_or(Health::Unreachable),
                }
            })
            .collect();
        rows.sort_by(|a, b| (&a.node, &a.iface).cmp(&(&b.node, &b.iface)));
        Self { rows, health }
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("report serializes");
        out.push('\n');
        out
    }
}

const HEADER: [&str; 5] = ["NODE", "IFACE", "RX/s", "TX/s", "HEALTH"];

fn table_line(out: &mut String, cells: [&str; 5]) {
    let _ = writeln!(
        out,
        "{:<12} {:<8} {:>16} {:>16} {}",
        cells[0], cells[1], cells[2], cells[3], cells[4]
    );
}

/// Fixed-width table; rates use the scalar's shortest round-trip form.
pub fn render_summary<T: Scalar>(report: &RateReport<T>) -> String {
    let mut out = String::new();
    table_line(&mut out, HEADER);
    let cell = |r: Option<T>| r.map_or_else(|| "-".to_string(), |v| v.to_string());
    for row in &report.rows {
        table_line(
            &mut out,
            [
                &row.node,
                &row.iface,
                &cell(row.rx_rate),
                &cell(row.tx_rate),
                &row.health.to_string(),
            ],
        );
    }
    out
}

/// Parses the Linux `/proc/net/dev` table into per-interface counters.
pub fn parse_proc_net_dev(text: &str) -> BTreeMap<String, InterfaceCounters> {
    text.lines()
        .filter_map(|line| {
            let (name, rest) = line.split_once(':')?;
            let fields: Vec<u64> = rest.split_whitespace().map(str::parse).collect::<Result<_, _>>().ok()?;
            // rx bytes is field 0, tx bytes is field 8.
            let (rx, tx) = (*fields.first()?, *fields.get(8)?);
            Some((
                name.trim().to_string(),
                InterfaceCounters {
                    rx_bytes: rx,
                    tx_bytes: tx,
                },
            ))
        })
        .collect()
}
