//! Declarative provisioning for a small master/worker cluster.
//!
//! A [`ClusterSpec`] describes the desired cluster. [`observe`] reads the
//! fleet through a [`Backend`], [`diff`] turns the gap into an ordered
//! [`Plan`], and [`apply`] executes it. [`SimFleet`] is an in-memory backend
//! used by the tests and the `--backend sim` CLI mode.

pub mod cli;
pub mod configgen;
pub mod executor;
pub mod model;
pub mod monitor;
pub mod planner;
pub mod shell;
pub mod simfleet;

pub use executor::{apply, ApplyOptions, Backend, BackendError, ExecutionReport, PlanStatus};
pub use model::{parse_spec, validate, ClusterSpec};
pub use monitor::Scalar;
pub use planner::{diff, observe, FleetState, Plan};
pub use simfleet::SimFleet;
