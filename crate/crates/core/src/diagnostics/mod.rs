//! Gradient-distribution analysis, the convex regret harness and trace files.

pub mod distfit;
pub mod histogram;
pub mod regret;
pub mod trace;

pub use distfit::{critical_value, fit, ks_statistic, ks_test, DistFit, DistParams, Family};
pub use histogram::{gradient_snapshot, Histogram, Snapshot, SnapshotReport};
pub use regret::{regret_bound_terms, verify_bound, BoundReport, BoundTerms, RegretEntry, RegretTrace};
pub use trace::{parse_trace, TraceRow, TraceWriter};
