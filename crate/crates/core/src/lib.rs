//! Deterministic discrete-event simulator of OS CPU scheduling for mixed
//! database workloads: a selectively-unfair two-tier policy with
//! cgroup-proportional sharing and lock-aware boosting, next to EEVDF-,
//! FIFO-, RR- and IDLE-style baselines, plus the workload generators,
//! metrics and scenario presets used to compare them.

pub mod acceptance;
pub mod checks;
pub mod engine;
pub mod hinting;
pub mod metrics;
pub mod model;
pub mod policy;
pub mod scenario;
pub mod trace;
pub mod workload;
pub mod world;

pub use engine::{run, RunOutput};
pub use metrics::MetricsReport;
pub use scenario::{preset, PolicyKind, Scenario, ScenarioConfig, PRESET_NAMES};
pub use trace::Trace;
