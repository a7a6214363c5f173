//! Scenario configuration: declarative description of CPUs, cgroups,
//! workloads, policy and engine parameters, plus the embedded presets.
//!
//! All durations in configuration files are integer microseconds.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    charge_scale, validate_hierarchy, Cgroup, CgroupId, CpuId, ModelError, Tier, Weight,
    WEIGHT_MAX, WEIGHT_MIN,
};
use crate::workload::WorkloadSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Ufs,
    Eevdf,
    Idle,
    Fifo,
    Rr,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::Ufs,
        PolicyKind::Eevdf,
        PolicyKind::Idle,
        PolicyKind::Fifo,
        PolicyKind::Rr,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Ufs => "ufs",
            PolicyKind::Eevdf => "eevdf",
            PolicyKind::Idle => "idle",
            PolicyKind::Fifo => "fifo",
            PolicyKind::Rr => "rr",
        }
    }

    pub fn parse(s: &str) -> Option<PolicyKind> {
        match s {
            "ufs" => Some(PolicyKind::Ufs),
            "eevdf" => Some(PolicyKind::Eevdf),
            "idle" => Some(PolicyKind::Idle),
            "fifo" => Some(PolicyKind::Fifo),
            "rr" => Some(PolicyKind::Rr),
            _ => None,
        }
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Scheduling class a task runs under for a given policy, mirroring the
/// high/low priority mappings of the evaluated scheduler configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedClass {
    Normal,
    IdleClass,
    Rt { priority: u8, round_robin: bool },
}

impl PolicyKind {
    /// Class a task of the given tier gets under this policy.
    pub fn class_for(&self, tier: Tier, rt_priority: u8) -> SchedClass {
        match (self, tier) {
            (PolicyKind::Ufs, _) => SchedClass::Normal,
            (PolicyKind::Eevdf, _) => SchedClass::Normal,
            (PolicyKind::Idle, Tier::TimeSensitive) => SchedClass::Normal,
            (PolicyKind::Idle, Tier::Background) => SchedClass::IdleClass,
            (PolicyKind::Fifo, Tier::TimeSensitive) => SchedClass::Rt {
                priority: rt_priority,
                round_robin: false,
            },
            (PolicyKind::Rr, Tier::TimeSensitive) => SchedClass::Rt {
                priority: rt_priority,
                round_robin: true,
            },
            (PolicyKind::Fifo | PolicyKind::Rr, Tier::Background) => SchedClass::Normal,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EngineParams {
    /// Time slice, microseconds.
    #[serde(default = "default_slice_us")]
    pub slice_us: u64,
    /// Context switch cost, microseconds.
    #[serde(default = "default_ctx_us")]
    pub ctx_switch_cost_us: u64,
    /// Extra cost when a task starts on a CPU other than its last one.
    #[serde(default = "default_migration_us")]
    pub migration_cost_us: u64,
    #[serde(default = "default_seed")]
    pub rng_seed: u64,
    /// Total simulated time, microseconds.
    #[serde(default = "default_duration_us")]
    pub duration_us: u64,
    /// Leading span excluded from metrics, microseconds.
    #[serde(default = "default_warmup_us")]
    pub warmup_us: u64,
}

fn default_slice_us() -> u64 {
    4_000
}
fn default_ctx_us() -> u64 {
    5
}
fn default_migration_us() -> u64 {
    20
}
fn default_seed() -> u64 {
    42
}
fn default_duration_us() -> u64 {
    60_000_000
}
fn default_warmup_us() -> u64 {
    10_000_000
}

impl Default for EngineParams {
    fn default() -> Self {
        EngineParams {
            slice_us: default_slice_us(),
            ctx_switch_cost_us: default_ctx_us(),
            migration_cost_us: default_migration_us(),
            rng_seed: default_seed(),
            duration_us: default_duration_us(),
            warmup_us: default_warmup_us(),
        }
    }
}

impl EngineParams {
    pub fn slice_ns(&self) -> u64 {
        self.slice_us * 1_000
    }
    pub fn ctx_switch_cost_ns(&self) -> u64 {
        self.ctx_switch_cost_us * 1_000
    }
    pub fn migration_cost_ns(&self) -> u64 {
        self.migration_cost_us * 1_000
    }
    pub fn duration_ns(&self) -> u64 {
        self.duration_us * 1_000
    }
    pub fn warmup_ns(&self) -> u64 {
        self.warmup_us * 1_000
    }
}

/// Policy tunables. Only the fields relevant to the active policy apply.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PolicyParams {
    /// RR quantum, microseconds.
    #[serde(default = "default_rr_quantum_us")]
    pub rr_quantum_us: u64,
    /// EEVDF load-balance interval, microseconds.
    #[serde(default = "default_balance_us")]
    pub balance_interval_us: u64,
    /// Static priority for RT-mapped tasks.
    #[serde(default = "default_rt_priority")]
    pub rt_priority: u8,
    /// Fair-server replenish period, microseconds.
    #[serde(default = "default_fair_period_us")]
    pub fair_server_period_us: u64,
    /// Fair-server budget per period, microseconds.
    #[serde(default = "default_fair_budget_us")]
    pub fair_server_budget_us: u64,
    /// Grant chunk the budget is handed out in, spread through the
    /// period.
    #[serde(default = "default_fair_chunk_us")]
    pub fair_server_chunk_us: u64,
    /// Wakeup preemption within the time-sensitive tier (ufs only):
    /// a waking task kicks the CPU when its queue key is lower than the
    /// running same-tier task's key by more than this margin (vr-ns).
    #[serde(default)]
    pub ufs_wakeup_gran_vr_ns: u64,
}

fn default_rr_quantum_us() -> u64 {
    100_000
}
fn default_balance_us() -> u64 {
    100_000
}
fn default_rt_priority() -> u8 {
    99
}
fn default_fair_period_us() -> u64 {
    1_000_000
}
fn default_fair_budget_us() -> u64 {
    50_000
}
fn default_fair_chunk_us() -> u64 {
    5_000
}

impl Default for PolicyParams {
    fn default() -> Self {
        PolicyParams {
            rr_quantum_us: default_rr_quantum_us(),
            balance_interval_us: default_balance_us(),
            rt_priority: default_rt_priority(),
            fair_server_period_us: default_fair_period_us(),
            fair_server_budget_us: default_fair_budget_us(),
            fair_server_chunk_us: default_fair_chunk_us(),
            ufs_wakeup_gran_vr_ns: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CgroupSpec {
    pub name: String,
    #[serde(default)]
    pub parent: Option<String>,
    pub weight: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    /// Must be `0..tasks.len()` in declaration order.
    pub id: u32,
    #[serde(default)]
    pub name: Option<String>,
    pub cgroup: String,
    pub workload: WorkloadSpec,
    /// CPUs the task may run on; all CPUs when omitted.
    #[serde(default)]
    pub affinity: Option<Vec<u32>>,
    /// Spawn time, microseconds.
    #[serde(default)]
    pub start_us: u64,
}

/// Mid-run configuration changes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "kind")]
pub enum ScenarioEventSpec {
    /// Moves a task to another cgroup; its vruntime restarts at the
    /// destination's minimum queued vruntime (the destination group
    /// vruntime when the queue is empty).
    ReassignCgroup {
        at_us: u64,
        task: u32,
        cgroup: String,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default)]
    pub report: Option<String>,
    #[serde(default)]
    pub trace: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub cpus: u32,
    pub cgroups: Vec<CgroupSpec>,
    pub tasks: Vec<TaskSpec>,
    pub policy: PolicyKind,
    #[serde(default)]
    pub policy_params: PolicyParams,
    #[serde(default)]
    pub engine: EngineParams,
    /// Application-based scheduler hinting; lock events are always traced,
    /// but boosts are only emitted when enabled.
    #[serde(default = "default_true")]
    pub hinting: bool,
    #[serde(default)]
    pub events: Vec<ScenarioEventSpec>,
    #[serde(default)]
    pub outputs: Option<OutputSpec>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Json(String),
    #[error("{path}: {err}")]
    Model { path: String, err: ModelError },
    #[error("{path}: {msg}")]
    Invalid { path: String, msg: String },
}

/// A validated scenario, ready to simulate.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub cgroups: Vec<Cgroup>,
    pub cgroup_by_name: BTreeMap<String, CgroupId>,
    /// Per task (config order): cgroup id and affinity set.
    pub task_cgroup: Vec<CgroupId>,
    pub task_affinity: Vec<BTreeSet<CpuId>>,
}

impl ScenarioConfig {
    pub fn from_json(input: &str) -> Result<ScenarioConfig, ConfigError> {
        serde_json::from_str(input).map_err(|e| ConfigError::Json(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("config serializes");
        out.push('\n');
        out
    }

    pub fn validate(self) -> Result<Scenario, ConfigError> {
        if self.cpus == 0 {
            return Err(ConfigError::Invalid {
                path: "cpus".into(),
                msg: "at least one CPU required".into(),
            });
        }
        if self.engine.slice_us == 0 {
            return Err(ConfigError::Invalid {
                path: "engine.slice_us".into(),
                msg: "slice must be positive".into(),
            });
        }
        if self.engine.warmup_us >= self.engine.duration_us {
            return Err(ConfigError::Invalid {
                path: "engine.warmup_us".into(),
                msg: format!(
                    "warmup ({}) must be below duration ({})",
                    self.engine.warmup_us, self.engine.duration_us
                ),
            });
        }

        let mut cgroup_by_name = BTreeMap::new();
        for (i, spec) in self.cgroups.iter().enumerate() {
            if cgroup_by_name
                .insert(spec.name.clone(), CgroupId(i as u32))
                .is_some()
            {
                return Err(ConfigError::Invalid {
                    path: format!("cgroups[{i}].name"),
                    msg: format!("duplicate cgroup name {:?}", spec.name),
                });
            }
        }

        let mut cgroups = Vec::with_capacity(self.cgroups.len());
        for (i, spec) in self.cgroups.iter().enumerate() {
            let path = format!("cgroups[{i}]");
            let tier = Tier::from_cgroup_name(&spec.name)
                .map_err(|err| ConfigError::Model { path: path.clone(), err })?;
            if !(WEIGHT_MIN..=WEIGHT_MAX).contains(&spec.weight) {
                return Err(ConfigError::Invalid {
                    path: format!("{path}.weight"),
                    msg: format!("weight {} outside [1, 10000]", spec.weight),
                });
            }
            let parent = match &spec.parent {
                None => None,
                Some(pname) => Some(*cgroup_by_name.get(pname).ok_or_else(|| {
                    ConfigError::Invalid {
                        path: format!("{path}.parent"),
                        msg: format!("unknown parent cgroup {pname:?}"),
                    }
                })?),
            };
            cgroups.push(Cgroup {
                id: CgroupId(i as u32),
                name: spec.name.clone(),
                parent,
                tier,
                weight: Weight(spec.weight),
                group_vruntime: 0,
                group_queue: BTreeSet::new(),
                charge_scale: crate::model::ChargeScale { num: 1, den: 1 },
            });
        }
        validate_hierarchy(&cgroups).map_err(|err| ConfigError::Model {
            path: "cgroups".into(),
            err,
        })?;
        for i in 0..cgroups.len() {
            cgroups[i].charge_scale =
                charge_scale(&cgroups, CgroupId(i as u32)).map_err(|err| ConfigError::Model {
                    path: format!("cgroups[{i}]"),
                    err,
                })?;
        }

        let mut task_cgroup = Vec::with_capacity(self.tasks.len());
        let mut task_affinity = Vec::with_capacity(self.tasks.len());
        for (i, spec) in self.tasks.iter().enumerate() {
            let path = format!("tasks[{i}]");
            if spec.id as usize != i {
                return Err(ConfigError::Invalid {
                    path: format!("{path}.id"),
                    msg: format!("task ids must be dense 0..n in order; expected {i}, got {}", spec.id),
                });
            }
            let cg = *cgroup_by_name
                .get(&spec.cgroup)
                .ok_or_else(|| ConfigError::Invalid {
                    path: format!("{path}.cgroup"),
                    msg: format!("unknown cgroup {:?}", spec.cgroup),
                })?;
            let affinity: BTreeSet<CpuId> = match &spec.affinity {
                None => (0..self.cpus).map(CpuId).collect(),
                Some(list) => {
                    if list.is_empty() {
                        return Err(ConfigError::Invalid {
                            path: format!("{path}.affinity"),
                            msg: "affinity must not be empty".into(),
                        });
                    }
                    let set: BTreeSet<CpuId> = list.iter().map(|&c| CpuId(c)).collect();
                    if let Some(bad) = set.iter().find(|c| c.0 >= self.cpus) {
                        return Err(ConfigError::Invalid {
                            path: format!("{path}.affinity"),
                            msg: format!("CPU {} outside 0..{}", bad.0, self.cpus),
                        });
                    }
                    set
                }
            };
            if spec.start_us * 1_000 >= self.engine.duration_ns() {
                return Err(ConfigError::Invalid {
                    path: format!("{path}.start_us"),
                    msg: "task starts after the run ends".into(),
                });
            }
            spec.workload.validate().map_err(|msg| ConfigError::Invalid {
                path: format!("{path}.workload"),
                msg,
            })?;
            task_cgroup.push(cg);
            task_affinity.push(affinity);
        }

        for (i, ev) in self.events.iter().enumerate() {
            match ev {
                ScenarioEventSpec::ReassignCgroup { task, cgroup, .. } => {
                    if *task as usize >= self.tasks.len() {
                        return Err(ConfigError::Invalid {
                            path: format!("events[{i}].task"),
                            msg: format!("unknown task {task}"),
                        });
                    }
                    if !cgroup_by_name.contains_key(cgroup) {
                        return Err(ConfigError::Invalid {
                            path: format!("events[{i}].cgroup"),
                            msg: format!("unknown cgroup {cgroup:?}"),
                        });
                    }
                }
            }
        }

        Ok(Scenario {
            config: self,
            cgroups,
            cgroup_by_name,
            task_cgroup,
            task_affinity,
        })
    }
}

pub const PRESET_NAMES: [&str; 9] = [
    "solo_bursty",
    "solo_bound",
    "min_max",
    "fifty_fifty",
    "oversub_16",
    "oversub_24",
    "mixed_weights",
    "lock_inversion",
    "lock_inversion_baseline",
];

/// Builds one of the embedded presets with the given policy.
pub fn preset(name: &str, policy: PolicyKind) -> Option<ScenarioConfig> {
    let cfg = match name {
        "solo_bursty" => mix_preset(name, policy, 8, 0, 8),
        "solo_bound" => solo_bound(policy),
        "min_max" => mix_preset(name, policy, 8, 8, 8),
        "oversub_16" => mix_preset(name, policy, 16, 8, 8),
        "oversub_24" => mix_preset(name, policy, 24, 8, 8),
        "fifty_fifty" => fifty_fifty(policy),
        "mixed_weights" => mixed_weights(policy),
        "lock_inversion" => lock_inversion(policy, true),
        "lock_inversion_baseline" => lock_inversion(policy, false),
        _ => return None,
    };
    Some(cfg)
}

fn base(name: &str, policy: PolicyKind, cpus: u32) -> ScenarioConfig {
    ScenarioConfig {
        name: name.to_string(),
        cpus,
        cgroups: Vec::new(),
        tasks: Vec::new(),
        policy,
        policy_params: PolicyParams::default(),
        engine: EngineParams::default(),
        hinting: true,
        events: Vec::new(),
        outputs: None,
    }
}

fn push_tasks(
    cfg: &mut ScenarioConfig,
    count: usize,
    cgroup: &str,
    label: &str,
    workload: WorkloadSpec,
) {
    for _ in 0..count {
        let id = cfg.tasks.len() as u32;
        cfg.tasks.push(TaskSpec {
            id,
            name: Some(format!("{label}{id}")),
            cgroup: cgroup.to_string(),
            workload: workload.clone(),
            affinity: None,
            start_us: 0,
        });
    }
}

/// N bursty time-sensitive clients against M bound background workers.
fn mix_preset(
    name: &str,
    policy: PolicyKind,
    bursty: usize,
    bound: usize,
    cpus: u32,
) -> ScenarioConfig {
    let mut cfg = base(name, policy, cpus);
    cfg.cgroups.push(CgroupSpec {
        name: "ts_hi".into(),
        parent: None,
        weight: 10_000,
    });
    push_tasks(&mut cfg, bursty, "ts_hi", "client", WorkloadSpec::bursty_default());
    if bound > 0 {
        cfg.cgroups.push(CgroupSpec {
            name: "bg_lo".into(),
            parent: None,
            weight: 1,
        });
        push_tasks(&mut cfg, bound, "bg_lo", "batch", WorkloadSpec::bound_default());
    }
    cfg
}

fn solo_bound(policy: PolicyKind) -> ScenarioConfig {
    let mut cfg = base("solo_bound", policy, 8);
    cfg.cgroups.push(CgroupSpec {
        name: "bg_lo".into(),
        parent: None,
        weight: 1,
    });
    push_tasks(&mut cfg, 8, "bg_lo", "batch", WorkloadSpec::bound_default());
    cfg
}

/// Bursty and bound workers at the same (high) priority.
fn fifty_fifty(policy: PolicyKind) -> ScenarioConfig {
    let mut cfg = base("fifty_fifty", policy, 8);
    cfg.cgroups.push(CgroupSpec {
        name: "ts_hi".into(),
        parent: None,
        weight: 10_000,
    });
    cfg.cgroups.push(CgroupSpec {
        name: "ts_bound".into(),
        parent: None,
        weight: 10_000,
    });
    push_tasks(&mut cfg, 8, "ts_hi", "client", WorkloadSpec::bursty_default());
    push_tasks(&mut cfg, 8, "ts_bound", "batch", WorkloadSpec::bound_default());
    cfg
}

/// Two cgroups per tier with a 2:3 weight ratio in each.
fn mixed_weights(policy: PolicyKind) -> ScenarioConfig {
    let mut cfg = base("mixed_weights", policy, 8);
    for (name, weight) in [
        ("ts_w6667", 6_667),
        ("ts_w10000", 10_000),
        ("bg_w2", 2),
        ("bg_w3", 3),
    ] {
        cfg.cgroups.push(CgroupSpec {
            name: name.into(),
            parent: None,
            weight,
        });
    }
    push_tasks(&mut cfg, 8, "ts_w6667", "client_lo", WorkloadSpec::bursty_default());
    push_tasks(&mut cfg, 8, "ts_w10000", "client_hi", WorkloadSpec::bursty_default());
    push_tasks(&mut cfg, 8, "bg_w2", "batch_lo", WorkloadSpec::bound_default());
    push_tasks(&mut cfg, 8, "bg_w3", "batch_hi", WorkloadSpec::bound_default());
    cfg
}

/// The spinlock micro-experiment: a background holder, a time-sensitive
/// waiter and (unless baseline) a time-sensitive burner, pinned to CPU 0.
fn lock_inversion(policy: PolicyKind, with_burner: bool) -> ScenarioConfig {
    let name = if with_burner {
        "lock_inversion"
    } else {
        "lock_inversion_baseline"
    };
    let mut cfg = base(name, policy, 1);
    cfg.engine.duration_us = 150_000_000;
    cfg.engine.warmup_us = 0;
    cfg.cgroups.push(CgroupSpec {
        name: "bg_hold".into(),
        parent: None,
        weight: 1,
    });
    cfg.cgroups.push(CgroupSpec {
        name: "ts_lock".into(),
        parent: None,
        weight: 10_000,
    });
    cfg.tasks.push(TaskSpec {
        id: 0,
        name: Some("holder".into()),
        cgroup: "bg_hold".into(),
        workload: WorkloadSpec::lock_holder_default(0),
        affinity: Some(vec![0]),
        start_us: 0,
    });
    cfg.tasks.push(TaskSpec {
        id: 1,
        name: Some("waiter".into()),
        cgroup: "ts_lock".into(),
        workload: WorkloadSpec::lock_waiter_default(0),
        affinity: Some(vec![0]),
        start_us: 10_000,
    });
    if with_burner {
        cfg.tasks.push(TaskSpec {
            id: 2,
            name: Some("burner".into()),
            cgroup: "ts_lock".into(),
            workload: WorkloadSpec::bound_default(),
            affinity: Some(vec![0]),
            start_us: 20_000,
        });
    }
    cfg
}
