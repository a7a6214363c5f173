//! Domain types shared by the engine, policies, workloads and metrics.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Nanoseconds since simulation start.
pub type SimTime = u64;

/// A span of simulated time, in nanoseconds.
pub type DurationNs = u64;

pub const MILLIS: u64 = 1_000_000;
pub const MICROS: u64 = 1_000;
pub const SECONDS: u64 = 1_000_000_000;

/// Dense task index. Also serves as the "PID" carried in hint map entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskId(pub u32);

/// Dense cgroup index, assigned in configuration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CgroupId(pub u32);

/// CPU index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CpuId(pub u32);

/// Lock identifier, scoped to one scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LockId(pub u32);

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::fmt::Display for CpuId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The two scheduling tiers. Time-sensitive work always takes precedence
/// over background work, regardless of cgroup weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    TimeSensitive,
    Background,
}

impl Tier {
    /// Tier is derived from the cgroup name prefix: `ts_` or `bg_`.
    pub fn from_cgroup_name(name: &str) -> Result<Tier, ModelError> {
        if name.starts_with("ts_") {
            Ok(Tier::TimeSensitive)
        } else if name.starts_with("bg_") {
            Ok(Tier::Background)
        } else {
            Err(ModelError::TierName(name.to_string()))
        }
    }
}

/// cgroup CPU weight, valid range [1, 10000].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Weight(pub u32);

pub const WEIGHT_MIN: u32 = 1;
pub const WEIGHT_MAX: u32 = 10_000;

/// Anchors virtual runtime to wall time: a cgroup at the default weight
/// accrues vruntime at exactly wall-clock rate.
pub const WEIGHT_SCALE: u64 = 100;

impl Weight {
    pub fn new(value: u32) -> Result<Weight, ModelError> {
        if (WEIGHT_MIN..=WEIGHT_MAX).contains(&value) {
            Ok(Weight(value))
        } else {
            Err(ModelError::WeightOutOfRange(value))
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("cgroup name {0:?} must start with \"ts_\" or \"bg_\"")]
    TierName(String),
    #[error("weight {0} outside [1, 10000]")]
    WeightOutOfRange(u32),
    #[error("unknown parent cgroup id {0:?}")]
    UnknownParent(CgroupId),
    #[error("cgroup hierarchy contains a cycle through {0:?}")]
    HierarchyCycle(CgroupId),
    #[error("cgroup {child:?} tier differs from ancestor {ancestor:?}")]
    MixedTierSubtree { child: CgroupId, ancestor: CgroupId },
}

/// Scale factor applied when charging runtime to virtual runtime.
///
/// `delta_vruntime = ran * WEIGHT_SCALE * den / num`, where `num/den` is
/// the cgroup's own weight multiplied by its ancestors' static shares.
/// For a cgroup directly under the root this is just its own weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChargeScale {
    pub num: u64,
    pub den: u64,
}

impl ChargeScale {
    pub fn charge(&self, ran: DurationNs) -> u64 {
        (ran as u128 * WEIGHT_SCALE as u128 * self.den as u128 / self.num as u128) as u64
    }
}

/// Weighted cgroup, owner of a tier, a group run queue and a group
/// virtual runtime counter.
#[derive(Debug, Clone)]
pub struct Cgroup {
    pub id: CgroupId,
    pub name: String,
    pub parent: Option<CgroupId>,
    pub tier: Tier,
    pub weight: Weight,
    /// Advanced by one weight-scaled slice each time the cgroup is picked
    /// at dispatch. Monotonically non-decreasing.
    pub group_vruntime: u64,
    /// Runnable, not-currently-running member tasks keyed by vruntime.
    pub group_queue: BTreeSet<(u64, TaskId)>,
    pub charge_scale: ChargeScale,
}

impl Cgroup {
    pub fn min_queued(&self) -> Option<(u64, TaskId)> {
        self.group_queue.iter().next().copied()
    }
}

/// Task lifecycle. `Blocked -> Runnable` is the only way out of Blocked;
/// a Running task may become Runnable, Blocked, Finished or Panicked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskState {
    Runnable,
    Running,
    Blocked,
    Finished,
    Panicked,
}

/// A schedulable worker.
#[derive(Debug, Clone)]
pub struct Task {
    pub id: TaskId,
    pub name: String,
    pub cgroup: CgroupId,
    pub state: TaskState,
    /// Weight-scaled nanoseconds; monotonically non-decreasing.
    pub vruntime: u64,
    pub affinity: BTreeSet<CpuId>,
    pub boosted: bool,
    pub boost_lock: Option<LockId>,
    /// Queue-ordering key used while boosted. Separate from `vruntime`
    /// so the home-tier counter stays monotonic across boost cycles.
    pub boost_key: u64,
    /// Charge scale inherited from the lock waiter that caused the boost.
    pub boost_scale: Option<ChargeScale>,
    pub last_cpu: Option<CpuId>,
}

impl Task {
    /// Effective tier for scheduling decisions: boosted background tasks
    /// are handled as time-sensitive until unboosted.
    pub fn scheduling_tier(&self, home: Tier) -> Tier {
        if self.boosted {
            Tier::TimeSensitive
        } else {
            home
        }
    }

    /// Key used for ordering in CPU-local queues.
    pub fn queue_key(&self) -> u64 {
        if self.boosted {
            self.boost_key
        } else {
            self.vruntime
        }
    }
}

/// Per-CPU scheduler state.
#[derive(Debug, Clone)]
pub struct CpuState {
    pub id: CpuId,
    /// Runnable tasks committed to this CPU, keyed by (queue key, task id).
    pub local_queue: BTreeSet<(u64, TaskId)>,
    pub current: Option<TaskId>,
    /// When the current occupant started running (after switch overhead).
    pub current_since: SimTime,
    /// The background cgroup this CPU last committed to at dispatch.
    pub current_cgroup: Option<CgroupId>,
    /// Bumped on every scheduling change; stale timer events are dropped.
    pub epoch: u64,
}

impl CpuState {
    pub fn new(id: CpuId) -> Self {
        CpuState {
            id,
            local_queue: BTreeSet::new(),
            current: None,
            current_since: 0,
            current_cgroup: None,
            epoch: 0,
        }
    }

    /// A CPU is idle when nothing runs and nothing is queued locally.
    pub fn is_idle(&self) -> bool {
        self.current.is_none() && self.local_queue.is_empty()
    }

    pub fn queued_count(&self) -> usize {
        self.local_queue.len()
    }

    pub fn min_queued(&self) -> Option<(u64, TaskId)> {
        self.local_queue.iter().next().copied()
    }
}

/// Shared lock state. Waiter bookkeeping feeds the hinting channel and
/// the stuck-lock panic counter.
#[derive(Debug, Clone, Default)]
pub struct LockState {
    pub holder: Option<TaskId>,
    pub waiters: BTreeSet<TaskId>,
    /// Consecutive failed acquisition attempts per waiter; reset on success.
    pub consecutive_failures: std::collections::BTreeMap<TaskId, u32>,
}

/// Lock activity reported through the hinting channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HintKind {
    Attempt,
    Acquired,
    Released,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HintEvent {
    pub worker: TaskId,
    pub lock: LockId,
    pub kind: HintKind,
}

/// Product over ancestors of (weight / sum of runnable sibling weights).
///
/// `runnable` restricts which siblings count at each level; the root
/// level has share 1. Returns an (num, den) rational.
pub fn effective_share(
    cgroups: &[Cgroup],
    id: CgroupId,
    runnable: &BTreeSet<CgroupId>,
) -> Result<(u64, u64), ModelError> {
    let mut num: u128 = 1;
    let mut den: u128 = 1;
    let mut cur = id;
    let mut hops = 0;
    loop {
        let cg = cgroups
            .get(cur.0 as usize)
            .ok_or(ModelError::UnknownParent(cur))?;
        let sibling_sum: u64 = cgroups
            .iter()
            .filter(|c| c.parent == cg.parent && runnable.contains(&c.id))
            .map(|c| c.weight.0 as u64)
            .sum();
        // A level where no sibling is runnable contributes this cgroup's
        // full weight as the denominator (it is the only claimant).
        let sum = if sibling_sum == 0 {
            cg.weight.0 as u64
        } else {
            sibling_sum
        };
        num *= cg.weight.0 as u128;
        den *= sum as u128;
        match cg.parent {
            Some(p) => cur = p,
            None => break,
        }
        hops += 1;
        if hops > cgroups.len() {
            return Err(ModelError::HierarchyCycle(id));
        }
    }
    let g = gcd(num, den);
    Ok(((num / g) as u64, (den / g) as u64))
}

/// Static charge scale: own weight times the product of ancestor shares
/// over *all* siblings. For a flat hierarchy this is the cgroup weight.
pub fn charge_scale(cgroups: &[Cgroup], id: CgroupId) -> Result<ChargeScale, ModelError> {
    let cg = cgroups
        .get(id.0 as usize)
        .ok_or(ModelError::UnknownParent(id))?;
    let mut num: u128 = cg.weight.0 as u128;
    let mut den: u128 = 1;
    let mut cur = cg.parent;
    let mut hops = 0;
    while let Some(pid) = cur {
        let parent = cgroups
            .get(pid.0 as usize)
            .ok_or(ModelError::UnknownParent(pid))?;
        let sibling_sum: u128 = cgroups
            .iter()
            .filter(|c| c.parent == parent.parent)
            .map(|c| c.weight.0 as u128)
            .sum();
        num *= parent.weight.0 as u128;
        den *= sibling_sum;
        cur = parent.parent;
        hops += 1;
        if hops > cgroups.len() {
            return Err(ModelError::HierarchyCycle(id));
        }
    }
    let g = gcd(num, den);
    Ok(ChargeScale {
        num: (num / g) as u64,
        den: (den / g) as u64,
    })
}

/// Rejects cycles and mixed-tier subtrees; every leaf's tier must match
/// all of its ancestors.
pub fn validate_hierarchy(cgroups: &[Cgroup]) -> Result<(), ModelError> {
    for cg in cgroups {
        let mut cur = cg.parent;
        let mut hops = 0;
        while let Some(pid) = cur {
            let parent = cgroups
                .get(pid.0 as usize)
                .ok_or(ModelError::UnknownParent(pid))?;
            if parent.tier != cg.tier {
                return Err(ModelError::MixedTierSubtree {
                    child: cg.id,
                    ancestor: parent.id,
                });
            }
            cur = parent.parent;
            hops += 1;
            if hops > cgroups.len() {
                return Err(ModelError::HierarchyCycle(cg.id));
            }
        }
    }
    Ok(())
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        let t = b;
        b = a % b;
        a = t;
    }
    a.max(1)
}
