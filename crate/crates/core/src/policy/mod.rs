//! Scheduling policies. The engine owns all state and invokes the active
//! policy's callbacks at enqueue, dispatch, charge and timer boundaries.

mod fair;
mod rt;
mod tree;
mod ufs;

pub use fair::EevdfPolicy;
pub use rt::RtPolicy;
pub use tree::RunnableTree;
pub use ufs::UfsPolicy;

use crate::model::{ChargeScale, CpuId, SimTime, TaskId};
use crate::scenario::{PolicyKind, PolicyParams};
use crate::world::World;

/// Why a task is being (re-)enqueued.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnqueueReason {
    /// Blocked -> Runnable transition: full CPU selection applies.
    Wakeup,
    /// Ran out its slice; stays on the same CPU's queues.
    SliceExpiry,
    /// Kicked off a CPU mid-slice.
    Preempted,
    /// Re-placement forced by a boost.
    BoostMove,
    /// Re-placement after an unboost found the task queued.
    Unboost,
}

/// Recurring policy work driven by engine timer events.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyTimer {
    /// Periodic load balancing across CPU queues.
    Balance,
    /// Fair-server replenish point for one CPU.
    FairGrant(CpuId),
}

pub trait Policy {
    fn kind(&self) -> PolicyKind;

    /// Places a runnable task into a queue; may request kicks.
    fn enqueue(&mut self, w: &mut World, task: TaskId, reason: EnqueueReason);

    /// Picks the next task for a CPU that needs work, removing it from
    /// whatever queue held it.
    fn pick_next(&mut self, w: &mut World, cpu: CpuId) -> Option<TaskId>;

    /// Charges `ran` nanoseconds of CPU to the task that just vacated.
    fn charge(&mut self, w: &mut World, task: TaskId, ran: u64);

    /// Slice granted to a task as it starts running. `u64::MAX` means
    /// run-to-block.
    fn slice_for(&self, w: &World, task: TaskId) -> u64;

    /// Whether a kick should displace the CPU's current occupant.
    fn preempt_decision(&mut self, w: &World, cpu: CpuId) -> bool;

    /// Initial recurring timers, as (first fire time, timer) pairs.
    fn timers(&self, w: &World) -> Vec<(SimTime, PolicyTimer)>;

    /// Handles a timer; returns the next occurrence, if any.
    fn on_timer(&mut self, w: &mut World, timer: PolicyTimer) -> Option<(SimTime, PolicyTimer)>;

    /// Boost bookkeeping. `waiter_scale` is the charging scale of the
    /// time-sensitive task waiting on the lock.
    fn on_boost(&mut self, w: &mut World, task: TaskId, waiter_scale: ChargeScale);

    fn on_unboost(&mut self, w: &mut World, task: TaskId);

    /// Removes a queued task from the policy's structures (cgroup
    /// reassignment and similar surgery).
    fn dequeue(&mut self, w: &mut World, task: TaskId);

    fn diagnostics(&self) -> Vec<(&'static str, u64)> {
        Vec::new()
    }
}

pub fn build_policy(kind: PolicyKind, params: &PolicyParams, w: &World) -> Box<dyn Policy> {
    match kind {
        PolicyKind::Ufs => Box::new(UfsPolicy::new(params, w)),
        PolicyKind::Eevdf | PolicyKind::Idle => Box::new(EevdfPolicy::new(kind, params, w)),
        PolicyKind::Fifo | PolicyKind::Rr => Box::new(RtPolicy::new(kind, params, w)),
    }
}
