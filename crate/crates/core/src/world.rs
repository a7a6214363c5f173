//! Mutable simulation state shared between the engine and the active
//! scheduling policy.

use std::collections::BTreeMap;

use crate::model::{
    Cgroup, CgroupId, CpuId, CpuState, LockId, LockState, SimTime, Task, TaskId, TaskState, Tier,
};
use crate::scenario::SchedClass;
use crate::trace::{EnqueueTarget, EventKind, KickReason, Trace};

/// Where a task currently sits. Every task is in exactly one place;
/// transitions are asserted so double-queueing bugs surface immediately.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    /// Blocked, finished, panicked, or runnable-in-transit within one
    /// event handler.
    Nowhere,
    Local(CpuId),
    Group(CgroupId),
    RtQueue(CpuId),
    IdleQueue(CpuId),
    Running(CpuId),
}

#[derive(Debug, Clone, Copy)]
pub struct EngineTunables {
    pub slice_ns: u64,
    pub ctx_switch_cost_ns: u64,
    pub migration_cost_ns: u64,
    pub duration_ns: u64,
    pub warmup_ns: u64,
}

#[derive(Debug, Clone, Default)]
pub struct Diagnostics {
    /// Dispatch gave up after the bounded retry limit with work left.
    pub dispatch_retry_exhausted: u64,
    /// A boosted task blocked without holding its boosting lock.
    pub boost_leaks: u64,
}

#[derive(Debug)]
pub struct World {
    pub now: SimTime,
    pub tunables: EngineTunables,
    pub cgroups: Vec<Cgroup>,
    pub tasks: Vec<Task>,
    pub cpus: Vec<CpuState>,
    pub locks: BTreeMap<LockId, LockState>,
    /// Scheduling class per task under the active policy.
    pub classes: Vec<SchedClass>,
    pub placement: Vec<Placement>,
    /// Key a queued task was inserted under (valid while queued).
    pub queued_key: Vec<u64>,
    pub trace: Trace,
    /// Kicks requested by the policy during the current event; the engine
    /// drains these, traces them and schedules their processing.
    pub pending_kicks: Vec<(CpuId, KickReason)>,
    /// One unprocessed kick per CPU at a time; placement decisions treat
    /// a kick-pending CPU as already spoken for.
    pub kick_pending: Vec<bool>,
    /// Silent reschedule requests at a future time (no trace event).
    pub pending_resched: Vec<(SimTime, CpuId)>,
    pub diag: Diagnostics,
}

impl World {
    pub fn tier_of(&self, task: TaskId) -> Tier {
        self.cgroups[self.tasks[task.0 as usize].cgroup.0 as usize].tier
    }

    /// Tier used for scheduling decisions: boosted tasks count as
    /// time-sensitive.
    pub fn sched_tier_of(&self, task: TaskId) -> Tier {
        let t = &self.tasks[task.0 as usize];
        t.scheduling_tier(self.cgroups[t.cgroup.0 as usize].tier)
    }

    pub fn task(&self, task: TaskId) -> &Task {
        &self.tasks[task.0 as usize]
    }

    pub fn task_mut(&mut self, task: TaskId) -> &mut Task {
        &mut self.tasks[task.0 as usize]
    }

    pub fn cgroup_of(&self, task: TaskId) -> &Cgroup {
        &self.cgroups[self.tasks[task.0 as usize].cgroup.0 as usize]
    }

    pub fn kick(&mut self, cpu: CpuId, reason: KickReason) {
        self.pending_kicks.push((cpu, reason));
    }

    pub fn resched_at(&mut self, time: SimTime, cpu: CpuId) {
        self.pending_resched.push((time, cpu));
    }

    pub fn set_placement(&mut self, task: TaskId, from: Placement, to: Placement) {
        let cur = self.placement[task.0 as usize];
        assert_eq!(
            cur, from,
            "task {task} placement {cur:?} != expected {from:?} (moving to {to:?}) at {}",
            self.now
        );
        self.placement[task.0 as usize] = to;
    }

    /// Inserts a runnable task into a CPU's local queue under the given
    /// key and traces it.
    pub fn local_insert_keyed(&mut self, cpu: CpuId, task: TaskId, key: u64) {
        self.set_placement(task, Placement::Nowhere, Placement::Local(cpu));
        let inserted = self.cpus[cpu.0 as usize].local_queue.insert((key, task));
        assert!(inserted, "task {task} already in local queue of cpu {cpu}");
        self.queued_key[task.0 as usize] = key;
        self.trace.push(
            self.now,
            EventKind::Enqueue {
                task,
                target: EnqueueTarget::Local(cpu),
            },
        );
    }

    /// Inserts under the task's own queue key (vruntime, or the boost key
    /// while boosted).
    pub fn local_insert(&mut self, cpu: CpuId, task: TaskId) {
        let key = self.tasks[task.0 as usize].queue_key();
        self.local_insert_keyed(cpu, task, key);
    }

    pub fn local_remove_task(&mut self, cpu: CpuId, task: TaskId) {
        let key = self.queued_key[task.0 as usize];
        let removed = self.cpus[cpu.0 as usize].local_queue.remove(&(key, task));
        assert!(removed, "task {task} missing from local queue of cpu {cpu}");
        self.set_placement(task, Placement::Local(cpu), Placement::Nowhere);
    }

    /// Pops the lowest-keyed task from a CPU's local queue.
    pub fn local_pop(&mut self, cpu: CpuId) -> Option<TaskId> {
        let (_, task) = self.cpus[cpu.0 as usize].local_queue.iter().next().copied()?;
        self.local_remove_task(cpu, task);
        Some(task)
    }

    /// Inserts a runnable background task into its cgroup queue, keyed by
    /// vruntime, and traces it.
    pub fn group_insert(&mut self, task: TaskId) {
        let t = &self.tasks[task.0 as usize];
        let cg = t.cgroup;
        let key = t.vruntime;
        self.set_placement(task, Placement::Nowhere, Placement::Group(cg));
        let inserted = self.cgroups[cg.0 as usize].group_queue.insert((key, task));
        assert!(inserted, "task {task} already in group queue");
        self.queued_key[task.0 as usize] = key;
        self.trace.push(
            self.now,
            EventKind::Enqueue {
                task,
                target: EnqueueTarget::Group(cg),
            },
        );
    }

    pub fn group_remove(&mut self, cg: CgroupId, key: u64, task: TaskId) {
        let removed = self.cgroups[cg.0 as usize].group_queue.remove(&(key, task));
        assert!(removed, "task {task} missing from group queue");
        self.set_placement(task, Placement::Group(cg), Placement::Nowhere);
    }

    /// Lowest-vruntime queued task of a cgroup that may run on `cpu`.
    pub fn group_min_for_cpu(&self, cg: CgroupId, cpu: CpuId) -> Option<(u64, TaskId)> {
        self.cgroups[cg.0 as usize]
            .group_queue
            .iter()
            .find(|(_, t)| self.tasks[t.0 as usize].affinity.contains(&cpu))
            .copied()
    }

    /// Idle CPUs the task may run on that have no kick on the way yet.
    pub fn idle_cpus_in_affinity(&self, task: TaskId) -> impl Iterator<Item = CpuId> + '_ {
        let affinity = self.tasks[task.0 as usize].affinity.clone();
        self.cpus
            .iter()
            .filter(move |c| {
                affinity.contains(&c.id) && c.is_idle() && !self.kick_pending[c.id.0 as usize]
            })
            .map(|c| c.id)
    }

    /// Raises a task's vruntime to within one slice of its cgroup's
    /// virtual runtime, preventing credit hoarding after long sleeps.
    pub fn clamp_vruntime(&mut self, task: TaskId) {
        let t = &self.tasks[task.0 as usize];
        let group_vr = self.cgroups[t.cgroup.0 as usize].group_vruntime;
        let bound = clamp_vruntime(t.vruntime, group_vr, self.tunables.slice_ns);
        self.tasks[task.0 as usize].vruntime = bound;
    }

    pub fn assert_runnable(&self, task: TaskId) {
        let state = self.tasks[task.0 as usize].state;
        assert_eq!(
            state,
            TaskState::Runnable,
            "task {task} must be runnable, is {state:?} at {}",
            self.now
        );
    }
}

/// `task_vr' = max(task_vr, cgroup_vr - slice)`.
pub fn clamp_vruntime(task_vr: u64, cgroup_vr: u64, slice: u64) -> u64 {
    task_vr.max(cgroup_vr.saturating_sub(slice))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MILLIS;

    #[test]
    fn clamp_raises_only_when_lagging_beyond_one_slice() {
        // Lag exceeds one slice: raised to the bound.
        assert_eq!(clamp_vruntime(0, 1000 * MILLIS, 4 * MILLIS), 996 * MILLIS);
        // Within the bound: unchanged.
        assert_eq!(
            clamp_vruntime(999 * MILLIS, 1000 * MILLIS, 4 * MILLIS),
            999 * MILLIS
        );
        // Ahead of the group: unchanged.
        assert_eq!(
            clamp_vruntime(1200 * MILLIS, 1000 * MILLIS, 4 * MILLIS),
            1200 * MILLIS
        );
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::model::{charge_scale, Cgroup, CgroupId, CpuState, Task, TaskState, Weight};
    use crate::scenario::SchedClass;
    use std::collections::BTreeSet;

    /// Minimal world for policy-level tests: flat cgroups, everyone
    /// runnable, all CPUs in every task's affinity.
    pub(crate) fn world(cpus: u32, cgroups: &[(&str, u32)], task_cgroups: &[u32]) -> World {
        let mut groups: Vec<Cgroup> = cgroups
            .iter()
            .enumerate()
            .map(|(i, (name, weight))| Cgroup {
                id: CgroupId(i as u32),
                name: name.to_string(),
                parent: None,
                tier: crate::model::Tier::from_cgroup_name(name).unwrap(),
                weight: Weight::new(*weight).unwrap(),
                group_vruntime: 0,
                group_queue: BTreeSet::new(),
                charge_scale: crate::model::ChargeScale { num: 1, den: 1 },
            })
            .collect();
        for i in 0..groups.len() {
            groups[i].charge_scale = charge_scale(&groups, CgroupId(i as u32)).unwrap();
        }
        let affinity: BTreeSet<CpuId> = (0..cpus).map(CpuId).collect();
        let tasks: Vec<Task> = task_cgroups
            .iter()
            .enumerate()
            .map(|(i, &cg)| Task {
                id: TaskId(i as u32),
                name: format!("t{i}"),
                cgroup: CgroupId(cg),
                state: TaskState::Runnable,
                vruntime: 0,
                affinity: affinity.clone(),
                boosted: false,
                boost_lock: None,
                boost_key: 0,
                boost_scale: None,
                last_cpu: None,
            })
            .collect();
        let classes = tasks.iter().map(|_| SchedClass::Normal).collect();
        let n = tasks.len();
        World {
            now: 0,
            tunables: EngineTunables {
                slice_ns: 4_000_000,
                ctx_switch_cost_ns: 5_000,
                migration_cost_ns: 20_000,
                duration_ns: 60_000_000_000,
                warmup_ns: 0,
            },
            cgroups: groups,
            tasks,
            cpus: (0..cpus).map(|c| CpuState::new(CpuId(c))).collect(),
            locks: Default::default(),
            classes,
            placement: vec![Placement::Nowhere; n],
            queued_key: vec![0; n],
            trace: crate::trace::Trace::default(),
            pending_kicks: Vec::new(),
            kick_pending: vec![false; cpus as usize],
            pending_resched: Vec::new(),
            diag: Diagnostics::default(),
        }
    }

    /// Marks a task as running on a CPU without going through a policy.
    pub(crate) fn occupy(w: &mut World, cpu: u32, task: u32, since: SimTime) {
        w.cpus[cpu as usize].current = Some(TaskId(task));
        w.cpus[cpu as usize].current_since = since;
        w.placement[task as usize] = Placement::Running(CpuId(cpu));
        w.tasks[task as usize].state = TaskState::Running;
        w.tasks[task as usize].last_cpu = Some(CpuId(cpu));
    }
}
