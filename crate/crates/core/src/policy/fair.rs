//! EEVDF-style baseline: virtual deadlines over weight-scaled vruntime,
//! racy idle scans at wakeup, periodic load balancing, and an IDLE class
//! that only runs on otherwise-idle CPUs.
//!
//! Deliberately models the documented behaviors only: no wakeup
//! preemption within the normal class (slice protection), and an idle
//! check that sees just the running task, so concurrent wakeups can pile
//! onto the same CPU the way racy placement does.

use std::collections::BTreeSet;

use crate::model::{ChargeScale, CpuId, SimTime, TaskId};
use crate::policy::{EnqueueReason, Policy, PolicyTimer};
use crate::scenario::{PolicyKind, PolicyParams, SchedClass};
use crate::trace::{EnqueueTarget, EventKind, KickReason};
use crate::world::{Placement, World};

/// Shared queueing core for the normal (and idle) classes; used by the
/// EEVDF policy directly and by the RT policy for its low-priority side.
pub(crate) struct FairCore {
    /// Virtual deadline per task; the local-queue ordering key.
    deadlines: Vec<u64>,
    /// IDLE-class tasks wait here, keyed by vruntime.
    idle_queues: Vec<BTreeSet<(u64, TaskId)>>,
    /// When each CPU last went idle with nothing local; pulls from other
    /// queues only happen after a sustained idle spell, so briefly-idle
    /// CPUs keep looking idle to wakeup scans instead of importing work.
    idle_since: Vec<Option<SimTime>>,
}

impl FairCore {
    pub fn new(w: &World) -> FairCore {
        FairCore {
            deadlines: vec![0; w.tasks.len()],
            idle_queues: vec![BTreeSet::new(); w.cpus.len()],
            idle_since: vec![None; w.cpus.len()],
        }
    }

    fn is_idle_class(&self, w: &World, task: TaskId) -> bool {
        matches!(w.classes[task.0 as usize], SchedClass::IdleClass)
    }

    /// Wakeup placement: previous CPU if nothing is running there, else
    /// the first apparently-idle CPU scanning upward from it (wrapping),
    /// else stack on the previous CPU. Only the running task is examined,
    /// so queued-but-not-started work does not repel wakeups.
    pub fn select_cpu(&self, w: &World, task: TaskId) -> CpuId {
        let t = w.task(task);
        let nothing_running = |cpu: CpuId| w.cpus[cpu.0 as usize].current.is_none();
        if let Some(last) = t.last_cpu {
            if t.affinity.contains(&last) && nothing_running(last) {
                return last;
            }
        }
        let ncpus = w.cpus.len() as u32;
        let start = t.last_cpu.map_or(0, |c| (c.0 + 1) % ncpus);
        for off in 0..ncpus {
            let cpu = CpuId((start + off) % ncpus);
            if t.affinity.contains(&cpu) && nothing_running(cpu) {
                return cpu;
            }
        }
        t.last_cpu
            .filter(|c| t.affinity.contains(c))
            .unwrap_or_else(|| *t.affinity.iter().next().expect("non-empty affinity"))
    }

    /// Weighted average vruntime over a CPU's fair-class candidates,
    /// including the running task when it belongs to the normal class.
    /// Eligibility: vr * sum_w <= sum_w_vr.
    fn queue_virtual_time(&self, w: &World, cpu: CpuId) -> (u128, u128) {
        let mut sum_w: u128 = 0;
        let mut sum_wvr: u128 = 0;
        let cs = &w.cpus[cpu.0 as usize];
        let normal_current = cs.current.filter(|&cur| {
            matches!(w.classes[cur.0 as usize], SchedClass::Normal)
        });
        for task in cs
            .local_queue
            .iter()
            .map(|&(_, t)| t)
            .chain(normal_current)
        {
            let weight = w.cgroup_of(task).weight.0 as u128;
            sum_w += weight;
            sum_wvr += weight * w.task(task).vruntime as u128;
        }
        (sum_w, sum_wvr)
    }

    pub fn enqueue(&mut self, w: &mut World, task: TaskId, reason: EnqueueReason, kick: bool) {
        w.assert_runnable(task);
        let target = if matches!(reason, EnqueueReason::Wakeup) {
            let target = self.select_cpu(w, task);
            // Lag clamp: a long sleeper wakes at most one slice behind
            // the queue's virtual time.
            let scaled_slice = w.cgroup_of(task).charge_scale.charge(w.tunables.slice_ns);
            let (sum_w, sum_wvr) = self.queue_virtual_time(w, target);
            if sum_w > 0 {
                let v = (sum_wvr / sum_w) as u64;
                let t = w.task_mut(task);
                t.vruntime = t.vruntime.max(v.saturating_sub(scaled_slice));
            }
            target
        } else {
            w.task(task).last_cpu.expect("requeued task ran before")
        };
        let scaled_slice = w.cgroup_of(task).charge_scale.charge(w.tunables.slice_ns);
        let deadline = w.task(task).vruntime + scaled_slice;
        self.deadlines[task.0 as usize] = deadline;

        if self.is_idle_class(w, task) {
            let key = w.task(task).vruntime;
            w.set_placement(task, Placement::Nowhere, Placement::IdleQueue(target));
            self.idle_queues[target.0 as usize].insert((key, task));
            w.queued_key[task.0 as usize] = key;
            w.trace.push(
                w.now,
                EventKind::Enqueue {
                    task,
                    target: EnqueueTarget::Local(target),
                },
            );
        } else {
            w.local_insert_keyed(target, task, deadline);
        }

        if kick && matches!(reason, EnqueueReason::Wakeup) {
            let cs = &w.cpus[target.0 as usize];
            match cs.current {
                None => w.kick(target, KickReason::Idle),
                Some(cur) => {
                    // The idle class yields to normal work immediately;
                    // normal work enjoys slice protection.
                    if !self.is_idle_class(w, task) && self.is_idle_class(w, cur) {
                        w.kick(target, KickReason::Preempt);
                    }
                }
            }
        }
    }

    /// Earliest virtual deadline among eligible normal tasks; the idle
    /// class runs only when no normal task is queued. A CPU with nothing
    /// local pulls from the longest queue before going idle.
    pub fn pick(&mut self, w: &mut World, cpu: CpuId) -> Option<TaskId> {
        let (sum_w, sum_wvr) = self.queue_virtual_time(w, cpu);
        let chosen = w.cpus[cpu.0 as usize]
            .local_queue
            .iter()
            .find(|&&(_, task)| {
                let vr = w.task(task).vruntime as u128;
                vr * sum_w <= sum_wvr
            })
            .map(|&(_, task)| task);
        if let Some(task) = chosen {
            w.local_remove_task(cpu, task);
            self.idle_since[cpu.0 as usize] = None;
            return Some(task);
        }
        if let Some(&(key, task)) = self.idle_queues[cpu.0 as usize].iter().next() {
            self.idle_queues[cpu.0 as usize].remove(&(key, task));
            w.set_placement(task, Placement::IdleQueue(cpu), Placement::Nowhere);
            self.idle_since[cpu.0 as usize] = None;
            return Some(task);
        }
        let gate = w.tunables.slice_ns;
        match self.idle_since[cpu.0 as usize] {
            None => {
                self.idle_since[cpu.0 as usize] = Some(w.now);
                w.resched_at(w.now + gate, cpu);
                None
            }
            Some(since) if w.now.saturating_sub(since) >= gate => {
                let stolen = self.steal(w, cpu);
                if stolen.is_some() {
                    self.idle_since[cpu.0 as usize] = None;
                }
                stolen
            }
            Some(_) => None,
        }
    }

    /// Newly-idle pull: take the least-entitled queued task from the
    /// longest queue that this CPU may run.
    fn steal(&mut self, w: &mut World, cpu: CpuId) -> Option<TaskId> {
        let mut source: Option<(usize, CpuId)> = None;
        for other in 0..w.cpus.len() as u32 {
            let other = CpuId(other);
            if other == cpu {
                continue;
            }
            let len = self.queue_len(w, other);
            // Leave a lone queued task to its own otherwise-idle CPU.
            let stealable = len >= 2 || (len == 1 && w.cpus[other.0 as usize].current.is_some());
            if stealable && source.map_or(true, |(best, _)| len > best) {
                source = Some((len, other));
            }
        }
        let (_, src) = source?;
        let candidate = self
            .balance_candidates(w, src)
            .into_iter()
            .find(|&(_, task)| w.task(task).affinity.contains(&cpu))?;
        self.dequeue(w, candidate.1);
        Some(candidate.1)
    }

    pub fn charge(&mut self, w: &mut World, task: TaskId, ran: u64) {
        let scale = w.cgroup_of(task).charge_scale;
        w.task_mut(task).vruntime += scale.charge(ran);
    }

    pub fn has_fair_queued(&self, w: &World, cpu: CpuId) -> bool {
        !w.cpus[cpu.0 as usize].local_queue.is_empty()
            || !self.idle_queues[cpu.0 as usize].is_empty()
    }

    pub fn dequeue(&mut self, w: &mut World, task: TaskId) {
        match w.placement[task.0 as usize] {
            Placement::Local(cpu) => w.local_remove_task(cpu, task),
            Placement::IdleQueue(cpu) => {
                let key = w.queued_key[task.0 as usize];
                let removed = self.idle_queues[cpu.0 as usize].remove(&(key, task));
                assert!(removed);
                w.set_placement(task, Placement::IdleQueue(cpu), Placement::Nowhere);
            }
            Placement::Nowhere | Placement::Running(_) => {}
            other => panic!("fair task in foreign queue: {other:?}"),
        }
    }

    /// Queued candidates on a CPU, highest key first (the least entitled
    /// move first during balancing).
    fn balance_candidates(&self, w: &World, cpu: CpuId) -> Vec<(u64, TaskId)> {
        let mut v: Vec<(u64, TaskId)> = w.cpus[cpu.0 as usize]
            .local_queue
            .iter()
            .copied()
            .chain(self.idle_queues[cpu.0 as usize].iter().copied())
            .collect();
        v.sort();
        v.reverse();
        v
    }

    fn queue_len(&self, w: &World, cpu: CpuId) -> usize {
        w.cpus[cpu.0 as usize].local_queue.len() + self.idle_queues[cpu.0 as usize].len()
    }

    /// Queue length including the running occupant when it is fair-class.
    fn cpu_load(&self, w: &World, cpu: CpuId) -> usize {
        let running = w.cpus[cpu.0 as usize].current.is_some_and(|cur| {
            matches!(
                w.classes[cur.0 as usize],
                SchedClass::Normal | SchedClass::IdleClass
            )
        });
        self.queue_len(w, cpu) + usize::from(running)
    }

    /// Moves queued (not running) tasks from the most- to the
    /// least-loaded CPU until the occupancy difference is at most 1.
    pub fn balance(&mut self, w: &mut World) {
        for _ in 0..64 {
            let lens: Vec<usize> = (0..w.cpus.len())
                .map(|c| self.cpu_load(w, CpuId(c as u32)))
                .collect();
            let (max_cpu, &max_len) = lens
                .iter()
                .enumerate()
                .max_by_key(|(i, &l)| (l, std::cmp::Reverse(*i)))
                .unwrap();
            let (min_cpu, &min_len) = lens
                .iter()
                .enumerate()
                .min_by_key(|(i, &l)| (l, *i))
                .unwrap();
            if max_len.saturating_sub(min_len) <= 1 {
                return;
            }
            let src = CpuId(max_cpu as u32);
            let dst = CpuId(min_cpu as u32);
            let candidate = self
                .balance_candidates(w, src)
                .into_iter()
                .find(|&(_, task)| w.task(task).affinity.contains(&dst));
            let Some((_, task)) = candidate else {
                return;
            };
            self.dequeue(w, task);
            let dst_was_idle = w.cpus[dst.0 as usize].is_idle();
            if self.is_idle_class(w, task) {
                let key = w.task(task).vruntime;
                w.set_placement(task, Placement::Nowhere, Placement::IdleQueue(dst));
                self.idle_queues[dst.0 as usize].insert((key, task));
                w.queued_key[task.0 as usize] = key;
            } else {
                let key = self.deadlines[task.0 as usize];
                w.local_insert_keyed(dst, task, key);
            }
            // The task will pay migration cost when it starts there.
            w.task_mut(task).last_cpu = Some(dst);
            if dst_was_idle {
                w.kick(dst, KickReason::Idle);
            }
        }
    }
}

pub struct EevdfPolicy {
    kind: PolicyKind,
    core: FairCore,
    balance_interval_ns: u64,
}

impl EevdfPolicy {
    pub fn new(kind: PolicyKind, params: &PolicyParams, w: &World) -> EevdfPolicy {
        EevdfPolicy {
            kind,
            core: FairCore::new(w),
            balance_interval_ns: params.balance_interval_us * 1_000,
        }
    }
}

impl Policy for EevdfPolicy {
    fn kind(&self) -> PolicyKind {
        self.kind
    }

    fn enqueue(&mut self, w: &mut World, task: TaskId, reason: EnqueueReason) {
        self.core.enqueue(w, task, reason, true);
    }

    fn pick_next(&mut self, w: &mut World, cpu: CpuId) -> Option<TaskId> {
        self.core.pick(w, cpu)
    }

    fn charge(&mut self, w: &mut World, task: TaskId, ran: u64) {
        self.core.charge(w, task, ran);
    }

    fn slice_for(&self, w: &World, _task: TaskId) -> u64 {
        w.tunables.slice_ns
    }

    fn preempt_decision(&mut self, w: &World, cpu: CpuId) -> bool {
        let cs = &w.cpus[cpu.0 as usize];
        let Some(cur) = cs.current else {
            return false;
        };
        // Only the idle class is displaced before its slice ends.
        self.core.is_idle_class(w, cur) && !cs.local_queue.is_empty()
    }

    fn timers(&self, _w: &World) -> Vec<(SimTime, PolicyTimer)> {
        vec![(self.balance_interval_ns, PolicyTimer::Balance)]
    }

    fn on_timer(&mut self, w: &mut World, timer: PolicyTimer) -> Option<(SimTime, PolicyTimer)> {
        debug_assert_eq!(timer, PolicyTimer::Balance);
        self.core.balance(w);
        Some((w.now + self.balance_interval_ns, PolicyTimer::Balance))
    }

    fn on_boost(&mut self, _w: &mut World, _task: TaskId, _scale: ChargeScale) {}

    fn on_unboost(&mut self, _w: &mut World, _task: TaskId) {}

    fn dequeue(&mut self, w: &mut World, task: TaskId) {
        self.core.dequeue(w, task);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{TaskId, MILLIS};
    use crate::world::testutil::{occupy, world};
    use crate::world::World;

    fn core(w: &World) -> FairCore {
        FairCore::new(w)
    }

    #[test]
    fn select_returns_idle_previous_cpu() {
        let mut w = world(4, &[("ts_a", 10_000)], &[0]);
        w.tasks[0].last_cpu = Some(CpuId(2));
        assert_eq!(core(&w).select_cpu(&w, TaskId(0)), CpuId(2));
    }

    #[test]
    fn select_scans_upward_for_first_apparently_idle() {
        let mut w = world(4, &[("ts_a", 10_000)], &[0, 0]);
        w.tasks[0].last_cpu = Some(CpuId(2));
        occupy(&mut w, 2, 1, 0);
        assert_eq!(core(&w).select_cpu(&w, TaskId(0)), CpuId(3));
    }

    #[test]
    fn select_stacks_on_previous_cpu_when_all_busy() {
        let mut w = world(2, &[("ts_a", 10_000)], &[0, 0, 0]);
        w.tasks[0].last_cpu = Some(CpuId(1));
        occupy(&mut w, 0, 1, 0);
        occupy(&mut w, 1, 2, 0);
        assert_eq!(core(&w).select_cpu(&w, TaskId(0)), CpuId(1));
    }

    #[test]
    fn queued_but_not_running_work_does_not_repel_wakeups() {
        // The racy idle check sees only the running task; CPU 0 has a
        // queued task but nothing on the CPU, so it still attracts.
        let mut w = world(2, &[("ts_a", 10_000)], &[0, 0]);
        w.local_insert_keyed(CpuId(0), TaskId(1), 7);
        assert_eq!(core(&w).select_cpu(&w, TaskId(0)), CpuId(0));
    }

    #[test]
    fn pick_prefers_earliest_deadline_heavy_task() {
        // Weights 10000 vs 1: the heavy task's deadline is far nearer
        // per slice, so it runs first even with equal vruntime.
        let mut w = world(1, &[("ts_heavy", 10_000), ("bg_light", 1)], &[0, 1]);
        let mut c = core(&w);
        c.enqueue(&mut w, TaskId(0), EnqueueReason::Wakeup, false);
        c.enqueue(&mut w, TaskId(1), EnqueueReason::Wakeup, false);
        assert_eq!(c.pick(&mut w, CpuId(0)), Some(TaskId(0)));
        assert_eq!(c.pick(&mut w, CpuId(0)), Some(TaskId(1)));
    }

    #[test]
    fn single_queued_task_is_always_eligible() {
        let mut w = world(1, &[("ts_a", 100)], &[0]);
        w.tasks[0].vruntime = 900 * MILLIS;
        let mut c = core(&w);
        c.enqueue(&mut w, TaskId(0), EnqueueReason::Wakeup, false);
        assert_eq!(c.pick(&mut w, CpuId(0)), Some(TaskId(0)));
    }

    #[test]
    fn idle_class_runs_only_when_no_normal_work() {
        let mut w = world(1, &[("ts_a", 10_000), ("bg_b", 100)], &[0, 1]);
        w.classes[1] = SchedClass::IdleClass;
        let mut c = core(&w);
        c.enqueue(&mut w, TaskId(1), EnqueueReason::Wakeup, false);
        c.enqueue(&mut w, TaskId(0), EnqueueReason::Wakeup, false);
        assert_eq!(c.pick(&mut w, CpuId(0)), Some(TaskId(0)));
        assert_eq!(c.pick(&mut w, CpuId(0)), Some(TaskId(1)));
    }

    #[test]
    fn balance_evens_queue_lengths_and_respects_affinity() {
        let mut w = world(2, &[("ts_a", 10_000)], &[0, 0, 0, 0]);
        let mut c = core(&w);
        for t in 0..3u32 {
            w.tasks[t as usize].last_cpu = Some(CpuId(0));
            c.enqueue(&mut w, TaskId(t), EnqueueReason::SliceExpiry, false);
        }
        // Queues (3, 0) balance to (2, 1).
        c.balance(&mut w);
        assert_eq!(w.cpus[0].local_queue.len(), 2);
        assert_eq!(w.cpus[1].local_queue.len(), 1);

        // A pinned task never migrates.
        let mut w = world(2, &[("ts_a", 10_000)], &[0, 0, 0, 0]);
        let mut c = core(&w);
        for t in 0..3u32 {
            w.tasks[t as usize].last_cpu = Some(CpuId(0));
            w.tasks[t as usize].affinity = [CpuId(0)].into_iter().collect();
            c.enqueue(&mut w, TaskId(t), EnqueueReason::SliceExpiry, false);
        }
        c.balance(&mut w);
        assert_eq!(w.cpus[0].local_queue.len(), 3);
    }
}
