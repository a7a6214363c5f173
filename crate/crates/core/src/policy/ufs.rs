//! Two-tier selectively-unfair policy.
//!
//! Time-sensitive tasks are placed directly into a chosen CPU's local
//! queue (with an idle or preemption kick); background tasks are parked
//! in their cgroup's queue and pulled by idle CPUs through the runnable
//! tree, which keys background cgroups by group virtual runtime.

use crate::model::{ChargeScale, CpuId, SimTime, TaskId, Tier};
use crate::policy::tree::RunnableTree;
use crate::policy::{EnqueueReason, Policy, PolicyTimer};
use crate::scenario::{PolicyKind, PolicyParams};
use crate::trace::KickReason;
use crate::world::{Placement, World};

const DISPATCH_RETRY_LIMIT: usize = 8;

pub struct UfsPolicy {
    tree: RunnableTree,
    /// Wakeup preemption margin within the time-sensitive tier, in
    /// vruntime units: a waking task displaces the running one when its
    /// key is lower by more than this.
    wakeup_gran: u64,
    retry_exhausted: u64,
}

impl UfsPolicy {
    pub fn new(params: &PolicyParams, w: &World) -> UfsPolicy {
        let mut tree = RunnableTree::default();
        for cg in &w.cgroups {
            if cg.tier == Tier::Background {
                tree.register(cg.id);
            }
        }
        UfsPolicy {
            tree,
            wakeup_gran: params.ufs_wakeup_gran_vr_ns,
            retry_exhausted: 0,
        }
    }

    /// Deterministic CPU choice for a time-sensitive (or boosted) task:
    /// (1) previous CPU if idle, (2) lowest-index idle CPU, (3) the CPU
    /// running the most-served background task and nothing queued,
    /// (4) the CPU hosting the fewest time-sensitive tasks (queued plus
    /// running). Ties prefer the previous CPU, then the lowest index.
    fn select_cpu(&self, w: &World, task: TaskId) -> CpuId {
        let t = w.task(task);
        let last_cpu = t.last_cpu.filter(|c| t.affinity.contains(c));
        if let Some(last) = last_cpu {
            if w.cpus[last.0 as usize].is_idle() {
                return last;
            }
        }
        for &cpu in &t.affinity {
            if w.cpus[cpu.0 as usize].is_idle() {
                return cpu;
            }
        }
        // Victim choice among CPUs running background work: stay on the
        // previous CPU when possible, otherwise displace the longest
        // current stint. Stint age is weight-neutral; task vruntime is
        // not, since enqueue clamping pins it to the group counter.
        let bg_running = |cpu: CpuId| {
            let cs = &w.cpus[cpu.0 as usize];
            cs.local_queue.is_empty()
                && cs
                    .current
                    .is_some_and(|cur| w.sched_tier_of(cur) == Tier::Background)
        };
        if let Some(last) = last_cpu {
            if bg_running(last) {
                return last;
            }
        }
        let mut best: Option<(u64, CpuId)> = None;
        for &cpu in &t.affinity {
            if !bg_running(cpu) {
                continue;
            }
            let stint = w.now.saturating_sub(w.cpus[cpu.0 as usize].current_since);
            if best.map_or(true, |(age, _)| stint > age) {
                best = Some((stint, cpu));
            }
        }
        if let Some((_, cpu)) = best {
            return cpu;
        }
        let ts_load = |cpu: CpuId| {
            let cs = &w.cpus[cpu.0 as usize];
            let current_ts = cs
                .current
                .is_some_and(|cur| w.sched_tier_of(cur) == Tier::TimeSensitive);
            cs.local_queue.len() + usize::from(current_ts)
        };
        let mut best = *t.affinity.iter().next().expect("affinity is non-empty");
        let mut best_load = ts_load(best);
        for &cpu in t.affinity.iter().skip(1) {
            let load = ts_load(cpu);
            if load < best_load || (load == best_load && Some(cpu) == last_cpu && Some(best) != last_cpu)
            {
                best = cpu;
                best_load = load;
            }
        }
        best
    }

    /// Queue key a newly boosted task enters the local competition with:
    /// the lowest key currently present on the target CPU.
    fn competition_floor(&self, w: &World, cpu: CpuId) -> u64 {
        let cs = &w.cpus[cpu.0 as usize];
        let mut floor = None;
        if let Some(cur) = cs.current {
            if w.sched_tier_of(cur) == Tier::TimeSensitive {
                floor = Some(w.task(cur).queue_key());
            }
        }
        if let Some((key, _)) = cs.min_queued() {
            floor = Some(floor.map_or(key, |f: u64| f.min(key)));
        }
        floor.unwrap_or(0)
    }

    fn dispatch(&mut self, w: &mut World, cpu: CpuId) -> Option<TaskId> {
        let mut skipped: Vec<crate::model::CgroupId> = Vec::new();
        for _ in 0..DISPATCH_RETRY_LIMIT {
            let node = self.tree.iter().find(|(_, cg)| !skipped.contains(cg));
            let Some((_, cg)) = node else {
                return None;
            };
            if w.cgroups[cg.0 as usize].group_queue.is_empty() {
                self.tree.stash(cg);
                continue;
            }
            let Some((key, task)) = w.group_min_for_cpu(cg, cpu) else {
                // Non-empty but nothing eligible for this CPU; look past it.
                skipped.push(cg);
                continue;
            };
            w.group_remove(cg, key, task);
            w.local_insert(cpu, task);
            w.cpus[cpu.0 as usize].current_cgroup = Some(cg);
            let group = &mut w.cgroups[cg.0 as usize];
            let advance = group.charge_scale.charge(w.tunables.slice_ns);
            group.group_vruntime += advance;
            self.tree.rekey(cg, group.group_vruntime);
            return w.local_pop(cpu);
        }
        if !self.tree.is_empty() {
            self.retry_exhausted += 1;
        }
        None
    }
}

impl Policy for UfsPolicy {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Ufs
    }

    fn enqueue(&mut self, w: &mut World, task: TaskId, reason: EnqueueReason) {
        w.assert_runnable(task);
        w.clamp_vruntime(task);
        if w.sched_tier_of(task) == Tier::TimeSensitive {
            let fresh = matches!(reason, EnqueueReason::Wakeup | EnqueueReason::BoostMove);
            let target = if fresh {
                self.select_cpu(w, task)
            } else {
                w.task(task).last_cpu.expect("requeued task ran before")
            };
            let key = w.task(task).queue_key();
            w.local_insert(target, task);
            if fresh {
                let cs = &w.cpus[target.0 as usize];
                match cs.current {
                    None => w.kick(target, KickReason::Idle),
                    Some(cur) => {
                        if w.sched_tier_of(cur) == Tier::Background {
                            w.kick(target, KickReason::Preempt);
                        } else if key.saturating_add(self.wakeup_gran) < w.task(cur).queue_key() {
                            w.kick(target, KickReason::Preempt);
                        }
                    }
                }
            }
        } else {
            let cg = w.task(task).cgroup;
            w.group_insert(task);
            let group_vr = w.cgroups[cg.0 as usize].group_vruntime;
            self.tree.ensure_queued(cg, group_vr);
            let idle = w.idle_cpus_in_affinity(task).next();
            if let Some(idle) = idle {
                w.kick(idle, KickReason::Idle);
            }
        }
    }

    fn pick_next(&mut self, w: &mut World, cpu: CpuId) -> Option<TaskId> {
        if let Some(task) = w.local_pop(cpu) {
            return Some(task);
        }
        self.dispatch(w, cpu)
    }

    fn charge(&mut self, w: &mut World, task: TaskId, ran: u64) {
        let scale = w.cgroup_of(task).charge_scale;
        let t = w.task_mut(task);
        t.vruntime += scale.charge(ran);
        if t.boosted {
            let boost_scale = t.boost_scale.expect("boosted task has a boost scale");
            t.boost_key += boost_scale.charge(ran);
        }
    }

    fn slice_for(&self, w: &World, _task: TaskId) -> u64 {
        w.tunables.slice_ns
    }

    fn preempt_decision(&mut self, w: &World, cpu: CpuId) -> bool {
        let cs = &w.cpus[cpu.0 as usize];
        let Some(cur) = cs.current else {
            return false;
        };
        let Some((min_key, _)) = cs.min_queued() else {
            return false;
        };
        if w.sched_tier_of(cur) == Tier::Background {
            return true;
        }
        min_key.saturating_add(self.wakeup_gran) < w.task(cur).queue_key()
    }

    fn timers(&self, _w: &World) -> Vec<(SimTime, PolicyTimer)> {
        Vec::new()
    }

    fn on_timer(&mut self, _w: &mut World, _timer: PolicyTimer) -> Option<(SimTime, PolicyTimer)> {
        None
    }

    fn on_boost(&mut self, w: &mut World, task: TaskId, waiter_scale: ChargeScale) {
        let target = self.select_cpu(w, task);
        let floor = self.competition_floor(w, target);
        {
            let t = w.task_mut(task);
            t.boost_key = floor;
            t.boost_scale = Some(waiter_scale);
        }
        if let Placement::Group(cg) = w.placement[task.0 as usize] {
            let key = w.task(task).vruntime;
            w.group_remove(cg, key, task);
            self.enqueue(w, task, EnqueueReason::BoostMove);
        }
    }

    fn on_unboost(&mut self, w: &mut World, task: TaskId) {
        if let Placement::Local(cpu) = w.placement[task.0 as usize] {
            w.local_remove_task(cpu, task);
            self.enqueue(w, task, EnqueueReason::Unboost);
        }
    }

    fn dequeue(&mut self, w: &mut World, task: TaskId) {
        match w.placement[task.0 as usize] {
            Placement::Local(cpu) => w.local_remove_task(cpu, task),
            Placement::Group(cg) => {
                let key = w.queued_key[task.0 as usize];
                w.group_remove(cg, key, task);
            }
            Placement::Nowhere | Placement::Running(_) => {}
            other => panic!("ufs task in foreign queue: {other:?}"),
        }
    }

    fn diagnostics(&self) -> Vec<(&'static str, u64)> {
        vec![("dispatch_retry_exhausted", self.retry_exhausted)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CgroupId, MILLIS};
    use crate::scenario::PolicyParams;
    use crate::world::testutil::{occupy, world};

    fn policy(w: &World) -> UfsPolicy {
        UfsPolicy::new(&PolicyParams::default(), w)
    }

    #[test]
    fn select_prefers_idle_last_cpu() {
        let mut w = world(4, &[("ts_a", 10_000)], &[0, 0]);
        w.tasks[0].last_cpu = Some(CpuId(2));
        let p = policy(&w);
        assert_eq!(p.select_cpu(&w, TaskId(0)), CpuId(2));
        // Busy last CPU falls through to the lowest-index idle one.
        occupy(&mut w, 2, 1, 0);
        assert_eq!(p.select_cpu(&w, TaskId(0)), CpuId(0));
    }

    #[test]
    fn select_displaces_longest_background_stint() {
        // CPUs 0..3 run background tasks; the waker has no usable last
        // CPU, so the oldest stint is displaced.
        let mut w = world(4, &[("ts_a", 10_000), ("bg_b", 100)], &[0, 1, 1, 1, 1]);
        w.now = 10 * MILLIS;
        occupy(&mut w, 0, 1, 9 * MILLIS);
        occupy(&mut w, 1, 2, 2 * MILLIS);
        occupy(&mut w, 2, 3, 5 * MILLIS);
        occupy(&mut w, 3, 4, 8 * MILLIS);
        let p = policy(&w);
        assert_eq!(p.select_cpu(&w, TaskId(0)), CpuId(1));
        // A background-running previous CPU wins outright.
        w.tasks[0].last_cpu = Some(CpuId(3));
        assert_eq!(p.select_cpu(&w, TaskId(0)), CpuId(3));
    }

    #[test]
    fn select_balances_time_sensitive_load_when_nothing_preemptible() {
        // All CPUs run time-sensitive work; queue depths 2, 1, 1 counting
        // occupants, so CPU 1 wins as the lowest-loaded lowest index.
        let mut w = world(3, &[("ts_a", 10_000)], &[0; 7]);
        occupy(&mut w, 0, 1, 0);
        occupy(&mut w, 1, 2, 0);
        occupy(&mut w, 2, 3, 0);
        w.local_insert(CpuId(0), TaskId(4));
        let p = policy(&w);
        assert_eq!(p.select_cpu(&w, TaskId(0)), CpuId(1));
    }

    #[test]
    fn dispatch_picks_min_group_vruntime_and_stashes_empty() {
        let mut w = world(
            1,
            &[("bg_a", 100), ("bg_b", 100), ("bg_c", 100)],
            &[0, 1, 2],
        );
        w.cgroups[0].group_vruntime = 8 * MILLIS;
        w.cgroups[1].group_vruntime = 3 * MILLIS;
        w.cgroups[2].group_vruntime = 9 * MILLIS;
        let mut p = policy(&w);
        for t in 0..3u32 {
            w.tasks[t as usize].vruntime = w.cgroups[t as usize].group_vruntime;
            p.enqueue(&mut w, TaskId(t), EnqueueReason::Wakeup);
        }
        // B has the minimum key; its grant re-keys it to 3 + 4 ms.
        assert_eq!(p.pick_next(&mut w, CpuId(0)), Some(TaskId(1)));
        // B is still the minimum but now observed empty: it is stashed
        // and the retry picks A.
        assert_eq!(p.pick_next(&mut w, CpuId(0)), Some(TaskId(0)));
        assert!(!p.tree.contains(CgroupId(1)));
    }

    #[test]
    fn dispatch_advances_group_vruntime_by_weighted_slice() {
        // Weight 1 with a 4 ms slice re-keys the cgroup 400 ms later.
        let mut w = world(1, &[("bg_a", 1)], &[0, 0]);
        w.cgroups[0].group_vruntime = 3 * MILLIS;
        let mut p = policy(&w);
        for t in 0..2u32 {
            w.tasks[t as usize].vruntime = 3 * MILLIS + t as u64;
            p.enqueue(&mut w, TaskId(t), EnqueueReason::Wakeup);
        }
        p.pick_next(&mut w, CpuId(0)).unwrap();
        assert_eq!(w.cgroups[0].group_vruntime, 403 * MILLIS);
        assert_eq!(p.tree.peek_min(), Some((403 * MILLIS, CgroupId(0))));
    }

    #[test]
    fn enqueue_kicks_preempt_on_background_and_idle_on_idle() {
        let mut w = world(2, &[("ts_a", 10_000), ("bg_b", 100)], &[0, 1]);
        let mut p = policy(&w);
        // Background occupant on CPU 0, CPU 1 idle but the idle rule
        // fires first.
        occupy(&mut w, 0, 1, 0);
        p.enqueue(&mut w, TaskId(0), EnqueueReason::Wakeup);
        assert_eq!(w.pending_kicks, vec![(CpuId(1), crate::trace::KickReason::Idle)]);
        w.pending_kicks.clear();
        // No idle CPU: displace the background occupant.
        let mut w = world(1, &[("ts_a", 10_000), ("bg_b", 100)], &[0, 1]);
        let mut p = policy(&w);
        occupy(&mut w, 0, 1, 0);
        p.enqueue(&mut w, TaskId(0), EnqueueReason::Wakeup);
        assert_eq!(
            w.pending_kicks,
            vec![(CpuId(0), crate::trace::KickReason::Preempt)]
        );
    }

    #[test]
    fn wakeup_preemption_applies_within_tier_by_queue_key() {
        let mut w = world(1, &[("ts_a", 10_000)], &[0, 0]);
        let mut p = policy(&w);
        occupy(&mut w, 0, 1, 0);
        w.tasks[1].vruntime = 5 * MILLIS;
        w.tasks[0].vruntime = 1 * MILLIS;
        p.enqueue(&mut w, TaskId(0), EnqueueReason::Wakeup);
        assert_eq!(
            w.pending_kicks,
            vec![(CpuId(0), crate::trace::KickReason::Preempt)]
        );
        assert!(p.preempt_decision(&w, CpuId(0)));
    }

    #[test]
    fn boosted_task_moves_from_group_queue_to_local() {
        let mut w = world(1, &[("ts_a", 10_000), ("bg_b", 1)], &[0, 1]);
        let mut p = policy(&w);
        occupy(&mut w, 0, 0, 0);
        w.tasks[1].vruntime = 700 * MILLIS;
        p.enqueue(&mut w, TaskId(1), EnqueueReason::Wakeup);
        assert!(matches!(w.placement[1], Placement::Group(_)));
        let waiter_scale = w.cgroups[0].charge_scale;
        w.tasks[1].boosted = true;
        w.tasks[1].boost_lock = Some(crate::model::LockId(0));
        p.on_boost(&mut w, TaskId(1), waiter_scale);
        assert!(matches!(w.placement[1], Placement::Local(CpuId(0))));
        // Competes at the local floor, not its background vruntime.
        assert_eq!(w.tasks[1].boost_key, w.tasks[0].queue_key());
        // Unboost re-parks it in its group queue.
        w.tasks[1].boosted = false;
        w.tasks[1].boost_lock = None;
        p.on_unboost(&mut w, TaskId(1));
        assert!(matches!(w.placement[1], Placement::Group(_)));
    }
}
