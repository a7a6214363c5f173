//! Real-time baselines: FIFO (run to block) and RR (fixed quanta), with
//! higher-class precedence over normal tasks and a fair-server
//! reservation that keeps normal tasks from starving on RT-saturated
//! CPUs.

use std::collections::{BTreeMap, VecDeque};

use crate::model::{ChargeScale, CpuId, SimTime, TaskId};
use crate::policy::fair::FairCore;
use crate::policy::{EnqueueReason, Policy, PolicyTimer};
use crate::scenario::{PolicyKind, PolicyParams, SchedClass};
use crate::trace::{EnqueueTarget, EventKind, KickReason};
use crate::world::{Placement, World};

pub struct RtPolicy {
    kind: PolicyKind,
    quantum_ns: u64,
    core: FairCore,
    /// Per-CPU FIFO queues by static priority.
    rt_queues: Vec<BTreeMap<u8, VecDeque<TaskId>>>,
    rr_budget: Vec<u64>,
    /// Fair-server reservation: while `now < grant_until[cpu]`, normal
    /// tasks run and RT wakeups wait.
    grant_until: Vec<SimTime>,
    grant_interval_ns: u64,
    grant_chunk_ns: u64,
    balance_interval_ns: u64,
}

impl RtPolicy {
    pub fn new(kind: PolicyKind, params: &PolicyParams, w: &World) -> RtPolicy {
        let period = params.fair_server_period_us * 1_000;
        let budget = params.fair_server_budget_us * 1_000;
        let chunk = params.fair_server_chunk_us.min(params.fair_server_budget_us) * 1_000;
        // Chunks spread through the period deliver the full budget.
        let grant_interval = if budget == 0 {
            u64::MAX
        } else {
            period.saturating_mul(chunk) / budget
        };
        RtPolicy {
            kind,
            quantum_ns: params.rr_quantum_us * 1_000,
            core: FairCore::new(w),
            rt_queues: vec![BTreeMap::new(); w.cpus.len()],
            rr_budget: vec![0; w.tasks.len()],
            grant_until: vec![0; w.cpus.len()],
            grant_interval_ns: grant_interval,
            grant_chunk_ns: chunk,
            balance_interval_ns: params.balance_interval_us * 1_000,
        }
    }

    fn rt_class(&self, w: &World, task: TaskId) -> Option<(u8, bool)> {
        match w.classes[task.0 as usize] {
            SchedClass::Rt {
                priority,
                round_robin,
            } => Some((priority, round_robin)),
            _ => None,
        }
    }

    fn grant_active(&self, w: &World, cpu: CpuId) -> bool {
        w.now < self.grant_until[cpu.0 as usize]
    }

    fn rt_queued(&self, cpu: CpuId) -> bool {
        self.rt_queues[cpu.0 as usize].values().any(|q| !q.is_empty())
    }

    fn highest_queued_prio(&self, cpu: CpuId) -> Option<u8> {
        self.rt_queues[cpu.0 as usize]
            .iter()
            .rev()
            .find(|(_, q)| !q.is_empty())
            .map(|(p, _)| *p)
    }

    /// A CPU can take a waking RT task promptly if nothing RT is queued
    /// or running there and no reservation is active.
    fn rt_available(&self, w: &World, cpu: CpuId) -> bool {
        if self.rt_queued(cpu) || self.grant_active(w, cpu) {
            return false;
        }
        match w.cpus[cpu.0 as usize].current {
            None => true,
            Some(cur) => self.rt_class(w, cur).is_none(),
        }
    }

    fn rt_select_cpu(&self, w: &World, task: TaskId) -> CpuId {
        let t = w.task(task);
        let last_cpu = t.last_cpu.filter(|c| t.affinity.contains(c));
        if let Some(last) = last_cpu {
            if self.rt_available(w, last) {
                return last;
            }
        }
        for &cpu in &t.affinity {
            if self.rt_available(w, cpu) {
                return cpu;
            }
        }
        // Nothing can take the task promptly: queue where the RT load is
        // lightest, preferring the previous CPU on ties.
        let rt_load = |cpu: CpuId| {
            let queued: usize = self.rt_queues[cpu.0 as usize].values().map(|q| q.len()).sum();
            let current_rt = w.cpus[cpu.0 as usize]
                .current
                .is_some_and(|cur| self.rt_class(w, cur).is_some());
            queued + usize::from(current_rt)
        };
        let mut best = *t.affinity.iter().next().expect("non-empty affinity");
        let mut best_load = rt_load(best);
        for &cpu in t.affinity.iter().skip(1) {
            let load = rt_load(cpu);
            if load < best_load
                || (load == best_load && Some(cpu) == last_cpu && Some(best) != last_cpu)
            {
                best = cpu;
                best_load = load;
            }
        }
        best
    }

    fn rt_enqueue(&mut self, w: &mut World, task: TaskId, reason: EnqueueReason, prio: u8) {
        let target = match reason {
            EnqueueReason::Wakeup => self.rt_select_cpu(w, task),
            _ => w.task(task).last_cpu.expect("requeued task ran before"),
        };
        let front = matches!(reason, EnqueueReason::Preempted);
        match reason {
            // A fresh quantum on wakeup and on rotation; preemption by a
            // higher class keeps the remainder.
            EnqueueReason::Wakeup | EnqueueReason::SliceExpiry => {
                self.rr_budget[task.0 as usize] = self.quantum_ns;
            }
            _ => {}
        }
        w.set_placement(task, Placement::Nowhere, Placement::RtQueue(target));
        let q = self.rt_queues[target.0 as usize].entry(prio).or_default();
        if front {
            q.push_front(task);
        } else {
            q.push_back(task);
        }
        w.trace.push(
            w.now,
            EventKind::Enqueue {
                task,
                target: EnqueueTarget::Local(target),
            },
        );
        if matches!(reason, EnqueueReason::Wakeup) {
            let cs = &w.cpus[target.0 as usize];
            match cs.current {
                None => w.kick(target, KickReason::Idle),
                Some(cur) => {
                    if self.grant_active(w, target) {
                        // The reservation outranks RT; wait it out.
                    } else {
                        match self.rt_class(w, cur) {
                            None => w.kick(target, KickReason::Preempt),
                            Some((cur_prio, _)) if prio > cur_prio => {
                                w.kick(target, KickReason::Preempt)
                            }
                            _ => {}
                        }
                    }
                }
            }
        }
    }

    fn rt_pick(&mut self, w: &mut World, cpu: CpuId) -> Option<TaskId> {
        let queues = &mut self.rt_queues[cpu.0 as usize];
        let prio = *queues
            .iter()
            .rev()
            .find(|(_, q)| !q.is_empty())
            .map(|(p, _)| p)?;
        let task = queues.get_mut(&prio).unwrap().pop_front().unwrap();
        w.set_placement(task, Placement::RtQueue(cpu), Placement::Nowhere);
        Some(task)
    }
}

impl Policy for RtPolicy {
    fn kind(&self) -> PolicyKind {
        self.kind
    }

    fn enqueue(&mut self, w: &mut World, task: TaskId, reason: EnqueueReason) {
        w.assert_runnable(task);
        match self.rt_class(w, task) {
            Some((prio, _)) => self.rt_enqueue(w, task, reason, prio),
            None => self.core.enqueue(w, task, reason, true),
        }
    }

    fn pick_next(&mut self, w: &mut World, cpu: CpuId) -> Option<TaskId> {
        if self.grant_active(w, cpu) {
            if let Some(task) = self.core.pick(w, cpu) {
                return Some(task);
            }
        }
        if let Some(task) = self.rt_pick(w, cpu) {
            return Some(task);
        }
        self.core.pick(w, cpu)
    }

    fn charge(&mut self, w: &mut World, task: TaskId, ran: u64) {
        match self.rt_class(w, task) {
            Some((_, true)) => {
                let b = &mut self.rr_budget[task.0 as usize];
                *b = b.saturating_sub(ran);
            }
            Some((_, false)) => {}
            None => self.core.charge(w, task, ran),
        }
    }

    fn slice_for(&self, w: &World, task: TaskId) -> u64 {
        match self.rt_class(w, task) {
            // FIFO runs until it blocks or a higher class intervenes.
            Some((_, false)) => u64::MAX,
            Some((_, true)) => self.rr_budget[task.0 as usize].max(1),
            None => w.tunables.slice_ns,
        }
    }

    fn preempt_decision(&mut self, w: &World, cpu: CpuId) -> bool {
        let cs = &w.cpus[cpu.0 as usize];
        let Some(cur) = cs.current else {
            return false;
        };
        let cur_rt = self.rt_class(w, cur);
        if self.grant_active(w, cpu) {
            return cur_rt.is_some() && self.core.has_fair_queued(w, cpu);
        }
        match cur_rt {
            None => self.rt_queued(cpu),
            Some((cur_prio, _)) => self
                .highest_queued_prio(cpu)
                .is_some_and(|p| p > cur_prio),
        }
    }

    fn timers(&self, w: &World) -> Vec<(SimTime, PolicyTimer)> {
        let mut timers = vec![(self.balance_interval_ns, PolicyTimer::Balance)];
        if self.grant_interval_ns != u64::MAX && self.grant_chunk_ns > 0 {
            timers.extend(
                (0..w.cpus.len() as u32)
                    .map(|c| (self.grant_interval_ns, PolicyTimer::FairGrant(CpuId(c)))),
            );
        }
        timers
    }

    fn on_timer(&mut self, w: &mut World, timer: PolicyTimer) -> Option<(SimTime, PolicyTimer)> {
        match timer {
            PolicyTimer::Balance => {
                // Normal-class queues still balance under RT policies.
                self.core.balance(w);
                Some((w.now + self.balance_interval_ns, PolicyTimer::Balance))
            }
            PolicyTimer::FairGrant(cpu) => {
                // A deadline-style reservation: whenever normal-class
                // work is runnable here, it owns the chunk and RT waits.
                let fair_runnable = self.core.has_fair_queued(w, cpu)
                    || w.cpus[cpu.0 as usize]
                        .current
                        .is_some_and(|cur| self.rt_class(w, cur).is_none());
                if fair_runnable {
                    self.grant_until[cpu.0 as usize] = w.now + self.grant_chunk_ns;
                    w.kick(cpu, KickReason::Preempt);
                    w.resched_at(w.now + self.grant_chunk_ns, cpu);
                }
                Some((w.now + self.grant_interval_ns, PolicyTimer::FairGrant(cpu)))
            }
        }
    }

    fn on_boost(&mut self, _w: &mut World, _task: TaskId, _scale: ChargeScale) {}

    fn on_unboost(&mut self, _w: &mut World, _task: TaskId) {}

    fn dequeue(&mut self, w: &mut World, task: TaskId) {
        match w.placement[task.0 as usize] {
            Placement::RtQueue(cpu) => {
                for q in self.rt_queues[cpu.0 as usize].values_mut() {
                    if let Some(pos) = q.iter().position(|&t| t == task) {
                        q.remove(pos);
                        w.set_placement(task, Placement::RtQueue(cpu), Placement::Nowhere);
                        return;
                    }
                }
                panic!("task {task} tagged RtQueue({cpu}) but not found");
            }
            _ => self.core.dequeue(w, task),
        }
    }
}
