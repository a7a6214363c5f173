//! Deterministic discrete-event loop: advances simulated time, runs
//! workload behavior programs, invokes the active policy's callbacks,
//! performs context switches and records the trace.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand_chacha::ChaCha8Rng;

use crate::hinting::{HintAction, HintMap};
use crate::metrics::{self, MetricsReport};
use crate::model::{
    CpuId, CpuState, HintEvent, HintKind, LockId, LockState, SimTime, Task, TaskId, TaskState,
    Tier,
};
use crate::policy::{build_policy, EnqueueReason, Policy, PolicyTimer};
use crate::scenario::{Scenario, ScenarioEventSpec};
use crate::trace::{EventKind, Trace};
use crate::workload::{task_rng, Behavior, SpinParams, Step};
use crate::world::{Diagnostics, EngineTunables, Placement, World};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ev {
    Wakeup(TaskId),
    Kick(CpuId),
    Resched(CpuId),
    CpuTimer(CpuId, u64),
    Policy(PolicyTimerSlot),
    Scenario(u32),
}

/// PolicyTimer without payload lifetime concerns, plus its recurrence id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PolicyTimerSlot(PolicyTimer);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct HeapEntry {
    time: SimTime,
    prio: u8,
    tie: u32,
    seq: u64,
    ev: Ev,
}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time, self.prio, self.tie, self.seq).cmp(&(
            other.time,
            other.prio,
            other.tie,
            other.seq,
        ))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Event ordering at equal timestamps: wakeups land first, then kicks
/// and reschedules, then slice/work timers, then policy timers and
/// scenario events. Ties break by task/CPU id, then insertion order.
fn event_key(ev: &Ev) -> (u8, u32) {
    match ev {
        Ev::Wakeup(t) => (0, t.0),
        Ev::Kick(c) => (1, c.0),
        Ev::Resched(c) => (1, c.0),
        Ev::CpuTimer(c, _) => (2, c.0),
        Ev::Policy(PolicyTimerSlot(PolicyTimer::Balance)) => (3, 0),
        Ev::Policy(PolicyTimerSlot(PolicyTimer::FairGrant(c))) => (3, c.0),
        Ev::Scenario(i) => (4, *i),
    }
}

enum Outcome {
    /// Behavior wants to keep running; `remaining` was refilled.
    Continue,
    Block(u64),
    Finish,
    Panic,
}

pub struct RunOutput {
    pub trace: Trace,
    pub report: MetricsReport,
    pub diagnostics: Diagnostics,
}

struct Engine<'s> {
    scenario: &'s Scenario,
    w: World,
    policy: Box<dyn Policy>,
    heap: BinaryHeap<Reverse<HeapEntry>>,
    seq: u64,
    behaviors: Vec<Behavior>,
    rngs: Vec<ChaCha8Rng>,
    /// Nanoseconds left in the current Run segment; 0 means the behavior
    /// must be advanced before the task can run.
    remaining: Vec<u64>,
    lock_result: Vec<Option<bool>>,
    holding: Vec<Vec<LockId>>,
    spin: Vec<Option<SpinParams>>,
    cpu_charge_from: Vec<SimTime>,
    cpu_slice_end: Vec<SimTime>,
    hints: HintMap,
    duration: SimTime,
    panicked: bool,
}

/// Runs a validated scenario to completion and computes its report.
///
/// Engine invariant violations abort via panic; they indicate simulator
/// bugs, not scenario outcomes (a workload panic is a normal outcome and
/// ends the run cleanly).
pub fn run(scenario: &Scenario) -> RunOutput {
    let mut engine = Engine::new(scenario);
    engine.run_loop();
    engine.into_output()
}

impl<'s> Engine<'s> {
    fn new(scenario: &'s Scenario) -> Engine<'s> {
        let cfg = &scenario.config;
        let tunables = EngineTunables {
            slice_ns: cfg.engine.slice_ns(),
            ctx_switch_cost_ns: cfg.engine.ctx_switch_cost_ns(),
            migration_cost_ns: cfg.engine.migration_cost_ns(),
            duration_ns: cfg.engine.duration_ns(),
            warmup_ns: cfg.engine.warmup_ns(),
        };
        let ntasks = cfg.tasks.len();
        let tasks: Vec<Task> = cfg
            .tasks
            .iter()
            .enumerate()
            .map(|(i, spec)| Task {
                id: TaskId(i as u32),
                name: spec
                    .name
                    .clone()
                    .unwrap_or_else(|| format!("task{i}")),
                cgroup: scenario.task_cgroup[i],
                state: TaskState::Blocked,
                vruntime: 0,
                affinity: scenario.task_affinity[i].clone(),
                boosted: false,
                boost_lock: None,
                boost_key: 0,
                boost_scale: None,
                last_cpu: None,
            })
            .collect();
        let classes = (0..ntasks)
            .map(|i| {
                let tier = scenario.cgroups[scenario.task_cgroup[i].0 as usize].tier;
                cfg.policy.class_for(tier, cfg.policy_params.rt_priority)
            })
            .collect();
        let mut locks = std::collections::BTreeMap::new();
        for spec in &cfg.tasks {
            if let Some(lock) = spec.workload.lock() {
                locks.entry(lock).or_insert_with(LockState::default);
            }
        }
        let w = World {
            now: 0,
            tunables,
            cgroups: scenario.cgroups.clone(),
            tasks,
            cpus: (0..cfg.cpus).map(|c| CpuState::new(CpuId(c))).collect(),
            locks,
            classes,
            placement: vec![Placement::Nowhere; ntasks],
            queued_key: vec![0; ntasks],
            trace: Trace::default(),
            pending_kicks: Vec::new(),
            kick_pending: vec![false; cfg.cpus as usize],
            pending_resched: Vec::new(),
            diag: Diagnostics::default(),
        };
        let policy = build_policy(cfg.policy, &cfg.policy_params, &w);
        let mut engine = Engine {
            scenario,
            behaviors: cfg
                .tasks
                .iter()
                .map(|t| Behavior::new(t.workload.clone()))
                .collect(),
            rngs: (0..ntasks as u32)
                .map(|i| task_rng(cfg.engine.rng_seed, i))
                .collect(),
            remaining: vec![0; ntasks],
            lock_result: vec![None; ntasks],
            holding: vec![Vec::new(); ntasks],
            spin: cfg.tasks.iter().map(|t| t.workload.spin_params()).collect(),
            cpu_charge_from: vec![0; cfg.cpus as usize],
            cpu_slice_end: vec![0; cfg.cpus as usize],
            hints: HintMap::new(cfg.hinting),
            duration: tunables.duration_ns,
            panicked: false,
            heap: BinaryHeap::new(),
            seq: 0,
            policy,
            w,
        };
        for (i, spec) in cfg.tasks.iter().enumerate() {
            engine.schedule(spec.start_us * 1_000, Ev::Wakeup(TaskId(i as u32)));
        }
        for (time, timer) in engine.policy.timers(&engine.w) {
            engine.schedule(time, Ev::Policy(PolicyTimerSlot(timer)));
        }
        for (i, ev) in cfg.events.iter().enumerate() {
            let ScenarioEventSpec::ReassignCgroup { at_us, .. } = ev;
            engine.schedule(at_us * 1_000, Ev::Scenario(i as u32));
        }
        engine
    }

    fn schedule(&mut self, time: SimTime, ev: Ev) {
        let (prio, tie) = event_key(&ev);
        self.seq += 1;
        self.heap.push(Reverse(HeapEntry {
            time,
            prio,
            tie,
            seq: self.seq,
            ev,
        }));
    }

    fn run_loop(&mut self) {
        while let Some(Reverse(entry)) = self.heap.pop() {
            if entry.time >= self.duration || self.panicked {
                break;
            }
            debug_assert!(entry.time >= self.w.now, "time went backwards");
            self.w.now = entry.time;
            match entry.ev {
                Ev::Wakeup(task) => self.handle_wakeup(task),
                Ev::Kick(cpu) => {
                    self.w.kick_pending[cpu.0 as usize] = false;
                    self.handle_resched(cpu);
                }
                Ev::Resched(cpu) => self.handle_resched(cpu),
                Ev::CpuTimer(cpu, epoch) => self.handle_timer(cpu, epoch),
                Ev::Policy(slot) => {
                    if let Some((time, next)) = self.policy.on_timer(&mut self.w, slot.0) {
                        self.schedule(time, Ev::Policy(PolicyTimerSlot(next)));
                    }
                    self.drain_effects();
                }
                Ev::Scenario(idx) => self.handle_scenario_event(idx as usize),
            }
            // Catch effects requested during pick paths.
            self.drain_effects();
        }
    }

    fn drain_effects(&mut self) {
        let kicks = std::mem::take(&mut self.w.pending_kicks);
        for (cpu, reason) in kicks {
            if self.w.kick_pending[cpu.0 as usize] {
                continue;
            }
            self.w.kick_pending[cpu.0 as usize] = true;
            self.w.trace.push(self.w.now, EventKind::Kick { cpu, reason });
            self.schedule(self.w.now, Ev::Kick(cpu));
        }
        let rescheds = std::mem::take(&mut self.w.pending_resched);
        for (time, cpu) in rescheds {
            self.schedule(time, Ev::Resched(cpu));
        }
    }

    fn handle_wakeup(&mut self, task: TaskId) {
        let state = self.w.task(task).state;
        assert_eq!(
            state,
            TaskState::Blocked,
            "wakeup of non-blocked task {task} ({state:?})"
        );
        self.w.task_mut(task).state = TaskState::Runnable;
        self.behaviors[task.0 as usize].on_wake(self.w.now);
        self.w.trace.push(self.w.now, EventKind::Wakeup { task });
        self.policy.enqueue(&mut self.w, task, EnqueueReason::Wakeup);
        self.drain_effects();
    }

    fn handle_resched(&mut self, cpu: CpuId) {
        let cs = &self.w.cpus[cpu.0 as usize];
        match cs.current {
            Some(_) if self.w.now < cs.current_since => {
                // Mid context-switch; settle once the switch completes.
                let at = cs.current_since;
                self.schedule(at, Ev::Resched(cpu));
            }
            Some(_) => {
                if self.policy.preempt_decision(&self.w, cpu) {
                    self.preempt_current(cpu);
                }
            }
            None => self.pick_and_switch(cpu, None),
        }
    }

    fn preempt_current(&mut self, cpu: CpuId) {
        let task = self.w.cpus[cpu.0 as usize].current.expect("occupied");
        let ran = self.w.now - self.cpu_charge_from[cpu.0 as usize];
        self.policy.charge(&mut self.w, task, ran);
        let rem = &mut self.remaining[task.0 as usize];
        assert!(*rem >= ran, "task {task} ran past its work segment");
        *rem -= ran;
        self.vacate(cpu, task);
        if self.remaining[task.0 as usize] == 0 {
            // Preempted exactly at a work boundary: settle the behavior
            // before requeueing so completions are not delayed.
            match self.advance_behavior(task) {
                Outcome::Continue => self.requeue(cpu, task, EnqueueReason::Preempted),
                Outcome::Block(d) => self.block_vacated(cpu, task, d),
                Outcome::Finish => self.finish_vacated(cpu, task),
                Outcome::Panic => self.panic_vacated(cpu, task),
            }
        } else {
            self.requeue(cpu, task, EnqueueReason::Preempted);
        }
    }

    /// Clears a CPU's occupant without deciding its fate.
    fn vacate(&mut self, cpu: CpuId, task: TaskId) {
        let cs = &mut self.w.cpus[cpu.0 as usize];
        assert_eq!(cs.current, Some(task));
        cs.current = None;
        cs.epoch += 1;
        self.w
            .set_placement(task, Placement::Running(cpu), Placement::Nowhere);
        self.w.task_mut(task).state = TaskState::Runnable;
    }

    fn requeue(&mut self, cpu: CpuId, task: TaskId, reason: EnqueueReason) {
        self.policy.enqueue(&mut self.w, task, reason);
        self.drain_effects();
        self.pick_and_switch(cpu, Some(task));
    }

    fn block_vacated(&mut self, cpu: CpuId, task: TaskId, dur: u64) {
        let t = self.w.task(task);
        if t.boosted && !t.boost_lock.map_or(false, |l| self.holding[task.0 as usize].contains(&l))
        {
            self.w.diag.boost_leaks += 1;
        }
        self.w.task_mut(task).state = TaskState::Blocked;
        self.schedule(self.w.now + dur, Ev::Wakeup(task));
        self.pick_and_switch(cpu, Some(task));
    }

    fn finish_vacated(&mut self, cpu: CpuId, task: TaskId) {
        self.w.task_mut(task).state = TaskState::Finished;
        self.pick_and_switch(cpu, Some(task));
    }

    fn panic_vacated(&mut self, cpu: CpuId, task: TaskId) {
        self.w.task_mut(task).state = TaskState::Panicked;
        self.w.trace.push(self.w.now, EventKind::Panic { task });
        self.panicked = true;
        let _ = cpu;
    }

    fn handle_timer(&mut self, cpu: CpuId, epoch: u64) {
        let cs = &self.w.cpus[cpu.0 as usize];
        if cs.epoch != epoch {
            return;
        }
        let task = cs.current.expect("fresh timer implies an occupant");
        debug_assert!(self.w.now >= cs.current_since);
        let elapsed = self.w.now - self.cpu_charge_from[cpu.0 as usize];
        let rem = self.remaining[task.0 as usize];
        if elapsed >= rem {
            // Work segment boundary.
            debug_assert_eq!(elapsed, rem, "timer overshot the work segment");
            self.policy.charge(&mut self.w, task, elapsed);
            self.cpu_charge_from[cpu.0 as usize] = self.w.now;
            self.remaining[task.0 as usize] = 0;
            match self.advance_behavior(task) {
                Outcome::Continue => {
                    if self.w.now >= self.cpu_slice_end[cpu.0 as usize] {
                        self.vacate(cpu, task);
                        self.requeue(cpu, task, EnqueueReason::SliceExpiry);
                    } else {
                        let fire = (self.w.now + self.remaining[task.0 as usize])
                            .min(self.cpu_slice_end[cpu.0 as usize]);
                        self.schedule(fire, Ev::CpuTimer(cpu, epoch));
                    }
                }
                Outcome::Block(d) => {
                    self.vacate(cpu, task);
                    self.block_vacated(cpu, task, d);
                }
                Outcome::Finish => {
                    self.vacate(cpu, task);
                    self.finish_vacated(cpu, task);
                }
                Outcome::Panic => {
                    self.vacate(cpu, task);
                    self.panic_vacated(cpu, task);
                }
            }
        } else {
            // Slice expiry mid-segment.
            debug_assert_eq!(self.w.now, self.cpu_slice_end[cpu.0 as usize]);
            self.policy.charge(&mut self.w, task, elapsed);
            self.remaining[task.0 as usize] = rem - elapsed;
            self.vacate(cpu, task);
            self.requeue(cpu, task, EnqueueReason::SliceExpiry);
        }
    }

    fn pick_and_switch(&mut self, cpu: CpuId, departed: Option<TaskId>) {
        loop {
            let next = self.policy.pick_next(&mut self.w, cpu);
            let Some(task) = next else {
                if let Some(prev) = departed {
                    self.w.trace.push(
                        self.w.now,
                        EventKind::SchedSwitch {
                            cpu,
                            prev: Some(prev),
                            next: None,
                            overhead: 0,
                        },
                    );
                }
                return;
            };
            if self.remaining[task.0 as usize] == 0 {
                // The task's next directive is decided off-CPU; only a
                // Run segment actually occupies the processor.
                match self.advance_behavior(task) {
                    Outcome::Continue => {}
                    Outcome::Block(d) => {
                        self.w.task_mut(task).state = TaskState::Blocked;
                        self.schedule(self.w.now + d, Ev::Wakeup(task));
                        continue;
                    }
                    Outcome::Finish => {
                        self.w.task_mut(task).state = TaskState::Finished;
                        continue;
                    }
                    Outcome::Panic => {
                        self.w.task_mut(task).state = TaskState::Panicked;
                        self.w.trace.push(self.w.now, EventKind::Panic { task });
                        self.panicked = true;
                        return;
                    }
                }
            }
            self.commit(cpu, departed, task);
            return;
        }
    }

    fn commit(&mut self, cpu: CpuId, departed: Option<TaskId>, task: TaskId) {
        let same = departed == Some(task);
        let overhead = if same {
            0
        } else {
            let last = self.w.task(task).last_cpu;
            let migration = match last {
                Some(prev_cpu) if prev_cpu != cpu => self.w.tunables.migration_cost_ns,
                _ => 0,
            };
            self.w.tunables.ctx_switch_cost_ns + migration
        };
        if !same {
            self.w.trace.push(
                self.w.now,
                EventKind::SchedSwitch {
                    cpu,
                    prev: departed,
                    next: Some(task),
                    overhead,
                },
            );
        }
        let start = self.w.now + overhead;
        {
            let cs = &mut self.w.cpus[cpu.0 as usize];
            cs.current = Some(task);
            cs.epoch += 1;
            cs.current_since = start;
        }
        self.w.assert_runnable(task);
        self.w.task_mut(task).state = TaskState::Running;
        self.w.task_mut(task).last_cpu = Some(cpu);
        self.w
            .set_placement(task, Placement::Nowhere, Placement::Running(cpu));
        self.cpu_charge_from[cpu.0 as usize] = start;
        let slice = self.policy.slice_for(&self.w, task);
        let slice_end = start.saturating_add(slice);
        self.cpu_slice_end[cpu.0 as usize] = slice_end;
        let fire = (start + self.remaining[task.0 as usize]).min(slice_end);
        let epoch = self.w.cpus[cpu.0 as usize].epoch;
        self.schedule(fire, Ev::CpuTimer(cpu, epoch));
    }

    /// Drives the behavior program until it yields CPU work, blocks,
    /// finishes or panics. Lock operations resolve inline.
    fn advance_behavior(&mut self, task: TaskId) -> Outcome {
        loop {
            let result = self.lock_result[task.0 as usize].take();
            let step =
                self.behaviors[task.0 as usize].next(self.w.now, &mut self.rngs[task.0 as usize], result);
            match step {
                Step::Run(d) => {
                    self.remaining[task.0 as usize] = d;
                    return Outcome::Continue;
                }
                Step::Block(d) => return Outcome::Block(d),
                Step::RequestDone { latency } => {
                    self.w
                        .trace
                        .push(self.w.now, EventKind::RequestDone { task, latency });
                }
                Step::AttemptLock(lock) => {
                    if let Some(outcome) = self.attempt_lock(task, lock) {
                        return outcome;
                    }
                }
                Step::ReleaseLock(lock) => self.release_lock(task, lock),
                Step::Finish => return Outcome::Finish,
            }
        }
    }

    fn attempt_lock(&mut self, task: TaskId, lock: LockId) -> Option<Outcome> {
        let holder = self.w.locks.get(&lock).expect("known lock").holder;
        let ok = holder.is_none();
        self.w
            .trace
            .push(self.w.now, EventKind::LockAttempt { task, lock, ok });
        self.publish_hint(HintEvent {
            worker: task,
            lock,
            kind: HintKind::Attempt,
        });
        let state = self.w.locks.get_mut(&lock).expect("known lock");
        if ok {
            state.holder = Some(task);
            state.waiters.remove(&task);
            state.consecutive_failures.remove(&task);
            self.holding[task.0 as usize].push(lock);
            self.lock_result[task.0 as usize] = Some(true);
            self.publish_hint(HintEvent {
                worker: task,
                lock,
                kind: HintKind::Acquired,
            });
            None
        } else {
            state.waiters.insert(task);
            let failures = state.consecutive_failures.entry(task).or_insert(0);
            *failures += 1;
            let failures = *failures;
            self.lock_result[task.0 as usize] = Some(false);
            let threshold = self.spin[task.0 as usize]
                .map(|s| s.panic_threshold)
                .unwrap_or(u32::MAX);
            if failures >= threshold {
                return Some(Outcome::Panic);
            }
            None
        }
    }

    fn release_lock(&mut self, task: TaskId, lock: LockId) {
        let state = self.w.locks.get_mut(&lock).expect("known lock");
        assert_eq!(
            state.holder,
            Some(task),
            "task {task} released lock {lock:?} it does not hold"
        );
        state.holder = None;
        let held = &mut self.holding[task.0 as usize];
        held.retain(|&l| l != lock);
        self.w
            .trace
            .push(self.w.now, EventKind::LockRelease { task, lock });
        self.publish_hint(HintEvent {
            worker: task,
            lock,
            kind: HintKind::Released,
        });
    }

    fn publish_hint(&mut self, ev: HintEvent) {
        let policy_boosts = self.policy.kind() == crate::scenario::PolicyKind::Ufs;
        let waiter_is_ts = self.w.sched_tier_of(ev.worker) == Tier::TimeSensitive;
        let w = &self.w;
        let action = self.hints.publish(
            ev,
            waiter_is_ts,
            |holder| {
                policy_boosts
                    && w.tier_of(holder) == Tier::Background
                    && !w.task(holder).boosted
            },
            |holder, lock| w.task(holder).boosted && w.task(holder).boost_lock == Some(lock),
        );
        match action {
            HintAction::None => {}
            HintAction::Boost { holder, waiter } => self.apply_boost(holder, waiter, ev.lock),
            HintAction::Unboost { holder } => self.apply_unboost(holder),
        }
    }

    /// Temporarily treats a background lock holder as time-sensitive:
    /// it re-enqueues direct-to-CPU and competes through a boost-scoped
    /// queue key charged at the waiting task's weight.
    fn apply_boost(&mut self, holder: TaskId, waiter: TaskId, lock: LockId) {
        debug_assert!(!self.w.task(holder).boosted);
        let waiter_scale = self.w.cgroup_of(waiter).charge_scale;
        {
            let t = self.w.task_mut(holder);
            t.boosted = true;
            t.boost_lock = Some(lock);
        }
        self.w
            .trace
            .push(self.w.now, EventKind::Boost { task: holder, lock });
        self.policy.on_boost(&mut self.w, holder, waiter_scale);
        self.drain_effects();
    }

    fn apply_unboost(&mut self, holder: TaskId) {
        {
            let t = self.w.task_mut(holder);
            t.boosted = false;
            t.boost_lock = None;
            t.boost_scale = None;
        }
        self.w
            .trace
            .push(self.w.now, EventKind::Unboost { task: holder });
        self.policy.on_unboost(&mut self.w, holder);
        self.drain_effects();
    }

    fn handle_scenario_event(&mut self, idx: usize) {
        let ev = self.scenario.config.events[idx].clone();
        match ev {
            ScenarioEventSpec::ReassignCgroup { task, cgroup, .. } => {
                let task = TaskId(task);
                let dest = self.scenario.cgroup_by_name[&cgroup];
                let was_queued = !matches!(
                    self.w.placement[task.0 as usize],
                    Placement::Nowhere | Placement::Running(_)
                );
                if was_queued {
                    self.policy.dequeue(&mut self.w, task);
                }
                let dest_cg = &self.w.cgroups[dest.0 as usize];
                let new_vr = dest_cg
                    .min_queued()
                    .map(|(vr, _)| vr)
                    .unwrap_or(dest_cg.group_vruntime);
                {
                    let t = self.w.task_mut(task);
                    t.cgroup = dest;
                    t.vruntime = new_vr;
                }
                let tier = self.w.cgroups[dest.0 as usize].tier;
                self.w.classes[task.0 as usize] = self
                    .scenario
                    .config
                    .policy
                    .class_for(tier, self.scenario.config.policy_params.rt_priority);
                if was_queued {
                    self.policy.enqueue(&mut self.w, task, EnqueueReason::Wakeup);
                    self.drain_effects();
                }
            }
        }
    }

    fn into_output(self) -> RunOutput {
        let mut diagnostics = self.w.diag.clone();
        for (name, value) in self.policy.diagnostics() {
            if name == "dispatch_retry_exhausted" {
                diagnostics.dispatch_retry_exhausted = value;
            }
        }
        let report = metrics::build_report(&self.w.trace, self.scenario);
        RunOutput {
            trace: self.w.trace,
            report,
            diagnostics,
        }
    }
}
