//! Trace validators: replay a trace and assert the scheduler-level
//! properties that must hold for a run to be trusted.

use std::collections::BTreeSet;

use crate::metrics::cpu_intervals;
use crate::model::{CpuId, SimTime, TaskId, Tier};
use crate::scenario::Scenario;
use crate::trace::{EnqueueTarget, EventKind, Trace};

/// Per CPU: attributed busy + idle + switch overhead must equal the
/// window length exactly.
pub fn check_time_accounting(trace: &Trace, scenario: &Scenario) -> Result<(), String> {
    let cfg = &scenario.config;
    let run_end = trace
        .events
        .iter()
        .find_map(|e| match e.kind {
            EventKind::Panic { .. } => Some(e.time),
            _ => None,
        })
        .unwrap_or(cfg.engine.duration_ns());
    let from = cfg.engine.warmup_ns().min(run_end);
    let cpus = crate::metrics::attribute_cpu_time(trace, scenario, from, run_end, run_end);
    for c in &cpus {
        let total = c.busy_ns.values().sum::<u64>() + c.idle_ns + c.overhead_ns;
        let capacity = run_end - from;
        if total != capacity {
            return Err(format!(
                "cpu {}: busy+idle+overhead = {} != capacity {}",
                c.cpu, total, capacity
            ));
        }
    }
    Ok(())
}

/// No CPU may sit idle longer than the grace period while a runnable
/// task that could run there waits in a queue.
pub fn check_work_conservation(trace: &Trace, scenario: &Scenario) -> Result<(), String> {
    let ncpus = scenario.config.cpus;
    let grace = scenario.config.engine.ctx_switch_cost_ns() + 1;
    let run_end = scenario.config.engine.duration_ns();
    let ntasks = scenario.config.tasks.len();

    // Running spans per task, from the reconstructed CPU timelines.
    let mut running: Vec<Vec<(SimTime, SimTime)>> = vec![Vec::new(); ntasks];
    for ivs in cpu_intervals(trace, ncpus, run_end) {
        for iv in ivs {
            if let Some(t) = iv.occupant {
                // The span effectively begins when the switch work starts.
                running[t.0 as usize].push((iv.start - iv.overhead, iv.end));
            }
        }
    }
    for spans in &mut running {
        spans.sort_unstable();
    }

    // Waiting spans: each enqueue opens a wait that closes at the next
    // running span. An enqueue inside a running span is an elided
    // requeue of the task that kept the CPU; it never waited.
    let mut waiting_spans: Vec<(TaskId, SimTime, SimTime)> = Vec::new();
    for ev in &trace.events {
        if let EventKind::Enqueue { task, .. } = ev.kind {
            let spans = &running[task.0 as usize];
            let idx = spans.partition_point(|&(_, end)| end <= ev.time);
            match spans.get(idx) {
                Some(&(start, _)) if start <= ev.time => {} // still running
                Some(&(start, _)) => waiting_spans.push((task, ev.time, start)),
                None => waiting_spans.push((task, ev.time, run_end)),
            }
        }
    }

    let idle_spans: Vec<(CpuId, SimTime, SimTime)> = cpu_intervals(trace, ncpus, run_end)
        .into_iter()
        .enumerate()
        .flat_map(|(cpu, ivs)| {
            ivs.into_iter()
                .filter(|iv| iv.occupant.is_none())
                .map(move |iv| (CpuId(cpu as u32), iv.start, iv.end))
        })
        .collect();

    for &(task, wait_from, wait_to) in &waiting_spans {
        let affinity = &scenario.task_affinity[task.0 as usize];
        for &(cpu, idle_from, idle_to) in &idle_spans {
            if !affinity.contains(&cpu) {
                continue;
            }
            let overlap_from = wait_from.max(idle_from);
            let overlap_to = wait_to.min(idle_to);
            if overlap_to > overlap_from + grace {
                return Err(format!(
                    "task {} waited [{}, {}] while cpu {} idled [{}, {}]",
                    task.0, wait_from, wait_to, cpu.0, idle_from, idle_to
                ));
            }
        }
    }
    Ok(())
}

/// No switch may start a non-boosted background task while a
/// time-sensitive task sits runnable without a CPU assignment for longer
/// than the switch cost. Time-sensitive tasks are placed into a local
/// queue at wakeup, so the unplaced window must stay within one event.
pub fn check_tier_precedence(trace: &Trace, scenario: &Scenario) -> Result<(), String> {
    let tiers: Vec<Tier> = scenario
        .task_cgroup
        .iter()
        .map(|cg| scenario.cgroups[cg.0 as usize].tier)
        .collect();
    let grace = scenario.config.engine.ctx_switch_cost_ns();
    let ntasks = scenario.config.tasks.len();
    let mut boosted: Vec<bool> = vec![false; ntasks];
    // Time-sensitive tasks runnable but not yet placed into any local
    // queue (woken, placement pending).
    let mut unplaced_ts: Vec<Option<SimTime>> = vec![None; ntasks];
    for ev in &trace.events {
        match ev.kind {
            EventKind::Boost { task, .. } => boosted[task.0 as usize] = true,
            EventKind::Unboost { task } => boosted[task.0 as usize] = false,
            EventKind::Wakeup { task } => {
                if tiers[task.0 as usize] == Tier::TimeSensitive || boosted[task.0 as usize] {
                    unplaced_ts[task.0 as usize] = Some(ev.time);
                }
            }
            EventKind::Enqueue {
                task,
                target: EnqueueTarget::Local(_),
            } => {
                unplaced_ts[task.0 as usize] = None;
            }
            EventKind::SchedSwitch {
                cpu,
                next: Some(task),
                ..
            } => {
                unplaced_ts[task.0 as usize] = None;
                if tiers[task.0 as usize] == Tier::Background && !boosted[task.0 as usize] {
                    let affinity_hits = unplaced_ts.iter().enumerate().find(|(ts, since)| {
                        since.is_some_and(|s| ev.time > s + grace)
                            && scenario.task_affinity[*ts].contains(&cpu)
                    });
                    if let Some((ts, since)) = affinity_hits {
                        return Err(format!(
                            "background task {} started at {} on cpu {} while ts task {} \
                             was unplaced since {:?}",
                            task.0, ev.time, cpu.0, ts, since
                        ));
                    }
                }
            }
            _ => {}
        }
    }
    Ok(())
}

/// Events must carry non-decreasing timestamps.
pub fn check_event_order(trace: &Trace) -> Result<(), String> {
    let mut last = 0;
    for ev in &trace.events {
        if ev.time < last {
            return Err(format!("event at {} after {}", ev.time, last));
        }
        last = ev.time;
    }
    Ok(())
}

/// A boosted span must close (unboost) before the task's next wakeup
/// after release, and every boost pairs with exactly one unboost.
pub fn check_boost_pairing(trace: &Trace) -> Result<(), String> {
    let mut boosted: BTreeSet<TaskId> = BTreeSet::new();
    let mut boosts = 0u64;
    let mut unboosts = 0u64;
    for ev in &trace.events {
        match ev.kind {
            EventKind::Boost { task, .. } => {
                if !boosted.insert(task) {
                    return Err(format!("double boost of task {}", task.0));
                }
                boosts += 1;
            }
            EventKind::Unboost { task } => {
                if !boosted.remove(&task) {
                    return Err(format!("unboost of non-boosted task {}", task.0));
                }
                unboosts += 1;
            }
            _ => {}
        }
    }
    if !boosted.is_empty() {
        return Err(format!("{} boosts never released", boosted.len()));
    }
    if boosts != unboosts {
        return Err(format!("{boosts} boosts vs {unboosts} unboosts"));
    }
    Ok(())
}

/// Full validator bundle for policies that guarantee work conservation
/// and tier precedence (the two-tier policy does; baselines knowingly
/// violate them as part of the failure modes they model).
pub fn check_all_ufs(trace: &Trace, scenario: &Scenario) -> Result<(), String> {
    check_event_order(trace)?;
    check_time_accounting(trace, scenario)?;
    check_work_conservation(trace, scenario)?;
    check_tier_precedence(trace, scenario)?;
    check_boost_pairing(trace)?;
    Ok(())
}
