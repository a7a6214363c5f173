//! Trace-derived measurements: throughput, latency percentiles, wakeup
//! latency, per-CPU busy-time attribution and lock scenario summaries.
//!
//! The report is a pure function of (trace, scenario), so replaying a
//! trace file through this module reproduces a run's report exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{CpuId, SimTime, TaskId};
use crate::scenario::Scenario;
use crate::trace::{EventKind, Trace};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct WindowNs {
    pub from_ns: u64,
    pub to_ns: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct GroupMetrics {
    pub completed: u64,
    pub throughput_rps: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_latency_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p50_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p95_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p999_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wakeup_p999_ms: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CpuMetrics {
    pub cpu: u32,
    /// Busy time attributed per workload group, nanoseconds.
    pub busy_ns: BTreeMap<String, u64>,
    pub idle_ns: u64,
    pub overhead_ns: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct Totals {
    pub busy_ns: u64,
    pub idle_ns: u64,
    pub overhead_ns: u64,
    pub migrations: u64,
    pub kicks: u64,
    pub boosts: u64,
    pub unboosts: u64,
    /// Whole-run count, not limited to the measurement window.
    pub panics: u64,
    pub dropped_wakeup_samples: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LockTaskSummary {
    pub task: u32,
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acquired_at_ns: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub released_at_ns: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub completed_at_ns: Option<u64>,
    pub failed_attempts: u64,
    pub panicked: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub scenario: String,
    pub policy: String,
    pub seed: u64,
    pub window: WindowNs,
    pub groups: BTreeMap<String, GroupMetrics>,
    pub cpus: Vec<CpuMetrics>,
    pub totals: Totals,
    pub panicked: bool,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub locks: Vec<LockTaskSummary>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(input: &str) -> Result<MetricsReport, serde_json::Error> {
        serde_json::from_str(input)
    }

    /// Flat CSV, one row per workload group.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "scenario,policy,seed,group,completed,throughput_rps,mean_latency_ms,p50_ms,p95_ms,p999_ms,wakeup_p999_ms\n",
        );
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
        for (name, g) in &self.groups {
            out.push_str(&format!(
                "{},{},{},{},{},{:.6},{},{},{},{},{}\n",
                self.scenario,
                self.policy,
                self.seed,
                name,
                g.completed,
                g.throughput_rps,
                fmt(g.mean_latency_ms),
                fmt(g.p50_ms),
                fmt(g.p95_ms),
                fmt(g.p999_ms),
                fmt(g.wakeup_p999_ms),
            ));
        }
        out
    }
}

/// Nearest-rank percentile on unsorted samples; `None` when empty.
pub fn latency_percentile(samples: &[u64], p: f64) -> Option<u64> {
    if samples.is_empty() || !(0.0..1.0).contains(&p) || p == 0.0 {
        return if samples.is_empty() { None } else { Some(sorted(samples)[0]) };
    }
    let s = sorted(samples);
    let rank = (p * s.len() as f64).ceil() as usize;
    Some(s[rank.clamp(1, s.len()) - 1])
}

fn sorted(samples: &[u64]) -> Vec<u64> {
    let mut s = samples.to_vec();
    s.sort_unstable();
    s
}

/// Busy/idle/overhead intervals reconstructed from the switch events of
/// one CPU. `occupant == None` marks idle spans.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interval {
    pub occupant: Option<TaskId>,
    pub start: SimTime,
    pub end: SimTime,
    /// Switch work preceding this interval (not part of it).
    pub overhead: u64,
}

/// Exact interval attribution from consecutive switch events: the task
/// named by a switch occupies the CPU from the end of the switch work
/// until the next switch begins.
pub fn cpu_intervals(trace: &Trace, ncpus: u32, run_end: SimTime) -> Vec<Vec<Interval>> {
    let mut per_cpu: Vec<Vec<Interval>> = vec![Vec::new(); ncpus as usize];
    // (occupant, interval start, overhead spent entering it)
    let mut open: Vec<(Option<TaskId>, SimTime, u64)> = vec![(None, 0, 0); ncpus as usize];
    for ev in &trace.events {
        if let EventKind::SchedSwitch {
            cpu,
            prev,
            next,
            overhead,
        } = ev.kind
        {
            let (occupant, started, entry_overhead) = open[cpu.0 as usize];
            assert_eq!(
                occupant, prev,
                "switch at {} on cpu {} names prev {:?} but {:?} was running",
                ev.time, cpu.0, prev, occupant
            );
            per_cpu[cpu.0 as usize].push(Interval {
                occupant,
                start: started,
                end: ev.time,
                overhead: entry_overhead,
            });
            open[cpu.0 as usize] = (next, ev.time + overhead, overhead);
        }
    }
    for (cpu, (occupant, started, entry_overhead)) in open.into_iter().enumerate() {
        per_cpu[cpu].push(Interval {
            occupant,
            start: started.min(run_end),
            end: run_end,
            overhead: entry_overhead,
        });
    }
    per_cpu
}

fn clip(start: SimTime, end: SimTime, from: SimTime, to: SimTime) -> u64 {
    end.min(to).saturating_sub(start.max(from))
}

/// Per-CPU per-group busy time over a window, plus idle and overhead.
pub fn attribute_cpu_time(
    trace: &Trace,
    scenario: &Scenario,
    from: SimTime,
    to: SimTime,
    run_end: SimTime,
) -> Vec<CpuMetrics> {
    let group_names: Vec<&str> = scenario
        .task_cgroup
        .iter()
        .map(|cg| scenario.cgroups[cg.0 as usize].name.as_str())
        .collect();
    cpu_intervals(trace, scenario.config.cpus, run_end)
        .into_iter()
        .enumerate()
        .map(|(cpu, intervals)| {
            let mut busy: BTreeMap<String, u64> = BTreeMap::new();
            let mut idle = 0u64;
            let mut overhead = 0u64;
            for iv in intervals {
                // Switch work occupies [start - overhead, start].
                overhead += clip(iv.start - iv.overhead, iv.start, from, to);
                let span = clip(iv.start, iv.end, from, to);
                match iv.occupant {
                    Some(task) => {
                        *busy
                            .entry(group_names[task.0 as usize].to_string())
                            .or_insert(0) += span;
                    }
                    None => idle += span,
                }
            }
            CpuMetrics {
                cpu: cpu as u32,
                busy_ns: busy,
                idle_ns: idle,
                overhead_ns: overhead,
            }
        })
        .collect()
}

/// Normalizes per-CPU loads so the most loaded CPU reads 100.
pub fn normalize_to_max(values: &[u64]) -> Vec<f64> {
    let max = values.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return vec![0.0; values.len()];
    }
    values
        .iter()
        .map(|&v| v as f64 * 100.0 / max as f64)
        .collect()
}

/// Wakeup-to-first-run gaps per task, with the count of wakeups never
/// scheduled before the run ended.
pub fn wakeup_latencies(
    trace: &Trace,
    ntasks: usize,
    from: SimTime,
    to: SimTime,
) -> (Vec<Vec<u64>>, u64) {
    let mut pending: Vec<Option<SimTime>> = vec![None; ntasks];
    let mut samples: Vec<Vec<u64>> = vec![Vec::new(); ntasks];
    let mut dropped = 0u64;
    for ev in &trace.events {
        match ev.kind {
            EventKind::Wakeup { task } => {
                debug_assert!(pending[task.0 as usize].is_none());
                pending[task.0 as usize] = Some(ev.time);
            }
            EventKind::SchedSwitch {
                next: Some(task),
                overhead,
                ..
            } => {
                if let Some(woke) = pending[task.0 as usize].take() {
                    if woke >= from && woke < to {
                        samples[task.0 as usize].push(ev.time + overhead - woke);
                    }
                }
            }
            _ => {}
        }
    }
    for p in pending.into_iter().flatten() {
        if p >= from && p < to {
            dropped += 1;
        }
    }
    (samples, dropped)
}

pub fn build_report(trace: &Trace, scenario: &Scenario) -> MetricsReport {
    let cfg = &scenario.config;
    let duration = cfg.engine.duration_ns();
    let panic_time = trace.events.iter().find_map(|ev| match ev.kind {
        EventKind::Panic { .. } => Some(ev.time),
        _ => None,
    });
    let run_end = panic_time.unwrap_or(duration).min(duration);
    let from = cfg.engine.warmup_ns().min(run_end);
    let to = run_end;

    let ntasks = cfg.tasks.len();
    let group_of: Vec<String> = scenario
        .task_cgroup
        .iter()
        .map(|cg| scenario.cgroups[cg.0 as usize].name.clone())
        .collect();

    let mut latencies: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    let mut totals = Totals::default();
    let mut last_started_on: Vec<Option<CpuId>> = vec![None; ntasks];
    let mut lock_summary: BTreeMap<u32, LockTaskSummary> = BTreeMap::new();
    fn lock_entry<'a>(
        m: &'a mut BTreeMap<u32, LockTaskSummary>,
        cfg: &crate::scenario::ScenarioConfig,
        task: TaskId,
    ) -> &'a mut LockTaskSummary {
        m.entry(task.0).or_insert_with(|| LockTaskSummary {
            task: task.0,
            name: cfg.tasks[task.0 as usize]
                .name
                .clone()
                .unwrap_or_else(|| format!("task{}", task.0)),
            acquired_at_ns: None,
            released_at_ns: None,
            completed_at_ns: None,
            failed_attempts: 0,
            panicked: false,
        })
    }

    for ev in &trace.events {
        let in_window = ev.time >= from && ev.time < to;
        match ev.kind {
            EventKind::RequestDone { task, latency } => {
                if in_window {
                    latencies
                        .entry(group_of[task.0 as usize].clone())
                        .or_default()
                        .push(latency);
                }
                if self_is_lock_task(cfg, task) {
                    lock_entry(&mut lock_summary, cfg, task).completed_at_ns = Some(ev.time);
                }
            }
            EventKind::SchedSwitch {
                cpu,
                next: Some(task),
                ..
            } => {
                if let Some(prev_cpu) = last_started_on[task.0 as usize] {
                    if prev_cpu != cpu && in_window {
                        totals.migrations += 1;
                    }
                }
                last_started_on[task.0 as usize] = Some(cpu);
            }
            EventKind::Kick { .. } => {
                if in_window {
                    totals.kicks += 1;
                }
            }
            EventKind::Boost { task, .. } => {
                totals.boosts += 1;
                lock_entry(&mut lock_summary, cfg, task);
            }
            EventKind::Unboost { .. } => totals.unboosts += 1,
            EventKind::Panic { task } => {
                totals.panics += 1;
                lock_entry(&mut lock_summary, cfg, task).panicked = true;
            }
            EventKind::LockAttempt { task, ok, .. } => {
                let entry = lock_entry(&mut lock_summary, cfg, task);
                if ok {
                    if entry.acquired_at_ns.is_none() {
                        entry.acquired_at_ns = Some(ev.time);
                    }
                } else {
                    entry.failed_attempts += 1;
                }
            }
            EventKind::LockRelease { task, .. } => {
                lock_entry(&mut lock_summary, cfg, task).released_at_ns = Some(ev.time);
            }
            _ => {}
        }
    }

    let cpus = attribute_cpu_time(trace, scenario, from, to, run_end);
    for c in &cpus {
        totals.busy_ns += c.busy_ns.values().sum::<u64>();
        totals.idle_ns += c.idle_ns;
        totals.overhead_ns += c.overhead_ns;
    }

    let (wake_samples, dropped) = wakeup_latencies(trace, ntasks, from, to);
    totals.dropped_wakeup_samples = dropped;
    let mut wake_by_group: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    for (i, samples) in wake_samples.into_iter().enumerate() {
        wake_by_group
            .entry(group_of[i].clone())
            .or_default()
            .extend(samples);
    }

    let window_s = (to.saturating_sub(from)) as f64 / 1e9;
    let mut groups: BTreeMap<String, GroupMetrics> = BTreeMap::new();
    for cg in &scenario.cgroups {
        let lat = latencies.remove(&cg.name).unwrap_or_default();
        let wake = wake_by_group.remove(&cg.name).unwrap_or_default();
        let completed = lat.len() as u64;
        let to_ms = |v: u64| v as f64 / 1e6;
        groups.insert(
            cg.name.clone(),
            GroupMetrics {
                completed,
                throughput_rps: if window_s > 0.0 {
                    completed as f64 / window_s
                } else {
                    0.0
                },
                mean_latency_ms: mean(&lat).map(to_ms),
                p50_ms: latency_percentile(&lat, 0.50).map(to_ms),
                p95_ms: latency_percentile(&lat, 0.95).map(to_ms),
                p999_ms: latency_percentile(&lat, 0.999).map(to_ms),
                wakeup_p999_ms: latency_percentile(&wake, 0.999).map(to_ms),
            },
        );
    }

    MetricsReport {
        scenario: cfg.name.clone(),
        policy: cfg.policy.name().to_string(),
        seed: cfg.engine.rng_seed,
        window: WindowNs {
            from_ns: from,
            to_ns: to,
        },
        groups,
        cpus,
        totals,
        panicked: panic_time.is_some(),
        locks: lock_summary.into_values().collect(),
    }
}

fn self_is_lock_task(cfg: &crate::scenario::ScenarioConfig, task: TaskId) -> bool {
    cfg.tasks[task.0 as usize].workload.lock().is_some()
}

fn mean(samples: &[u64]) -> Option<u64> {
    if samples.is_empty() {
        return None;
    }
    Some((samples.iter().map(|&v| v as u128).sum::<u128>() / samples.len() as u128) as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CpuId;
    use crate::scenario::{preset, PolicyKind};
    use crate::trace::EventKind;

    #[test]
    fn nearest_rank_percentiles() {
        let samples: Vec<u64> = (1..=100).collect();
        assert_eq!(latency_percentile(&samples, 0.95), Some(95));
        assert_eq!(latency_percentile(&[7], 0.5), Some(7));
        assert_eq!(latency_percentile(&[7], 0.999), Some(7));
        assert_eq!(latency_percentile(&[], 0.95), None);
    }

    #[test]
    fn percentiles_are_monotone_in_p() {
        let samples: Vec<u64> = (0..1000).map(|i| (i * 37) % 997).collect();
        let p50 = latency_percentile(&samples, 0.5).unwrap();
        let p95 = latency_percentile(&samples, 0.95).unwrap();
        let p999 = latency_percentile(&samples, 0.999).unwrap();
        assert!(p50 <= p95 && p95 <= p999);
    }

    #[test]
    fn exponential_p95_matches_analytic_quantile() {
        // p95 of Exp(mean m) is m * ln(20).
        use rand_distr::{Distribution, Exp};
        let mut rng = crate::workload::task_rng(123, 0);
        let mean_ns = 2_000_000f64;
        let exp = Exp::new(1.0 / mean_ns).unwrap();
        let samples: Vec<u64> = (0..10_000).map(|_| exp.sample(&mut rng) as u64).collect();
        let analytic = mean_ns * 20f64.ln();
        let measured = latency_percentile(&samples, 0.95).unwrap() as f64;
        assert!(
            (measured - analytic).abs() / analytic < 0.05,
            "measured {measured} vs analytic {analytic}"
        );
    }

    #[test]
    fn attribution_from_synthetic_trace() {
        // One task runs a full second on CPU 0 with a 5us switch-in.
        let sc = preset("solo_bursty", PolicyKind::Ufs).unwrap().validate().unwrap();
        let mut trace = Trace::default();
        trace.push(0, EventKind::Wakeup { task: TaskId(0) });
        trace.push(
            0,
            EventKind::SchedSwitch {
                cpu: CpuId(0),
                prev: None,
                next: Some(TaskId(0)),
                overhead: 5_000,
            },
        );
        let end = 1_000_000_000;
        let cpus = attribute_cpu_time(&trace, &sc, 0, end, end);
        assert_eq!(cpus[0].busy_ns["ts_hi"], end - 5_000);
        assert_eq!(cpus[0].overhead_ns, 5_000);
        assert_eq!(cpus[0].idle_ns, 0);
        assert_eq!(cpus[1].idle_ns, end);
    }

    #[test]
    fn attribution_interleaved_tasks_split_evenly() {
        // A and B alternate every 4ms for 1s with zero-cost switches.
        let sc = preset("solo_bursty", PolicyKind::Ufs).unwrap().validate().unwrap();
        let mut trace = Trace::default();
        let slice = 4_000_000u64;
        let mut t = 0u64;
        let mut who = 0u32;
        while t < 1_000_000_000 {
            trace.push(
                t,
                EventKind::SchedSwitch {
                    cpu: CpuId(0),
                    prev: if t == 0 { None } else { Some(TaskId(1 - who)) },
                    next: Some(TaskId(who)),
                    overhead: 0,
                },
            );
            who = 1 - who;
            t += slice;
        }
        let end = 1_000_000_000;
        let cpus = attribute_cpu_time(&trace, &sc, 0, end, end);
        let total: u64 = cpus[0].busy_ns.values().sum();
        assert_eq!(total, end);
    }

    #[test]
    fn normalization_anchors_max_at_100() {
        let n = normalize_to_max(&[800_000_000, 400_000_000]);
        assert_eq!(n, vec![100.0, 50.0]);
    }

    #[test]
    fn wakeup_gap_includes_switch_overhead() {
        let mut trace = Trace::default();
        trace.push(100, EventKind::Wakeup { task: TaskId(0) });
        trace.push(
            100,
            EventKind::SchedSwitch {
                cpu: CpuId(0),
                prev: None,
                next: Some(TaskId(0)),
                overhead: 5_000,
            },
        );
        let (samples, dropped) = wakeup_latencies(&trace, 1, 0, 1_000_000);
        assert_eq!(samples[0], vec![5_000]);
        assert_eq!(dropped, 0);
    }

    #[test]
    fn unscheduled_wakeup_is_dropped_and_counted() {
        let mut trace = Trace::default();
        trace.push(100, EventKind::Wakeup { task: TaskId(0) });
        let (samples, dropped) = wakeup_latencies(&trace, 1, 0, 1_000_000);
        assert!(samples[0].is_empty());
        assert_eq!(dropped, 1);
    }
}
