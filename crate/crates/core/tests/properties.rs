//! Property tests over the scheduling primitives plus trace-level
//! invariants on real runs.

use proptest::prelude::*;
use schedsim_core::metrics::{cpu_intervals, latency_percentile};
use schedsim_core::model::TaskId;
use schedsim_core::scenario::{preset, PolicyKind};
use schedsim_core::trace::EventKind;
use schedsim_core::world::clamp_vruntime;

proptest! {
    /// After clamping, the task is never more than one slice behind its
    /// group, never loses vruntime, and in-bound values pass unchanged.
    #[test]
    fn clamp_bound_holds(task_vr in 0u64..u64::MAX / 2, group_vr in 0u64..u64::MAX / 2, slice in 1u64..100_000_000) {
        let clamped = clamp_vruntime(task_vr, group_vr, slice);
        prop_assert!(clamped >= task_vr);
        prop_assert!(clamped + slice >= group_vr);
        if task_vr + slice >= group_vr {
            prop_assert_eq!(clamped, task_vr);
        }
    }

    /// Nearest-rank percentiles are monotone in p and bounded by the
    /// sample extremes.
    #[test]
    fn percentiles_monotone(mut samples in prop::collection::vec(0u64..1_000_000, 1..200),
                            p in 0.01f64..0.99, q in 0.01f64..0.99) {
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        let a = latency_percentile(&samples, lo).unwrap();
        let b = latency_percentile(&samples, hi).unwrap();
        prop_assert!(a <= b);
        samples.sort_unstable();
        prop_assert!(a >= samples[0] && b <= samples[samples.len() - 1]);
    }

    /// CSV encoding of a trace parses back to the same events.
    #[test]
    fn trace_round_trips(times in prop::collection::vec(0u64..1_000_000_000, 1..50)) {
        use schedsim_core::model::{CpuId, LockId};
        use schedsim_core::trace::{EnqueueTarget, KickReason, Trace};
        let mut sorted = times.clone();
        sorted.sort_unstable();
        let mut trace = Trace::default();
        for (i, t) in sorted.iter().enumerate() {
            let task = TaskId((i % 7) as u32);
            let kind = match i % 6 {
                0 => EventKind::Wakeup { task },
                1 => EventKind::SchedSwitch {
                    cpu: CpuId((i % 3) as u32),
                    prev: if i % 2 == 0 { None } else { Some(task) },
                    next: Some(TaskId(((i + 1) % 7) as u32)),
                    overhead: (i * 13) as u64,
                },
                2 => EventKind::Kick {
                    cpu: CpuId((i % 3) as u32),
                    reason: if i % 2 == 0 { KickReason::Idle } else { KickReason::Preempt },
                },
                3 => EventKind::Enqueue {
                    task,
                    target: if i % 2 == 0 {
                        EnqueueTarget::Local(CpuId(1))
                    } else {
                        EnqueueTarget::Group(schedsim_core::model::CgroupId(2))
                    },
                },
                4 => EventKind::LockAttempt { task, lock: LockId(0), ok: i % 2 == 0 },
                _ => EventKind::RequestDone { task, latency: (i * 997) as u64 },
            };
            trace.push(*t, kind);
        }
        let parsed = Trace::from_csv(&trace.to_csv()).unwrap();
        prop_assert_eq!(parsed.events, trace.events);
    }
}

/// Closed-loop conservation: per bursty client, completions track
/// wakeups within the single outstanding request.
#[test]
fn closed_loop_conservation() {
    let cfg = preset("min_max", PolicyKind::Ufs).unwrap();
    let ntasks = cfg.tasks.len();
    let bursty: Vec<bool> = cfg.tasks.iter().map(|t| t.workload.is_bursty()).collect();
    let out = schedsim_core::run(&cfg.validate().unwrap());
    let mut wakes = vec![0i64; ntasks];
    let mut dones = vec![0i64; ntasks];
    for ev in &out.trace.events {
        match ev.kind {
            EventKind::Wakeup { task } => wakes[task.0 as usize] += 1,
            EventKind::RequestDone { task, .. } => dones[task.0 as usize] += 1,
            _ => {}
        }
    }
    for t in 0..ntasks {
        if bursty[t] {
            let diff = wakes[t] - dones[t];
            assert!(
                (0..=1).contains(&diff),
                "client {t}: {} wakes vs {} completions",
                wakes[t],
                dones[t]
            );
        }
    }
}

/// Boost liveness: from boost to unboost, the boosted holder receives at
/// least 40% of CPU 0 even against a time-sensitive burner.
#[test]
fn boosted_holder_gets_fair_share_until_release() {
    let cfg = preset("lock_inversion", PolicyKind::Ufs).unwrap();
    let duration = cfg.engine.duration_us * 1_000;
    let out = schedsim_core::run(&cfg.validate().unwrap());
    let boost_at = out
        .trace
        .events
        .iter()
        .find_map(|e| match e.kind {
            EventKind::Boost { task, .. } => Some((e.time, task)),
            _ => None,
        })
        .expect("holder gets boosted");
    let unboost_at = out
        .trace
        .events
        .iter()
        .find_map(|e| match e.kind {
            EventKind::Unboost { task } if task == boost_at.1 => Some(e.time),
            _ => None,
        })
        .expect("boost is released");
    assert!(unboost_at > boost_at.0);
    let mut holder_busy = 0u64;
    for iv in &cpu_intervals(&out.trace, 1, duration)[0] {
        if iv.occupant == Some(boost_at.1) {
            let from = iv.start.max(boost_at.0);
            let to = iv.end.min(unboost_at);
            holder_busy += to.saturating_sub(from);
        }
    }
    let share = holder_busy as f64 / (unboost_at - boost_at.0) as f64;
    assert!(
        share >= 0.40,
        "boosted holder got {:.1}% of CPU 0 between boost and unboost",
        share * 100.0
    );
}

/// Boosts pair with unboosts and never nest, across every lock preset
/// and policy that boosts.
#[test]
fn boost_pairing_across_lock_presets() {
    for name in ["lock_inversion", "lock_inversion_baseline"] {
        let cfg = preset(name, PolicyKind::Ufs).unwrap();
        let sc = cfg.validate().unwrap();
        let out = schedsim_core::run(&sc);
        schedsim_core::checks::check_boost_pairing(&out.trace)
            .unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

/// The holder is boosted exactly once by the first waiter attempt, and
/// disabling hinting suppresses the boost entirely.
#[test]
fn inversion_boost_counts() {
    let cfg = preset("lock_inversion", PolicyKind::Ufs).unwrap();
    let out = schedsim_core::run(&cfg.validate().unwrap());
    assert_eq!(out.report.totals.boosts, 1);
    assert_eq!(out.report.totals.unboosts, 1);

    let mut cfg = preset("lock_inversion", PolicyKind::Ufs).unwrap();
    cfg.hinting = false;
    let out = schedsim_core::run(&cfg.validate().unwrap());
    assert_eq!(out.report.totals.boosts, 0);
    // Lock traffic is still recorded in the trace.
    assert!(out
        .trace
        .events
        .iter()
        .any(|e| matches!(e.kind, EventKind::LockAttempt { .. })));
}

/// Trace events from a long mixed run stay time-ordered, and every
/// switch names the previous occupant correctly (checked by the
/// interval reconstruction).
#[test]
fn trace_is_consistent_across_policies() {
    for policy in PolicyKind::ALL {
        let mut cfg = preset("min_max", policy).unwrap();
        cfg.engine.duration_us = 5_000_000;
        cfg.engine.warmup_us = 1_000_000;
        let cpus = cfg.cpus;
        let out = schedsim_core::run(&cfg.validate().unwrap());
        schedsim_core::checks::check_event_order(&out.trace).unwrap();
        let _ = cpu_intervals(&out.trace, cpus, 5_000_000_000);
    }
}
