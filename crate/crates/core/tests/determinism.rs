//! Reproducibility: equal (config, seed) must give byte-identical
//! traces and reports, across policies and including the lock scenarios.

use schedsim_core::metrics::build_report;
use schedsim_core::scenario::{preset, PolicyKind};
use schedsim_core::trace::{EventKind, Trace};

#[test]
fn equal_seed_runs_are_byte_identical() {
    for policy in [PolicyKind::Ufs, PolicyKind::Eevdf, PolicyKind::Rr] {
        let mut cfg = preset("min_max", policy).unwrap();
        cfg.engine.duration_us = 8_000_000;
        cfg.engine.warmup_us = 1_000_000;
        let a = schedsim_core::run(&cfg.clone().validate().unwrap());
        let b = schedsim_core::run(&cfg.validate().unwrap());
        assert_eq!(a.trace.to_csv(), b.trace.to_csv(), "{policy} trace differs");
        assert_eq!(a.report.to_json(), b.report.to_json(), "{policy} report differs");
    }
}

#[test]
fn different_seeds_differ_when_randomness_is_drawn() {
    let mut a = preset("min_max", PolicyKind::Ufs).unwrap();
    a.engine.duration_us = 3_000_000;
    a.engine.warmup_us = 500_000;
    let mut b = a.clone();
    b.engine.rng_seed = 43;
    let ta = schedsim_core::run(&a.validate().unwrap()).trace.to_csv();
    let tb = schedsim_core::run(&b.validate().unwrap()).trace.to_csv();
    assert_ne!(ta, tb, "bursty service draws must depend on the seed");
}

#[test]
fn lock_scenario_is_reproducible_end_to_end() {
    let cfg = preset("lock_inversion", PolicyKind::Eevdf).unwrap();
    let a = schedsim_core::run(&cfg.clone().validate().unwrap());
    let b = schedsim_core::run(&cfg.validate().unwrap());
    assert!(a.report.panicked);
    assert_eq!(a.trace.to_csv(), b.trace.to_csv());
}

#[test]
fn report_is_a_pure_function_of_trace_and_config() {
    let mut cfg = preset("fifty_fifty", PolicyKind::Ufs).unwrap();
    cfg.engine.duration_us = 5_000_000;
    cfg.engine.warmup_us = 1_000_000;
    let sc = cfg.clone().validate().unwrap();
    let out = schedsim_core::run(&sc);
    let parsed = Trace::from_csv(&out.trace.to_csv()).unwrap();
    let replayed = build_report(&parsed, &sc);
    assert_eq!(out.report.to_json(), replayed.to_json());
}

#[test]
fn first_wakeup_onto_idle_cpu_starts_after_one_switch_cost() {
    let mut cfg = preset("solo_bursty", PolicyKind::Ufs).unwrap();
    cfg.engine.duration_us = 100_000;
    cfg.engine.warmup_us = 0;
    cfg.tasks.truncate(1);
    let out = schedsim_core::run(&cfg.validate().unwrap());
    let wake = out
        .trace
        .events
        .iter()
        .find_map(|e| match e.kind {
            EventKind::Wakeup { .. } => Some(e.time),
            _ => None,
        })
        .unwrap();
    let (start, overhead) = out
        .trace
        .events
        .iter()
        .find_map(|e| match e.kind {
            EventKind::SchedSwitch {
                next: Some(_),
                overhead,
                ..
            } => Some((e.time, overhead)),
            _ => None,
        })
        .unwrap();
    assert_eq!(start + overhead - wake, 5_000, "gap equals the switch cost");
}
