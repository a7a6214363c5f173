//! Acceptance checks: the release gate for this simulator, evaluated on
//! the embedded presets at the default seed. Each check runs the presets
//! it needs (runs are cached) and produces one pass/fail verdict with
//! the measured figures.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::engine::{run, RunOutput};
use crate::metrics::MetricsReport;
use crate::scenario::{preset, PolicyKind};

#[derive(Debug, Clone)]
pub struct CriterionResult {
    pub id: u32,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        format!(
            "{} criterion {:2} {:<22} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail
        )
    }
}

type RunKey = (&'static str, PolicyKind, bool);

fn cache() -> &'static Mutex<BTreeMap<RunKey, Arc<RunOutput>>> {
    static CACHE: OnceLock<Mutex<BTreeMap<RunKey, Arc<RunOutput>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(BTreeMap::new()))
}

/// Runs (or fetches) a preset under a policy at the default seed.
pub fn cached_run(name: &'static str, policy: PolicyKind, hinting: bool) -> Arc<RunOutput> {
    if let Some(hit) = cache().lock().unwrap().get(&(name, policy, hinting)) {
        return hit.clone();
    }
    let mut cfg = preset(name, policy).expect("known preset");
    cfg.hinting = hinting;
    let out = Arc::new(run(&cfg.validate().expect("preset validates")));
    cache()
        .lock()
        .unwrap()
        .insert((name, policy, hinting), out.clone());
    out
}

fn bursty_rps(r: &MetricsReport) -> f64 {
    r.groups
        .iter()
        .filter(|(name, _)| name.starts_with("ts_hi") || name.starts_with("ts_w"))
        .map(|(_, g)| g.throughput_rps)
        .sum()
}

fn bound_rps(r: &MetricsReport) -> f64 {
    r.groups
        .iter()
        .filter(|(name, _)| name.starts_with("bg_") || name.starts_with("ts_bound"))
        .map(|(_, g)| g.throughput_rps)
        .sum()
}

fn bursty_p95(r: &MetricsReport) -> f64 {
    r.groups["ts_hi"].p95_ms.unwrap_or(f64::INFINITY)
}

/// Per-CPU bursty busy-time max/min ratio; infinite when some CPU saw
/// no bursty work at all.
fn bursty_skew(r: &MetricsReport) -> f64 {
    let busy: Vec<u64> = r
        .cpus
        .iter()
        .map(|c| c.busy_ns.get("ts_hi").copied().unwrap_or(0))
        .collect();
    let max = *busy.iter().max().unwrap() as f64;
    let min = *busy.iter().min().unwrap() as f64;
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

struct LockFigures {
    waiter_total_s: f64,
    waiter_acquired: bool,
    waiter_failed_attempts: u64,
    panicked: bool,
}

fn lock_figures(name: &'static str, policy: PolicyKind) -> LockFigures {
    let out = cached_run(name, policy, true);
    let waiter_start_ns = 10_000_000u64 * 1_000 / 1_000; // tasks[1].start_us = 10_000
    let waiter = out
        .report
        .locks
        .iter()
        .find(|l| l.name == "waiter")
        .expect("waiter summary");
    LockFigures {
        waiter_total_s: waiter
            .completed_at_ns
            .map(|t| (t.saturating_sub(waiter_start_ns)) as f64 / 1e9)
            .unwrap_or(f64::INFINITY),
        waiter_acquired: waiter.acquired_at_ns.is_some(),
        waiter_failed_attempts: waiter.failed_attempts,
        panicked: out.report.panicked,
    }
}

pub fn criterion_1_solo_parity() -> CriterionResult {
    let rps: Vec<f64> = [
        PolicyKind::Ufs,
        PolicyKind::Eevdf,
        PolicyKind::Rr,
        PolicyKind::Fifo,
    ]
    .iter()
    .map(|&p| bursty_rps(&cached_run("solo_bursty", p, true).report))
    .collect();
    let max = rps.iter().cloned().fold(f64::MIN, f64::max);
    let min = rps.iter().cloned().fold(f64::MAX, f64::min);
    CriterionResult {
        id: 1,
        name: "solo_parity",
        passed: max <= 1.05 * min,
        detail: format!("bursty rps ufs/eevdf/rr/fifo = {rps:.1?}, spread {:.2}%", (max / min - 1.0) * 100.0),
    }
}

pub fn criterion_2_minmax_protection() -> CriterionResult {
    let ufs = bursty_rps(&cached_run("min_max", PolicyKind::Ufs, true).report);
    let eevdf = bursty_rps(&cached_run("min_max", PolicyKind::Eevdf, true).report);
    let solo = bursty_rps(&cached_run("solo_bursty", PolicyKind::Ufs, true).report);
    let vs_eevdf = ufs / eevdf;
    let vs_solo = ufs / solo;
    CriterionResult {
        id: 2,
        name: "minmax_protection",
        passed: vs_eevdf >= 1.8 && vs_solo >= 0.9,
        detail: format!("ufs/eevdf = {vs_eevdf:.3} (>= 1.8), ufs/solo = {vs_solo:.3} (>= 0.9)"),
    }
}

pub fn criterion_3_placement_skew() -> CriterionResult {
    let eevdf = bursty_skew(&cached_run("min_max", PolicyKind::Eevdf, true).report);
    let ufs = bursty_skew(&cached_run("min_max", PolicyKind::Ufs, true).report);
    CriterionResult {
        id: 3,
        name: "placement_skew",
        passed: eevdf >= 2.0 && ufs <= 1.1,
        detail: format!("per-cpu bursty max/min: eevdf = {eevdf:.2} (>= 2), ufs = {ufs:.3} (<= 1.1)"),
    }
}

pub fn criterion_4_fifty_fifty_balance() -> CriterionResult {
    let ufs_b = bursty_rps(&cached_run("fifty_fifty", PolicyKind::Ufs, true).report);
    let ufs_d = bound_rps(&cached_run("fifty_fifty", PolicyKind::Ufs, true).report);
    let solo_b = bursty_rps(&cached_run("solo_bursty", PolicyKind::Ufs, true).report);
    let solo_d = bound_rps(&cached_run("solo_bound", PolicyKind::Ufs, true).report);
    let fifo_b = bursty_rps(&cached_run("fifty_fifty", PolicyKind::Fifo, true).report)
        / bursty_rps(&cached_run("solo_bursty", PolicyKind::Fifo, true).report);
    let rr_b = bursty_rps(&cached_run("fifty_fifty", PolicyKind::Rr, true).report)
        / bursty_rps(&cached_run("solo_bursty", PolicyKind::Rr, true).report);
    let b = ufs_b / solo_b;
    let d = ufs_d / solo_d;
    CriterionResult {
        id: 4,
        name: "fifty_fifty_balance",
        passed: b >= 0.70 && d >= 0.45 && fifo_b <= 0.10 && rr_b <= 0.20,
        detail: format!(
            "ufs bursty {:.1}% (>= 70), ufs bound {:.1}% (>= 45), fifo bursty {:.1}% (<= 10), rr bursty {:.1}% (<= 20)",
            b * 100.0,
            d * 100.0,
            fifo_b * 100.0,
            rr_b * 100.0
        ),
    }
}

pub fn criterion_5_latency_ordering() -> CriterionResult {
    let ufs_mm = bursty_p95(&cached_run("min_max", PolicyKind::Ufs, true).report);
    let eevdf_mm = bursty_p95(&cached_run("min_max", PolicyKind::Eevdf, true).report);
    let rr_mm = bursty_p95(&cached_run("min_max", PolicyKind::Rr, true).report);
    let ufs_ff = bursty_p95(&cached_run("fifty_fifty", PolicyKind::Ufs, true).report);
    let rr_ff = bursty_p95(&cached_run("fifty_fifty", PolicyKind::Rr, true).report);
    let r_eevdf = eevdf_mm / ufs_mm;
    let r_rr = rr_mm / ufs_mm;
    let r_ff = rr_ff / ufs_ff;
    CriterionResult {
        id: 5,
        name: "latency_ordering",
        passed: r_eevdf >= 1.8 && r_rr >= 1.3 && r_ff >= 10.0,
        detail: format!(
            "min_max p95: eevdf/ufs = {r_eevdf:.2} (>= 1.8), rr/ufs = {r_rr:.2} (>= 1.3); 50:50 p95: rr/ufs = {r_ff:.1} (>= 10)"
        ),
    }
}

pub fn criterion_6_oversubscription() -> CriterionResult {
    let ufs = bursty_rps(&cached_run("oversub_24", PolicyKind::Ufs, true).report);
    let rr = bursty_rps(&cached_run("oversub_24", PolicyKind::Rr, true).report);
    let ratio = ufs / rr;
    CriterionResult {
        id: 6,
        name: "oversubscription",
        passed: ratio >= 1.0,
        detail: format!("24-client bursty throughput ufs/rr = {ratio:.3} (>= 1.0, target 1.05)"),
    }
}

pub fn criterion_7_mixed_weights() -> CriterionResult {
    let ufs = &cached_run("mixed_weights", PolicyKind::Ufs, true).report;
    let eevdf = &cached_run("mixed_weights", PolicyKind::Eevdf, true).report;
    let g = |r: &MetricsReport, n: &str| r.groups[n].throughput_rps;
    let ufs_ts = g(ufs, "ts_w6667") / g(ufs, "ts_w10000");
    let ufs_bg = g(ufs, "bg_w2") / g(ufs, "bg_w3");
    let eevdf_ts = g(eevdf, "ts_w6667") / g(eevdf, "ts_w10000");
    let in_range = |v: f64| (0.57..=0.77).contains(&v);
    CriterionResult {
        id: 7,
        name: "mixed_weights",
        passed: in_range(ufs_ts) && in_range(ufs_bg) && (0.85..=1.15).contains(&eevdf_ts),
        detail: format!(
            "ufs ts {ufs_ts:.3} and bg {ufs_bg:.3} in [0.57, 0.77]; eevdf ts {eevdf_ts:.3} in [0.85, 1.15]"
        ),
    }
}

pub fn criterion_8_priority_inversion() -> CriterionResult {
    let t0 = lock_figures("lock_inversion_baseline", PolicyKind::Ufs).waiter_total_s;
    let ufs = lock_figures("lock_inversion", PolicyKind::Ufs);
    let eevdf = lock_figures("lock_inversion", PolicyKind::Eevdf);
    let fifo = lock_figures("lock_inversion", PolicyKind::Fifo);
    let rr = lock_figures("lock_inversion", PolicyKind::Rr);
    let ufs_ratio = ufs.waiter_total_s / t0;
    let rr_ratio = rr.waiter_total_s / t0;
    let ufs_ok = (1.7..=2.5).contains(&ufs_ratio);
    let eevdf_ok = eevdf.panicked && eevdf.waiter_failed_attempts == 1000;
    // Never acquires: neither within 10x the baseline nor at all.
    let fifo_ok = !fifo.waiter_acquired;
    let rr_ok = (15.0..=25.0).contains(&rr_ratio);
    CriterionResult {
        id: 8,
        name: "priority_inversion",
        passed: ufs_ok && eevdf_ok && fifo_ok && rr_ok,
        detail: format!(
            "T0 = {t0:.2}s; ufs {ufs_ratio:.2}x in [1.7, 2.5]; eevdf panic after {} fails (= 1000); \
             fifo acquired = {}; rr {rr_ratio:.1}x in [15, 25]",
            eevdf.waiter_failed_attempts, fifo.waiter_acquired
        ),
    }
}

pub fn criterion_9_hinting_overhead() -> CriterionResult {
    let on = cached_run("min_max", PolicyKind::Ufs, true);
    let off = cached_run("min_max", PolicyKind::Ufs, false);
    let b_on = bursty_rps(&on.report);
    let b_off = bursty_rps(&off.report);
    let delta = (b_on - b_off).abs() / b_off.max(1e-9);
    let boosts = on.report.totals.boosts + off.report.totals.boosts;
    CriterionResult {
        id: 9,
        name: "hinting_overhead",
        passed: delta <= 0.01 && boosts == 0,
        detail: format!(
            "bursty delta {:.3}% (<= 1%), boost events {} (= 0)",
            delta * 100.0,
            boosts
        ),
    }
}

/// Property bundle: the always-on invariants over real preset traces.
pub fn criterion_10_property_suites() -> CriterionResult {
    let mut failures: Vec<String> = Vec::new();

    for preset_name in ["min_max", "fifty_fifty", "oversub_24", "lock_inversion"] {
        let out = cached_run(preset_name, PolicyKind::Ufs, true);
        let cfg = preset(preset_name, PolicyKind::Ufs).unwrap();
        let sc = cfg.validate().unwrap();
        if let Err(e) = crate::checks::check_all_ufs(&out.trace, &sc) {
            failures.push(format!("ufs {preset_name}: {e}"));
        }
    }
    // Time accounting must close exactly for the baselines too.
    for policy in [PolicyKind::Eevdf, PolicyKind::Rr, PolicyKind::Fifo] {
        let out = cached_run("min_max", policy, true);
        let sc = preset("min_max", policy).unwrap().validate().unwrap();
        if let Err(e) = crate::checks::check_time_accounting(&out.trace, &sc) {
            failures.push(format!("{policy} min_max accounting: {e}"));
        }
    }

    // Proportional sharing on 2-cgroup micro-scenarios, both tiers.
    for (tier, w_lo, w_hi) in [("bg", 2u32, 3u32), ("ts", 6_667, 10_000)] {
        let ratio = proportional_micro_ratio(tier, w_lo, w_hi);
        let ideal = w_lo as f64 / w_hi as f64;
        if (ratio / ideal - 1.0).abs() > 0.05 {
            failures.push(format!(
                "{tier} proportional sharing {w_lo}:{w_hi} gave {ratio:.4}, ideal {ideal:.4}"
            ));
        }
    }

    // Determinism: equal seed and config give byte-identical traces.
    {
        let cfg = preset("min_max", PolicyKind::Ufs).unwrap();
        let a = run(&cfg.clone().validate().unwrap()).trace.to_csv();
        let b = run(&cfg.validate().unwrap()).trace.to_csv();
        if a != b {
            failures.push("equal-seed traces differ".into());
        }
    }

    // Percentile monotonicity on every cached report.
    for (_, out) in cache().lock().unwrap().iter() {
        for (name, g) in &out.report.groups {
            let p50 = g.p50_ms.unwrap_or(0.0);
            let p95 = g.p95_ms.unwrap_or(p50);
            let p999 = g.p999_ms.unwrap_or(p95);
            if !(p50 <= p95 && p95 <= p999) {
                failures.push(format!("percentiles not monotone for {name}"));
            }
        }
    }

    CriterionResult {
        id: 10,
        name: "property_suites",
        passed: failures.is_empty(),
        detail: if failures.is_empty() {
            "work conservation, tier precedence, accounting closure, proportional sharing, \
             determinism, percentile monotonicity"
                .into()
        } else {
            failures.join("; ")
        },
    }
}

/// One CPU, two single-task always-runnable cgroups; returns the busy
/// ratio of the lighter over the heavier cgroup.
fn proportional_micro_ratio(tier: &str, w_lo: u32, w_hi: u32) -> f64 {
    use crate::scenario::{CgroupSpec, TaskSpec};
    use crate::workload::WorkloadSpec;
    let mut cfg = preset("solo_bound", PolicyKind::Ufs).unwrap();
    cfg.name = format!("micro_{tier}_{w_lo}_{w_hi}");
    cfg.cpus = 1;
    cfg.engine.duration_us = 12_000_000;
    cfg.engine.warmup_us = 2_000_000;
    let lo = format!("{tier}_lo");
    let hi = format!("{tier}_hi");
    cfg.cgroups = vec![
        CgroupSpec {
            name: lo.clone(),
            parent: None,
            weight: w_lo,
        },
        CgroupSpec {
            name: hi.clone(),
            parent: None,
            weight: w_hi,
        },
    ];
    cfg.tasks = vec![
        TaskSpec {
            id: 0,
            name: None,
            cgroup: lo.clone(),
            workload: WorkloadSpec::Bound {
                iteration_work_us: 50_000,
            },
            affinity: None,
            start_us: 0,
        },
        TaskSpec {
            id: 1,
            name: None,
            cgroup: hi.clone(),
            workload: WorkloadSpec::Bound {
                iteration_work_us: 50_000,
            },
            affinity: None,
            start_us: 0,
        },
    ];
    let out = run(&cfg.validate().unwrap());
    let busy = &out.report.cpus[0].busy_ns;
    busy[&lo] as f64 / busy[&hi] as f64
}

pub fn evaluate_all() -> Vec<CriterionResult> {
    vec![
        criterion_1_solo_parity(),
        criterion_2_minmax_protection(),
        criterion_3_placement_skew(),
        criterion_4_fifty_fifty_balance(),
        criterion_5_latency_ordering(),
        criterion_6_oversubscription(),
        criterion_7_mixed_weights(),
        criterion_8_priority_inversion(),
        criterion_9_hinting_overhead(),
        criterion_10_property_suites(),
    ]
}
