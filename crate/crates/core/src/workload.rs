//! Workload behavior programs: resumable step functions the engine drives.
//!
//! Three families: closed-loop bursty clients (service burst, then think),
//! CPU-bound loop workers, and the holder/waiter pair of the spinlock
//! micro-scenario.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::model::{LockId, SimTime};

/// Directive returned by a behavior when the engine asks what to do next.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    /// Consume this much CPU (possibly across preemptions).
    Run(u64),
    /// Leave the CPU for this long (I/O, client think time, lock backoff).
    Block(u64),
    /// Try to take a lock; the outcome arrives in the next `next()` call.
    AttemptLock(LockId),
    ReleaseLock(LockId),
    /// A request completed with the given latency; continue immediately.
    RequestDone { latency: u64 },
    Finish,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct SpinParams {
    /// Busy-wait retries per failed acquisition episode.
    #[serde(default = "default_spin_attempts")]
    pub spin_attempts_before_sleep: u32,
    /// CPU cost of a single busy-wait retry, nanoseconds.
    #[serde(default = "default_spin_cost_ns")]
    pub spin_attempt_cost_ns: u64,
    /// First sleep interval, microseconds; doubles per consecutive failure.
    #[serde(default = "default_sleep_initial_us")]
    pub sleep_initial_us: u64,
    /// Backoff cap, microseconds.
    #[serde(default = "default_sleep_cap_us")]
    pub sleep_cap_us: u64,
    /// Consecutive failed episodes before the run panics.
    #[serde(default = "default_panic_threshold")]
    pub panic_threshold: u32,
}

fn default_spin_attempts() -> u32 {
    100
}
fn default_spin_cost_ns() -> u64 {
    100
}
fn default_sleep_initial_us() -> u64 {
    1_000
}
fn default_sleep_cap_us() -> u64 {
    100_000
}
fn default_panic_threshold() -> u32 {
    1_000
}

impl Default for SpinParams {
    fn default() -> Self {
        SpinParams {
            spin_attempts_before_sleep: default_spin_attempts(),
            spin_attempt_cost_ns: default_spin_cost_ns(),
            sleep_initial_us: default_sleep_initial_us(),
            sleep_cap_us: default_sleep_cap_us(),
            panic_threshold: default_panic_threshold(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "kind")]
pub enum WorkloadSpec {
    /// Closed-loop client: one outstanding request, exponential service
    /// and think times.
    Bursty {
        #[serde(default = "default_service_us")]
        service_mean_us: u64,
        #[serde(default = "default_think_us")]
        think_mean_us: u64,
    },
    /// Fixed CPU work per iteration, looping forever.
    Bound {
        #[serde(default = "default_iteration_us")]
        iteration_work_us: u64,
    },
    /// Acquires `lock`, computes for `work_us`, releases, finishes.
    LockHolder {
        lock: u32,
        #[serde(default = "default_holder_work_us")]
        work_us: u64,
        #[serde(default)]
        spin: SpinParams,
    },
    /// Acquires `lock` (spin-then-sleep), holds it for `hold_us`,
    /// releases, finishes.
    LockWaiter {
        lock: u32,
        #[serde(default)]
        hold_us: u64,
        #[serde(default)]
        spin: SpinParams,
    },
}

fn default_service_us() -> u64 {
    2_000
}
fn default_think_us() -> u64 {
    1_000
}
fn default_iteration_us() -> u64 {
    250_000
}
fn default_holder_work_us() -> u64 {
    3_000_000
}

impl WorkloadSpec {
    pub fn bursty_default() -> WorkloadSpec {
        WorkloadSpec::Bursty {
            service_mean_us: default_service_us(),
            think_mean_us: default_think_us(),
        }
    }

    pub fn bound_default() -> WorkloadSpec {
        WorkloadSpec::Bound {
            iteration_work_us: default_iteration_us(),
        }
    }

    pub fn lock_holder_default(lock: u32) -> WorkloadSpec {
        WorkloadSpec::LockHolder {
            lock,
            work_us: default_holder_work_us(),
            spin: SpinParams::default(),
        }
    }

    pub fn lock_waiter_default(lock: u32) -> WorkloadSpec {
        WorkloadSpec::LockWaiter {
            lock,
            hold_us: 0,
            spin: SpinParams::default(),
        }
    }

    pub fn is_bursty(&self) -> bool {
        matches!(self, WorkloadSpec::Bursty { .. })
    }

    pub fn is_bound(&self) -> bool {
        matches!(self, WorkloadSpec::Bound { .. })
    }

    pub fn validate(&self) -> Result<(), String> {
        match self {
            WorkloadSpec::Bursty {
                service_mean_us,
                think_mean_us,
            } => {
                if *service_mean_us == 0 || *think_mean_us == 0 {
                    return Err("bursty means must be positive".into());
                }
            }
            WorkloadSpec::Bound { iteration_work_us } => {
                if *iteration_work_us == 0 {
                    return Err("iteration_work_us must be positive".into());
                }
            }
            WorkloadSpec::LockHolder { work_us, spin, .. } => {
                if *work_us == 0 {
                    return Err("holder work_us must be positive".into());
                }
                validate_spin(spin)?;
            }
            WorkloadSpec::LockWaiter { spin, .. } => validate_spin(spin)?,
        }
        Ok(())
    }

    pub fn spin_params(&self) -> Option<SpinParams> {
        match self {
            WorkloadSpec::LockHolder { spin, .. } | WorkloadSpec::LockWaiter { spin, .. } => {
                Some(*spin)
            }
            _ => None,
        }
    }

    pub fn lock(&self) -> Option<LockId> {
        match self {
            WorkloadSpec::LockHolder { lock, .. } | WorkloadSpec::LockWaiter { lock, .. } => {
                Some(LockId(*lock))
            }
            _ => None,
        }
    }
}

fn validate_spin(spin: &SpinParams) -> Result<(), String> {
    if spin.sleep_initial_us == 0 || spin.sleep_cap_us < spin.sleep_initial_us {
        return Err("spin sleep intervals must be positive and capped above the initial".into());
    }
    if spin.panic_threshold == 0 {
        return Err("panic_threshold must be positive".into());
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    /// Next call starts a fresh request.
    StartRequest,
    /// CPU burst finished; report the request.
    Report,
    /// Report done; go think (bursty only).
    Think,
    AttemptLock,
    /// Failed episode: spin on CPU, then sleep.
    SpinAfterFail,
    SleepAfterSpin,
    /// Lock held: do the protected work.
    HoldWork,
    ReleaseHeld,
    FinishReport,
    Done,
}

/// Resumable workload program. One `Behavior` instance drives one task.
#[derive(Debug, Clone)]
pub struct Behavior {
    spec: WorkloadSpec,
    phase: Phase,
    /// Request arrival for latency accounting.
    arrival: SimTime,
    spawn: Option<SimTime>,
    backoff_us: u64,
    /// Wake time of the most recent Blocked -> Runnable transition; the
    /// next request's arrival, so queueing delay counts toward latency.
    pending_arrival: Option<SimTime>,
}

impl Behavior {
    pub fn new(spec: WorkloadSpec) -> Behavior {
        let phase = match &spec {
            WorkloadSpec::Bursty { .. } | WorkloadSpec::Bound { .. } => Phase::StartRequest,
            WorkloadSpec::LockHolder { .. } | WorkloadSpec::LockWaiter { .. } => {
                Phase::AttemptLock
            }
        };
        let backoff_us = spec
            .spin_params()
            .map(|s| s.sleep_initial_us)
            .unwrap_or(0);
        Behavior {
            spec,
            phase,
            arrival: 0,
            spawn: None,
            backoff_us,
            pending_arrival: None,
        }
    }

    pub fn spec(&self) -> &WorkloadSpec {
        &self.spec
    }

    /// Reported by the engine on every Blocked -> Runnable transition.
    pub fn on_wake(&mut self, now: SimTime) {
        if self.spawn.is_none() {
            self.spawn = Some(now);
        }
        self.pending_arrival = Some(now);
    }

    /// Called by the engine whenever the task needs a new directive:
    /// at spawn, after finishing a CPU segment, after waking, or after a
    /// lock attempt resolved (`lock_ok` carries the outcome).
    pub fn next(&mut self, now: SimTime, rng: &mut ChaCha8Rng, lock_ok: Option<bool>) -> Step {
        if self.spawn.is_none() {
            self.spawn = Some(now);
        }
        match (&self.spec, self.phase) {
            (WorkloadSpec::Bursty { service_mean_us, .. }, Phase::StartRequest) => {
                self.arrival = self.pending_arrival.take().unwrap_or(now);
                self.phase = Phase::Report;
                Step::Run(draw_exp(rng, *service_mean_us * 1_000))
            }
            (WorkloadSpec::Bursty { .. }, Phase::Report) => {
                self.phase = Phase::Think;
                Step::RequestDone {
                    latency: now - self.arrival,
                }
            }
            (WorkloadSpec::Bursty { think_mean_us, .. }, Phase::Think) => {
                self.phase = Phase::StartRequest;
                Step::Block(draw_exp(rng, *think_mean_us * 1_000))
            }
            (WorkloadSpec::Bound { iteration_work_us }, Phase::StartRequest) => {
                self.arrival = self.pending_arrival.take().unwrap_or(now);
                self.phase = Phase::Report;
                Step::Run(*iteration_work_us * 1_000)
            }
            (WorkloadSpec::Bound { .. }, Phase::Report) => {
                self.phase = Phase::StartRequest;
                Step::RequestDone {
                    latency: now - self.arrival,
                }
            }
            (spec, Phase::AttemptLock) => {
                let lock = spec.lock().expect("lock workload");
                match lock_ok {
                    None => Step::AttemptLock(lock),
                    Some(true) => {
                        self.backoff_us = spec.spin_params().unwrap().sleep_initial_us;
                        self.phase = Phase::HoldWork;
                        self.next(now, rng, None)
                    }
                    Some(false) => {
                        self.phase = Phase::SpinAfterFail;
                        let spin = spec.spin_params().unwrap();
                        Step::Run(spin.spin_attempts_before_sleep as u64 * spin.spin_attempt_cost_ns)
                    }
                }
            }
            (spec, Phase::SpinAfterFail) => {
                self.phase = Phase::SleepAfterSpin;
                let sleep = self.backoff_us;
                let cap = spec.spin_params().unwrap().sleep_cap_us;
                self.backoff_us = (self.backoff_us * 2).min(cap);
                Step::Block(sleep * 1_000)
            }
            (_, Phase::SleepAfterSpin) => {
                self.phase = Phase::AttemptLock;
                self.next(now, rng, lock_ok)
            }
            (spec, Phase::HoldWork) => {
                let work_ns = match spec {
                    WorkloadSpec::LockHolder { work_us, .. } => *work_us * 1_000,
                    WorkloadSpec::LockWaiter { hold_us, .. } => *hold_us * 1_000,
                    _ => unreachable!(),
                };
                self.phase = Phase::ReleaseHeld;
                if work_ns == 0 {
                    self.next(now, rng, None)
                } else {
                    Step::Run(work_ns)
                }
            }
            (spec, Phase::ReleaseHeld) => {
                self.phase = Phase::FinishReport;
                Step::ReleaseLock(spec.lock().expect("lock workload"))
            }
            (_, Phase::FinishReport) => {
                self.phase = Phase::Done;
                Step::RequestDone {
                    latency: now - self.spawn.unwrap(),
                }
            }
            (_, Phase::Done) => Step::Finish,
            (spec, phase) => unreachable!("workload {spec:?} has no phase {phase:?}"),
        }
    }
}

fn draw_exp(rng: &mut ChaCha8Rng, mean_ns: u64) -> u64 {
    let exp = Exp::new(1.0 / mean_ns as f64).expect("positive mean");
    (exp.sample(rng) as u64).max(1)
}

/// Per-task RNG stream, independent of every other task's stream.
pub fn task_rng(seed: u64, task_id: u32) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ (task_id as u64).wrapping_mul(0x9E3779B97F4A7C15)))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bursty_cycles_run_report_think() {
        let mut b = Behavior::new(WorkloadSpec::bursty_default());
        let mut rng = task_rng(1, 0);
        let s1 = b.next(0, &mut rng, None);
        let service = match s1 {
            Step::Run(d) => d,
            other => panic!("expected Run, got {other:?}"),
        };
        assert!(service > 0);
        let s2 = b.next(service, &mut rng, None);
        assert_eq!(
            s2,
            Step::RequestDone {
                latency: service
            }
        );
        match b.next(service, &mut rng, None) {
            Step::Block(d) => assert!(d > 0),
            other => panic!("expected Block, got {other:?}"),
        }
        match b.next(service + 10, &mut rng, None) {
            Step::Run(_) => {}
            other => panic!("expected Run, got {other:?}"),
        }
    }

    #[test]
    fn bound_iterations_are_fixed_and_continuous() {
        let mut b = Behavior::new(WorkloadSpec::Bound {
            iteration_work_us: 250_000,
        });
        let mut rng = task_rng(1, 0);
        assert_eq!(b.next(0, &mut rng, None), Step::Run(250_000_000));
        assert_eq!(
            b.next(250_000_000, &mut rng, None),
            Step::RequestDone {
                latency: 250_000_000
            }
        );
        // No think time: straight into the next iteration.
        assert_eq!(b.next(250_000_000, &mut rng, None), Step::Run(250_000_000));
    }

    #[test]
    fn waiter_backoff_doubles_to_cap_and_resets_on_acquire() {
        let spin = SpinParams::default();
        let mut b = Behavior::new(WorkloadSpec::LockWaiter {
            lock: 0,
            hold_us: 0,
            spin,
        });
        let mut rng = task_rng(1, 0);
        assert_eq!(b.next(0, &mut rng, None), Step::AttemptLock(LockId(0)));
        // Failed episode: spin 100 attempts at 100ns, then sleep 1ms.
        assert_eq!(b.next(0, &mut rng, Some(false)), Step::Run(10_000));
        assert_eq!(b.next(10_000, &mut rng, None), Step::Block(1_000_000));
        assert_eq!(b.next(1_010_000, &mut rng, None), Step::AttemptLock(LockId(0)));
        // Second failure sleeps 2ms.
        assert_eq!(b.next(1_010_000, &mut rng, Some(false)), Step::Run(10_000));
        assert_eq!(b.next(1_020_000, &mut rng, None), Step::Block(2_000_000));
        // Drive failures until the cap holds at 100ms.
        for _ in 0..10 {
            b.next(0, &mut rng, None);
            b.next(0, &mut rng, Some(false));
        }
        assert_eq!(b.next(0, &mut rng, None), Step::Block(100_000_000));
        // Acquisition releases immediately (hold_us = 0) and finishes.
        b.next(0, &mut rng, None);
        assert_eq!(
            b.next(200_000_000, &mut rng, Some(true)),
            Step::ReleaseLock(LockId(0))
        );
        assert_eq!(
            b.next(200_000_000, &mut rng, None),
            Step::RequestDone {
                latency: 200_000_000
            }
        );
        assert_eq!(b.next(200_000_000, &mut rng, None), Step::Finish);
    }

    #[test]
    fn holder_acquires_works_releases_finishes() {
        let mut b = Behavior::new(WorkloadSpec::lock_holder_default(3));
        let mut rng = task_rng(1, 0);
        assert_eq!(b.next(0, &mut rng, None), Step::AttemptLock(LockId(3)));
        assert_eq!(b.next(0, &mut rng, Some(true)), Step::Run(3_000_000_000));
        assert_eq!(
            b.next(3_000_000_000, &mut rng, None),
            Step::ReleaseLock(LockId(3))
        );
        assert_eq!(
            b.next(3_000_000_000, &mut rng, None),
            Step::RequestDone {
                latency: 3_000_000_000
            }
        );
        assert_eq!(b.next(3_000_000_000, &mut rng, None), Step::Finish);
    }

    #[test]
    fn per_task_streams_do_not_interfere() {
        let mut a1 = task_rng(42, 1);
        let mut a2 = task_rng(42, 2);
        let mut b1 = task_rng(42, 1);
        use rand::RngCore;
        let draws1: Vec<u64> = (0..8).map(|_| a1.next_u64()).collect();
        let _ = a2.next_u64();
        let again: Vec<u64> = (0..8).map(|_| b1.next_u64()).collect();
        assert_eq!(draws1, again);
    }

    #[test]
    fn exp_draws_have_requested_mean() {
        let mut rng = task_rng(7, 0);
        let mean = 2_000_000u64;
        let n = 20_000;
        let total: u64 = (0..n).map(|_| draw_exp(&mut rng, mean)).sum();
        let avg = total as f64 / n as f64;
        assert!((avg - mean as f64).abs() / (mean as f64) < 0.03, "avg={avg}");
    }
}
