//! Scheduler event trace: the audit log every metric derives from.
//!
//! CSV layout is one event per line, `time_ns,cpu,kind,arg1,arg2,arg3`,
//! with stable column meanings per kind. Absent values are `-`.

use std::fmt::Write as _;

use thiserror::Error;

use crate::model::{CgroupId, CpuId, LockId, SimTime, TaskId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KickReason {
    Idle,
    Preempt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnqueueTarget {
    Local(CpuId),
    Group(CgroupId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    /// `next` starts running at the event time; the switch work occupied
    /// `[time - overhead, time]` and `prev` (if any) ran until the start
    /// of that window. `next == None` marks the CPU going idle.
    SchedSwitch {
        cpu: CpuId,
        prev: Option<TaskId>,
        next: Option<TaskId>,
        overhead: u64,
    },
    Wakeup {
        task: TaskId,
    },
    Kick {
        cpu: CpuId,
        reason: KickReason,
    },
    Enqueue {
        task: TaskId,
        target: EnqueueTarget,
    },
    LockAttempt {
        task: TaskId,
        lock: LockId,
        ok: bool,
    },
    LockRelease {
        task: TaskId,
        lock: LockId,
    },
    Boost {
        task: TaskId,
        lock: LockId,
    },
    Unboost {
        task: TaskId,
    },
    Panic {
        task: TaskId,
    },
    RequestDone {
        task: TaskId,
        latency: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimEvent {
    pub time: SimTime,
    pub kind: EventKind,
}

#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub events: Vec<SimEvent>,
}

impl Trace {
    pub fn push(&mut self, time: SimTime, kind: EventKind) {
        debug_assert!(
            self.events.last().map_or(true, |e| e.time <= time),
            "events must be emitted in non-decreasing time order"
        );
        self.events.push(SimEvent { time, kind });
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.events.len() * 32 + 40);
        out.push_str("time_ns,cpu,kind,arg1,arg2,arg3\n");
        for ev in &self.events {
            write_event_line(&mut out, ev);
        }
        out
    }

    pub fn from_csv(input: &str) -> Result<Trace, TraceParseError> {
        let mut events = Vec::new();
        for (lineno, line) in input.lines().enumerate() {
            if lineno == 0 {
                if line != "time_ns,cpu,kind,arg1,arg2,arg3" {
                    return Err(TraceParseError::Header);
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            events.push(parse_event_line(line).map_err(|msg| TraceParseError::Line {
                line: lineno + 1,
                msg,
            })?);
        }
        Ok(Trace { events })
    }
}

#[derive(Debug, Error)]
pub enum TraceParseError {
    #[error("missing or unexpected trace header")]
    Header,
    #[error("trace line {line}: {msg}")]
    Line { line: usize, msg: String },
}

fn opt_task(t: Option<TaskId>) -> String {
    t.map_or_else(|| "-".to_string(), |t| t.0.to_string())
}

fn write_event_line(out: &mut String, ev: &SimEvent) {
    let (cpu, kind, a1, a2, a3): (String, &str, String, String, String) = match ev.kind {
        EventKind::SchedSwitch {
            cpu,
            prev,
            next,
            overhead,
        } => (
            cpu.0.to_string(),
            "switch",
            opt_task(prev),
            opt_task(next),
            overhead.to_string(),
        ),
        EventKind::Wakeup { task } => (
            "-".into(),
            "wakeup",
            task.0.to_string(),
            "-".into(),
            "-".into(),
        ),
        EventKind::Kick { cpu, reason } => (
            cpu.0.to_string(),
            "kick",
            match reason {
                KickReason::Idle => "idle".into(),
                KickReason::Preempt => "preempt".into(),
            },
            "-".into(),
            "-".into(),
        ),
        EventKind::Enqueue { task, target } => {
            let (tkind, tid) = match target {
                EnqueueTarget::Local(cpu) => ("local", cpu.0),
                EnqueueTarget::Group(cg) => ("group", cg.0),
            };
            (
                "-".into(),
                "enqueue",
                task.0.to_string(),
                tkind.into(),
                tid.to_string(),
            )
        }
        EventKind::LockAttempt { task, lock, ok } => (
            "-".into(),
            "lock_attempt",
            task.0.to_string(),
            lock.0.to_string(),
            if ok { "1".into() } else { "0".into() },
        ),
        EventKind::LockRelease { task, lock } => (
            "-".into(),
            "lock_release",
            task.0.to_string(),
            lock.0.to_string(),
            "-".into(),
        ),
        EventKind::Boost { task, lock } => (
            "-".into(),
            "boost",
            task.0.to_string(),
            lock.0.to_string(),
            "-".into(),
        ),
        EventKind::Unboost { task } => (
            "-".into(),
            "unboost",
            task.0.to_string(),
            "-".into(),
            "-".into(),
        ),
        EventKind::Panic { task } => (
            "-".into(),
            "panic",
            task.0.to_string(),
            "-".into(),
            "-".into(),
        ),
        EventKind::RequestDone { task, latency } => (
            "-".into(),
            "request_done",
            task.0.to_string(),
            latency.to_string(),
            "-".into(),
        ),
    };
    let _ = writeln!(out, "{},{},{},{},{},{}", ev.time, cpu, kind, a1, a2, a3);
}

fn parse_event_line(line: &str) -> Result<SimEvent, String> {
    let cols: Vec<&str> = line.split(',').collect();
    if cols.len() != 6 {
        return Err(format!("expected 6 columns, got {}", cols.len()));
    }
    let time: SimTime = cols[0].parse().map_err(|_| "bad time_ns".to_string())?;
    let p_u64 = |s: &str, what: &str| -> Result<u64, String> {
        s.parse().map_err(|_| format!("bad {what}: {s:?}"))
    };
    let p_u32 = |s: &str, what: &str| -> Result<u32, String> {
        s.parse().map_err(|_| format!("bad {what}: {s:?}"))
    };
    let p_task = |s: &str| -> Result<Option<TaskId>, String> {
        if s == "-" {
            Ok(None)
        } else {
            Ok(Some(TaskId(p_u32(s, "task id")?)))
        }
    };
    let kind = match cols[2] {
        "switch" => EventKind::SchedSwitch {
            cpu: CpuId(p_u32(cols[1], "cpu")?),
            prev: p_task(cols[3])?,
            next: p_task(cols[4])?,
            overhead: p_u64(cols[5], "overhead")?,
        },
        "wakeup" => EventKind::Wakeup {
            task: TaskId(p_u32(cols[3], "task id")?),
        },
        "kick" => EventKind::Kick {
            cpu: CpuId(p_u32(cols[1], "cpu")?),
            reason: match cols[3] {
                "idle" => KickReason::Idle,
                "preempt" => KickReason::Preempt,
                other => return Err(format!("bad kick reason: {other:?}")),
            },
        },
        "enqueue" => EventKind::Enqueue {
            task: TaskId(p_u32(cols[3], "task id")?),
            target: match cols[4] {
                "local" => EnqueueTarget::Local(CpuId(p_u32(cols[5], "cpu")?)),
                "group" => EnqueueTarget::Group(CgroupId(p_u32(cols[5], "cgroup")?)),
                other => return Err(format!("bad enqueue target: {other:?}")),
            },
        },
        "lock_attempt" => EventKind::LockAttempt {
            task: TaskId(p_u32(cols[3], "task id")?),
            lock: LockId(p_u32(cols[4], "lock id")?),
            ok: match cols[5] {
                "1" => true,
                "0" => false,
                other => return Err(format!("bad lock result: {other:?}")),
            },
        },
        "lock_release" => EventKind::LockRelease {
            task: TaskId(p_u32(cols[3], "task id")?),
            lock: LockId(p_u32(cols[4], "lock id")?),
        },
        "boost" => EventKind::Boost {
            task: TaskId(p_u32(cols[3], "task id")?),
            lock: LockId(p_u32(cols[4], "lock id")?),
        },
        "unboost" => EventKind::Unboost {
            task: TaskId(p_u32(cols[3], "task id")?),
        },
        "panic" => EventKind::Panic {
            task: TaskId(p_u32(cols[3], "task id")?),
        },
        "request_done" => EventKind::RequestDone {
            task: TaskId(p_u32(cols[3], "task id")?),
            latency: p_u64(cols[4], "latency")?,
        },
        other => return Err(format!("unknown event kind: {other:?}")),
    };
    Ok(SimEvent { time, kind })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_trace() -> Trace {
        let mut t = Trace::default();
        t.push(
            0,
            EventKind::Wakeup {
                task: TaskId(3),
            },
        );
        t.push(
            0,
            EventKind::Enqueue {
                task: TaskId(3),
                target: EnqueueTarget::Local(CpuId(1)),
            },
        );
        t.push(
            0,
            EventKind::Kick {
                cpu: CpuId(1),
                reason: KickReason::Idle,
            },
        );
        t.push(
            5_000,
            EventKind::SchedSwitch {
                cpu: CpuId(1),
                prev: None,
                next: Some(TaskId(3)),
                overhead: 5_000,
            },
        );
        t.push(
            2_000_000,
            EventKind::RequestDone {
                task: TaskId(3),
                latency: 2_000_000,
            },
        );
        t.push(
            2_000_000,
            EventKind::SchedSwitch {
                cpu: CpuId(1),
                prev: Some(TaskId(3)),
                next: None,
                overhead: 0,
            },
        );
        t
    }

    #[test]
    fn csv_round_trip() {
        let t = sample_trace();
        let csv = t.to_csv();
        let parsed = Trace::from_csv(&csv).unwrap();
        assert_eq!(parsed.events, t.events);
        assert_eq!(parsed.to_csv(), csv);
    }

    #[test]
    fn csv_rejects_garbage() {
        assert!(Trace::from_csv("nope\n").is_err());
        let bad = "time_ns,cpu,kind,arg1,arg2,arg3\n1,0,warp,-,-,-\n";
        assert!(Trace::from_csv(bad).is_err());
    }
}
