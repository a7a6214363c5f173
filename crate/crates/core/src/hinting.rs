//! Application-based scheduler hinting: workload tasks publish lock
//! attempt/acquire/release events into a hint map; the scheduler consumes
//! them to boost background lock holders that block time-sensitive work.

use std::collections::{BTreeMap, BTreeSet};

use crate::model::{HintEvent, HintKind, LockId, TaskId};

#[derive(Debug, Clone, Default)]
pub struct HintMapEntry {
    pub holder: Option<TaskId>,
    pub ts_waiters: BTreeSet<TaskId>,
}

/// Action the scheduler should take after a hint lands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HintAction {
    None,
    /// Boost the current holder on behalf of the waiting task.
    Boost { holder: TaskId, waiter: TaskId },
    Unboost { holder: TaskId },
}

#[derive(Debug, Default)]
pub struct HintMap {
    pub entries: BTreeMap<LockId, HintMapEntry>,
    pub enabled: bool,
}

impl HintMap {
    pub fn new(enabled: bool) -> HintMap {
        HintMap {
            entries: BTreeMap::new(),
            enabled,
        }
    }

    /// Records a lock event and decides whether a boost is due.
    ///
    /// `waiter_is_ts` describes the publishing worker's scheduling tier;
    /// `holder_boostable` is true when the current holder is a
    /// non-boosted background task. When hinting is disabled the map is
    /// still maintained but no action is ever returned.
    pub fn publish(
        &mut self,
        ev: HintEvent,
        waiter_is_ts: bool,
        holder_boostable: impl Fn(TaskId) -> bool,
        holder_boosted_on: impl Fn(TaskId, LockId) -> bool,
    ) -> HintAction {
        let entry = self.entries.entry(ev.lock).or_default();
        match ev.kind {
            HintKind::Attempt => {
                if waiter_is_ts {
                    entry.ts_waiters.insert(ev.worker);
                }
                if !self.enabled || !waiter_is_ts {
                    return HintAction::None;
                }
                match entry.holder {
                    Some(holder) if holder != ev.worker && holder_boostable(holder) => {
                        HintAction::Boost {
                            holder,
                            waiter: ev.worker,
                        }
                    }
                    _ => HintAction::None,
                }
            }
            HintKind::Acquired => {
                entry.holder = Some(ev.worker);
                entry.ts_waiters.remove(&ev.worker);
                HintAction::None
            }
            HintKind::Released => {
                assert_eq!(
                    entry.holder,
                    Some(ev.worker),
                    "release without matching acquire on {:?}",
                    ev.lock
                );
                entry.holder = None;
                if self.enabled && holder_boosted_on(ev.worker, ev.lock) {
                    HintAction::Unboost { holder: ev.worker }
                } else {
                    HintAction::None
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(worker: u32, lock: u32, kind: HintKind) -> HintEvent {
        HintEvent {
            worker: TaskId(worker),
            lock: LockId(lock),
            kind,
        }
    }

    #[test]
    fn ts_attempt_on_bg_held_lock_boosts() {
        let mut map = HintMap::new(true);
        map.publish(ev(1, 0, HintKind::Acquired), false, |_| true, |_, _| false);
        let action = map.publish(ev(2, 0, HintKind::Attempt), true, |_| true, |_, _| false);
        assert_eq!(
            action,
            HintAction::Boost {
                holder: TaskId(1),
                waiter: TaskId(2)
            }
        );
    }

    #[test]
    fn attempt_on_free_lock_does_not_boost() {
        let mut map = HintMap::new(true);
        let action = map.publish(ev(2, 0, HintKind::Attempt), true, |_| true, |_, _| false);
        assert_eq!(action, HintAction::None);
    }

    #[test]
    fn bg_attempt_never_boosts() {
        let mut map = HintMap::new(true);
        map.publish(ev(1, 0, HintKind::Acquired), false, |_| true, |_, _| false);
        let action = map.publish(ev(2, 0, HintKind::Attempt), false, |_| true, |_, _| false);
        assert_eq!(action, HintAction::None);
    }

    #[test]
    fn disabled_map_records_but_never_acts() {
        let mut map = HintMap::new(false);
        map.publish(ev(1, 0, HintKind::Acquired), false, |_| true, |_, _| false);
        let action = map.publish(ev(2, 0, HintKind::Attempt), true, |_| true, |_, _| false);
        assert_eq!(action, HintAction::None);
        assert_eq!(map.entries[&LockId(0)].holder, Some(TaskId(1)));
    }

    #[test]
    fn boost_is_idempotent_for_multiple_waiters() {
        let mut map = HintMap::new(true);
        map.publish(ev(1, 0, HintKind::Acquired), false, |_| true, |_, _| false);
        let first = map.publish(ev(2, 0, HintKind::Attempt), true, |_| true, |_, _| false);
        assert!(matches!(first, HintAction::Boost { .. }));
        // Second waiter arrives after the holder is already boosted.
        let second = map.publish(ev(3, 0, HintKind::Attempt), true, |_| false, |_, _| false);
        assert_eq!(second, HintAction::None);
    }

    #[test]
    fn release_by_boosted_holder_unboosts() {
        let mut map = HintMap::new(true);
        map.publish(ev(1, 0, HintKind::Acquired), false, |_| true, |_, _| false);
        map.publish(ev(2, 0, HintKind::Attempt), true, |_| true, |_, _| false);
        let action = map.publish(
            ev(1, 0, HintKind::Released),
            false,
            |_| true,
            |t, l| t == TaskId(1) && l == LockId(0),
        );
        assert_eq!(
            action,
            HintAction::Unboost {
                holder: TaskId(1)
            }
        );
    }

    #[test]
    #[should_panic(expected = "release without matching acquire")]
    fn release_without_acquire_is_a_bug() {
        let mut map = HintMap::new(true);
        map.publish(ev(1, 0, HintKind::Released), false, |_| true, |_, _| false);
    }
}
