//! Runnable tree: ordered set of background cgroups keyed by group
//! virtual runtime. Dispatch peeks its minimum; empty cgroups are parked
//! in a per-cgroup stash so their nodes can be reused on re-enqueue.

use std::collections::{BTreeMap, BTreeSet};

use crate::model::CgroupId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Tree { key: u64 },
    Stashed,
}

#[derive(Debug, Default)]
pub struct RunnableTree {
    tree: BTreeSet<(u64, CgroupId)>,
    slots: BTreeMap<CgroupId, Slot>,
}

impl RunnableTree {
    /// Registers a cgroup with a parked node.
    pub fn register(&mut self, cg: CgroupId) {
        self.slots.insert(cg, Slot::Stashed);
    }

    pub fn contains(&self, cg: CgroupId) -> bool {
        matches!(self.slots.get(&cg), Some(Slot::Tree { .. }))
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    /// Moves the cgroup's node from the stash into the tree under `key`.
    /// No-op when the node is already tree-resident.
    pub fn ensure_queued(&mut self, cg: CgroupId, key: u64) {
        match self.slots.get(&cg) {
            Some(Slot::Tree { .. }) => {}
            Some(Slot::Stashed) => {
                self.tree.insert((key, cg));
                self.slots.insert(cg, Slot::Tree { key });
            }
            None => panic!("cgroup {cg:?} not registered in runnable tree"),
        }
    }

    /// Parks the cgroup's node in the stash.
    pub fn stash(&mut self, cg: CgroupId) {
        match self.slots.get(&cg) {
            Some(Slot::Tree { key }) => {
                let removed = self.tree.remove(&(*key, cg));
                debug_assert!(removed);
                self.slots.insert(cg, Slot::Stashed);
            }
            Some(Slot::Stashed) => panic!("cgroup {cg:?} already stashed"),
            None => panic!("cgroup {cg:?} not registered in runnable tree"),
        }
    }

    /// Re-keys a tree-resident node after its group vruntime advanced.
    pub fn rekey(&mut self, cg: CgroupId, new_key: u64) {
        match self.slots.get(&cg) {
            Some(Slot::Tree { key }) => {
                let removed = self.tree.remove(&(*key, cg));
                debug_assert!(removed);
                self.tree.insert((new_key, cg));
                self.slots.insert(cg, Slot::Tree { key: new_key });
            }
            other => panic!("rekey of non-resident cgroup {cg:?}: {other:?}"),
        }
    }

    pub fn peek_min(&self) -> Option<(u64, CgroupId)> {
        self.tree.iter().next().copied()
    }

    /// Ascending key order.
    pub fn iter(&self) -> impl Iterator<Item = (u64, CgroupId)> + '_ {
        self.tree.iter().copied()
    }

    /// Every registered cgroup is in exactly one of tree or stash, and
    /// tree keys match their slots.
    #[cfg(test)]
    pub fn check_invariants(&self) {
        let mut seen = 0;
        for (key, cg) in &self.tree {
            match self.slots.get(cg) {
                Some(Slot::Tree { key: k }) => assert_eq!(k, key),
                other => panic!("tree node {cg:?} has slot {other:?}"),
            }
            seen += 1;
        }
        let resident = self
            .slots
            .values()
            .filter(|s| matches!(s, Slot::Tree { .. }))
            .count();
        assert_eq!(resident, seen);
    }
}
