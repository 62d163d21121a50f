//! Thread-local instrumentation counting executed tape ops and entries into
//! the training-only auxiliary objectives.

use std::cell::RefCell;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub ops: BTreeMap<&'static str, u64>,
    pub rcs_calls: u64,
    pub cmg_calls: u64,
}

impl OpCounts {
    pub fn total_ops(&self) -> u64 {
        self.ops.values().sum()
    }

    fn merge(&mut self, other: &OpCounts) {
        for (k, v) in &other.ops {
            *self.ops.entry(k).or_default() += v;
        }
        self.rcs_calls += other.rcs_calls;
        self.cmg_calls += other.cmg_calls;
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Aux {
    Rcs,
    Cmg,
}

thread_local! {
    static ACTIVE: RefCell<Option<OpCounts>> = const { RefCell::new(None) };
}

/// Run `f` and return everything it executed on this thread.
pub fn count<R>(f: impl FnOnce() -> R) -> (R, OpCounts) {
    let outer = ACTIVE.with(|a| a.borrow_mut().replace(OpCounts::default()));
    let result = f();
    let inner = ACTIVE.with(|a| a.borrow_mut().take()).unwrap_or_default();
    if let Some(mut outer) = outer {
        outer.merge(&inner);
        ACTIVE.with(|a| *a.borrow_mut() = Some(outer));
    }
    (result, inner)
}

pub(crate) fn op(name: &'static str) {
    ACTIVE.with(|a| {
        if let Some(c) = a.borrow_mut().as_mut() {
            *c.ops.entry(name).or_default() += 1;
        }
    });
}

pub(crate) fn aux(kind: Aux) {
    ACTIVE.with(|a| {
        if let Some(c) = a.borrow_mut().as_mut() {
            match kind {
                Aux::Rcs => c.rcs_calls += 1,
                Aux::Cmg => c.cmg_calls += 1,
            }
        }
    });
}
