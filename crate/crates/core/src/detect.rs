//! Liveness detectors and orchestration gates.
//!
//! Blocking operations publish the unit's status (and the resource it waits
//! on) through [`Runtime::wait_on`]. From that bookkeeping the detectors
//! derive two deadlock verdicts: a wait-for cycle through resources whose
//! resolving unit is known (futures, agent awaits), and quiescence, where
//! every live unit is blocked and no model operation completes for a whole
//! window. Retry loops report their counters to a watchdog that flags
//! suspected livelocks.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::context::{ObjectId, UnitId};
use crate::error::Result;
use crate::runtime::{lock, Runtime, POLL_SLICE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Resource {
    Future(ObjectId),
    Promise(ObjectId),
    Channel(ObjectId),
    AgentAwait(ObjectId),
    Gate(ObjectId),
}

impl Resource {
    fn object(&self) -> ObjectId {
        match *self {
            Resource::Future(id)
            | Resource::Promise(id)
            | Resource::Channel(id)
            | Resource::AgentAwait(id)
            | Resource::Gate(id) => id,
        }
    }
}

impl fmt::Display for Resource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Resource::Future(id) => write!(f, "future{id}"),
            Resource::Promise(id) => write!(f, "promise{id}"),
            Resource::Channel(id) => write!(f, "chan{id}"),
            Resource::AgentAwait(id) => write!(f, "await(agent{id})"),
            Resource::Gate(id) => write!(f, "gate{id}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitStatus {
    Running,
    /// Waiting for work (an agent executor with an empty mailbox).
    Idle,
    Blocked { resource: Resource, orchestration: bool },
    Finished,
}

/// Consistent copy of every unit's status plus known resolvers.
#[derive(Debug, Clone)]
pub struct WaitForGraph {
    pub units: Vec<(UnitId, String, UnitStatus)>,
    pub resolvers: HashMap<ObjectId, UnitId>,
}

/// One edge of a reported deadlock.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockedOn {
    pub unit: UnitId,
    pub name: String,
    pub resource: Resource,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeadlockEvidence {
    /// Units waiting on each other through resources with known resolvers.
    Cycle(Vec<BlockedOn>),
    /// Every live unit blocked with no progress for the whole window.
    Quiescent(Vec<BlockedOn>),
}

impl fmt::Display for DeadlockEvidence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (label, edges) = match self {
            DeadlockEvidence::Cycle(e) => ("cycle", e),
            DeadlockEvidence::Quiescent(e) => ("all blocked", e),
        };
        write!(f, "{label}: ")?;
        for (i, b) in edges.iter().enumerate() {
            if i > 0 {
                f.write_str(" -> ")?;
            }
            write!(f, "{}[{}] on {}", b.name, b.unit, b.resource)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeadlockVerdict {
    NoDeadlock,
    DeadlockDetected(DeadlockEvidence),
}

impl WaitForGraph {
    pub fn capture(rt: &Runtime, only: Option<&[UnitId]>) -> Self {
        let units = lock(&rt.inner.units)
            .iter()
            .filter(|(id, _)| only.is_none_or(|set| set.contains(id)))
            .map(|(id, info)| (*id, info.name.clone(), info.status))
            .collect();
        let resolvers = lock(&rt.inner.resolvers).clone();
        WaitForGraph { units, resolvers }
    }

    fn blocked(&self, unit: UnitId) -> Option<(&str, Resource)> {
        self.units.iter().find(|(id, _, _)| *id == unit).and_then(|(_, name, st)| match st {
            UnitStatus::Blocked { resource, orchestration: false } => Some((name.as_str(), *resource)),
            _ => None,
        })
    }

    /// A cycle among non-orchestration waits whose resolver is known.
    pub fn find_cycle(&self) -> Option<Vec<BlockedOn>> {
        let next = |u: UnitId| -> Option<(UnitId, BlockedOn)> {
            let (name, resource) = self.blocked(u)?;
            let resolver = *self.resolvers.get(&resource.object())?;
            Some((
                resolver,
                BlockedOn {
                    unit: u,
                    name: name.to_string(),
                    resource,
                },
            ))
        };
        let mut cleared: HashSet<UnitId> = HashSet::new();
        for &(start, _, _) in &self.units {
            if cleared.contains(&start) {
                continue;
            }
            let mut path: Vec<(UnitId, BlockedOn)> = Vec::new();
            let mut cur = start;
            loop {
                if let Some(pos) = path.iter().position(|(u, _)| *u == cur) {
                    return Some(path.drain(pos..).map(|(_, b)| b).collect());
                }
                if cleared.contains(&cur) {
                    break;
                }
                match next(cur) {
                    Some((to, edge)) => {
                        path.push((cur, edge));
                        cur = to;
                    }
                    None => break,
                }
            }
            cleared.extend(path.iter().map(|(u, _)| *u));
            cleared.insert(cur);
        }
        None
    }

    /// Blocked set when every live unit waits on a non-orchestration
    /// resource; `None` otherwise.
    pub fn all_blocked(&self) -> Option<Vec<BlockedOn>> {
        let mut edges = Vec::new();
        for (id, name, st) in &self.units {
            match st {
                UnitStatus::Finished | UnitStatus::Idle => {}
                UnitStatus::Blocked { resource, orchestration: false } => edges.push(BlockedOn {
                    unit: *id,
                    name: name.clone(),
                    resource: *resource,
                }),
                _ => return None,
            }
        }
        if edges.is_empty() {
            None
        } else {
            edges.sort_by_key(|b| b.unit);
            Some(edges)
        }
    }

    /// No unit is running or blocked.
    pub fn settled(&self) -> bool {
        self.units
            .iter()
            .all(|(_, _, st)| matches!(st, UnitStatus::Finished | UnitStatus::Idle))
    }
}

/// Incremental deadlock detector; call [`observe`](Self::observe) periodically.
#[derive(Debug)]
pub struct DeadlockMonitor {
    window: Duration,
    cycle_confirm: Duration,
    pending_cycle: Option<(Vec<UnitId>, Instant)>,
    quiet_since: Option<(u64, Instant)>,
}

impl DeadlockMonitor {
    pub fn new(window: Duration) -> Self {
        DeadlockMonitor {
            window,
            cycle_confirm: Duration::from_millis(25),
            pending_cycle: None,
            quiet_since: None,
        }
    }

    pub fn observe(&mut self, rt: &Runtime, only: Option<&[UnitId]>) -> Option<DeadlockEvidence> {
        let clock = rt.progress();
        let graph = WaitForGraph::capture(rt, only);
        let now = Instant::now();

        // A cycle must persist briefly: a resolver may have just released its
        // waiter, which has not yet been scheduled to clear its edge.
        match graph.find_cycle() {
            Some(cycle) => {
                let mut members: Vec<UnitId> = cycle.iter().map(|b| b.unit).collect();
                members.sort();
                match &self.pending_cycle {
                    Some((prev, since)) if *prev == members => {
                        if now.duration_since(*since) >= self.cycle_confirm {
                            return Some(DeadlockEvidence::Cycle(cycle));
                        }
                    }
                    _ => self.pending_cycle = Some((members, now)),
                }
            }
            None => self.pending_cycle = None,
        }

        match graph.all_blocked() {
            Some(blocked) => match self.quiet_since {
                Some((c, since)) if c == clock => {
                    if now.duration_since(since) >= self.window {
                        return Some(DeadlockEvidence::Quiescent(blocked));
                    }
                }
                _ => self.quiet_since = Some((clock, now)),
            },
            None => self.quiet_since = None,
        }
        None
    }
}

/// Watches the given units (all units of `rt` when `None`) for one window.
pub fn deadlock_probe(rt: &Runtime, units: Option<&[UnitId]>, window: Duration) -> DeadlockVerdict {
    let mut monitor = DeadlockMonitor::new(window);
    let start = Instant::now();
    let limit = window + POLL_SLICE * 4;
    while start.elapsed() <= limit {
        if let Some(ev) = monitor.observe(rt, units) {
            return DeadlockVerdict::DeadlockDetected(ev);
        }
        std::thread::sleep(Duration::from_millis(2));
    }
    DeadlockVerdict::NoDeadlock
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum RetryKind {
    SwapRetry,
    TxnRetry,
}

/// Identity of one retry loop: a single swap call or transaction run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LoopKey {
    pub kind: RetryKind,
    /// The atom or transaction being retried.
    pub object: ObjectId,
    pub call: ObjectId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WatchdogVerdict {
    Quiet,
    LivelockSuspected { loop_key: LoopKey, count: u64 },
}

/// Flags a livelock when any single retry loop of `kind` has re-executed at
/// least `threshold` times.
pub fn watchdog_check(rt: &Runtime, kind: RetryKind, threshold: u64) -> WatchdogVerdict {
    match rt.retry_kind_count(kind) {
        Some((loop_key, count)) if count >= threshold => WatchdogVerdict::LivelockSuspected { loop_key, count },
        _ => WatchdogVerdict::Quiet,
    }
}

/// Highest retry count recorded for any loop of `kind`.
pub fn max_retry_count(rt: &Runtime, kind: RetryKind) -> u64 {
    rt.retry_kind_count(kind).map_or(0, |(_, c)| c)
}

/// One-shot orchestration point used to force interleavings. Waiting on a
/// gate never counts towards a deadlock verdict.
#[derive(Debug)]
pub struct Gate {
    id: ObjectId,
    rt: Runtime,
    open: Mutex<bool>,
    cv: Condvar,
}

impl Gate {
    pub fn new(rt: &Runtime) -> Self {
        Gate {
            id: ObjectId::fresh(),
            rt: rt.clone(),
            open: Mutex::new(false),
            cv: Condvar::new(),
        }
    }

    pub fn id(&self) -> ObjectId {
        self.id
    }

    /// Releases all current and future waiters. Idempotent.
    pub fn open(&self) {
        *lock(&self.open) = true;
        self.cv.notify_all();
    }

    pub fn is_open(&self) -> bool {
        *lock(&self.open)
    }

    /// Blocks until the gate opens. Only fails if the runtime shuts down.
    pub fn wait(&self) -> Result<()> {
        let guard = lock(&self.open);
        self.rt.wait_on(
            guard,
            &self.cv,
            Resource::Gate(self.id),
            None,
            |open| open.then_some(Ok(())),
            |_, e| Err(e),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::Mode;
    use std::sync::Arc;

    #[test]
    fn open_then_wait_returns_immediately() {
        let rt = Runtime::new(Mode::Faithful);
        let g = Gate::new(&rt);
        g.open();
        g.wait().unwrap();
        g.open();
        assert!(g.is_open());
    }

    #[test]
    fn wait_in_one_unit_open_from_another() {
        let rt = Runtime::new(Mode::Faithful);
        let g = Arc::new(Gate::new(&rt));
        let done = Arc::new(std::sync::atomic::AtomicBool::new(false));
        let (g2, d2) = (g.clone(), done.clone());
        rt.spawn_unit("waiter", None, move || {
            g2.wait().unwrap();
            d2.store(true, std::sync::atomic::Ordering::SeqCst);
        });
        std::thread::sleep(Duration::from_millis(20));
        assert!(!done.load(std::sync::atomic::Ordering::SeqCst));
        g.open();
        let t = Instant::now();
        while !done.load(std::sync::atomic::Ordering::SeqCst) {
            assert!(t.elapsed() < Duration::from_secs(2));
            std::thread::sleep(Duration::from_millis(1));
        }
        rt.shutdown();
    }

    #[test]
    fn gate_only_wait_is_never_a_deadlock() {
        let rt = Runtime::new(Mode::Faithful);
        let g = Arc::new(Gate::new(&rt));
        let g2 = g.clone();
        rt.spawn_unit("parked", None, move || {
            let _ = g2.wait();
        });
        assert_eq!(
            deadlock_probe(&rt, None, Duration::from_millis(100)),
            DeadlockVerdict::NoDeadlock
        );
        rt.shutdown();
    }

    #[test]
    fn cycle_finder_on_synthetic_graph() {
        let (u1, u2, u3) = (UnitId(1), UnitId(2), UnitId(3));
        let (f1, f2) = (ObjectId(10), ObjectId(11));
        let blocked = |r| UnitStatus::Blocked {
            resource: r,
            orchestration: false,
        };
        let graph = WaitForGraph {
            units: vec![
                (u1, "f1".into(), blocked(Resource::Future(f2))),
                (u2, "f2".into(), blocked(Resource::Future(f1))),
                (u3, "main".into(), blocked(Resource::Future(f1))),
            ],
            resolvers: [(f1, u1), (f2, u2)].into_iter().collect(),
        };
        let cycle = graph.find_cycle().expect("cycle");
        let mut members: Vec<_> = cycle.iter().map(|b| b.unit).collect();
        members.sort();
        assert_eq!(members, vec![u1, u2]);
    }

    #[test]
    fn chain_without_cycle() {
        let graph = WaitForGraph {
            units: vec![
                (
                    UnitId(1),
                    "a".into(),
                    UnitStatus::Blocked {
                        resource: Resource::Future(ObjectId(2)),
                        orchestration: false,
                    },
                ),
                (UnitId(2), "b".into(), UnitStatus::Running),
            ],
            resolvers: [(ObjectId(2), UnitId(2))].into_iter().collect(),
        };
        assert!(graph.find_cycle().is_none());
        assert!(graph.all_blocked().is_none());
    }

    #[test]
    fn uncontended_counters_stay_zero() {
        let rt = Runtime::new(Mode::Faithful);
        assert_eq!(max_retry_count(&rt, RetryKind::SwapRetry), 0);
        assert_eq!(watchdog_check(&rt, RetryKind::SwapRetry, 1000), WatchdogVerdict::Quiet);
    }
}
