//! Per-unit dynamic scope tracking.
//!
//! Every execution unit (an OS thread here) carries a stack of the
//! concurrency-model blocks it is currently nested in. Operations consult the
//! stack to decide how to behave: a send inside a transaction is deferred, an
//! await inside an agent action is rejected, and so on.

use std::cell::RefCell;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::runtime::Mode;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Process-wide unique identifier for model objects (atoms, agents,
/// transactions, futures, promises, channels, gates).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObjectId(pub u64);

impl ObjectId {
    pub(crate) fn fresh() -> Self {
        ObjectId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }
}

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Identifier of an execution unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UnitId(pub u64);

impl UnitId {
    pub(crate) fn fresh() -> Self {
        UnitId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
    }
}

impl fmt::Display for UnitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "u{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScopeKind {
    TopLevel,
    SwapFn(ObjectId),
    AgentAction(ObjectId),
    Transaction(ObjectId),
    FutureBody(ObjectId),
    GoBlock(ObjectId),
}

/// Immutable snapshot of a unit's scope stack and the runtime mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionContext {
    pub unit: UnitId,
    pub scope_stack: Vec<ScopeKind>,
    pub mode: Mode,
}

impl ExecutionContext {
    pub fn depth(&self) -> usize {
        self.scope_stack.len()
    }

    pub fn contains(&self, pred: impl Fn(&ScopeKind) -> bool) -> bool {
        self.scope_stack.iter().any(pred)
    }
}

struct UnitLocal {
    id: UnitId,
    stack: Vec<ScopeKind>,
}

impl UnitLocal {
    fn fresh(id: UnitId) -> Self {
        UnitLocal {
            id,
            stack: vec![ScopeKind::TopLevel],
        }
    }
}

thread_local! {
    static LOCAL: RefCell<Option<UnitLocal>> = const { RefCell::new(None) };
}

fn with_local<R>(f: impl FnOnce(&mut UnitLocal) -> R) -> R {
    LOCAL.with(|cell| {
        let mut slot = cell.borrow_mut();
        let local = slot.get_or_insert_with(|| UnitLocal::fresh(UnitId::fresh()));
        f(local)
    })
}

/// Installs a fresh context (stack = `[TopLevel]`) for a newly spawned unit.
pub(crate) fn install_unit(id: UnitId) {
    LOCAL.with(|cell| *cell.borrow_mut() = Some(UnitLocal::fresh(id)));
}

pub fn current_unit() -> UnitId {
    with_local(|l| l.id)
}

/// Copy of the calling unit's scope stack.
pub fn scope_stack() -> Vec<ScopeKind> {
    with_local(|l| l.stack.clone())
}

pub fn scope_depth() -> usize {
    with_local(|l| l.stack.len())
}

pub(crate) fn stack_has(pred: impl Fn(&ScopeKind) -> bool) -> bool {
    with_local(|l| l.stack.iter().any(pred))
}

pub(crate) fn in_transaction() -> bool {
    stack_has(|k| matches!(k, ScopeKind::Transaction(_)))
}

pub(crate) fn in_agent_action() -> bool {
    stack_has(|k| matches!(k, ScopeKind::AgentAction(_)))
}

pub(crate) fn in_any_swap() -> bool {
    stack_has(|k| matches!(k, ScopeKind::SwapFn(_)))
}

/// Innermost scope among transactions and agent actions, which decides how a
/// send is dispatched.
pub(crate) fn innermost_dispatch_scope() -> Option<ScopeKind> {
    with_local(|l| {
        l.stack
            .iter()
            .rev()
            .find(|k| matches!(k, ScopeKind::Transaction(_) | ScopeKind::AgentAction(_)))
            .copied()
    })
}

struct PopGuard {
    depth: usize,
}

impl Drop for PopGuard {
    fn drop(&mut self) {
        with_local(|l| l.stack.truncate(self.depth));
    }
}

/// Runs `body` with `kind` pushed on the calling unit's scope stack.
///
/// The stack is restored to its previous depth when `body` returns, including
/// when it returns an error or unwinds.
pub fn with_scope<R>(kind: ScopeKind, body: impl FnOnce() -> R) -> R {
    let depth = with_local(|l| {
        let depth = l.stack.len();
        l.stack.push(kind);
        depth
    });
    let _guard = PopGuard { depth };
    body()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EffectKind {
    AgentSend,
    PromiseDeliver,
}

/// An irrevocable action captured during a transaction attempt. It runs
/// exactly once if that attempt commits and is dropped otherwise.
pub struct DeferredEffect {
    pub kind: EffectKind,
    pub target: ObjectId,
    pub origin_txn: ObjectId,
    pub(crate) run: Box<dyn FnOnce() -> Result<()> + Send>,
}

impl DeferredEffect {
    pub fn new(
        kind: EffectKind,
        target: ObjectId,
        origin_txn: ObjectId,
        run: impl FnOnce() -> Result<()> + Send + 'static,
    ) -> Self {
        DeferredEffect {
            kind,
            target,
            origin_txn,
            run: Box::new(run),
        }
    }
}

impl fmt::Debug for DeferredEffect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DeferredEffect")
            .field("kind", &self.kind)
            .field("target", &self.target)
            .field("origin_txn", &self.origin_txn)
            .finish_non_exhaustive()
    }
}

/// Queues `effect` on the innermost transaction attempt of the calling unit.
pub fn defer_until_commit(effect: DeferredEffect) -> Result<()> {
    if !in_transaction() {
        return Err(Error::NotInTransaction);
    }
    crate::stm::push_deferred(effect)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn with_scope_passes_result_through_and_restores_depth() {
        let before = scope_depth();
        let out = with_scope(ScopeKind::GoBlock(ObjectId(7)), || 42);
        assert_eq!(out, 42);
        assert_eq!(scope_depth(), before);
    }

    #[test]
    fn nested_scopes_are_observed_in_order() {
        std::thread::spawn(|| {
            let seen = with_scope(ScopeKind::Transaction(ObjectId(1)), || {
                with_scope(ScopeKind::AgentAction(ObjectId(2)), scope_stack)
            });
            assert_eq!(
                seen,
                vec![
                    ScopeKind::TopLevel,
                    ScopeKind::Transaction(ObjectId(1)),
                    ScopeKind::AgentAction(ObjectId(2)),
                ]
            );
        })
        .join()
        .unwrap();
    }

    #[test]
    fn error_path_restores_stack() {
        let before = scope_depth();
        let r: Result<()> = with_scope(ScopeKind::SwapFn(ObjectId(3)), || Err(Error::raised("E")));
        assert_eq!(r, Err(Error::raised("E")));
        assert_eq!(scope_depth(), before);
    }

    #[test]
    fn unwinding_restores_stack() {
        std::thread::spawn(|| {
            let before = scope_depth();
            let caught = std::panic::catch_unwind(|| {
                with_scope(ScopeKind::GoBlock(ObjectId(9)), || panic!("boom"))
            });
            assert!(caught.is_err());
            assert_eq!(scope_depth(), before);
        })
        .join()
        .unwrap();
    }

    #[test]
    fn fresh_unit_stack_is_top_level() {
        std::thread::spawn(|| assert_eq!(scope_stack(), vec![ScopeKind::TopLevel]))
            .join()
            .unwrap();
    }

    #[test]
    fn snapshot_is_stable() {
        std::thread::spawn(|| {
            let snap = scope_stack();
            with_scope(ScopeKind::GoBlock(ObjectId(1)), || {
                assert_eq!(snap, vec![ScopeKind::TopLevel]);
                assert_eq!(scope_depth(), 2);
            });
        })
        .join()
        .unwrap();
    }

    #[test]
    fn defer_outside_transaction_is_rejected() {
        let eff = DeferredEffect::new(EffectKind::AgentSend, ObjectId(1), ObjectId(2), || Ok(()));
        assert_eq!(defer_until_commit(eff).unwrap_err(), Error::NotInTransaction);
    }
}
