//! Transactional references.
//!
//! Commit protocol: a global version clock plus read-set validation under a
//! single commit lock. Every in-transaction read is checked against the
//! attempt's snapshot version, so an attempt never observes an inconsistent
//! state; a failed check restarts the attempt. A transaction entered while
//! another is active on the same unit is merged into it.

use std::any::Any;
use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::context::{self, DeferredEffect, ObjectId, ScopeKind};
use crate::detect::{LoopKey, RetryKind};
use crate::error::{Error, Result};
use crate::runtime::{lock, Runtime};

#[derive(Default)]
pub(crate) struct StmShared {
    commit_lock: Mutex<()>,
    clock: AtomicU64,
    pub commits: AtomicU64,
    pub retries: AtomicU64,
}

trait RefCore: Send + Sync {
    fn version(&self) -> u64;
    fn install(&self, value: Box<dyn Any + Send>, version: u64);
}

struct RefInner<T> {
    id: ObjectId,
    cell: Mutex<(Arc<T>, u64)>,
}

impl<T: Send + Sync + 'static> RefCore for RefInner<T> {
    fn version(&self) -> u64 {
        lock(&self.cell).1
    }

    fn install(&self, value: Box<dyn Any + Send>, version: u64) {
        let value = value.downcast::<T>().expect("write-set type mismatch");
        *lock(&self.cell) = (Arc::new(*value), version);
    }
}

/// Transactional cell. Writable only inside [`transaction_run`].
pub struct Ref<T> {
    inner: Arc<RefInner<T>>,
}

impl<T> Clone for Ref<T> {
    fn clone(&self) -> Self {
        Ref {
            inner: self.inner.clone(),
        }
    }
}

impl<T: fmt::Debug> fmt::Debug for Ref<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cell = lock(&self.inner.cell);
        f.debug_struct("Ref")
            .field("id", &self.inner.id)
            .field("value", &cell.0)
            .field("version", &cell.1)
            .finish()
    }
}

/// Log of one transaction attempt.
type PendingWrite = (Arc<dyn RefCore>, Box<dyn Any + Send>);

struct TxnLog {
    id: ObjectId,
    rt: Runtime,
    snapshot: u64,
    reads: HashMap<ObjectId, (Arc<dyn RefCore>, u64)>,
    writes: BTreeMap<ObjectId, PendingWrite>,
    deferred: Vec<DeferredEffect>,
    spawned: Vec<Box<dyn FnOnce() + Send>>,
}

impl TxnLog {
    fn new(id: ObjectId, rt: &Runtime) -> Self {
        TxnLog {
            id,
            rt: rt.clone(),
            snapshot: rt.inner.stm.clock.load(Ordering::SeqCst),
            reads: HashMap::new(),
            writes: BTreeMap::new(),
            deferred: Vec::new(),
            spawned: Vec::new(),
        }
    }

    /// Drops the attempt; in guarded mode futures spawned by it are cancelled.
    fn discard(self) {
        if self.rt.is_guarded() {
            for cancel in self.spawned {
                cancel();
            }
        }
    }
}

thread_local! {
    static CURRENT: RefCell<Option<TxnLog>> = const { RefCell::new(None) };
}

fn with_txn<R>(f: impl FnOnce(&mut TxnLog) -> R) -> Option<R> {
    CURRENT.with(|c| c.borrow_mut().as_mut().map(f))
}

pub(crate) fn push_deferred(effect: DeferredEffect) -> Result<()> {
    with_txn(|log| log.deferred.push(effect)).ok_or(Error::NotInTransaction)
}

/// Registers a cancellation callback for a future spawned by the current
/// attempt. Returns false when no transaction is active.
pub(crate) fn register_spawned(cancel: Box<dyn FnOnce() + Send>) -> bool {
    let mut slot = Some(cancel);
    with_txn(|log| log.spawned.push(slot.take().unwrap())).is_some()
}

pub(crate) fn current_txn_id() -> Option<ObjectId> {
    with_txn(|log| log.id)
}

impl<T: Clone + Send + Sync + 'static> Ref<T> {
    pub fn new(_rt: &Runtime, value: T) -> Self {
        Ref {
            inner: Arc::new(RefInner {
                id: ObjectId::fresh(),
                cell: Mutex::new((Arc::new(value), 0)),
            }),
        }
    }

    pub fn id(&self) -> ObjectId {
        self.inner.id
    }

    /// Version of the last commit that wrote this ref.
    pub fn version(&self) -> u64 {
        lock(&self.inner.cell).1
    }

    /// Latest committed value, ignoring any enclosing transaction.
    pub fn committed(&self) -> T {
        (*lock(&self.inner.cell).0).clone()
    }

    /// Inside a transaction: the pending write if any, else the committed
    /// value validated against the attempt's snapshot. Outside: the latest
    /// committed value. An `Err(Conflict)` restarts the enclosing attempt.
    pub fn deref(&self) -> Result<T> {
        let id = self.inner.id;
        let core: Arc<dyn RefCore> = self.inner.clone();
        let inside = with_txn(|log| {
            if let Some((_, pending)) = log.writes.get(&id) {
                return Ok(pending.downcast_ref::<T>().expect("write-set type mismatch").clone());
            }
            let (value, version) = {
                let cell = lock(&self.inner.cell);
                (cell.0.clone(), cell.1)
            };
            if version > log.snapshot {
                return Err(Error::Conflict);
            }
            log.reads.entry(id).or_insert((core, version));
            Ok((*value).clone())
        });
        match inside {
            Some(r) => r,
            None => Ok(self.committed()),
        }
    }

    pub fn set(&self, value: T) -> Result<T> {
        let id = self.inner.id;
        let core: Arc<dyn RefCore> = self.inner.clone();
        let stored = value.clone();
        with_txn(move |log| {
            log.writes.insert(id, (core, Box::new(stored)));
        })
        .ok_or(Error::NotInTransaction)?;
        Ok(value)
    }

    pub fn alter(&self, f: impl FnOnce(&T) -> Result<T>) -> Result<T> {
        if current_txn_id().is_none() {
            return Err(Error::NotInTransaction);
        }
        let current = self.deref()?;
        let next = f(&current)?;
        self.set(next)
    }
}

struct ClearOnUnwind;

impl Drop for ClearOnUnwind {
    fn drop(&mut self) {
        if std::thread::panicking() {
            CURRENT.with(|c| c.borrow_mut().take());
        }
    }
}

/// Validates the read set and installs the write set atomically. On success
/// returns the attempt's deferred effects, on conflict the log back.
fn commit(mut log: TxnLog) -> std::result::Result<Vec<DeferredEffect>, Box<TxnLog>> {
    let rt = log.rt.clone();
    let stm = &rt.inner.stm;
    {
        let _commit = lock(&stm.commit_lock);
        if log.reads.values().any(|(core, seen)| core.version() != *seen) {
            drop(_commit);
            return Err(Box::new(log));
        }
        if !log.writes.is_empty() {
            let version = stm.clock.load(Ordering::SeqCst) + 1;
            for (_, (core, value)) in std::mem::take(&mut log.writes) {
                core.install(value, version);
            }
            stm.clock.store(version, Ordering::SeqCst);
        }
        stm.commits.fetch_add(1, Ordering::SeqCst);
    }
    rt.tick();
    Ok(std::mem::take(&mut log.deferred))
}

/// Runs `body` as a transaction.
///
/// If the calling unit is already inside a transaction, `body` joins it and
/// no separate commit happens. Otherwise each attempt runs under a fresh
/// log; on conflict the attempt is discarded (with its deferred effects) and
/// `body` re-runs after a randomized backoff, up to the configured retry
/// limit. After a successful commit the deferred effects run in order.
pub fn transaction_run<R>(rt: &Runtime, mut body: impl FnMut() -> Result<R>) -> Result<R> {
    if let Some(id) = current_txn_id() {
        return context::with_scope(ScopeKind::Transaction(id), body);
    }
    let txn_id = ObjectId::fresh();
    let key = LoopKey {
        kind: RetryKind::TxnRetry,
        object: txn_id,
        call: txn_id,
    };
    let max = rt.config().max_txn_retries;
    let mut attempt = 0u64;
    loop {
        if rt.is_aborted() {
            return Err(Error::Aborted);
        }
        attempt += 1;
        CURRENT.with(|c| *c.borrow_mut() = Some(TxnLog::new(txn_id, rt)));
        let outcome = {
            let _guard = ClearOnUnwind;
            context::with_scope(ScopeKind::Transaction(txn_id), &mut body)
        };
        let log = CURRENT
            .with(|c| c.borrow_mut().take())
            .expect("transaction log vanished");
        let conflicted = match outcome {
            Ok(value) => match commit(log) {
                Ok(effects) => {
                    for effect in effects {
                        let target = effect.target;
                        if let Err(e) = (effect.run)() {
                            rt.record_effect_failure(target, e);
                        }
                    }
                    return Ok(value);
                }
                Err(log) => *log,
            },
            Err(Error::Conflict) => log,
            Err(e) => {
                log.discard();
                return Err(e);
            }
        };
        conflicted.discard();
        rt.inner.stm.retries.fetch_add(1, Ordering::SeqCst);
        rt.note_retry(key, attempt);
        if attempt >= max {
            return Err(Error::TxnRetryLimit { attempts: attempt });
        }
        std::thread::sleep(rt.backoff(attempt));
    }
}

impl Runtime {
    pub fn transaction<R>(&self, body: impl FnMut() -> Result<R>) -> Result<R> {
        transaction_run(self, body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::Gate;
    use crate::runtime::Mode;
    use std::sync::atomic::AtomicUsize;

    #[derive(Debug, Clone, PartialEq)]
    struct Mail {
        subject: String,
        archived: bool,
    }

    #[test]
    fn new_and_deref() {
        let rt = Runtime::new(Mode::Faithful);
        assert_eq!(Ref::new(&rt, 0).deref(), Ok(0));
        let mail = Ref::new(
            &rt,
            Mail {
                subject: "Hi".into(),
                archived: false,
            },
        );
        assert_eq!(mail.deref().unwrap().subject, "Hi");
    }

    #[test]
    fn commit_makes_write_visible() {
        let rt = Runtime::new(Mode::Faithful);
        let r = Ref::new(&rt, 0);
        rt.transaction(|| r.set(7)).unwrap();
        assert_eq!(r.deref(), Ok(7));
        let mail = Ref::new(
            &rt,
            Mail {
                subject: "Hi".into(),
                archived: false,
            },
        );
        rt.transaction(|| {
            let mut m = mail.deref()?;
            m.archived = true;
            mail.set(m)
        })
        .unwrap();
        assert!(mail.committed().archived);
    }

    #[test]
    fn writes_outside_transaction_are_rejected() {
        let rt = Runtime::new(Mode::Faithful);
        let r = Ref::new(&rt, 0);
        assert_eq!(r.set(1), Err(Error::NotInTransaction));
        assert_eq!(r.alter(|x| Ok(x + 1)), Err(Error::NotInTransaction));
        assert_eq!(r.committed(), 0);
    }

    #[test]
    fn read_your_own_write_and_last_write_wins() {
        let rt = Runtime::new(Mode::Faithful);
        let r = Ref::new(&rt, 0);
        rt.transaction(|| {
            r.set(1)?;
            assert_eq!(r.deref()?, 1);
            assert_eq!(r.committed(), 0);
            assert_eq!(r.alter(|x| Ok(x + 1))?, 2);
            r.set(5)
        })
        .unwrap();
        assert_eq!(r.committed(), 5);
    }

    #[test]
    fn nested_transactions_merge_into_one_commit() {
        let rt = Runtime::new(Mode::Faithful);
        let r = Ref::new(&rt, 0);
        let before = rt.stm_commits();
        rt.transaction(|| {
            rt.transaction(|| r.set(2))?;
            assert_eq!(r.committed(), 0);
            Ok(())
        })
        .unwrap();
        assert_eq!(r.committed(), 2);
        assert_eq!(rt.stm_commits() - before, 1);
    }

    #[test]
    fn body_error_aborts_without_partial_commit() {
        let rt = Runtime::new(Mode::Faithful);
        let (a, b) = (Ref::new(&rt, 0), Ref::new(&rt, 0));
        let r: Result<()> = rt.transaction(|| {
            a.set(1)?;
            b.set(1)?;
            Err(Error::raised("boom"))
        });
        assert_eq!(r, Err(Error::raised("boom")));
        assert_eq!((a.committed(), b.committed()), (0, 0));
    }

    #[test]
    fn conflicting_commit_forces_restart() {
        let rt = Runtime::new(Mode::Faithful);
        let r = Ref::new(&rt, 0);
        let read = Arc::new(Gate::new(&rt));
        let written = Arc::new(Gate::new(&rt));
        let (r2, rd, wr, rt2) = (r.clone(), read.clone(), written.clone(), rt.clone());
        rt.spawn_unit("contender", None, move || {
            rd.wait().unwrap();
            rt2.transaction(|| r2.alter(|x| Ok(x + 100))).unwrap();
            wr.open();
        });
        let attempts = AtomicUsize::new(0);
        rt.transaction(|| {
            let v = r.deref()?;
            if attempts.fetch_add(1, Ordering::SeqCst) == 0 {
                read.open();
                written.wait()?;
            }
            r.set(v + 1)
        })
        .unwrap();
        assert_eq!(attempts.load(Ordering::SeqCst), 2);
        assert_eq!(r.committed(), 101);
        rt.shutdown();
    }

    #[test]
    fn retry_limit_is_enforced() {
        let rt = Runtime::with_config(crate::runtime::Config {
            max_txn_retries: 3,
            ..Default::default()
        });
        let r: Result<()> = rt.transaction(|| Err(Error::Conflict));
        assert_eq!(r, Err(Error::TxnRetryLimit { attempts: 3 }));
    }

    #[test]
    fn counting_three_units_twenty_transactions() {
        let rt = Runtime::new(Mode::Faithful);
        let r = Ref::new(&rt, 0u64);
        std::thread::scope(|s| {
            for _ in 0..3 {
                let (r, rt) = (r.clone(), rt.clone());
                s.spawn(move || {
                    for _ in 0..20 {
                        rt.transaction(|| r.alter(|x| Ok(x + 1))).unwrap();
                    }
                });
            }
        });
        assert_eq!(r.committed(), 60);
    }
}
