use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use arc_swap::ArcSwap;

use crate::context::{self, ObjectId, ScopeKind};
use crate::detect::{LoopKey, RetryKind};
use crate::error::{Error, Result};
use crate::runtime::Runtime;

struct Versioned<T> {
    value: T,
    version: u64,
}

struct AtomInner<T> {
    id: ObjectId,
    rt: Runtime,
    cell: ArcSwap<Versioned<T>>,
    retries: AtomicU64,
}

/// Uncoordinated atomic reference.
///
/// Every successful write installs a new `(value, version)` pair; compare-and
/// -swap compares versions, so resetting to an equal value still invalidates
/// concurrent swaps.
pub struct Atom<T> {
    inner: Arc<AtomInner<T>>,
}

impl<T> Clone for Atom<T> {
    fn clone(&self) -> Self {
        Atom {
            inner: self.inner.clone(),
        }
    }
}

impl<T: fmt::Debug> fmt::Debug for Atom<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cur = self.inner.cell.load();
        f.debug_struct("Atom")
            .field("id", &self.inner.id)
            .field("value", &cur.value)
            .field("version", &cur.version)
            .finish()
    }
}

impl<T: Clone + Send + Sync + 'static> Atom<T> {
    pub fn new(rt: &Runtime, value: T) -> Self {
        Atom {
            inner: Arc::new(AtomInner {
                id: ObjectId::fresh(),
                rt: rt.clone(),
                cell: ArcSwap::from_pointee(Versioned { value, version: 0 }),
                retries: AtomicU64::new(0),
            }),
        }
    }

    pub fn id(&self) -> ObjectId {
        self.inner.id
    }

    pub fn deref(&self) -> T {
        self.inner.cell.load().value.clone()
    }

    pub fn version(&self) -> u64 {
        self.inner.cell.load().version
    }

    /// Value and version read together.
    pub fn snapshot(&self) -> (T, u64) {
        let cur = self.inner.cell.load();
        (cur.value.clone(), cur.version)
    }

    /// Cumulative number of swap re-executions on this atom.
    pub fn retry_count(&self) -> u64 {
        self.inner.retries.load(Ordering::SeqCst)
    }

    pub fn reset(&self, value: T) -> T {
        self.inner.cell.rcu(|cur| Versioned {
            value: value.clone(),
            version: cur.version + 1,
        });
        self.inner.rt.tick();
        value
    }

    /// Installs `value` iff the current version is `expected_version`.
    pub fn compare_and_set(&self, expected_version: u64, value: T) -> bool {
        let cur = self.inner.cell.load_full();
        if cur.version != expected_version {
            return false;
        }
        let next = Arc::new(Versioned {
            value,
            version: expected_version + 1,
        });
        let prev = self.inner.cell.compare_and_swap(&cur, next);
        let won = Arc::ptr_eq(&prev, &cur);
        if won {
            self.inner.rt.tick();
        }
        won
    }

    /// Replaces the value `x` with `f(x)`, re-running `f` whenever another
    /// write lands between the read and the compare-and-swap.
    ///
    /// `f` runs inside a `SwapFn` scope. Each re-execution is reported to the
    /// retry watchdog. In guarded mode a swap on this atom from inside one of
    /// its own update functions fails with `ReentrantSwap`.
    pub fn swap<F>(&self, f: F) -> Result<T>
    where
        F: Fn(&T) -> Result<T>,
    {
        let inner = &*self.inner;
        let rt = &inner.rt;
        if rt.is_guarded() && context::stack_has(|k| *k == ScopeKind::SwapFn(inner.id)) {
            return Err(Error::ReentrantSwap);
        }
        let mut key: Option<LoopKey> = None;
        let mut retries = 0u64;
        loop {
            if rt.is_aborted() {
                return Err(Error::Aborted);
            }
            let cur = inner.cell.load_full();
            let value = context::with_scope(ScopeKind::SwapFn(inner.id), || f(&cur.value))?;
            let next = Arc::new(Versioned {
                value,
                version: cur.version + 1,
            });
            let prev = inner.cell.compare_and_swap(&cur, next.clone());
            if Arc::ptr_eq(&prev, &cur) {
                rt.tick();
                return Ok(next.value.clone());
            }
            retries += 1;
            inner.retries.fetch_add(1, Ordering::SeqCst);
            let key = *key.get_or_insert_with(|| LoopKey {
                kind: RetryKind::SwapRetry,
                object: inner.id,
                call: ObjectId::fresh(),
            });
            rt.note_retry(key, retries);
        }
    }
}
