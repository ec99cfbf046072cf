//! Futures (one-shot results of a body running on its own unit) and promises
//! (single-assignment cells).

use std::cell::RefCell;
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use crate::context::{self, DeferredEffect, EffectKind, ObjectId, ScopeKind, UnitId};
use crate::detect::Resource;
use crate::error::{Error, Result};
use crate::runtime::{lock, Runtime};
use crate::stm;

thread_local! {
    static CANCEL: RefCell<Option<Arc<AtomicBool>>> = const { RefCell::new(None) };
}

/// Whether the calling unit is a future body whose cancellation was requested.
pub fn cancel_requested() -> bool {
    CANCEL.with(|c| c.borrow().as_ref().is_some_and(|f| f.load(Ordering::SeqCst)))
}

/// Explicit cancellation point for future bodies.
pub fn cancellation_point() -> Result<()> {
    if cancel_requested() {
        Err(Error::FutureCancelled)
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FutureState {
    Pending,
    Resolved,
    Failed,
    Cancelled,
}

enum Cell<T> {
    Pending,
    Resolved(T),
    Failed(Error),
    Cancelled,
}

struct FutureInner<T> {
    id: ObjectId,
    unit: UnitId,
    rt: Runtime,
    cell: Mutex<Cell<T>>,
    cv: Condvar,
    cancel: Arc<AtomicBool>,
}

pub struct Future<T> {
    inner: Arc<FutureInner<T>>,
}

impl<T> Clone for Future<T> {
    fn clone(&self) -> Self {
        Future {
            inner: self.inner.clone(),
        }
    }
}

impl<T> fmt::Debug for Future<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Future").field("id", &self.inner.id).finish_non_exhaustive()
    }
}

/// Reads that block until a value is available.
pub trait BlockingRead<T> {
    fn blocking_deref(&self, timeout: Option<Duration>) -> Result<T>;
}

fn check_read_allowed(rt: &Runtime) -> Result<()> {
    if rt.is_guarded() && context::in_agent_action() {
        return Err(Error::BlockingReadProhibited);
    }
    Ok(())
}

/// Runs `body` on a fresh unit and returns a future for its result.
///
/// In guarded mode a future spawned inside a transaction is cancelled if the
/// spawning attempt aborts or retries.
pub fn future_spawn<T, F>(rt: &Runtime, body: F) -> Future<T>
where
    T: Clone + Send + 'static,
    F: FnOnce() -> Result<T> + Send + 'static,
{
    let id = ObjectId::fresh();
    let unit = UnitId::fresh();
    let inner = Arc::new(FutureInner {
        id,
        unit,
        rt: rt.clone(),
        cell: Mutex::new(Cell::Pending),
        cv: Condvar::new(),
        cancel: Arc::new(AtomicBool::new(false)),
    });
    let fut = Future { inner };
    if rt.is_guarded() && context::in_transaction() {
        let handle = fut.clone();
        stm::register_spawned(Box::new(move || handle.cancel()));
    }
    rt.register_resolver(id, unit);
    let worker = fut.inner.clone();
    rt.spawn_with_id(unit, format!("future{id}"), Some(ScopeKind::FutureBody(id)), move || {
        CANCEL.with(|c| *c.borrow_mut() = Some(worker.cancel.clone()));
        let outcome = cancellation_point().and_then(|_| body());
        let next = match outcome {
            Ok(v) => Cell::Resolved(v),
            Err(Error::FutureCancelled) if worker.cancel.load(Ordering::SeqCst) => Cell::Cancelled,
            Err(e) => Cell::Failed(e),
        };
        *lock(&worker.cell) = next;
        worker.cv.notify_all();
        worker.rt.tick();
    });
    fut
}

impl<T: Clone + Send + 'static> Future<T> {
    pub fn id(&self) -> ObjectId {
        self.inner.id
    }

    /// The unit running this future's body.
    pub fn unit(&self) -> UnitId {
        self.inner.unit
    }

    pub fn state(&self) -> FutureState {
        match &*lock(&self.inner.cell) {
            Cell::Pending => FutureState::Pending,
            Cell::Resolved(_) => FutureState::Resolved,
            Cell::Failed(_) => FutureState::Failed,
            Cell::Cancelled => FutureState::Cancelled,
        }
    }

    pub fn is_cancel_requested(&self) -> bool {
        self.inner.cancel.load(Ordering::SeqCst)
    }

    /// Requests cooperative cancellation. Takes effect when the body next
    /// reaches a cancellation point; terminal states are never changed.
    pub fn cancel(&self) {
        self.inner.cancel.store(true, Ordering::SeqCst);
        self.inner.cv.notify_all();
    }

    pub fn deref(&self) -> Result<T> {
        self.blocking_deref(None)
    }
}

impl<T: Clone + Send + 'static> BlockingRead<T> for Future<T> {
    fn blocking_deref(&self, timeout: Option<Duration>) -> Result<T> {
        let rt = &self.inner.rt;
        check_read_allowed(rt)?;
        let guard = lock(&self.inner.cell);
        let out = rt.wait_on(
            guard,
            &self.inner.cv,
            Resource::Future(self.inner.id),
            timeout,
            |cell| match cell {
                Cell::Pending => None,
                Cell::Resolved(v) => Some(Ok(v.clone())),
                Cell::Failed(e) => Some(Err(Error::FutureFailed(Box::new(e.clone())))),
                Cell::Cancelled => Some(Err(Error::FutureCancelled)),
            },
            |_, e| Err(e),
        );
        rt.tick();
        out
    }
}

struct PromiseInner<T> {
    id: ObjectId,
    rt: Runtime,
    cell: Mutex<Option<T>>,
    cv: Condvar,
}

pub struct Promise<T> {
    inner: Arc<PromiseInner<T>>,
}

impl<T> Clone for Promise<T> {
    fn clone(&self) -> Self {
        Promise {
            inner: self.inner.clone(),
        }
    }
}

impl<T> fmt::Debug for Promise<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Promise").field("id", &self.inner.id).finish_non_exhaustive()
    }
}

impl<T: Clone + Send + 'static> Promise<T> {
    pub fn new(rt: &Runtime) -> Self {
        Promise {
            inner: Arc::new(PromiseInner {
                id: ObjectId::fresh(),
                rt: rt.clone(),
                cell: Mutex::new(None),
                cv: Condvar::new(),
            }),
        }
    }

    pub fn id(&self) -> ObjectId {
        self.inner.id
    }

    pub fn is_delivered(&self) -> bool {
        lock(&self.inner.cell).is_some()
    }

    /// Non-blocking probe.
    pub fn peek(&self) -> Option<T> {
        lock(&self.inner.cell).clone()
    }

    /// First delivery wins and returns true; later ones change nothing and
    /// return false. In guarded mode a delivery inside a transaction is
    /// deferred to commit and reports true immediately.
    pub fn deliver(&self, value: T) -> bool {
        let rt = &self.inner.rt;
        if rt.is_guarded() {
            if let Some(txn) = stm::current_txn_id() {
                let target = self.clone();
                let effect = DeferredEffect::new(EffectKind::PromiseDeliver, self.inner.id, txn, move || {
                    target.deliver_now(value);
                    Ok(())
                });
                if context::defer_until_commit(effect).is_ok() {
                    return true;
                }
                return false;
            }
        }
        self.deliver_now(value)
    }

    fn deliver_now(&self, value: T) -> bool {
        let mut cell = lock(&self.inner.cell);
        if cell.is_some() {
            return false;
        }
        *cell = Some(value);
        drop(cell);
        self.inner.cv.notify_all();
        self.inner.rt.tick();
        true
    }

    pub fn deref(&self) -> Result<T> {
        self.blocking_deref(None)
    }
}

impl<T: Clone + Send + 'static> BlockingRead<T> for Promise<T> {
    fn blocking_deref(&self, timeout: Option<Duration>) -> Result<T> {
        let rt = &self.inner.rt;
        check_read_allowed(rt)?;
        let guard = lock(&self.inner.cell);
        let out = rt.wait_on(
            guard,
            &self.inner.cv,
            Resource::Promise(self.inner.id),
            timeout,
            |cell| cell.clone().map(Ok),
            |_, e| Err(e),
        );
        rt.tick();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::Gate;
    use crate::runtime::Mode;
    use std::time::Instant;

    fn wait_state<T: Clone + Send + 'static>(f: &Future<T>, want: FutureState) {
        let t = Instant::now();
        while f.state() != want {
            assert!(t.elapsed() < Duration::from_secs(5), "state {:?}", f.state());
            std::thread::sleep(Duration::from_millis(1));
        }
    }

    #[test]
    fn future_resolves_and_rereads() {
        let rt = Runtime::new(Mode::Faithful);
        let f = future_spawn(&rt, || Ok(42));
        assert_eq!(f.deref(), Ok(42));
        assert_eq!(f.deref(), Ok(42));
        assert_eq!(f.state(), FutureState::Resolved);
        rt.shutdown();
    }

    #[test]
    fn future_failure_is_reported() {
        let rt = Runtime::new(Mode::Faithful);
        let f: Future<i32> = future_spawn(&rt, || Err(Error::raised("E")));
        assert_eq!(f.deref(), Err(Error::FutureFailed(Box::new(Error::raised("E")))));
        rt.shutdown();
    }

    #[test]
    fn future_body_runs_with_fresh_stack() {
        let rt = Runtime::new(Mode::Faithful);
        let rt2 = rt.clone();
        let stack = rt
            .transaction(|| {
                let f = future_spawn(&rt2, || Ok(context::scope_stack()));
                f.deref()
            })
            .unwrap();
        assert_eq!(stack.len(), 2);
        assert_eq!(stack[0], ScopeKind::TopLevel);
        assert!(matches!(stack[1], ScopeKind::FutureBody(_)));
        rt.shutdown();
    }

    #[test]
    fn cancel_before_cancellation_point() {
        let rt = Runtime::new(Mode::Faithful);
        let g = Arc::new(Gate::new(&rt));
        let g2 = g.clone();
        let f = future_spawn(&rt, move || {
            g2.wait()?;
            cancellation_point()?;
            Ok(1)
        });
        f.cancel();
        g.open();
        wait_state(&f, FutureState::Cancelled);
        assert_eq!(f.deref(), Err(Error::FutureCancelled));
        rt.shutdown();
    }

    #[test]
    fn cancel_after_resolution_is_noop() {
        let rt = Runtime::new(Mode::Faithful);
        let f = future_spawn(&rt, || Ok(3));
        assert_eq!(f.deref(), Ok(3));
        f.cancel();
        assert_eq!(f.state(), FutureState::Resolved);
        assert_eq!(f.deref(), Ok(3));
        rt.shutdown();
    }

    #[test]
    fn cancel_interrupts_a_blocked_body() {
        let rt = Runtime::new(Mode::Faithful);
        let p: Promise<i32> = Promise::new(&rt);
        let p2 = p.clone();
        let f = future_spawn(&rt, move || p2.deref());
        std::thread::sleep(Duration::from_millis(20));
        f.cancel();
        wait_state(&f, FutureState::Cancelled);
        rt.shutdown();
    }

    #[test]
    fn promise_single_assignment() {
        let rt = Runtime::new(Mode::Faithful);
        let p = Promise::new(&rt);
        assert_eq!(p.peek(), None);
        assert!(p.deliver(1));
        assert!(!p.deliver(2));
        assert_eq!(p.deref(), Ok(1));
    }

    #[test]
    fn deref_times_out() {
        let rt = Runtime::new(Mode::Faithful);
        let p: Promise<i32> = Promise::new(&rt);
        assert_eq!(p.blocking_deref(Some(Duration::from_millis(20))), Err(Error::Timeout));
    }

    #[test]
    fn all_readers_wake_on_one_delivery() {
        let rt = Runtime::new(Mode::Faithful);
        let p = Promise::new(&rt);
        let got: Vec<i32> = std::thread::scope(|s| {
            let hs: Vec<_> = (0..4)
                .map(|_| {
                    let p = p.clone();
                    s.spawn(move || p.deref().unwrap())
                })
                .collect();
            std::thread::sleep(Duration::from_millis(20));
            assert!(p.deliver(9));
            hs.into_iter().map(|h| h.join().unwrap()).collect()
        });
        assert_eq!(got, vec![9; 4]);
    }

    #[test]
    fn guarded_deliver_in_transaction_waits_for_commit() {
        let rt = Runtime::new(Mode::Guarded);
        let p = Promise::new(&rt);
        rt.transaction(|| {
            assert!(p.deliver(5));
            assert!(!p.is_delivered());
            Ok(())
        })
        .unwrap();
        assert_eq!(p.peek(), Some(5));
    }

    #[test]
    fn guarded_read_in_agent_scope_is_prohibited() {
        let rt = Runtime::new(Mode::Guarded);
        let p = Promise::new(&rt);
        p.deliver(1);
        let r = context::with_scope(ScopeKind::AgentAction(ObjectId(1)), || p.deref());
        assert_eq!(r, Err(Error::BlockingReadProhibited));
    }

    #[test]
    fn guarded_abort_cancels_spawned_future() {
        let rt = Runtime::new(Mode::Guarded);
        let g = Arc::new(Gate::new(&rt));
        let slot: Arc<Mutex<Option<Future<i32>>>> = Arc::default();
        let (rt2, g2, s2) = (rt.clone(), g.clone(), slot.clone());
        let r: Result<()> = rt.transaction(|| {
            let g3 = g2.clone();
            let f = future_spawn(&rt2, move || {
                g3.wait()?;
                cancellation_point()?;
                Ok(7)
            });
            *lock(&s2) = Some(f);
            Err(Error::raised("abort"))
        });
        assert!(r.is_err());
        let f = lock(&slot).clone().unwrap();
        assert!(f.is_cancel_requested());
        g.open();
        wait_state(&f, FutureState::Cancelled);
        rt.shutdown();
    }
}
