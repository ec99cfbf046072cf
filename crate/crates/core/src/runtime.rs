use std::collections::HashMap;
use std::fmt;
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::context::{self, ObjectId, ScopeKind, UnitId};
use crate::detect::{LoopKey, Resource, RetryKind, UnitStatus};
use crate::error::{Error, Result};
use crate::stm::StmShared;

/// How blocked units re-check abort, cancellation and deadlines.
pub(crate) const POLL_SLICE: Duration = Duration::from_millis(5);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Reproduces the documented composition defects.
    Faithful,
    /// Applies the mitigations: deferred delivers, future cancellation on
    /// abort, and scope prohibitions for blocking or irrevocable operations.
    Guarded,
}

impl Mode {
    fn to_u8(self) -> u8 {
        match self {
            Mode::Faithful => 0,
            Mode::Guarded => 1,
        }
    }

    fn from_u8(v: u8) -> Self {
        if v == 1 {
            Mode::Guarded
        } else {
            Mode::Faithful
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Faithful => "faithful",
            Mode::Guarded => "guarded",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Config {
    pub mode: Mode,
    /// Attempts after which `transaction_run` raises `TxnRetryLimit`.
    pub max_txn_retries: u64,
    pub backoff_base: Duration,
    pub backoff_cap: Duration,
    /// Wait-for bookkeeping, progress clock and retry watchdog.
    pub detectors: bool,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            mode: Mode::Faithful,
            max_txn_retries: 10_000,
            backoff_base: Duration::from_micros(10),
            backoff_cap: Duration::from_millis(1),
            detectors: true,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct UnitInfo {
    pub name: String,
    pub status: UnitStatus,
}

pub(crate) struct Inner {
    pub config: Config,
    mode: AtomicU8,
    running: AtomicBool,
    aborted: AtomicBool,
    pub units: Mutex<HashMap<UnitId, UnitInfo>>,
    pub resolvers: Mutex<HashMap<ObjectId, UnitId>>,
    pub clock: AtomicU64,
    pub watchdog: Mutex<HashMap<LoopKey, u64>>,
    pub stm: StmShared,
    pub effect_failures: Mutex<Vec<(ObjectId, Error)>>,
    handles: Mutex<Vec<JoinHandle<()>>>,
}

/// Shared handle to one runtime instance.
///
/// A runtime owns the mode flag, the STM clock, the detectors and every unit
/// it spawned. Model objects keep a handle to the runtime that created them.
#[derive(Clone)]
pub struct Runtime {
    pub(crate) inner: Arc<Inner>,
}

impl fmt::Debug for Runtime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Runtime")
            .field("mode", &self.mode())
            .field("aborted", &self.is_aborted())
            .finish_non_exhaustive()
    }
}

impl Runtime {
    pub fn new(mode: Mode) -> Self {
        Runtime::with_config(Config {
            mode,
            ..Config::default()
        })
    }

    pub fn with_config(config: Config) -> Self {
        let mode = config.mode;
        Runtime {
            inner: Arc::new(Inner {
                mode: AtomicU8::new(mode.to_u8()),
                config,
                running: AtomicBool::new(false),
                aborted: AtomicBool::new(false),
                units: Mutex::new(HashMap::new()),
                resolvers: Mutex::new(HashMap::new()),
                clock: AtomicU64::new(0),
                watchdog: Mutex::new(HashMap::new()),
                stm: StmShared::default(),
                effect_failures: Mutex::new(Vec::new()),
                handles: Mutex::new(Vec::new()),
            }),
        }
    }

    pub fn config(&self) -> &Config {
        &self.inner.config
    }

    pub fn mode(&self) -> Mode {
        Mode::from_u8(self.inner.mode.load(Ordering::SeqCst))
    }

    pub fn is_guarded(&self) -> bool {
        self.mode() == Mode::Guarded
    }

    /// Switches between faithful and guarded behaviour. Rejected while a
    /// scenario is in flight.
    pub fn set_mode(&self, mode: Mode) -> Result<()> {
        if self.inner.running.load(Ordering::SeqCst) {
            return Err(Error::ModeChangeWhileRunning);
        }
        self.inner.mode.store(mode.to_u8(), Ordering::SeqCst);
        Ok(())
    }

    pub(crate) fn begin_scenario(&self) {
        self.inner.running.store(true, Ordering::SeqCst);
    }

    pub(crate) fn end_scenario(&self) {
        self.inner.running.store(false, Ordering::SeqCst);
    }

    pub fn current_context(&self) -> context::ExecutionContext {
        context::ExecutionContext {
            unit: context::current_unit(),
            scope_stack: context::scope_stack(),
            mode: self.mode(),
        }
    }

    pub fn is_aborted(&self) -> bool {
        self.inner.aborted.load(Ordering::SeqCst)
    }

    /// Makes every blocking operation and retry loop of this runtime return
    /// `Error::Aborted`.
    pub fn abort(&self) {
        self.inner.aborted.store(true, Ordering::SeqCst);
    }

    /// Aborts the runtime and waits (bounded) for its units to exit.
    pub fn shutdown(&self) {
        self.abort();
        let handles: Vec<_> = std::mem::take(&mut *lock(&self.inner.handles));
        let deadline = Instant::now() + Duration::from_secs(2);
        for h in handles {
            while !h.is_finished() && Instant::now() < deadline {
                thread::sleep(Duration::from_millis(1));
            }
            if h.is_finished() {
                let _ = h.join();
            }
        }
    }

    fn detectors(&self) -> bool {
        self.inner.config.detectors
    }

    /// Number of completed model operations.
    pub fn progress(&self) -> u64 {
        self.inner.clock.load(Ordering::SeqCst)
    }

    pub(crate) fn tick(&self) {
        if self.detectors() {
            self.inner.clock.fetch_add(1, Ordering::SeqCst);
        }
    }

    /// Spawns a new execution unit with a fresh scope stack. `scope`, when
    /// given, is pushed above `TopLevel` for the duration of `body`.
    pub fn spawn_unit<F>(&self, name: impl Into<String>, scope: Option<ScopeKind>, body: F) -> UnitId
    where
        F: FnOnce() + Send + 'static,
    {
        let id = UnitId::fresh();
        self.spawn_with_id(id, name.into(), scope, body);
        id
    }

    pub(crate) fn spawn_with_id<F>(&self, id: UnitId, name: String, scope: Option<ScopeKind>, body: F)
    where
        F: FnOnce() + Send + 'static,
    {
        lock(&self.inner.units).insert(
            id,
            UnitInfo {
                name: name.clone(),
                status: UnitStatus::Running,
            },
        );
        let rt = self.clone();
        let handle = thread::Builder::new()
            .name(name)
            .spawn(move || {
                context::install_unit(id);
                let _ = panic::catch_unwind(AssertUnwindSafe(|| match scope {
                    Some(kind) => context::with_scope(kind, body),
                    None => body(),
                }));
                rt.set_status(id, UnitStatus::Finished);
            })
            .expect("failed to spawn execution unit");
        lock(&self.inner.handles).push(handle);
    }

    pub(crate) fn register_resolver(&self, object: ObjectId, unit: UnitId) {
        lock(&self.inner.resolvers).insert(object, unit);
    }

    pub(crate) fn set_status(&self, unit: UnitId, status: UnitStatus) {
        if !self.detectors() {
            return;
        }
        if let Some(info) = lock(&self.inner.units).get_mut(&unit) {
            info.status = status;
        }
    }

    pub(crate) fn note_retry(&self, key: LoopKey, count: u64) {
        if !self.detectors() {
            return;
        }
        let mut wd = lock(&self.inner.watchdog);
        let slot = wd.entry(key).or_insert(0);
        *slot = (*slot).max(count);
    }

    pub(crate) fn record_effect_failure(&self, target: ObjectId, err: Error) {
        lock(&self.inner.effect_failures).push((target, err));
    }

    /// Errors raised by deferred effects after their transaction committed
    /// (for example a send to an agent that failed in the meantime).
    pub fn effect_failures(&self) -> Vec<(ObjectId, Error)> {
        lock(&self.inner.effect_failures).clone()
    }

    pub fn stm_commits(&self) -> u64 {
        self.inner.stm.commits.load(Ordering::SeqCst)
    }

    pub fn stm_retries(&self) -> u64 {
        self.inner.stm.retries.load(Ordering::SeqCst)
    }

    pub fn backoff(&self, attempt: u64) -> Duration {
        use rand::Rng;
        let cfg = &self.inner.config;
        let shift = attempt.min(20) as u32;
        let ceiling = cfg
            .backoff_base
            .saturating_mul(1u32 << shift.min(16))
            .min(cfg.backoff_cap);
        let nanos = ceiling.as_nanos().max(1) as u64;
        Duration::from_nanos(rand::thread_rng().gen_range(0..=nanos))
    }

    /// Blocks the calling unit on `resource` until `poll` yields a result.
    ///
    /// `poll` runs with the lock held on every wake-up. When the wait ends
    /// without a result (timeout, abort, cancellation) `abandon` is called,
    /// still under the lock, so the caller can withdraw its registration; it
    /// may still return `Ok` if a match raced with the error.
    pub(crate) fn wait_on<'a, S, R>(
        &self,
        mut guard: MutexGuard<'a, S>,
        cv: &Condvar,
        resource: Resource,
        timeout: Option<Duration>,
        mut poll: impl FnMut(&mut S) -> Option<Result<R>>,
        abandon: impl FnOnce(&mut S, Error) -> Result<R>,
    ) -> Result<R> {
        let unit = context::current_unit();
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut registered = false;
        let orchestration = matches!(resource, Resource::Gate(_));
        let outcome = loop {
            if let Some(r) = poll(&mut guard) {
                break r;
            }
            let failure = if self.is_aborted() {
                Some(Error::Aborted)
            } else if !orchestration && crate::future::cancel_requested() {
                Some(Error::FutureCancelled)
            } else {
                match deadline {
                    Some(d) if Instant::now() >= d => Some(Error::Timeout),
                    _ => None,
                }
            };
            if let Some(err) = failure {
                break abandon(&mut guard, err);
            }
            if !registered {
                self.set_status(unit, UnitStatus::Blocked { resource, orchestration });
                registered = true;
            }
            let slice = match deadline {
                Some(d) => d.saturating_duration_since(Instant::now()).min(POLL_SLICE),
                None => POLL_SLICE,
            };
            guard = cv
                .wait_timeout(guard, slice.max(Duration::from_micros(50)))
                .unwrap_or_else(|e| e.into_inner())
                .0;
        };
        drop(guard);
        if registered {
            self.set_status(unit, UnitStatus::Running);
        }
        outcome
    }

    pub(crate) fn retry_kind_count(&self, kind: RetryKind) -> Option<(LoopKey, u64)> {
        lock(&self.inner.watchdog)
            .iter()
            .filter(|(k, _)| k.kind == kind)
            .max_by_key(|(_, c)| **c)
            .map(|(k, c)| (*k, *c))
    }
}

pub(crate) fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_change_rejected_while_running() {
        let rt = Runtime::new(Mode::Faithful);
        rt.begin_scenario();
        assert_eq!(rt.set_mode(Mode::Guarded), Err(Error::ModeChangeWhileRunning));
        rt.end_scenario();
        rt.set_mode(Mode::Guarded).unwrap();
        assert_eq!(rt.mode(), Mode::Guarded);
    }

    #[test]
    fn fresh_context_reports_mode() {
        let rt = Runtime::new(Mode::Guarded);
        let (tx, rx) = std::sync::mpsc::channel();
        let rt2 = rt.clone();
        rt.spawn_unit("probe", None, move || tx.send(rt2.current_context()).unwrap());
        let ctx = rx.recv().unwrap();
        assert_eq!(ctx.scope_stack, vec![ScopeKind::TopLevel]);
        assert_eq!(ctx.mode, Mode::Guarded);
        rt.shutdown();
    }

    #[test]
    fn backoff_respects_cap() {
        let rt = Runtime::new(Mode::Faithful);
        for attempt in 0..40 {
            assert!(rt.backoff(attempt) <= Duration::from_millis(1));
        }
    }
}
