//! Agents: state cells changed by asynchronous actions that run one at a time,
//! in mailbox order, on the agent's own executor unit.

use std::cell::RefCell;
use std::collections::VecDeque;
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use crate::context::{self, DeferredEffect, EffectKind, ObjectId, ScopeKind, UnitId};
use crate::detect::{Resource, UnitStatus};
use crate::error::{Error, Result};
use crate::runtime::{lock, Runtime, POLL_SLICE};

type Action<T> = Box<dyn FnOnce(&T) -> Result<T> + Send>;
type HeldSend = Box<dyn FnOnce() -> Result<()> + Send>;

enum Msg<T> {
    Action(Action<T>),
    Flush(u64),
}

struct State<T> {
    value: T,
    mailbox: VecDeque<Msg<T>>,
    failed: Option<Error>,
    enqueued: u64,
    processed: u64,
    next_ticket: u64,
    flushed: u64,
}

struct AgentInner<T> {
    id: ObjectId,
    unit: UnitId,
    rt: Runtime,
    state: Mutex<State<T>>,
    work: Condvar,
    done: Condvar,
    closed: AtomicBool,
}

struct Token<T> {
    inner: Arc<AgentInner<T>>,
}

impl<T> Drop for Token<T> {
    fn drop(&mut self) {
        self.inner.closed.store(true, Ordering::SeqCst);
        self.inner.work.notify_all();
    }
}

/// Handle to an agent. The executor stops once every handle is dropped or
/// the runtime shuts down.
pub struct Agent<T> {
    token: Arc<Token<T>>,
}

impl<T> Clone for Agent<T> {
    fn clone(&self) -> Self {
        Agent {
            token: self.token.clone(),
        }
    }
}

impl<T> fmt::Debug for Agent<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Agent").field("id", &self.token.inner.id).finish_non_exhaustive()
    }
}

thread_local! {
    // Sends issued by the running action, dispatched when it completes.
    static HELD: RefCell<Option<Vec<HeldSend>>> = const { RefCell::new(None) };
}

impl<T: Clone + Send + Sync + 'static> Agent<T> {
    pub fn new(rt: &Runtime, value: T) -> Self {
        let id = ObjectId::fresh();
        let unit = UnitId::fresh();
        let inner = Arc::new(AgentInner {
            id,
            unit,
            rt: rt.clone(),
            state: Mutex::new(State {
                value,
                mailbox: VecDeque::new(),
                failed: None,
                enqueued: 0,
                processed: 0,
                next_ticket: 0,
                flushed: 0,
            }),
            work: Condvar::new(),
            done: Condvar::new(),
            closed: AtomicBool::new(false),
        });
        rt.register_resolver(id, unit);
        let exec = inner.clone();
        rt.spawn_with_id(unit, format!("agent{id}"), None, move || run_executor(&exec));
        Agent {
            token: Arc::new(Token { inner }),
        }
    }

    fn inner(&self) -> &AgentInner<T> {
        &self.token.inner
    }

    pub fn id(&self) -> ObjectId {
        self.inner().id
    }

    /// The executor unit that runs this agent's actions.
    pub fn unit(&self) -> UnitId {
        self.inner().unit
    }

    /// Current state. Never blocks; an in-flight action's result becomes
    /// visible only when it completes.
    pub fn deref(&self) -> T {
        lock(&self.inner().state).value.clone()
    }

    pub fn failed(&self) -> Option<Error> {
        lock(&self.inner().state).failed.clone()
    }

    pub fn enqueued(&self) -> u64 {
        lock(&self.inner().state).enqueued
    }

    pub fn processed(&self) -> u64 {
        lock(&self.inner().state).processed
    }

    /// Sends `action` to the agent without blocking.
    ///
    /// Inside a transaction the send is deferred until commit; inside an
    /// agent action it is held until that action completes normally;
    /// otherwise it is enqueued immediately.
    pub fn send<F>(&self, action: F) -> Result<()>
    where
        F: FnOnce(&T) -> Result<T> + Send + 'static,
    {
        if let Some(e) = self.failed() {
            return Err(Error::AgentFailed(e.to_string()));
        }
        let action: Action<T> = Box::new(action);
        match context::innermost_dispatch_scope() {
            Some(ScopeKind::Transaction(txn)) => {
                let target = self.clone();
                context::defer_until_commit(DeferredEffect::new(EffectKind::AgentSend, self.id(), txn, move || {
                    target.dispatch(action)
                }))
            }
            Some(ScopeKind::AgentAction(_)) => {
                let target = self.clone();
                let held: HeldSend = Box::new(move || target.dispatch(action));
                let mut slot = Some(held);
                HELD.with(|h| {
                    if let Some(list) = h.borrow_mut().as_mut() {
                        list.push(slot.take().unwrap());
                    }
                });
                match slot {
                    // Agent scope pushed by hand, not by an executor.
                    Some(held) => held(),
                    None => Ok(()),
                }
            }
            _ => self.dispatch(action),
        }
    }

    fn dispatch(&self, action: Action<T>) -> Result<()> {
        let inner = self.inner();
        let mut st = lock(&inner.state);
        if let Some(e) = &st.failed {
            return Err(Error::AgentFailed(e.to_string()));
        }
        st.mailbox.push_back(Msg::Action(action));
        st.enqueued += 1;
        drop(st);
        inner.work.notify_all();
        inner.rt.tick();
        Ok(())
    }

    /// Blocks until every action sent before this call has been processed.
    pub fn await_for(&self, timeout: Option<Duration>) -> Result<()> {
        agent_await(&self.inner().rt, &[self], timeout)
    }
}

/// Type-erased view of an agent for [`agent_await`].
pub trait AwaitTarget {
    #[doc(hidden)]
    fn enqueue_flush(&self) -> u64;
    #[doc(hidden)]
    fn wait_flushed(&self, ticket: u64, timeout: Option<Duration>) -> Result<()>;
}

impl<T: Clone + Send + Sync + 'static> AwaitTarget for Agent<T> {
    fn enqueue_flush(&self) -> u64 {
        let inner = self.inner();
        let mut st = lock(&inner.state);
        st.next_ticket += 1;
        let ticket = st.next_ticket;
        st.mailbox.push_back(Msg::Flush(ticket));
        drop(st);
        inner.work.notify_all();
        ticket
    }

    fn wait_flushed(&self, ticket: u64, timeout: Option<Duration>) -> Result<()> {
        let inner = self.inner();
        let guard = lock(&inner.state);
        inner.rt.wait_on(
            guard,
            &inner.done,
            Resource::AgentAwait(inner.id),
            timeout,
            |st| (st.flushed >= ticket).then_some(Ok(())),
            |_, e| Err(e),
        )
    }
}

/// Blocks until all actions sent to each agent before the call have run.
///
/// Prohibited inside transactions and agent actions; guarded mode also
/// prohibits it inside swap update functions.
pub fn agent_await(rt: &Runtime, agents: &[&dyn AwaitTarget], timeout: Option<Duration>) -> Result<()> {
    if context::in_transaction() || context::in_agent_action() {
        return Err(Error::AwaitProhibited);
    }
    if rt.is_guarded() && context::in_any_swap() {
        return Err(Error::AwaitProhibited);
    }
    let deadline = timeout.map(|t| Instant::now() + t);
    let tickets: Vec<u64> = agents.iter().map(|a| a.enqueue_flush()).collect();
    for (agent, ticket) in agents.iter().zip(tickets) {
        let left = deadline.map(|d| d.saturating_duration_since(Instant::now()));
        agent.wait_flushed(ticket, left)?;
    }
    rt.tick();
    Ok(())
}

fn run_executor<T: Clone + Send + Sync + 'static>(inner: &Arc<AgentInner<T>>) {
    let rt = &inner.rt;
    loop {
        let msg = {
            let mut st = lock(&inner.state);
            let mut idle = false;
            loop {
                if rt.is_aborted() || (inner.closed.load(Ordering::SeqCst) && st.mailbox.is_empty()) {
                    return;
                }
                if let Some(m) = st.mailbox.pop_front() {
                    break m;
                }
                if !idle {
                    rt.set_status(inner.unit, UnitStatus::Idle);
                    idle = true;
                }
                st = inner
                    .work
                    .wait_timeout(st, POLL_SLICE)
                    .unwrap_or_else(|e| e.into_inner())
                    .0;
            }
        };
        rt.set_status(inner.unit, UnitStatus::Running);
        match msg {
            Msg::Flush(ticket) => {
                lock(&inner.state).flushed = ticket;
                inner.done.notify_all();
            }
            Msg::Action(action) => {
                let current = {
                    let st = lock(&inner.state);
                    if st.failed.is_some() {
                        continue;
                    }
                    st.value.clone()
                };
                HELD.with(|h| *h.borrow_mut() = Some(Vec::new()));
                let outcome = context::with_scope(ScopeKind::AgentAction(inner.id), || action(&current));
                let held = HELD.with(|h| h.borrow_mut().take()).unwrap_or_default();
                {
                    let mut st = lock(&inner.state);
                    match outcome {
                        Ok(next) => {
                            st.value = next;
                            st.processed += 1;
                        }
                        Err(e) => st.failed = Some(e),
                    }
                }
                inner.done.notify_all();
                rt.tick();
                if lock(&inner.state).failed.is_none() {
                    for send in held {
                        if let Err(e) = send() {
                            rt.record_effect_failure(inner.id, e);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::Gate;
    use crate::runtime::Mode;

    #[test]
    fn new_send_await_deref() {
        let rt = Runtime::new(Mode::Faithful);
        assert_eq!(Agent::new(&rt, 0).deref(), 0);
        assert_eq!(Agent::new(&rt, Vec::<String>::new()).deref(), Vec::<String>::new());
        let ag = Agent::new(&rt, 0);
        ag.send(|x| Ok(x + 1)).unwrap();
        ag.await_for(None).unwrap();
        assert_eq!(ag.deref(), 1);
        rt.shutdown();
    }

    #[test]
    fn await_sees_all_prior_actions() {
        let rt = Runtime::new(Mode::Faithful);
        let ag = Agent::new(&rt, Vec::new());
        for i in 0..3 {
            ag.send(move |v: &Vec<i32>| {
                std::thread::sleep(Duration::from_millis(2));
                let mut v = v.clone();
                v.push(i);
                Ok(v)
            })
            .unwrap();
        }
        ag.await_for(None).unwrap();
        assert_eq!(ag.deref(), vec![0, 1, 2]);
        assert_eq!(ag.processed(), 3);
        rt.shutdown();
    }

    #[test]
    fn deref_during_action_shows_previous_state() {
        let rt = Runtime::new(Mode::Faithful);
        let ag = Agent::new(&rt, 1);
        let inside = Arc::new(Gate::new(&rt));
        let release = Arc::new(Gate::new(&rt));
        let (i2, r2) = (inside.clone(), release.clone());
        ag.send(move |x| {
            i2.open();
            r2.wait()?;
            Ok(x + 1)
        })
        .unwrap();
        inside.wait().unwrap();
        assert_eq!(ag.deref(), 1);
        release.open();
        ag.await_for(None).unwrap();
        assert_eq!(ag.deref(), 2);
        rt.shutdown();
    }

    #[test]
    fn failed_agent_keeps_last_state_and_rejects_sends() {
        let rt = Runtime::new(Mode::Faithful);
        let ag = Agent::new(&rt, 5);
        ag.send(|_| Err(Error::raised("bad"))).unwrap();
        ag.await_for(None).unwrap();
        assert_eq!(ag.deref(), 5);
        assert_eq!(ag.failed(), Some(Error::raised("bad")));
        assert!(matches!(ag.send(|x| Ok(*x)), Err(Error::AgentFailed(_))));
        rt.shutdown();
    }

    #[test]
    fn await_prohibited_in_transaction_and_action() {
        let rt = Runtime::new(Mode::Faithful);
        let ag = Agent::new(&rt, 0);
        let ag2 = ag.clone();
        assert_eq!(rt.transaction(|| ag2.await_for(None)), Err(Error::AwaitProhibited));
        let other = Agent::new(&rt, 0);
        let seen = Arc::new(Mutex::new(None));
        let s2 = seen.clone();
        ag.send(move |x| {
            *lock(&s2) = Some(other.await_for(None));
            Ok(*x)
        })
        .unwrap();
        ag.await_for(None).unwrap();
        assert_eq!(*lock(&seen), Some(Err(Error::AwaitProhibited)));
        rt.shutdown();
    }

    #[test]
    fn guarded_await_in_swap_is_prohibited() {
        let rt = Runtime::new(Mode::Guarded);
        let ag = Agent::new(&rt, 0);
        let at = crate::atom::Atom::new(&rt, 0);
        let r = at.swap(|x| {
            ag.await_for(None)?;
            Ok(x + 1)
        });
        assert_eq!(r, Err(Error::AwaitProhibited));
        rt.shutdown();
    }

    #[test]
    fn transactional_send_is_deferred_to_commit() {
        let rt = Runtime::new(Mode::Faithful);
        let ag = Agent::new(&rt, 0);
        rt.transaction(|| {
            ag.send(|x| Ok(x + 1))?;
            assert_eq!(ag.enqueued(), 0);
            Ok(())
        })
        .unwrap();
        assert_eq!(ag.enqueued(), 1);
        ag.await_for(None).unwrap();
        assert_eq!(ag.deref(), 1);
        rt.shutdown();
    }

    #[test]
    fn self_send_is_held_until_action_completes() {
        let rt = Runtime::new(Mode::Faithful);
        let ag = Agent::new(&rt, Vec::<&'static str>::new());
        let me = ag.clone();
        ag.send(move |v| {
            me.send(|v: &Vec<&'static str>| {
                let mut v = v.clone();
                v.push("second");
                Ok(v)
            })?;
            std::thread::sleep(Duration::from_millis(10));
            assert_eq!(me.enqueued(), 1);
            let mut v = v.clone();
            v.push("first");
            Ok(v)
        })
        .unwrap();
        // first action, then the held send
        let t = Instant::now();
        while ag.processed() < 2 {
            assert!(t.elapsed() < Duration::from_secs(5));
            std::thread::sleep(Duration::from_millis(1));
        }
        assert_eq!(ag.deref(), vec!["first", "second"]);
        rt.shutdown();
    }

    #[test]
    fn await_timeout() {
        let rt = Runtime::new(Mode::Faithful);
        let ag = Agent::new(&rt, 0);
        let g = Arc::new(Gate::new(&rt));
        let g2 = g.clone();
        ag.send(move |x| {
            g2.wait()?;
            Ok(*x)
        })
        .unwrap();
        assert_eq!(ag.await_for(Some(Duration::from_millis(20))), Err(Error::Timeout));
        g.open();
        ag.await_for(None).unwrap();
        rt.shutdown();
    }
}
