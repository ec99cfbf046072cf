//! Unbuffered rendezvous channels and go-style task spawning.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use crate::context::{self, ObjectId, ScopeKind};
use crate::detect::Resource;
use crate::error::{Error, Result};
use crate::runtime::{lock, Runtime};

struct Putter<T> {
    ticket: u64,
    value: T,
    // Result offers from finished go blocks: nobody waits for the match.
    detached: bool,
}

struct ChanState<T> {
    putters: VecDeque<Putter<T>>,
    takers: VecDeque<u64>,
    handed: HashMap<u64, T>,
    matched: HashSet<u64>,
    next_ticket: u64,
    closed: bool,
    close_error: Option<Error>,
}

impl<T> ChanState<T> {
    fn ticket(&mut self) -> u64 {
        self.next_ticket += 1;
        self.next_ticket
    }
}

struct ChanInner<T> {
    id: ObjectId,
    rt: Runtime,
    state: Mutex<ChanState<T>>,
    cv: Condvar,
}

pub struct Channel<T> {
    inner: Arc<ChanInner<T>>,
}

impl<T> Clone for Channel<T> {
    fn clone(&self) -> Self {
        Channel {
            inner: self.inner.clone(),
        }
    }
}

impl<T> fmt::Debug for Channel<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Channel").field("id", &self.inner.id).finish_non_exhaustive()
    }
}

fn check_revocable_scope(rt: &Runtime) -> Result<()> {
    if rt.is_guarded() && (context::in_transaction() || context::in_any_swap()) {
        return Err(Error::IrrevocableInRetryScope);
    }
    Ok(())
}

impl<T: Send + 'static> Channel<T> {
    pub fn new(rt: &Runtime) -> Self {
        Channel {
            inner: Arc::new(ChanInner {
                id: ObjectId::fresh(),
                rt: rt.clone(),
                state: Mutex::new(ChanState {
                    putters: VecDeque::new(),
                    takers: VecDeque::new(),
                    handed: HashMap::new(),
                    matched: HashSet::new(),
                    next_ticket: 0,
                    closed: false,
                    close_error: None,
                }),
                cv: Condvar::new(),
            }),
        }
    }

    pub fn id(&self) -> ObjectId {
        self.inner.id
    }

    /// Number of waiting putters and takers. At most one is non-zero.
    pub fn waiting(&self) -> (usize, usize) {
        let st = lock(&self.inner.state);
        (st.putters.len(), st.takers.len())
    }

    pub fn is_closed(&self) -> bool {
        lock(&self.inner.state).closed
    }

    /// Error that closed the channel, when a go body failed.
    pub fn close_error(&self) -> Option<Error> {
        lock(&self.inner.state).close_error.clone()
    }

    /// Closes the channel; blocked and future operations fail with
    /// `ChannelClosed`. A pending go-result offer can still be taken.
    pub fn close(&self) {
        lock(&self.inner.state).closed = true;
        self.inner.cv.notify_all();
    }

    fn close_with(&self, err: Error) {
        let mut st = lock(&self.inner.state);
        st.closed = true;
        st.close_error = Some(err);
        drop(st);
        self.inner.cv.notify_all();
    }

    /// Hands `value` to exactly one taker, blocking until one is matched.
    pub fn put(&self, value: T, timeout: Option<Duration>) -> Result<()> {
        let rt = &self.inner.rt;
        check_revocable_scope(rt)?;
        let mut st = lock(&self.inner.state);
        if st.closed {
            return Err(Error::ChannelClosed);
        }
        if let Some(taker) = st.takers.pop_front() {
            st.handed.insert(taker, value);
            drop(st);
            self.inner.cv.notify_all();
            rt.tick();
            return Ok(());
        }
        let ticket = st.ticket();
        st.putters.push_back(Putter {
            ticket,
            value,
            detached: false,
        });
        let withdraw = |st: &mut ChanState<T>| st.putters.retain(|p| p.ticket != ticket);
        let out = rt.wait_on(
            st,
            &self.inner.cv,
            Resource::Channel(self.inner.id),
            timeout,
            |st| {
                if st.matched.remove(&ticket) {
                    Some(Ok(()))
                } else if st.closed {
                    withdraw(st);
                    Some(Err(Error::ChannelClosed))
                } else {
                    None
                }
            },
            |st, e| {
                if st.matched.remove(&ticket) {
                    Ok(())
                } else {
                    withdraw(st);
                    Err(e)
                }
            },
        );
        if out.is_ok() {
            rt.tick();
        }
        out
    }

    /// Receives the value of the oldest waiting putter, blocking until one
    /// arrives.
    pub fn take(&self, timeout: Option<Duration>) -> Result<T> {
        let rt = &self.inner.rt;
        check_revocable_scope(rt)?;
        let mut st = lock(&self.inner.state);
        if let Some(p) = st.putters.pop_front() {
            if !p.detached {
                st.matched.insert(p.ticket);
            }
            drop(st);
            self.inner.cv.notify_all();
            rt.tick();
            return Ok(p.value);
        }
        if st.closed {
            return Err(Error::ChannelClosed);
        }
        let ticket = st.ticket();
        st.takers.push_back(ticket);
        let withdraw = |st: &mut ChanState<T>| st.takers.retain(|t| *t != ticket);
        let out = rt.wait_on(
            st,
            &self.inner.cv,
            Resource::Channel(self.inner.id),
            timeout,
            |st| {
                if let Some(v) = st.handed.remove(&ticket) {
                    Some(Ok(v))
                } else if st.closed {
                    withdraw(st);
                    Some(Err(Error::ChannelClosed))
                } else {
                    None
                }
            },
            |st, e| match st.handed.remove(&ticket) {
                Some(v) => Ok(v),
                None => {
                    withdraw(st);
                    Err(e)
                }
            },
        );
        if out.is_ok() {
            rt.tick();
        }
        out
    }

    fn offer_detached(&self, value: T) {
        let mut st = lock(&self.inner.state);
        if let Some(taker) = st.takers.pop_front() {
            st.handed.insert(taker, value);
        } else {
            let ticket = st.ticket();
            st.putters.push_back(Putter {
                ticket,
                value,
                detached: true,
            });
        }
        drop(st);
        self.inner.cv.notify_all();
        self.inner.rt.tick();
    }
}

/// Runs `body` on a fresh unit inside a `GoBlock` scope. The returned
/// channel offers the body's result to one taker; if the body fails the
/// channel is closed with the error.
pub fn go_spawn<T, F>(rt: &Runtime, body: F) -> Channel<T>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T> + Send + 'static,
{
    let result = Channel::new(rt);
    let task = ObjectId::fresh();
    let out = result.clone();
    rt.spawn_unit(format!("go{task}"), Some(ScopeKind::GoBlock(task)), move || match body() {
        Ok(v) => out.offer_detached(v),
        Err(e) => out.close_with(e),
    });
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::Mode;

    #[test]
    fn fresh_channel_has_no_waiters() {
        let rt = Runtime::new(Mode::Faithful);
        let c: Channel<i32> = Channel::new(&rt);
        assert_eq!(c.waiting(), (0, 0));
    }

    #[test]
    fn put_and_take_rendezvous() {
        let rt = Runtime::new(Mode::Faithful);
        let c = Channel::new(&rt);
        let c2 = c.clone();
        let h = std::thread::spawn(move || c2.take(None));
        c.put(5, None).unwrap();
        assert_eq!(h.join().unwrap(), Ok(5));
    }

    #[test]
    fn values_arrive_in_order() {
        let rt = Runtime::new(Mode::Faithful);
        let c = Channel::new(&rt);
        let c2 = c.clone();
        let h = std::thread::spawn(move || {
            for i in 1..=3 {
                c2.put(i, None).unwrap();
            }
        });
        let got: Vec<i32> = (0..3).map(|_| c.take(None).unwrap()).collect();
        h.join().unwrap();
        assert_eq!(got, vec![1, 2, 3]);
    }

    #[test]
    fn go_result_and_error() {
        let rt = Runtime::new(Mode::Faithful);
        assert_eq!(go_spawn(&rt, || Ok(7)).take(None), Ok(7));
        let bad: Channel<i32> = go_spawn(&rt, || Err(Error::raised("x")));
        assert_eq!(bad.take(None), Err(Error::ChannelClosed));
        assert_eq!(bad.close_error(), Some(Error::raised("x")));
        rt.shutdown();
    }

    #[test]
    fn go_blocks_exchange() {
        let rt = Runtime::new(Mode::Faithful);
        let c = Channel::new(&rt);
        let (a, b) = (c.clone(), c.clone());
        let sender = go_spawn(&rt, move || a.put("hi", None).map(|_| 1));
        let receiver = go_spawn(&rt, move || b.take(None));
        assert_eq!(sender.take(None), Ok(1));
        assert_eq!(receiver.take(None), Ok("hi"));
        rt.shutdown();
    }

    #[test]
    fn timeouts_withdraw() {
        let rt = Runtime::new(Mode::Faithful);
        let c: Channel<i32> = Channel::new(&rt);
        assert_eq!(c.put(1, Some(Duration::from_millis(10))), Err(Error::Timeout));
        assert_eq!(c.take(Some(Duration::from_millis(10))), Err(Error::Timeout));
        assert_eq!(c.waiting(), (0, 0));
    }

    #[test]
    fn closed_channel() {
        let rt = Runtime::new(Mode::Faithful);
        let c: Channel<i32> = Channel::new(&rt);
        let c2 = c.clone();
        let h = std::thread::spawn(move || c2.take(None));
        std::thread::sleep(Duration::from_millis(10));
        c.close();
        assert_eq!(h.join().unwrap(), Err(Error::ChannelClosed));
        assert_eq!(c.put(1, None), Err(Error::ChannelClosed));
    }

    #[test]
    fn guarded_ops_in_retry_scopes_are_rejected() {
        let rt = Runtime::new(Mode::Guarded);
        let c: Channel<i32> = Channel::new(&rt);
        assert_eq!(rt.transaction(|| c.put(1, None)), Err(Error::IrrevocableInRetryScope));
        let a = crate::atom::Atom::new(&rt, 0);
        assert_eq!(
            a.swap(|x| c.take(None).map(|v| v + x)),
            Err(Error::IrrevocableInRetryScope)
        );
    }
}
