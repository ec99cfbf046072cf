//! A runtime offering five concurrency models (atoms, agents, STM refs,
//! futures/promises and rendezvous channels) that can be freely nested in
//! each other, together with a scenario harness that checks which nestings
//! introduce races, deadlocks or livelocks.
//!
//! The runtime has two modes. [`Mode::Faithful`] behaves like the reference
//! implementation these models come from, defects included. [`Mode::Guarded`]
//! adds mitigations: promise delivery inside a transaction is deferred to
//! commit, futures spawned by an aborted transaction are cancelled, and
//! blocking or irrevocable operations are rejected in scopes where they can
//! deadlock or be re-executed.

pub mod agent;
pub mod atom;
pub mod channel;
pub mod context;
pub mod detect;
pub mod error;
pub mod future;
pub mod harness;
pub mod runtime;
pub mod stm;

pub use agent::{agent_await, Agent};
pub use atom::Atom;
pub use channel::{go_spawn, Channel};
pub use context::{defer_until_commit, with_scope, DeferredEffect, EffectKind, ExecutionContext, ObjectId, ScopeKind, UnitId};
pub use detect::{deadlock_probe, watchdog_check, DeadlockVerdict, Gate, RetryKind, WatchdogVerdict};
pub use error::{Error, Result};
pub use future::{future_spawn, BlockingRead, Future, FutureState, Promise};
pub use runtime::{Config, Mode, Runtime};
pub use stm::{transaction_run, Ref};
