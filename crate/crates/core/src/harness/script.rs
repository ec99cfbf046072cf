//! Building blocks for scenario scripts.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::rngs::StdRng;
use rand::SeedableRng;

use crate::detect::Gate;
use crate::error::Result;
use crate::future::Promise;
use crate::runtime::Runtime;

/// What a script observed, before liveness detectors are consulted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Clean(String),
    Race(String),
}

impl Outcome {
    pub fn check(ok: bool, detail: impl Into<String>) -> Self {
        if ok {
            Outcome::Clean(detail.into())
        } else {
            Outcome::Race(detail.into())
        }
    }
}

pub struct ScenarioCtx {
    pub rt: Runtime,
    pub seed: u64,
}

/// Result slot of a helper unit.
pub struct Joined<T>(Promise<Result<T>>);

impl<T: Clone + Send + 'static> Joined<T> {
    pub fn join(&self) -> Result<T> {
        self.0.deref()?
    }
}

impl ScenarioCtx {
    pub fn gate(&self) -> Arc<Gate> {
        Arc::new(Gate::new(&self.rt))
    }

    pub fn rng(&self, stream: u64) -> StdRng {
        StdRng::seed_from_u64(self.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    /// Runs `body` on a new top-level unit.
    pub fn unit<T, F>(&self, name: &str, body: F) -> Joined<T>
    where
        T: Clone + Send + 'static,
        F: FnOnce() -> Result<T> + Send + 'static,
    {
        let slot = Promise::new(&self.rt);
        let out = slot.clone();
        self.rt.spawn_unit(name, None, move || {
            out.deliver(body());
        });
        Joined(slot)
    }
}

/// Forces a retrying block (swap update function or transaction body) to be
/// re-executed a fixed number of times.
///
/// The block calls [`hit`](Self::hit) after its reads. On each of the first
/// `rounds` attempts this parks the block until the contender has performed
/// one interfering write, which invalidates the attempt.
pub struct ForcedRetries {
    read: Vec<Arc<Gate>>,
    written: Vec<Arc<Gate>>,
    attempts: AtomicUsize,
}

impl ForcedRetries {
    pub fn new(ctx: &ScenarioCtx, rounds: usize) -> Arc<Self> {
        Arc::new(ForcedRetries {
            read: (0..rounds).map(|_| ctx.gate()).collect(),
            written: (0..rounds).map(|_| ctx.gate()).collect(),
            attempts: AtomicUsize::new(0),
        })
    }

    pub fn rounds(&self) -> usize {
        self.read.len()
    }

    pub fn hit(&self) -> Result<()> {
        let k = self.attempts.fetch_add(1, Ordering::SeqCst);
        if k < self.read.len() {
            self.read[k].open();
            self.written[k].wait()?;
        }
        Ok(())
    }

    /// Attempts that reached [`hit`](Self::hit).
    pub fn attempts(&self) -> usize {
        self.attempts.load(Ordering::SeqCst)
    }

    /// Starts the contender unit; `interfere(k)` runs once per round.
    pub fn contend<F>(self: &Arc<Self>, ctx: &ScenarioCtx, interfere: F) -> Joined<()>
    where
        F: Fn(usize) -> Result<()> + Send + 'static,
    {
        let me = self.clone();
        ctx.unit("contender", move || {
            for k in 0..me.read.len() {
                me.read[k].wait()?;
                interfere(k)?;
                me.written[k].open();
            }
            Ok(())
        })
    }

    /// Lets the contender run to completion when the block stopped early.
    pub fn release(&self) {
        for g in &self.read {
            g.open();
        }
    }
}
