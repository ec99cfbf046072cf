//! The scenario programs.
//!
//! Forced schedules use gates only; no script depends on a timing race.

use std::sync::atomic::{AtomicI64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::Rng;

use super::script::{ForcedRetries, Outcome, ScenarioCtx};
use super::{Model, Property, ScenarioSpec, Verdict};
use crate::agent::{agent_await, Agent, AwaitTarget};
use crate::atom::Atom;
use crate::channel::{go_spawn, Channel};
use crate::error::{Error, Result};
use crate::future::{future_spawn, Future, Promise};
use crate::stm::Ref;

use Model::{Agents, Atoms, Channels, FuturesPromises as FutProm, Refs};
use Property::{Liveness, Safety};
use Verdict::{Deadlock, Livelock, Race};

const OK: Verdict = Verdict::Ok;

#[allow(clippy::too_many_arguments)]
fn spec(
    id: &'static str,
    outer: Model,
    inner: Model,
    property: Property,
    faithful: Verdict,
    guarded: Verdict,
    summary: &'static str,
    script: fn(&ScenarioCtx) -> Result<Outcome>,
) -> ScenarioSpec {
    ScenarioSpec {
        id,
        outer,
        inner,
        property,
        summary,
        faithful,
        guarded,
        illustration: false,
        script,
    }
}

fn illustration(mut s: ScenarioSpec) -> ScenarioSpec {
    s.illustration = true;
    s
}

pub(super) fn all() -> Vec<ScenarioSpec> {
    vec![
        // atoms row, safety
        spec("S-atoms-atoms", Atoms, Atoms, Safety, Race, Race,
            "read/unread counters kept in two atoms; a forced interleaving breaks their sum", s_atoms_atoms),
        spec("S-atoms-agents", Atoms, Agents, Safety, Race, Race,
            "send inside a swap; one forced retry sends twice", s_atoms_agents),
        spec("S-atoms-refs", Atoms, Refs, Safety, Race, Race,
            "transaction inside a swap; one forced retry commits twice", s_atoms_refs),
        spec("S-atoms-futprom", Atoms, FutProm, Safety, Race, Race,
            "deliver inside a swap; the retry's deliver is silently ignored", s_atoms_futprom),
        spec("S-atoms-futprom-future", Atoms, FutProm, Safety, Race, Race,
            "future created inside a swap; one forced retry runs its body twice", s_atoms_futprom_future),
        spec("S-atoms-channels", Atoms, Channels, Safety, Race, Race,
            "go block started inside a swap; one forced retry notifies twice", s_atoms_channels),
        // agents row, safety
        spec("S-agents-atoms", Agents, Atoms, Safety, OK, OK, "stress: actions swap a shared atom", |c| {
            stress_atoms(c, Row::Agents)
        }),
        spec("S-agents-agents", Agents, Agents, Safety, OK, OK, "stress: actions send to another agent", |c| {
            stress_agents(c, Row::Agents)
        }),
        spec("S-agents-refs", Agents, Refs, Safety, OK, OK, "stress: actions run transfer transactions", |c| {
            stress_refs(c, Row::Agents)
        }),
        spec("S-agents-futprom", Agents, FutProm, Safety, OK, OK, "stress: actions deliver promises and start futures", |c| {
            stress_futprom(c, Row::Agents)
        }),
        spec("S-agents-channels", Agents, Channels, Safety, OK, OK, "stress: actions put on a channel", |c| {
            stress_channels(c, Row::Agents)
        }),
        // refs row, safety
        spec("S-refs-atoms", Refs, Atoms, Safety, Race, Race,
            "swap inside a transaction; one forced retry swaps twice", s_refs_atoms),
        spec("S-refs-agents", Refs, Agents, Safety, OK, OK,
            "send inside a transaction; five forced retries, one send after commit", s_refs_agents),
        spec("S-refs-refs", Refs, Refs, Safety, OK, OK,
            "nested transaction merged into a retried outer one", s_refs_refs),
        spec("S-refs-futprom", Refs, FutProm, Safety, Race, OK,
            "deliver inside a transaction; one forced retry", s_refs_futprom),
        spec("S-refs-futprom-future", Refs, FutProm, Safety, Race, OK,
            "future created inside a transaction; one forced retry", s_refs_futprom_future),
        spec("S-refs-channels", Refs, Channels, Safety, Race, Verdict::Error("IrrevocableInRetryScope"),
            "put inside a transaction; one forced retry", s_refs_channels),
        // futures row, safety
        spec("S-futures-atoms", FutProm, Atoms, Safety, OK, OK, "stress: futures swap a shared atom", |c| {
            stress_atoms(c, Row::Futures)
        }),
        spec("S-futures-agents", FutProm, Agents, Safety, OK, OK, "stress: futures send to an agent", |c| {
            stress_agents(c, Row::Futures)
        }),
        spec("S-futures-refs", FutProm, Refs, Safety, OK, OK, "stress: futures run transfer transactions", |c| {
            stress_refs(c, Row::Futures)
        }),
        spec("S-futures-futprom", FutProm, FutProm, Safety, OK, OK, "stress: futures deliver promises and start futures", |c| {
            stress_futprom(c, Row::Futures)
        }),
        spec("S-futures-channels", FutProm, Channels, Safety, OK, OK, "stress: futures put on a channel", |c| {
            stress_channels(c, Row::Futures)
        }),
        // channels row, safety
        spec("S-channels-atoms", Channels, Atoms, Safety, OK, OK, "stress: go blocks swap a shared atom", |c| {
            stress_atoms(c, Row::Channels)
        }),
        spec("S-channels-agents", Channels, Agents, Safety, OK, OK, "stress: go blocks send to an agent", |c| {
            stress_agents(c, Row::Channels)
        }),
        spec("S-channels-refs", Channels, Refs, Safety, OK, OK, "stress: go blocks run transfer transactions", |c| {
            stress_refs(c, Row::Channels)
        }),
        spec("S-channels-futprom", Channels, FutProm, Safety, OK, OK, "stress: go blocks deliver promises and start futures", |c| {
            stress_futprom(c, Row::Channels)
        }),
        spec("S-channels-channels", Channels, Channels, Safety, OK, OK, "stress: go blocks put on a channel", |c| {
            stress_channels(c, Row::Channels)
        }),
        // atoms row, liveness
        spec("L-atoms-atoms", Atoms, Atoms, Liveness, OK, OK,
            "two units swap two atoms, each from inside the other's update function", l_atoms_atoms),
        illustration(spec("L-atoms-atoms-same", Atoms, Atoms, Liveness, Livelock, Verdict::Error("ReentrantSwap"),
            "swap on an atom from inside its own update function", l_atoms_atoms_same)),
        spec("L-atoms-agents", Atoms, Agents, Liveness, OK, OK,
            "sends inside contended swaps, awaited outside", l_atoms_agents),
        illustration(spec("L-atoms-agents-feedback", Atoms, Agents, Liveness, Livelock, Verdict::Error("AwaitProhibited"),
            "update function sends an action that swaps the same atom, then awaits it", l_atoms_agents_feedback)),
        spec("L-atoms-refs", Atoms, Refs, Liveness, OK, OK, "transactions inside contended swaps", l_atoms_refs),
        spec("L-atoms-futprom", Atoms, FutProm, Liveness, OK, OK,
            "future read inside a swap that is retried once", l_atoms_futprom),
        spec("L-atoms-channels", Atoms, Channels, Liveness, Deadlock, Deadlock,
            "go block that takes started inside a retried swap; one value is put", l_atoms_channels),
        // agents row, liveness
        spec("L-agents-atoms", Agents, Atoms, Liveness, OK, OK, "actions of two agents swap one atom", l_agents_atoms),
        spec("L-agents-agents", Agents, Agents, Liveness, OK, OK,
            "actions send to another agent; await inside an action is rejected", l_agents_agents),
        spec("L-agents-refs", Agents, Refs, Liveness, OK, OK, "actions of two agents contend on one ref", l_agents_refs),
        spec("L-agents-futprom", Agents, FutProm, Liveness, Deadlock, Verdict::Error("BlockingReadProhibited"),
            "action reads a promise that a later action delivers", l_agents_futprom),
        spec("L-agents-channels", Agents, Channels, Liveness, Deadlock, Deadlock,
            "action puts on a channel whose only taker is a later action", l_agents_channels),
        // refs row, liveness
        spec("L-refs-atoms", Refs, Atoms, Liveness, OK, OK, "contended transactions that swap an atom", l_refs_atoms),
        spec("L-refs-agents", Refs, Agents, Liveness, OK, OK,
            "transactions send to an agent; await inside a transaction is rejected", l_refs_agents),
        spec("L-refs-refs", Refs, Refs, Liveness, OK, OK, "two units contend on one ref", l_refs_refs),
        spec("L-refs-futprom", Refs, FutProm, Liveness, OK, OK,
            "future read inside a transaction that is retried once", l_refs_futprom),
        spec("L-refs-channels", Refs, Channels, Liveness, Deadlock, Deadlock,
            "go block that takes started inside a retried transaction; one value is put", l_refs_channels),
        // futures row, liveness
        spec("L-futures-atoms", FutProm, Atoms, Liveness, OK, OK, "futures swap one atom", l_futures_atoms),
        spec("L-futures-agents", FutProm, Agents, Liveness, Deadlock, Verdict::Error("BlockingReadProhibited"),
            "action reads a future whose body awaits the same agent", l_futures_agents),
        spec("L-futures-refs", FutProm, Refs, Liveness, OK, OK, "futures contend on one ref", l_futures_refs),
        spec("L-futures-futprom", FutProm, FutProm, Liveness, Deadlock, Deadlock,
            "two futures each read the other", l_futures_futprom),
        spec("L-futures-futprom-promise", FutProm, FutProm, Liveness, Deadlock, Deadlock,
            "future reads a promise that is delivered only after the future is read", l_futures_futprom_promise),
        spec("L-futures-channels", FutProm, Channels, Liveness, Deadlock, Deadlock,
            "future takes from a channel whose writer first reads the future", l_futures_channels),
        // channels row, liveness
        spec("L-channels-atoms", Channels, Atoms, Liveness, OK, OK, "go blocks swap one atom", l_channels_atoms),
        spec("L-channels-agents", Channels, Agents, Liveness, Deadlock, Deadlock,
            "action takes from a channel; the writer awaits the agent before putting", l_channels_agents),
        spec("L-channels-refs", Channels, Refs, Liveness, OK, OK, "go blocks contend on one ref", l_channels_refs),
        spec("L-channels-futprom", Channels, FutProm, Liveness, OK, OK,
            "go blocks read a promise and a future delivered by other units", l_channels_futprom),
        spec("L-channels-channels", Channels, Channels, Liveness, Deadlock, Deadlock,
            "two go blocks each take before they put", l_channels_channels),
    ]
}

// ---------------------------------------------------------------------------
// small helpers

fn push(v: &[String], s: impl Into<String>) -> Vec<String> {
    let mut v = v.to_vec();
    v.push(s.into());
    v
}

fn inc(n: &i64) -> Result<i64> {
    Ok(n + 1)
}

fn failed_of<T: Clone + Send + Sync + 'static>(ag: &Agent<T>) -> Result<()> {
    match ag.failed() {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// atoms row, safety

fn s_atoms_atoms(ctx: &ScenarioCtx) -> Result<Outcome> {
    let read = Atom::new(&ctx.rt, 20i64);
    let unread = Atom::new(&ctx.rt, 10i64);
    let (moved, marked, cleared) = (ctx.gate(), ctx.gate(), ctx.gate());

    // Unit 1 marks every unread mail as read.
    let t1 = {
        let (read, unread, moved, marked, cleared) =
            (read.clone(), unread.clone(), moved.clone(), marked.clone(), cleared.clone());
        ctx.unit("mark-all-read", move || {
            let u = unread.deref();
            read.swap(|n| Ok(n + u))?;
            moved.open();
            marked.wait()?;
            unread.reset(0);
            cleared.open();
            Ok(())
        })
    };
    // Unit 2 marks one read mail as unread.
    let t2 = {
        let (read, unread, moved, marked) = (read.clone(), unread.clone(), moved.clone(), marked.clone());
        ctx.unit("mark-one-unread", move || {
            moved.wait()?;
            read.swap(|n| Ok(n - 1))?;
            unread.swap(inc)?;
            marked.open();
            Ok(())
        })
    };
    t1.join()?;
    t2.join()?;
    cleared.wait()?;
    let (r, u) = (read.deref(), unread.deref());
    Ok(Outcome::check(r + u == 30, format!("read {r} + unread {u} = {}, expected 30", r + u)))
}

fn s_atoms_agents(ctx: &ScenarioCtx) -> Result<Outcome> {
    let notifications = Agent::new(&ctx.rt, Vec::<String>::new());
    let unread = Atom::new(&ctx.rt, 0i64);
    let forced = ForcedRetries::new(ctx, 1);
    let contender = {
        let unread = unread.clone();
        forced.contend(ctx, move |_| unread.swap(inc).map(drop))
    };
    let res = unread.swap(|n| {
        notifications.send(|m| Ok(push(m, "New mail!")))?;
        forced.hit()?;
        Ok(n + 1)
    });
    forced.release();
    contender.join()?;
    res?;
    notifications.await_for(None)?;
    let sent = notifications.deref().len();
    Ok(Outcome::check(
        sent == 1,
        format!("{sent} sends for 1 committed swap ({} attempts)", forced.attempts()),
    ))
}

fn s_atoms_refs(ctx: &ScenarioCtx) -> Result<Outcome> {
    let rt = &ctx.rt;
    let unread = Atom::new(rt, 10i64);
    let read_count = Ref::new(rt, 0i64);
    let forced = ForcedRetries::new(ctx, 1);
    let contender = {
        let unread = unread.clone();
        forced.contend(ctx, move |_| unread.swap(inc).map(drop))
    };
    let res = unread.swap(|n| {
        rt.transaction(|| read_count.alter(inc))?;
        forced.hit()?;
        Ok(n - 1)
    });
    forced.release();
    contender.join()?;
    res?;
    let rc = read_count.committed();
    Ok(Outcome::check(
        rc == 1,
        format!("read count incremented {rc} times for 1 committed decrement of unread"),
    ))
}

fn s_atoms_futprom(ctx: &ScenarioCtx) -> Result<Outcome> {
    let a = Atom::new(&ctx.rt, 0i64);
    let p = Promise::new(&ctx.rt);
    let deliveries = Mutex::new(Vec::new());
    let forced = ForcedRetries::new(ctx, 1);
    let contender = {
        let a = a.clone();
        forced.contend(ctx, move |_| {
            a.reset(10);
            Ok(())
        })
    };
    let res = a.swap(|x| {
        deliveries.lock().unwrap().push(p.deliver(x + 1));
        forced.hit()?;
        Ok(x + 1)
    });
    forced.release();
    contender.join()?;
    res?;
    let (held, committed) = (p.peek(), a.deref());
    let deliveries = deliveries.into_inner().unwrap();
    Ok(Outcome::check(
        held == Some(committed),
        format!("promise holds {held:?}, atom committed {committed}, deliveries {deliveries:?}"),
    ))
}

fn s_atoms_futprom_future(ctx: &ScenarioCtx) -> Result<Outcome> {
    let rt = &ctx.rt;
    let a = Atom::new(rt, 0i64);
    let runs = Arc::new(AtomicUsize::new(0));
    let started: Mutex<Vec<Future<()>>> = Mutex::new(Vec::new());
    let forced = ForcedRetries::new(ctx, 1);
    let contender = {
        let a = a.clone();
        forced.contend(ctx, move |_| a.swap(inc).map(drop))
    };
    let res = a.swap(|x| {
        let runs = runs.clone();
        started.lock().unwrap().push(future_spawn(rt, move || {
            runs.fetch_add(1, Ordering::SeqCst);
            Ok(())
        }));
        forced.hit()?;
        Ok(x + 1)
    });
    forced.release();
    contender.join()?;
    res?;
    for f in started.into_inner().unwrap() {
        f.deref()?;
    }
    let n = runs.load(Ordering::SeqCst);
    Ok(Outcome::check(n == 1, format!("future body ran {n} times for 1 committed swap")))
}

fn s_atoms_channels(ctx: &ScenarioCtx) -> Result<Outcome> {
    let rt = &ctx.rt;
    let a = Atom::new(rt, 0i64);
    let notifications: Channel<String> = Channel::new(rt);
    let spawned = AtomicUsize::new(0);
    let forced = ForcedRetries::new(ctx, 1);
    let contender = {
        let a = a.clone();
        forced.contend(ctx, move |_| a.swap(inc).map(drop))
    };
    let res = a.swap(|x| {
        let c = notifications.clone();
        go_spawn(rt, move || c.put("New mail!".to_string(), None));
        spawned.fetch_add(1, Ordering::SeqCst);
        forced.hit()?;
        Ok(x + 1)
    });
    forced.release();
    contender.join()?;
    res?;
    let n = spawned.load(Ordering::SeqCst);
    for _ in 0..n {
        notifications.take(None)?;
    }
    Ok(Outcome::check(n == 1, format!("{n} notifications for 1 committed swap")))
}

// ---------------------------------------------------------------------------
// refs row, safety

fn s_refs_atoms(ctx: &ScenarioCtx) -> Result<Outcome> {
    let rt = &ctx.rt;
    let r = Ref::new(rt, 0i64);
    let hits = Atom::new(rt, 0i64);
    let forced = ForcedRetries::new(ctx, 1);
    let contender = {
        let (rt, r) = (rt.clone(), r.clone());
        forced.contend(ctx, move |_| rt.transaction(|| r.alter(|v| Ok(v + 10))).map(drop))
    };
    let res = rt.transaction(|| {
        let v = r.deref()?;
        hits.swap(inc)?;
        forced.hit()?;
        r.set(v + 1)
    });
    forced.release();
    contender.join()?;
    res?;
    let n = hits.deref();
    Ok(Outcome::check(n == 1, format!("atom swapped {n} times for 1 committed transaction")))
}

#[derive(Debug, Clone)]
struct Mail {
    subject: String,
    archived: bool,
    touched: u32,
}

fn s_refs_agents(ctx: &ScenarioCtx) -> Result<Outcome> {
    let rt = &ctx.rt;
    let notifications = Agent::new(rt, Vec::<String>::new());
    let mail = Ref::new(
        rt,
        Mail {
            subject: "Hi".into(),
            archived: false,
            touched: 0,
        },
    );
    let forced = ForcedRetries::new(ctx, 5);
    let contender = {
        let (rt, mail) = (rt.clone(), mail.clone());
        forced.contend(ctx, move |_| {
            rt.transaction(|| {
                mail.alter(|m| {
                    let mut m = m.clone();
                    m.touched += 1;
                    Ok(m)
                })
            })
            .map(drop)
        })
    };
    let res = rt.transaction(|| {
        let mut m = mail.deref()?;
        m.archived = true;
        mail.set(m)?;
        let seen = mail.clone();
        notifications.send(move |msgs| {
            let m = seen.committed();
            Ok(push(msgs, format!("Archived mail {} (archived={})", m.subject, m.archived)))
        })?;
        forced.hit()
    });
    forced.release();
    contender.join()?;
    res?;
    notifications.await_for(None)?;
    let msgs = notifications.deref();
    let ok = msgs == ["Archived mail Hi (archived=true)"] && forced.attempts() == 6;
    Ok(Outcome::check(
        ok,
        format!("{} sends over {} attempts: {msgs:?}", msgs.len(), forced.attempts()),
    ))
}

fn s_refs_refs(ctx: &ScenarioCtx) -> Result<Outcome> {
    let rt = &ctx.rt;
    let a = Ref::new(rt, 0i64);
    let b = Ref::new(rt, 0i64);
    let forced = ForcedRetries::new(ctx, 1);
    let contender = {
        let (rt, a) = (rt.clone(), a.clone());
        forced.contend(ctx, move |_| rt.transaction(|| a.alter(|v| Ok(v + 10))).map(drop))
    };
    let before = rt.stm_commits();
    let res = rt.transaction(|| {
        let va = a.deref()?;
        rt.transaction(|| b.alter(inc))?;
        forced.hit()?;
        a.set(va + 1)
    });
    forced.release();
    contender.join()?;
    res?;
    let commits = rt.stm_commits() - before;
    let (va, vb) = (a.committed(), b.committed());
    Ok(Outcome::check(
        va == 11 && vb == 1 && commits == 2,
        format!("a = {va}, b = {vb}, {commits} commits including the contender's"),
    ))
}

fn s_refs_futprom(ctx: &ScenarioCtx) -> Result<Outcome> {
    let rt = &ctx.rt;
    let r = Ref::new(rt, 0i64);
    let p = Promise::new(rt);
    let forced = ForcedRetries::new(ctx, 1);
    let contender = {
        let (rt, r) = (rt.clone(), r.clone());
        forced.contend(ctx, move |_| rt.transaction(|| r.set(10)).map(drop))
    };
    let res = rt.transaction(|| {
        let v = r.deref()?;
        p.deliver(v + 1);
        forced.hit()?;
        r.set(v + 1)
    });
    forced.release();
    contender.join()?;
    res?;
    let (held, committed) = (p.peek(), r.committed());
    Ok(Outcome::check(
        held == Some(committed),
        format!("promise holds {held:?}, ref committed {committed}"),
    ))
}

fn s_refs_futprom_future(ctx: &ScenarioCtx) -> Result<Outcome> {
    let rt = &ctx.rt;
    let r = Ref::new(rt, 0i64);
    let runs = Arc::new(AtomicUsize::new(0));
    let release = ctx.gate();
    let started: Mutex<Vec<Future<()>>> = Mutex::new(Vec::new());
    let forced = ForcedRetries::new(ctx, 1);
    let contender = {
        let (rt, r) = (rt.clone(), r.clone());
        forced.contend(ctx, move |_| rt.transaction(|| r.set(10)).map(drop))
    };
    let res = rt.transaction(|| {
        let v = r.deref()?;
        let (runs, release) = (runs.clone(), release.clone());
        started.lock().unwrap().push(future_spawn(rt, move || {
            release.wait()?;
            crate::future::cancellation_point()?;
            runs.fetch_add(1, Ordering::SeqCst);
            Ok(())
        }));
        forced.hit()?;
        r.set(v + 1)
    });
    forced.release();
    contender.join()?;
    res?;
    release.open();
    let mut cancelled = 0;
    for f in started.into_inner().unwrap() {
        match f.deref() {
            Ok(()) => {}
            Err(Error::FutureCancelled) => cancelled += 1,
            Err(e) => return Err(e),
        }
    }
    let n = runs.load(Ordering::SeqCst);
    Ok(Outcome::check(
        n == 1,
        format!("future body ran {n} times for 1 commit, {cancelled} cancelled"),
    ))
}

fn s_refs_channels(ctx: &ScenarioCtx) -> Result<Outcome> {
    let rt = &ctx.rt;
    let r = Ref::new(rt, 0i64);
    let c: Channel<i64> = Channel::new(rt);
    let receiver = {
        let c = c.clone();
        ctx.unit("receiver", move || {
            let mut got = Vec::new();
            while let Ok(v) = c.take(None) {
                got.push(v);
            }
            Ok(got)
        })
    };
    let forced = ForcedRetries::new(ctx, 1);
    let contender = {
        let (rt, r) = (rt.clone(), r.clone());
        forced.contend(ctx, move |_| rt.transaction(|| r.set(10)).map(drop))
    };
    let res = rt.transaction(|| {
        let v = r.deref()?;
        c.put(v + 1, None)?;
        forced.hit()?;
        r.set(v + 1)
    });
    forced.release();
    c.close();
    contender.join()?;
    let got = receiver.join()?;
    res?;
    Ok(Outcome::check(
        got.len() == 1,
        format!("receiver got {got:?} for 1 committed transaction"),
    ))
}

// ---------------------------------------------------------------------------
// stress workloads for the rows whose cells are expected to be safe

const UNITS: usize = 4;
const OPS: usize = 250;

#[derive(Clone, Copy)]
enum Row {
    Agents,
    Futures,
    Channels,
}

type Op = Arc<dyn Fn(usize, i64) -> Result<()> + Send + Sync>;

fn amounts(ctx: &ScenarioCtx, unit: usize) -> Vec<i64> {
    let mut rng = ctx.rng(unit as u64 + 1);
    (0..OPS).map(|_| rng.gen_range(1..=9)).collect()
}

fn all_amounts(ctx: &ScenarioCtx) -> Vec<i64> {
    (0..UNITS).flat_map(|u| amounts(ctx, u)).collect()
}

/// Runs `op(i, amount)` for every seeded amount on `UNITS` units of the
/// row's kind and waits for all of them.
fn drive(ctx: &ScenarioCtx, row: Row, op: Op) -> Result<()> {
    let rt = &ctx.rt;
    let work = |u: usize| {
        let (op, am) = (op.clone(), amounts(ctx, u));
        move || -> Result<()> {
            for (i, x) in am.into_iter().enumerate() {
                op(i, x)?;
            }
            Ok(())
        }
    };
    match row {
        Row::Futures => {
            let fs: Vec<Future<()>> = (0..UNITS).map(|u| future_spawn(rt, work(u))).collect();
            for f in fs {
                f.deref()?;
            }
        }
        Row::Channels => {
            let cs: Vec<Channel<()>> = (0..UNITS).map(|u| go_spawn(rt, work(u))).collect();
            for c in cs {
                c.take(None).map_err(|e| c.close_error().unwrap_or(e))?;
            }
        }
        Row::Agents => {
            let ags: Vec<Agent<u64>> = (0..UNITS).map(|_| Agent::new(rt, 0)).collect();
            for (u, ag) in ags.iter().enumerate() {
                for (i, x) in amounts(ctx, u).into_iter().enumerate() {
                    let op = op.clone();
                    ag.send(move |n| {
                        op(i, x)?;
                        Ok(n + 1)
                    })?;
                }
            }
            let targets: Vec<&dyn AwaitTarget> = ags.iter().map(|a| a as &dyn AwaitTarget).collect();
            agent_await(rt, &targets, None)?;
            for ag in &ags {
                failed_of(ag)?;
                if ag.deref() != OPS as u64 {
                    return Err(Error::raised(format!("agent ran {} of {OPS} actions", ag.deref())));
                }
            }
        }
    }
    Ok(())
}

fn stress_atoms(ctx: &ScenarioCtx, row: Row) -> Result<Outcome> {
    let total = Atom::new(&ctx.rt, 0i64);
    let t = total.clone();
    drive(ctx, row, Arc::new(move |_, x| t.swap(|v| Ok(v + x)).map(drop)))?;
    let want: i64 = all_amounts(ctx).iter().sum();
    let got = total.deref();
    Ok(Outcome::check(got == want, format!("atom sum {got}, expected {want}")))
}

fn stress_agents(ctx: &ScenarioCtx, row: Row) -> Result<Outcome> {
    let target = Agent::new(&ctx.rt, 0i64);
    let t = target.clone();
    drive(ctx, row, Arc::new(move |_, x| t.send(move |v| Ok(v + x))))?;
    target.await_for(None)?;
    failed_of(&target)?;
    let want: i64 = all_amounts(ctx).iter().sum();
    let got = target.deref();
    Ok(Outcome::check(
        got == want && target.processed() == (UNITS * OPS) as u64,
        format!("agent sum {got}, expected {want}, {} actions", target.processed()),
    ))
}

fn stress_refs(ctx: &ScenarioCtx, row: Row) -> Result<Outcome> {
    const START: i64 = 1_000_000;
    let rt = ctx.rt.clone();
    let from = Ref::new(&rt, START);
    let to = Ref::new(&rt, 0i64);
    let (f, t) = (from.clone(), to.clone());
    drive(
        ctx,
        row,
        Arc::new(move |_, x| {
            rt.transaction(|| {
                f.alter(|v| Ok(v - x))?;
                t.alter(|v| Ok(v + x))
            })
            .map(drop)
        }),
    )?;
    let want: i64 = all_amounts(ctx).iter().sum();
    let (a, b) = (from.committed(), to.committed());
    Ok(Outcome::check(
        a + b == START && b == want,
        format!("from {a} + to {b} = {}, moved {b} of {want}", a + b),
    ))
}

fn stress_futprom(ctx: &ScenarioCtx, row: Row) -> Result<Outcome> {
    let rt = ctx.rt.clone();
    let sum = Arc::new(AtomicI64::new(0));
    let futures: Arc<Mutex<Vec<Future<i64>>>> = Arc::default();
    let (s, fl) = (sum.clone(), futures.clone());
    drive(
        ctx,
        row,
        Arc::new(move |i, x| {
            let p = Promise::new(&rt);
            if !p.deliver(x) || p.deliver(x + 1) {
                return Err(Error::raised("promise accepted a second delivery"));
            }
            s.fetch_add(p.peek().unwrap_or(0), Ordering::SeqCst);
            if i % 25 == 0 {
                fl.lock().unwrap().push(future_spawn(&rt, move || Ok(x)));
            }
            Ok(())
        }),
    )?;
    let all = all_amounts(ctx);
    let want: i64 = all.iter().sum();
    let want_f: i64 = all.chunks(OPS).flat_map(|c| c.iter().step_by(25)).sum();
    let mut got_f = 0;
    for f in futures.lock().unwrap().iter() {
        got_f += f.deref()?;
    }
    let got = sum.load(Ordering::SeqCst);
    Ok(Outcome::check(
        got == want && got_f == want_f,
        format!("promise sum {got} of {want}, future sum {got_f} of {want_f}"),
    ))
}

fn stress_channels(ctx: &ScenarioCtx, row: Row) -> Result<Outcome> {
    let c: Channel<i64> = Channel::new(&ctx.rt);
    let consumer = {
        let c = c.clone();
        ctx.unit("consumer", move || (0..UNITS * OPS).map(|_| c.take(None)).collect::<Result<Vec<i64>>>())
    };
    let p = c.clone();
    drive(ctx, row, Arc::new(move |_, x| p.put(x, None)))?;
    let mut got = consumer.join()?;
    let mut want = all_amounts(ctx);
    got.sort_unstable();
    want.sort_unstable();
    Ok(Outcome::check(
        got == want,
        format!("received {} values, multiset equal: {}", got.len(), got == want),
    ))
}

// ---------------------------------------------------------------------------
// atoms row, liveness

fn l_atoms_atoms(ctx: &ScenarioCtx) -> Result<Outcome> {
    let a = Atom::new(&ctx.rt, 0i64);
    let b = Atom::new(&ctx.rt, 0i64);
    let cross = |x: &Atom<i64>, y: &Atom<i64>, name: &str| {
        let (x, y) = (x.clone(), y.clone());
        ctx.unit(name, move || {
            for _ in 0..50 {
                x.swap(|v| {
                    y.swap(inc)?;
                    Ok(v + 1)
                })?;
            }
            Ok(())
        })
    };
    let t1 = cross(&a, &b, "a-then-b");
    let t2 = cross(&b, &a, "b-then-a");
    t1.join()?;
    t2.join()?;
    Ok(Outcome::Clean(format!("terminated with a = {}, b = {}", a.deref(), b.deref())))
}

fn l_atoms_atoms_same(ctx: &ScenarioCtx) -> Result<Outcome> {
    let a = Atom::new(&ctx.rt, 0i64);
    a.swap(|x| {
        a.swap(inc)?;
        Ok(x + 1)
    })?;
    Ok(Outcome::Clean(format!("terminated with {}", a.deref())))
}

fn l_atoms_agents(ctx: &ScenarioCtx) -> Result<Outcome> {
    let a = Atom::new(&ctx.rt, 0i64);
    let ag = Agent::new(&ctx.rt, 0i64);
    let units: Vec<_> = (0..2)
        .map(|k| {
            let (a, ag) = (a.clone(), ag.clone());
            ctx.unit(&format!("sender{k}"), move || {
                for _ in 0..50 {
                    a.swap(|x| {
                        ag.send(|s| Ok(s + 1))?;
                        Ok(x + 1)
                    })?;
                }
                Ok(())
            })
        })
        .collect();
    for u in units {
        u.join()?;
    }
    ag.await_for(None)?;
    Ok(Outcome::Clean(format!("{} actions ran for 100 swaps", ag.deref())))
}

fn l_atoms_agents_feedback(ctx: &ScenarioCtx) -> Result<Outcome> {
    let a = Atom::new(&ctx.rt, 0i64);
    let ag = Agent::new(&ctx.rt, 0i64);
    a.swap(|x| {
        let a2 = a.clone();
        ag.send(move |_| a2.swap(inc))?;
        ag.await_for(None)?;
        Ok(x + 1)
    })?;
    Ok(Outcome::Clean("terminated".into()))
}

fn l_atoms_refs(ctx: &ScenarioCtx) -> Result<Outcome> {
    let a = Atom::new(&ctx.rt, 0i64);
    let r = Ref::new(&ctx.rt, 0i64);
    let units: Vec<_> = (0..2)
        .map(|k| {
            let (rt, a, r) = (ctx.rt.clone(), a.clone(), r.clone());
            ctx.unit(&format!("swapper{k}"), move || {
                for _ in 0..50 {
                    a.swap(|x| {
                        rt.transaction(|| r.alter(inc))?;
                        Ok(x + 1)
                    })?;
                }
                Ok(())
            })
        })
        .collect();
    for u in units {
        u.join()?;
    }
    Ok(Outcome::Clean(format!("terminated with a = {}, r = {}", a.deref(), r.committed())))
}

fn l_atoms_futprom(ctx: &ScenarioCtx) -> Result<Outcome> {
    let a = Atom::new(&ctx.rt, 0i64);
    let f = future_spawn(&ctx.rt, || Ok(5i64));
    let forced = ForcedRetries::new(ctx, 1);
    let contender = {
        let a = a.clone();
        forced.contend(ctx, move |_| {
            a.reset(100);
            Ok(())
        })
    };
    let res = a.swap(|x| {
        let v = f.deref()?;
        forced.hit()?;
        Ok(x + v)
    });
    forced.release();
    contender.join()?;
    res?;
    Ok(Outcome::Clean(format!("terminated with {}", a.deref())))
}

/// Starts a taking go block inside a retried block and then puts exactly one
/// value: the go block started by the aborted attempt never completes.
fn leaked_taker(ctx: &ScenarioCtx, in_txn: bool) -> Result<Outcome> {
    let rt = &ctx.rt;
    let c: Channel<String> = Channel::new(rt);
    let spawn_taker = || {
        let c = c.clone();
        go_spawn(rt, move || c.take(None));
    };
    let forced = ForcedRetries::new(ctx, 1);
    if in_txn {
        let r = Ref::new(rt, 0i64);
        let contender = {
            let (rt, r) = (rt.clone(), r.clone());
            forced.contend(ctx, move |_| rt.transaction(|| r.alter(inc)).map(drop))
        };
        let res = rt.transaction(|| {
            let v = r.deref()?;
            spawn_taker();
            forced.hit()?;
            r.set(v + 1)
        });
        forced.release();
        contender.join()?;
        res?;
    } else {
        let a = Atom::new(rt, 0i64);
        let contender = {
            let a = a.clone();
            forced.contend(ctx, move |_| a.swap(inc).map(drop))
        };
        let res = a.swap(|x| {
            spawn_taker();
            forced.hit()?;
            Ok(x + 1)
        });
        forced.release();
        contender.join()?;
        res?;
    }
    c.put("New mail!".into(), None)?;
    Ok(Outcome::Clean("one notification delivered".into()))
}

fn l_atoms_channels(ctx: &ScenarioCtx) -> Result<Outcome> {
    leaked_taker(ctx, false)
}

// ---------------------------------------------------------------------------
// agents row, liveness

fn l_agents_atoms(ctx: &ScenarioCtx) -> Result<Outcome> {
    let a = Atom::new(&ctx.rt, 0i64);
    let ags = [Agent::new(&ctx.rt, 0i64), Agent::new(&ctx.rt, 0i64)];
    for _ in 0..100 {
        for ag in &ags {
            let a = a.clone();
            ag.send(move |s| {
                a.swap(inc)?;
                Ok(s + 1)
            })?;
        }
    }
    agent_await(&ctx.rt, &[&ags[0], &ags[1]], None)?;
    Ok(Outcome::Clean(format!("atom at {}", a.deref())))
}

fn l_agents_agents(ctx: &ScenarioCtx) -> Result<Outcome> {
    let rt = &ctx.rt;
    let first = Agent::new(rt, 0i64);
    let second = Agent::new(rt, 0i64);
    let rejected = Arc::new(AtomicUsize::new(0));
    for _ in 0..20 {
        let (rt2, second, rejected) = (rt.clone(), second.clone(), rejected.clone());
        first.send(move |s| {
            second.send(|t| Ok(t + 1))?;
            if agent_await(&rt2, &[&second], None) == Err(Error::AwaitProhibited) {
                rejected.fetch_add(1, Ordering::SeqCst);
            }
            Ok(s + 1)
        })?;
    }
    first.await_for(None)?;
    second.await_for(None)?;
    failed_of(&first)?;
    Ok(Outcome::Clean(format!(
        "{} forwarded actions, {} awaits rejected inside actions",
        second.deref(),
        rejected.load(Ordering::SeqCst)
    )))
}

fn l_agents_refs(ctx: &ScenarioCtx) -> Result<Outcome> {
    let r = Ref::new(&ctx.rt, 0i64);
    let ags = [Agent::new(&ctx.rt, 0i64), Agent::new(&ctx.rt, 0i64)];
    for _ in 0..100 {
        for ag in &ags {
            let (rt, r) = (ctx.rt.clone(), r.clone());
            ag.send(move |s| {
                rt.transaction(|| r.alter(inc))?;
                Ok(s + 1)
            })?;
        }
    }
    agent_await(&ctx.rt, &[&ags[0], &ags[1]], None)?;
    for ag in &ags {
        failed_of(ag)?;
    }
    Ok(Outcome::Clean(format!("ref at {}", r.committed())))
}

fn l_agents_futprom(ctx: &ScenarioCtx) -> Result<Outcome> {
    let p: Promise<i64> = Promise::new(&ctx.rt);
    let ag = Agent::new(&ctx.rt, 0i64);
    let reader = p.clone();
    ag.send(move |_| reader.deref())?;
    let deliverer = p.clone();
    // Rejected when the first action has already failed.
    let _ = ag.send(move |s| {
        deliverer.deliver(1);
        Ok(*s)
    });
    ag.await_for(None)?;
    failed_of(&ag)?;
    Ok(Outcome::Clean(format!("agent state {}", ag.deref())))
}

fn l_agents_channels(ctx: &ScenarioCtx) -> Result<Outcome> {
    let c: Channel<i64> = Channel::new(&ctx.rt);
    let ag = Agent::new(&ctx.rt, 0i64);
    let putter = c.clone();
    ag.send(move |s| {
        putter.put(1, None)?;
        Ok(*s)
    })?;
    let taker = c.clone();
    ag.send(move |_| taker.take(None))?;
    ag.await_for(None)?;
    failed_of(&ag)?;
    Ok(Outcome::Clean(format!("agent state {}", ag.deref())))
}

// ---------------------------------------------------------------------------
// refs row, liveness

fn l_refs_atoms(ctx: &ScenarioCtx) -> Result<Outcome> {
    let r = Ref::new(&ctx.rt, 0i64);
    let a = Atom::new(&ctx.rt, 0i64);
    let units: Vec<_> = (0..2)
        .map(|k| {
            let (rt, r, a) = (ctx.rt.clone(), r.clone(), a.clone());
            ctx.unit(&format!("txn{k}"), move || {
                for _ in 0..50 {
                    rt.transaction(|| {
                        a.swap(inc)?;
                        r.alter(inc)
                    })?;
                }
                Ok(())
            })
        })
        .collect();
    for u in units {
        u.join()?;
    }
    Ok(Outcome::Clean(format!("ref {}, atom {}", r.committed(), a.deref())))
}

fn l_refs_agents(ctx: &ScenarioCtx) -> Result<Outcome> {
    let r = Ref::new(&ctx.rt, 0i64);
    let ag = Agent::new(&ctx.rt, 0i64);
    let rejected = Arc::new(AtomicUsize::new(0));
    let units: Vec<_> = (0..2)
        .map(|k| {
            let (rt, r, ag, rejected) = (ctx.rt.clone(), r.clone(), ag.clone(), rejected.clone());
            ctx.unit(&format!("txn{k}"), move || {
                for _ in 0..50 {
                    rt.transaction(|| {
                        r.alter(inc)?;
                        ag.send(|s| Ok(s + 1))?;
                        if ag.await_for(None) == Err(Error::AwaitProhibited) {
                            rejected.fetch_add(1, Ordering::SeqCst);
                        }
                        Ok(())
                    })?;
                }
                Ok(())
            })
        })
        .collect();
    for u in units {
        u.join()?;
    }
    ag.await_for(None)?;
    Ok(Outcome::Clean(format!(
        "{} sends after commit, awaits rejected {} times",
        ag.deref(),
        rejected.load(Ordering::SeqCst)
    )))
}

fn l_refs_refs(ctx: &ScenarioCtx) -> Result<Outcome> {
    let r = Ref::new(&ctx.rt, 0i64);
    let units: Vec<_> = (0..2)
        .map(|k| {
            let (rt, r) = (ctx.rt.clone(), r.clone());
            ctx.unit(&format!("txn{k}"), move || {
                for _ in 0..200 {
                    rt.transaction(|| r.alter(inc))?;
                }
                Ok(())
            })
        })
        .collect();
    for u in units {
        u.join()?;
    }
    let v = r.committed();
    if v != 400 {
        return Err(Error::raised(format!("ref at {v}, expected 400")));
    }
    Ok(Outcome::Clean(format!("ref at {v} after {} retries", ctx.rt.stm_retries())))
}

fn l_refs_futprom(ctx: &ScenarioCtx) -> Result<Outcome> {
    let rt = &ctx.rt;
    let r = Ref::new(rt, 0i64);
    let f = future_spawn(rt, || Ok(3i64));
    let forced = ForcedRetries::new(ctx, 1);
    let contender = {
        let (rt, r) = (rt.clone(), r.clone());
        forced.contend(ctx, move |_| rt.transaction(|| r.alter(|v| Ok(v + 10))).map(drop))
    };
    let res = rt.transaction(|| {
        let v = r.deref()?;
        let w = f.deref()?;
        forced.hit()?;
        r.set(v + w)
    });
    forced.release();
    contender.join()?;
    res?;
    Ok(Outcome::Clean(format!("ref at {}", r.committed())))
}

fn l_refs_channels(ctx: &ScenarioCtx) -> Result<Outcome> {
    leaked_taker(ctx, true)
}

// ---------------------------------------------------------------------------
// futures row, liveness

fn l_futures_atoms(ctx: &ScenarioCtx) -> Result<Outcome> {
    let a = Atom::new(&ctx.rt, 0i64);
    let fs: Vec<Future<()>> = (0..UNITS)
        .map(|_| {
            let a = a.clone();
            future_spawn(&ctx.rt, move || {
                for _ in 0..100 {
                    a.swap(inc)?;
                }
                Ok(())
            })
        })
        .collect();
    for f in fs {
        f.deref()?;
    }
    Ok(Outcome::Clean(format!("atom at {}", a.deref())))
}

fn l_futures_agents(ctx: &ScenarioCtx) -> Result<Outcome> {
    let rt = &ctx.rt;
    let mail_ui = Agent::new(rt, Vec::<String>::new());
    let go = ctx.gate();
    let thumbnail = {
        let (ui, go) = (mail_ui.clone(), go.clone());
        future_spawn(rt, move || {
            go.wait()?;
            ui.send(|m| Ok(push(m, "thumbnail")))?;
            ui.await_for(None)?;
            Ok(true)
        })
    };
    let t = thumbnail.clone();
    mail_ui.send(move |m| {
        let ready = t.deref()?;
        Ok(push(m, format!("show thumbnail: {ready}")))
    })?;
    go.open();
    // Fails in guarded mode once the agent has failed.
    let _ = thumbnail.deref();
    failed_of(&mail_ui)?;
    Ok(Outcome::Clean(format!("{:?}", mail_ui.deref())))
}

fn l_futures_refs(ctx: &ScenarioCtx) -> Result<Outcome> {
    let r = Ref::new(&ctx.rt, 0i64);
    let fs: Vec<Future<()>> = (0..UNITS)
        .map(|_| {
            let (rt, r) = (ctx.rt.clone(), r.clone());
            future_spawn(&ctx.rt, move || {
                for _ in 0..50 {
                    rt.transaction(|| r.alter(inc))?;
                }
                Ok(())
            })
        })
        .collect();
    for f in fs {
        f.deref()?;
    }
    Ok(Outcome::Clean(format!("ref at {}", r.committed())))
}

fn l_futures_futprom(ctx: &ScenarioCtx) -> Result<Outcome> {
    let rt = &ctx.rt;
    let slot: Arc<Mutex<Option<Future<i64>>>> = Arc::default();
    let go = ctx.gate();
    let first = {
        let (slot, go) = (slot.clone(), go.clone());
        future_spawn(rt, move || {
            go.wait()?;
            let second = slot.lock().unwrap().clone().expect("second future registered");
            second.deref()
        })
    };
    let second = {
        let first = first.clone();
        future_spawn(rt, move || first.deref().map(|v| v + 1))
    };
    *slot.lock().unwrap() = Some(second);
    go.open();
    Ok(Outcome::Clean("futures started".into()))
}

fn l_futures_futprom_promise(ctx: &ScenarioCtx) -> Result<Outcome> {
    let p: Promise<i64> = Promise::new(&ctx.rt);
    let reader = p.clone();
    let f = future_spawn(&ctx.rt, move || reader.deref().map(|v| v + 1));
    let v = f.deref()?;
    p.deliver(1);
    Ok(Outcome::Clean(format!("future resolved to {v}")))
}

fn l_futures_channels(ctx: &ScenarioCtx) -> Result<Outcome> {
    let c: Channel<i64> = Channel::new(&ctx.rt);
    let taker = c.clone();
    let f = future_spawn(&ctx.rt, move || taker.take(None));
    let writer = go_spawn(&ctx.rt, move || {
        let seen = f.deref()?;
        c.put(seen + 1, None)
    });
    writer.take(None).map_err(|e| writer.close_error().unwrap_or(e))?;
    Ok(Outcome::Clean("writer finished".into()))
}

// ---------------------------------------------------------------------------
// channels row, liveness

fn l_channels_atoms(ctx: &ScenarioCtx) -> Result<Outcome> {
    let a = Atom::new(&ctx.rt, 0i64);
    let cs: Vec<Channel<()>> = (0..UNITS)
        .map(|_| {
            let a = a.clone();
            go_spawn(&ctx.rt, move || {
                for _ in 0..100 {
                    a.swap(inc)?;
                }
                Ok(())
            })
        })
        .collect();
    for c in cs {
        c.take(None).map_err(|e| c.close_error().unwrap_or(e))?;
    }
    Ok(Outcome::Clean(format!("atom at {}", a.deref())))
}

fn l_channels_agents(ctx: &ScenarioCtx) -> Result<Outcome> {
    let c: Channel<String> = Channel::new(&ctx.rt);
    let ag = Agent::new(&ctx.rt, String::new());
    let taker = c.clone();
    ag.send(move |_| taker.take(None))?;
    let writer = {
        let ag = ag.clone();
        go_spawn(&ctx.rt, move || {
            ag.await_for(None)?;
            c.put("test".into(), None)
        })
    };
    writer.take(None).map_err(|e| writer.close_error().unwrap_or(e))?;
    Ok(Outcome::Clean(format!("agent holds {:?}", ag.deref())))
}

fn l_channels_refs(ctx: &ScenarioCtx) -> Result<Outcome> {
    let r = Ref::new(&ctx.rt, 0i64);
    let cs: Vec<Channel<()>> = (0..UNITS)
        .map(|_| {
            let (rt, r) = (ctx.rt.clone(), r.clone());
            go_spawn(&ctx.rt, move || {
                for _ in 0..50 {
                    rt.transaction(|| r.alter(inc))?;
                }
                Ok(())
            })
        })
        .collect();
    for c in cs {
        c.take(None).map_err(|e| c.close_error().unwrap_or(e))?;
    }
    Ok(Outcome::Clean(format!("ref at {}", r.committed())))
}

fn l_channels_futprom(ctx: &ScenarioCtx) -> Result<Outcome> {
    let rt = &ctx.rt;
    let p: Promise<i64> = Promise::new(rt);
    let f = future_spawn(rt, || Ok(2i64));
    let reader = {
        let (p, f) = (p.clone(), f.clone());
        go_spawn(rt, move || Ok(p.deref()? + f.deref()?))
    };
    let deliverer = {
        let p = p.clone();
        go_spawn(rt, move || Ok(p.deliver(40)))
    };
    deliverer.take(None)?;
    let v = reader.take(None).map_err(|e| reader.close_error().unwrap_or(e))?;
    Ok(Outcome::Clean(format!("go block read {v}")))
}

fn l_channels_channels(ctx: &ScenarioCtx) -> Result<Outcome> {
    let c1: Channel<i64> = Channel::new(&ctx.rt);
    let c2: Channel<i64> = Channel::new(&ctx.rt);
    let g1 = {
        let (c1, c2) = (c1.clone(), c2.clone());
        go_spawn(&ctx.rt, move || {
            let v = c1.take(None)?;
            c2.put(v + 1, None)
        })
    };
    let g2 = go_spawn(&ctx.rt, move || {
        let v = c2.take(None)?;
        c1.put(v + 1, None)
    });
    drop((g1, g2));
    Ok(Outcome::Clean("go blocks started".into()))
}
