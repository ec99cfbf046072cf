//! Scenario harness: one deterministic program per pair of nested models,
//! run under a chosen mode and classified by invariant checks and the
//! deadlock and livelock detectors.

mod catalog;
pub mod report;
pub mod script;

use std::fmt;
use std::str::FromStr;
use std::sync::mpsc::{self, TryRecvError};
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::detect::{watchdog_check, DeadlockMonitor, RetryKind, WaitForGraph, WatchdogVerdict};
use crate::error::{Error, Result};
use crate::runtime::{Config, Mode, Runtime};

pub use report::{report_emit, Format, Sink};
pub use script::{ForcedRetries, Joined, Outcome, ScenarioCtx};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Model {
    #[serde(rename = "atoms")]
    Atoms,
    #[serde(rename = "agents")]
    Agents,
    #[serde(rename = "refs")]
    Refs,
    #[serde(rename = "futures-promises")]
    FuturesPromises,
    #[serde(rename = "channels")]
    Channels,
}

impl Model {
    pub const ALL: [Model; 5] = [
        Model::Atoms,
        Model::Agents,
        Model::Refs,
        Model::FuturesPromises,
        Model::Channels,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Model::Atoms => "atoms",
            Model::Agents => "agents",
            Model::Refs => "refs",
            Model::FuturesPromises => "futures-promises",
            Model::Channels => "channels",
        }
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Model {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "atoms" => Ok(Model::Atoms),
            "agents" => Ok(Model::Agents),
            "refs" | "stm" => Ok(Model::Refs),
            "futures-promises" | "futures" | "futprom" | "promises" => Ok(Model::FuturesPromises),
            "channels" => Ok(Model::Channels),
            _ => Err(format!("unknown model `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Property {
    Safety,
    Liveness,
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Property::Safety => "safety",
            Property::Liveness => "liveness",
        })
    }
}

/// Which half of the matrix to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Safety,
    Liveness,
    All,
}

impl Which {
    pub fn includes(self, p: Property) -> bool {
        match self {
            Which::All => true,
            Which::Safety => p == Property::Safety,
            Which::Liveness => p == Property::Liveness,
        }
    }

    pub fn properties(self) -> Vec<Property> {
        [Property::Safety, Property::Liveness]
            .into_iter()
            .filter(|p| self.includes(*p))
            .collect()
    }
}

/// Verdict class, used for expectations and for comparing runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verdict {
    Ok,
    Race,
    Deadlock,
    Livelock,
    Error(&'static str),
}

impl Verdict {
    pub fn is_issue(self) -> bool {
        matches!(self, Verdict::Race | Verdict::Deadlock | Verdict::Livelock)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Ok => f.write_str("OK"),
            Verdict::Race => f.write_str("RaceObserved"),
            Verdict::Deadlock => f.write_str("DeadlockDetected"),
            Verdict::Livelock => f.write_str("LivelockSuspected"),
            Verdict::Error(kind) => write!(f, "ErrorRaised({kind})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Observed {
    Ok(String),
    RaceObserved(String),
    DeadlockDetected(String),
    LivelockSuspected(String),
    ErrorRaised { kind: &'static str, detail: String },
}

impl Observed {
    pub fn verdict(&self) -> Verdict {
        match self {
            Observed::Ok(_) => Verdict::Ok,
            Observed::RaceObserved(_) => Verdict::Race,
            Observed::DeadlockDetected(_) => Verdict::Deadlock,
            Observed::LivelockSuspected(_) => Verdict::Livelock,
            Observed::ErrorRaised { kind, .. } => Verdict::Error(kind),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Observed::Ok(_) => "OK",
            Observed::RaceObserved(_) => "RaceObserved",
            Observed::DeadlockDetected(_) => "DeadlockDetected",
            Observed::LivelockSuspected(_) => "LivelockSuspected",
            Observed::ErrorRaised { .. } => "ErrorRaised",
        }
    }

    pub fn detail(&self) -> &str {
        match self {
            Observed::Ok(d)
            | Observed::RaceObserved(d)
            | Observed::DeadlockDetected(d)
            | Observed::LivelockSuspected(d)
            | Observed::ErrorRaised { detail: d, .. } => d,
        }
    }
}

impl fmt::Display for Observed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Observed::ErrorRaised { kind, detail } => write!(f, "ErrorRaised({kind}): {detail}"),
            other => write!(f, "{}: {}", other.name(), other.detail()),
        }
    }
}

type Script = fn(&ScenarioCtx) -> Result<Outcome>;

#[derive(Clone)]
pub struct ScenarioSpec {
    pub id: &'static str,
    pub outer: Model,
    pub inner: Model,
    pub property: Property,
    pub summary: &'static str,
    pub faithful: Verdict,
    pub guarded: Verdict,
    /// Shown for completeness but left out of the cell verdict.
    pub illustration: bool,
    script: Script,
}

impl fmt::Debug for ScenarioSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScenarioSpec")
            .field("id", &self.id)
            .field("outer", &self.outer)
            .field("inner", &self.inner)
            .field("property", &self.property)
            .finish_non_exhaustive()
    }
}

impl ScenarioSpec {
    pub fn expected(&self, mode: Mode) -> Verdict {
        match mode {
            Mode::Faithful => self.faithful,
            Mode::Guarded => self.guarded,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioResult {
    pub id: &'static str,
    pub mode: Mode,
    pub observed: Observed,
    pub expected: Verdict,
    pub duration: Duration,
}

impl ScenarioResult {
    pub fn matches(&self) -> bool {
        self.observed.verdict() == self.expected
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct HarnessConfig {
    #[serde(serialize_with = "as_millis", rename = "timeout_ms")]
    pub timeout: Duration,
    pub retry_threshold: u64,
    #[serde(serialize_with = "as_millis", rename = "quiescence_ms")]
    pub quiescence: Duration,
    pub seed: u64,
}

fn as_millis<S: serde::Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_u64(d.as_millis() as u64)
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            timeout: Duration::from_secs(10),
            retry_threshold: 1000,
            quiescence: Duration::from_millis(500),
            seed: 42,
        }
    }
}

/// Issue matrix of the reference classification, row = outer model and
/// column = inner model, indexed by [`Model::index`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpectedMatrix {
    pub safety: [[bool; 5]; 5],
    pub liveness: [[bool; 5]; 5],
}

const X: bool = true;
const O: bool = false;

pub const EXPECTED: ExpectedMatrix = ExpectedMatrix {
    //        atoms agents refs futprom channels
    safety: [
        [X, X, X, X, X], // atoms
        [O, O, O, O, O], // agents
        [X, O, O, X, X], // refs
        [O, O, O, O, O], // futures
        [O, O, O, O, O], // channels
    ],
    liveness: [
        [O, O, O, O, X], // atoms
        [O, O, O, X, X], // agents
        [O, O, O, O, X], // refs
        [O, X, O, X, X], // futures
        [O, X, O, O, X], // channels
    ],
};

impl ExpectedMatrix {
    pub fn get(&self, property: Property, outer: Model, inner: Model) -> bool {
        let m = match property {
            Property::Safety => &self.safety,
            Property::Liveness => &self.liveness,
        };
        m[outer.index()][inner.index()]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ScenarioFilter {
    pub property: Option<Property>,
    pub outer: Option<Model>,
    pub inner: Option<Model>,
}

/// All scenarios, ordered by outer model, inner model, then property.
pub fn scenarios() -> Vec<ScenarioSpec> {
    let mut all = catalog::all();
    all.sort_by_key(|s| (s.outer, s.inner, s.property));
    all
}

pub fn scenario_spec(id: &str) -> Result<ScenarioSpec> {
    scenarios()
        .into_iter()
        .find(|s| s.id == id)
        .ok_or_else(|| Error::UnknownScenario(id.to_string()))
}

pub fn scenario_list(filter: ScenarioFilter) -> Vec<&'static str> {
    scenarios()
        .into_iter()
        .filter(|s| filter.property.is_none_or(|p| s.property == p))
        .filter(|s| filter.outer.is_none_or(|m| s.outer == m))
        .filter(|s| filter.inner.is_none_or(|m| s.inner == m))
        .map(|s| s.id)
        .collect()
}

pub fn scenario_run(id: &str, mode: Mode, config: &HarnessConfig) -> Result<ScenarioResult> {
    let spec = scenario_spec(id)?;
    Ok(run_spec(&spec, mode, config))
}

const MONITOR_TICK: Duration = Duration::from_millis(2);

fn run_spec(spec: &ScenarioSpec, mode: Mode, cfg: &HarnessConfig) -> ScenarioResult {
    let rt = Runtime::with_config(Config {
        mode,
        ..Config::default()
    });
    rt.begin_scenario();
    let start = Instant::now();
    let (tx, rx) = mpsc::channel();
    let ctx = ScenarioCtx {
        rt: rt.clone(),
        seed: cfg.seed,
    };
    let script = spec.script;
    rt.spawn_unit(format!("scenario {}", spec.id), None, move || {
        let _ = tx.send(script(&ctx));
    });

    let mut monitor = DeadlockMonitor::new(cfg.quiescence);
    let mut done: Option<Result<Outcome>> = None;
    let observed = 'watch: loop {
        std::thread::sleep(MONITOR_TICK);
        for kind in [RetryKind::SwapRetry, RetryKind::TxnRetry] {
            if let WatchdogVerdict::LivelockSuspected { loop_key, count } =
                watchdog_check(&rt, kind, cfg.retry_threshold)
            {
                break 'watch Observed::LivelockSuspected(format!(
                    "{kind:?} loop on object {} re-executed {count} times",
                    loop_key.object
                ));
            }
        }
        if let Some(ev) = monitor.observe(&rt, None) {
            break Observed::DeadlockDetected(ev.to_string());
        }
        if done.is_none() {
            match rx.try_recv() {
                Ok(r) => done = Some(r),
                Err(TryRecvError::Disconnected) => done = Some(Err(Error::raised("scenario script panicked"))),
                Err(TryRecvError::Empty) => {}
            }
        }
        if let Some(r) = &done {
            if WaitForGraph::capture(&rt, None).settled() {
                break match r {
                    Ok(Outcome::Clean(d)) => Observed::Ok(d.clone()),
                    Ok(Outcome::Race(d)) => Observed::RaceObserved(d.clone()),
                    Err(e) => Observed::ErrorRaised {
                        kind: e.kind(),
                        detail: e.to_string(),
                    },
                };
            }
        }
        if start.elapsed() >= cfg.timeout {
            break Observed::ErrorRaised {
                kind: "ScenarioTimeout",
                detail: format!("no verdict within {} ms", cfg.timeout.as_millis()),
            };
        }
    };
    let duration = start.elapsed();
    rt.end_scenario();
    rt.shutdown();
    ScenarioResult {
        id: spec.id,
        mode,
        observed,
        expected: spec.expected(mode),
        duration,
    }
}

#[derive(Debug, Clone)]
pub struct CellReport {
    pub outer: Model,
    pub inner: Model,
    pub property: Property,
    /// Issue expected in this mode.
    pub expected: bool,
    /// Issue shown by at least one counted scenario.
    pub observed: bool,
    pub scenario_ids: Vec<&'static str>,
    pub duration: Duration,
}

#[derive(Debug, Clone)]
pub struct MatrixReport {
    pub mode: Mode,
    pub config: HarnessConfig,
    pub which: Which,
    pub cells: Vec<CellReport>,
    pub results: Vec<ScenarioResult>,
    pub pass: bool,
}

impl MatrixReport {
    pub fn cell(&self, property: Property, outer: Model, inner: Model) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.property == property && c.outer == outer && c.inner == inner)
    }

    /// Observed issue pattern for one property.
    pub fn grid(&self, property: Property) -> [[bool; 5]; 5] {
        let mut g = [[false; 5]; 5];
        for c in self.cells.iter().filter(|c| c.property == property) {
            g[c.outer.index()][c.inner.index()] = c.observed;
        }
        g
    }

    pub fn mismatches(&self) -> Vec<&ScenarioResult> {
        self.results.iter().filter(|r| !r.matches()).collect()
    }
}

/// Expected cell verdict for `mode`. Faithful mode uses the reference table;
/// guarded mode derives it from the per-scenario expectations.
pub fn expected_cell(mode: Mode, property: Property, outer: Model, inner: Model) -> bool {
    match mode {
        Mode::Faithful => EXPECTED.get(property, outer, inner),
        Mode::Guarded => scenarios()
            .iter()
            .filter(|s| !s.illustration && s.property == property && s.outer == outer && s.inner == inner)
            .any(|s| s.guarded.is_issue()),
    }
}

pub fn matrix_run(mode: Mode, which: Which, config: &HarnessConfig) -> MatrixReport {
    let specs: Vec<ScenarioSpec> = scenarios().into_iter().filter(|s| which.includes(s.property)).collect();
    let results: Vec<ScenarioResult> = specs.iter().map(|s| run_spec(s, mode, config)).collect();

    let mut cells = Vec::new();
    for property in which.properties() {
        for outer in Model::ALL {
            for inner in Model::ALL {
                let mut ids = Vec::new();
                let mut observed = false;
                let mut duration = Duration::ZERO;
                for (s, r) in specs.iter().zip(&results) {
                    if s.property == property && s.outer == outer && s.inner == inner {
                        ids.push(s.id);
                        duration += r.duration;
                        if !s.illustration && r.observed.verdict().is_issue() {
                            observed = true;
                        }
                    }
                }
                cells.push(CellReport {
                    outer,
                    inner,
                    property,
                    expected: expected_cell(mode, property, outer, inner),
                    observed,
                    scenario_ids: ids,
                    duration,
                });
            }
        }
    }
    let pass = results.iter().all(ScenarioResult::matches) && cells.iter().all(|c| c.expected == c.observed);
    MatrixReport {
        mode,
        config: *config,
        which,
        cells,
        results,
        pass,
    }
}
