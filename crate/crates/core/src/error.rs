use thiserror::Error;

/// Errors raised by model operations and the scenario harness.
///
/// `Error` is `Clone` because failed futures and agents keep the error that
/// terminated them and hand copies to every reader.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("operation requires an enclosing transaction")]
    NotInTransaction,
    #[error("runtime mode cannot change while a scenario is running")]
    ModeChangeWhileRunning,
    #[error("swap re-entered on the same atom from inside its own update function")]
    ReentrantSwap,
    #[error("agent has failed: {0}")]
    AgentFailed(String),
    #[error("await is not allowed in this scope")]
    AwaitProhibited,
    #[error("transaction gave up after {attempts} attempts")]
    TxnRetryLimit { attempts: u64 },
    #[error("blocking read of a future or promise inside an agent action")]
    BlockingReadProhibited,
    #[error("future failed: {0}")]
    FutureFailed(Box<Error>),
    #[error("future was cancelled")]
    FutureCancelled,
    #[error("operation timed out")]
    Timeout,
    #[error("irrevocable channel operation inside a block that may re-execute")]
    IrrevocableInRetryScope,
    #[error("channel is closed")]
    ChannelClosed,
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("cannot write report: {0}")]
    SinkUnwritable(String),
    /// An error raised by user code (an action, update function or body).
    #[error("{0}")]
    Raised(String),
    /// The runtime was shut down while the operation was in progress.
    #[error("runtime shut down")]
    Aborted,
    /// Internal signal: the current transaction attempt observed a conflict
    /// and must restart. Never escapes `transaction_run`.
    #[error("transaction conflict")]
    Conflict,
}

impl Error {
    pub fn raised(msg: impl Into<String>) -> Self {
        Error::Raised(msg.into())
    }

    /// Short stable name, used in reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NotInTransaction => "NotInTransaction",
            Error::ModeChangeWhileRunning => "ModeChangeWhileRunning",
            Error::ReentrantSwap => "ReentrantSwap",
            Error::AgentFailed(_) => "AgentFailed",
            Error::AwaitProhibited => "AwaitProhibited",
            Error::TxnRetryLimit { .. } => "TxnRetryLimit",
            Error::BlockingReadProhibited => "BlockingReadProhibited",
            Error::FutureFailed(_) => "FutureFailed",
            Error::FutureCancelled => "FutureCancelled",
            Error::Timeout => "Timeout",
            Error::IrrevocableInRetryScope => "IrrevocableInRetryScope",
            Error::ChannelClosed => "ChannelClosed",
            Error::UnknownScenario(_) => "UnknownScenario",
            Error::SinkUnwritable(_) => "SinkUnwritable",
            Error::Raised(_) => "Raised",
            Error::Aborted => "Aborted",
            Error::Conflict => "Conflict",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
