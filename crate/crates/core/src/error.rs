use thiserror::Error;

/// Errors raised across the crate.
///
/// Validation failures (bad parameters, malformed input) and numeric
/// failures (overflow, infeasible conditioning, vacuous bounds) are kept in
/// separate variants so front ends can map them to distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("explicit schedule has no tail model (stored prefix sums to {prefix_sum})")]
    NoTailModel { prefix_sum: f64 },

    #[error("schedule exhausted at index {index} before covering the requested horizon")]
    ScheduleExhausted { index: u64 },

    #[error("non-unique stationary distribution: closed classes {classes:?}")]
    NonUniqueStationary { classes: Vec<Vec<usize>> },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("audit failed: {0}")]
    Audit(String),

    #[error("flow escaped (norm > 1e12) at t = {escape_time}")]
    FlowBlowUp { escape_time: f64 },

    #[error("start point {start:?} did not enter the target neighbourhood within t_max = {t_max}")]
    BasinViolation { start: Vec<f64>, t_max: f64 },

    #[error("threshold {which} not reachable below n = {limit}")]
    ThresholdOverflow { which: String, limit: u64 },

    #[error("overflow evaluating {0}")]
    Overflow(String),

    #[error("series diverges: {0}")]
    SeriesDiverges(String),

    #[error("bound vacuous: nonpositive denominator at segment {segment}")]
    VacuousBound { segment: usize },

    #[error("conditioning infeasible: 0 of {attempts} attempts landed in B at n0")]
    ConditioningInfeasible { attempts: usize },

    #[error("unknown benchmark {0:?}")]
    UnknownBenchmark(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerics (as opposed to bad input).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Singular(_)
                | Error::FlowBlowUp { .. }
                | Error::BasinViolation { .. }
                | Error::ThresholdOverflow { .. }
                | Error::Overflow(_)
                | Error::SeriesDiverges(_)
                | Error::VacuousBound { .. }
                | Error::ConditioningInfeasible { .. }
                | Error::ScheduleExhausted { .. }
                | Error::NonUniqueStationary { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
