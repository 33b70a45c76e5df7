use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    /// The pivot system is rank deficient: some tip/pivot direction is not
    /// constrained by the recorded motion.
    #[error("unobservable motion: condition number {condition:.3e} exceeds {limit:.1e}")]
    UnobservableMotion { condition: f64, limit: f64 },

    #[error("state error: {0}")]
    State(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    /// True for errors caused by bad caller input rather than I/O or
    /// internal faults.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io(_))
    }
}
