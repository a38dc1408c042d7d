use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("non-finite value in {context} at ({row}, {col})")]
    NonFinite {
        context: String,
        row: usize,
        col: usize,
    },
    #[error("label hierarchy violated: instance {instance_id} has classes {first_class} and {second_class}")]
    Hierarchy {
        instance_id: usize,
        first_class: usize,
        second_class: usize,
    },
    #[error("degenerate similarity row {row}: {reason}")]
    DegenerateRow { row: usize, reason: &'static str },
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("state error: {0}")]
    State(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("training diverged in epoch {epoch}: {reason}")]
    Divergence {
        epoch: usize,
        /// Last epoch that finished with finite losses, if any.
        last_good_epoch: Option<usize>,
        reason: String,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Shape {
            op,
            expected: expected.into(),
            got: got.into(),
        }
    }
}
