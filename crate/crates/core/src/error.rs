use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("empty pair set: {0}")]
    EmptyPairSet(String),

    #[error("empty candidate pool for image {image}")]
    EmptyCandidatePool { image: usize },

    #[error("empty class set for class {0}")]
    EmptyClassSet(usize),

    #[error("empty descriptor set")]
    EmptyDescriptorSet,

    #[error("test class {class} has zero images")]
    EmptyTestClass { class: usize },

    #[error("class {class} appears in both train and test splits")]
    SplitOverlap { class: usize },

    #[error("single training class: cannot form cross-class negative pairs")]
    SingleTrainingClass,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value in {context} at row {row}")]
    NonFinite { context: String, row: usize },

    #[error("training diverged at epoch {epoch}: objective = {objective}")]
    Diverged { epoch: usize, objective: f64 },

    #[error("duplicate seed {0} in multi-run seed list")]
    DuplicateSeed(u64),

    #[error("run with seed {seed} failed: {source}")]
    RunFailed {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("bad file format in {path}: {reason}")]
    BadFormat { path: String, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(context: impl Into<String>, expected: impl ToString, actual: impl ToString) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
