use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {what}: {reason}")]
    Invalid { what: String, reason: String },

    #[error("layer `{layer}` needs a context length but the task has none")]
    MissingContextLength { layer: String },

    #[error("layer `{layer}` is not an embedding layer")]
    NotEmbedding { layer: String },

    #[error("local batch must be at least 1")]
    ZeroBatch,

    #[error("MP sharding requested for layer `{layer}`, which is neither an embedding nor MoE")]
    MpOnNonEmbedding { layer: String },

    #[error("plan is infeasible: {0}")]
    Infeasible(crate::plan::Infeasibility),

    #[error("dependency cycle detected involving event {event}")]
    Cycle { event: usize },

    #[error("strategy domain is empty")]
    EmptyDomain,

    #[error("no feasible plan among {evaluated} candidates")]
    NoFeasiblePlan { evaluated: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: at `{field}`: {message}")]
    Parse {
        path: PathBuf,
        field: String,
        message: String,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(what: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what: what.into(),
            reason: reason.into(),
        }
    }
}
