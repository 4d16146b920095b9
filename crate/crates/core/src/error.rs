use thiserror::Error;

use crate::topology::{LinkId, OwnerId, SlotBlock};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("topology parse error: {0}")]
    TopologyParse(String),

    #[error("duplicate node `{0}`")]
    DuplicateNode(String),

    #[error("link references unknown node `{0}`")]
    UnknownNode(String),

    #[error("link {a}-{b} has nonpositive length {length_km} km")]
    NonPositiveLength { a: String, b: String, length_km: f64 },

    #[error("duplicate link {a}-{b}")]
    DuplicateLink { a: String, b: String },

    #[error("topology is not connected")]
    Disconnected,

    #[error("slots {block} already occupied on link {link}")]
    SpectrumConflict { link: LinkId, block: SlotBlock },

    #[error("unknown allocation owner {0}")]
    UnknownOwner(OwnerId),

    #[error("path is empty")]
    EmptyPath,

    #[error("invalid parameter `{key}`: {reason}")]
    InvalidParameter { key: &'static str, reason: String },

    #[error("unknown model profile `{0}`")]
    UnknownProfile(String),

    #[error("cannot split {n_layers} layers into {stages} stages")]
    TooManyStages { n_layers: usize, stages: usize },

    #[error("task graph is not schedulable: {0}")]
    Unschedulable(String),

    #[error("timeline does not match the task set: {0}")]
    TimelineMismatch(String),
}

impl Error {
    pub(crate) fn invalid(key: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            key,
            reason: reason.into(),
        }
    }
}
