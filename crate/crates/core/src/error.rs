use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvdError {
    #[error("shape error on {axis}: {msg}")]
    Shape { axis: String, msg: String },

    #[error("invalid config field `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("non-finite {term} loss at step {step}")]
    NonFinite { term: &'static str, step: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvdError>;

impl EvdError {
    pub fn shape(axis: impl Into<String>, msg: impl Into<String>) -> Self {
        EvdError::Shape {
            axis: axis.into(),
            msg: msg.into(),
        }
    }

    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        EvdError::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }
}
