use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value at pixel ({row}, {col}) channel {channel}")]
    NonFinite {
        row: usize,
        col: usize,
        channel: usize,
    },

    #[error("shape mismatch in layer {layer}: {msg}")]
    Shape { layer: usize, msg: String },

    #[error("format error at offset {offset}: {cause}")]
    Format { offset: usize, cause: String },

    #[error("invalid label {label}: num_classes is {num_classes}")]
    InvalidLabel { label: usize, num_classes: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("activation tape does not match model: {0}")]
    TapeMismatch(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
