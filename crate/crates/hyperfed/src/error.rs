use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("matrix is singular at pivot {pivot}{}", if *.advise_ridge { "; retry with lambda > 0" } else { "" })]
    Singular { pivot: usize, advise_ridge: bool },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("partition inconsistent with dataset: {0}")]
    Consistency(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("round {round}, client {client}: {source}")]
    InRound {
        round: usize,
        client: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_round(self, round: usize, client: usize) -> Self {
        Error::InRound {
            round,
            client,
            source: Box::new(self),
        }
    }
}
