use thiserror::Error;

#[derive(Debug, Error)]
pub enum WssisError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("corrupt annotation: {0}")]
    CorruptAnnotation(String),
    #[error("degenerate annotation {id}: mask has no foreground pixels")]
    DegenerateAnnotation { id: u64 },
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
    #[error("referential integrity: {0}")]
    Integrity(String),
    #[error("empty mask")]
    EmptyMask,
    #[error("invalid input: {0}")]
    Input(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<WssisError>,
    },
    #[error(transparent)]
    Nn(#[from] wssis_nn::NnError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl WssisError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Self::Io {
            context: context.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            already @ Self::Stage { .. } => already,
            other => Self::Stage {
                stage: stage.to_string(),
                source: Box::new(other),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, WssisError>;
