use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("dangling reference: {kind} `{id}` references unknown `{target}`")]
    DanglingReference {
        kind: &'static str,
        id: String,
        target: String,
    },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("conllu line {line}: {message}")]
    Conllu { line: usize, message: String },
    #[error("dependency tree contains a cycle through token {token}")]
    CyclicTree { token: usize },
    #[error("no {modality} embedding for key `{key}`")]
    MissingEmbedding { modality: &'static str, key: String },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("projection produced a zero vector")]
    DegenerateProjection,
    #[error("no valid alignment: {labels} labels cannot fit in {frames} frames")]
    NoValidAlignment { labels: usize, frames: usize },
    #[error("count mismatch: expected {expected}, found {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error("training diverged at step {step}")]
    Divergence { step: usize },
    #[error("degenerate field of view: {0}")]
    DegenerateFov(String),
    #[error("zero-area bounding box")]
    ZeroAreaBox,
    #[error("unknown pano `{0}`")]
    UnknownPano(String),
    #[error("{0}: empty input")]
    EmptyInput(&'static str),
    #[error("bad file format: {0}")]
    Format(String),
    #[error("stage `{stage}` failed{}", record.as_ref().map(|r| format!(" at record `{r}`")).unwrap_or_default())]
    Stage {
        stage: &'static str,
        record: Option<String>,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str, record: Option<&str>) -> Self {
        Error::Stage {
            stage,
            record: record.map(str::to_owned),
            source: Box::new(self),
        }
    }
}
