use diffcore::DiffError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("keypoint count mismatch: {left} vs {right}")]
    KeypointMismatch { left: usize, right: usize },
    #[error("requested {requested} keypoints from an object with {available} particles")]
    TooManyKeypoints { requested: usize, available: usize },
    #[error("unknown task family `{0}`")]
    UnknownFamily(String),
    #[error("image is {got:?}, detector expects {expected:?}")]
    ImageExtent {
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("no evaluation tasks requested")]
    NoTasks,
    #[error("episode already finished")]
    EpisodeFinished,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed {what}: {detail}")]
    Parse { what: &'static str, detail: String },
}
