use thiserror::Error;

use crate::boxes::BBox;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("degenerate box {0:?}")]
    DegenerateBox(BBox),
    #[error("detection refers to unknown image id {0}")]
    UnknownImage(u64),
    #[error("annotation refers to unknown image id {0}")]
    UnknownAnnotationImage(u64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
