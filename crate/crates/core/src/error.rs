use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("pose has no keypoint above the confidence floor")]
    NoVisibleKeypoints,

    #[error("box lies entirely outside the image bounds")]
    BoxOutsideImage,

    #[error("shape mismatch: {left:?} vs {right:?} ({context})")]
    Shape {
        left: Vec<usize>,
        right: Vec<usize>,
        context: &'static str,
    },

    #[error("schema mismatch: expected {expected} keypoints, found {found} ({context})")]
    Schema {
        expected: usize,
        found: usize,
        context: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown image id {0}")]
    UnknownImage(u64),

    #[error("no condition pool entry for image {image_id}, instance {instance_id}")]
    UnknownInstance { image_id: u64, instance_id: u64 },

    #[error("could not reach the overlap target {target:?} after {retries} attempts ({spec})")]
    Generation {
        target: [f64; 2],
        retries: usize,
        spec: String,
    },

    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {msg}")]
    Image { path: PathBuf, msg: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(left: &[usize], right: &[usize], context: &'static str) -> Self {
        Error::Shape {
            left: left.to_vec(),
            right: right.to_vec(),
            context,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
