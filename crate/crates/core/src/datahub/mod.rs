//! Annotation ingestion, vocabulary, word embeddings and batching.

mod batches;
pub mod convert;
mod embeddings;
mod manifest;
pub mod synthetic;
mod text;

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BoundingBox;

pub use batches::{batch_indices, iterate_batches};
pub use embeddings::{load_embeddings, random_embeddings, EmbeddingSource, EmbeddingTable, EMBED_DIM};
pub use manifest::{load_manifest, resolve_image_path, write_manifest, ManifestEntry, ManifestLoad, DATA_ROOT_ENV};
pub use text::{encode_expression, tokenize, TokenSequence, Vocabulary, PAD, UNK};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("expression has no tokens")]
    EmptyExpression,
    #[error("embedding file {path} has dimension {found}, expected {expected}")]
    EmbeddingDim { path: PathBuf, found: usize, expected: usize },
    #[error("unsupported source layout {found:?}; supported: {supported}")]
    UnknownLayout { found: String, supported: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum Split {
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "val")]
    Val,
    #[serde(rename = "testA")]
    TestA,
    #[serde(rename = "testB")]
    TestB,
    #[serde(rename = "test")]
    Test,
}

impl Split {
    pub const ALL: [Split; 5] = [Split::Train, Split::Val, Split::TestA, Split::TestB, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestA => "testA",
            Split::TestB => "testB",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" | "validation" => Some(Split::Val),
            "testA" => Some(Split::TestA),
            "testB" => Some(Split::TestB),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Split::parse(s).ok_or_else(|| format!("unknown split {s:?}"))
    }
}

/// One (image, expression, box) example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefSample {
    pub id: String,
    pub image_id: String,
    pub image_path: PathBuf,
    pub expression: String,
    /// Absolute pixels of the original image.
    pub gt_box: BoundingBox<f64>,
    pub image_size: (usize, usize),
    pub split: Split,
}
