use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Vocabulary, PAD};

pub const EMBED_DIM: usize = 300;
const OOV_RANGE: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    Glove,
    Random,
}

#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    /// `|V| × dim`; row `PAD` is zero.
    pub matrix: Array2<f32>,
    pub source: EmbeddingSource,
    /// Vocabulary rows that were copied from the file.
    pub hits: usize,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }
}

fn oov_matrix(rows: usize, dim: usize, seed: u64) -> Array2<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Array2::from_shape_simple_fn((rows, dim), || rng.random_range(-OOV_RANGE..=OOV_RANGE));
    m.row_mut(PAD).fill(0.0);
    m
}

/// Every row drawn uniform in ±0.1 except the zero PAD row.
pub fn random_embeddings(vocab: &Vocabulary, dim: usize, seed: u64) -> EmbeddingTable {
    EmbeddingTable { matrix: oov_matrix(vocab.len(), dim, seed), source: EmbeddingSource::Random, hits: 0 }
}

/// Read a GloVe text file. Rows for vocabulary tokens are copied verbatim; the
/// rest keep their seeded ±0.1 draw.
pub fn load_embeddings(vocab: &Vocabulary, path: &Path, seed: u64) -> Result<EmbeddingTable, DataError> {
    let io = |source| DataError::Io { path: path.to_owned(), source };
    let file = std::fs::File::open(path).map_err(io)?;
    let mut matrix = oov_matrix(vocab.len(), EMBED_DIM, seed);
    let mut hits = 0;
    let mut values = Vec::with_capacity(EMBED_DIM);
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        values.clear();
        for p in parts {
            let v: f32 = p.parse().map_err(|_| DataError::Format {
                path: path.to_owned(),
                reason: format!("line {}: {p:?} is not a number", lineno + 1),
            })?;
            values.push(v);
        }
        if values.len() != EMBED_DIM {
            return Err(DataError::EmbeddingDim { path: path.to_owned(), found: values.len(), expected: EMBED_DIM });
        }
        if let Some(i) = vocab.get(token) {
            if i != PAD {
                matrix.row_mut(i).assign(&ndarray::ArrayView1::from(&values[..]));
                hits += 1;
            }
        }
    }
    Ok(EmbeddingTable { matrix, source: EmbeddingSource::Glove, hits })
}
