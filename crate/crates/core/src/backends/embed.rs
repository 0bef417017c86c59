use serde::{Deserialize, Serialize};

use super::{BackendError, Embedder};
use crate::scalar::Scalar;

pub const DEFAULT_EMBEDDING_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector<T> {
    pub values: Vec<T>,
    pub norm: T,
}

impl<T: Scalar> EmbeddingVector<T> {
    pub fn new(values: Vec<T>) -> Self {
        let norm = values.iter().map(|&v| v * v).sum::<T>().sqrt();
        EmbeddingVector { values, norm }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_zero(&self) -> bool {
        self.norm == T::zero()
    }

    pub fn normalized(&self) -> Self {
        if self.is_zero() {
            return self.clone();
        }
        EmbeddingVector::new(self.values.iter().map(|&v| v / self.norm).collect())
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

/// Hashed bag-of-words embedder.
///
/// Each whitespace-delimited token is hashed with 64-bit FNV-1a over its UTF-8
/// bytes; the bucket is `hash % dim`. Bucket counts are accumulated and the
/// vector is L2-normalized. Text without tokens embeds to the zero vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder { dim: DEFAULT_EMBEDDING_DIM }
    }
}

impl HashEmbedder {
    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a64(token.as_bytes()) % self.dim as u64) as usize
    }

    pub fn embed_as<T: Scalar>(&self, text: &str) -> EmbeddingVector<T> {
        let mut counts = vec![T::zero(); self.dim];
        for tok in text.split_whitespace() {
            let b = self.bucket(tok);
            counts[b] = counts[b] + T::one();
        }
        EmbeddingVector::new(counts).normalized()
    }
}

impl Embedder for HashEmbedder {
    fn embed(&self, text: &str) -> Result<EmbeddingVector<f64>, BackendError> {
        Ok(self.embed_as(text))
    }
}
