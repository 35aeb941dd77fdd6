//! Hashed character-trigram embeddings.
//!
//! Text is lowercased and whitespace-collapsed, split into character 3-grams,
//! and each gram is hashed with FNV-1a 64. The hash modulo `dim` picks the
//! bucket; the parity of the hash's set-bit count picks the sign. The vector
//! is then L2-normalized.

use thiserror::Error;

pub const DEFAULT_DIM: usize = 64;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EmbedError {
    #[error("text is empty after whitespace normalization")]
    EmptyText,
    #[error("dimension must be positive")]
    ZeroDimension,
    #[error("trigram features cancelled to a zero vector")]
    Degenerate,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("embedding bytes have length {0}, not a multiple of 4")]
    BadBytes(usize),
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, b| (h ^ *b as u64).wrapping_mul(FNV_PRIME))
}

/// Unit-norm vector of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f32>,
}

impl Embedding {
    /// Normalizes `values`. Zero vectors are rejected.
    pub fn from_raw(values: Vec<f32>) -> Result<Self, EmbedError> {
        if values.is_empty() {
            return Err(EmbedError::ZeroDimension);
        }
        let norm = values.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(EmbedError::Degenerate);
        }
        Ok(Embedding { values: values.into_iter().map(|v| (v as f64 / norm) as f32).collect() })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Little-endian f32 bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    /// Inverse of [`Embedding::to_bytes`]. The stored values are already
    /// normalized, so they are taken as-is.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EmbedError> {
        if bytes.is_empty() || !bytes.len().is_multiple_of(4) {
            return Err(EmbedError::BadBytes(bytes.len()));
        }
        let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Embedding { values })
    }
}

pub fn normalize_text(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

pub fn embed(text: &str, dim: usize) -> Result<Embedding, EmbedError> {
    if dim == 0 {
        return Err(EmbedError::ZeroDimension);
    }
    let norm = normalize_text(text);
    if norm.is_empty() {
        return Err(EmbedError::EmptyText);
    }
    let chars: Vec<char> = norm.chars().collect();
    let mut acc = vec![0f32; dim];
    let mut add = |gram: &[char]| {
        let s: String = gram.iter().collect();
        let h = fnv1a64(s.as_bytes());
        let sign = if h.count_ones().is_multiple_of(2) { 1.0 } else { -1.0 };
        acc[(h % dim as u64) as usize] += sign;
    };
    if chars.len() < 3 {
        add(&chars);
    } else {
        chars.windows(3).for_each(&mut add);
    }
    Embedding::from_raw(acc)
}

/// Dot product; equal to cosine similarity for unit vectors.
pub fn similarity(a: &Embedding, b: &Embedding) -> Result<f32, EmbedError> {
    if a.dim() != b.dim() {
        return Err(EmbedError::DimensionMismatch(a.dim(), b.dim()));
    }
    Ok(a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum())
}
