//! Brute-force plaintext retrieval, the reference for encrypted search.

use crate::embedder::{embed, similarity, EmbedError};
use crate::store::{rank_order, RecordId};

/// Embed every `(id, text)` in the clear and return the top `k` by
/// (score desc, id asc).
pub fn plaintext_oracle_topk(
    corpus: &[(RecordId, String)],
    query_text: &str,
    k: usize,
    dim: usize,
) -> Result<Vec<(RecordId, f32)>, EmbedError> {
    let q = embed(query_text, dim)?;
    let mut scored = corpus
        .iter()
        .map(|(id, text)| Ok((id.clone(), similarity(&q, &embed(text, dim)?)?)))
        .collect::<Result<Vec<_>, EmbedError>>()?;
    scored.sort_by(|a, b| rank_order(a.1, &a.0, b.1, &b.0));
    scored.truncate(k);
    Ok(scored)
}
