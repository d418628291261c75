//! Cosine scoring of trial lists.

use std::collections::HashMap;

use crate::data::{FrameSequence, TrialRecord};
use crate::decoder::extract_embedding;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::par::{self, Exec};
use crate::tensor::Tensor;

/// `e1·e2 / (‖e1‖‖e2‖)`.
pub fn cosine_score(e1: &Tensor, e2: &Tensor) -> Result<f64> {
    if e1.len() != e2.len() {
        return Err(Error::dim(
            "cosine_score",
            format!("embeddings of length {} and {}", e1.len(), e2.len()),
        ));
    }
    let (a, b) = (e1.data(), e2.data());
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateEmbedding("zero-norm embedding".into()));
    }
    if !(na.is_finite() && nb.is_finite() && dot.is_finite()) {
        return Err(Error::NonFinite { op: "cosine_score" });
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Embeds every sequence, keyed by id.
pub fn embed_all(params: &ModelParams, seqs: &[FrameSequence], exec: Exec) -> Result<HashMap<String, Tensor>> {
    let embeddings = par::try_map(exec, seqs, |s| extract_embedding(s, params))?;
    Ok(seqs.iter().map(|s| s.id.clone()).zip(embeddings).collect())
}

/// Returns `trials` with cosine scores filled in.
pub fn score_trials(
    trials: &[TrialRecord],
    embeddings: &HashMap<String, Tensor>,
    exec: Exec,
) -> Result<Vec<TrialRecord>> {
    par::try_map(exec, trials, |t| {
        let lookup = |id: &str| {
            embeddings
                .get(id)
                .ok_or_else(|| Error::Config(format!("no features for utterance `{id}`")))
        };
        let score = cosine_score(lookup(&t.enroll_id)?, lookup(&t.test_id)?).map_err(|e| match e {
            Error::DegenerateEmbedding(_) => Error::DegenerateEmbedding(format!(
                "trial {} {} has a zero-norm embedding",
                t.enroll_id, t.test_id
            )),
            other => other,
        })?;
        Ok(t.clone().scored(score))
    })
}
