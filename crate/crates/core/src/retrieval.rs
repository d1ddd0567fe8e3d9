//! Late-interaction (MaxSim) scoring, exact top-k search, and candidate-set
//! probability distributions.
//!
//! One [`RetrieverModel`] type serves both roles: the retriever scores
//! passages given the context alone, the guide scores them given the
//! concatenation of context and target. Search is an exact full scan; the
//! subgradient through the per-query-token max flows only to the argmax
//! passage token, ties broken by lowest token index.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Example, PassageId, TokenId};
use crate::embedder::EmbeddingTable;
use crate::error::{Error, Result};
use crate::math::{dot, softmax_with_temperature};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Retriever,
    Guide,
}

impl ModelRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelRole::Retriever => "retriever",
            ModelRole::Guide => "guide",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieverModel {
    pub table: EmbeddingTable,
    pub temperature: f64,
    pub role: ModelRole,
}

impl RetrieverModel {
    pub fn new(table: EmbeddingTable, temperature: f64, role: ModelRole) -> Result<Self> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(RetrieverModel {
            table,
            temperature,
            role,
        })
    }
}

/// Query for the guide retriever: the context tokens followed by the target
/// tokens, `q = [x y]`.
pub fn guide_query(example: &Example) -> Vec<TokenId> {
    let mut q = example.context_tokens.clone();
    q.extend_from_slice(&example.target_tokens);
    q
}

/// MaxSim similarity: sum over query tokens of the max dot product with any
/// passage token. Both token lists must be non-empty.
pub fn maxsim_score(
    model: &RetrieverModel,
    query_tokens: &[TokenId],
    passage_tokens: &[TokenId],
) -> Result<f64> {
    Ok(maxsim_with_argmax(model, query_tokens, passage_tokens)?.0)
}

/// MaxSim plus, per query token, the index (position in `passage_tokens`) of
/// the argmax passage token. Ties resolve to the lowest index so the
/// subgradient is deterministic.
pub fn maxsim_with_argmax(
    model: &RetrieverModel,
    query_tokens: &[TokenId],
    passage_tokens: &[TokenId],
) -> Result<(f64, Vec<usize>)> {
    if query_tokens.is_empty() {
        return Err(Error::EmptyTokens("query"));
    }
    if passage_tokens.is_empty() {
        return Err(Error::EmptyTokens("passage"));
    }
    let table = &model.table;
    let mut score = 0.0;
    let mut argmax = Vec::with_capacity(query_tokens.len());
    for &q in query_tokens {
        let qv = table.row(q);
        let mut best = f64::NEG_INFINITY;
        let mut best_idx = 0;
        for (j, &d) in passage_tokens.iter().enumerate() {
            let s = dot(qv, table.row(d));
            if s > best {
                best = s;
                best_idx = j;
            }
        }
        score += best;
        argmax.push(best_idx);
    }
    Ok((score, argmax))
}

/// Accumulates `coeff * d(maxsim)/d(rows)` into the model's embedding table,
/// treating the per-query-token argmax as locally constant. `argmax` must
/// come from [`maxsim_with_argmax`] on the same token lists.
pub fn accumulate_maxsim_grad(
    model: &mut RetrieverModel,
    query_tokens: &[TokenId],
    passage_tokens: &[TokenId],
    argmax: &[usize],
    coeff: f64,
) {
    for (&q, &j) in query_tokens.iter().zip(argmax) {
        let d = passage_tokens[j];
        let qv = model.table.row(q).to_vec();
        let dv = model.table.row(d).to_vec();
        model.table.accumulate_grad(q, coeff, &dv);
        model.table.accumulate_grad(d, coeff, &qv);
    }
}

/// Exact top-k by MaxSim over the whole corpus: descending score, ties by
/// ascending passage id.
pub fn top_k(
    model: &RetrieverModel,
    query_tokens: &[TokenId],
    corpus: &Corpus,
    k: usize,
) -> Result<Vec<(PassageId, f64)>> {
    if k == 0 || k > corpus.len() {
        return Err(Error::KOutOfRange {
            k,
            max: corpus.len(),
        });
    }
    let mut scored: Vec<(PassageId, f64)> = corpus
        .passages
        .par_iter()
        .map(|p| maxsim_score(model, query_tokens, &p.tokens).map(|s| (p.id, s)))
        .collect::<Result<Vec<_>>>()?;
    sort_by_score_then_id(&mut scored);
    scored.truncate(k);
    Ok(scored)
}

pub(crate) fn sort_by_score_then_id(scored: &mut [(PassageId, f64)]) {
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("scores are finite")
            .then_with(|| a.0.cmp(&b.0))
    });
}

/// Softmax distribution over an explicit candidate set under one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateDistribution {
    pub example_id: usize,
    /// Sorted by descending probability, ties by ascending passage id.
    pub passage_ids: Vec<PassageId>,
    pub probs: Vec<f64>,
    pub scores: Vec<f64>,
    pub model_role: ModelRole,
}

impl CandidateDistribution {
    /// Builds the distribution from raw MaxSim scores:
    /// `probs = softmax(scores / temperature)` over exactly this set.
    pub fn from_scores(
        example_id: usize,
        scored: Vec<(PassageId, f64)>,
        temperature: f64,
        model_role: ModelRole,
    ) -> Result<Self> {
        if scored.is_empty() {
            return Err(Error::EmptyTokens("candidate set"));
        }
        let mut seen = scored.iter().map(|(id, _)| *id).collect::<Vec<_>>();
        seen.sort_unstable();
        for w in seen.windows(2) {
            if w[0] == w[1] {
                return Err(Error::DuplicateCandidate(w[0]));
            }
        }
        let raw_scores: Vec<f64> = scored.iter().map(|&(_, s)| s).collect();
        let probs = softmax_with_temperature(&raw_scores, temperature);
        let mut triples: Vec<(PassageId, f64, f64)> = scored
            .iter()
            .zip(&probs)
            .map(|(&(id, s), &p)| (id, s, p))
            .collect();
        triples.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .expect("probabilities are finite")
                .then_with(|| a.0.cmp(&b.0))
        });
        Ok(CandidateDistribution {
            example_id,
            passage_ids: triples.iter().map(|t| t.0).collect(),
            scores: triples.iter().map(|t| t.1).collect(),
            probs: triples.iter().map(|t| t.2).collect(),
            model_role,
        })
    }

    /// Builds directly from probabilities (tests and analytic constructions).
    /// Scores are set to log-probabilities.
    pub fn from_probs(
        example_id: usize,
        ids_and_probs: Vec<(PassageId, f64)>,
        model_role: ModelRole,
    ) -> Result<Self> {
        if ids_and_probs.is_empty() {
            return Err(Error::EmptyTokens("candidate set"));
        }
        let total: f64 = ids_and_probs.iter().map(|&(_, p)| p).sum();
        if !total.is_finite() || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        if ids_and_probs.iter().any(|&(_, p)| p <= 0.0) {
            return Err(Error::InvalidConfig(
                "candidate probabilities must be strictly positive".into(),
            ));
        }
        let mut triples: Vec<(PassageId, f64, f64)> = ids_and_probs
            .into_iter()
            .map(|(id, p)| (id, p.ln(), p))
            .collect();
        let mut sorted_ids: Vec<PassageId> = triples.iter().map(|t| t.0).collect();
        sorted_ids.sort_unstable();
        for w in sorted_ids.windows(2) {
            if w[0] == w[1] {
                return Err(Error::DuplicateCandidate(w[0]));
            }
        }
        triples.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .expect("probabilities are finite")
                .then_with(|| a.0.cmp(&b.0))
        });
        Ok(CandidateDistribution {
            example_id,
            passage_ids: triples.iter().map(|t| t.0).collect(),
            scores: triples.iter().map(|t| t.1).collect(),
            probs: triples.iter().map(|t| t.2).collect(),
            model_role,
        })
    }

    pub fn len(&self) -> usize {
        self.passage_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passage_ids.is_empty()
    }

    pub fn prob_of(&self, id: PassageId) -> Option<f64> {
        self.passage_ids
            .iter()
            .position(|&p| p == id)
            .map(|i| self.probs[i])
    }

    /// (id, prob) pairs in ascending id order, for alignment across models.
    pub fn by_id(&self) -> Vec<(PassageId, f64)> {
        let mut v: Vec<(PassageId, f64)> = self
            .passage_ids
            .iter()
            .cloned()
            .zip(self.probs.iter().cloned())
            .collect();
        v.sort_by_key(|&(id, _)| id);
        v
    }
}

/// Scores the candidate passages under the model and softmaxes over exactly
/// that set.
pub fn distribution(
    model: &RetrieverModel,
    example_id: usize,
    query_tokens: &[TokenId],
    corpus: &Corpus,
    candidate_ids: &[PassageId],
) -> Result<CandidateDistribution> {
    let mut scored = Vec::with_capacity(candidate_ids.len());
    for &id in candidate_ids {
        let passage = corpus.passage(id).ok_or(Error::TokenOutOfRange {
            token: id,
            vocab_size: corpus.len(),
        })?;
        scored.push((id, maxsim_score(model, query_tokens, &passage.tokens)?));
    }
    CandidateDistribution::from_scores(example_id, scored, model.temperature, model.role)
}
