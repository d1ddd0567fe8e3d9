//! Evaluation measures: retrieval relevance (Success@k, MRR), groundedness
//! and end-to-end overlap (F1, Novel-F1, Max-F1@k, Knowledge-F1), and
//! distribution sharpness curves.
//!
//! F1 uses clipped multiset counts. Novel-F1 removes high-frequency words
//! (a frequency-mass prefix of the training targets) and context words from
//! both sides before the overlap.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Example, PassageId, TokenId};
use crate::error::{Error, Result};
use crate::generator::{DecodeMode, GeneratorModel, TargetScorer};
use crate::retrieval::{guide_query, top_k, CandidateDistribution, ModelRole, RetrieverModel};

/// A metric value plus the number of examples skipped for missing gold ids.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WithSkipped {
    pub value: f64,
    pub skipped: usize,
}

/// Fraction of examples whose gold passage appears in their top-k ranking.
pub fn success_at_k(
    rankings: &[Vec<PassageId>],
    gold_ids: &[Option<PassageId>],
    k: usize,
) -> Result<WithSkipped> {
    if k == 0 {
        return Err(Error::KOutOfRange { k, max: usize::MAX });
    }
    let mut hits = 0usize;
    let mut counted = 0usize;
    let mut skipped = 0usize;
    for (ranking, gold) in rankings.iter().zip(gold_ids) {
        match gold {
            None => skipped += 1,
            Some(g) => {
                counted += 1;
                let depth = k.min(ranking.len());
                if ranking[..depth].contains(g) {
                    hits += 1;
                }
            }
        }
    }
    let value = if counted == 0 {
        0.0
    } else {
        hits as f64 / counted as f64
    };
    Ok(WithSkipped { value, skipped })
}

/// Mean reciprocal rank of the gold passage; 0 when absent from the ranking.
pub fn mrr(rankings: &[Vec<PassageId>], gold_ids: &[Option<PassageId>]) -> WithSkipped {
    let mut total = 0.0;
    let mut counted = 0usize;
    let mut skipped = 0usize;
    for (ranking, gold) in rankings.iter().zip(gold_ids) {
        match gold {
            None => skipped += 1,
            Some(g) => {
                counted += 1;
                if let Some(pos) = ranking.iter().position(|id| id == g) {
                    total += 1.0 / (pos + 1) as f64;
                }
            }
        }
    }
    let value = if counted == 0 { 0.0 } else { total / counted as f64 };
    WithSkipped { value, skipped }
}

fn token_counts(tokens: &[TokenId]) -> HashMap<TokenId, usize> {
    let mut counts = HashMap::new();
    for &t in tokens {
        *counts.entry(t).or_insert(0) += 1;
    }
    counts
}

/// Unigram F1 over token multisets with clipped counts. Both sides empty
/// scores 1.0; exactly one empty scores 0.0.
pub fn token_f1(prediction: &[TokenId], reference: &[TokenId]) -> f64 {
    match (prediction.is_empty(), reference.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let pred = token_counts(prediction);
    let refc = token_counts(reference);
    let overlap: usize = pred
        .iter()
        .map(|(t, &c)| c.min(*refc.get(t).unwrap_or(&0)))
        .sum();
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / prediction.len() as f64;
    let recall = overlap as f64 / reference.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// High-frequency words covering `mass_threshold` of the training-target
/// token mass: the minimal descending-frequency prefix, ties by word.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommonWordList {
    pub words: Vec<String>,
    pub token_ids: Vec<TokenId>,
    pub mass_threshold: f64,
}

impl CommonWordList {
    pub fn empty() -> Self {
        CommonWordList {
            words: Vec::new(),
            token_ids: Vec::new(),
            mass_threshold: 0.0,
        }
    }

    fn id_set(&self) -> HashSet<TokenId> {
        self.token_ids.iter().cloned().collect()
    }
}

pub fn build_common_words(
    training_targets: &[&[TokenId]],
    corpus: &Corpus,
    mass_threshold: f64,
) -> Result<CommonWordList> {
    if !(0.0..=1.0).contains(&mass_threshold) || mass_threshold == 0.0 || mass_threshold == 1.0 {
        return Err(Error::InvalidConfig(format!(
            "mass threshold must lie strictly between 0 and 1, got {mass_threshold}"
        )));
    }
    let mut counts: HashMap<TokenId, usize> = HashMap::new();
    let mut total = 0usize;
    for target in training_targets {
        for &t in *target {
            *counts.entry(t).or_insert(0) += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::InvalidConfig("empty target corpus".into()));
    }
    let mut by_freq: Vec<(TokenId, usize, String)> = counts
        .into_iter()
        .map(|(t, c)| {
            let word = corpus
                .vocabulary
                .word_of(t)
                .unwrap_or("<oov>")
                .to_string();
            (t, c, word)
        })
        .collect();
    by_freq.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.2.cmp(&b.2)));

    let mut words = Vec::new();
    let mut token_ids = Vec::new();
    let mut mass = 0.0;
    for (t, c, w) in by_freq {
        if mass >= mass_threshold {
            break;
        }
        mass += c as f64 / total as f64;
        words.push(w);
        token_ids.push(t);
    }
    Ok(CommonWordList {
        words,
        token_ids,
        mass_threshold,
    })
}

/// Token F1 after removing common words and context words from both sides.
pub fn novel_f1(
    prediction: &[TokenId],
    reference: &[TokenId],
    context: &[TokenId],
    common: &CommonWordList,
) -> f64 {
    let mut filter = common.id_set();
    filter.extend(context.iter().cloned());
    let pred: Vec<TokenId> = prediction
        .iter()
        .cloned()
        .filter(|t| !filter.contains(t))
        .collect();
    let refr: Vec<TokenId> = reference
        .iter()
        .cloned()
        .filter(|t| !filter.contains(t))
        .collect();
    token_f1(&pred, &refr)
}

/// Max over ranks 1..k of `score(outputs[i], references[i])`. A `k` larger
/// than the available ranks is clamped.
pub fn max_overlap_at_k<F>(
    outputs: &[Vec<TokenId>],
    references: &[Vec<TokenId>],
    k: usize,
    score: F,
) -> Result<f64>
where
    F: Fn(&[TokenId], &[TokenId]) -> f64,
{
    if outputs.len() != references.len() {
        return Err(Error::MisalignedCandidates(format!(
            "{} outputs vs {} references",
            outputs.len(),
            references.len()
        )));
    }
    if outputs.is_empty() {
        return Err(Error::EmptyTokens("ranked outputs"));
    }
    let depth = k.min(outputs.len()).max(1);
    Ok(outputs[..depth]
        .iter()
        .zip(&references[..depth])
        .map(|(o, r)| score(o, r))
        .fold(f64::NEG_INFINITY, f64::max))
}

/// F1 between a generation and the gold passage tokens.
pub fn knowledge_f1(generated: &[TokenId], gold_passage: &[TokenId]) -> f64 {
    token_f1(generated, gold_passage)
}

/// Mean cumulative probability per rank over sorted-descending candidate
/// distributions, with the uniform rank/n baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharpnessCurve {
    pub cumulative: Vec<f64>,
    pub uniform_baseline: Vec<f64>,
}

pub fn sharpness_curve(distributions: &[CandidateDistribution]) -> Result<SharpnessCurve> {
    if distributions.is_empty() {
        return Err(Error::EmptyTokens("distribution list"));
    }
    let max_rank = distributions.iter().map(|d| d.len()).max().unwrap();
    let mut cumulative = vec![0.0; max_rank];
    let mut baseline = vec![0.0; max_rank];
    for d in distributions {
        let mut running = 0.0;
        for r in 0..max_rank {
            if r < d.len() {
                running += d.probs[r];
            }
            // ranks past the end hold the full mass
            cumulative[r] += running.min(1.0);
            baseline[r] += (((r + 1) as f64) / d.len() as f64).min(1.0);
        }
    }
    let n = distributions.len() as f64;
    for r in 0..max_rank {
        cumulative[r] /= n;
        baseline[r] /= n;
    }
    Ok(SharpnessCurve {
        cumulative,
        uniform_baseline: baseline,
    })
}

/// Distribution proportional to `exp(gll)` under a uniform prior over the
/// candidate set: the generator read as a posterior over passages.
pub fn posterior_from_loglikes(
    example_id: usize,
    loglikes: &[(PassageId, f64)],
) -> Result<CandidateDistribution> {
    if loglikes.is_empty() {
        return Err(Error::EmptyTokens("candidate set"));
    }
    let scored: Vec<(PassageId, f64)> = loglikes.to_vec();
    CandidateDistribution::from_scores(example_id, scored, 1.0, ModelRole::Retriever)
}

/// Scalar overlap block reused by grounding and end-to-end sections.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OverlapBlock {
    pub f1_at_1: f64,
    pub novel_f1_at_1: f64,
    pub max_f1_at_5: f64,
    pub max_novel_f1_at_5: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub mrr: f64,
    pub success_at: BTreeMap<usize, f64>,
    /// Overlap between generations and the retrieved passage they condition on.
    pub f1_at_1: f64,
    pub novel_f1_at_1: f64,
    pub max_f1_at_5: f64,
    pub max_novel_f1_at_5: f64,
    /// Overlap between the top-1 generation and the gold passage.
    pub knowledge_f1: f64,
    /// Overlap between generations and the human-written gold target.
    pub end_to_end: OverlapBlock,
    pub max_knowledge_f1_at_5: f64,
    pub skipped_missing_gold: usize,
    pub sharpness: BTreeMap<String, SharpnessCurve>,
}

impl EvalReport {
    /// Flat scalar view for report comparison; curves are excluded.
    pub fn scalar_metrics(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        m.insert("mrr".into(), self.mrr);
        for (k, v) in &self.success_at {
            m.insert(format!("success_at_{k}"), *v);
        }
        m.insert("f1_at_1".into(), self.f1_at_1);
        m.insert("novel_f1_at_1".into(), self.novel_f1_at_1);
        m.insert("max_f1_at_5".into(), self.max_f1_at_5);
        m.insert("max_novel_f1_at_5".into(), self.max_novel_f1_at_5);
        m.insert("knowledge_f1".into(), self.knowledge_f1);
        m.insert("max_knowledge_f1_at_5".into(), self.max_knowledge_f1_at_5);
        m.insert("e2e_f1_at_1".into(), self.end_to_end.f1_at_1);
        m.insert("e2e_novel_f1_at_1".into(), self.end_to_end.novel_f1_at_1);
        m.insert("e2e_max_f1_at_5".into(), self.end_to_end.max_f1_at_5);
        m.insert(
            "e2e_max_novel_f1_at_5".into(),
            self.end_to_end.max_novel_f1_at_5,
        );
        m
    }
}

pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub decode_depth: usize,
    pub beams: usize,
    pub max_len: usize,
    pub common_mass_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![1, 5, 10],
            decode_depth: 5,
            beams: crate::generator::DEFAULT_BEAMS,
            max_len: crate::generator::DEFAULT_MAX_LEN,
            common_mass_threshold: 0.5,
        }
    }
}

struct PerExample {
    ranking: Vec<PassageId>,
    gold: Option<PassageId>,
    grounding_f1: f64,
    grounding_novel: f64,
    grounding_f1s: Vec<f64>,
    grounding_novels: Vec<f64>,
    e2e_f1: f64,
    e2e_novel: f64,
    e2e_f1s: Vec<f64>,
    e2e_novels: Vec<f64>,
    knowledge: Option<f64>,
    knowledges: Option<Vec<f64>>,
    retriever_dist: CandidateDistribution,
    guide_dist: Option<CandidateDistribution>,
    generator_posterior: CandidateDistribution,
}

/// Runs the full evaluation: exact retrieval, beam decoding against each of
/// the top passages, and every overlap measure, aggregated over examples.
pub fn evaluate_models(
    retriever: &RetrieverModel,
    guide: Option<&RetrieverModel>,
    generator: &GeneratorModel,
    corpus: &Corpus,
    examples: &[Example],
    common: &CommonWordList,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::InvalidConfig("no examples to evaluate".into()));
    }
    let max_k = cfg.ks.iter().cloned().max().unwrap_or(10).min(corpus.len());
    let depth = cfg.decode_depth.min(max_k).max(1);

    let per: Vec<PerExample> = examples
        .par_iter()
        .map(|ex| -> Result<PerExample> {
            let ranked = top_k(retriever, &ex.context_tokens, corpus, max_k)?;
            let ranking: Vec<PassageId> = ranked.iter().map(|&(id, _)| id).collect();
            let retriever_dist = CandidateDistribution::from_scores(
                ex.id,
                ranked.clone(),
                retriever.temperature,
                retriever.role,
            )?;

            let scorer = TargetScorer::new(generator, &ex.context_tokens, &ex.target_tokens)?;
            let loglikes: Vec<(PassageId, f64)> = ranking
                .iter()
                .map(|&id| {
                    let p = corpus.passage(id).expect("ranked id exists");
                    scorer.log_likelihood(&p.tokens).map(|ll| (id, ll))
                })
                .collect::<Result<Vec<_>>>()?;
            let generator_posterior = posterior_from_loglikes(ex.id, &loglikes)?;

            let guide_dist = match guide {
                Some(g) => {
                    let gq = guide_query(ex);
                    let ranked_g = top_k(g, &gq, corpus, max_k)?;
                    Some(CandidateDistribution::from_scores(
                        ex.id,
                        ranked_g,
                        g.temperature,
                        g.role,
                    )?)
                }
                None => None,
            };

            let mut outputs = Vec::with_capacity(depth);
            let mut passages = Vec::with_capacity(depth);
            for &id in ranking.iter().take(depth) {
                let p = corpus.passage(id).expect("ranked id exists");
                let out = generator.decode(
                    &ex.context_tokens,
                    &p.tokens,
                    DecodeMode::Beam,
                    cfg.beams,
                    cfg.max_len,
                )?;
                outputs.push(out);
                passages.push(p.tokens.clone());
            }

            let grounding_f1s: Vec<f64> = outputs
                .iter()
                .zip(&passages)
                .map(|(o, p)| token_f1(o, p))
                .collect();
            let grounding_novels: Vec<f64> = outputs
                .iter()
                .zip(&passages)
                .map(|(o, p)| novel_f1(o, p, &ex.context_tokens, common))
                .collect();
            let e2e_f1s: Vec<f64> = outputs
                .iter()
                .map(|o| token_f1(o, &ex.target_tokens))
                .collect();
            let e2e_novels: Vec<f64> = outputs
                .iter()
                .map(|o| novel_f1(o, &ex.target_tokens, &ex.context_tokens, common))
                .collect();

            let (knowledge, knowledges) = match ex.gold_passage_id {
                Some(gid) => {
                    let gold_tokens = &corpus.passage(gid).expect("validated at load").tokens;
                    let per_rank: Vec<f64> = outputs
                        .iter()
                        .map(|o| knowledge_f1(o, gold_tokens))
                        .collect();
                    (Some(per_rank[0]), Some(per_rank))
                }
                None => (None, None),
            };

            Ok(PerExample {
                ranking,
                gold: ex.gold_passage_id,
                grounding_f1: grounding_f1s[0],
                grounding_novel: grounding_novels[0],
                grounding_f1s,
                grounding_novels,
                e2e_f1: e2e_f1s[0],
                e2e_novel: e2e_novels[0],
                e2e_f1s,
                e2e_novels,
                knowledge,
                knowledges,
                retriever_dist,
                guide_dist,
                generator_posterior,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let rankings: Vec<Vec<PassageId>> = per.iter().map(|p| p.ranking.clone()).collect();
    let golds: Vec<Option<PassageId>> = per.iter().map(|p| p.gold).collect();

    let mut success_at = BTreeMap::new();
    let mut skipped = 0;
    for &k in &cfg.ks {
        let s = success_at_k(&rankings, &golds, k)?;
        skipped = s.skipped;
        success_at.insert(k, s.value);
    }
    let mrr_v = mrr(&rankings, &golds);

    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let max_at = |per_rank: &[Vec<f64>]| {
        mean(
            &per_rank
                .iter()
                .map(|v| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
                .collect::<Vec<_>>(),
        )
    };

    let grounding_f1_lists: Vec<Vec<f64>> = per.iter().map(|p| p.grounding_f1s.clone()).collect();
    let grounding_novel_lists: Vec<Vec<f64>> =
        per.iter().map(|p| p.grounding_novels.clone()).collect();
    let e2e_f1_lists: Vec<Vec<f64>> = per.iter().map(|p| p.e2e_f1s.clone()).collect();
    let e2e_novel_lists: Vec<Vec<f64>> = per.iter().map(|p| p.e2e_novels.clone()).collect();

    let knowledge_values: Vec<f64> = per.iter().filter_map(|p| p.knowledge).collect();
    let knowledge_lists: Vec<Vec<f64>> = per.iter().filter_map(|p| p.knowledges.clone()).collect();

    let mut sharpness = BTreeMap::new();
    sharpness.insert(
        "retriever".to_string(),
        sharpness_curve(&per.iter().map(|p| p.retriever_dist.clone()).collect::<Vec<_>>())?,
    );
    sharpness.insert(
        "generator_posterior".to_string(),
        sharpness_curve(
            &per.iter()
                .map(|p| p.generator_posterior.clone())
                .collect::<Vec<_>>(),
        )?,
    );
    if per.iter().all(|p| p.guide_dist.is_some()) {
        sharpness.insert(
            "guide".to_string(),
            sharpness_curve(
                &per.iter()
                    .map(|p| p.guide_dist.clone().unwrap())
                    .collect::<Vec<_>>(),
            )?,
        );
    }

    Ok(EvalReport {
        mrr: mrr_v.value,
        success_at,
        f1_at_1: mean(&per.iter().map(|p| p.grounding_f1).collect::<Vec<_>>()),
        novel_f1_at_1: mean(&per.iter().map(|p| p.grounding_novel).collect::<Vec<_>>()),
        max_f1_at_5: max_at(&grounding_f1_lists),
        max_novel_f1_at_5: max_at(&grounding_novel_lists),
        knowledge_f1: if knowledge_values.is_empty() {
            0.0
        } else {
            mean(&knowledge_values)
        },
        end_to_end: OverlapBlock {
            f1_at_1: mean(&per.iter().map(|p| p.e2e_f1).collect::<Vec<_>>()),
            novel_f1_at_1: mean(&per.iter().map(|p| p.e2e_novel).collect::<Vec<_>>()),
            max_f1_at_5: max_at(&e2e_f1_lists),
            max_novel_f1_at_5: max_at(&e2e_novel_lists),
        },
        max_knowledge_f1_at_5: if knowledge_lists.is_empty() {
            0.0
        } else {
            max_at(&knowledge_lists)
        },
        skipped_missing_gold: skipped,
        sharpness,
    })
}

/// Renders sharpness curves as CSV: rank, one cumulative column per model,
/// and the uniform baseline.
pub fn sharpness_to_csv(curves: &BTreeMap<String, SharpnessCurve>) -> String {
    let mut header = vec!["rank".to_string()];
    let names: Vec<&String> = curves.keys().collect();
    for n in &names {
        header.push(format!("{n}_cumulative_prob"));
    }
    header.push("uniform_baseline".to_string());
    let max_rank = curves
        .values()
        .map(|c| c.cumulative.len())
        .max()
        .unwrap_or(0);
    let mut out = header.join(",") + "\n";
    for r in 0..max_rank {
        let mut row = vec![(r + 1).to_string()];
        for n in &names {
            let c = &curves[*n].cumulative;
            let v = if r < c.len() { c[r] } else { 1.0 };
            row.push(format!("{v:.6}"));
        }
        let baseline = curves
            .values()
            .next()
            .map(|c| {
                let b = &c.uniform_baseline;
                if r < b.len() {
                    b[r]
                } else {
                    1.0
                }
            })
            .unwrap_or(1.0);
        row.push(format!("{baseline:.6}"));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
