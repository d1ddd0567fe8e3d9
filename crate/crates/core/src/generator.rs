//! Conditional token generator with analytic gradients.
//!
//! A log-linear bigram model over the vocabulary: the logit of word `w`
//! mixes a bias, similarity to the unit-mean context encoding, similarity
//! to the unit-mean passage encoding, and similarity to the previous token
//! embedding. `lambda_psg` literally measures how much the generator trusts
//! the conditioning passage. Targets are scored with a terminal EOS so
//! likelihoods are comparable across lengths.

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, BOS, EOS};
use crate::embedder::EmbeddingTable;
use crate::error::{Error, Result};
use crate::math::{dot, log_sum_exp, normalized_mean};

pub const DEFAULT_BEAMS: usize = 4;
pub const DEFAULT_MAX_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorModel {
    pub table: EmbeddingTable,
    pub bias: Vec<f64>,
    pub lambda_ctx: f64,
    pub lambda_psg: f64,
    pub lambda_prev: f64,
}

/// Gradient aggregate for every live generator parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorGrads {
    pub bias: Vec<f64>,
    pub lambda_ctx: f64,
    pub lambda_psg: f64,
    pub lambda_prev: f64,
    pub rows: Vec<Vec<f64>>,
}

impl GeneratorGrads {
    pub fn zeros(vocab_size: usize, dim: usize) -> Self {
        GeneratorGrads {
            bias: vec![0.0; vocab_size],
            lambda_ctx: 0.0,
            lambda_psg: 0.0,
            lambda_prev: 0.0,
            rows: vec![vec![0.0; dim]; vocab_size],
        }
    }

    pub fn zero(&mut self) {
        self.bias.iter_mut().for_each(|x| *x = 0.0);
        self.lambda_ctx = 0.0;
        self.lambda_psg = 0.0;
        self.lambda_prev = 0.0;
        for r in self.rows.iter_mut() {
            r.iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// Distribution over the vocabulary for one decoding step.
#[derive(Debug, Clone)]
pub struct StepDistribution {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam,
}

impl GeneratorModel {
    pub fn new(table: EmbeddingTable, lambda_ctx: f64, lambda_psg: f64, lambda_prev: f64) -> Self {
        let vocab = table.vocab_size();
        GeneratorModel {
            table,
            bias: vec![0.0; vocab],
            lambda_ctx,
            lambda_psg,
            lambda_prev,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.bias.len()
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        let v = self.vocab_size();
        for &t in tokens {
            if t >= v {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab_size: v,
                });
            }
        }
        Ok(())
    }

    /// Logits and probabilities for the next token given context, passage,
    /// and previous token.
    pub fn step_logits(
        &self,
        context_tokens: &[TokenId],
        passage_tokens: &[TokenId],
        prev_token: TokenId,
    ) -> Result<StepDistribution> {
        if passage_tokens.is_empty() {
            return Err(Error::EmptyTokens("passage"));
        }
        self.check_tokens(context_tokens)?;
        self.check_tokens(passage_tokens)?;
        self.check_tokens(&[prev_token])?;

        let dim = self.table.dim();
        let ctx_mean = normalized_mean(self.table.rows(), context_tokens, dim);
        let psg_mean = normalized_mean(self.table.rows(), passage_tokens, dim);
        let prev = self.table.row(prev_token);
        let logits: Vec<f64> = (0..self.vocab_size())
            .map(|w| {
                let e = self.table.row(w);
                self.bias[w]
                    + self.lambda_ctx * dot(e, &ctx_mean)
                    + self.lambda_psg * dot(e, &psg_mean)
                    + self.lambda_prev * dot(e, prev)
            })
            .collect();
        let lse = log_sum_exp(&logits);
        let probs = logits.iter().map(|&l| (l - lse).exp()).collect();
        Ok(StepDistribution { logits, probs })
    }

    /// Sum of step log-probabilities of the target tokens plus terminal EOS,
    /// starting from BOS.
    pub fn log_likelihood(
        &self,
        context_tokens: &[TokenId],
        target_tokens: &[TokenId],
        passage_tokens: &[TokenId],
    ) -> Result<f64> {
        let scorer = TargetScorer::new(self, context_tokens, target_tokens)?;
        scorer.log_likelihood(passage_tokens)
    }

    /// Analytic gradient of [`Self::log_likelihood`] with respect to bias,
    /// the three mixing weights, and the embedding rows.
    pub fn grad_log_likelihood(
        &self,
        context_tokens: &[TokenId],
        target_tokens: &[TokenId],
        passage_tokens: &[TokenId],
    ) -> Result<GeneratorGrads> {
        let mut grads = GeneratorGrads::zeros(self.vocab_size(), self.table.dim());
        let scorer = TargetScorer::new(self, context_tokens, target_tokens)?;
        scorer.accumulate_grad(passage_tokens, 1.0, &mut grads)?;
        Ok(grads)
    }

    /// Gradient-ascent step on all parameters; embedding rows are projected
    /// back to unit length. The caller owns zeroing of `grads`.
    pub fn apply_gradients(&mut self, grads: &GeneratorGrads, learning_rate: f64) -> Result<()> {
        if learning_rate < 0.0 || !learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be finite and >= 0, got {learning_rate}"
            )));
        }
        if learning_rate == 0.0 {
            return Ok(());
        }
        for g in grads
            .bias
            .iter()
            .chain([&grads.lambda_ctx, &grads.lambda_psg, &grads.lambda_prev])
        {
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    what: "generator gradient".into(),
                });
            }
        }
        for (b, g) in self.bias.iter_mut().zip(&grads.bias) {
            *b += learning_rate * g;
        }
        self.lambda_ctx += learning_rate * grads.lambda_ctx;
        self.lambda_psg += learning_rate * grads.lambda_psg;
        self.lambda_prev += learning_rate * grads.lambda_prev;
        for (tok, row) in grads.rows.iter().enumerate() {
            self.table.accumulate_grad(tok, 1.0, row);
        }
        self.table.apply_gradients(learning_rate)
    }

    /// Greedy or beam decoding. Stops each hypothesis at EOS or `max_len`;
    /// ties break by lower token id, then lower beam index.
    pub fn decode(
        &self,
        context_tokens: &[TokenId],
        passage_tokens: &[TokenId],
        mode: DecodeMode,
        beams: usize,
        max_len: usize,
    ) -> Result<Vec<TokenId>> {
        if beams == 0 || max_len == 0 {
            return Err(Error::InvalidConfig(
                "decode needs beams >= 1 and max_len >= 1".into(),
            ));
        }
        let beams = match mode {
            DecodeMode::Greedy => 1,
            DecodeMode::Beam => beams,
        };

        struct Hyp {
            tokens: Vec<TokenId>,
            score: f64,
        }
        let mut active = vec![Hyp {
            tokens: Vec::new(),
            score: 0.0,
        }];
        let mut completed: Vec<Hyp> = Vec::new();

        for _ in 0..max_len {
            if active.is_empty() {
                break;
            }
            // (cumulative score, token, beam index) for every expansion
            let mut expansions: Vec<(f64, TokenId, usize)> = Vec::new();
            for (bi, hyp) in active.iter().enumerate() {
                let prev = *hyp.tokens.last().unwrap_or(&BOS);
                let step = self.step_logits(context_tokens, passage_tokens, prev)?;
                let lse = log_sum_exp(&step.logits);
                for (tok, &logit) in step.logits.iter().enumerate() {
                    expansions.push((hyp.score + logit - lse, tok, bi));
                }
            }
            expansions.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .expect("finite scores")
                    .then_with(|| a.1.cmp(&b.1))
                    .then_with(|| a.2.cmp(&b.2))
            });
            let mut next_active = Vec::with_capacity(beams);
            for &(score, tok, bi) in expansions.iter().take(beams) {
                if tok == EOS {
                    completed.push(Hyp {
                        tokens: active[bi].tokens.clone(),
                        score,
                    });
                } else {
                    let mut tokens = active[bi].tokens.clone();
                    tokens.push(tok);
                    next_active.push(Hyp { tokens, score });
                }
            }
            active = next_active;
        }
        // hypotheses cut off at max_len compete with their running score
        completed.extend(active);
        let best = completed
            .into_iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| {
                a.score
                    .partial_cmp(&b.score)
                    .expect("finite scores")
                    .then_with(|| ib.cmp(ia)) // earlier completion wins ties
            })
            .expect("at least one hypothesis");
        Ok(best.1.tokens)
    }
}

/// Per-(context, target) cache for scoring many candidate passages. The
/// context and previous-token dot products are shared across candidates;
/// only the passage feature is recomputed per call.
pub struct TargetScorer<'m> {
    model: &'m GeneratorModel,
    ctx_tokens: Vec<TokenId>,
    ctx_mean: Vec<f64>,
    /// (prev, next) pairs: (BOS, y_1), ..., (y_L, EOS).
    steps: Vec<(TokenId, TokenId)>,
    /// bias[w] + lambda_ctx * dot(e_w, ctx_mean)
    base: Vec<f64>,
    cdot: Vec<f64>,
    /// dot(e_w, e_prev) for each distinct prev appearing in `steps`.
    prev_dots: Vec<(TokenId, Vec<f64>)>,
}

impl<'m> TargetScorer<'m> {
    pub fn new(
        model: &'m GeneratorModel,
        context_tokens: &[TokenId],
        target_tokens: &[TokenId],
    ) -> Result<Self> {
        model.check_tokens(context_tokens)?;
        model.check_tokens(target_tokens)?;
        let dim = model.table.dim();
        let vocab = model.vocab_size();
        let ctx_mean = normalized_mean(model.table.rows(), context_tokens, dim);

        let mut steps = Vec::with_capacity(target_tokens.len() + 1);
        let mut prev = BOS;
        for &t in target_tokens {
            steps.push((prev, t));
            prev = t;
        }
        steps.push((prev, EOS));

        let cdot: Vec<f64> = (0..vocab)
            .map(|w| dot(model.table.row(w), &ctx_mean))
            .collect();
        let base: Vec<f64> = (0..vocab)
            .map(|w| model.bias[w] + model.lambda_ctx * cdot[w])
            .collect();

        let mut prev_dots: Vec<(TokenId, Vec<f64>)> = Vec::new();
        for &(p, _) in &steps {
            if prev_dots.iter().all(|&(q, _)| q != p) {
                let pv = model.table.row(p);
                let dots = (0..vocab).map(|w| dot(model.table.row(w), pv)).collect();
                prev_dots.push((p, dots));
            }
        }

        Ok(TargetScorer {
            model,
            ctx_tokens: context_tokens.to_vec(),
            ctx_mean,
            steps,
            base,
            cdot,
            prev_dots,
        })
    }

    fn prev_dot(&self, prev: TokenId) -> &[f64] {
        &self
            .prev_dots
            .iter()
            .find(|&&(p, _)| p == prev)
            .expect("prev token cached")
            .1
    }

    pub fn log_likelihood(&self, passage_tokens: &[TokenId]) -> Result<f64> {
        if passage_tokens.is_empty() {
            return Err(Error::EmptyTokens("passage"));
        }
        self.model.check_tokens(passage_tokens)?;
        let model = self.model;
        let dim = model.table.dim();
        let vocab = model.vocab_size();
        let psg_mean = normalized_mean(model.table.rows(), passage_tokens, dim);
        let zdot: Vec<f64> = (0..vocab)
            .map(|w| dot(model.table.row(w), &psg_mean))
            .collect();

        let mut total = 0.0;
        let mut logits = vec![0.0; vocab];
        for &(prev, next) in &self.steps {
            let pdot = self.prev_dot(prev);
            for w in 0..vocab {
                logits[w] =
                    self.base[w] + model.lambda_psg * zdot[w] + model.lambda_prev * pdot[w];
            }
            let lse = log_sum_exp(&logits);
            total += logits[next] - lse;
        }
        Ok(total)
    }

    /// Adds `scale * d(log_likelihood)/d(params)` into `grads`.
    pub fn accumulate_grad(
        &self,
        passage_tokens: &[TokenId],
        scale: f64,
        grads: &mut GeneratorGrads,
    ) -> Result<()> {
        if passage_tokens.is_empty() {
            return Err(Error::EmptyTokens("passage"));
        }
        self.model.check_tokens(passage_tokens)?;
        let model = self.model;
        let dim = model.table.dim();
        let vocab = model.vocab_size();

        // raw (pre-normalization) passage mean and its unit version
        let mut psg_raw = vec![0.0; dim];
        for &t in passage_tokens {
            for (m, r) in psg_raw.iter_mut().zip(model.table.row(t)) {
                *m += r;
            }
        }
        for m in psg_raw.iter_mut() {
            *m /= passage_tokens.len() as f64;
        }
        let psg_raw_norm = crate::math::l2_norm(&psg_raw);
        let psg_mean: Vec<f64> = if psg_raw_norm > 0.0 {
            psg_raw.iter().map(|&x| x / psg_raw_norm).collect()
        } else {
            vec![0.0; dim]
        };
        let zdot: Vec<f64> = (0..vocab)
            .map(|w| dot(model.table.row(w), &psg_mean))
            .collect();

        // raw context mean norm, for the chain rule through normalization
        let ctx_raw_norm = if self.ctx_tokens.is_empty() {
            0.0
        } else {
            let mut m = vec![0.0; dim];
            for &t in &self.ctx_tokens {
                for (mi, r) in m.iter_mut().zip(model.table.row(t)) {
                    *mi += r;
                }
            }
            for mi in m.iter_mut() {
                *mi /= self.ctx_tokens.len() as f64;
            }
            crate::math::l2_norm(&m)
        };

        let mut logits = vec![0.0; vocab];
        let mut probs = vec![0.0; vocab];
        for &(prev, next) in &self.steps {
            let pdot = self.prev_dot(prev);
            for w in 0..vocab {
                logits[w] =
                    self.base[w] + model.lambda_psg * zdot[w] + model.lambda_prev * pdot[w];
            }
            let lse = log_sum_exp(&logits);
            for w in 0..vocab {
                probs[w] = (logits[w] - lse).exp();
            }

            // expected feature values under the step distribution
            let mut exp_cdot = 0.0;
            let mut exp_zdot = 0.0;
            let mut exp_pdot = 0.0;
            let mut exp_row = vec![0.0; dim];
            for w in 0..vocab {
                exp_cdot += probs[w] * self.cdot[w];
                exp_zdot += probs[w] * zdot[w];
                exp_pdot += probs[w] * pdot[w];
                for (e, r) in exp_row.iter_mut().zip(model.table.row(w)) {
                    *e += probs[w] * r;
                }
            }

            grads.lambda_ctx += scale * (self.cdot[next] - exp_cdot);
            grads.lambda_psg += scale * (zdot[next] - exp_zdot);
            grads.lambda_prev += scale * (pdot[next] - exp_pdot);

            // bias and output-embedding gradients: (delta_w - p_w) weights
            let prev_row = model.table.row(prev).to_vec();
            for w in 0..vocab {
                let weight = scale * ((w == next) as u8 as f64 - probs[w]);
                grads.bias[w] += weight;
                let gw = &mut grads.rows[w];
                for d in 0..dim {
                    gw[d] += weight
                        * (model.lambda_ctx * self.ctx_mean[d]
                            + model.lambda_psg * psg_mean[d]
                            + model.lambda_prev * prev_row[d]);
                }
            }

            // previous-token embedding: lambda_prev * (e_next - E_p[e_w])
            {
                let next_row = model.table.row(next);
                let gp = &mut grads.rows[prev];
                for d in 0..dim {
                    gp[d] += scale * model.lambda_prev * (next_row[d] - exp_row[d]);
                }
            }

            // context / passage means: chain through the normalization
            // cx = m / |m|  =>  df/dm = (g - cx <cx, g>) / |m|
            if !self.ctx_tokens.is_empty() && ctx_raw_norm > 1e-300 {
                let next_row = model.table.row(next);
                let g_c: Vec<f64> = (0..dim)
                    .map(|d| scale * model.lambda_ctx * (next_row[d] - exp_row[d]))
                    .collect();
                let proj = dot(&self.ctx_mean, &g_c);
                let inv_n = 1.0 / (self.ctx_tokens.len() as f64 * ctx_raw_norm);
                for &t in &self.ctx_tokens {
                    let gt = &mut grads.rows[t];
                    for d in 0..dim {
                        gt[d] += (g_c[d] - self.ctx_mean[d] * proj) * inv_n;
                    }
                }
            }
            if psg_raw_norm > 1e-300 {
                let next_row = model.table.row(next);
                let g_z: Vec<f64> = (0..dim)
                    .map(|d| scale * model.lambda_psg * (next_row[d] - exp_row[d]))
                    .collect();
                let proj = dot(&psg_mean, &g_z);
                let inv_n = 1.0 / (passage_tokens.len() as f64 * psg_raw_norm);
                for &t in passage_tokens {
                    let gt = &mut grads.rows[t];
                    for d in 0..dim {
                        gt[d] += (g_z[d] - psg_mean[d] * proj) * inv_n;
                    }
                }
            }
        }
        Ok(())
    }
}
