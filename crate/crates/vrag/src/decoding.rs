//! Generation from the trained decoder.
//!
//! The step distribution depends only on the previous token once the
//! context and document pools are fixed, so beam search memoizes one
//! distribution per previous-token id and reuses it across beams and
//! steps. Search keeps `beam_width` live prefixes, retires a prefix to the
//! completed pool when it emits `<eos>`, and drops live prefixes that are
//! already strictly below the best completed score (step log-probabilities
//! are non-positive, so they cannot recover). No length normalization is
//! applied anywhere.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{marker, InstanceEncoding, TokenId};
use crate::error::{Error, Result};
use crate::models::{copy_bonus, decoder_pools, decoder_step_logprobs, DecoderParams};
use crate::objectives::{prior_truncated, ModelContext, TruncatedCategorical};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub max_len: usize,
    /// Documents considered by the grounded top-k strategy.
    pub k: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_width: 3,
            max_len: 32,
            k: 5,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 || self.max_len == 0 || self.k == 0 {
            return Err(Error::invalid(
                "beam_width, max_len, and k must all be positive",
            ));
        }
        Ok(())
    }
}

/// One scored token sequence from beam search.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Generated ids; ends with `<eos>` unless the length cap hit first.
    pub tokens: Vec<TokenId>,
    /// Sum of step log-probabilities.
    pub log_prob: f64,
}

/// A generation tied to the document it was conditioned on.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    pub source_doc_id: String,
}

struct Beam {
    tokens: Vec<TokenId>,
    log_prob: f64,
}

/// Orders finalists best-first: higher score wins, equal scores prefer the
/// lexicographically smaller token sequence.
fn better(a_score: f64, a_tokens: &[TokenId], b_score: f64, b_tokens: &[TokenId]) -> bool {
    match a_score.total_cmp(&b_score) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => a_tokens < b_tokens,
    }
}

/// Beam-search generation conditioned on one document body.
pub fn beam_search(
    decoder: &DecoderParams,
    context_ids: &[TokenId],
    doc_ids: &[TokenId],
    cfg: &DecodeConfig,
) -> Result<Generation> {
    cfg.validate()?;
    let (xbar, zbar) = decoder_pools(decoder, context_ids, doc_ids)?;
    let bonus = copy_bonus(decoder, decoder.out_bias.len(), doc_ids)?;
    let mut memo: HashMap<TokenId, Vec<f64>> = HashMap::new();

    let mut live = vec![Beam {
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    let mut completed: Vec<Beam> = Vec::new();

    for _ in 0..cfg.max_len {
        if live.is_empty() {
            break;
        }
        let mut extensions: Vec<Beam> = Vec::new();
        for beam in &live {
            let prev = beam.tokens.last().copied().unwrap_or(marker::BOS);
            if !memo.contains_key(&prev) {
                let dist = decoder_step_logprobs(decoder, prev, &xbar, &zbar, &bonus)?;
                memo.insert(prev, dist);
            }
            let dist = &memo[&prev];
            let mut order: Vec<TokenId> = (0..dist.len()).collect();
            order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
            for &tok in order.iter().take(cfg.beam_width) {
                let mut tokens = beam.tokens.clone();
                tokens.push(tok);
                extensions.push(Beam {
                    tokens,
                    log_prob: beam.log_prob + dist[tok],
                });
            }
        }
        extensions.sort_by(|a, b| {
            b.log_prob
                .total_cmp(&a.log_prob)
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        extensions.truncate(cfg.beam_width);

        live = Vec::new();
        for beam in extensions {
            if beam.tokens.last() == Some(&marker::EOS) {
                completed.push(beam);
            } else {
                live.push(beam);
            }
        }
        if let Some(best) = completed
            .iter()
            .map(|b| b.log_prob)
            .max_by(f64::total_cmp)
        {
            live.retain(|b| b.log_prob >= best);
        }
    }

    let mut winner: Option<Beam> = None;
    for beam in completed.into_iter().chain(live) {
        let replace = match &winner {
            None => true,
            Some(w) => better(beam.log_prob, &beam.tokens, w.log_prob, &w.tokens),
        };
        if replace {
            winner = Some(beam);
        }
    }
    let beam = winner.expect("max_len >= 1 always yields at least one finalist");
    Ok(Generation {
        tokens: beam.tokens,
        log_prob: beam.log_prob,
    })
}

/// Generates from the single best document under the context retriever.
pub fn decode_top1(
    ctx: &ModelContext,
    enc: &InstanceEncoding,
    cfg: &DecodeConfig,
) -> Result<Candidate> {
    cfg.validate()?;
    let hits = ctx.prior_topk(enc, 1)?;
    let doc_id = hits.hits[0].doc_id.clone();
    let generation = beam_search(
        &ctx.bundle.decoder,
        &enc.generator_context,
        ctx.docs.body(&doc_id)?,
        cfg,
    )?;
    Ok(Candidate {
        tokens: generation.tokens,
        log_prob: generation.log_prob,
        source_doc_id: doc_id,
    })
}

/// Picks the winner by renormalized retrieval probability times generation
/// probability; equal scores prefer the smaller document id. `candidates`
/// is aligned with the truncation's support order.
fn select_grounded(trunc: &TruncatedCategorical, candidates: Vec<Candidate>) -> Candidate {
    let mut best: Option<(f64, Candidate)> = None;
    for (log_prior, cand) in trunc.log_probs().iter().zip(candidates) {
        let score = log_prior + cand.log_prob;
        let replace = match &best {
            None => true,
            Some((s, b)) => match score.total_cmp(s) {
                std::cmp::Ordering::Greater => true,
                std::cmp::Ordering::Less => false,
                std::cmp::Ordering::Equal => cand.source_doc_id < b.source_doc_id,
            },
        };
        if replace {
            best = Some((score, cand));
        }
    }
    best.expect("truncation support is never empty").1
}

/// Generates one response per top-k document and keeps the jointly most
/// probable (retrieval times generation) candidate.
pub fn decode_topk(
    ctx: &ModelContext,
    enc: &InstanceEncoding,
    cfg: &DecodeConfig,
) -> Result<Candidate> {
    cfg.validate()?;
    let trunc = prior_truncated(ctx, enc, cfg.k)?;
    let mut candidates = Vec::with_capacity(trunc.support_size());
    for doc_id in trunc.doc_ids() {
        let generation = beam_search(
            &ctx.bundle.decoder,
            &enc.generator_context,
            ctx.docs.body(doc_id)?,
            cfg,
        )?;
        candidates.push(Candidate {
            tokens: generation.tokens,
            log_prob: generation.log_prob,
            source_doc_id: doc_id.clone(),
        });
    }
    Ok(select_grounded(&trunc, candidates))
}

/// Named decode strategies the evaluation layer can be pointed at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeStrategy {
    /// Condition on the single best retrieved document.
    Top1,
    /// Generate per top-k document, keep the jointly best candidate.
    TopK,
}

impl DecodeStrategy {
    pub fn decode(
        self,
        ctx: &ModelContext,
        enc: &InstanceEncoding,
        cfg: &DecodeConfig,
    ) -> Result<Candidate> {
        match self {
            DecodeStrategy::Top1 => decode_top1(ctx, enc, cfg),
            DecodeStrategy::TopK => decode_topk(ctx, enc, cfg),
        }
    }
}

impl std::fmt::Display for DecodeStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DecodeStrategy::Top1 => "top1",
            DecodeStrategy::TopK => "topk",
        })
    }
}

impl std::str::FromStr for DecodeStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top1" => Ok(DecodeStrategy::Top1),
            "topk" => Ok(DecodeStrategy::TopK),
            other => Err(Error::invalid(format!(
                "unknown decode strategy {:?}, expected top1 or topk",
                other
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{encode_instance, generate_synthetic, Budgets, DocTable, SyntheticSpec, Vocabulary};
    use crate::models::{init_bundle, Dims, ModelBundle};
    use crate::numerics::Tensor;
    use approx::assert_relative_eq;

    fn tiny_decoder(vocab: usize, seed: u64) -> (Dims, ModelBundle) {
        let dims = Dims {
            vocab,
            retrieval: 3,
            embedding: 2,
            hidden: 2,
        };
        (dims, init_bundle(dims, seed).unwrap())
    }

    #[test]
    fn grounded_selection_multiplies_retrieval_and_generation() {
        // Retrieval probabilities 0.9 / 0.1; generation log-probs -3 / -0.5.
        // The weaker retrieval wins on the joint score.
        let trunc = TruncatedCategorical::from_scores(
            vec!["doc-0".into(), "doc-1".into()],
            &[0.9f64.ln(), 0.1f64.ln()],
        )
        .unwrap();
        let combined: Vec<f64> = trunc
            .log_probs()
            .iter()
            .zip([-3.0, -0.5])
            .map(|(lp, g)| lp + g)
            .collect();
        assert_relative_eq!(combined[0], -3.1053605156578263, epsilon = 1e-12);
        assert_relative_eq!(combined[1], -2.8025850929940455, epsilon = 1e-12);

        let cand = |doc: &str, lp: f64| Candidate {
            tokens: vec![10, marker::EOS],
            log_prob: lp,
            source_doc_id: doc.into(),
        };
        let picked = select_grounded(&trunc, vec![cand("doc-0", -3.0), cand("doc-1", -0.5)]);
        assert_eq!(picked.source_doc_id, "doc-1");
    }

    #[test]
    fn grounded_selection_breaks_ties_toward_smaller_doc_id() {
        let trunc = TruncatedCategorical::from_scores(
            vec!["doc-7".into(), "doc-2".into()],
            &[0.0, 0.0],
        )
        .unwrap();
        let cand = |doc: &str| Candidate {
            tokens: vec![marker::EOS],
            log_prob: -1.0,
            source_doc_id: doc.into(),
        };
        let picked = select_grounded(&trunc, vec![cand("doc-7"), cand("doc-2")]);
        assert_eq!(picked.source_doc_id, "doc-2");
    }

    #[test]
    fn immediate_eos_yields_a_single_token_generation() {
        let (_, mut bundle) = tiny_decoder(16, 3);
        let mut bias = Tensor::zeros(&[16]);
        bias.values_mut()[marker::EOS] = 50.0;
        bundle.decoder.out_bias = bias;
        let out = beam_search(&bundle.decoder, &[10], &[11], &DecodeConfig::default()).unwrap();
        assert_eq!(out.tokens, vec![marker::EOS]);
        assert!(out.log_prob <= 0.0 && out.log_prob > -1e-6);
    }

    #[test]
    fn length_cap_stops_a_decoder_that_never_closes() {
        let (_, mut bundle) = tiny_decoder(16, 4);
        let mut bias = Tensor::zeros(&[16]);
        bias.values_mut()[12] = 50.0;
        bundle.decoder.out_bias = bias;
        let cfg = DecodeConfig {
            max_len: 5,
            ..DecodeConfig::default()
        };
        let out = beam_search(&bundle.decoder, &[10], &[11], &cfg).unwrap();
        assert_eq!(out.tokens, vec![12, 12, 12, 12, 12]);
    }

    #[test]
    fn single_beam_matches_a_greedy_rollout() {
        for seed in 0..20u64 {
            let (_, bundle) = tiny_decoder(18, seed);
            let cfg = DecodeConfig {
                beam_width: 1,
                max_len: 8,
                k: 1,
            };
            let x = vec![10, 12];
            let z = vec![14, 15];
            let beam = beam_search(&bundle.decoder, &x, &z, &cfg).unwrap();

            let (xbar, zbar) = decoder_pools(&bundle.decoder, &x, &z).unwrap();
            let bonus = copy_bonus(&bundle.decoder, 18, &z).unwrap();
            let mut tokens = Vec::new();
            let mut total = 0.0;
            let mut prev = marker::BOS;
            for _ in 0..cfg.max_len {
                let dist =
                    decoder_step_logprobs(&bundle.decoder, prev, &xbar, &zbar, &bonus).unwrap();
                let mut arg = 0;
                for (i, v) in dist.iter().enumerate() {
                    if *v > dist[arg] {
                        arg = i;
                    }
                }
                tokens.push(arg);
                total += dist[arg];
                prev = arg;
                if arg == marker::EOS {
                    break;
                }
            }
            assert_eq!(beam.tokens, tokens, "seed {}", seed);
            assert_relative_eq!(beam.log_prob, total, epsilon = 1e-12);
        }
    }

    #[test]
    fn wider_beams_never_score_worse() {
        for seed in 0..12u64 {
            let (_, bundle) = tiny_decoder(18, seed);
            let narrow = DecodeConfig {
                beam_width: 1,
                max_len: 6,
                k: 1,
            };
            let wide = DecodeConfig {
                beam_width: 4,
                ..narrow
            };
            let a = beam_search(&bundle.decoder, &[10, 11], &[12], &narrow).unwrap();
            let b = beam_search(&bundle.decoder, &[10, 11], &[12], &wide).unwrap();
            assert!(
                b.log_prob >= a.log_prob - 1e-12,
                "seed {}: wide {} narrow {}",
                seed,
                b.log_prob,
                a.log_prob
            );
        }
    }

    #[test]
    fn grounded_topk_with_one_document_equals_the_plain_strategy() {
        let spec = SyntheticSpec {
            num_documents: 8,
            vocab_size: 60,
            train_instances: 5,
            val_instances: 1,
            test_instances: 1,
            seed: 9,
            ..SyntheticSpec::default()
        };
        let corpus = generate_synthetic(&spec).unwrap();
        let tokens = corpus
            .documents
            .iter()
            .flat_map(|d| d.tokens.iter())
            .map(|s| s.as_str());
        let vocab = Vocabulary::build(tokens, 1);
        let budgets = Budgets::default();
        let dims = Dims {
            vocab: vocab.len(),
            retrieval: 4,
            embedding: 3,
            hidden: 4,
        };
        let bundle = init_bundle(dims, 21).unwrap();
        let index = bundle.build_index(&corpus.documents, &vocab, &budgets).unwrap();
        let docs = DocTable::build(&corpus.documents, &vocab, &budgets).unwrap();
        let ctx = ModelContext::new(&bundle, &index, &docs);
        let cfg = DecodeConfig {
            k: 1,
            max_len: 8,
            ..DecodeConfig::default()
        };
        for inst in &corpus.train {
            let enc = encode_instance(inst, &vocab, &budgets);
            let a = decode_top1(&ctx, &enc, &cfg).unwrap();
            let b = decode_topk(&ctx, &enc, &cfg).unwrap();
            assert_eq!(a, b);
        }
    }
}
