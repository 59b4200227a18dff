//! Retrieval and generation metrics, plus the two standing studies.
//!
//! Retrieval quality is recall@k and MRR@5 of the gold document under a
//! chosen retriever. Generation quality is sentence-level n-gram overlap
//! averaged over instances and exported in percentage points, alongside a
//! grounding-penalized variant that zeroes any instance whose top-1
//! retrieved document is not the gold one: copying fluently from the wrong
//! document should not score.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{DocTable, InstanceEncoding, TokenId, Vocabulary, MARKERS};
use crate::decoding::{Candidate, DecodeConfig, DecodeStrategy};
use crate::error::{Error, Result};
use crate::index::DocumentIndex;
use crate::models::ModelBundle;
use crate::objectives::{ModelContext, Objective};
use crate::training::{train, TrainConfig, TrainingData};

/// Which retriever a metric run scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Retriever {
    Prior,
    Posterior,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub r_at_1: f64,
    pub r_at_3: f64,
    pub r_at_5: f64,
    pub mrr_at_5: f64,
}

/// Fraction of instances whose gold document ranks within the cutoff.
/// Ranks are 1-based; `None` means the gold document was not retrieved.
pub fn recall_at(ranks: &[Option<usize>], cutoff: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    let hits = ranks
        .iter()
        .filter(|r| matches!(r, Some(rank) if *rank <= cutoff))
        .count();
    hits as f64 / ranks.len() as f64
}

/// Mean reciprocal rank, zero beyond the cutoff.
pub fn mrr_at(ranks: &[Option<usize>], cutoff: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    let total: f64 = ranks
        .iter()
        .map(|r| match r {
            Some(rank) if *rank <= cutoff => 1.0 / *rank as f64,
            _ => 0.0,
        })
        .sum();
    total / ranks.len() as f64
}

/// Gold ranks under the chosen retriever for every gold-labeled instance.
fn gold_ranks(
    ctx: &ModelContext,
    encs: &[InstanceEncoding],
    retriever: Retriever,
    cutoff: usize,
) -> Result<Vec<Option<usize>>> {
    let mut ranks = Vec::new();
    for enc in encs {
        let Some(gold) = &enc.gold_doc_id else { continue };
        let hits = match retriever {
            Retriever::Prior => ctx.prior_topk(enc, cutoff)?,
            Retriever::Posterior => ctx.posterior_topk(enc, cutoff)?,
        };
        ranks.push(
            hits.hits
                .iter()
                .position(|h| &h.doc_id == gold)
                .map(|p| p + 1),
        );
    }
    Ok(ranks)
}

/// Recall@{1,3,5} and MRR@5 of the gold document over all gold-labeled
/// instances in the slice. Unlabeled instances are excluded.
pub fn retrieval_metrics(
    ctx: &ModelContext,
    encs: &[InstanceEncoding],
    retriever: Retriever,
) -> Result<RetrievalMetrics> {
    let ranks = gold_ranks(ctx, encs, retriever, 5)?;
    if ranks.is_empty() {
        return Err(Error::invalid(
            "retrieval metrics need at least one gold-labeled instance",
        ));
    }
    Ok(RetrievalMetrics {
        r_at_1: recall_at(&ranks, 1),
        r_at_3: recall_at(&ranks, 3),
        r_at_5: recall_at(&ranks, 5),
        mrr_at_5: mrr_at(&ranks, 5),
    })
}

fn ngram_counts(tokens: &[String], order: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= order {
        for gram in tokens.windows(order) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence-level n-gram overlap in [0, 1]: geometric mean of clipped
/// i-gram precisions up to `max_order` times a brevity penalty
/// `exp(min(0, 1 - ref_len/hyp_len))`. Orders above 1 are add-one
/// smoothed; unigram precision is not, so a hypothesis sharing no tokens
/// with the reference scores zero. An empty hypothesis scores zero.
pub fn sentence_bleu(hypothesis: &[String], reference: &[String], max_order: usize) -> Result<f64> {
    if max_order == 0 {
        return Err(Error::invalid("bleu needs max_order >= 1"));
    }
    if hypothesis.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for order in 1..=max_order {
        let total = hypothesis.len().saturating_sub(order - 1);
        let ref_counts = ngram_counts(reference, order);
        let hyp_counts = ngram_counts(hypothesis, order);
        let mut matched = 0usize;
        for (gram, count) in hyp_counts {
            matched += count.min(ref_counts.get(gram).copied().unwrap_or(0));
        }
        let (num, den) = if order == 1 {
            (matched as f64, total as f64)
        } else {
            ((matched + 1) as f64, (total + 1) as f64)
        };
        if num == 0.0 {
            return Ok(0.0);
        }
        log_sum += (num / den).ln() / max_order as f64;
    }
    let bp = (1.0 - reference.len() as f64 / hypothesis.len() as f64)
        .min(0.0)
        .exp();
    Ok(bp * log_sum.exp())
}

/// Maps generated ids back to words, dropping the structural markers.
pub fn generation_words(tokens: &[TokenId], vocab: &Vocabulary) -> Vec<String> {
    tokens
        .iter()
        .filter(|&&t| t >= MARKERS.len())
        .map(|&t| vocab.token(t).to_string())
        .collect()
}

/// Mean generation scores of one decode strategy, in percentage points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationMetrics {
    pub b1: f64,
    pub b4: f64,
    /// As b1/b4 but an instance scores zero unless its top-1 retrieved
    /// document is the gold one.
    pub penalized_b1: f64,
    pub penalized_b4: f64,
}

fn bleu_pair(cand: &Candidate, enc: &InstanceEncoding, vocab: &Vocabulary) -> Result<(f64, f64)> {
    let words = generation_words(&cand.tokens, vocab);
    let b1 = sentence_bleu(&words, &enc.response_tokens, 1)?;
    let b4 = sentence_bleu(&words, &enc.response_tokens, 4)?;
    Ok((b1, b4))
}

/// Mean generation metrics of one decode strategy over a slice.
pub fn generation_metrics(
    ctx: &ModelContext,
    vocab: &Vocabulary,
    encs: &[InstanceEncoding],
    strategy: DecodeStrategy,
    cfg: &DecodeConfig,
) -> Result<GenerationMetrics> {
    if encs.is_empty() {
        return Err(Error::invalid("generation metrics need at least one instance"));
    }
    let mut sums = (0.0, 0.0, 0.0, 0.0);
    for enc in encs {
        let cand = strategy.decode(ctx, enc, cfg)?;
        let (b1, b4) = bleu_pair(&cand, enc, vocab)?;
        sums.0 += b1;
        sums.1 += b4;
        let retrieved = ctx.prior_topk(enc, 1)?;
        if enc.gold_doc_id.as_deref() == Some(retrieved.hits[0].doc_id.as_str()) {
            sums.2 += b1;
            sums.3 += b4;
        }
    }
    let scale = 100.0 / encs.len() as f64;
    Ok(GenerationMetrics {
        b1: sums.0 * scale,
        b4: sums.1 * scale,
        penalized_b1: sums.2 * scale,
        penalized_b4: sums.3 * scale,
    })
}

/// Everything an evaluation run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Instances evaluated.
    pub instances: usize,
    /// Instances without a gold label, excluded from retrieval metrics.
    pub unlabeled: usize,
    pub prior: RetrievalMetrics,
    pub posterior: RetrievalMetrics,
    /// Keyed by strategy name ("top1", "topk").
    pub strategies: BTreeMap<String, GenerationMetrics>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::invalid(e.to_string()))
    }

    /// Long-format rows: metric,strategy,value. Retrieval rows and counts
    /// leave the strategy empty.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::invalid(e.to_string()))?;
        let io_err = |e: csv::Error| Error::invalid(e.to_string());
        w.write_record(["metric", "strategy", "value"]).map_err(io_err)?;
        let unkeyed = [
            ("instances", self.instances as f64),
            ("unlabeled", self.unlabeled as f64),
            ("prior_r_at_1", self.prior.r_at_1),
            ("prior_r_at_3", self.prior.r_at_3),
            ("prior_r_at_5", self.prior.r_at_5),
            ("prior_mrr_at_5", self.prior.mrr_at_5),
            ("posterior_r_at_1", self.posterior.r_at_1),
            ("posterior_r_at_3", self.posterior.r_at_3),
            ("posterior_r_at_5", self.posterior.r_at_5),
            ("posterior_mrr_at_5", self.posterior.mrr_at_5),
        ];
        for (name, value) in unkeyed {
            let rendered = value.to_string();
            w.write_record([name, "", rendered.as_str()]).map_err(io_err)?;
        }
        for (strategy, m) in &self.strategies {
            for (name, value) in [
                ("b1", m.b1),
                ("b4", m.b4),
                ("penalized_b1", m.penalized_b1),
                ("penalized_b4", m.penalized_b4),
            ] {
                let rendered = value.to_string();
                w.write_record([name, strategy.as_str(), rendered.as_str()])
                    .map_err(io_err)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Full test-time evaluation: retrieval under both retrievers, generation
/// under the given strategies.
pub fn evaluate(
    ctx: &ModelContext,
    vocab: &Vocabulary,
    encs: &[InstanceEncoding],
    strategies: &[DecodeStrategy],
    cfg: &DecodeConfig,
) -> Result<EvalReport> {
    let prior = retrieval_metrics(ctx, encs, Retriever::Prior)?;
    let posterior = retrieval_metrics(ctx, encs, Retriever::Posterior)?;
    let mut by_name = BTreeMap::new();
    for &strategy in strategies {
        by_name.insert(
            strategy.to_string(),
            generation_metrics(ctx, vocab, encs, strategy, cfg)?,
        );
    }
    Ok(EvalReport {
        instances: encs.len(),
        unlabeled: encs.iter().filter(|e| e.gold_doc_id.is_none()).count(),
        prior,
        posterior,
        strategies: by_name,
    })
}

/// Relative change of `after` against `before`, in percent. Negative when
/// the score fell.
fn drop_percent(before: f64, after: f64) -> f64 {
    100.0 * (after - before) / before
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorizationRow {
    pub strategy: String,
    pub metric: String,
    pub before: f64,
    pub after: f64,
    /// 100 * (after - before) / before; negative when the score fell.
    pub drop_percent: f64,
}

/// Removes every gold document of the evaluation slice from the index and
/// measures how far n-gram overlap falls when the generator can only be
/// conditioned on leftover documents. A generator that merely copies from
/// the retrieved document must lose ground; one that had memorized the
/// answers would not.
pub fn memorization_study(
    bundle: &ModelBundle,
    index: &DocumentIndex,
    docs: &DocTable,
    vocab: &Vocabulary,
    encs: &[InstanceEncoding],
    cfg: &DecodeConfig,
) -> Result<Vec<MemorizationRow>> {
    let mut golds: Vec<String> = encs
        .iter()
        .filter_map(|e| e.gold_doc_id.clone())
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    golds.sort();
    if golds.is_empty() {
        return Err(Error::StudyCheck(
            "memorization study needs gold-labeled instances".into(),
        ));
    }
    if golds.len() >= index.len() {
        return Err(Error::StudyCheck(
            "removing every gold document would empty the index".into(),
        ));
    }
    let pruned = index.remove(&golds)?;

    let full_ctx = ModelContext::new(bundle, index, docs);
    let pruned_ctx = ModelContext::new(bundle, &pruned, docs);
    let mut rows = Vec::new();
    for strategy in [DecodeStrategy::Top1, DecodeStrategy::TopK] {
        let before = generation_metrics(&full_ctx, vocab, encs, strategy, cfg)?;
        let after = generation_metrics(&pruned_ctx, vocab, encs, strategy, cfg)?;
        for (metric, b, a) in [("b1", before.b1, after.b1), ("b4", before.b4, after.b4)] {
            if b <= 0.0 {
                return Err(Error::StudyCheck(format!(
                    "{} under {} is zero before removal; the study is vacuous",
                    metric, strategy
                )));
            }
            rows.push(MemorizationRow {
                strategy: strategy.to_string(),
                metric: metric.to_string(),
                before: b,
                after: a,
                drop_percent: drop_percent(b, a),
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub objective: Objective,
    pub k: usize,
    pub seed: u64,
    pub test: RetrievalMetrics,
}

/// Trains a fresh model per (objective, k, seed) cell and reports test
/// retrieval quality of the trained context retriever.
pub fn topk_ablation(
    data: &TrainingData,
    dims: crate::models::Dims,
    base: &TrainConfig,
    objectives: &[Objective],
    ks: &[usize],
    seeds: &[u64],
) -> Result<Vec<AblationCell>> {
    if objectives.is_empty() || ks.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("ablation needs objectives, ks, and seeds"));
    }
    let mut cells = Vec::new();
    for &objective in objectives {
        for &k in ks {
            for &seed in seeds {
                let config = TrainConfig {
                    objective,
                    k,
                    ..base.clone()
                };
                let outcome = train(data, dims, &config, seed)?;
                let ctx = ModelContext::new(&outcome.bundle, &outcome.index, &data.docs);
                let test = retrieval_metrics(&ctx, &data.test, Retriever::Prior)?;
                cells.push(AblationCell {
                    objective,
                    k,
                    seed,
                    test,
                });
            }
        }
    }
    Ok(cells)
}

/// One row per (strategy, metric) pair of a memorization run.
pub fn write_memorization_csv(path: &Path, rows: &[MemorizationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::invalid(e.to_string()))?;
    let io_err = |e: csv::Error| Error::invalid(e.to_string());
    w.write_record(["strategy", "metric", "before", "after", "drop_percent"])
        .map_err(io_err)?;
    for row in rows {
        w.write_record([
            row.strategy.clone(),
            row.metric.clone(),
            row.before.to_string(),
            row.after.to_string(),
            row.drop_percent.to_string(),
        ])
        .map_err(io_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row per ablation cell; the k and seed columns round-trip as written.
pub fn write_ablation_csv(path: &Path, cells: &[AblationCell]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::invalid(e.to_string()))?;
    let io_err = |e: csv::Error| Error::invalid(e.to_string());
    w.write_record(["objective", "k", "seed", "r_at_1", "r_at_3", "r_at_5", "mrr_at_5"])
        .map_err(io_err)?;
    for cell in cells {
        w.write_record([
            cell.objective.to_string(),
            cell.k.to_string(),
            cell.seed.to_string(),
            cell.test.r_at_1.to_string(),
            cell.test.r_at_3.to_string(),
            cell.test.r_at_5.to_string(),
            cell.test.mrr_at_5.to_string(),
        ])
        .map_err(io_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Serializes study rows the same way for both studies.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    let body = serde_json::to_string_pretty(value).map_err(|e| Error::invalid(e.to_string()))?;
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn words(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn unigram_overlap_with_brevity_penalty_matches_hand_value() {
        let hyp = words(&["the", "cat"]);
        let reference = words(&["the", "cat", "sat"]);
        let b1 = sentence_bleu(&hyp, &reference, 1).unwrap();
        // Perfect precision, penalized by exp(1 - 3/2).
        assert_relative_eq!(b1, 0.6065306597126334, epsilon = 1e-15);
        assert_relative_eq!(b1, (-0.5f64).exp(), epsilon = 1e-15);
        // Smoothing keeps the higher orders from zeroing the score.
        let b4 = sentence_bleu(&hyp, &reference, 4).unwrap();
        assert_relative_eq!(b4, (-0.5f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn perfect_match_scores_one_and_disjoint_scores_zero() {
        let reference = words(&["it", "is", "blue", "."]);
        assert_relative_eq!(
            sentence_bleu(&reference, &reference, 4).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        assert_eq!(sentence_bleu(&words(&["red"]), &reference, 1).unwrap(), 0.0);
        assert_eq!(sentence_bleu(&[], &reference, 4).unwrap(), 0.0);
    }

    #[test]
    fn long_hypotheses_pay_no_brevity_penalty_but_lose_precision() {
        let reference = words(&["the", "cat", "sat"]);
        let hyp = words(&["the", "cat", "sat", "there"]);
        let b1 = sentence_bleu(&hyp, &reference, 1).unwrap();
        assert_relative_eq!(b1, 0.75, epsilon = 1e-15);
    }

    #[test]
    fn clipping_caps_repeated_tokens_at_reference_counts() {
        let reference = words(&["the", "cat"]);
        let hyp = words(&["the", "the", "the"]);
        let b1 = sentence_bleu(&hyp, &reference, 1).unwrap();
        // One clipped match out of three, no brevity penalty.
        assert_relative_eq!(b1, 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn rank_metrics_match_hand_computation() {
        let ranks = [Some(1), Some(3), None, Some(7)];
        assert_relative_eq!(recall_at(&ranks, 1), 0.25, epsilon = 1e-15);
        assert_relative_eq!(recall_at(&ranks, 3), 0.5, epsilon = 1e-15);
        assert_relative_eq!(recall_at(&ranks, 5), 0.5, epsilon = 1e-15);
        assert_relative_eq!(
            mrr_at(&ranks, 5),
            (1.0 + 1.0 / 3.0) / 4.0,
            epsilon = 1e-15
        );
        assert_eq!(recall_at(&[], 5), 0.0);
    }

    #[test]
    fn drop_is_relative_to_the_before_score() {
        // A 13.97 score falling to about 7.93 is a 43.22 percent drop.
        let change = drop_percent(13.97, 7.932166);
        assert_relative_eq!(change, -43.22, epsilon = 1e-12);
        assert_relative_eq!(drop_percent(0.5, 0.5), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn ablation_rows_round_trip_through_csv() {
        let metrics = RetrievalMetrics {
            r_at_1: 0.25,
            r_at_3: 0.5,
            r_at_5: 0.625,
            mrr_at_5: 0.4,
        };
        let cells = vec![
            AblationCell {
                objective: Objective::Vrag,
                k: 5,
                seed: 1,
                test: metrics,
            },
            AblationCell {
                objective: Objective::Rag,
                k: 1,
                seed: 2,
                test: metrics,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ablation.csv");
        write_ablation_csv(&path, &cells).unwrap();

        let mut reader = csv::Reader::from_path(&path).unwrap();
        let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 2);
        assert_eq!(&rows[0][0], "vrag");
        assert_eq!(rows[0][1].parse::<usize>().unwrap(), 5);
        assert_eq!(&rows[1][0], "rag");
        assert_eq!(rows[1][1].parse::<usize>().unwrap(), 1);
        assert_eq!(rows[1][2].parse::<u64>().unwrap(), 2);
        assert_relative_eq!(rows[0][6].parse::<f64>().unwrap(), 0.4, epsilon = 1e-12);
    }
}
