//! Training objectives over truncated retrieval distributions.
//!
//! Retrieval distributions are categoricals over documents parameterized
//! by inner-product scores. Exact normalization over a large collection is
//! off the table, so every quantity here lives on a small support: the
//! top-k documents under the relevant retriever, with the distribution
//! renormalized on that support.
//!
//! Two objectives share this machinery. The marginal objective scores a
//! response by log-sum of `p(z|x) p(y|z,x)` over the prior's top-k. The
//! bound objective introduces a second retriever conditioned on the
//! response and maximizes an expected log-likelihood under it minus a KL
//! term tying it back to the prior; the expectation runs over the
//! posterior's top-k, and the KL runs over the union of both supports with
//! both distributions renormalized there.
//!
//! The KL truncation utilities ([`delta_for_epsilon`],
//! [`truncated_kl_delta`]) implement the threshold rule that keeps a
//! truncated KL within a chosen epsilon of the exact value: keep the terms
//! where the reference probability is at most delta or the weight
//! probability is at least delta.

use std::collections::HashSet;
use std::f64::consts::E;

use crate::corpus::{DocTable, InstanceEncoding};
use crate::error::{Error, Result};
use crate::index::{DocumentIndex, TopKResult};
use crate::models::{
    decoder_log_likelihood, encode_ids, BundleVars, GradSet, ModelBundle,
};
use crate::numerics::{log_softmax_slice, lse_slice, softmax_slice, Tape, Tensor, ValueId};

/// Which objective a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Rag,
    Vrag,
}

impl Objective {
    /// The parameter tensors this objective trains. The document encoder is
    /// frozen under both, and the posterior only exists under the bound.
    pub fn trainable_keys(self) -> Vec<crate::models::ParamKey> {
        use crate::models::ParamKey;
        let mut keys: Vec<ParamKey> = ParamKey::PRIOR.into_iter().collect();
        if self == Objective::Vrag {
            keys.extend(ParamKey::POSTERIOR);
        }
        keys.extend(ParamKey::DECODER);
        keys
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rag" => Ok(Objective::Rag),
            "vrag" => Ok(Objective::Vrag),
            other => Err(Error::invalid(format!(
                "unknown objective `{}`, expected rag or vrag",
                other
            ))),
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Objective::Rag => "rag",
            Objective::Vrag => "vrag",
        })
    }
}

/// A categorical over a document support, renormalized on that support.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedCategorical {
    doc_ids: Vec<String>,
    log_probs: Vec<f64>,
}

impl TruncatedCategorical {
    /// Builds from unnormalized log-space scores aligned with `doc_ids`.
    pub fn from_scores(doc_ids: Vec<String>, scores: &[f64]) -> Result<Self> {
        if doc_ids.is_empty() || doc_ids.len() != scores.len() {
            return Err(Error::invalid(format!(
                "support has {} ids but {} scores",
                doc_ids.len(),
                scores.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("retrieval scores must be finite"));
        }
        let mut seen = HashSet::new();
        for id in &doc_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::invalid(format!("duplicate document {} in support", id)));
            }
        }
        Ok(TruncatedCategorical {
            doc_ids,
            log_probs: log_softmax_slice(scores),
        })
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|lp| lp.exp()).collect()
    }

    pub fn support_size(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn log_prob_of(&self, doc_id: &str) -> Option<f64> {
        self.doc_ids
            .iter()
            .position(|id| id == doc_id)
            .map(|i| self.log_probs[i])
    }
}

/// Borrowed view of everything an objective evaluation needs: the models,
/// the index built from the frozen document encoder, and the generator-side
/// document bodies.
#[derive(Debug, Clone, Copy)]
pub struct ModelContext<'a> {
    pub bundle: &'a ModelBundle,
    pub index: &'a DocumentIndex,
    pub docs: &'a DocTable,
}

impl<'a> ModelContext<'a> {
    pub fn new(bundle: &'a ModelBundle, index: &'a DocumentIndex, docs: &'a DocTable) -> Self {
        ModelContext { bundle, index, docs }
    }

    /// Top-k documents under the context-only retriever.
    pub fn prior_topk(&self, enc: &InstanceEncoding, k: usize) -> Result<TopKResult> {
        let query = encode_ids(&self.bundle.prior, &enc.prior_input)?;
        self.index.search(&query, k)
    }

    /// Top-k documents under the response-aware retriever.
    pub fn posterior_topk(&self, enc: &InstanceEncoding, k: usize) -> Result<TopKResult> {
        let query = encode_ids(&self.bundle.posterior, &enc.posterior_input)?;
        self.index.search(&query, k)
    }

    /// Generator log-likelihood of the instance's target given a document.
    pub fn log_likelihood(&self, enc: &InstanceEncoding, doc_id: &str) -> Result<f64> {
        decoder_log_likelihood(
            &self.bundle.dims,
            &self.bundle.decoder,
            &enc.generator_context,
            self.docs.body(doc_id)?,
            &enc.target,
        )
    }

    fn log_likelihoods(&self, enc: &InstanceEncoding, ids: &[&str]) -> Result<Vec<f64>> {
        ids.iter().map(|id| self.log_likelihood(enc, id)).collect()
    }
}

/// Context retrieval distribution renormalized on its top-k support.
pub fn prior_truncated(
    ctx: &ModelContext,
    enc: &InstanceEncoding,
    k: usize,
) -> Result<TruncatedCategorical> {
    let hits = ctx.prior_topk(enc, k)?;
    TruncatedCategorical::from_scores(
        hits.hits.iter().map(|h| h.doc_id.clone()).collect(),
        &hits.scores(),
    )
}

/// Response-aware retrieval distribution renormalized on its top-k support.
pub fn posterior_truncated(
    ctx: &ModelContext,
    enc: &InstanceEncoding,
    k: usize,
) -> Result<TruncatedCategorical> {
    let hits = ctx.posterior_topk(enc, k)?;
    TruncatedCategorical::from_scores(
        hits.hits.iter().map(|h| h.doc_id.clone()).collect(),
        &hits.scores(),
    )
}

/// log-sum over the support of `prob * exp(log_lik)`, in log space.
pub fn log_marginal(log_probs: &[f64], log_liks: &[f64]) -> Result<f64> {
    if log_probs.is_empty() || log_probs.len() != log_liks.len() {
        return Err(Error::invalid(format!(
            "log_marginal needs matching non-empty inputs, got {} and {}",
            log_probs.len(),
            log_liks.len()
        )));
    }
    let combined: Vec<f64> = log_probs
        .iter()
        .zip(log_liks)
        .map(|(lp, ll)| lp + ll)
        .collect();
    if combined.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("log_marginal inputs must be finite"));
    }
    Ok(lse_slice(&combined))
}

/// Expected log-likelihood under softmax of the given scores.
pub fn expected_log_likelihood(scores: &[f64], log_liks: &[f64]) -> Result<f64> {
    if scores.is_empty() || scores.len() != log_liks.len() {
        return Err(Error::invalid(format!(
            "expected_log_likelihood needs matching non-empty inputs, got {} and {}",
            scores.len(),
            log_liks.len()
        )));
    }
    if scores.iter().chain(log_liks).any(|v| !v.is_finite()) {
        return Err(Error::invalid("expected_log_likelihood inputs must be finite"));
    }
    let weights = softmax_slice(scores);
    Ok(weights.iter().zip(log_liks).map(|(w, ll)| w * ll).sum())
}

/// KL between two score-parameterized categoricals renormalized on the
/// same support: KL(softmax(q_scores) || softmax(p_scores)). Weights that
/// underflow to zero contribute nothing.
pub fn kl_on_support(q_scores: &[f64], p_scores: &[f64]) -> Result<f64> {
    if q_scores.is_empty() || q_scores.len() != p_scores.len() {
        return Err(Error::invalid(format!(
            "kl_on_support needs matching non-empty inputs, got {} and {}",
            q_scores.len(),
            p_scores.len()
        )));
    }
    if q_scores.iter().chain(p_scores).any(|v| !v.is_finite()) {
        return Err(Error::invalid("kl_on_support scores must be finite"));
    }
    let q = softmax_slice(q_scores);
    let lq = log_softmax_slice(q_scores);
    let lp = log_softmax_slice(p_scores);
    let mut total = 0.0;
    for i in 0..q.len() {
        if q[i] > 0.0 {
            total += q[i] * (lq[i] - lp[i]);
        }
    }
    Ok(total)
}

/// The marginal objective: log-sum of renormalized top-k retrieval
/// probability times generation likelihood. Gradients do not flow through
/// the support selection itself, only through the scores and likelihoods
/// on the selected support.
pub fn rag_objective(ctx: &ModelContext, enc: &InstanceEncoding, k: usize) -> Result<f64> {
    let trunc = prior_truncated(ctx, enc, k)?;
    let ids: Vec<&str> = trunc.doc_ids().iter().map(|s| s.as_str()).collect();
    let lls = ctx.log_likelihoods(enc, &ids)?;
    log_marginal(trunc.log_probs(), &lls)
}

fn scores_on_tape(
    tape: &mut Tape,
    ctx: &ModelContext,
    query: ValueId,
    ids: &[&str],
) -> Result<ValueId> {
    let mut parts = Vec::with_capacity(ids.len());
    for id in ids {
        let row = tape.constant(Tensor::vector(ctx.index.embedding(id)?.to_vec()));
        parts.push(tape.dot(query, row)?);
    }
    tape.stack_scalars(&parts)
}

fn log_likelihoods_on_tape(
    tape: &mut Tape,
    vars: &BundleVars,
    ctx: &ModelContext,
    enc: &InstanceEncoding,
    ids: &[&str],
) -> Result<ValueId> {
    let mut parts = Vec::with_capacity(ids.len());
    for id in ids {
        parts.push(vars.decoder.log_likelihood(
            tape,
            &ctx.bundle.dims,
            &enc.generator_context,
            ctx.docs.body(id)?,
            &enc.target,
        )?);
    }
    tape.stack_scalars(&parts)
}

/// Marginal objective with gradients for every bundle parameter. The
/// document encoder never enters the graph, so its gradients are exactly
/// zero.
pub fn rag_objective_with_grads(
    ctx: &ModelContext,
    enc: &InstanceEncoding,
    k: usize,
) -> Result<(f64, GradSet)> {
    let hits = ctx.prior_topk(enc, k)?;
    let ids = hits.ids();

    let mut tape = Tape::new();
    let vars = BundleVars::on_tape(&mut tape, ctx.bundle);
    let query = vars.prior.forward(&mut tape, &enc.prior_input)?;
    let scores = scores_on_tape(&mut tape, ctx, query, &ids)?;
    let log_probs = tape.log_softmax(scores)?;
    let lls = log_likelihoods_on_tape(&mut tape, &vars, ctx, enc, &ids)?;
    let combined = tape.add(log_probs, lls)?;
    let objective = tape.log_sum_exp(combined)?;

    let grads = tape.backward(objective)?;
    Ok((tape.scalar_value(objective)?, vars.grads(&grads, ctx.bundle)))
}

/// The bound's three reported pieces; `elbo = expectation - kl` exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboBreakdown {
    pub expectation: f64,
    pub kl: f64,
    pub elbo: f64,
}

/// Union of the two supports, ordered by descending prior score with ties
/// broken by ascending document id.
fn kl_support(
    ctx: &ModelContext,
    enc: &InstanceEncoding,
    prior_hits: &TopKResult,
    posterior_hits: &TopKResult,
) -> Result<Vec<String>> {
    let mut ids: Vec<String> = Vec::with_capacity(prior_hits.hits.len() + posterior_hits.hits.len());
    let mut seen = HashSet::new();
    for hit in prior_hits.hits.iter().chain(&posterior_hits.hits) {
        if seen.insert(hit.doc_id.as_str()) {
            ids.push(hit.doc_id.clone());
        }
    }
    let query = encode_ids(&ctx.bundle.prior, &enc.prior_input)?;
    let scores = ctx.index.scores_on_support(&query, &ids)?;
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| ids[a].cmp(&ids[b]))
    });
    Ok(order.into_iter().map(|i| ids[i].clone()).collect())
}

/// The bound objective, value only. The expectation term runs over the
/// posterior's top-k; the KL term runs over the union of both top-k
/// supports with both distributions renormalized there.
pub fn elbo(ctx: &ModelContext, enc: &InstanceEncoding, k: usize) -> Result<ElboBreakdown> {
    let posterior_hits = ctx.posterior_topk(enc, k)?;
    let prior_hits = ctx.prior_topk(enc, k)?;

    let ids = posterior_hits.ids();
    let lls = ctx.log_likelihoods(enc, &ids)?;
    let expectation = expected_log_likelihood(&posterior_hits.scores(), &lls)?;

    let union = kl_support(ctx, enc, &prior_hits, &posterior_hits)?;
    let posterior_query = encode_ids(&ctx.bundle.posterior, &enc.posterior_input)?;
    let prior_query = encode_ids(&ctx.bundle.prior, &enc.prior_input)?;
    let q_scores = ctx.index.scores_on_support(&posterior_query, &union)?;
    let p_scores = ctx.index.scores_on_support(&prior_query, &union)?;
    let kl = kl_on_support(&q_scores, &p_scores)?;

    Ok(ElboBreakdown {
        expectation,
        kl,
        elbo: expectation - kl,
    })
}

/// Bound objective with gradients for every bundle parameter.
pub fn elbo_with_grads(
    ctx: &ModelContext,
    enc: &InstanceEncoding,
    k: usize,
) -> Result<(ElboBreakdown, GradSet)> {
    let posterior_hits = ctx.posterior_topk(enc, k)?;
    let prior_hits = ctx.prior_topk(enc, k)?;
    let union = kl_support(ctx, enc, &prior_hits, &posterior_hits)?;
    let union_ids: Vec<&str> = union.iter().map(|s| s.as_str()).collect();
    let expectation_ids = posterior_hits.ids();

    let mut tape = Tape::new();
    let vars = BundleVars::on_tape(&mut tape, ctx.bundle);
    let posterior_query = vars.posterior.forward(&mut tape, &enc.posterior_input)?;
    let prior_query = vars.prior.forward(&mut tape, &enc.prior_input)?;

    let expectation_scores = scores_on_tape(&mut tape, ctx, posterior_query, &expectation_ids)?;
    let weights = tape.softmax(expectation_scores)?;
    let lls = log_likelihoods_on_tape(&mut tape, &vars, ctx, enc, &expectation_ids)?;
    let expectation = tape.dot(weights, lls)?;

    let q_scores = scores_on_tape(&mut tape, ctx, posterior_query, &union_ids)?;
    let p_scores = scores_on_tape(&mut tape, ctx, prior_query, &union_ids)?;
    let q_probs = tape.softmax(q_scores)?;
    let lq = tape.log_softmax(q_scores)?;
    let lp = tape.log_softmax(p_scores)?;
    let neg_lp = tape.scale(lp, -1.0)?;
    let log_ratio = tape.add(lq, neg_lp)?;
    let kl = tape.dot(q_probs, log_ratio)?;

    let neg_kl = tape.scale(kl, -1.0)?;
    let objective = tape.add(expectation, neg_kl)?;

    let grads = tape.backward(objective)?;
    let breakdown = ElboBreakdown {
        expectation: tape.scalar_value(expectation)?,
        kl: tape.scalar_value(kl)?,
        elbo: tape.scalar_value(objective)?,
    };
    Ok((breakdown, vars.grads(&grads, ctx.bundle)))
}

fn check_distribution(name: &str, p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::invalid(format!("{} distribution is empty", name)));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid(format!(
            "{} distribution has negative or non-finite mass",
            name
        )));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!(
            "{} distribution sums to {}, expected 1",
            name, sum
        )));
    }
    Ok(())
}

/// Exact KL(q || p) over a full shared support. Positive infinity when q
/// puts mass where p has none.
pub fn exact_kl(q: &[f64], p: &[f64]) -> Result<f64> {
    check_distribution("q", q)?;
    check_distribution("p", p)?;
    if q.len() != p.len() {
        return Err(Error::invalid(format!(
            "KL needs equal supports, got {} and {}",
            q.len(),
            p.len()
        )));
    }
    let mut total = 0.0;
    for (&qi, &pi) in q.iter().zip(p) {
        if qi > 0.0 {
            if pi == 0.0 {
                return Ok(f64::INFINITY);
            }
            total += qi * (qi / pi).ln();
        }
    }
    Ok(total)
}

/// Threshold for [`truncated_kl_delta`] that keeps the truncation error
/// below `epsilon` for supports of size `n`:
/// `min((eps/2n) / ln(2n/eps), 1/e)`.
pub fn delta_for_epsilon(epsilon: f64, n: usize) -> Result<f64> {
    if !epsilon.is_finite() || epsilon <= 0.0 {
        return Err(Error::invalid("epsilon must be a positive finite number"));
    }
    if n == 0 {
        return Err(Error::invalid("support size must be positive"));
    }
    let cap = E.recip();
    let ratio = 2.0 * n as f64 / epsilon;
    if ratio <= 1.0 {
        // The log would be non-positive; only the cap applies.
        return Ok(cap);
    }
    Ok(((epsilon / (2.0 * n as f64)) / ratio.ln()).min(cap))
}

/// KL(q || p) summed only over `S(delta) = {p <= delta} union {q >= delta}`,
/// without renormalization. Positive infinity (never NaN) when a kept term
/// has q > 0 and p = 0.
pub fn truncated_kl_delta(q: &[f64], p: &[f64], delta: f64) -> Result<f64> {
    check_distribution("q", q)?;
    check_distribution("p", p)?;
    if q.len() != p.len() {
        return Err(Error::invalid(format!(
            "KL needs equal supports, got {} and {}",
            q.len(),
            p.len()
        )));
    }
    if !delta.is_finite() || delta <= 0.0 {
        return Err(Error::invalid("delta must be a positive finite number"));
    }
    let mut total = 0.0;
    for (&qi, &pi) in q.iter().zip(p) {
        if pi <= delta || qi >= delta {
            if qi > 0.0 {
                if pi == 0.0 {
                    return Ok(f64::INFINITY);
                }
                total += qi * (qi / pi).ln();
            }
        }
    }
    Ok(total)
}
