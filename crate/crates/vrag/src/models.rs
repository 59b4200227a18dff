//! Model parameters and forward passes.
//!
//! Three linear mean-pool encoders map token id sequences into the shared
//! retrieval space: the prior (context only), the posterior (context plus
//! response), and the frozen document encoder whose outputs populate the
//! index. Retrieval scores are plain inner products in that space.
//!
//! The generator is a tanh feed-forward language model: at step j the
//! logits are
//!
//! ```text
//! out_proj . tanh(prev_map e(y_{j-1}) + context_map xbar + doc_map zbar + hidden_bias)
//!   + out_bias + copy_scale . onehotset(z)
//! ```
//!
//! where xbar and zbar mean-pool the decoder's own embeddings of the
//! context and document segments, onehotset(z) marks the vocabulary ids
//! present in the document body, and y_0 is `<bos>`. The copy term gives
//! the likelihood a direct handle on which document was retrieved: a
//! response token that appears in one candidate document but not another
//! separates their likelihoods as soon as copy_scale leaves zero.
//!
//! Every forward exists twice: a plain f64 path for evaluation and
//! decoding, and a tape path for training. Both run the same kernels in
//! the same order, so their values agree bit for bit (tested).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    encode_context, encode_context_response, encode_document, marker, Budgets, DocumentRecord,
    TokenId, Turn, Vocabulary,
};
use crate::error::{Error, Result};
use crate::index::DocumentIndex;
use crate::numerics::{
    log_softmax_slice, matvec_slice, Gradients, Tape, Tensor, ValueId,
};

/// Model dimensions. The retrieval space, embedding width, and hidden
/// width default to the desk-scale reference configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Dims {
    pub vocab: usize,
    pub retrieval: usize,
    pub embedding: usize,
    pub hidden: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Dims {
            vocab: 0,
            retrieval: 32,
            embedding: 32,
            hidden: 64,
        }
    }
}

/// Linear mean-pool encoder: proj . meanpool(embedding[ids]) + bias.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub embedding: Tensor,
    pub proj: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub embedding: Tensor,
    pub prev_map: Tensor,
    pub context_map: Tensor,
    pub doc_map: Tensor,
    pub hidden_bias: Tensor,
    pub out_proj: Tensor,
    pub out_bias: Tensor,
    /// Rank-0 weight on the document-token logit bonus.
    pub copy_scale: Tensor,
}

/// Every trainable (and frozen) tensor in one place. The document encoder
/// is frozen by construction: no training path ever places it on a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub dims: Dims,
    pub seed: u64,
    pub prior: EncoderParams,
    pub posterior: EncoderParams,
    pub document: EncoderParams,
    pub decoder: DecoderParams,
}

/// Stable names for the bundle's tensors, used for gradient bookkeeping,
/// optimizer state, and the checkpoint layout. Order is fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamKey {
    DocEmbedding,
    DocProj,
    DocBias,
    PriorEmbedding,
    PriorProj,
    PriorBias,
    PosteriorEmbedding,
    PosteriorProj,
    PosteriorBias,
    DecEmbedding,
    DecPrevMap,
    DecContextMap,
    DecDocMap,
    DecHiddenBias,
    DecOutProj,
    DecOutBias,
    DecCopyScale,
}

impl ParamKey {
    pub const ALL: [ParamKey; 17] = [
        ParamKey::DocEmbedding,
        ParamKey::DocProj,
        ParamKey::DocBias,
        ParamKey::PriorEmbedding,
        ParamKey::PriorProj,
        ParamKey::PriorBias,
        ParamKey::PosteriorEmbedding,
        ParamKey::PosteriorProj,
        ParamKey::PosteriorBias,
        ParamKey::DecEmbedding,
        ParamKey::DecPrevMap,
        ParamKey::DecContextMap,
        ParamKey::DecDocMap,
        ParamKey::DecHiddenBias,
        ParamKey::DecOutProj,
        ParamKey::DecOutBias,
        ParamKey::DecCopyScale,
    ];

    pub const PRIOR: [ParamKey; 3] = [
        ParamKey::PriorEmbedding,
        ParamKey::PriorProj,
        ParamKey::PriorBias,
    ];

    pub const POSTERIOR: [ParamKey; 3] = [
        ParamKey::PosteriorEmbedding,
        ParamKey::PosteriorProj,
        ParamKey::PosteriorBias,
    ];

    pub const DOCUMENT: [ParamKey; 3] = [
        ParamKey::DocEmbedding,
        ParamKey::DocProj,
        ParamKey::DocBias,
    ];

    pub const DECODER: [ParamKey; 8] = [
        ParamKey::DecEmbedding,
        ParamKey::DecPrevMap,
        ParamKey::DecContextMap,
        ParamKey::DecDocMap,
        ParamKey::DecHiddenBias,
        ParamKey::DecOutProj,
        ParamKey::DecOutBias,
        ParamKey::DecCopyScale,
    ];
}

/// Gradients keyed by parameter name. Ordered map so accumulation and
/// optimizer sweeps iterate deterministically.
#[derive(Debug, Clone, Default)]
pub struct GradSet {
    grads: BTreeMap<ParamKey, Tensor>,
}

impl GradSet {
    pub fn new() -> Self {
        GradSet::default()
    }

    pub fn insert(&mut self, key: ParamKey, grad: Tensor) {
        self.grads.insert(key, grad);
    }

    pub fn get(&self, key: ParamKey) -> Option<&Tensor> {
        self.grads.get(&key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &Tensor)> {
        self.grads.iter()
    }

    /// self += other * weight, materializing missing slots as zeros.
    pub fn add_scaled(&mut self, other: &GradSet, weight: f64) {
        for (key, grad) in other.iter() {
            let slot = self
                .grads
                .entry(*key)
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            for (s, g) in slot.values_mut().iter_mut().zip(grad.values()) {
                *s += weight * g;
            }
        }
    }
}

fn fill(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let vals: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect();
    Tensor::new(shape.to_vec(), vals).expect("init values are finite")
}

fn init_encoder(rng: &mut ChaCha8Rng, dims: &Dims) -> EncoderParams {
    // The bias starts at zero: a random bias is far larger than the
    // projected content at this scale and would impose an arbitrary
    // context-independent document ranking on the initial scores.
    EncoderParams {
        embedding: fill(rng, &[dims.vocab, dims.embedding]),
        proj: fill(rng, &[dims.retrieval, dims.embedding]),
        bias: Tensor::zeros(&[dims.retrieval]),
    }
}

/// How strongly the query encoders start correlated with the frozen
/// document encoder. The blend keeps the init variance: with weight r the
/// query draw becomes r * doc + sqrt(1 - r^2) * own.
///
/// Zero would leave the query and document spaces unrelated, and then a
/// document only ever receives training signal during the rare epochs its
/// random score drifts into some context's top k; below roughly 0.8 that is
/// still how it plays out, because a truncated objective only propagates
/// signal to documents already inside the support window. The weight here
/// keeps contexts that quote a document's tokens inside that window often
/// enough for training to latch on (untrained R@1 stays near chance), the
/// desk-scale stand-in for initializing every encoder from one shared
/// pretrained checkpoint.
const QUERY_INIT_ALIGNMENT: f64 = 0.9;

fn blend_toward(dst: &mut EncoderParams, src: &EncoderParams, weight: f64) {
    let keep = (1.0 - weight * weight).sqrt();
    for (d, s) in [
        (&mut dst.embedding, &src.embedding),
        (&mut dst.proj, &src.proj),
        (&mut dst.bias, &src.bias),
    ] {
        for (dv, sv) in d.values_mut().iter_mut().zip(s.values()) {
            *dv = weight * sv + keep * *dv;
        }
    }
}

/// The copy gate starts open. At zero the gate's early gradient is weak,
/// and the cheapest way for the likelihood to exploit the retrieved
/// document is a private code memorized through doc_map: the posterior
/// routes each response to arbitrary documents the decoder has tagged with
/// it, which satisfies the objectives while grounding in nothing. Starting
/// positive makes verbatim reading the cheaper strategy from the first
/// step, so likelihood gaps between documents line up with which one
/// actually contains the response tokens.
const COPY_INIT: f64 = 2.0;

/// All parameters i.i.d. uniform in [-0.1, 0.1) from one seeded stream, in
/// a fixed draw order (document, prior, posterior, decoder); the prior and
/// posterior draws are then blended toward the document encoder's, and the
/// copy scale starts at [`COPY_INIT`] rather than a random draw.
pub fn init_bundle(dims: Dims, seed: u64) -> Result<ModelBundle> {
    if dims.vocab == 0 || dims.retrieval == 0 || dims.embedding == 0 || dims.hidden == 0 {
        return Err(Error::invalid(format!("all dims must be positive, got {:?}", dims)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let document = init_encoder(&mut rng, &dims);
    let mut prior = init_encoder(&mut rng, &dims);
    let mut posterior = init_encoder(&mut rng, &dims);
    blend_toward(&mut prior, &document, QUERY_INIT_ALIGNMENT);
    blend_toward(&mut posterior, &document, QUERY_INIT_ALIGNMENT);
    let decoder = DecoderParams {
        embedding: fill(&mut rng, &[dims.vocab, dims.embedding]),
        prev_map: fill(&mut rng, &[dims.hidden, dims.embedding]),
        context_map: fill(&mut rng, &[dims.hidden, dims.embedding]),
        doc_map: fill(&mut rng, &[dims.hidden, dims.embedding]),
        hidden_bias: fill(&mut rng, &[dims.hidden]),
        out_proj: fill(&mut rng, &[dims.vocab, dims.hidden]),
        out_bias: fill(&mut rng, &[dims.vocab]),
        copy_scale: Tensor::scalar(COPY_INIT),
    };
    Ok(ModelBundle {
        dims,
        seed,
        prior,
        posterior,
        document,
        decoder,
    })
}

fn mean_pool_rows(table: &Tensor, ids: &[TokenId]) -> Result<Vec<f64>> {
    if ids.is_empty() {
        return Err(Error::invalid("cannot pool an empty id sequence"));
    }
    let d = table.shape()[1];
    let mut pooled = vec![0.0; d];
    for &id in ids {
        if id >= table.shape()[0] {
            return Err(Error::invalid(format!(
                "token id {} out of vocabulary {}",
                id,
                table.shape()[0]
            )));
        }
        for (p, v) in pooled.iter_mut().zip(table.row(id)?) {
            *p += v;
        }
    }
    for p in pooled.iter_mut() {
        *p /= ids.len() as f64;
    }
    Ok(pooled)
}

/// proj . meanpool(embedding[ids]) + bias, off tape.
pub fn encode_ids(params: &EncoderParams, ids: &[TokenId]) -> Result<Vec<f64>> {
    let pooled = mean_pool_rows(&params.embedding, ids)?;
    let (m, n) = (params.proj.shape()[0], params.proj.shape()[1]);
    let mut out = matvec_slice(params.proj.values(), m, n, &pooled);
    for (o, b) in out.iter_mut().zip(params.bias.values()) {
        *o += b;
    }
    Ok(out)
}

impl ModelBundle {
    /// Prior retrieval query for a dialog context.
    pub fn prior_query(
        &self,
        turns: &[Turn],
        vocab: &Vocabulary,
        budgets: &Budgets,
    ) -> Result<Vec<f64>> {
        encode_ids(&self.prior, &encode_context(turns, vocab, budgets))
    }

    /// Posterior retrieval query for a (context, response) pair.
    pub fn posterior_query(
        &self,
        turns: &[Turn],
        response: &[String],
        vocab: &Vocabulary,
        budgets: &Budgets,
    ) -> Result<Vec<f64>> {
        encode_ids(
            &self.posterior,
            &encode_context_response(turns, response, vocab, budgets),
        )
    }

    /// Frozen document embedding, as stored in the index.
    pub fn document_embedding(
        &self,
        doc_tokens: &[String],
        vocab: &Vocabulary,
        budgets: &Budgets,
    ) -> Result<Vec<f64>> {
        encode_ids(&self.document, &encode_document(doc_tokens, vocab, budgets))
    }

    /// Embeds every document with the frozen encoder and builds the index.
    pub fn build_index(
        &self,
        documents: &[DocumentRecord],
        vocab: &Vocabulary,
        budgets: &Budgets,
    ) -> Result<DocumentIndex> {
        let mut entries = Vec::with_capacity(documents.len());
        for doc in documents {
            entries.push((
                doc.id.clone(),
                self.document_embedding(&doc.tokens, vocab, budgets)?,
            ));
        }
        DocumentIndex::build(entries)
    }

    pub fn param(&self, key: ParamKey) -> &Tensor {
        match key {
            ParamKey::DocEmbedding => &self.document.embedding,
            ParamKey::DocProj => &self.document.proj,
            ParamKey::DocBias => &self.document.bias,
            ParamKey::PriorEmbedding => &self.prior.embedding,
            ParamKey::PriorProj => &self.prior.proj,
            ParamKey::PriorBias => &self.prior.bias,
            ParamKey::PosteriorEmbedding => &self.posterior.embedding,
            ParamKey::PosteriorProj => &self.posterior.proj,
            ParamKey::PosteriorBias => &self.posterior.bias,
            ParamKey::DecEmbedding => &self.decoder.embedding,
            ParamKey::DecPrevMap => &self.decoder.prev_map,
            ParamKey::DecContextMap => &self.decoder.context_map,
            ParamKey::DecDocMap => &self.decoder.doc_map,
            ParamKey::DecHiddenBias => &self.decoder.hidden_bias,
            ParamKey::DecOutProj => &self.decoder.out_proj,
            ParamKey::DecOutBias => &self.decoder.out_bias,
            ParamKey::DecCopyScale => &self.decoder.copy_scale,
        }
    }

    pub fn param_mut(&mut self, key: ParamKey) -> &mut Tensor {
        match key {
            ParamKey::DocEmbedding => &mut self.document.embedding,
            ParamKey::DocProj => &mut self.document.proj,
            ParamKey::DocBias => &mut self.document.bias,
            ParamKey::PriorEmbedding => &mut self.prior.embedding,
            ParamKey::PriorProj => &mut self.prior.proj,
            ParamKey::PriorBias => &mut self.prior.bias,
            ParamKey::PosteriorEmbedding => &mut self.posterior.embedding,
            ParamKey::PosteriorProj => &mut self.posterior.proj,
            ParamKey::PosteriorBias => &mut self.posterior.bias,
            ParamKey::DecEmbedding => &mut self.decoder.embedding,
            ParamKey::DecPrevMap => &mut self.decoder.prev_map,
            ParamKey::DecContextMap => &mut self.decoder.context_map,
            ParamKey::DecDocMap => &mut self.decoder.doc_map,
            ParamKey::DecHiddenBias => &mut self.decoder.hidden_bias,
            ParamKey::DecOutProj => &mut self.decoder.out_proj,
            ParamKey::DecOutBias => &mut self.decoder.out_bias,
            ParamKey::DecCopyScale => &mut self.decoder.copy_scale,
        }
    }
}

/// Checks the `<eos>`-terminated response id sequence the decoder scores.
fn check_target(dims: &Dims, y_ids: &[TokenId]) -> Result<()> {
    if y_ids.is_empty() || *y_ids.last().unwrap() != marker::EOS {
        return Err(Error::invalid(
            "decoder target must be non-empty and terminated by <eos>",
        ));
    }
    if let Some(&bad) = y_ids.iter().find(|&&t| t >= dims.vocab) {
        return Err(Error::invalid(format!(
            "target token id {} out of vocabulary {}",
            bad, dims.vocab
        )));
    }
    Ok(())
}

/// Mean-pooled decoder embeddings of the context and document segments.
pub fn decoder_pools(
    params: &DecoderParams,
    x_ids: &[TokenId],
    z_ids: &[TokenId],
) -> Result<(Vec<f64>, Vec<f64>)> {
    Ok((
        mean_pool_rows(&params.embedding, x_ids)?,
        mean_pool_rows(&params.embedding, z_ids)?,
    ))
}

/// The additive logit bonus for one document: copy_scale on every
/// vocabulary id that occurs in the body, zero elsewhere. Constant across
/// decoding steps, so callers compute it once per (instance, document).
pub fn copy_bonus(params: &DecoderParams, vocab: usize, z_ids: &[TokenId]) -> Result<Vec<f64>> {
    let scale = params.copy_scale.as_scalar()?;
    let mut bonus = vec![0.0; vocab];
    for &id in z_ids {
        if id >= vocab {
            return Err(Error::invalid(format!(
                "token id {} out of vocabulary {}",
                id, vocab
            )));
        }
        bonus[id] = scale;
    }
    Ok(bonus)
}

/// Log-probabilities over the vocabulary for the next token given the
/// previous one, with the pooled context/document vectors and the document
/// copy bonus precomputed.
pub fn decoder_step_logprobs(
    params: &DecoderParams,
    prev: TokenId,
    xbar: &[f64],
    zbar: &[f64],
    bonus: &[f64],
) -> Result<Vec<f64>> {
    let emb = params.embedding.row(prev)?;
    let h_dim = params.prev_map.shape()[0];
    let e_dim = params.prev_map.shape()[1];
    let mut pre = matvec_slice(params.prev_map.values(), h_dim, e_dim, emb);
    let from_x = matvec_slice(params.context_map.values(), h_dim, e_dim, xbar);
    let from_z = matvec_slice(params.doc_map.values(), h_dim, e_dim, zbar);
    for i in 0..h_dim {
        pre[i] += from_x[i] + from_z[i] + params.hidden_bias.values()[i];
    }
    let hidden: Vec<f64> = pre.into_iter().map(f64::tanh).collect();
    let v = params.out_proj.shape()[0];
    let mut logits = matvec_slice(params.out_proj.values(), v, h_dim, &hidden);
    for (l, b) in logits.iter_mut().zip(params.out_bias.values()) {
        *l += b;
    }
    for (l, c) in logits.iter_mut().zip(bonus) {
        *l += c;
    }
    Ok(log_softmax_slice(&logits))
}

/// Token-factorized log-likelihood of the target: the sum over positions
/// of the step log-probability, starting from `<bos>`.
pub fn decoder_log_likelihood(
    dims: &Dims,
    params: &DecoderParams,
    x_ids: &[TokenId],
    z_ids: &[TokenId],
    y_ids: &[TokenId],
) -> Result<f64> {
    check_target(dims, y_ids)?;
    let (xbar, zbar) = decoder_pools(params, x_ids, z_ids)?;
    let bonus = copy_bonus(params, dims.vocab, z_ids)?;
    let mut prev = marker::BOS;
    let mut total = 0.0;
    for &y in y_ids {
        let logprobs = decoder_step_logprobs(params, prev, &xbar, &zbar, &bonus)?;
        total += logprobs[y];
        prev = y;
    }
    Ok(total)
}

/// Encoder parameters registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub embedding: ValueId,
    pub proj: ValueId,
    pub bias: ValueId,
}

impl EncoderVars {
    pub fn on_tape(tape: &mut Tape, params: &EncoderParams) -> Self {
        EncoderVars {
            embedding: tape.param(params.embedding.clone()),
            proj: tape.param(params.proj.clone()),
            bias: tape.param(params.bias.clone()),
        }
    }

    /// Tape twin of [`encode_ids`].
    pub fn forward(&self, tape: &mut Tape, ids: &[TokenId]) -> Result<ValueId> {
        let rows = tape.gather_rows(self.embedding, ids)?;
        let pooled = tape.mean_pool_rows(rows)?;
        let projected = tape.matvec(self.proj, pooled)?;
        tape.add(projected, self.bias)
    }
}

/// Decoder parameters registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct DecoderVars {
    pub embedding: ValueId,
    pub prev_map: ValueId,
    pub context_map: ValueId,
    pub doc_map: ValueId,
    pub hidden_bias: ValueId,
    pub out_proj: ValueId,
    pub out_bias: ValueId,
    pub copy_scale: ValueId,
}

impl DecoderVars {
    pub fn on_tape(tape: &mut Tape, params: &DecoderParams) -> Self {
        DecoderVars {
            embedding: tape.param(params.embedding.clone()),
            prev_map: tape.param(params.prev_map.clone()),
            context_map: tape.param(params.context_map.clone()),
            doc_map: tape.param(params.doc_map.clone()),
            hidden_bias: tape.param(params.hidden_bias.clone()),
            out_proj: tape.param(params.out_proj.clone()),
            out_bias: tape.param(params.out_bias.clone()),
            copy_scale: tape.param(params.copy_scale.clone()),
        }
    }

    /// Tape twin of [`decoder_log_likelihood`].
    pub fn log_likelihood(
        &self,
        tape: &mut Tape,
        dims: &Dims,
        x_ids: &[TokenId],
        z_ids: &[TokenId],
        y_ids: &[TokenId],
    ) -> Result<ValueId> {
        check_target(dims, y_ids)?;
        let x_rows = tape.gather_rows(self.embedding, x_ids)?;
        let xbar = tape.mean_pool_rows(x_rows)?;
        let z_rows = tape.gather_rows(self.embedding, z_ids)?;
        let zbar = tape.mean_pool_rows(z_rows)?;
        let from_x = tape.matvec(self.context_map, xbar)?;
        let from_z = tape.matvec(self.doc_map, zbar)?;
        let mut shared = tape.add(from_x, from_z)?;
        shared = tape.add(shared, self.hidden_bias)?;
        // 0/1 presence marks, scaled on tape so the gradient reaches the
        // copy weight; elementwise it reproduces copy_bonus exactly.
        let mut marks = vec![0.0; dims.vocab];
        for &id in z_ids {
            if id >= dims.vocab {
                return Err(Error::invalid(format!(
                    "token id {} out of vocabulary {}",
                    id, dims.vocab
                )));
            }
            marks[id] = 1.0;
        }
        let presence = tape.constant(Tensor::vector(marks));
        let bonus = tape.mul_scalar(presence, self.copy_scale)?;

        let mut prev = marker::BOS;
        let mut steps = Vec::with_capacity(y_ids.len());
        for &y in y_ids {
            let prev_rows = tape.gather_rows(self.embedding, &[prev])?;
            let prev_emb = tape.mean_pool_rows(prev_rows)?;
            let from_prev = tape.matvec(self.prev_map, prev_emb)?;
            let pre = tape.add(from_prev, shared)?;
            let hidden = tape.tanh(pre)?;
            let projected = tape.matvec(self.out_proj, hidden)?;
            let mut logits = tape.add(projected, self.out_bias)?;
            logits = tape.add(logits, bonus)?;
            let logprobs = tape.log_softmax(logits)?;
            steps.push(tape.select(logprobs, y)?);
            prev = y;
        }
        let stacked = tape.stack_scalars(&steps)?;
        let ones = tape.constant(Tensor::vector(vec![1.0; y_ids.len()]));
        tape.dot(stacked, ones)
    }
}

/// The trainable half of a bundle registered on one tape, with the key ->
/// tape-id mapping needed to pull a [`GradSet`] out of a backward pass.
#[derive(Debug)]
pub struct BundleVars {
    pub prior: EncoderVars,
    pub posterior: EncoderVars,
    pub decoder: DecoderVars,
    slots: Vec<(ParamKey, ValueId)>,
}

impl BundleVars {
    pub fn on_tape(tape: &mut Tape, bundle: &ModelBundle) -> Self {
        let prior = EncoderVars::on_tape(tape, &bundle.prior);
        let posterior = EncoderVars::on_tape(tape, &bundle.posterior);
        let decoder = DecoderVars::on_tape(tape, &bundle.decoder);
        let slots = vec![
            (ParamKey::PriorEmbedding, prior.embedding),
            (ParamKey::PriorProj, prior.proj),
            (ParamKey::PriorBias, prior.bias),
            (ParamKey::PosteriorEmbedding, posterior.embedding),
            (ParamKey::PosteriorProj, posterior.proj),
            (ParamKey::PosteriorBias, posterior.bias),
            (ParamKey::DecEmbedding, decoder.embedding),
            (ParamKey::DecPrevMap, decoder.prev_map),
            (ParamKey::DecContextMap, decoder.context_map),
            (ParamKey::DecDocMap, decoder.doc_map),
            (ParamKey::DecHiddenBias, decoder.hidden_bias),
            (ParamKey::DecOutProj, decoder.out_proj),
            (ParamKey::DecOutBias, decoder.out_bias),
            (ParamKey::DecCopyScale, decoder.copy_scale),
        ];
        BundleVars {
            prior,
            posterior,
            decoder,
            slots,
        }
    }

    /// Collects gradients for every bundle parameter. Parameters off the
    /// graph (and the frozen document encoder, which is never on a tape)
    /// come back as zeros.
    pub fn grads(&self, gradients: &Gradients, bundle: &ModelBundle) -> GradSet {
        let mut set = GradSet::new();
        for (key, id) in &self.slots {
            set.insert(
                *key,
                gradients.wrt_or_zeros(*id, bundle.param(*key).shape()),
            );
        }
        for key in ParamKey::DOCUMENT {
            set.insert(key, Tensor::zeros(bundle.param(key).shape()));
        }
        set
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"VCKP";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes dims, seed, vocabulary, and all sixteen tensors in `ParamKey`
/// order. Values are little-endian f64, so the round-trip is bit-exact.
pub fn save_checkpoint(path: &Path, bundle: &ModelBundle, vocab: &Vocabulary) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&bundle.seed.to_le_bytes()).map_err(io_err)?;
    for d in [
        bundle.dims.vocab,
        bundle.dims.retrieval,
        bundle.dims.embedding,
        bundle.dims.hidden,
    ] {
        w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
    }
    let words: Vec<String> = (crate::corpus::MARKERS.len()..vocab.len())
        .map(|i| vocab.token(i).to_string())
        .collect();
    w.write_all(&(words.len() as u64).to_le_bytes()).map_err(io_err)?;
    for word in &words {
        let bytes = word.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(bytes).map_err(io_err)?;
    }
    for key in ParamKey::ALL {
        let t = bundle.param(key);
        w.write_all(&(t.shape().len() as u32).to_le_bytes()).map_err(io_err)?;
        for s in t.shape() {
            w.write_all(&(*s as u64).to_le_bytes()).map_err(io_err)?;
        }
        for v in t.values() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelBundle, Vocabulary)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io_err = |e| Error::io(path, e);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::invalid(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4).map_err(io_err)?;
    if u32::from_le_bytes(b4) != CHECKPOINT_VERSION {
        return Err(Error::invalid("unsupported checkpoint version"));
    }
    r.read_exact(&mut b8).map_err(io_err)?;
    let seed = u64::from_le_bytes(b8);
    let mut dim4 = [0usize; 4];
    for d in dim4.iter_mut() {
        r.read_exact(&mut b8).map_err(io_err)?;
        *d = u64::from_le_bytes(b8) as usize;
    }
    let dims = Dims {
        vocab: dim4[0],
        retrieval: dim4[1],
        embedding: dim4[2],
        hidden: dim4[3],
    };

    r.read_exact(&mut b8).map_err(io_err)?;
    let n_words = u64::from_le_bytes(b8) as usize;
    let mut words = Vec::with_capacity(n_words);
    for _ in 0..n_words {
        r.read_exact(&mut b4).map_err(io_err)?;
        let len = u32::from_le_bytes(b4) as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf).map_err(io_err)?;
        words.push(String::from_utf8(buf).map_err(|_| Error::invalid("checkpoint token not utf-8"))?);
    }
    let vocab = Vocabulary::from(words);
    if vocab.len() != dims.vocab {
        return Err(Error::invalid(format!(
            "checkpoint vocabulary size {} does not match stored dims.vocab {}",
            vocab.len(),
            dims.vocab
        )));
    }

    let mut bundle = init_bundle(dims, seed)?;
    for key in ParamKey::ALL {
        r.read_exact(&mut b4).map_err(io_err)?;
        let rank = u32::from_le_bytes(b4) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut b8).map_err(io_err)?;
            shape.push(u64::from_le_bytes(b8) as usize);
        }
        if shape != bundle.param(key).shape() {
            return Err(Error::invalid(format!(
                "checkpoint tensor {:?} has shape {:?}, dims imply {:?}",
                key,
                shape,
                bundle.param(key).shape()
            )));
        }
        let n: usize = shape.iter().product();
        let mut vals = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b8).map_err(io_err)?;
            vals.push(f64::from_le_bytes(b8));
        }
        *bundle.param_mut(key) = Tensor::new(shape, vals)?;
    }
    Ok((bundle, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny_dims(vocab: usize) -> Dims {
        Dims {
            vocab,
            retrieval: 3,
            embedding: 2,
            hidden: 2,
        }
    }

    #[test]
    fn init_is_seed_deterministic_and_bounded() {
        let a = init_bundle(tiny_dims(20), 11).unwrap();
        let b = init_bundle(tiny_dims(20), 11).unwrap();
        let c = init_bundle(tiny_dims(20), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        // Blending two uniform [-0.1, 0.1) draws widens the bound to
        // 0.1 * (r + sqrt(1 - r^2)) <= 0.1 * sqrt(2).
        let bound = 0.1 * std::f64::consts::SQRT_2;
        for key in ParamKey::ALL {
            if key == ParamKey::DecCopyScale {
                continue;
            }
            for v in a.param(key).values() {
                assert!(v.abs() <= bound, "{:?} holds {}", key, v);
            }
        }
        assert_eq!(a.decoder.copy_scale.as_scalar().unwrap(), COPY_INIT);
    }

    #[test]
    fn prior_and_posterior_storage_is_disjoint() {
        let mut bundle = init_bundle(tiny_dims(20), 1).unwrap();
        let posterior_before = bundle.posterior.clone();
        bundle.prior.embedding.values_mut()[0] = 99.0;
        assert_eq!(bundle.posterior, posterior_before);
        // And the initial draws differ, so they never start tied.
        assert_ne!(bundle.prior, bundle.posterior);
    }

    #[test]
    fn query_inits_lean_toward_the_document_encoder() {
        // Correlation across many entries should sit near the blend weight
        // for both query encoders, and at zero between the queries' own
        // residual randomness and each other beyond that shared part.
        let dims = Dims {
            vocab: 300,
            retrieval: 16,
            embedding: 16,
            hidden: 4,
        };
        let bundle = init_bundle(dims, 21).unwrap();
        let corr = |a: &Tensor, b: &Tensor| {
            let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
            for (x, y) in a.values().iter().zip(b.values()) {
                ab += x * y;
                aa += x * x;
                bb += y * y;
            }
            ab / (aa.sqrt() * bb.sqrt())
        };
        let prior_doc = corr(&bundle.prior.embedding, &bundle.document.embedding);
        let post_doc = corr(&bundle.posterior.embedding, &bundle.document.embedding);
        assert!((prior_doc - QUERY_INIT_ALIGNMENT).abs() < 0.05, "{}", prior_doc);
        assert!((post_doc - QUERY_INIT_ALIGNMENT).abs() < 0.05, "{}", post_doc);
    }

    #[test]
    fn posterior_with_copied_params_matches_prior_on_same_ids() {
        let mut bundle = init_bundle(tiny_dims(20), 5).unwrap();
        bundle.posterior = bundle.prior.clone();
        let ids = vec![0usize, 10, 11, 1];
        let a = encode_ids(&bundle.prior, &ids).unwrap();
        let b = encode_ids(&bundle.posterior, &ids).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zeroed_decoder_is_uniform_over_the_vocabulary() {
        let dims = tiny_dims(14);
        let mut bundle = init_bundle(dims, 2).unwrap();
        for key in ParamKey::DECODER {
            *bundle.param_mut(key) = Tensor::zeros(bundle.param(key).shape());
        }
        let y = vec![10, 11, marker::EOS];
        let ll = decoder_log_likelihood(&dims, &bundle.decoder, &[10], &[11], &y).unwrap();
        assert_relative_eq!(ll, -(3.0) * (14.0f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn decoder_matches_a_manual_forward_pass() {
        // Vocabulary of 12 (markers + tokens 10, 11); identity-ish maps so
        // the arithmetic stays hand-checkable.
        let dims = Dims {
            vocab: 12,
            retrieval: 2,
            embedding: 2,
            hidden: 2,
        };
        let mut bundle = init_bundle(dims, 3).unwrap();
        let mut emb = Tensor::zeros(&[12, 2]);
        emb.values_mut()[marker::BOS * 2] = 1.0; // e(<bos>) = [1, 0]
        emb.values_mut()[10 * 2 + 1] = 1.0; // e(10) = [0, 1]
        emb.values_mut()[11 * 2] = 1.0; // e(11) = [1, 1]
        emb.values_mut()[11 * 2 + 1] = 1.0;
        bundle.decoder.embedding = emb;
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        bundle.decoder.prev_map = eye.clone();
        bundle.decoder.context_map = eye.clone();
        bundle.decoder.doc_map = eye;
        bundle.decoder.hidden_bias = Tensor::zeros(&[2]);
        let mut out = Tensor::zeros(&[12, 2]);
        out.values_mut()[11 * 2] = 1.0; // logit(11) = h[0]
        out.values_mut()[marker::EOS * 2 + 1] = 1.0; // logit(<eos>) = h[1]
        bundle.decoder.out_proj = out;
        bundle.decoder.out_bias = Tensor::zeros(&[12]);
        // Gate closed: this check exercises the tanh pathway alone.
        bundle.decoder.copy_scale = Tensor::scalar(0.0);

        // x = [10] so xbar = [0,1]; z = [11] so zbar = [1,1].
        // Step 1 (prev <bos>): pre = [1,0]+[0,1]+[1,1] = [2,2],
        //   h = [tanh 2, tanh 2], logits are tanh 2 at tokens 11 and <eos>,
        //   zero elsewhere.
        // Step 2 (prev 11): pre = [1,1]+[0,1]+[1,1] = [2,3],
        //   h = [tanh 2, tanh 3].
        let t2 = 2.0f64.tanh();
        let t3 = 3.0f64.tanh();
        let z1 = 10.0 + 2.0 * t2.exp();
        let step1 = t2 - z1.ln();
        let z2 = 10.0 + t2.exp() + t3.exp();
        let step2 = t3 - z2.ln();

        let y = vec![11, marker::EOS];
        let got = decoder_log_likelihood(&dims, &bundle.decoder, &[10], &[11], &y).unwrap();
        assert_relative_eq!(got, step1 + step2, epsilon = 1e-12);
    }

    #[test]
    fn copy_scale_shifts_mass_onto_document_tokens() {
        let dims = tiny_dims(16);
        let mut bundle = init_bundle(dims, 6).unwrap();
        let z = vec![13usize, 14];
        let (xbar, zbar) = decoder_pools(&bundle.decoder, &[10], &z).unwrap();

        bundle.decoder.copy_scale = Tensor::scalar(0.0);
        let flat = copy_bonus(&bundle.decoder, dims.vocab, &z).unwrap();
        assert!(flat.iter().all(|b| *b == 0.0));
        let neutral =
            decoder_step_logprobs(&bundle.decoder, marker::BOS, &xbar, &zbar, &flat).unwrap();

        bundle.decoder.copy_scale = Tensor::scalar(2.0);
        let bonus = copy_bonus(&bundle.decoder, dims.vocab, &z).unwrap();
        assert_eq!(bonus[13], 2.0);
        assert_eq!(bonus[12], 0.0);
        let boosted =
            decoder_step_logprobs(&bundle.decoder, marker::BOS, &xbar, &zbar, &bonus).unwrap();

        // In-document tokens gain probability, the rest lose it.
        assert!(boosted[13] > neutral[13]);
        assert!(boosted[14] > neutral[14]);
        assert!(boosted[12] < neutral[12]);

        assert!(copy_bonus(&bundle.decoder, dims.vocab, &[16]).is_err());
    }

    #[test]
    fn tape_and_value_paths_agree_exactly() {
        let dims = tiny_dims(16);
        let mut bundle = init_bundle(dims, 9).unwrap();
        // A live copy weight so the agreement check covers the bonus path.
        bundle.decoder.copy_scale = Tensor::scalar(0.7);
        let x = vec![2usize, 10, 12];
        let z = vec![13usize, 14];
        let y = vec![15usize, 10, marker::EOS];

        let plain = decoder_log_likelihood(&dims, &bundle.decoder, &x, &z, &y).unwrap();
        let mut tape = Tape::new();
        let vars = DecoderVars::on_tape(&mut tape, &bundle.decoder);
        let ll = vars.log_likelihood(&mut tape, &dims, &x, &z, &y).unwrap();
        let taped = tape.scalar_value(ll).unwrap();
        assert_eq!(plain.to_bits(), taped.to_bits());

        let enc_plain = encode_ids(&bundle.prior, &x).unwrap();
        let mut tape2 = Tape::new();
        let evars = EncoderVars::on_tape(&mut tape2, &bundle.prior);
        let out = evars.forward(&mut tape2, &x).unwrap();
        assert_eq!(tape2.value(out).values(), enc_plain.as_slice());
    }

    #[test]
    fn target_must_end_with_eos() {
        let dims = tiny_dims(16);
        let bundle = init_bundle(dims, 1).unwrap();
        let err = decoder_log_likelihood(&dims, &bundle.decoder, &[10], &[11], &[12, 13]);
        assert!(err.is_err());
    }

    #[test]
    fn bundle_grads_cover_all_keys_and_doc_encoder_is_zero() {
        let dims = tiny_dims(16);
        let bundle = init_bundle(dims, 4).unwrap();
        let mut tape = Tape::new();
        let vars = BundleVars::on_tape(&mut tape, &bundle);
        let y = vec![10usize, marker::EOS];
        let ll = vars
            .decoder
            .log_likelihood(&mut tape, &dims, &[11], &[12], &y)
            .unwrap();
        let grads = tape.backward(ll).unwrap();
        let set = vars.grads(&grads, &bundle);
        for key in ParamKey::ALL {
            assert!(set.get(key).is_some(), "{:?} missing", key);
        }
        for key in ParamKey::DOCUMENT {
            assert!(set.get(key).unwrap().values().iter().all(|v| *v == 0.0));
        }
        // The decoder embedding must have received signal.
        let dec = set.get(ParamKey::DecEmbedding).unwrap();
        assert!(dec.values().iter().any(|v| *v != 0.0));
        // The prior was not used in this graph: zeros.
        let prior = set.get(ParamKey::PriorEmbedding).unwrap();
        assert!(prior.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let vocab = Vocabulary::build(["alpha", "beta", "gamma"].into_iter(), 1);
        let dims = Dims {
            vocab: vocab.len(),
            retrieval: 3,
            embedding: 2,
            hidden: 2,
        };
        let bundle = init_bundle(dims, 77).unwrap();
        save_checkpoint(&path, &bundle, &vocab).unwrap();
        let (back, vocab_back) = load_checkpoint(&path).unwrap();
        assert_eq!(back.seed, bundle.seed);
        assert_eq!(back.dims, bundle.dims);
        assert_eq!(vocab_back.len(), vocab.len());
        for i in 0..vocab.len() {
            assert_eq!(vocab.token(i), vocab_back.token(i));
        }
        for key in ParamKey::ALL {
            let a = bundle.param(key);
            let b = back.param(key);
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.values().iter().zip(b.values()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn checkpoint_rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.ckpt");
        std::fs::write(&path, b"VRIXnot a checkpoint").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
